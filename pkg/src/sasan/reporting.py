"""Report rendering: cross-experiment Dice/ASSD tables, Welch comparisons,
loss-curve plots and the attention-map grid figure."""

from __future__ import annotations

import csv
import json
import math
import os

import numpy as np

from .errors import ContractError
from .metrics import MetricsReport, welch_t_test


def _class_set(report: MetricsReport) -> tuple:
    return tuple(report.class_names)


def render_report(
    reports: dict[str, MetricsReport],
    out_dir,
    histories: dict | None = None,
    compare: list[tuple[str, str]] | None = None,
    plots: bool = False,
) -> dict:
    """Write summary.csv / summary.txt (one row per experiment, Dice and ASSD
    per class plus Mean), optional Welch's t-test comparisons and plots.
    Returns the paths written."""
    if not reports:
        raise ContractError("need at least one metrics report")
    os.makedirs(out_dir, exist_ok=True)
    class_sets = {_class_set(r) for r in reports.values()}
    if len(class_sets) != 1:
        raise ContractError(f"experiments have mismatched class sets: {sorted(class_sets)}")
    class_names = list(next(iter(class_sets)))
    written = {}

    rows = []
    for name, report in reports.items():
        agg = report.aggregates()
        row = {"experiment": name}
        for cls in class_names + ["Mean"]:
            for metric in ("dice", "assd"):
                entry = agg[metric].get(cls, {})
                row[f"{cls}_{metric}_mean"] = entry.get("mean")
                row[f"{cls}_{metric}_std"] = entry.get("std")
        rows.append(row)

    csv_path = os.path.join(out_dir, "summary.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    written["summary_csv"] = csv_path

    txt_path = os.path.join(out_dir, "summary.txt")
    with open(txt_path, "w") as f:
        f.write(_format_table(rows, class_names))
    written["summary_txt"] = txt_path

    if compare:
        comp_rows = []
        for name_a, name_b in compare:
            if name_a not in reports or name_b not in reports:
                raise ContractError(f"comparison pair ({name_a}, {name_b}) not among reports")
            sample_a = reports[name_a].sample_mean_dice()
            sample_b = reports[name_b].sample_mean_dice()
            res = welch_t_test(sample_a, sample_b)
            comp_rows.append({"a": name_a, "b": name_b, **res})
        comp_path = os.path.join(out_dir, "comparisons.json")
        with open(comp_path, "w") as f:
            json.dump(comp_rows, f, indent=2)
        written["comparisons"] = comp_path

    if plots and histories:
        written["plots"] = []
        for name, history in histories.items():
            path = os.path.join(out_dir, f"loss_{name}.png")
            plot_history(history, path)
            written["plots"].append(path)
    return written


def _format_table(rows: list[dict], class_names: list[str]) -> str:
    headers = ["experiment"]
    for cls in class_names + ["Mean"]:
        headers += [f"{cls} Dice", f"{cls} ASSD"]
    lines = ["  ".join(f"{h:>16}" for h in headers)]
    for row in rows:
        cells = [f"{row['experiment']:>16}"]
        for cls in class_names + ["Mean"]:
            for metric in ("dice", "assd"):
                mean = row.get(f"{cls}_{metric}_mean")
                std = row.get(f"{cls}_{metric}_std")
                if mean is None:
                    cells.append(f"{'-':>16}")
                elif std is None:
                    cells.append(f"{mean:>16.3f}")
                else:
                    cells.append(f"{f'{mean:.3f}+-{std:.3f}':>16}")
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def plot_history(history, path, val_history=None):
    """Line plot of the per-step loss terms and totals."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = history.rows if hasattr(history, "rows") else history
    if not rows:
        raise ContractError("empty history")
    steps = [r["step"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    axes[0].plot(steps, [r["g_total"] for r in rows], label="generator")
    axes[0].plot(steps, [r["d_total"] for r in rows], label="discriminator")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].legend()
    axes[0].set_title("totals")
    skip = {"step", "epoch", "lr", "g_total", "d_total", "wall_time"}
    for key in rows[0]:
        if key in skip:
            continue
        axes[1].plot(steps, [r[key] for r in rows], label=key, linewidth=0.8)
    axes[1].set_xlabel("step")
    axes[1].legend(fontsize=6, ncol=2)
    axes[1].set_title("terms")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_validation(val_rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not val_rows:
        raise ContractError("no validation rows")
    epochs = [r["epoch"] for r in val_rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r["dice_mean"] for r in val_rows], marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation mean Dice")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def attention_grid(generator, images, path, max_images: int = 4):
    """Figure with one row per image: the input beside its N attention maps."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import torch

    images = images[:max_images]
    with torch.inference_mode():
        maps = generator.attention(images)
    n_img, n_maps = images.shape[0], maps.shape[1]
    fig, axes = plt.subplots(
        n_img, n_maps + 1, figsize=(1.3 * (n_maps + 1), 1.3 * n_img), squeeze=False
    )
    for i in range(n_img):
        axes[i][0].imshow(images[i, 0].numpy(), cmap="gray", vmin=-1, vmax=1)
        axes[i][0].set_ylabel(f"img {i}", fontsize=7)
        for j in range(n_maps):
            axes[i][j + 1].imshow(maps[i, j].numpy(), cmap="viridis", vmin=0, vmax=1)
            if i == 0:
                axes[i][j + 1].set_title(f"m{j}", fontsize=7)
    for ax_row in axes:
        for ax in ax_row:
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fidelity_report_csv(report: MetricsReport, path):
    """Aggregate CSV for the supervised fidelity block."""
    agg = report.aggregates()["fidelity"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "mean", "std", "n_finite", "n_total"])
        for name, entry in agg.items():
            mean = entry.get("mean")
            writer.writerow(
                [
                    name,
                    "" if mean is None or not math.isfinite(mean) else f"{mean:.6f}",
                    "" if entry.get("std") is None else f"{entry['std']:.6f}",
                    entry.get("n", 0),
                    entry.get("n_total", entry.get("n", 0)),
                ]
            )


def mean_column_consistent(report: MetricsReport, tol: float = 1e-9) -> bool:
    """The Mean column equals the unweighted mean of the class columns."""
    agg = report.aggregates()
    class_means = [agg["dice"][c]["mean"] for c in report.class_names]
    return abs(float(np.mean(class_means)) - agg["dice"]["Mean"]["mean"]) <= tol
