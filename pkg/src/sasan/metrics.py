"""Evaluation metrics: Dice, capped average symmetric surface distance,
image fidelity block (SSIM / PSNR / MAE / RMSE / PCC), attention
orthogonality diagnostic and Welch's t-test. Pure numpy/scipy, not
differentiable; every op works on 2D (H, W) or 3D (D, H, W) masks with
isotropic unit spacing.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, special

from .errors import ContractError

ASSD_CAP = 50.0


def _as_bool_mask(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim not in (2, 3):
        raise ContractError(f"mask must be 2D or 3D, got shape {arr.shape}")
    return arr.astype(bool)


def dice_score(pred, gt) -> float:
    """2|A n B| / (|A| + |B|). Both empty -> 1.0, exactly one empty -> 0.0."""
    pred, gt = _as_bool_mask(pred), _as_bool_mask(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {gt.shape}")
    np_, ng = int(pred.sum()), int(gt.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    inter = int(np.logical_and(pred, gt).sum())
    return 2.0 * inter / (np_ + ng)


def boundary_mask(mask) -> np.ndarray:
    """Cells of the mask with a face-adjacent outside cell; the grid border
    counts as outside."""
    mask = _as_bool_mask(mask)
    interior = ndimage.binary_erosion(
        mask, structure=ndimage.generate_binary_structure(mask.ndim, 1), border_value=0
    )
    return mask & ~interior


def boundary_extract(mask) -> np.ndarray:
    """Coordinates (k, ndim) of the boundary cells, in row-major order."""
    return np.argwhere(boundary_mask(mask))


def assd(pred, gt, cap: float = ASSD_CAP) -> float:
    """Average symmetric surface distance between boundary cell centers,
    clamped to ``cap``; an empty mask on either side yields ``cap`` (the
    missing-label rule)."""
    pred, gt = _as_bool_mask(pred), _as_bool_mask(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        return float(cap)
    bp = boundary_mask(pred)
    bg = boundary_mask(gt)
    # exact Euclidean distance to the nearest boundary cell of the other mask
    dist_to_gt = ndimage.distance_transform_edt(~bg)
    dist_to_pred = ndimage.distance_transform_edt(~bp)
    d_pg = dist_to_gt[bp].mean()
    d_gp = dist_to_pred[bg].mean()
    return float(min((d_pg + d_gp) / 2.0, cap))


def orthogonality_score(maps) -> float:
    """Mean absolute off-diagonal entry of the normalized attention Gram
    matrix; 0 for a disjoint spatial partition, 1 for identical maps."""
    arr = np.asarray(maps, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ContractError(f"expected (N, H, W) or (B, N, H, W) maps, got {arr.shape}")
    n = arr.shape[1]
    if n < 2:
        raise ContractError("need at least 2 attention maps")
    flat = arr.reshape(arr.shape[0], n, -1)
    flat = flat / np.maximum(np.linalg.norm(flat, axis=2, keepdims=True), 1e-12)
    gram = flat @ flat.transpose(0, 2, 1)
    off = np.abs(gram - np.eye(n)).sum(axis=(1, 2)) / (n * (n - 1))
    return float(off.mean())


# ---------------------------------------------------------------------------
# fidelity metrics (computed on the [0, 1] remap of [-1, 1] images)

PSNR_INF = float("inf")  # identical images
PCC_UNDEFINED = float("nan")  # either input constant


def image_fidelity(a, b, ssim_window: int = 7) -> dict:
    """SSIM, PSNR, MAE, RMSE and Pearson correlation of an image pair given in
    [-1, 1]; all values are computed after remapping to [0, 1] (dynamic range 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    a01 = (a + 1.0) / 2.0
    b01 = (b + 1.0) / 2.0
    diff = a01 - b01
    mae = float(np.abs(diff).mean())
    mse = float((diff**2).mean())
    rmse = math.sqrt(mse)
    psnr = PSNR_INF if mse == 0 else 10.0 * math.log10(1.0 / mse)
    ssim_val = _metric_ssim(a01, b01, window=ssim_window)
    fa, fb = a01.ravel(), b01.ravel()
    if fa.std() == 0 or fb.std() == 0:
        pcc = PCC_UNDEFINED
    else:
        pcc = float(np.corrcoef(fa, fb)[0, 1])
    return {"SSIM": ssim_val, "PSNR": psnr, "MAE": mae, "RMSE": rmse, "PCC": pcc}


def _metric_ssim(a01: np.ndarray, b01: np.ndarray, window: int) -> float:
    """Same implementation as the training loss, with the metric config
    (dynamic range 1 on [0, 1] images)."""
    import torch

    from .losses import SsimConfig, ssim

    h, w = a01.shape[-2:]
    ta = torch.from_numpy(np.ascontiguousarray(a01, dtype=np.float64)).reshape(1, -1, h, w)
    tb = torch.from_numpy(np.ascontiguousarray(b01, dtype=np.float64)).reshape(1, -1, h, w)
    return float(ssim(ta, tb, SsimConfig(window=window, dynamic_range=1.0)).item())


# ---------------------------------------------------------------------------
# Welch's t-test

def welch_t_test(sample_a, sample_b) -> dict:
    """Unequal-variance two-sample t-test: t statistic, Welch-Satterthwaite
    degrees of freedom and the two-sided p-value."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ContractError("each sample needs at least 2 values")
    na, nb = a.size, b.size
    va, vb = a.var(ddof=1), b.var(ddof=1)
    mean_diff = a.mean() - b.mean()
    if va == 0 and vb == 0:
        if mean_diff == 0:
            return {"t": 0.0, "df": float(na + nb - 2), "p": 1.0}
        return {"t": math.copysign(math.inf, mean_diff), "df": float(na + nb - 2), "p": 0.0}
    sa, sb = va / na, vb / nb
    t = mean_diff / math.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa**2 / (na - 1) + sb**2 / (nb - 1))
    p = 2.0 * float(special.stdtr(df, -abs(t)))
    return {"t": float(t), "df": float(df), "p": p}


# ---------------------------------------------------------------------------
# report assembly

def _agg(values: list[float]) -> dict:
    vals = np.asarray(values, dtype=np.float64)
    out = {"mean": float(vals.mean()) if vals.size else PCC_UNDEFINED, "n": int(vals.size)}
    if vals.size >= 2:
        out["std"] = float(vals.std(ddof=1))
    return out


@dataclass
class MetricsReport:
    """Per-sample metric arrays plus their aggregates.

    ``dice``/``assd`` map class name -> list of per-sample values; the
    fidelity block maps metric name -> list of per-sample values.
    """

    class_names: list[str] = field(default_factory=list)
    dice: dict[str, list[float]] = field(default_factory=dict)
    assd: dict[str, list[float]] = field(default_factory=dict)
    fidelity: dict[str, list[float]] = field(default_factory=dict)
    header: dict = field(default_factory=dict)

    def add_sample(self, dice_per_class: dict[str, float], assd_per_class: dict[str, float]):
        for cls, v in dice_per_class.items():
            self.dice.setdefault(cls, []).append(float(v))
        for cls, v in assd_per_class.items():
            self.assd.setdefault(cls, []).append(float(v))

    def add_fidelity(self, record: dict[str, float]):
        for k, v in record.items():
            self.fidelity.setdefault(k, []).append(float(v))

    def sample_mean_dice(self) -> list[float]:
        """Per-sample Dice averaged over classes (for significance testing)."""
        if not self.dice:
            return []
        arrays = [self.dice[c] for c in self.class_names if c in self.dice]
        return [float(np.mean(col)) for col in zip(*arrays)]

    def aggregates(self) -> dict:
        agg = {"dice": {}, "assd": {}, "fidelity": {}}
        for cls in self.class_names:
            if cls in self.dice:
                agg["dice"][cls] = _agg(self.dice[cls])
            if cls in self.assd:
                agg["assd"][cls] = _agg(self.assd[cls])
        if self.dice:
            agg["dice"]["Mean"] = _agg(self.sample_mean_dice())
        if self.assd:
            arrays = [self.assd[c] for c in self.class_names if c in self.assd]
            agg["assd"]["Mean"] = _agg([float(np.mean(col)) for col in zip(*arrays)])
        for k, vals in self.fidelity.items():
            finite = [v for v in vals if math.isfinite(v)]
            agg["fidelity"][k] = _agg(finite)
            agg["fidelity"][k]["n_total"] = len(vals)
        return agg

    def to_json(self, path):
        payload = {
            "header": self.header,
            "class_names": self.class_names,
            "per_sample": {"dice": self.dice, "assd": self.assd, "fidelity": self.fidelity},
            "aggregates": self.aggregates(),
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)

    @classmethod
    def from_json(cls, path) -> "MetricsReport":
        with open(path) as f:
            payload = json.load(f)
        rep = cls(class_names=list(payload["class_names"]), header=payload.get("header", {}))
        per = payload["per_sample"]
        rep.dice = {k: [_parse_float(v) for v in vs] for k, vs in per.get("dice", {}).items()}
        rep.assd = {k: [_parse_float(v) for v in vs] for k, vs in per.get("assd", {}).items()}
        rep.fidelity = {
            k: [_parse_float(v) for v in vs] for k, vs in per.get("fidelity", {}).items()
        }
        return rep

    def to_csv(self, path):
        """Aggregate table: one row per class plus Mean, mirroring the
        Dice/ASSD layout of the summary tables."""
        agg = self.aggregates()
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["class", "dice_mean", "dice_std", "assd_mean", "assd_std", "n"])
            for cls in self.class_names + ["Mean"]:
                d = agg["dice"].get(cls, {})
                s = agg["assd"].get(cls, {})
                writer.writerow(
                    [
                        cls,
                        _fmt(d.get("mean")),
                        _fmt(d.get("std")),
                        _fmt(s.get("mean")),
                        _fmt(s.get("std")),
                        d.get("n", s.get("n", 0)),
                    ]
                )


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def _parse_float(v) -> float:
    return float(v)


def evaluate_segmentation_masks(pred_labels, gt_labels, num_classes: int, class_names=None) -> MetricsReport:
    """Per-sample, per-foreground-class Dice and capped ASSD of predicted
    label maps against ground truth."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ContractError(f"shape mismatch {pred_labels.shape} vs {gt_labels.shape}")
    if class_names is None:
        class_names = [f"class_{c}" for c in range(1, num_classes)]
    report = MetricsReport(class_names=list(class_names))
    for pred, gt in zip(pred_labels, gt_labels):
        d, s = {}, {}
        for c in range(1, num_classes):
            name = class_names[c - 1]
            d[name] = dice_score(pred == c, gt == c)
            s[name] = assd(pred == c, gt == c)
        report.add_sample(d, s)
    return report
