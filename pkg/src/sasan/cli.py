"""Batch command-line surface.

Subcommands: gen-data, train, translate, eval-seg, eval-fidelity, ablate,
report, attn-grid. Every run writes a ``run.json`` with the resolved
configuration, seed, version and input digests; output directories are locked
for the duration of the run. Exit codes: 0 ok, 1 bad input / contract
violation, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, experiments, synth, training
from .container import read_container, write_container
from .errors import ConfigurationError, ContractError, SasanError
from .metrics import MetricsReport, evaluate_segmentation_masks, image_fidelity
from .training import TrainConfig, load_train_config

DATA_DIR_ENV = "SASAN_DATA_DIR"


# ---------------------------------------------------------------------------
# plumbing

class OutputLock:
    """Exclusive ownership of an output directory. A lock left by a dead
    process is taken over."""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, ".sasan.lock")
        os.makedirs(out_dir, exist_ok=True)

    def __enter__(self):
        if os.path.exists(self.path):
            try:
                with open(self.path) as f:
                    pid = int(f.read().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid and _pid_alive(pid):
                raise ContractError(f"output directory is locked by running pid {pid} ({self.path})")
            os.unlink(self.path)
        fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except OSError:
            pass
        return False


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_record(out_dir, args: dict, config: dict | None, inputs: list[str]):
    args = {k: v for k, v in args.items() if k != "func"}
    digests = {}
    for path in inputs:
        if path and os.path.isfile(path):
            digests[path] = _sha256(path)
    record = {
        "argv": args,
        "config": config,
        "version": __version__,
        "input_digests": digests,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(os.path.join(out_dir, "run.json"), "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)


def _data_dir(args) -> str:
    if getattr(args, "data", None):
        return args.data
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return env
    raise ConfigurationError(f"no dataset directory: pass --data or set ${DATA_DIR_ENV}")


def _resolve_config(args, dataset=None) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = load_train_config(args.config, base=cfg)
    if dataset is not None and not getattr(args, "config", None):
        cfg.image_size = dataset.spec.image_size
        cfg.num_classes = dataset.spec.num_classes
    if getattr(args, "seed", None) is not None:
        cfg.rng_seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.epochs_total = args.epochs
        cfg.epochs_constant_lr = min(cfg.epochs_constant_lr, args.epochs // 2)
    if getattr(args, "device", "cpu") != "cpu":
        raise ConfigurationError("this build is single-device CPU only (--device cpu)")
    return cfg


def _sorted_image_items(tensors: dict, prefix: str):
    def suffix_key(name):
        tail = name.rsplit("_", 1)[-1]
        return (0, int(tail)) if tail.isdigit() else (1, name)

    names = sorted((n for n in tensors if n.startswith(prefix)), key=suffix_key)
    return [(n, tensors[n]) for n in names]


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    spec = synth.LayoutSpec(
        image_size=args.size,
        num_classes=args.classes,
        num_train=args.train,
        num_test=args.test,
        rng_seed=args.seed,
    )
    prof_a, prof_b = synth.default_profiles(args.classes)
    manifest_path = os.path.join(args.out, "manifest.json")
    with OutputLock(args.out):
        if os.path.exists(manifest_path) and not args.force:
            with open(manifest_path) as f:
                existing = json.load(f)
            if existing == synth.expected_manifest(spec, prof_a, prof_b):
                print(f"dataset already present and identical, skipping ({manifest_path})")
                return 0
        bundle = synth.gen_dataset(spec, prof_a, prof_b)
        synth.save_dataset(bundle, args.out)
        write_run_record(args.out, vars(args), synth.dataset_manifest(bundle)["spec"], [])
        print(f"wrote {spec.num_train}+{spec.num_test} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    data_dir = _data_dir(args)
    dataset = synth.load_dataset(data_dir)
    cfg = _resolve_config(args, dataset)
    with OutputLock(args.out):
        if args.mode in ("evaluator_a", "evaluator_b"):
            oriented = experiments.oriented_dataset(
                dataset, "adapt_b_to_a" if args.mode == "evaluator_b" else "adapt_a_to_b"
            )
            out_path = os.path.join(args.out, "evaluator.sasn")
            experiments.train_evaluator_for(oriented, cfg, out_path=out_path)
            write_run_record(
                args.out, vars(args), training._flatten_config(cfg),
                [os.path.join(data_dir, "manifest.json")],
            )
            print(f"evaluator written to {out_path}")
            return 0
        cfg, extras = experiments.apply_variant(cfg, args.variant)
        spec = experiments.ExperimentSpec(
            name=args.variant,
            mode=args.mode,
            config=cfg,
            variant=args.variant,
            segmenter_fake_aug=extras.get("segmenter_fake_aug", False),
        )
        spec.validate()
        if dataset.spec.image_size != cfg.image_size:
            dataset = experiments.derive_dataset(dataset, cfg.image_size)
        oriented = experiments.oriented_dataset(dataset, spec.mode)
        evaluator = None
        if args.evaluator:
            evaluator = training.load_unet_checkpoint(args.evaluator)
        if spec.mode == "supervised":
            training.train_supervised(oriented, cfg, out_dir=args.out, resume_from=args.resume)
        else:
            training.train_unsupervised(
                oriented, cfg, out_dir=args.out, resume_from=args.resume, evaluator=evaluator
            )
        write_run_record(
            args.out, vars(args), training._flatten_config(cfg),
            [os.path.join(data_dir, "manifest.json")] + ([args.config] if args.config else []),
        )
        print(f"training finished, checkpoint at {os.path.join(args.out, 'checkpoint.sasn')}")
    return 0


def cmd_translate(args) -> int:
    import torch

    models, cfg, _ = training.load_models_from_checkpoint(args.checkpoint)
    tensors = read_container(args.input)
    items = _sorted_image_items(tensors, args.prefix)
    if not items:
        raise ContractError(f"{args.input}: no tensors with prefix '{args.prefix}'")
    gen = models.gen_ba if args.direction == "b2a" else models.gen_ab
    stack = np.stack([arr for _, arr in items]).astype(np.float32)
    if stack.ndim == 3:  # (n, H, W) -> add channel axis
        stack = stack[:, None]
    out = training.translate_images(gen, torch.from_numpy(stack)).numpy()
    out_tensors = {name: out[i] for i, (name, _) in enumerate(items)}
    write_container(args.out, out_tensors, meta={"kind": "translated", "direction": args.direction})
    print(f"translated {len(items)} images -> {args.out}")
    return 0


def cmd_eval_seg(args) -> int:
    evaluator = training.load_unet_checkpoint(args.evaluator)
    import torch

    image_tensors = read_container(args.images)
    label_tensors = read_container(args.labels)
    img_items = _sorted_image_items(image_tensors, args.prefix)
    if not img_items:
        raise ContractError(f"{args.images}: no tensors with prefix '{args.prefix}'")
    preds, gts = [], []
    for name, arr in img_items:
        suffix = name.rsplit("_", 1)[-1]
        lbl_name = f"lbl_{suffix}"
        if lbl_name not in label_tensors:
            raise ContractError(f"{args.labels}: missing '{lbl_name}' for image '{name}'")
        img = arr.astype(np.float32)
        if img.ndim == 2:
            img = img[None]
        pred = training.predict_labels(evaluator, torch.from_numpy(img[None]))[0]
        preds.append(pred)
        gts.append(label_tensors[lbl_name])
    num_classes = evaluator.cfg.num_classes
    report = evaluate_segmentation_masks(np.stack(preds), np.stack(gts), num_classes)
    report.header = {"images": args.images, "labels": args.labels, "evaluator": args.evaluator}
    with OutputLock(args.out):
        report.to_json(os.path.join(args.out, "report.json"))
        report.to_csv(os.path.join(args.out, "report.csv"))
        write_run_record(args.out, vars(args), None, [args.images, args.labels, args.evaluator])
    agg = report.aggregates()
    print(f"mean Dice {agg['dice']['Mean']['mean']:.4f}, mean ASSD {agg['assd']['Mean']['mean']:.4f}")
    return 0


def cmd_eval_fidelity(args) -> int:
    tensors_a = read_container(args.a)
    tensors_b = read_container(args.b)
    items_a = _sorted_image_items(tensors_a, args.prefix)
    if not items_a:
        raise ContractError(f"{args.a}: no tensors with prefix '{args.prefix}'")
    report = MetricsReport(class_names=[], header={"scale": "[0,1] remap of [-1,1]"})
    for name, arr in items_a:
        if name not in tensors_b:
            suffix = name.rsplit("_", 1)[-1]
            matches = [n for n in tensors_b if n.rsplit("_", 1)[-1] == suffix]
            if not matches:
                raise ContractError(f"{args.b}: no counterpart for '{name}'")
            other = tensors_b[matches[0]]
        else:
            other = tensors_b[name]
        report.add_fidelity(image_fidelity(np.squeeze(arr), np.squeeze(other)))
    with OutputLock(args.out):
        report.to_json(os.path.join(args.out, "report.json"))
        from .reporting import fidelity_report_csv

        fidelity_report_csv(report, os.path.join(args.out, "report.csv"))
        write_run_record(args.out, vars(args), None, [args.a, args.b])
    agg = report.aggregates()["fidelity"]
    print(", ".join(f"{k} {v.get('mean', float('nan')):.4f}" for k, v in agg.items()))
    return 0


def cmd_ablate(args) -> int:
    data_dir = _data_dir(args)
    dataset = synth.load_dataset(data_dir)
    cfg = _resolve_config(args, dataset)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in experiments.VARIANTS:
            raise ConfigurationError(
                f"unknown variant '{v}' (registered: {sorted(experiments.VARIANTS)})"
            )
    with OutputLock(args.out):
        results = experiments.run_ablation(variants, dataset, cfg, args.out, mode=args.mode)
        with open(os.path.join(args.out, "ablation.json"), "w") as f:
            json.dump(results, f, indent=2)
        write_run_record(
            args.out, vars(args), training._flatten_config(cfg),
            [os.path.join(data_dir, "manifest.json")] + ([args.config] if args.config else []),
        )
    for name, res in results.items():
        if "dice_translated" in res:
            print(f"{name}: Dice {res['dice_translated']:.4f} (floor {res['dice_no_adaptation']:.4f})")
        else:
            print(f"{name}: done")
    return 0


def cmd_report(args) -> int:
    from .reporting import render_report
    from .training import TrainHistory

    reports: dict[str, MetricsReport] = {}
    if args.from_ablation:
        for entry in sorted(os.listdir(args.from_ablation)):
            path = os.path.join(args.from_ablation, entry, "report.json")
            if os.path.isfile(path):
                reports[entry] = MetricsReport.from_json(path)
    if args.experiments:
        for pair in args.experiments.split(","):
            if "=" not in pair:
                raise ConfigurationError(f"--experiments expects name=path, got '{pair}'")
            name, path = pair.split("=", 1)
            if not os.path.isfile(path):
                raise FileNotFoundError(path)
            reports[name.strip()] = MetricsReport.from_json(path.strip())
    if not reports:
        raise ContractError("no reports found (use --from-ablation or --experiments)")
    histories = {}
    if args.from_ablation:
        for entry in reports:
            hpath = os.path.join(args.from_ablation, entry, "history.csv")
            if os.path.isfile(hpath):
                histories[entry] = TrainHistory.from_csv(hpath)
    compare = []
    if args.compare:
        for pair in args.compare.split(","):
            if ":" not in pair:
                raise ConfigurationError(f"--compare expects a:b, got '{pair}'")
            a, b = pair.split(":", 1)
            compare.append((a.strip(), b.strip()))
    with OutputLock(args.out):
        written = render_report(
            reports, args.out, histories=histories or None,
            compare=compare or None, plots=args.plots,
        )
        write_run_record(args.out, vars(args), None, [])
    print(f"report written to {written['summary_txt']}")
    return 0


def cmd_attn_grid(args) -> int:
    import torch

    from .reporting import attention_grid

    models, _, _ = training.load_models_from_checkpoint(args.checkpoint)
    tensors = read_container(args.images)
    items = _sorted_image_items(tensors, args.prefix)
    if not items:
        raise ContractError(f"{args.images}: no tensors with prefix '{args.prefix}'")
    stack = np.stack([arr for _, arr in items]).astype(np.float32)
    if stack.ndim == 3:
        stack = stack[:, None]
    gen = models.gen_ba if args.direction == "b2a" else models.gen_ab
    attention_grid(gen, torch.from_numpy(stack), args.out, max_images=args.max_images)
    print(f"attention grid written to {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sasan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic two-modality dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--train", type=int, default=400)
    p.add_argument("--test", type=int, default=50)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an adaptation / supervised / evaluator model")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument(
        "--mode",
        default="adapt_a_to_b",
        choices=["adapt_a_to_b", "adapt_b_to_a", "supervised", "evaluator_a", "evaluator_b"],
    )
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--variant", default="final")
    p.add_argument("--resume")
    p.add_argument("--evaluator", help="evaluator checkpoint for per-epoch validation")
    p.add_argument("--device", default="cpu")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="map a container of images through a generator")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--direction", default="b2a", choices=["a2b", "b2a"])
    p.add_argument("--prefix", default="img_")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval-seg", help="score translated images with a frozen evaluator")
    p.add_argument("--evaluator", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prefix", default="img_")
    p.set_defaults(func=cmd_eval_seg)

    p = sub.add_parser("eval-fidelity", help="supervised fidelity metrics for two containers")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prefix", default="img_")
    p.set_defaults(func=cmd_eval_fidelity)

    p = sub.add_parser("ablate", help="run the registered ablation variants")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--variants", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--mode", default="adapt_a_to_b", choices=["adapt_a_to_b", "adapt_b_to_a"])
    p.add_argument("--device", default="cpu")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render Dice/ASSD tables, comparisons and plots")
    p.add_argument("--out", required=True)
    p.add_argument("--from-ablation")
    p.add_argument("--experiments")
    p.add_argument("--compare")
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("attn-grid", help="export the attention-map grid figure")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--direction", default="a2b", choices=["a2b", "b2a"])
    p.add_argument("--prefix", default="img_")
    p.add_argument("--max-images", type=int, default=4)
    p.set_defaults(func=cmd_attn_grid)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename or e}", file=sys.stderr)
        return 1
    except SasanError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
