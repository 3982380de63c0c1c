"""Experiment orchestration: the registered ablation variants and the
adaptation pipeline (train, translate, train evaluator, score)."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import synth, training
from .errors import ConfigurationError
from .losses import LossWeights
from .metrics import MetricsReport, evaluate_segmentation_masks, image_fidelity
from .networks import UNet
from .synth import DatasetBundle
from .training import TrainConfig

MODES = ("adapt_a_to_b", "adapt_b_to_a", "supervised")

# variant name -> (TrainConfig overrides, experiment-level extras)
VARIANTS: dict[str, tuple[dict, dict]] = {
    "final": ({}, {}),
    "no_seg_disc": ({"no_seg_disc": True}, {}),
    "no_aux": ({"no_aux": True}, {}),
    "no_reg": ({"no_reg": True}, {}),
    "attn16": ({"num_attention": 16}, {}),
    "lowres": ({"image_size": "half"}, {}),
    "reg5": ({"lambda_reg": 5.0}, {}),
    "aux6": ({"lambda_aux": 6.0}, {}),
    "with_aug": ({}, {"segmenter_fake_aug": True}),
    "no_aug": ({}, {"segmenter_fake_aug": False}),
}


@dataclass
class ExperimentSpec:
    name: str
    mode: str = "adapt_a_to_b"
    config: TrainConfig = field(default_factory=TrainConfig)
    dataset_path: str = ""
    variant: str = "final"
    segmenter_fake_aug: bool = False

    def validate(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode '{self.mode}' (choose from {MODES})")
        if self.variant not in VARIANTS:
            raise ConfigurationError(
                f"unknown variant '{self.variant}' (registered: {sorted(VARIANTS)})"
            )
        self.config.validate()


def apply_variant(cfg: TrainConfig, variant: str) -> tuple[TrainConfig, dict]:
    """Return a new config with the variant's overrides plus its extras."""
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant '{variant}' (registered: {sorted(VARIANTS)})")
    overrides, extras = VARIANTS[variant]
    cfg = dataclasses.replace(cfg, weights=dataclasses.replace(cfg.weights))
    for key, value in overrides.items():
        if key in ("lambda_reg", "lambda_aux"):
            setattr(cfg.weights, key, value)
        elif key == "image_size" and value == "half":
            cfg.image_size = cfg.image_size // 2
        else:
            setattr(cfg, key, value)
    return cfg, dict(extras)


def oriented_dataset(dataset: DatasetBundle, mode: str) -> DatasetBundle:
    """View of the dataset with 'domain A' being the labeled source of the run.
    ``adapt_b_to_a`` swaps the modalities so the usual 'labels on A' training
    path applies unchanged."""
    if mode == "adapt_b_to_a":
        return dataclasses.replace(
            dataset,
            images_a=dataset.images_b,
            images_b=dataset.images_a,
            profile_a=dataset.profile_b,
            profile_b=dataset.profile_a,
        )
    return dataset


def derive_dataset(dataset: DatasetBundle, image_size: int) -> DatasetBundle:
    """Regenerate the dataset at another resolution from the same seed and
    profiles (the low-resolution ablation)."""
    spec = dataclasses.replace(dataset.spec, image_size=image_size)
    return synth.gen_dataset(spec, dataset.profile_a, dataset.profile_b)


def train_evaluator_for(
    dataset: DatasetBundle,
    cfg: TrainConfig,
    out_path=None,
    fake_images: np.ndarray | None = None,
    fake_labels: np.ndarray | None = None,
) -> UNet:
    """Detached evaluator trained on the labeled (A) training split."""
    idx = dataset.train_idx
    unet, _ = training.train_segmenter(
        dataset.images_a[idx],
        dataset.labels[idx],
        cfg.num_classes,
        cfg,
        fake_images=fake_images,
        fake_labels=fake_labels,
        out_path=out_path,
    )
    return unet


def attention_pseudo_labels(generator, images: torch.Tensor, batch: int = 8) -> np.ndarray:
    """Hard labels from the attention module's auxiliary classifier."""
    outs = []
    with torch.inference_mode():
        for start in range(0, images.shape[0], batch):
            chunk = images[start : start + batch]
            maps = generator.attention(chunk)
            outs.append(generator.aux(maps).argmax(dim=1).numpy().astype(np.uint8))
    return np.concatenate(outs)


def segmentation_report(
    models, evaluator: UNet, dataset: DatasetBundle, cfg: TrainConfig
) -> tuple[MetricsReport, MetricsReport]:
    """Score the evaluator on raw target-domain test images (the no-adaptation
    floor) and on their B->A translations."""
    test_idx = dataset.test_idx
    images_b = torch.from_numpy(dataset.images_b[test_idx])
    gt = dataset.labels[test_idx]
    preds_raw = training.predict_labels(evaluator, images_b)
    report_raw = evaluate_segmentation_masks(preds_raw, gt, cfg.num_classes)
    fake_a = training.translate_images(models.gen_ba, images_b)
    preds_tr = training.predict_labels(evaluator, fake_a)
    report_tr = evaluate_segmentation_masks(preds_tr, gt, cfg.num_classes)
    return report_raw, report_tr


def fidelity_report(models, dataset: DatasetBundle) -> MetricsReport:
    """Supervised-setting fidelity block: translate test A and compare with the
    paired real B."""
    test_idx = dataset.test_idx
    images_a = torch.from_numpy(dataset.images_a[test_idx])
    fake_b = training.translate_images(models.gen_ab, images_a).numpy()
    report = MetricsReport(class_names=[], header={"scale": "[0,1] remap of [-1,1]"})
    for fake, real in zip(fake_b, dataset.images_b[test_idx]):
        report.add_fidelity(image_fidelity(fake[0], real[0]))
    return report


def run_experiment(spec: ExperimentSpec, dataset: DatasetBundle, out_dir: str) -> dict:
    """Full pipeline for one experiment; returns summary paths and scores."""
    spec.validate()
    cfg = spec.config
    os.makedirs(out_dir, exist_ok=True)
    if dataset.spec.image_size != cfg.image_size:
        dataset = derive_dataset(dataset, cfg.image_size)
    dataset = oriented_dataset(dataset, spec.mode)

    result: dict = {"name": spec.name, "mode": spec.mode, "variant": spec.variant}
    if spec.mode == "supervised":
        models, _ = training.train_supervised(dataset, cfg, out_dir=out_dir)
        models.eval_mode()
        report = fidelity_report(models, dataset)
        report.header["experiment"] = spec.name
        report.to_json(os.path.join(out_dir, "report.json"))
        from .reporting import fidelity_report_csv

        fidelity_report_csv(report, os.path.join(out_dir, "report.csv"))
        agg = report.aggregates()["fidelity"]
        result["fidelity"] = {k: v.get("mean") for k, v in agg.items()}
        return result

    models, _ = training.train_unsupervised(dataset, cfg, out_dir=out_dir)
    models.eval_mode()

    fake_images = fake_labels = None
    if spec.segmenter_fake_aug:
        train_b = torch.from_numpy(dataset.images_b[dataset.train_idx])
        fake_a_train = training.translate_images(models.gen_ba, train_b)
        fake_images = fake_a_train.numpy()
        fake_labels = attention_pseudo_labels(models.gen_ab, fake_a_train)
    evaluator = train_evaluator_for(
        dataset,
        cfg,
        out_path=os.path.join(out_dir, "evaluator.sasn"),
        fake_images=fake_images,
        fake_labels=fake_labels,
    )
    report_raw, report_tr = segmentation_report(models, evaluator, dataset, cfg)
    report_tr.header["experiment"] = spec.name
    report_tr.to_json(os.path.join(out_dir, "report.json"))
    report_tr.to_csv(os.path.join(out_dir, "report.csv"))
    report_raw.header["experiment"] = f"{spec.name}_no_adaptation"
    report_raw.to_json(os.path.join(out_dir, "report_no_adaptation.json"))
    result["dice_translated"] = report_tr.aggregates()["dice"]["Mean"]["mean"]
    result["dice_no_adaptation"] = report_raw.aggregates()["dice"]["Mean"]["mean"]
    result["assd_translated"] = report_tr.aggregates()["assd"]["Mean"]["mean"]
    return result


def run_ablation(
    variants: list[str],
    dataset: DatasetBundle,
    base_cfg: TrainConfig,
    out_dir: str,
    mode: str = "adapt_a_to_b",
) -> dict:
    """Run the registered variants sequentially, each in its own directory."""
    results = {}
    for variant in variants:
        cfg, extras = apply_variant(base_cfg, variant)
        spec = ExperimentSpec(
            name=variant,
            mode=mode,
            config=cfg,
            variant=variant,
            segmenter_fake_aug=extras.get("segmenter_fake_aug", False),
        )
        results[variant] = run_experiment(spec, dataset, os.path.join(out_dir, variant))
    return results
