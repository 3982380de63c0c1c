"""Training procedures: cyclic unpaired adaptation, supervised paired
translation, and the detached evaluator U-Net. One step = one generator
update followed by one discriminator update on the same batch.

All randomness is derived from (seed, epoch, sample index) streams, so a
run is reproducible and a resumed run continues the exact same stream.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import losses
from .container import read_container, write_container
from .errors import ConfigurationError, ContractError, TrainingDiverged
from .losses import AblationFlags, LossWeights, aux_seg_loss, one_hot, unpaired_objective
from .networks import ModelBundle, UNet, UNetConfig, build_models
from .synth import AugmentDraw, DatasetBundle, augment


@dataclass
class TrainConfig:
    epochs_total: int = 100
    epochs_constant_lr: int = 50
    base_lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 2
    weights: LossWeights = field(default_factory=LossWeights)
    no_seg_disc: bool = False
    no_aux: bool = False
    no_reg: bool = False
    num_attention: int = 8
    image_size: int = 64
    num_classes: int = 4
    in_channels: int = 1
    rng_seed: int = 0
    checkpoint_every: int = 25
    validate_every: int = 0
    augment: bool = True
    # detached evaluator training
    unet_epochs: int = 40
    unet_batch: int = 8
    unet_lr: float = 1e-4
    unet_base_channels: int = 32

    def validate(self):
        if self.epochs_constant_lr > self.epochs_total:
            raise ConfigurationError("epochs_constant_lr must be <= epochs_total")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ConfigurationError("base_lr must be > 0")
        if self.num_attention not in (8, 16):
            raise ConfigurationError(f"num_attention must be 8 or 16, got {self.num_attention}")
        self.weights.validate()

    @property
    def flags(self) -> AblationFlags:
        return AblationFlags(self.no_seg_disc, self.no_aux, self.no_reg)


# flat "key = value" config files ------------------------------------------------

def save_train_config(cfg: TrainConfig, path):
    with open(path, "w") as f:
        for key, value in _flatten_config(cfg).items():
            f.write(f"{key} = {value}\n")


def load_train_config(path, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base if base is not None else TrainConfig()
    flat = _flatten_config(cfg)
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in flat:
                raise ConfigurationError(f"{path}:{lineno}: unknown config key '{key}'")
            flat[key] = value
    return _unflatten_config(flat)


def _flatten_config(cfg: TrainConfig) -> dict:
    out = {}
    for key, value in asdict(cfg).items():
        if key == "weights":
            out.update(value)
        else:
            out[key] = value
    return out


def _coerce(value, like):
    if isinstance(like, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("true", "1", "yes"):
            return True
        if str(value).lower() in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"expected a boolean, got '{value}'")
    return type(like)(value)


def _unflatten_config(flat: dict) -> TrainConfig:
    defaults = TrainConfig()
    wkeys = LossWeights().as_dict()
    weights = LossWeights(**{k: float(flat[k]) for k in wkeys})
    kwargs = {}
    for key, default in asdict(defaults).items():
        if key == "weights":
            continue
        kwargs[key] = _coerce(flat[key], default)
    return TrainConfig(weights=weights, **kwargs)


# ---------------------------------------------------------------------------

def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant for the first half, then linear decay to zero."""
    if not 0 <= epoch <= cfg.epochs_total:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.epochs_total}]")
    if epoch < cfg.epochs_constant_lr:
        return cfg.base_lr
    span = cfg.epochs_total - cfg.epochs_constant_lr
    if span == 0:
        return 0.0
    return cfg.base_lr * (cfg.epochs_total - epoch) / span


def _epoch_rng(seed: int, epoch: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([np.uint64(seed), np.uint64(epoch), np.uint64(tag)])


def _aug_rng(seed: int, epoch: int, idx: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(
        [np.uint64(seed), np.uint64(epoch), np.uint64(idx), np.uint64(tag)]
    )


def _prepare_sample(ds, idx, side, cfg, epoch, tag, with_labels):
    image = ds.images_a[idx] if side == "a" else ds.images_b[idx]
    labels = ds.labels[idx]
    if cfg.augment:
        draw = AugmentDraw.sample(_aug_rng(cfg.rng_seed, epoch, idx, tag))
        image, labels = augment(image, labels, rng=None, draw=draw)
    return image, (labels if with_labels else None)


def _batches(order, batch_size):
    for start in range(0, len(order) - batch_size + 1, batch_size):
        yield order[start : start + batch_size]


def make_optimizers(models: ModelBundle, cfg: TrainConfig):
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_g = torch.optim.Adam(list(models.generator_parameters()), lr=cfg.base_lr, betas=betas)
    opt_d = torch.optim.Adam(
        list(models.discriminator_parameters(include_seg=not cfg.no_seg_disc)),
        lr=cfg.base_lr,
        betas=betas,
    )
    return opt_g, opt_d


def _set_requires_grad(module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def train_step_unpaired(
    models: ModelBundle,
    opt_g,
    opt_d,
    batch_a: torch.Tensor,
    labels_a: torch.Tensor | None,
    batch_b: torch.Tensor,
    cfg: TrainConfig,
    labels_b: torch.Tensor | None = None,
    paired: bool = False,
) -> dict:
    """One generator update, then one discriminator update. Returns the merged
    per-term breakdown (floats; generator and discriminator totals separate)."""
    flags = cfg.flags
    for disc in (models.disc_a, models.disc_b, models.disc_seg):
        _set_requires_grad(disc, False)
    g_res = unpaired_objective(
        models, batch_a, batch_b, labels_a, cfg.weights, "generator",
        flags=flags, labels_b=labels_b, paired=paired,
    )
    if not g_res.finite():
        raise TrainingDiverged(f"non-finite generator loss: {g_res.terms}", g_res.terms)
    opt_g.zero_grad(set_to_none=True)
    g_res.total.backward()
    opt_g.step()

    for disc in (models.disc_a, models.disc_b):
        _set_requires_grad(disc, True)
    if not flags.no_seg_disc:
        _set_requires_grad(models.disc_seg, True)
    d_res = unpaired_objective(
        models, batch_a, batch_b, labels_a, cfg.weights, "discriminator",
        flags=flags, labels_b=labels_b, paired=paired, state=g_res.state,
    )
    if not d_res.finite():
        raise TrainingDiverged(f"non-finite discriminator loss: {d_res.terms}", d_res.terms)
    opt_d.zero_grad(set_to_none=True)
    d_res.total.backward()
    opt_d.step()

    row = dict(g_res.terms)
    row.update(d_res.terms)
    row["g_total"] = g_res.total_value
    row["d_total"] = d_res.total_value
    return row


class TrainHistory:
    """Per-step loss rows plus optional per-epoch validation rows."""

    def __init__(self):
        self.rows: list[dict] = []
        self.val_rows: list[dict] = []

    def append(self, row: dict):
        self.rows.append(row)

    def term_columns(self) -> list[str]:
        skip = {"step", "epoch", "lr", "g_total", "d_total", "wall_time"}
        return [k for k in self.rows[0] if k not in skip] if self.rows else []

    def to_csv(self, path):
        if not self.rows:
            return
        cols = list(self.rows[0].keys())
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=cols)
            writer.writeheader()
            writer.writerows(self.rows)

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        hist = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                hist.rows.append(
                    {k: (float(v) if k not in ("step", "epoch") else int(float(v))) for k, v in row.items()}
                )
        return hist

    def val_to_csv(self, path):
        if not self.val_rows:
            return
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(self.val_rows[0].keys()))
            writer.writeheader()
            writer.writerows(self.val_rows)


def _train_loop(
    dataset: DatasetBundle,
    cfg: TrainConfig,
    out_dir: str | None,
    paired: bool,
    resume_from=None,
    evaluator: UNet | None = None,
) -> tuple[ModelBundle, TrainHistory]:
    cfg.validate()
    if dataset.spec.image_size != cfg.image_size:
        raise ConfigurationError(
            f"dataset image size {dataset.spec.image_size} does not match config {cfg.image_size}"
        )
    models = build_models(
        image_size=cfg.image_size,
        num_attention=cfg.num_attention,
        num_classes=cfg.num_classes,
        in_channels=cfg.in_channels,
        seed=cfg.rng_seed,
    )
    opt_g, opt_d = make_optimizers(models, cfg)
    start_epoch = 0
    if resume_from is not None:
        meta = load_checkpoint(resume_from, models, opt_g, opt_d)
        start_epoch = int(meta["epoch"])
    models.train_mode()

    history = TrainHistory()
    train_idx = np.asarray(dataset.train_idx)
    step = start_epoch * (len(train_idx) // cfg.batch_size)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for epoch in range(start_epoch, cfg.epochs_total):
        lr = lr_schedule(epoch, cfg)
        for opt in (opt_g, opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        order_a = _epoch_rng(cfg.rng_seed, epoch, 2).permutation(train_idx)
        if paired:
            order_b = order_a
        else:
            order_b = _epoch_rng(cfg.rng_seed, epoch, 3).permutation(train_idx)
        for idx_a, idx_b in zip(_batches(order_a, cfg.batch_size), _batches(order_b, cfg.batch_size)):
            imgs_a, lbls_a = [], []
            for i in idx_a:
                img, lbl = _prepare_sample(dataset, i, "a", cfg, epoch, 0, with_labels=True)
                imgs_a.append(img)
                lbls_a.append(lbl)
            imgs_b, lbls_b = [], []
            for i in idx_b:
                img, lbl = _prepare_sample(
                    dataset, i, "b", cfg, epoch, 0 if paired else 1, with_labels=paired
                )
                imgs_b.append(img)
                lbls_b.append(lbl)
            batch_a = torch.from_numpy(np.stack(imgs_a))
            batch_b = torch.from_numpy(np.stack(imgs_b))
            labels_a = torch.from_numpy(np.stack(lbls_a).astype(np.int64))
            labels_b = (
                torch.from_numpy(np.stack(lbls_b).astype(np.int64)) if paired else None
            )
            row = train_step_unpaired(
                models, opt_g, opt_d, batch_a, labels_a, batch_b, cfg,
                labels_b=labels_b, paired=paired,
            )
            row = {"step": step, "epoch": epoch, "lr": lr, **row, "wall_time": time.time()}
            history.append(row)
            step += 1
        if evaluator is not None and cfg.validate_every and (epoch + 1) % cfg.validate_every == 0:
            history.val_rows.append(
                {"epoch": epoch, **_validate(models, evaluator, dataset, cfg)}
            )
        if out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(
                os.path.join(out_dir, f"checkpoint_ep{epoch + 1:04d}.sasn"),
                models, opt_g, opt_d, cfg, epoch + 1,
            )
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "checkpoint.sasn"), models, opt_g, opt_d, cfg, cfg.epochs_total)
        history.to_csv(os.path.join(out_dir, "history.csv"))
        history.val_to_csv(os.path.join(out_dir, "val_history.csv"))
    return models, history


def train_unsupervised(
    dataset: DatasetBundle,
    cfg: TrainConfig,
    out_dir=None,
    resume_from=None,
    evaluator: UNet | None = None,
) -> tuple[ModelBundle, TrainHistory]:
    """Cyclic adversarial adaptation; domain-A labels only, A and B batches
    drawn independently."""
    return _train_loop(dataset, cfg, out_dir, paired=False, resume_from=resume_from, evaluator=evaluator)


def train_supervised(
    dataset: DatasetBundle,
    cfg: TrainConfig,
    out_dir=None,
    resume_from=None,
) -> tuple[ModelBundle, TrainHistory]:
    """Paired training: the unpaired objective plus voxel terms on aligned pairs."""
    return _train_loop(dataset, cfg, out_dir, paired=True, resume_from=resume_from)


def _validate(models: ModelBundle, evaluator: UNet, dataset: DatasetBundle, cfg: TrainConfig) -> dict:
    from .metrics import evaluate_segmentation_masks

    models.eval_mode()
    test_idx = dataset.test_idx
    images_b = torch.from_numpy(dataset.images_b[test_idx])
    fake_a = translate_images(models.gen_ba, images_b)
    preds = predict_labels(evaluator, fake_a)
    report = evaluate_segmentation_masks(preds, dataset.labels[test_idx], cfg.num_classes)
    agg = report.aggregates()
    models.train_mode()
    return {
        "dice_mean": agg["dice"]["Mean"]["mean"],
        "assd_mean": agg["assd"]["Mean"]["mean"],
    }


# ---------------------------------------------------------------------------
# inference helpers

def translate_images(generator, images: torch.Tensor, batch: int = 8) -> torch.Tensor:
    """Map a stack of images through one generator (attention + synthesis)."""
    outs = []
    with torch.inference_mode():
        for start in range(0, images.shape[0], batch):
            chunk = images[start : start + batch]
            out, _ = generator(chunk)
            outs.append(out)
    return torch.cat(outs) if outs else images[:0]


def predict_labels(unet: UNet, images: torch.Tensor, batch: int = 8) -> np.ndarray:
    unet.eval()
    preds = []
    with torch.inference_mode():
        for start in range(0, images.shape[0], batch):
            probs = unet(images[start : start + batch])
            preds.append(probs.argmax(dim=1).numpy().astype(np.uint8))
    return np.concatenate(preds) if preds else np.zeros((0,), dtype=np.uint8)


# ---------------------------------------------------------------------------
# the detached evaluator

def train_segmenter(
    real_images: np.ndarray,
    real_labels: np.ndarray,
    num_classes: int,
    cfg: TrainConfig,
    fake_images: np.ndarray | None = None,
    fake_labels: np.ndarray | None = None,
    out_path=None,
) -> tuple[UNet, list[dict]]:
    """Train the detached U-Net with CE + Dice. Optional fake images extend the
    real pool (the fake-augmentation ablation); the model never shares
    parameters with the adaptation networks."""
    if real_images.shape[0] != real_labels.shape[0]:
        raise ConfigurationError("images/labels count mismatch")
    if int(real_labels.max()) >= num_classes:
        raise ConfigurationError(
            f"label id {int(real_labels.max())} out of range for {num_classes} classes"
        )
    if (fake_images is None) != (fake_labels is None):
        raise ConfigurationError("fake images and fake labels must be given together")
    if fake_images is not None:
        if fake_images.shape[0] != fake_labels.shape[0]:
            raise ConfigurationError("fake images/labels count mismatch")
        if int(fake_labels.max()) >= num_classes:
            raise ConfigurationError("fake label id out of range")
        pool_images = np.concatenate([real_images, fake_images])
        pool_labels = np.concatenate([real_labels, fake_labels])
    else:
        pool_images = real_images
        pool_labels = real_labels

    torch.manual_seed(cfg.rng_seed + 101)
    unet = UNet(
        UNetConfig(
            in_channels=cfg.in_channels,
            num_classes=num_classes,
            base_channels=cfg.unet_base_channels,
        )
    )
    opt = torch.optim.Adam(unet.parameters(), lr=cfg.unet_lr)
    n = pool_images.shape[0]
    history = []
    unet.train()
    for epoch in range(cfg.unet_epochs):
        order = _epoch_rng(cfg.rng_seed + 101, epoch, 7).permutation(n)
        epoch_loss, count = 0.0, 0
        for sel in _batches(order, min(cfg.unet_batch, n)):
            imgs, lbls = [], []
            for i in sel:
                img, lbl = pool_images[i], pool_labels[i]
                if cfg.augment:
                    draw = AugmentDraw.sample(_aug_rng(cfg.rng_seed + 101, epoch, int(i), 4))
                    img, lbl = augment(img, lbl, rng=None, draw=draw)
                imgs.append(img)
                lbls.append(lbl)
            x = torch.from_numpy(np.stack(imgs))
            t = one_hot(torch.from_numpy(np.stack(lbls).astype(np.int64)), num_classes)
            probs = torch.softmax(unet.logits(x), dim=1)
            loss = aux_seg_loss(probs, t)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged("non-finite segmenter loss")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            count += 1
        history.append({"epoch": epoch, "loss": epoch_loss / max(count, 1)})
    unet.eval()
    if out_path:
        save_unet_checkpoint(out_path, unet, cfg)
    return unet, history


# ---------------------------------------------------------------------------
# checkpointing

def _module_tensors(prefix: str, module: torch.nn.Module) -> dict:
    out = {}
    for name, p in module.named_parameters():
        out[f"{prefix}.{name}"] = p.detach().numpy()
    for name, b in module.named_buffers():
        out[f"{prefix}.buffer.{name}"] = b.detach().numpy().astype(np.float64)
    return out


def _optimizer_tensors(prefix: str, opt, param_names: dict) -> dict:
    out = {}
    for group in opt.param_groups:
        for p in group["params"]:
            state = opt.state.get(p)
            if not state:
                continue
            pname = param_names[id(p)]
            out[f"{prefix}.{pname}.step"] = np.asarray(
                float(state["step"]), dtype=np.float64
            )
            out[f"{prefix}.{pname}.exp_avg"] = state["exp_avg"].detach().numpy()
            out[f"{prefix}.{pname}.exp_avg_sq"] = state["exp_avg_sq"].detach().numpy()
    return out


def _bundle_param_names(models: ModelBundle) -> dict:
    names = {}
    for mod_name, module in models.adaptation_modules().items():
        for pname, p in module.named_parameters():
            names[id(p)] = f"{mod_name}.{pname}"
    return names


def save_checkpoint(path, models: ModelBundle, opt_g, opt_d, cfg: TrainConfig, epoch: int):
    tensors = {}
    for mod_name, module in models.adaptation_modules().items():
        tensors.update(_module_tensors(mod_name, module))
    names = _bundle_param_names(models)
    if opt_g is not None:
        tensors.update(_optimizer_tensors("opt_g", opt_g, names))
    if opt_d is not None:
        tensors.update(_optimizer_tensors("opt_d", opt_d, names))
    meta = {
        "kind": "adaptation_checkpoint",
        "epoch": int(epoch),
        "config": _flatten_config(cfg),
    }
    write_container(path, tensors, meta=meta)


def load_checkpoint(path, models: ModelBundle, opt_g=None, opt_d=None) -> dict:
    tensors, meta = read_container(path, with_meta=True)
    if not meta or meta.get("kind") != "adaptation_checkpoint":
        raise ContractError(f"{path}: not an adaptation checkpoint")
    name_to_param = {}
    for mod_name, module in models.adaptation_modules().items():
        for pname, p in module.named_parameters():
            name_to_param[f"{mod_name}.{pname}"] = p
        for bname, b in module.named_buffers():
            name_to_param[f"{mod_name}.buffer.{bname}"] = b
    with torch.no_grad():
        for name, p in name_to_param.items():
            if name not in tensors:
                raise ContractError(f"{path}: missing tensor '{name}'")
            arr = tensors[name]
            p.copy_(torch.from_numpy(arr).to(p.dtype))
    for prefix, opt in (("opt_g", opt_g), ("opt_d", opt_d)):
        if opt is None:
            continue
        names = _bundle_param_names(models)
        for group in opt.param_groups:
            for p in group["params"]:
                pname = names[id(p)]
                key = f"{prefix}.{pname}"
                if f"{key}.step" not in tensors:
                    continue
                opt.state[p] = {
                    "step": torch.tensor(float(tensors[f"{key}.step"])),
                    "exp_avg": torch.from_numpy(tensors[f"{key}.exp_avg"]),
                    "exp_avg_sq": torch.from_numpy(tensors[f"{key}.exp_avg_sq"]),
                }
    return meta


def save_unet_checkpoint(path, unet: UNet, cfg: TrainConfig):
    tensors = _module_tensors("unet", unet)
    meta = {
        "kind": "unet_checkpoint",
        "config": {
            "in_channels": unet.cfg.in_channels,
            "num_classes": unet.cfg.num_classes,
            "base_channels": unet.cfg.base_channels,
            "depth": unet.cfg.depth,
        },
        "train_config": _flatten_config(cfg),
    }
    write_container(path, tensors, meta=meta)


def load_unet_checkpoint(path) -> UNet:
    tensors, meta = read_container(path, with_meta=True)
    if not meta or meta.get("kind") != "unet_checkpoint":
        raise ContractError(f"{path}: not an evaluator checkpoint")
    unet = UNet(UNetConfig(**meta["config"]))
    with torch.no_grad():
        for name, p in unet.named_parameters():
            p.copy_(torch.from_numpy(tensors[f"unet.{name}"]))
        for name, b in unet.named_buffers():
            b.copy_(torch.from_numpy(tensors[f"unet.buffer.{name}"]))
    unet.eval()
    return unet


def load_models_from_checkpoint(path) -> tuple[ModelBundle, TrainConfig, int]:
    meta = _peek_meta(path)
    cfg = _unflatten_config(meta["config"])
    models = build_models(
        image_size=cfg.image_size,
        num_attention=cfg.num_attention,
        num_classes=cfg.num_classes,
        in_channels=cfg.in_channels,
        seed=cfg.rng_seed,
    )
    load_checkpoint(path, models)
    models.eval_mode()
    return models, cfg, int(meta["epoch"])


def _peek_meta(path) -> dict:
    from .container import read_meta

    meta = read_meta(path)
    if not meta or meta.get("kind") != "adaptation_checkpoint":
        raise ContractError(f"{path}: not an adaptation checkpoint")
    return meta
