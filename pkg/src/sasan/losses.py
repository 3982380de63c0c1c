"""Differentiable loss terms and the combined unpaired objective.

Sign conventions: discriminators score real samples toward 1 and fakes toward
0; the discriminator side of the min-max is implemented as the usual
least-squares loss it minimizes. The segmentation discriminator's real term is
doubled relative to its two fake terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F

from .errors import ContractError

LOG_EPS = 1e-8
NORM_EPS = 1e-8


@dataclass
class LossWeights:
    lambda_c: float = 10.0
    lambda_id: float = 2.5
    lambda_reg: float = 1.0
    lambda_aux: float = 0.1
    lambda_voxel: float = 10.0  # supervised mode only

    def validate(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ContractError(f"{name} must be >= 0, got {value}")

    def as_dict(self):
        return asdict(self)


@dataclass
class AblationFlags:
    no_seg_disc: bool = False
    no_aux: bool = False
    no_reg: bool = False


@dataclass
class SsimConfig:
    window: int = 7
    dynamic_range: float = 2.0  # images live in [-1, 1]

    @property
    def eps1(self) -> float:
        return (0.01 * self.dynamic_range) ** 2

    @property
    def eps2(self) -> float:
        return (0.03 * self.dynamic_range) ** 2


def _mse_to(scores: torch.Tensor, target: float) -> torch.Tensor:
    return ((scores - target) ** 2).mean()


def lsgan_loss(scores_real, scores_fake, side: str, real_weight: float = 1.0) -> torch.Tensor:
    """Least-squares adversarial loss over patch score grids.

    ``scores_fake`` may be a single grid or a sequence of grids (the
    segmentation discriminator sees two fake streams)."""
    if side not in ("generator", "discriminator"):
        raise ContractError(f"side must be 'generator' or 'discriminator', got '{side}'")
    fakes = scores_fake if isinstance(scores_fake, (list, tuple)) else [scores_fake]
    if side == "generator":
        total = sum(_mse_to(f, 1.0) for f in fakes)
    else:
        if scores_real is None:
            raise ContractError("discriminator side needs real scores")
        total = real_weight * _mse_to(scores_real, 1.0) + sum(_mse_to(f, 0.0) for f in fakes)
    return total


def ssim(a: torch.Tensor, b: torch.Tensor, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """Mean structural similarity over all valid windows; symmetric in (a, b)."""
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    k = cfg.window
    if a.shape[-1] < k or a.shape[-2] < k:
        raise ContractError(f"{k}x{k} window larger than image {tuple(a.shape[-2:])}")
    mu_a = F.avg_pool2d(a, k, stride=1)
    mu_b = F.avg_pool2d(b, k, stride=1)
    var_a = F.avg_pool2d(a * a, k, stride=1) - mu_a * mu_a
    var_b = F.avg_pool2d(b * b, k, stride=1) - mu_b * mu_b
    cov = F.avg_pool2d(a * b, k, stride=1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + cfg.eps1) * (2 * cov + cfg.eps2)
    den = (mu_a * mu_a + mu_b * mu_b + cfg.eps1) * (var_a + var_b + cfg.eps2)
    return (num / den).mean()


def cycle_loss(x: torch.Tensor, x_rec: torch.Tensor, ssim_cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """L1 plus SSIM penalty on the cyclic reconstruction."""
    if x.shape != x_rec.shape:
        raise ContractError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    return (x - x_rec).abs().mean() + (1.0 - ssim(x_rec, x, ssim_cfg))


def identity_loss(y: torch.Tensor, y_id: torch.Tensor) -> torch.Tensor:
    if y.shape != y_id.shape:
        raise ContractError(f"shape mismatch {tuple(y.shape)} vs {tuple(y_id.shape)}")
    return (y_id - y).abs().mean()


def voxel_loss(fake: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    if fake.shape != real.shape:
        raise ContractError(f"shape mismatch {tuple(fake.shape)} vs {tuple(real.shape)}")
    return (fake - real).abs().mean()


def attention_reg_loss(maps: torch.Tensor) -> torch.Tensor:
    """Frobenius distance between the Gram matrix of the row-normalized
    flattened maps and the identity, averaged over the batch."""
    if maps.dim() == 3:
        maps = maps.unsqueeze(0)
    if maps.shape[1] < 2:
        raise ContractError("attention regularization needs at least 2 maps")
    flat = maps.flatten(2)
    flat = flat / (flat.norm(dim=2, keepdim=True) + NORM_EPS)
    gram = torch.bmm(flat, flat.transpose(1, 2))
    eye = torch.eye(maps.shape[1], dtype=maps.dtype, device=maps.device)
    return (gram - eye).pow(2).sum(dim=(1, 2)).sqrt().mean()


def _check_one_hot(target: torch.Tensor):
    if not torch.logical_or(target == 0, target == 1).all():
        raise ContractError("aux target must be one-hot (entries in {0, 1})")
    if not (target.sum(dim=1) == 1).all():
        raise ContractError("aux target must be one-hot (per-pixel class sums of 1)")


def aux_seg_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Cross-entropy plus Dice loss of per-pixel class probabilities against a
    one-hot target. CE is normalized per pixel; Dice is summed over classes.
    A class absent from both inputs contributes a Dice loss of 0."""
    if pred.dim() == 3:
        pred = pred.unsqueeze(0)
    if target.dim() == 3:
        target = target.unsqueeze(0)
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    _check_one_hot(target)
    n, _, h, w = pred.shape
    ce = -(target * torch.log(pred + LOG_EPS)).sum() / (n * h * w)
    inter = (target * pred).sum(dim=(2, 3))
    denom = (target + pred).sum(dim=(2, 3))
    dsc_per_class = 1.0 - 2.0 * inter / denom.clamp_min(LOG_EPS)
    dsc_per_class = torch.where(denom > 0, dsc_per_class, torch.zeros_like(dsc_per_class))
    dsc = dsc_per_class.sum(dim=1).mean()
    return ce + dsc


def one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(B, H, W) integer labels -> (B, C, H, W) float one-hot."""
    return F.one_hot(labels.long(), num_classes).permute(0, 3, 1, 2).to(torch.float32)


# ---------------------------------------------------------------------------
# combined unpaired objective

@dataclass
class TranslationState:
    """Every tensor the step computes once and both objective sides reuse."""

    maps_a: torch.Tensor  # A-side attention on real A
    maps_b: torch.Tensor
    maps_fake_a: torch.Tensor  # A-side attention on fake A
    maps_fake_b: torch.Tensor
    fake_a: torch.Tensor
    fake_b: torch.Tensor
    rec_a: torch.Tensor
    rec_b: torch.Tensor
    id_a: torch.Tensor
    id_b: torch.Tensor
    aux_a_real: torch.Tensor  # A-side classifier on maps_a
    aux_a_fake: torch.Tensor
    aux_b_real: torch.Tensor
    aux_b_fake: torch.Tensor


@dataclass
class ObjectiveResult:
    total: torch.Tensor  # backward carrier
    total_value: float  # exact sum of the breakdown, reported everywhere
    terms: dict[str, float]
    weights: dict[str, float]
    state: TranslationState | None = None

    def finite(self) -> bool:
        return math.isfinite(self.total_value)


def compute_translation_state(models, batch_a, batch_b) -> TranslationState:
    gen_ab, gen_ba = models.gen_ab, models.gen_ba
    maps_a = gen_ab.attention(batch_a)
    maps_b = gen_ba.attention(batch_b)
    fake_b = gen_ab.synthesis(batch_a, maps_a)
    fake_a = gen_ba.synthesis(batch_b, maps_b)
    maps_fake_a = gen_ab.attention(fake_a)
    maps_fake_b = gen_ba.attention(fake_b)
    rec_a = gen_ba.synthesis(fake_b, maps_fake_b)
    rec_b = gen_ab.synthesis(fake_a, maps_fake_a)
    id_b = gen_ab.synthesis(batch_b, gen_ab.attention(batch_b))
    id_a = gen_ba.synthesis(batch_a, gen_ba.attention(batch_a))
    return TranslationState(
        maps_a=maps_a,
        maps_b=maps_b,
        maps_fake_a=maps_fake_a,
        maps_fake_b=maps_fake_b,
        fake_a=fake_a,
        fake_b=fake_b,
        rec_a=rec_a,
        rec_b=rec_b,
        id_a=id_a,
        id_b=id_b,
        aux_a_real=gen_ab.aux(maps_a),
        aux_a_fake=gen_ab.aux(maps_fake_a),
        aux_b_real=gen_ba.aux(maps_b),
        aux_b_fake=gen_ba.aux(maps_fake_b),
    )


def _pseudo_label(prob: torch.Tensor) -> torch.Tensor:
    # hard self-label from the detached prediction
    with torch.no_grad():
        return one_hot(prob.argmax(dim=1), prob.shape[1])


def unpaired_objective(
    models,
    batch_a: torch.Tensor,
    batch_b: torch.Tensor,
    labels_a: torch.Tensor | None,
    weights: LossWeights,
    side: str,
    flags: AblationFlags = AblationFlags(),
    labels_b: torch.Tensor | None = None,
    paired: bool = False,
    state: TranslationState | None = None,
) -> ObjectiveResult:
    """Symmetric two-direction objective.

    Adaptation mode (``labels_a`` only): the auxiliary target for real A is the
    ground truth, fake B carries the source labels through the translation,
    fake A gets a hard pseudo label from the A-side classifier itself, and real
    B is supervised only through the segmentation discriminator, whose real
    samples are the domain-A labels. ``paired=True`` adds the voxel terms of
    the supervised setting; only then may ``labels_a`` be omitted entirely (the
    segmentation discriminator and auxiliary terms are dropped with it).
    """
    if side not in ("generator", "discriminator"):
        raise ContractError(f"side must be 'generator' or 'discriminator', got '{side}'")
    weights.validate()
    if labels_a is None and not paired:
        raise ContractError("adaptation mode requires labels for domain A")
    have_labels = labels_a is not None
    use_seg_disc = (not flags.no_seg_disc) and have_labels
    use_aux = (not flags.no_aux) and weights.lambda_aux > 0 and have_labels
    use_reg = (not flags.no_reg) and weights.lambda_reg > 0

    if state is None:
        state = compute_translation_state(models, batch_a, batch_b)
    s = state
    nc = models.num_classes
    onehot_a = one_hot(labels_a, nc) if have_labels else None
    onehot_b = one_hot(labels_b, nc) if labels_b is not None else None
    # real samples for the segmentation discriminator, per translation direction
    seg_real_ab = onehot_b if onehot_b is not None else onehot_a
    seg_real_ba = onehot_a

    terms: dict[str, torch.Tensor | float] = {}
    if side == "generator":
        terms["adv_img_ab"] = lsgan_loss(None, models.disc_b(s.fake_b), "generator")
        terms["adv_img_ba"] = lsgan_loss(None, models.disc_a(s.fake_a), "generator")
        if use_seg_disc:
            terms["adv_seg_ab"] = lsgan_loss(
                None, [models.disc_seg(s.aux_b_real), models.disc_seg(s.aux_b_fake)], "generator"
            )
            terms["adv_seg_ba"] = lsgan_loss(
                None, [models.disc_seg(s.aux_a_real), models.disc_seg(s.aux_a_fake)], "generator"
            )
        else:
            terms["adv_seg_ab"] = 0.0
            terms["adv_seg_ba"] = 0.0
        if weights.lambda_c > 0:
            terms["cycle_ab"] = weights.lambda_c * cycle_loss(batch_a, s.rec_a)
            terms["cycle_ba"] = weights.lambda_c * cycle_loss(batch_b, s.rec_b)
        else:
            terms["cycle_ab"] = terms["cycle_ba"] = 0.0
        if weights.lambda_id > 0:
            terms["id_b"] = weights.lambda_id * identity_loss(batch_b, s.id_b)
            terms["id_a"] = weights.lambda_id * identity_loss(batch_a, s.id_a)
        else:
            terms["id_b"] = terms["id_a"] = 0.0
        if use_reg:
            terms["reg_a"] = weights.lambda_reg * (
                attention_reg_loss(s.maps_a) + attention_reg_loss(s.maps_fake_a)
            )
            terms["reg_b"] = weights.lambda_reg * (
                attention_reg_loss(s.maps_b) + attention_reg_loss(s.maps_fake_b)
            )
        else:
            terms["reg_a"] = terms["reg_b"] = 0.0
        if use_aux:
            target_fake_a = onehot_b if onehot_b is not None else _pseudo_label(s.aux_a_fake)
            aux_a = aux_seg_loss(s.aux_a_real, onehot_a) + aux_seg_loss(s.aux_a_fake, target_fake_a)
            aux_b = aux_seg_loss(s.aux_b_fake, onehot_a)
            if onehot_b is not None:
                aux_b = aux_b + aux_seg_loss(s.aux_b_real, onehot_b)
            terms["aux_a"] = weights.lambda_aux * aux_a
            terms["aux_b"] = weights.lambda_aux * aux_b
        else:
            terms["aux_a"] = terms["aux_b"] = 0.0
        if paired:
            terms["voxel_ab"] = weights.lambda_voxel * voxel_loss(s.fake_b, batch_b)
            terms["voxel_ba"] = weights.lambda_voxel * voxel_loss(s.fake_a, batch_a)
    else:
        terms["d_img_a"] = lsgan_loss(
            models.disc_a(batch_a), models.disc_a(s.fake_a.detach()), "discriminator"
        )
        terms["d_img_b"] = lsgan_loss(
            models.disc_b(batch_b), models.disc_b(s.fake_b.detach()), "discriminator"
        )
        if use_seg_disc:
            d_seg_ab = lsgan_loss(
                models.disc_seg(seg_real_ab),
                [models.disc_seg(s.aux_b_real.detach()), models.disc_seg(s.aux_b_fake.detach())],
                "discriminator",
                real_weight=2.0,
            )
            d_seg_ba = lsgan_loss(
                models.disc_seg(seg_real_ba),
                [models.disc_seg(s.aux_a_real.detach()), models.disc_seg(s.aux_a_fake.detach())],
                "discriminator",
                real_weight=2.0,
            )
            terms["d_seg"] = d_seg_ab + d_seg_ba
        else:
            terms["d_seg"] = 0.0

    tensor_terms = [t for t in terms.values() if isinstance(t, torch.Tensor)]
    total = sum(tensor_terms) if tensor_terms else torch.zeros(())
    term_values = {
        k: (float(v.item()) if isinstance(v, torch.Tensor) else float(v)) for k, v in terms.items()
    }
    return ObjectiveResult(
        total=total,
        total_value=math.fsum(term_values.values()),
        terms=term_values,
        weights=weights.as_dict(),
        state=state,
    )
