"""Synthetic two-modality dataset: layouts, rendering, preprocessing, augmentation.

Each sample is a semantic layout (class id per pixel) rendered twice, once per
modality profile. The two default profiles assign deranged per-class
intensities (every class lands in a different class's intensity band), so a
monotone global intensity remap cannot translate between them and per-region
treatment is required. Labels are shared between the modalities of a sample;
the pairing is used only by supervised training and by evaluation.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ContractError

# monotone intensity maps selectable per profile
CONTRAST_MAPS = {
    "identity": lambda v: v,
    "invert": lambda v: 1.0 - v,
    "gamma2": lambda v: v**2,
    "sqrt": lambda v: np.sqrt(v),
}

ROTATION_RANGE_DEG = 25.0
SCALE_RANGE = (0.75, 1.0)
FILL_VALUE = -1.0  # out-of-frame image fill; labels fill with background 0


@dataclass
class LayoutSpec:
    """Geometry side of the dataset: how many layouts, their size and content."""

    image_size: int = 64
    num_classes: int = 4  # including background class 0
    shapes_per_class: tuple[int, int] = (1, 2)
    num_train: int = 400
    num_test: int = 50
    rng_seed: int = 0

    def validate(self):
        if self.image_size < 16 or self.image_size % 4 != 0:
            raise ConfigurationError(
                f"image_size must be >= 16 and divisible by 4, got {self.image_size}"
            )
        if self.num_classes < 2:
            raise ConfigurationError(
                f"need at least one foreground class besides background, got num_classes={self.num_classes}"
            )
        lo, hi = self.shapes_per_class
        if not (1 <= lo <= hi):
            raise ConfigurationError(f"bad shapes_per_class range {self.shapes_per_class}")
        if self.num_train < 1 or self.num_test < 0:
            raise ConfigurationError("num_train must be >= 1 and num_test >= 0")


@dataclass
class ModalityProfile:
    """Appearance side: per-class base intensity plus corruption parameters."""

    base_intensity: tuple[float, ...] = (0.1, 0.4, 0.65, 0.9)
    contrast: str = "identity"
    noise_sigma: float = 0.03
    bias_field_strength: float = 0.1

    def validate(self, num_classes: int):
        if len(self.base_intensity) != num_classes:
            raise ConfigurationError(
                f"profile has {len(self.base_intensity)} base intensities for {num_classes} classes"
            )
        if any(not (0.0 <= v <= 1.0) for v in self.base_intensity):
            raise ConfigurationError("base intensities must lie in [0, 1]")
        if self.contrast not in CONTRAST_MAPS:
            raise ConfigurationError(f"unknown contrast map '{self.contrast}'")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if self.bias_field_strength < 0:
            raise ConfigurationError("bias_field_strength must be >= 0")

    def rendered_intensity(self, cls: int) -> float:
        return float(CONTRAST_MAPS[self.contrast](self.base_intensity[cls]))


def default_profiles(num_classes: int = 4) -> tuple[ModalityProfile, ModalityProfile]:
    """Default A/B profile pair.

    B's classes are rendered at a derangement of A's intensity levels
    (bg->bright, c1->A's c2 band, c2->A's bg band, c3->A's c1 band), which is
    deliberately non-monotone in A's intensities.
    """
    if num_classes == 4:
        base_a = (0.1, 0.4, 0.65, 0.9)
        base_b = (0.9, 0.65, 0.1, 0.4)
    else:
        levels = np.linspace(0.1, 0.9, num_classes)
        base_a = tuple(float(v) for v in levels)
        base_b = tuple(float(v) for v in np.roll(levels[::-1], 1))
    prof_a = ModalityProfile(base_a, "identity", noise_sigma=0.03, bias_field_strength=0.08)
    prof_b = ModalityProfile(base_b, "identity", noise_sigma=0.04, bias_field_strength=0.12)
    return prof_a, prof_b


def _distinguishable_pairs(profile: ModalityProfile, min_gap: float = 0.1) -> set:
    vals = [profile.rendered_intensity(c) for c in range(len(profile.base_intensity))]
    pairs = set()
    for i in range(len(vals)):
        for j in range(i + 1, len(vals)):
            if abs(vals[i] - vals[j]) >= min_gap:
                pairs.add((i, j))
    return pairs


def validate_profile_pair(profile_a: ModalityProfile, profile_b: ModalityProfile, num_classes: int):
    profile_a.validate(num_classes)
    profile_b.validate(num_classes)
    common = _distinguishable_pairs(profile_a) & _distinguishable_pairs(profile_b)
    if not common:
        raise ConfigurationError(
            "profiles must keep at least one class pair distinguishable "
            "(base-intensity gap >= 0.1) in both modalities"
        )


@dataclass
class DatasetBundle:
    """All samples of one dataset. labels[i] is shared by images_a[i]/images_b[i]."""

    images_a: np.ndarray  # (n, 1, H, W) float32 in [-1, 1]
    images_b: np.ndarray
    labels: np.ndarray  # (n, H, W) uint8
    train_idx: list[int]
    test_idx: list[int]
    spec: LayoutSpec
    profile_a: ModalityProfile
    profile_b: ModalityProfile

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes


# ---------------------------------------------------------------------------
# layout generation

def _sample_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    # independent deterministic stream per (sample, purpose)
    return np.random.default_rng([np.uint64(seed), np.uint64(index), np.uint64(stream)])


def _paint_disc(lbl, cy, cx, r, cls):
    h, w = lbl.shape
    yy, xx = np.ogrid[:h, :w]
    lbl[(yy - cy) ** 2 + (xx - cx) ** 2 <= r**2] = cls


def _paint_rect(lbl, cy, cx, hh, hw, cls):
    h, w = lbl.shape
    y0, y1 = max(0, int(cy - hh)), min(h, int(cy + hh) + 1)
    x0, x1 = max(0, int(cx - hw)), min(w, int(cx + hw) + 1)
    lbl[y0:y1, x0:x1] = cls


def _paint_ellipse(lbl, cy, cx, ry, rx, theta, cls):
    h, w = lbl.shape
    yy, xx = np.ogrid[:h, :w]
    ct, st = np.cos(theta), np.sin(theta)
    u = (yy - cy) * ct + (xx - cx) * st
    v = -(yy - cy) * st + (xx - cx) * ct
    lbl[(u / ry) ** 2 + (v / rx) ** 2 <= 1.0] = cls


def gen_layout(spec: LayoutSpec, rng: np.random.Generator) -> np.ndarray:
    """One semantic layout. Foreground classes cycle over shape families
    (disc / rectangle / rotated ellipse) so classes differ in geometry, not
    just intensity. Later classes paint over earlier ones where they overlap."""
    s = spec.image_size
    lbl = np.zeros((s, s), dtype=np.uint8)
    margin = 0.18 * s
    lo, hi = spec.shapes_per_class
    for cls in range(1, spec.num_classes):
        count = int(rng.integers(lo, hi + 1))
        for _ in range(count):
            cy = rng.uniform(margin, s - margin)
            cx = rng.uniform(margin, s - margin)
            size = rng.uniform(0.09, 0.16) * s
            family = (cls - 1) % 3
            if family == 0:
                _paint_disc(lbl, cy, cx, size, cls)
            elif family == 1:
                aspect = rng.uniform(0.6, 1.4)
                _paint_rect(lbl, cy, cx, size, size * aspect, cls)
            else:
                aspect = rng.uniform(0.5, 0.9)
                theta = rng.uniform(0, np.pi)
                _paint_ellipse(lbl, cy, cx, size, size * aspect, theta, cls)
    return lbl


# ---------------------------------------------------------------------------
# rendering and preprocessing

def modality_render(layout: np.ndarray, profile: ModalityProfile, rng: np.random.Generator) -> np.ndarray:
    """Render a layout under a profile: per-class intensity, multiplicative
    low-frequency bias field, additive Gaussian noise, clamped to [0, 1]."""
    if layout.max(initial=0) >= len(profile.base_intensity):
        raise ContractError(
            f"layout contains class id {int(layout.max())} but profile has "
            f"{len(profile.base_intensity)} classes"
        )
    levels = np.array(
        [profile.rendered_intensity(c) for c in range(len(profile.base_intensity))],
        dtype=np.float64,
    )
    img = levels[layout]
    if profile.bias_field_strength > 0:
        field = rng.standard_normal(layout.shape)
        field = ndimage.gaussian_filter(field, sigma=0.25 * layout.shape[0])
        peak = np.abs(field).max()
        if peak > 0:
            field /= peak
        img = img * (1.0 + profile.bias_field_strength * field)
    if profile.noise_sigma > 0:
        img = img + profile.noise_sigma * rng.standard_normal(layout.shape)
    return np.clip(img, 0.0, 1.0)


def preprocess(image: np.ndarray, lo_pct: float = 2.0, hi_pct: float = 98.0):
    """Clip to empirical percentiles, then map affinely to [-1, 1].

    Returns ``(tensor, degenerate)``; a constant input has zero percentile
    spread and maps to all zeros with ``degenerate=True``.
    """
    if not lo_pct < hi_pct:
        raise ContractError(f"need lo_pct < hi_pct, got ({lo_pct}, {hi_pct})")
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise ContractError("empty image")
    lo, hi = np.percentile(image, [lo_pct, hi_pct])
    if hi - lo <= 0:
        return np.zeros_like(image, dtype=np.float32), True
    clipped = np.clip(image, lo, hi)
    out = 2.0 * (clipped - lo) / (hi - lo) - 1.0
    return out.astype(np.float32), False


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentDraw:
    angle_deg: float
    scale_w: float
    scale_h: float
    flip_h: bool
    flip_v: bool

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "AugmentDraw":
        return cls(
            angle_deg=float(rng.uniform(-ROTATION_RANGE_DEG, ROTATION_RANGE_DEG)),
            scale_w=float(rng.uniform(*SCALE_RANGE)),
            scale_h=float(rng.uniform(*SCALE_RANGE)),
            flip_h=bool(rng.random() < 0.5),
            flip_v=bool(rng.random() < 0.5),
        )

    @classmethod
    def identity(cls) -> "AugmentDraw":
        return cls(0.0, 1.0, 1.0, False, False)


def _apply_geometric(arr, draw: AugmentDraw, order: int, cval: float):
    out = arr
    if draw.angle_deg != 0.0 or draw.scale_w != 1.0 or draw.scale_h != 1.0:
        theta = np.deg2rad(draw.angle_deg)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        # output -> input mapping: undo rotation, then undo (h, w) scaling
        m = np.diag([1.0 / draw.scale_h, 1.0 / draw.scale_w]) @ rot.T
        center = (np.array(arr.shape[-2:], dtype=np.float64) - 1.0) / 2.0
        offset = center - m @ center
        out = ndimage.affine_transform(
            out, m, offset=offset, order=order, mode="constant", cval=cval, prefilter=False
        )
    if draw.flip_h:
        out = out[..., ::-1]
    if draw.flip_v:
        out = out[..., ::-1, :]
    return np.ascontiguousarray(out)


def augment(image: np.ndarray, labels: np.ndarray, rng: np.random.Generator, draw: AugmentDraw | None = None):
    """Random rotation, anisotropic down-scaling and flips. The same transform
    is applied to the image (bilinear) and the labels (nearest); pixels pulled
    from outside the frame become background / value -1."""
    if image.shape[-2:] != labels.shape[-2:]:
        raise ContractError(f"image {image.shape} and labels {labels.shape} misaligned")
    if draw is None:
        draw = AugmentDraw.sample(rng)
    if image.ndim == 3:  # (C, H, W): transform channelwise
        img_out = np.stack(
            [_apply_geometric(ch, draw, order=1, cval=FILL_VALUE) for ch in image]
        ).astype(image.dtype)
    else:
        img_out = _apply_geometric(image, draw, order=1, cval=FILL_VALUE).astype(image.dtype)
    lbl_out = _apply_geometric(labels.astype(np.float64), draw, order=0, cval=0.0)
    return img_out, lbl_out.astype(labels.dtype)


# ---------------------------------------------------------------------------
# dataset assembly

def gen_dataset(spec: LayoutSpec, profile_a: ModalityProfile, profile_b: ModalityProfile) -> DatasetBundle:
    """Deterministic function of (spec, profiles): same seed, same bytes."""
    spec.validate()
    validate_profile_pair(profile_a, profile_b, spec.num_classes)
    n = spec.num_train + spec.num_test
    labels = np.zeros((n, spec.image_size, spec.image_size), dtype=np.uint8)
    images_a = np.zeros((n, 1, spec.image_size, spec.image_size), dtype=np.float32)
    images_b = np.zeros_like(images_a)
    for i in range(n):
        lbl = gen_layout(spec, _sample_rng(spec.rng_seed, i, 0))
        raw_a = modality_render(lbl, profile_a, _sample_rng(spec.rng_seed, i, 1))
        raw_b = modality_render(lbl, profile_b, _sample_rng(spec.rng_seed, i, 2))
        img_a, _ = preprocess(raw_a)
        img_b, _ = preprocess(raw_b)
        labels[i] = lbl
        images_a[i, 0] = img_a
        images_b[i, 0] = img_b
    return DatasetBundle(
        images_a=images_a,
        images_b=images_b,
        labels=labels,
        train_idx=list(range(spec.num_train)),
        test_idx=list(range(spec.num_train, n)),
        spec=spec,
        profile_a=profile_a,
        profile_b=profile_b,
    )


# ---------------------------------------------------------------------------
# on-disk layout: <root>/{train,test}/data.sasn + <root>/manifest.json

def expected_manifest(spec: LayoutSpec, profile_a: ModalityProfile, profile_b: ModalityProfile) -> dict:
    """The manifest gen_dataset would produce; used to detect an identical
    already-written dataset without regenerating it."""

    def _plain(obj):
        return json.loads(json.dumps(asdict(obj)))

    return {
        "spec": _plain(spec),
        "profile_a": _plain(profile_a),
        "profile_b": _plain(profile_b),
        "splits": {
            "train": list(range(spec.num_train)),
            "test": list(range(spec.num_train, spec.num_train + spec.num_test)),
        },
        "seed": spec.rng_seed,
    }


def dataset_manifest(bundle: DatasetBundle) -> dict:
    return {
        "spec": asdict(bundle.spec),
        "profile_a": asdict(bundle.profile_a),
        "profile_b": asdict(bundle.profile_b),
        "splits": {
            "train": [int(i) for i in bundle.train_idx],
            "test": [int(i) for i in bundle.test_idx],
        },
        "seed": bundle.spec.rng_seed,
    }


def save_dataset(bundle: DatasetBundle, root) -> None:
    from .container import write_container

    for split, idx in (("train", bundle.train_idx), ("test", bundle.test_idx)):
        os.makedirs(os.path.join(root, split), exist_ok=True)
        tensors = {}
        for i in idx:
            tensors[f"img_a_{i}"] = bundle.images_a[i]
            tensors[f"img_b_{i}"] = bundle.images_b[i]
            tensors[f"lbl_{i}"] = bundle.labels[i]
        write_container(os.path.join(root, split, "data.sasn"), tensors)
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(dataset_manifest(bundle), f, indent=2, sort_keys=True)


def load_dataset(root) -> DatasetBundle:
    from .container import read_container
    from .errors import FormatError

    manifest_path = os.path.join(root, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FormatError(f"{manifest_path}: not found")
    with open(manifest_path) as f:
        manifest = json.load(f)
    spec = LayoutSpec(**{**manifest["spec"], "shapes_per_class": tuple(manifest["spec"]["shapes_per_class"])})
    prof_a = ModalityProfile(**{**manifest["profile_a"], "base_intensity": tuple(manifest["profile_a"]["base_intensity"])})
    prof_b = ModalityProfile(**{**manifest["profile_b"], "base_intensity": tuple(manifest["profile_b"]["base_intensity"])})
    n = spec.num_train + spec.num_test
    s = spec.image_size
    images_a = np.zeros((n, 1, s, s), dtype=np.float32)
    images_b = np.zeros_like(images_a)
    labels = np.zeros((n, s, s), dtype=np.uint8)
    for split in ("train", "test"):
        tensors = read_container(os.path.join(root, split, "data.sasn"))
        for i in manifest["splits"][split]:
            images_a[i] = tensors[f"img_a_{i}"]
            images_b[i] = tensors[f"img_b_{i}"]
            labels[i] = tensors[f"lbl_{i}"]
    return DatasetBundle(
        images_a=images_a,
        images_b=images_b,
        labels=labels,
        train_idx=list(manifest["splits"]["train"]),
        test_idx=list(manifest["splits"]["test"]),
        spec=spec,
        profile_a=prof_a,
        profile_b=prof_b,
    )
