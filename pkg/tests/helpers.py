"""Shared test machinery: central-difference gradient checks and the
independent brute-force oracles the derived expectations are frozen against."""

import math

import numpy as np
import torch

FD_STEP = 1e-5
REL_TOL = 1e-4


def rel_err(a: float, b: float) -> float:
    scale = max(abs(a), abs(b), 1e-3)
    return abs(a - b) / scale


def finite_diff(f, tensor: torch.Tensor, index, h: float = FD_STEP) -> float:
    """Central difference of scalar-valued f with respect to tensor[index]."""
    with torch.no_grad():
        orig = tensor.view(-1)[index].item()
        tensor.view(-1)[index] = orig + h
        hi = float(f())
        tensor.view(-1)[index] = orig - h
        lo = float(f())
        tensor.view(-1)[index] = orig
    return (hi - lo) / (2 * h)


def check_gradients(f, tensors, max_coords_per_tensor=None, rng=None, h=FD_STEP):
    """Compare autograd gradients of scalar f() against central differences.

    ``tensors`` is a list of (name, tensor) pairs; tensors must be float64
    leaves with requires_grad. Checks every coordinate unless
    ``max_coords_per_tensor`` caps it (coordinates then sampled with ``rng``).
    Returns the worst relative error found.
    """
    out = f()
    grads = torch.autograd.grad(out, [t for _, t in tensors], allow_unused=False)
    worst = 0.0
    worst_at = None
    for (name, tensor), grad in zip(tensors, grads):
        n = tensor.numel()
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            assert rng is not None
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        else:
            coords = range(n)
        flat_grad = grad.reshape(-1)
        for idx in coords:
            fd = finite_diff(f, tensor, int(idx), h=h)
            err = rel_err(float(flat_grad[int(idx)].item()), fd)
            if err > worst:
                worst = err
                worst_at = (name, int(idx), float(flat_grad[int(idx)].item()), fd)
    return worst, worst_at


def module_param_sample(module: torch.nn.Module, k: int, rng: np.random.Generator):
    """k random (name, parameter) coordinate picks spread over the module."""
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    picks = []
    for _ in range(k):
        name, p = named[int(rng.integers(len(named)))]
        picks.append((name, p, int(rng.integers(p.numel()))))
    return picks


def check_param_gradients(f, picks, h=FD_STEP):
    out = f()
    out.backward()
    worst = 0.0
    worst_at = None
    for name, p, idx in picks:
        analytic = float(p.grad.reshape(-1)[idx].item())
        fd = finite_diff(f, p.data, idx, h=h)
        err = rel_err(analytic, fd)
        if err > worst:
            worst = err
            worst_at = (name, idx, analytic, fd)
    for _, p, _ in picks:
        if p.grad is not None:
            p.grad = None
    return worst, worst_at


# ---------------------------------------------------------------------------
# independent oracles

def oracle_percentile(values, q):
    """Sort + linear interpolation percentile, written out longhand."""
    v = sorted(float(x) for x in np.asarray(values).ravel())
    pos = (len(v) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = math.ceil(pos)
    if lo == hi:
        return v[lo]
    frac = pos - lo
    return v[lo] * (1 - frac) + v[hi] * frac


def oracle_boundary(mask):
    """Neighborhood-enumeration boundary: cells with a face-adjacent outside
    cell (grid border counts as outside)."""
    mask = np.asarray(mask).astype(bool)
    coords = []
    offsets = []
    for axis in range(mask.ndim):
        for d in (-1, 1):
            off = [0] * mask.ndim
            off[axis] = d
            offsets.append(tuple(off))
    for idx in np.ndindex(*mask.shape):
        if not mask[idx]:
            continue
        for off in offsets:
            nb = tuple(i + o for i, o in zip(idx, off))
            if any(j < 0 or j >= s for j, s in zip(nb, mask.shape)) or not mask[nb]:
                coords.append(idx)
                break
    return np.array(coords, dtype=np.int64).reshape(-1, mask.ndim)


def oracle_assd(pred, gt, cap=50.0):
    """O(|dA| * |dB|) pairwise-distance ASSD."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if not pred.any() or not gt.any():
        return float(cap)
    pa = oracle_boundary(pred).astype(np.float64)
    pb = oracle_boundary(gt).astype(np.float64)
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1)
    d = np.sqrt(d2)
    return float(min((d.min(axis=1).mean() + d.min(axis=0).mean()) / 2.0, cap))


def oracle_gram_loss(maps):
    """Brute-force double-loop Gram Frobenius distance to identity."""
    maps = np.asarray(maps, dtype=np.float64)
    n = maps.shape[0]
    rows = [m.ravel() for m in maps]
    rows = [r / (np.linalg.norm(r) + 1e-8) for r in rows]
    acc = 0.0
    for i in range(n):
        for j in range(n):
            g = float(np.dot(rows[i], rows[j]))
            target = 1.0 if i == j else 0.0
            acc += (g - target) ** 2
    return math.sqrt(acc)


def oracle_gram_offdiag(maps):
    maps = np.asarray(maps, dtype=np.float64)
    n = maps.shape[0]
    rows = [m.ravel() / max(np.linalg.norm(m), 1e-12) for m in maps]
    acc = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                acc += abs(float(np.dot(rows[i], rows[j])))
    return acc / (n * (n - 1))


def oracle_welch(a, b):
    """Textbook Welch formula with the p-value from numerical quadrature of
    the Student-t density."""
    from scipy.integrate import quad

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    va = a.var(ddof=1)
    vb = b.var(ddof=1)
    t = (a.mean() - b.mean()) / math.sqrt(va / na + vb / nb)
    df = (va / na + vb / nb) ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))

    def t_pdf(x):
        return (
            math.gamma((df + 1) / 2)
            / (math.sqrt(df * math.pi) * math.gamma(df / 2))
            * (1 + x * x / df) ** (-(df + 1) / 2)
        )

    tail, _ = quad(t_pdf, abs(t), np.inf)
    return {"t": t, "df": df, "p": 2 * tail}


def oracle_bilinear_resize(maps, out_h, out_w):
    """Explicit bilinear weights (align_corners=False), channelwise."""
    maps = np.asarray(maps, dtype=np.float64)
    n, h, w = maps.shape
    out = np.zeros((n, out_h, out_w))
    sy, sx = h / out_h, w / out_w
    for i in range(out_h):
        src_y = (i + 0.5) * sy - 0.5
        y0 = math.floor(src_y)
        fy = src_y - y0
        y0c, y1c = min(max(y0, 0), h - 1), min(max(y0 + 1, 0), h - 1)
        for j in range(out_w):
            src_x = (j + 0.5) * sx - 0.5
            x0 = math.floor(src_x)
            fx = src_x - x0
            x0c, x1c = min(max(x0, 0), w - 1), min(max(x0 + 1, 0), w - 1)
            out[:, i, j] = (
                maps[:, y0c, x0c] * (1 - fy) * (1 - fx)
                + maps[:, y0c, x1c] * (1 - fy) * fx
                + maps[:, y1c, x0c] * fy * (1 - fx)
                + maps[:, y1c, x1c] * fy * fx
            )
    return out


def conv_out_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def oracle_patch_grid(side):
    """Stride/kernel arithmetic for the patch discriminator on a square input."""
    s = side
    for stride in (2, 2, 2, 1):
        s = conv_out_size(s, 4, stride, 1)
    return s
