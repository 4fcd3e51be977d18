"""Training objectives: MMD regularizers, property L1, cross-entropies, coordinate losses."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ContractViolation
from .geometry import kabsch_align

__all__ = [
    "LOG_MSE_FLOOR",
    "LossWeights",
    "LossReport",
    "rbf_kernel",
    "mmd_linear",
    "mmd_unbiased_quadratic",
    "PriorDraw",
    "draw_prior",
    "disentangle_loss",
    "property_loss",
    "cross_entropy",
    "node_type_loss",
    "edge_loss",
    "CoordSample",
    "coord_loss",
    "total_loss",
]

LOG_MSE_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 5.0
    beta: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractViolation("loss weights must be non-negative")
        if not self.sigma > 0:
            raise ContractViolation("kernel bandwidth must be positive")


@dataclass
class LossReport:
    total: float
    prop: float
    dis_h: float
    dis_v: float
    node_type: float
    edge: float
    coords: float
    flags: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool), repr=False)

    COMPONENTS = ("prop", "dis_h", "dis_v", "node_type", "edge", "coords")

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "flags"}


# --- kernels and MMD --------------------------------------------------------


def rbf_kernel(x, y, sigma: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ContractViolation(f"kernel arguments differ in size: {x.size} vs {y.size}")
    d = x - y
    return float(np.exp(-(d @ d) / (2.0 * sigma * sigma)))


def _pair_kernel(a: Tensor, b: Tensor, sigma: float) -> Tensor:
    """Row-wise RBF kernel of two ``(p, d)`` tensors -> ``(p,)``."""
    d = ad.sub(a, b)
    return ad.exp(ad.scalar_mul(-1.0 / (2.0 * sigma * sigma), ad.sum(ad.square(d), axis=1)))


def mmd_linear(z, z_prior, sigma: float = 1.0) -> Tensor:
    """Linear-time unbiased MMD^2 estimate between ``z`` and prior samples.

    Consecutive rows are paired; a trailing odd row is ignored.
    """
    z, zt = ad.as_tensor(z), ad.as_tensor(z_prior)
    if z.ndim != 2 or z.shape != zt.shape:
        raise ContractViolation(f"mmd needs equal (m, d) sample arrays, got {z.shape} and {zt.shape}")
    m = z.shape[0]
    if m < 2:
        raise ContractViolation(f"mmd needs at least 2 samples, got {m}")
    h = m // 2
    odd, even = np.arange(0, 2 * h, 2), np.arange(1, 2 * h, 2)
    z1, z2 = ad.take(z, odd), ad.take(z, even)
    t1, t2 = ad.take(zt, odd), ad.take(zt, even)
    terms = ad.sub(
        ad.add(_pair_kernel(z1, z2, sigma), _pair_kernel(t1, t2, sigma)),
        ad.add(_pair_kernel(z1, t2, sigma), _pair_kernel(z2, t1, sigma)),
    )
    return ad.mean(terms)


def mmd_unbiased_quadratic(x, y, sigma: float = 1.0) -> float:
    """Quadratic-time unbiased U-statistic MMD^2 (reference estimator)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ContractViolation("U-statistic needs at least 2 samples per set")

    def gram(a, b):
        sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
        return np.exp(-np.maximum(sq, 0.0) / (2.0 * sigma * sigma))

    kxx, kyy, kxy = gram(x, x), gram(y, y), gram(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


@dataclass
class PriorDraw:
    """Row subsample plus matching prior samples for one disentanglement evaluation."""

    rows: np.ndarray
    eps_h: np.ndarray  # (m, 2 d_h)
    eps_v: np.ndarray  # (m, 3, 2 d_v); spatial columns drawn independently

    def transformed(self, rotation: np.ndarray) -> "PriorDraw":
        """Apply an orthogonal map to the vector prior (equal in law for isotropic priors)."""
        return PriorDraw(self.rows, self.eps_h, np.einsum("ij,mjd->mid", rotation, self.eps_v))


def draw_prior(rng: np.random.Generator, num_rows: int, m: int, d_h: int, d_v: int) -> PriorDraw | None:
    """Subsample ``min(m, num_rows)`` latent rows and draw matching prior samples.

    Returns ``None`` when fewer than two rows are available.
    """
    k = min(m, num_rows)
    if k < 2:
        return None
    rows = np.sort(rng.choice(num_rows, size=k, replace=False))
    eps_h = rng.standard_normal((k, 2 * d_h))
    eps_v = np.stack([rng.standard_normal((k, 2 * d_v)) for _ in range(3)], axis=1)
    return PriorDraw(rows, eps_h, eps_v)


def disentangle_loss(z_h: Tensor, z_v: Tensor, prior: PriorDraw | None, sigma: float = 1.0) -> tuple[Tensor, Tensor]:
    """MMD of pooled scalar and vector latents against isotropic Gaussian priors.

    ``z_v`` is channels-last ``(N, 3, 2 d_v)``; each node's block is one sample
    flattened to ``6 d_v`` entries.
    """
    if prior is None:
        zero = Tensor(np.zeros(()))
        return zero, zero
    k = len(prior.rows)
    zh = ad.take(z_h, prior.rows)
    zv = ad.reshape(ad.take(z_v, prior.rows), (k, -1))
    return (
        mmd_linear(zh, prior.eps_h, sigma),
        mmd_linear(zv, prior.eps_v.reshape(k, -1), sigma),
    )


# --- supervised terms -------------------------------------------------------


def property_loss(y, y_hat) -> Tensor:
    """Mean absolute error; the subgradient at ``y == y_hat`` is 0."""
    y_hat = ad.as_tensor(y_hat)
    y = np.asarray(y, dtype=np.float64).reshape(y_hat.shape)
    if not np.all(np.isfinite(y)):
        raise ContractViolation("property targets must be finite")
    return ad.mean(ad.abs(ad.sub(y_hat, Tensor(y))))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy over rows; ``-inf`` logits are excluded candidates."""
    logits = ad.as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    r, c = logits.shape
    if t.shape != (r,):
        raise ContractViolation(f"need one target per row, got {t.shape} for {r} rows")
    if np.any((t < 0) | (t >= c)):
        raise ContractViolation("target index out of range")
    if np.any(np.isneginf(logits.data[np.arange(r), t])):
        raise ContractViolation("target points at a masked candidate")
    lp = ad.log_softmax(logits, axis=1)
    picked = ad.take(ad.reshape(lp, (-1,)), np.arange(r) * c + t)
    return ad.neg(ad.mean(picked))


node_type_loss = cross_entropy
edge_loss = cross_entropy


# --- coordinates ------------------------------------------------------------


@dataclass
class CoordSample:
    """One newly placed node: ground-truth partial coordinates plus its true position."""

    prev_true: np.ndarray  # (k, 3) already placed
    target: np.ndarray  # (3,)
    step: int

    @property
    def size(self) -> int:
        return len(self.prev_true) + 1


def coord_loss(pred: Tensor, samples: Sequence[CoordSample], flags=None, align_max_nodes: int = 3) -> Tensor:
    """Summed-over-steps coordinate loss.

    Samples whose subgraph (including the new node) has at most three nodes are
    rigidly aligned to the ground truth first; the alignment is held constant
    when differentiating and each step contributes the mean aligned squared
    error over those samples.  The remaining samples contribute, per step,
    ``log(max(mean squared error, floor))`` over the flagged ones.
    ``align_max_nodes=0`` disables alignment (plain log-MSE everywhere).
    """
    pred = ad.as_tensor(pred)
    m = len(samples)
    if pred.shape != (m, 3):
        raise ContractViolation(f"predictions {pred.shape} do not match {m} samples")
    f = np.ones(m, dtype=bool) if flags is None else np.asarray(flags, dtype=bool)
    total = Tensor(np.zeros(()))
    steps = sorted({s.step for s in samples})
    for t in steps:
        idx = [i for i, s in enumerate(samples) if s.step == t and f[i]]
        small = [i for i in idx if samples[i].size <= align_max_nodes]
        large = [i for i in idx if samples[i].size > align_max_nodes]
        if small:
            parts = []
            for i in small:
                s = samples[i]
                r_u = ad.take(pred, np.array([i]))
                p_full = np.vstack([s.prev_true, pred.data[i]])
                q_full = np.vstack([s.prev_true, s.target])
                tr = kabsch_align(p_full, q_full)
                rot = tr.rotation
                # placed rows are constants; only the new row carries gradient
                fixed = s.prev_true @ rot.T + tr.translation - s.prev_true
                moved = ad.add(ad.matmul(r_u, rot.T), Tensor(tr.translation[None, :]))
                err_new = ad.sum(ad.square(ad.sub(moved, Tensor(s.target[None, :]))))
                parts.append(ad.add(err_new, Tensor(np.array(float((fixed * fixed).sum())))))
            acc = parts[0]
            for p in parts[1:]:
                acc = ad.add(acc, p)
            total = ad.add(total, ad.scalar_mul(1.0 / len(parts), acc))
        if large:
            li = np.array(large)
            diff = ad.sub(ad.take(pred, li), Tensor(np.stack([samples[i].target for i in large])))
            mse = ad.scalar_mul(1.0 / len(large), ad.sum(ad.square(diff)))
            total = ad.add(total, ad.log(ad.clamp_min(mse, LOG_MSE_FLOOR)))
    return total


def total_loss(parts: dict[str, Tensor], weights: LossWeights) -> tuple[Tensor, LossReport]:
    """Weighted objective ``prop + alpha (dis_h + dis_v) + beta (node_type + edge + coords)``."""
    missing = set(LossReport.COMPONENTS) - set(parts)
    if missing:
        raise ContractViolation(f"missing loss parts: {sorted(missing)}")
    p = {k: ad.as_tensor(v) for k, v in parts.items()}
    dis = ad.add(p["dis_h"], p["dis_v"])
    rec = ad.add(ad.add(p["node_type"], p["edge"]), p["coords"])
    total = ad.add(ad.add(p["prop"], ad.scalar_mul(weights.alpha, dis)), ad.scalar_mul(weights.beta, rec))
    vals = {k: float(p[k].data) for k in LossReport.COMPONENTS}
    report = LossReport(total=float(total.data), **vals)
    return total, report
