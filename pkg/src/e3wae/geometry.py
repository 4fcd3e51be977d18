"""Rigid-body geometry and gyration-tensor shape descriptors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .exceptions import ContractViolation, UndefinedPropertyError

__all__ = [
    "RigidTransform",
    "GyrationSpectrum",
    "kabsch_align",
    "kabsch_residual",
    "apply_transform",
    "gyration_spectrum",
    "asphericity",
    "radius_of_gyration",
    "random_transform",
]


@dataclass(frozen=True)
class RigidTransform:
    """Orthogonal 3x3 matrix plus translation, acting as ``x -> R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ContractViolation(f"rotation must be 3x3, got {r.shape}")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def is_orthogonal(self, tol: float = 1e-9) -> bool:
        return bool(np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=tol))

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.rotation))


@dataclass(frozen=True)
class GyrationSpectrum:
    """Sorted eigenvalues ``l1 >= l2 >= l3 >= 0`` of the gyration tensor."""

    l1: float
    l2: float
    l3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.l1, self.l2, self.l3])

    @property
    def trace(self) -> float:
        return self.l1 + self.l2 + self.l3


def _coords(x, name="coords") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3 or a.shape[0] < 1:
        raise ContractViolation(f"{name} must be n x 3 with n >= 1, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractViolation(f"{name} must be finite")
    return a


def kabsch_align(predicted, reference) -> RigidTransform:
    """Proper rotation and translation minimizing ``sum ||R p_i + t - q_i||^2``.

    Degenerate inputs (one point, or all predicted or reference points
    coincident) give the identity rotation with the centroid offset.
    """
    p = _coords(predicted, "predicted")
    q = _coords(reference, "reference")
    if p.shape != q.shape:
        raise ContractViolation(f"point sets differ in shape: {p.shape} vs {q.shape}")
    pc, qc = p.mean(axis=0), q.mean(axis=0)
    p0, q0 = p - pc, q - qc
    scale = max(np.abs(p0).max(), np.abs(q0).max())
    if len(p) == 1 or scale <= 1e-12 * max(1.0, np.abs(p).max(), np.abs(q).max()):
        return RigidTransform(np.eye(3), qc - pc)
    h = p0.T @ q0
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, qc - rot @ pc)


def kabsch_residual(predicted, reference) -> float:
    """Summed squared deviation after optimal proper superposition."""
    t = kabsch_align(predicted, reference)
    diff = apply_transform(t, predicted) - np.asarray(reference, dtype=np.float64)
    return float((diff * diff).sum())


def apply_transform(t: RigidTransform, coords) -> np.ndarray:
    c = np.asarray(coords, dtype=np.float64)
    return c @ t.rotation.T + t.translation


def gyration_spectrum(coords) -> GyrationSpectrum:
    c = _coords(coords)
    d = c - c.mean(axis=0)
    s = d.T @ d / len(c)
    w = np.linalg.eigvalsh(s)[::-1]
    w = np.where(w < 0, 0.0, w)
    return GyrationSpectrum(float(w[0]), float(w[1]), float(w[2]))


def asphericity(coords) -> float:
    """Normalized gyration asphericity in [0, 1]; 0 isotropic, 1 collinear."""
    c = _coords(coords)
    if len(c) < 2:
        raise UndefinedPropertyError("asphericity needs at least two points")
    l1, l2, l3 = gyration_spectrum(c).as_array()
    tr = l1 + l2 + l3
    if tr <= 1e-24 * max(1.0, float(np.abs(c).max()) ** 2):
        raise UndefinedPropertyError("asphericity undefined for coincident points")
    a = ((l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2) / (2.0 * tr * tr)
    return float(min(max(a, 0.0), 1.0))


def radius_of_gyration(coords) -> float:
    return float(np.sqrt(gyration_spectrum(coords).trace))


def random_transform(seed, proper_only: bool = True) -> RigidTransform:
    """Uniformly random rotation (or improper rotation w.p. 1/2) and translation in [-5, 5]^3."""
    rng = np.random.default_rng(seed)
    rot = Rotation.random(random_state=rng).as_matrix()
    if not proper_only and rng.random() < 0.5:
        rot = -rot
    return RigidTransform(rot, rng.uniform(-5.0, 5.0, size=3))
