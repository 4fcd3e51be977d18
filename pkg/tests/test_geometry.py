import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from e3wae.exceptions import ContractViolation, UndefinedPropertyError
from e3wae.geometry import (
    RigidTransform,
    apply_transform,
    asphericity,
    gyration_spectrum,
    kabsch_align,
    kabsch_residual,
    radius_of_gyration,
    random_transform,
)

TETRA = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
OCTA = np.vstack([np.eye(3), -np.eye(3)])
ROT90Z = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
seeds = st.integers(0, 2**32 - 1)


def brute_force_residual(p, q, rotations):
    """Best residual over sampled rotations, each with its optimal translation."""
    p0, q0 = p - p.mean(0), q - q.mean(0)
    moved = np.einsum("rij,nj->rni", rotations, p0)
    return ((moved - q0) ** 2).sum(axis=(1, 2)).min()


def test_kabsch_identity():
    x = np.random.default_rng(0).normal(size=(5, 3))
    t = kabsch_align(x, x)
    np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t.translation, 0.0, atol=1e-12)
    assert kabsch_residual(x, x) < 1e-20


def test_kabsch_recovers_rot90z():
    p = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 3]])
    q = p @ ROT90Z.T + np.array([1.0, 2.0, 3.0])
    t = kabsch_align(p, q)
    np.testing.assert_allclose(apply_transform(t, p), q, atol=1e-9)
    np.testing.assert_allclose(t.rotation, ROT90Z, atol=1e-9)


def test_kabsch_beats_sampled_rotations():
    rng = np.random.default_rng(1)
    p, q = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    grid = Rotation.random(10_000, random_state=rng).as_matrix()
    assert kabsch_residual(p, q) <= brute_force_residual(p, q, grid) + 1e-9


def test_kabsch_returns_proper_rotation_for_mirror_images():
    p = np.random.default_rng(2).normal(size=(5, 3))
    t = kabsch_align(p, p * np.array([1.0, 1.0, -1.0]))
    assert t.det == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("p", [np.ones((1, 3)), np.tile([[1.0, 2.0, 3.0]], (4, 1))])
def test_kabsch_degenerate(p):
    q = p + np.array([0.5, -1.0, 2.0])
    t = kabsch_align(p, q)
    np.testing.assert_array_equal(t.rotation, np.eye(3))
    np.testing.assert_allclose(t.translation, [0.5, -1.0, 2.0])


def test_kabsch_shape_mismatch():
    with pytest.raises(ContractViolation):
        kabsch_align(np.zeros((3, 3)), np.zeros((4, 3)))


@settings(max_examples=30, deadline=None)
@given(seed=seeds, n=st.integers(2, 12))
def test_kabsch_optimality_property(seed, n):
    rng = np.random.default_rng(seed)
    p, q = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    grid = Rotation.random(2_000, random_state=rng).as_matrix()
    assert kabsch_residual(p, q) <= brute_force_residual(p, q, grid) + 1e-9


def test_apply_identity_and_group_laws():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(7, 3))
    np.testing.assert_array_equal(apply_transform(RigidTransform.identity(), x), x)
    t1, t2 = random_transform(1, proper_only=False), random_transform(2, proper_only=False)
    np.testing.assert_allclose(apply_transform(t2, apply_transform(t1, x)), apply_transform(t2.compose(t1), x), atol=1e-12)
    np.testing.assert_allclose(apply_transform(t1.inverse(), apply_transform(t1, x)), x, atol=1e-10)


def test_spectrum_examples():
    np.testing.assert_array_equal(gyration_spectrum([[1.0, 2.0, 3.0]]).as_array(), 0.0)
    s = gyration_spectrum(TETRA).as_array()
    np.testing.assert_allclose(s, s[0], atol=1e-12)
    line = np.outer(np.arange(5.0), [1.0, 2.0, -1.0])
    s = gyration_spectrum(line).as_array()
    np.testing.assert_allclose(s[1:], 0.0, atol=1e-12)
    assert s[0] == pytest.approx(np.var(np.arange(5.0)) * 6.0)


def test_asphericity_examples():
    assert asphericity(TETRA) == pytest.approx(0.0, abs=1e-12)
    assert asphericity(OCTA) == pytest.approx(0.0, abs=1e-12)
    assert asphericity(np.outer(np.arange(4.0), [0.3, 0.1, 2.0])) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(UndefinedPropertyError):
        asphericity(np.ones((3, 3)))
    with pytest.raises(UndefinedPropertyError):
        asphericity(np.ones((1, 3)))


def test_asphericity_matches_eigensolver_oracle():
    x = np.random.default_rng(4).normal(size=(9, 3))
    d = x - x.mean(0)
    w = np.linalg.eigh(np.cov(d.T, bias=True))[0]
    ref = ((w[0] - w[1]) ** 2 + (w[1] - w[2]) ** 2 + (w[2] - w[0]) ** 2) / (2 * w.sum() ** 2)
    assert asphericity(x) == pytest.approx(ref, abs=1e-10)


def test_random_transform_contracts():
    for seed in range(20):
        t = random_transform(seed, proper_only=False)
        np.testing.assert_allclose(t.rotation.T @ t.rotation, np.eye(3), atol=1e-12)
        assert np.all(np.abs(t.translation) <= 5.0)
        assert random_transform(seed, proper_only=True).det == pytest.approx(1.0, abs=1e-12)
    a, b = random_transform(5, False), random_transform(5, False)
    assert np.array_equal(a.rotation, b.rotation) and np.array_equal(a.translation, b.translation)
    dets = {round(random_transform(s, proper_only=False).det) for s in range(40)}
    assert dets == {-1, 1}


@settings(max_examples=100, deadline=None)
@given(seed=seeds)
def test_asphericity_e3_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(int(rng.integers(2, 10)), 3))
    t = random_transform(rng, proper_only=False)
    assert abs(asphericity(x) - asphericity(apply_transform(t, x))) < 1e-10


@settings(max_examples=50, deadline=None)
@given(seed=seeds)
def test_asphericity_scale_invariant_and_bounded(seed):
    x = np.random.default_rng(seed).normal(size=(6, 3))
    a = asphericity(x)
    assert 0.0 <= a <= 1.0
    for c in (0.1, 10.0):
        assert asphericity(c * x) == pytest.approx(a, abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(seed=seeds)
def test_spectrum_trace_is_mean_square_distance(seed):
    x = np.random.default_rng(seed).normal(size=(5, 3)) * 3.0
    s = gyration_spectrum(x)
    msd = ((x - x.mean(0)) ** 2).sum(1).mean()
    assert s.trace == pytest.approx(msd, abs=1e-10)
    assert s.l1 >= s.l2 >= s.l3 >= 0.0
    assert radius_of_gyration(x) == pytest.approx(np.sqrt(msd))
