import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from e3wae import autodiff as ad
from e3wae.autodiff import Tensor, finite_diff_check
from e3wae.exceptions import ContractViolation
from e3wae.geometry import apply_transform, random_transform
from e3wae.losses import (
    LOG_MSE_FLOOR,
    CoordSample,
    LossWeights,
    coord_loss,
    cross_entropy,
    disentangle_loss,
    draw_prior,
    mmd_linear,
    mmd_unbiased_quadratic,
    property_loss,
    rbf_kernel,
    total_loss,
)

seeds = st.integers(0, 2**32 - 1)


def test_rbf_kernel_examples():
    assert rbf_kernel([0, 0], [0, 0]) == 1.0
    assert rbf_kernel([0.0], [2.0]) == pytest.approx(np.exp(-2.0), abs=1e-15)
    assert rbf_kernel([0.0], [2.0], sigma=2.0) == pytest.approx(np.exp(-0.5), abs=1e-15)
    with pytest.raises(ContractViolation):
        rbf_kernel([0, 1], [0])


def test_mmd_linear_hand_value_m2():
    z = np.array([[0.0, 0.0], [1.0, 0.0]])
    t = np.array([[0.0, 1.0], [2.0, 1.0]])
    # squared distances: z1-z2 1, t1-t2 4, z1-t2 5, z2-t1 2
    expected = np.exp(-0.5) + np.exp(-2.0) - np.exp(-2.5) - np.exp(-1.0)
    assert abs(float(mmd_linear(z, t).data) - expected) < 1e-12


def test_mmd_linear_drops_trailing_odd_row():
    rng = np.random.default_rng(0)
    z, t = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    assert float(mmd_linear(z, t).data) == float(mmd_linear(z[:4], t[:4]).data)


def test_mmd_contract_errors():
    with pytest.raises(ContractViolation):
        mmd_linear(np.zeros((1, 2)), np.zeros((1, 2)))
    with pytest.raises(ContractViolation):
        mmd_linear(np.zeros((4, 2)), np.zeros((4, 3)))
    with pytest.raises(ContractViolation):
        mmd_unbiased_quadratic(np.zeros((1, 2)), np.zeros((3, 2)))


def test_mmd_identical_samples():
    z = np.random.default_rng(1).normal(size=(6, 2))
    # k(z1,z2)+k(z1,z2)-2k(z1,z2) per pair
    assert abs(float(mmd_linear(z, z).data)) < 1e-15


def test_mmd_separates_shifted_distributions():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(512, 2))
    y = rng.normal(size=(512, 2)) + 2.0
    assert float(mmd_linear(x, y).data) > 0.3
    assert mmd_unbiased_quadratic(x, y) > 0.3


@settings(max_examples=10, deadline=None)
@given(seed=seeds)
def test_mmd_linear_gradient(seed):
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(6, 3))
    f = lambda P: mmd_linear(P["z"], Tensor(t))
    assert finite_diff_check(f, {"z": rng.normal(size=(6, 3))}) < 1e-6


def test_draw_prior_shapes_and_small_batches():
    rng = np.random.default_rng(3)
    d = draw_prior(rng, 10, 4, 3, 2)
    assert d.rows.shape == (4,) and np.all(np.diff(d.rows) > 0)
    assert d.eps_h.shape == (4, 6) and d.eps_v.shape == (4, 3, 4)
    assert draw_prior(rng, 1, 4, 3, 2) is None
    zero_h, zero_v = disentangle_loss(Tensor(np.ones((1, 6))), Tensor(np.ones((1, 3, 4))), None)
    assert float(zero_h.data) == 0.0 and float(zero_v.data) == 0.0


def test_disentangle_vector_term_is_invariant_with_rotated_prior():
    rng = np.random.default_rng(4)
    zh, zv = rng.normal(size=(8, 4)), rng.normal(size=(8, 3, 2))
    prior = draw_prior(rng, 8, 8, 2, 1)
    R = random_transform(5, proper_only=False).rotation
    _, a = disentangle_loss(Tensor(zh), Tensor(zv), prior)
    _, b = disentangle_loss(Tensor(zh), Tensor(np.einsum("ij,njd->nid", R, zv)), prior.transformed(R))
    assert abs(float(a.data) - float(b.data)) < 1e-13


def test_property_loss():
    assert float(property_loss([1.0, 2.0], Tensor(np.array([1.5, 1.0]))).data) == 0.75
    with pytest.raises(ContractViolation):
        property_loss([np.nan, 1.0], Tensor(np.zeros(2)))


def test_cross_entropy_values_and_masking():
    logits = np.array([[0.0, 0.0, -np.inf], [np.log(3.0), 0.0, -np.inf]])
    ce = float(cross_entropy(Tensor(logits), [0, 0]).data)
    assert ce == pytest.approx((np.log(2.0) + np.log(4.0 / 3.0)) / 2, abs=1e-14)
    with pytest.raises(ContractViolation):
        cross_entropy(Tensor(logits), [2, 0])
    with pytest.raises(ContractViolation):
        cross_entropy(Tensor(logits), [0, 3])
    with pytest.raises(ContractViolation):
        cross_entropy(Tensor(logits), [0])


def test_cross_entropy_masked_column_gets_no_gradient():
    logits = np.array([[0.3, -0.2, -np.inf]])
    x = Tensor(logits, requires_grad=True)
    with ad.Tape() as tape:
        g = tape.gradient(cross_entropy(x, [1]), {"x": x})["x"]
    assert g[0, 2] == 0.0
    np.testing.assert_allclose(g[0, :2].sum(), 0.0, atol=1e-15)


def _samples(rng, sizes, step=0):
    out = []
    for k in sizes:
        pts = rng.normal(size=(k, 3))
        out.append(CoordSample(pts[:-1], pts[-1], step))
    return out


def test_coord_loss_exact_prediction():
    rng = np.random.default_rng(6)
    small = _samples(rng, [2, 3])
    pred = Tensor(np.stack([s.target for s in small]))
    assert float(coord_loss(pred, small).data) == pytest.approx(0.0, abs=1e-20)
    large = _samples(rng, [5], step=1)
    pred = Tensor(np.stack([s.target for s in large]))
    assert float(coord_loss(pred, large).data) == pytest.approx(np.log(LOG_MSE_FLOOR))


def test_coord_loss_small_subgraphs_forgive_rigid_motion():
    rng = np.random.default_rng(7)
    s = _samples(rng, [2])[0]
    t = random_transform(8)
    moved = apply_transform(t, np.vstack([s.prev_true, s.target]))
    # a prediction matching the truth up to a rigid motion of the whole pair
    sample = CoordSample(s.prev_true, s.target, 0)
    d = np.linalg.norm(s.target - s.prev_true[0])
    direction = moved[1] - moved[0]
    pred = s.prev_true[0] + d * direction / np.linalg.norm(direction)
    aligned = float(coord_loss(Tensor(pred[None]), [sample]).data)
    plain = float(coord_loss(Tensor(pred[None]), [sample], align_max_nodes=0).data)
    assert aligned < 1e-20
    assert plain > np.log(1e-6)


def test_coord_loss_log_mse_value():
    s = CoordSample(np.zeros((4, 3)), np.array([1.0, 0.0, 0.0]), 2)
    loss = float(coord_loss(Tensor(np.array([[0.0, 0.0, 0.0]])), [s]).data)
    assert loss == pytest.approx(0.0, abs=1e-15)  # log(1)
    assert float(coord_loss(Tensor(np.zeros((1, 3))), [s], flags=[False]).data) == 0.0


def test_coord_loss_sums_over_steps():
    rng = np.random.default_rng(9)
    a = _samples(rng, [5], step=0)
    b = _samples(rng, [6], step=1)
    pa, pb = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    both = float(coord_loss(Tensor(np.vstack([pa, pb])), a + b).data)
    sep = float(coord_loss(Tensor(pa), a).data) + float(coord_loss(Tensor(pb), b).data)
    assert both == pytest.approx(sep, abs=1e-13)


@settings(max_examples=10, deadline=None)
@given(seed=seeds)
def test_coord_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    samples = _samples(rng, [2, 3, 5, 6], step=0) + _samples(rng, [4], step=1)
    pred = np.stack([s.target for s in samples]) + rng.normal(size=(5, 3))
    assert finite_diff_check(lambda P: coord_loss(P["r"], samples), {"r": pred}) < 1e-5


def test_coord_loss_shape_error():
    with pytest.raises(ContractViolation):
        coord_loss(Tensor(np.zeros((2, 3))), _samples(np.random.default_rng(0), [3]))


def test_total_loss_weighting():
    parts = {k: Tensor(np.array(v)) for k, v in dict(prop=1.0, dis_h=2.0, dis_v=3.0, node_type=4.0, edge=5.0, coords=6.0).items()}
    total, rep = total_loss(parts, LossWeights(alpha=0.5, beta=0.1))
    assert float(total.data) == pytest.approx(1.0 + 0.5 * 5.0 + 0.1 * 15.0)
    assert rep.total == float(total.data) and rep.edge == 5.0
    with pytest.raises(ContractViolation):
        total_loss({"prop": parts["prop"]}, LossWeights())
    with pytest.raises(ContractViolation):
        LossWeights(alpha=-1.0)
    with pytest.raises(ContractViolation):
        LossWeights(sigma=0.0)
