import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from e3wae import autodiff as ad
from e3wae.autodiff import Tensor, finite_diff_check
from e3wae.equinet import (
    MixedFeatures,
    complete_edge_index,
    edge_index,
    init_mfmp,
    mf_message_passing,
    readout,
    vn_linear,
    vn_nonlinearity,
)
from e3wae.geometry import apply_transform, random_transform

seeds = st.integers(0, 2**32 - 1)


def rot(v, R):
    """Rotate channels-last vector features ``(n, 3, d)``."""
    return np.einsum("ij,njd->nid", R, v)


def rel_dev(a, b):
    return np.abs(a - b).max() / max(1.0, np.abs(a).max())


def small_graph(seed, n=5, d_h=4, d_v=3):
    rng = np.random.default_rng(seed)
    coords = rng.normal(size=(n, 3))
    edges = [(i, i + 1) for i in range(n - 1)] + [(0, n - 1)]
    h = rng.normal(size=(n, d_h))
    v = rng.normal(size=(n, 3, d_v))
    return coords, edges, h, v


def layer_params(seed, d_h=4, d_v=3, d_edge=0, channels=1):
    return {k: Tensor(a) for k, a in init_mfmp(np.random.default_rng(seed), "mp", d_h, d_v, d_edge, channels).items()}


def test_vn_linear_examples():
    v = np.random.default_rng(0).normal(size=(4, 3, 5))
    assert np.array_equal(vn_linear(Tensor(v), Tensor(np.eye(5))).data, v)
    assert np.array_equal(vn_linear(Tensor(v), Tensor(np.zeros((5, 2)))).data, np.zeros((4, 3, 2)))
    W = np.random.default_rng(1).normal(size=(5, 2))
    R = random_transform(2, proper_only=False).rotation
    np.testing.assert_allclose(vn_linear(Tensor(rot(v, R)), Tensor(W)).data, rot(vn_linear(Tensor(v), Tensor(W)).data, R), atol=1e-12)


def test_vn_nonlinearity_pass_through_when_aligned():
    v = np.random.default_rng(3).normal(size=(4, 3, 2))
    out = vn_nonlinearity(Tensor(v), Tensor(np.eye(2)), Tensor(np.eye(2))).data
    np.testing.assert_array_equal(out, v)  # <q, q> >= 0


def test_vn_nonlinearity_projects_when_opposed():
    v = np.random.default_rng(4).normal(size=(4, 3, 2))
    out = vn_nonlinearity(Tensor(v), Tensor(-np.eye(2)), Tensor(np.eye(2))).data
    # k = -q: the component of q along k is all of q
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_vn_nonlinearity_zero_key_guard():
    v = np.random.default_rng(5).normal(size=(2, 3, 2))
    out = vn_nonlinearity(Tensor(v), Tensor(np.zeros((2, 2))), Tensor(np.eye(2))).data
    np.testing.assert_array_equal(out, v)


def test_vn_nonlinearity_equivariant_100_rotations():
    rng = np.random.default_rng(6)
    v = rng.normal(size=(5, 3, 4))
    U, Q = Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4)))
    base = vn_nonlinearity(Tensor(v), U, Q).data
    for _ in range(100):
        R = random_transform(rng, proper_only=False).rotation
        assert rel_dev(rot(base, R), vn_nonlinearity(Tensor(rot(v, R)), U, Q).data) < 1e-10


def test_no_edge_layer_with_zero_update_is_identity():
    coords, _, h, v = small_graph(0)
    P = layer_params(0)
    for k in ("mp.upd.1.W", "mp.upd.1.b", "mp.vupd.W"):
        P[k] = Tensor(np.zeros_like(P[k].data))
    out = mf_message_passing(edge_index(coords, []), MixedFeatures(Tensor(h), Tensor(v)), P, "mp")
    np.testing.assert_array_equal(out.h.data, h)
    np.testing.assert_array_equal(out.v.data, v)


def _layer_outputs(coords, edges, h, v, P, complete):
    if complete:
        g = complete_edge_index(coords, edges, np.zeros(len(coords), dtype=int))
    else:
        g = edge_index(coords, edges)
    out = mf_message_passing(g, MixedFeatures(Tensor(h), Tensor(v)), P, "mp")
    return out.h.data, out.v.data


@pytest.mark.parametrize("complete", [False, True])
def test_layer_transform_contract(complete):
    coords, edges, h, v = small_graph(1)
    P = layer_params(1, d_edge=int(complete), channels=1 + int(complete))
    h0, v0 = _layer_outputs(coords, edges, h, v, P, complete)
    for s in range(20):
        t = random_transform(s, proper_only=False)
        h1, v1 = _layer_outputs(apply_transform(t, coords), edges, h, rot(v, t.rotation), P, complete)
        assert rel_dev(h0, h1) < 1e-9
        assert rel_dev(rot(v0, t.rotation), v1) < 1e-9


def test_stacked_layers_equivariant_100_transforms():
    coords, edges, h, v = small_graph(2)
    v = np.zeros_like(v)
    Ps = [layer_params(10 + k) for k in range(3)]

    def run(c, vv):
        feats = MixedFeatures(Tensor(h), Tensor(vv))
        g = edge_index(c, edges)
        for P in Ps:
            feats = mf_message_passing(g, feats, P, "mp")
        return feats.h.data, feats.v.data

    h0, v0 = run(coords, v)
    rng = np.random.default_rng(3)
    for _ in range(100):
        t = random_transform(rng, proper_only=False)
        h1, v1 = run(apply_transform(t, coords), v)
        assert rel_dev(h0, h1) < 1e-8
        assert rel_dev(rot(v0, t.rotation), v1) < 1e-8


def test_layer_permutation_equivariant():
    coords, edges, h, v = small_graph(4)
    P = layer_params(4)
    h0, v0 = _layer_outputs(coords, edges, h, v, P, False)
    perm = np.random.default_rng(0).permutation(len(coords))
    inv = np.argsort(perm)
    edges_p = [(int(inv[i]), int(inv[j])) for i, j in edges]
    h1, v1 = _layer_outputs(coords[perm], edges_p, h[perm], v[perm], P, False)
    np.testing.assert_allclose(h1, h0[perm], atol=1e-12)
    np.testing.assert_allclose(v1, v0[perm], atol=1e-12)


@settings(max_examples=5, deadline=None)
@given(seed=seeds)
def test_layer_gradients(seed):
    coords, edges, h, v = small_graph(seed, n=4, d_h=3, d_v=2)
    params = {k: t.data for k, t in layer_params(seed, 3, 2).items()}
    g = edge_index(coords, edges)
    w_h = np.random.default_rng(seed + 1).normal(size=h.shape)
    w_v = np.random.default_rng(seed + 2).normal(size=v.shape)

    def f(P):
        out = mf_message_passing(g, MixedFeatures(Tensor(h), Tensor(v)), P, "mp")
        return ad.add(ad.sum(ad.mul(out.h, Tensor(w_h))), ad.sum(ad.mul(out.v, Tensor(w_v))))

    assert finite_diff_check(f, params) < 1e-5


def test_readout_examples():
    rng = np.random.default_rng(7)
    h, v = rng.normal(size=(1, 4)), rng.normal(size=(1, 3, 2))
    ph, pv = readout(MixedFeatures(Tensor(h), Tensor(v)))
    np.testing.assert_array_equal(ph.data, h)
    np.testing.assert_array_equal(pv.data, v)
    rows = np.tile(h, (5, 1))
    ph, _ = readout(MixedFeatures(Tensor(rows), Tensor(np.zeros((5, 3, 2)))), mode="mean")
    np.testing.assert_allclose(ph.data[0], h[0], atol=1e-15)
    h2 = rng.normal(size=(3, 4))
    s1, _ = readout(MixedFeatures(Tensor(h2), Tensor(np.zeros((3, 3, 2)))), mode="sum")
    s2, _ = readout(MixedFeatures(Tensor(np.vstack([h2, h2])), Tensor(np.zeros((6, 3, 2)))), mode="sum")
    np.testing.assert_allclose(s2.data, 2 * s1.data, atol=1e-14)


def test_complete_edge_index_channels():
    coords = np.random.default_rng(8).normal(size=(5, 3))
    gi = np.array([0, 0, 0, 1, 1])
    g = complete_edge_index(coords, [(0, 1), (3, 4)], gi)
    assert g.num_edges == 2 * (3 + 1) and g.num_channels == 2
    bonded = g.weights[0]
    assert bonded.sum() == 4  # two bonds, both directions
    # mean channel: weights into each node sum to one
    np.testing.assert_allclose(np.bincount(g.dst, weights=g.weights[1]), 1.0)
    assert np.all(gi[g.src] == gi[g.dst])
