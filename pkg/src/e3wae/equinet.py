"""E(3)-equivariant layers on mixed scalar/vector node features.

Vector features are stored channels-last, shape ``(n, 3, d)``: a vector-neuron
linear map is then a plain right-multiplication ``v @ W`` that never touches
the spatial axis, so it commutes with any orthogonal ``R`` acting on axis 1.
Positions only enter through relative vectors ``r_i - r_j`` and their norms,
which makes every layer translation invariant.  No cross products are used,
so reflections are handled as well as rotations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "MixedFeatures",
    "EdgeIndex",
    "edge_index",
    "complete_edge_index",
    "glorot",
    "linear",
    "mlp",
    "vn_linear",
    "vn_nonlinearity",
    "vn_mlp",
    "channel_norms",
    "channel_dots",
    "init_linear",
    "init_mlp",
    "init_vn_mlp",
    "init_mfmp",
    "mf_message_passing",
    "readout",
]

Params = Mapping[str, Tensor]


@dataclass
class MixedFeatures:
    h: Tensor  # (n, d_h) invariant
    v: Tensor  # (n, 3, d_v) equivariant

    @property
    def n(self) -> int:
        return self.h.shape[0]


@dataclass
class EdgeIndex:
    """Directed edges ``src -> dst`` with constant relative geometry."""

    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray  # r_dst - r_src, (E, 3)
    dist: np.ndarray  # (E, 1)
    n: int
    attr: np.ndarray | None = None  # optional per-edge scalar features (E, k)
    weights: np.ndarray | None = None  # (C, E) message weights, one row per aggregation channel

    @property
    def num_channels(self) -> int:
        return 1 if self.weights is None else len(self.weights)

    @property
    def num_edges(self) -> int:
        return len(self.src)


def edge_index(coords: np.ndarray, edges, n: int | None = None, attr=None) -> EdgeIndex:
    """Both directions of every undirected edge in ``edges``.

    ``attr`` holds one feature row per undirected edge and is copied to both
    directions.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords) if n is None else n
    e = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    rel = coords[dst] - coords[src] if len(src) else np.zeros((0, 3))
    dist = np.sqrt((rel * rel).sum(axis=1, keepdims=True))
    if attr is not None:
        a = np.asarray(attr, dtype=np.float64)
        width = a.size // len(e) if len(e) else (a.shape[-1] if a.ndim == 2 else 0)
        a = a.reshape(len(e), width)
        attr = np.concatenate([a, a])
    return EdgeIndex(src, dst, rel, dist, n, attr)


def complete_edge_index(coords: np.ndarray, edges, graph_index) -> EdgeIndex:
    """All node pairs within each graph, with a 0/1 feature marking graph edges.

    Two aggregation channels: the sum over graph edges, and the mean over all
    other nodes of the same graph.
    """
    gi = np.asarray(graph_index)
    bonded = {(min(i, j), max(i, j)) for i, j in edges}
    pairs = []
    for b in np.unique(gi):
        rows = np.flatnonzero(gi == b)
        pairs.extend((int(i), int(j)) for k, i in enumerate(rows) for j in rows[k + 1 :])
    flag = np.array([[1.0 if p in bonded else 0.0] for p in pairs]).reshape(-1, 1)
    g = edge_index(coords, pairs, len(gi), flag)
    sizes = np.bincount(gi)
    mean_w = 1.0 / np.maximum(sizes[gi[g.dst]] - 1, 1).astype(np.float64)
    g.weights = np.stack([g.attr[:, 0], mean_w])
    return g


# --- parameter initialization ----------------------------------------------


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    lim = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_linear(rng, prefix: str, d_in: int, d_out: int, bias: bool = True, gain: float = 1.0) -> dict:
    p = {f"{prefix}.W": glorot(rng, d_in, d_out, gain)}
    if bias:
        p[f"{prefix}.b"] = np.zeros(d_out)
    return p


def init_mlp(rng, prefix: str, d_in: int, d_hidden: int, d_out: int, gain_out: float = 1.0) -> dict:
    p = init_linear(rng, f"{prefix}.0", d_in, d_hidden)
    p.update(init_linear(rng, f"{prefix}.1", d_hidden, d_out, gain=gain_out))
    return p


def init_vn_mlp(rng, prefix: str, d_in: int, d_hidden: int, d_out: int) -> dict:
    return {
        f"{prefix}.W1": glorot(rng, d_in, d_hidden),
        f"{prefix}.Q": glorot(rng, d_hidden, d_hidden),
        f"{prefix}.U": glorot(rng, d_hidden, d_hidden),
        f"{prefix}.W2": glorot(rng, d_hidden, d_out),
    }


def init_mfmp(rng, prefix: str, d_h: int, d_v: int, d_edge: int = 0, channels: int = 1) -> dict:
    """Parameters of one :func:`mf_message_passing` layer (widths preserved)."""
    p = {}
    p.update(init_mlp(rng, f"{prefix}.msg", 2 * d_h + 1 + d_v + d_edge, d_h, d_h))
    p.update(init_linear(rng, f"{prefix}.gate", d_h, d_v))
    p[f"{prefix}.vmsg.W"] = glorot(rng, 2 * d_v, d_v)
    p[f"{prefix}.vmsg.Q"] = glorot(rng, d_v, d_v)
    p[f"{prefix}.vmsg.U"] = glorot(rng, d_v, d_v)
    p.update(init_mlp(rng, f"{prefix}.upd", (1 + channels) * d_h + d_v, d_h, d_h, gain_out=0.5))
    p[f"{prefix}.vupd.W"] = glorot(rng, (1 + channels) * d_v, d_v, gain=0.5)
    return p


# --- layers -----------------------------------------------------------------


def linear(x: Tensor, P: Params, prefix: str) -> Tensor:
    y = ad.matmul(x, P[f"{prefix}.W"])
    b = P.get(f"{prefix}.b")
    if b is not None:
        y = ad.add(y, ad.broadcast(b, y.shape))
    return y


def mlp(x: Tensor, P: Params, prefix: str) -> Tensor:
    """Two-layer perceptron with a leaky-ReLU hidden layer."""
    return linear(ad.leaky_relu(linear(x, P, f"{prefix}.0")), P, f"{prefix}.1")


def vn_linear(v: Tensor, W) -> Tensor:
    """Channel mixing ``(n, 3, d) -> (n, 3, d')``; the spatial axis is untouched."""
    return ad.matmul(v, W)


def channel_dots(a: Tensor, b: Tensor) -> Tensor:
    """Per-channel inner products of two ``(n, 3, d)`` blocks -> ``(n, d)``."""
    return ad.sum(ad.mul(a, b), axis=1)


def channel_norms(v: Tensor) -> Tensor:
    return ad.row_l2_norm(v, axis=1)


def vn_nonlinearity(v: Tensor, U, Q, eps: float = 1e-12) -> Tensor:
    """Vector-neuron ReLU.

    With ``q = v Q`` and ``k = v U`` per channel, keep ``q`` when
    ``<q, k> >= 0`` and otherwise remove its component along ``k``.
    """
    q = ad.matmul(v, Q)
    k = ad.matmul(v, U)
    dot = channel_dots(q, k)
    kk = ad.clamp_min(channel_dots(k, k), eps)
    coef = ad.div(ad.neg(ad.relu(ad.neg(dot))), kk)  # min(dot, 0) / |k|^2
    n, _, d = q.shape
    coef = ad.broadcast(ad.reshape(coef, (n, 1, d)), q.shape)
    return ad.sub(q, ad.mul(coef, k))


def vn_mlp(v: Tensor, P: Params, prefix: str) -> Tensor:
    h = vn_linear(v, P[f"{prefix}.W1"])
    h = vn_nonlinearity(h, P[f"{prefix}.U"], P[f"{prefix}.Q"])
    return vn_linear(h, P[f"{prefix}.W2"])


def mf_message_passing(g: EdgeIndex, feats: MixedFeatures, P: Params, prefix: str) -> MixedFeatures:
    """One residual mixed-feature message-passing layer.

    For a directed edge ``j -> i`` the scalar message is an MLP of
    ``(h_i, h_j, |r_i - r_j|, <v_i, v_j>)`` plus any edge features; the vector message is a VN map of
    ``(v_i, v_j)`` plus ``r_i - r_j`` scaled per channel by a gate read from the
    scalar message.  Messages are summed at ``i`` (once per weight channel of
    ``g``) and added back through a scalar MLP and a VN linear map.
    """
    h, v = feats.h, feats.v
    n, d_h = h.shape
    d_v = v.shape[2]
    E = g.num_edges
    if E:
        hi, hj = ad.take(h, g.dst), ad.take(h, g.src)
        vi, vj = ad.take(v, g.dst), ad.take(v, g.src)
        parts = [hi, hj, Tensor(g.dist), channel_dots(vi, vj)]
        if g.attr is not None:
            parts.append(Tensor(g.attr))
        s_in = ad.concat(parts, axis=1)
        m = mlp(s_in, P, f"{prefix}.msg")
        gate = linear(m, P, f"{prefix}.gate")  # (E, d_v)
        rel = ad.broadcast(Tensor(g.rel.reshape(E, 3, 1)), (E, 3, d_v))
        gated = ad.mul(ad.broadcast(ad.reshape(gate, (E, 1, d_v)), (E, 3, d_v)), rel)
        vm = ad.add(vn_linear(ad.concat([vi, vj], axis=2), P[f"{prefix}.vmsg.W"]), gated)
        vm = vn_nonlinearity(vm, P[f"{prefix}.vmsg.U"], P[f"{prefix}.vmsg.Q"])
        if g.weights is None:
            agg_h = [ad.segment_sum(m, g.dst, n)]
            agg_v = [ad.segment_sum(vm, g.dst, n)]
        else:
            agg_h, agg_v = [], []
            for w in g.weights:
                agg_h.append(ad.segment_sum(ad.mul(m, Tensor(np.broadcast_to(w[:, None], m.shape))), g.dst, n))
                agg_v.append(ad.segment_sum(ad.mul(vm, Tensor(np.broadcast_to(w[:, None, None], vm.shape))), g.dst, n))
    else:
        agg_h = [Tensor(np.zeros((n, d_h)))] * g.num_channels
        agg_v = [Tensor(np.zeros((n, 3, d_v)))] * g.num_channels
    u_in = ad.concat([h, *agg_h, channel_norms(v)], axis=1)
    h_new = ad.add(h, mlp(u_in, P, f"{prefix}.upd"))
    v_new = ad.add(v, vn_linear(ad.concat([v, *agg_v], axis=2), P[f"{prefix}.vupd.W"]))
    return MixedFeatures(h_new, v_new)


def readout(
    feats: MixedFeatures, graph_index=None, num_graphs: int = 1, mode: str = "mean"
) -> tuple[Tensor, Tensor]:
    """Per-graph mean or sum of node features -> ``(G, d_h)`` and ``(G, 3, d_v)``."""
    if mode not in ("mean", "sum"):
        raise ValueError(f"readout mode must be 'mean' or 'sum', got {mode!r}")
    n = feats.n
    gi = np.zeros(n, dtype=np.int64) if graph_index is None else np.asarray(graph_index)
    h = ad.segment_sum(feats.h, gi, num_graphs)
    v = ad.segment_sum(feats.v, gi, num_graphs)
    if mode == "mean":
        counts = np.bincount(gi, minlength=num_graphs).astype(np.float64)
        if np.any(counts == 0):
            raise ValueError("readout over an empty graph")
        inv = 1.0 / counts
        h = ad.mul(h, Tensor(np.broadcast_to(inv[:, None], h.shape)))
        v = ad.mul(v, Tensor(np.broadcast_to(inv[:, None, None], v.shape)))
    return h, v
