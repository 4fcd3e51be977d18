"""The E3WAE network: disentangled two-branch encoder and autoregressive decoder.

Everything here is batched.  A :class:`GraphBatch` holds several fragment
graphs as one disjoint union; decoding steps from many graphs and trace
positions are packed into a :class:`StepBatch`, where every step owns a private
copy of its graph's nodes.  One decoder message-passing pass over that union
therefore updates the latents of every partial graph at once, and the same code
path serves teacher forcing (many steps) and generation (one step at a time).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .equinet import (
    EdgeIndex,
    MixedFeatures,
    channel_dots,
    channel_norms,
    complete_edge_index,
    edge_index,
    glorot,
    init_linear,
    init_mfmp,
    init_mlp,
    init_vn_mlp,
    linear,
    mf_message_passing,
    mlp,
    readout,
    vn_linear,
    vn_mlp,
)
from .exceptions import ContractViolation
from .molgraph import Expand, FragmentGraph3D, GenerationTrace, Stop

__all__ = [
    "ModelConfig",
    "init_params",
    "GraphBatch",
    "LatentState",
    "encode",
    "predict_property",
    "decode_node_types",
    "decoder_inputs",
    "StepSpec",
    "StepBatch",
    "step_features",
    "edge_logits",
    "predict_coordinates",
    "TeacherForcedOutput",
    "trace_step_specs",
    "reconstruct_teacher_forced",
]

Params = Mapping[str, Tensor]


@dataclass
class ModelConfig:
    K: int
    d_h: int = 28
    d_v: int = 8
    layers: int = 4
    readout: str = "mean"

    @property
    def D(self) -> int:
        """Decoder scalar width."""
        return 2 * self.d_h

    @property
    def Dv(self) -> int:
        """Decoder vector width."""
        return 2 * self.d_v


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh parameter arrays; the two encoder branches share nothing."""
    rng = np.random.default_rng(seed)
    d_h, d_v, D, Dv, K = cfg.d_h, cfg.d_v, cfg.D, cfg.Dv, cfg.K
    p: dict[str, np.ndarray] = {}
    for br, channels in (("enc_p", 1), ("enc_s", 2)):
        p[f"{br}.embed"] = rng.normal(0.0, 1.0, size=(1 if br == "enc_p" else K, d_h))
        p[f"{br}.vinit"] = rng.normal(0.0, 1.0, size=(1, d_v))
        for layer in range(cfg.layers):
            p.update(init_mfmp(rng, f"{br}.mp{layer}", d_h, d_v, d_edge=1, channels=channels))
        p.update(init_linear(rng, f"{br}.out", d_h, d_h))
        p[f"{br}.vout.W"] = glorot(rng, d_v, d_v)
    p.update(init_mlp(rng, "prop", d_h, d_h, 1))
    desc = 2 * d_h + 2 * d_v
    for name in ("q", "k", "v"):
        p[f"att.W{name}"] = glorot(rng, desc, d_h)
    p.update(init_mlp(rng, "types", desc + d_h, d_h, K))
    p["dec.type_emb"] = rng.normal(0.0, 1.0, size=(K, d_h))
    p.update(init_linear(rng, "dec.in", 2 * d_h + d_h, D))
    p["dec.placed"] = rng.normal(0.0, 0.1, size=D)
    p["dec.vin.W"] = glorot(rng, 2 * d_v, Dv)
    p.update(init_mfmp(rng, "dec.mp", D, Dv))
    p.update(init_mlp(rng, "phi", 4 * D + 2 * Dv + 1, D, 1))
    p["stop.h"] = rng.normal(0.0, 0.1, size=D)
    p["stop.vn"] = rng.normal(0.0, 0.1, size=Dv)
    p.update(init_mlp(rng, "psi", 2 * D + Dv, D, 1, gain_out=0.1))
    p["coord.W1"] = glorot(rng, Dv, Dv)
    p["coord.W2"] = glorot(rng, Dv, Dv)
    p.update(init_vn_mlp(rng, "omega2", 2 * Dv, Dv, Dv))
    p.update(init_vn_mlp(rng, "omega1", Dv, Dv, 1))
    return p


# --- encoder ----------------------------------------------------------------


@dataclass
class GraphBatch:
    """Disjoint union of fragment graphs with per-graph centered coordinates."""

    graphs: list[FragmentGraph3D]
    types: np.ndarray
    coords: np.ndarray
    graph_index: np.ndarray
    offsets: np.ndarray
    edges: EdgeIndex
    pair_edges: EdgeIndex

    @classmethod
    def from_graphs(cls, graphs: Sequence[FragmentGraph3D], types=None) -> "GraphBatch":
        graphs = list(graphs)
        if not graphs:
            raise ContractViolation("empty graph batch")
        sizes = np.array([g.n for g in graphs])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        coords = np.concatenate([g.coords - g.coords.mean(axis=0) for g in graphs])
        all_edges = [(i + o, j + o) for g, o in zip(graphs, offsets) for i, j in g.edges]
        t = np.concatenate([g.frag_types for g in graphs]) if types is None else np.asarray(types)
        gi = np.repeat(np.arange(len(graphs)), sizes)
        return cls(
            graphs,
            t.astype(np.int64),
            coords,
            gi,
            offsets,
            edge_index(coords, all_edges, len(coords)),
            complete_edge_index(coords, all_edges, gi),
        )

    @property
    def num_graphs(self) -> int:
        return len(self.graphs)

    @property
    def num_nodes(self) -> int:
        return len(self.types)


@dataclass
class LatentState:
    """Per-node latent blocks; vector blocks channels-last ``(N, 3, d_v)``."""

    z_h_p: Tensor
    z_v_p: Tensor
    z_h_s: Tensor
    z_v_s: Tensor
    graph_index: np.ndarray = None
    num_graphs: int = 1

    def __post_init__(self):
        if self.graph_index is None:
            self.graph_index = np.zeros(self.z_h_p.shape[0], dtype=np.int64)

    @property
    def n(self) -> int:
        return self.z_h_p.shape[0]

    @property
    def z_h(self) -> Tensor:
        return ad.concat([self.z_h_p, self.z_h_s], axis=1)

    @property
    def z_v(self) -> Tensor:
        return ad.concat([self.z_v_p, self.z_v_s], axis=2)

    def as_arrays(self) -> dict[str, np.ndarray]:
        """Plain arrays with vector blocks as ``(n, d_v, 3)``."""
        return {
            "z_h_p": self.z_h_p.data.copy(),
            "z_v_p": np.swapaxes(self.z_v_p.data, 1, 2).copy(),
            "z_h_s": self.z_h_s.data.copy(),
            "z_v_s": np.swapaxes(self.z_v_s.data, 1, 2).copy(),
        }

    def graph_rows(self, b: int) -> np.ndarray:
        return np.flatnonzero(self.graph_index == b)

    def select(self, rows) -> "LatentState":
        rows = np.asarray(rows)
        return LatentState(
            Tensor(self.z_h_p.data[rows]),
            Tensor(self.z_v_p.data[rows]),
            Tensor(self.z_h_s.data[rows]),
            Tensor(self.z_v_s.data[rows]),
        )

    @classmethod
    def concat_graphs(cls, parts: Sequence["LatentState"]) -> "LatentState":
        gi = np.concatenate([np.full(p.n, b) for b, p in enumerate(parts)])
        cat = lambda name, axis: Tensor(np.concatenate([getattr(p, name).data for p in parts], axis=axis))
        return cls(cat("z_h_p", 0), cat("z_v_p", 0), cat("z_h_s", 0), cat("z_v_s", 0), gi, len(parts))


def _encoder_branch(batch: GraphBatch, P: Params, cfg: ModelConfig, br: str) -> tuple[Tensor, Tensor]:
    """Message passing over every fragment pair.

    The context branch embeds fragment types, sums messages over graph edges
    and, separately, averages them over all other nodes.  The property branch
    starts every node from one shared embedding and keeps only the average:
    it sees geometry and the bonded flag but not fragment identity, so the
    decoder has to take composition from the context block.
    """
    g = batch.pair_edges
    if br == "enc_p":
        g = replace(g, weights=g.weights[1:])
    h = ad.take(P[f"{br}.embed"], batch.types if br == "enc_s" else np.zeros_like(batch.types))
    # vector channels start as learned multiples of the centroid-relative position
    v = vn_linear(Tensor(batch.coords[:, :, None]), P[f"{br}.vinit"])
    feats = MixedFeatures(h, v)
    for layer in range(cfg.layers):
        feats = mf_message_passing(g, feats, P, f"{br}.mp{layer}")
    return linear(feats.h, P, f"{br}.out"), vn_linear(feats.v, P[f"{br}.vout.W"])


def encode(batch: GraphBatch, P: Params, cfg: ModelConfig) -> LatentState:
    """Run the property and context encoders on a graph batch."""
    z_h_p, z_v_p = _encoder_branch(batch, P, cfg, "enc_p")
    z_h_s, z_v_s = _encoder_branch(batch, P, cfg, "enc_s")
    return LatentState(z_h_p, z_v_p, z_h_s, z_v_s, batch.graph_index, batch.num_graphs)


def predict_property(lat: LatentState, P: Params, cfg: ModelConfig) -> Tensor:
    """Property head on the read-out property scalars; shape ``(num_graphs,)``."""
    pooled, _ = readout(
        MixedFeatures(lat.z_h_p, lat.z_v_p), lat.graph_index, lat.num_graphs, cfg.readout
    )
    return ad.reshape(mlp(pooled, P, "prop"), (lat.num_graphs,))


def decode_node_types(lat: LatentState, P: Params, cfg: ModelConfig) -> Tensor:
    """Single-head self-attention within each graph followed by an MLP -> (N, K) logits."""
    z_h, z_v = lat.z_h, lat.z_v
    x = ad.concat([z_h, channel_norms(z_v)], axis=1)
    q = ad.matmul(x, P["att.Wq"])
    k = ad.matmul(x, P["att.Wk"])
    v = ad.matmul(x, P["att.Wv"])
    scores = ad.scalar_mul(1.0 / np.sqrt(cfg.d_h), ad.matmul(q, ad.transpose(k)))
    gi = lat.graph_index
    mask = np.where(gi[:, None] == gi[None, :], 0.0, -np.inf)
    att = ad.matmul(ad.softmax(ad.add(scores, Tensor(mask)), axis=1), v)
    return mlp(ad.concat([x, att], axis=1), P, "types")


def decoder_inputs(lat: LatentState, types: np.ndarray, P: Params) -> MixedFeatures:
    """Per-node decoder features: latents joined with the embedded node types."""
    emb = ad.take(P["dec.type_emb"], np.asarray(types, dtype=np.int64))
    h = linear(ad.concat([lat.z_h, emb], axis=1), P, "dec.in")
    v = vn_linear(lat.z_v, P["dec.vin.W"])
    return MixedFeatures(h, v)


# --- decoding steps ---------------------------------------------------------


@dataclass
class StepSpec:
    """One focus/expand decision on a partial graph.

    ``node_base``/``n`` locate the graph's rows in the latent arrays; ``coords``
    is ``(n, 3)`` and only meaningful at ``placed`` nodes.  ``target`` is
    ``None`` for a stop decision.
    """

    node_base: int
    n: int
    placed: list[int]
    coords: np.ndarray
    edges: list[tuple[int, int]]
    focus: int
    target: int | None = None
    new_node: bool = False
    graph: int = 0
    t: int = 0


@dataclass
class StepBatch:
    specs: list[StepSpec]
    row_node: np.ndarray
    row_step: np.ndarray
    placed_flag: np.ndarray
    edges: EdgeIndex
    C: int
    focus_row: np.ndarray
    pair_step: np.ndarray
    pair_focus: np.ndarray
    pair_cand: np.ndarray
    pair_compat: np.ndarray
    slot_index: np.ndarray
    placed_rows: np.ndarray
    placed_step: np.ndarray
    targets: np.ndarray
    coord_steps: np.ndarray
    coord_u_row: np.ndarray
    coord_center: np.ndarray
    cpair_event: np.ndarray
    cpair_u: np.ndarray
    cpair_j: np.ndarray
    cpair_rel: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.specs)

    @classmethod
    def build(cls, specs: Sequence[StepSpec], node_types: np.ndarray, compat: np.ndarray) -> "StepBatch":
        specs = list(specs)
        C = max(s.n for s in specs) + 1
        row_node, row_step, placed_flag, row_coords = [], [], [], []
        edges = []
        focus_row = np.empty(len(specs), dtype=np.int64)
        pair_step, pair_focus, pair_cand, pair_compat, pair_valid = [], [], [], [], []
        placed_rows, placed_step = [], []
        targets = np.empty(len(specs), dtype=np.int64)
        coord_steps, coord_u, coord_center = [], [], []
        cpair_event, cpair_u, cpair_j, cpair_rel = [], [], [], []
        base = 0
        for e, s in enumerate(specs):
            flag = np.zeros(s.n)
            flag[s.placed] = 1.0
            row_node.append(s.node_base + np.arange(s.n))
            row_step.append(np.full(s.n, e))
            placed_flag.append(flag)
            c = np.zeros((s.n, 3))
            c[s.placed] = s.coords[s.placed]
            row_coords.append(c)
            edges.extend((i + base, j + base) for i, j in s.edges)
            focus_row[e] = base + s.focus
            existing = {frozenset(x) for x in s.edges}
            tf = node_types[s.node_base + s.focus]
            for i in range(s.n):
                ok = bool(compat[tf, node_types[s.node_base + i]])
                pair_step.append(e)
                pair_focus.append(base + s.focus)
                pair_cand.append(base + i)
                pair_compat.append(1.0 if ok else 0.0)
                pair_valid.append(ok and i != s.focus and frozenset((s.focus, i)) not in existing)
            placed_rows.extend(base + p for p in s.placed)
            placed_step.extend([e] * len(s.placed))
            if s.target is None:
                targets[e] = C - 1
            else:
                targets[e] = s.target
                if s.new_node:
                    k = len(coord_steps)
                    center = s.coords[s.placed].mean(axis=0)
                    coord_steps.append(e)
                    coord_u.append(base + s.target)
                    coord_center.append(center)
                    for j in s.placed:
                        cpair_event.append(k)
                        cpair_u.append(base + s.target)
                        cpair_j.append(base + j)
                        cpair_rel.append(s.coords[j] - center)
            base += s.n
        row_coords = np.concatenate(row_coords)
        P = len(pair_step)
        S = len(specs)
        slot = np.full((S, C), P + S, dtype=np.int64)  # last slot holds -inf
        pair_step = np.asarray(pair_step, dtype=np.int64)
        pair_cand = np.asarray(pair_cand, dtype=np.int64)
        valid = np.asarray(pair_valid, dtype=bool)
        starts = np.array([0] + [s.n for s in specs[:-1]]).cumsum()
        local = pair_cand - np.repeat(np.concatenate([[0], np.cumsum([s.n for s in specs])[:-1]]), [s.n for s in specs])
        ids = np.arange(P)
        slot[pair_step[valid], local[valid]] = ids[valid]
        slot[:, C - 1] = P + np.arange(S)
        for e, s in enumerate(specs):
            if s.target is not None and slot[e, s.target] >= P:
                raise ContractViolation(f"step {e}: target {s.target} is masked")
        del starts
        return cls(
            specs=specs,
            row_node=np.concatenate(row_node).astype(np.int64),
            row_step=np.concatenate(row_step).astype(np.int64),
            placed_flag=np.concatenate(placed_flag),
            edges=edge_index(row_coords, edges, len(row_coords)),
            C=C,
            focus_row=focus_row,
            pair_step=pair_step,
            pair_focus=np.asarray(pair_focus, dtype=np.int64),
            pair_cand=pair_cand,
            pair_compat=np.asarray(pair_compat).reshape(-1, 1),
            slot_index=slot,
            placed_rows=np.asarray(placed_rows, dtype=np.int64),
            placed_step=np.asarray(placed_step, dtype=np.int64),
            targets=targets,
            coord_steps=np.asarray(coord_steps, dtype=np.int64),
            coord_u_row=np.asarray(coord_u, dtype=np.int64),
            coord_center=np.asarray(coord_center, dtype=np.float64).reshape(-1, 3),
            cpair_event=np.asarray(cpair_event, dtype=np.int64),
            cpair_u=np.asarray(cpair_u, dtype=np.int64),
            cpair_j=np.asarray(cpair_j, dtype=np.int64),
            cpair_rel=np.asarray(cpair_rel, dtype=np.float64).reshape(-1, 3),
        )


def step_features(sb: StepBatch, node_feats: MixedFeatures, P: Params) -> MixedFeatures:
    """Latents of every step's partial graph after one decoder MF-MP layer."""
    h = ad.take(node_feats.h, sb.row_node)
    R, D = h.shape
    flag = Tensor(np.broadcast_to(sb.placed_flag[:, None], (R, D)))
    h = ad.add(h, ad.mul(flag, ad.broadcast(P["dec.placed"], (R, D))))
    v = ad.take(node_feats.v, sb.row_node)
    return mf_message_passing(sb.edges, MixedFeatures(h, v), P, "dec.mp")


def edge_logits(sb: StepBatch, z: MixedFeatures, P: Params) -> Tensor:
    """Masked logits ``(steps, C)``: candidate nodes in columns ``0..n-1``, stop in ``C-1``.

    Incompatible pairs, self-loops, existing edges and padding are ``-inf``.
    """
    S = sb.num_steps
    norms = channel_norms(z.v)
    placed_sum = ad.segment_sum(ad.take(z.h, sb.placed_rows), sb.placed_step, S)
    ctx = ad.take(placed_sum, sb.pair_step)
    pair_in = ad.concat(
        [
            ad.take(z.h, sb.pair_focus),
            ad.take(z.h, sb.pair_cand),
            ad.take(norms, sb.pair_focus),
            ad.take(norms, sb.pair_cand),
            Tensor(sb.pair_compat),
            ctx,
            ctx,
        ],
        axis=1,
    )
    pair_logit = ad.reshape(mlp(pair_in, P, "phi"), (-1,))
    D = z.h.shape[1]
    Dv = norms.shape[1]
    fh = ad.take(z.h, sb.focus_row)
    stop_in = ad.concat(
        [
            fh,
            ad.broadcast(P["stop.h"], (S, D)),
            ad.take(norms, sb.focus_row),
            ad.broadcast(P["stop.vn"], (S, Dv)),
            Tensor(np.ones((S, 1))),
            placed_sum,
            placed_sum,
        ],
        axis=1,
    )
    stop_logit = ad.reshape(mlp(stop_in, P, "phi"), (-1,))
    flat = ad.concat([pair_logit, stop_logit, Tensor(np.array([-np.inf]))], axis=0)
    return ad.take(flat, sb.slot_index)


def predict_coordinates(sb: StepBatch, z: MixedFeatures, P: Params) -> Tensor:
    """Coordinates ``(m, 3)`` of the nodes linked for the first time, in ``sb.coord_steps`` order.

    The displacement from the partial graph's centroid combines placed-node
    offsets weighted by one set of pair scores with a VN-MLP readout weighted
    by a second set.
    """
    m = len(sb.coord_steps)
    if m == 0:
        return Tensor(np.zeros((0, 3)))
    Pc = len(sb.cpair_u)
    hu, hj = ad.take(z.h, sb.cpair_u), ad.take(z.h, sb.cpair_j)
    vu, vj = ad.take(z.v, sb.cpair_u), ad.take(z.v, sb.cpair_j)
    scores = []
    for k in (1, 2):
        W = P[f"coord.W{k}"]
        ip = channel_dots(vn_linear(vu, W), vn_linear(vj, W))
        scores.append(mlp(ad.concat([hu, hj, ip], axis=1), P, "psi"))
    p1, p2 = scores
    term1 = ad.segment_sum(
        ad.mul(ad.broadcast(p1, (Pc, 3)), Tensor(sb.cpair_rel)), sb.cpair_event, m
    )
    o2 = vn_mlp(ad.concat([vu, vj], axis=2), P, "omega2")
    Dv = o2.shape[2]
    w2 = ad.broadcast(ad.reshape(p2, (Pc, 1, 1)), o2.shape)
    agg = ad.segment_sum(ad.mul(w2, o2), sb.cpair_event, m)
    term2 = ad.reshape(vn_mlp(agg, P, "omega1"), (m, 3))
    return ad.add(ad.add(term1, term2), Tensor(sb.coord_center))


# --- teacher forcing --------------------------------------------------------


def trace_step_specs(g: FragmentGraph3D, trace: GenerationTrace, node_base: int = 0, graph: int = 0) -> list[StepSpec]:
    """Ground-truth partial graph before every event of ``trace``."""
    trace.check_against(g)
    coords = g.coords - g.coords.mean(axis=0)
    placed = [trace.root]
    edges: list[tuple[int, int]] = []
    specs = []
    for t, ev in enumerate(trace.steps):
        if isinstance(ev, Stop):
            specs.append(StepSpec(node_base, g.n, list(placed), coords, list(edges), ev.focus, None, False, graph, t))
            continue
        specs.append(
            StepSpec(node_base, g.n, list(placed), coords, list(edges), ev.focus, ev.target, ev.is_new_node, graph, t)
        )
        if ev.is_new_node:
            placed.append(ev.target)
        edges.append((ev.focus, ev.target))
    return specs


@dataclass
class TeacherForcedOutput:
    type_logits: Tensor
    type_targets: np.ndarray
    edge_logits: Tensor
    edge_targets: np.ndarray
    coords_pred: Tensor
    coords_true: np.ndarray
    coord_prev_true: list[np.ndarray]
    coord_step_t: np.ndarray
    coord_graph: np.ndarray
    steps: StepBatch = field(repr=False, default=None)


def reconstruct_teacher_forced(
    batch: GraphBatch,
    traces: Sequence[GenerationTrace],
    lat: LatentState,
    P: Params,
    cfg: ModelConfig,
    compat: np.ndarray,
) -> TeacherForcedOutput:
    """Replay each trace on ground-truth partial graphs and collect all predictions."""
    if len(traces) != batch.num_graphs:
        raise ContractViolation("one trace per graph required")
    type_logits = decode_node_types(lat, P, cfg)
    specs = []
    for b, (g, tr) in enumerate(zip(batch.graphs, traces)):
        specs.extend(trace_step_specs(g, tr, int(batch.offsets[b]), b))
    sb = StepBatch.build(specs, batch.types, compat)
    z = step_features(sb, decoder_inputs(lat, batch.types, P), P)
    logits = edge_logits(sb, z, P)
    coords = predict_coordinates(sb, z, P)
    cs = [specs[e] for e in sb.coord_steps]
    return TeacherForcedOutput(
        type_logits=type_logits,
        type_targets=batch.types,
        edge_logits=logits,
        edge_targets=sb.targets,
        coords_pred=coords,
        coords_true=np.array([s.coords[s.target] for s in cs]).reshape(-1, 3),
        coord_prev_true=[s.coords[s.placed] for s in cs],
        coord_step_t=np.array([s.t for s in cs], dtype=np.int64),
        coord_graph=np.array([s.graph for s in cs], dtype=np.int64),
        steps=sb,
    )
