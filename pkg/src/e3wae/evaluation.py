"""Evaluation: reconstruction accuracy, generation metrics, retrieval baseline, probes."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.decomposition import PCA
from sklearn.linear_model import Ridge
from sklearn.metrics import r2_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ContractViolation
from .generation import GenerationRequest, generate, sample_latents
from .model import GraphBatch, LatentState, ModelConfig, encode, predict_property, reconstruct_teacher_forced
from .molgraph import FragmentGraph3D, FragmentVocab, bfs_trace

__all__ = [
    "EvalReport",
    "encode_graphs",
    "graph_readouts",
    "predict_properties",
    "teacher_forced_accuracy",
    "partner_indices",
    "eval_property_targeting",
    "random_latent_baseline",
    "eval_context_preserving",
    "retrieval_baseline",
    "probe_disentanglement",
    "pca_emit",
    "control_separation",
    "cosine",
    "type_jaccard",
]


@dataclass
class EvalReport:
    property_mse: float = float("nan")
    property_mae: float = float("nan")
    context_similarity_mean: float = float("nan")
    context_similarity_max: float = float("nan")
    probe_r2_property_branch: float = float("nan")
    probe_r2_context_branch: float = float("nan")
    validity_rate: float = float("nan")
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("property_mse", "property_mae"):
            v = getattr(self, name)
            if np.isfinite(v) and v < 0:
                raise ContractViolation(f"{name} must be non-negative")
        if np.isfinite(self.validity_rate) and not 0.0 <= self.validity_rate <= 1.0:
            raise ContractViolation("validity_rate must lie in [0, 1]")

    def merge(self, other: "EvalReport") -> "EvalReport":
        out = EvalReport(**{k: v for k, v in asdict(self).items() if k != "extra"}, extra=dict(self.extra))
        for k, v in asdict(other).items():
            if k == "extra":
                out.extra.update(v)
            elif np.isfinite(v):
                setattr(out, k, v)
        return out

    def to_json(self, path) -> None:
        def clean(x):
            if isinstance(x, float) and not np.isfinite(x):
                return None
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [clean(v) for v in x]
            if isinstance(x, np.generic):
                return clean(x.item())
            return x

        Path(path).write_text(json.dumps(clean(asdict(self)), indent=2, sort_keys=True), encoding="utf-8")


# --- encoding helpers -------------------------------------------------------


def _tensors(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def encode_graphs(graphs: Sequence[FragmentGraph3D], params, mcfg: ModelConfig, chunk: int = 64) -> list[LatentState]:
    """Per-graph latents (no gradient tracking)."""
    P = _tensors(params)
    out = []
    with ad.no_grad():
        for s in range(0, len(graphs), chunk):
            part = graphs[s : s + chunk]
            batch = GraphBatch.from_graphs(part)
            lat = encode(batch, P, mcfg)
            for b in range(len(part)):
                out.append(lat.select(lat.graph_rows(b)))
    return out


def graph_readouts(lats: Sequence[LatentState], mode: str = "mean") -> tuple[np.ndarray, np.ndarray]:
    """Pooled scalar latents per graph: ``(G, d_h)`` for the property and context branches."""
    pool = np.mean if mode == "mean" else np.sum
    hp = np.stack([pool(l.z_h_p.data, axis=0) for l in lats])
    hs = np.stack([pool(l.z_h_s.data, axis=0) for l in lats])
    return hp, hs


def predict_properties(graphs: Sequence[FragmentGraph3D], params, mcfg: ModelConfig, chunk: int = 64) -> np.ndarray:
    P = _tensors(params)
    out = []
    with ad.no_grad():
        for s in range(0, len(graphs), chunk):
            batch = GraphBatch.from_graphs(graphs[s : s + chunk])
            out.append(predict_property(encode(batch, P, mcfg), P, mcfg).data)
    return np.concatenate(out)


def teacher_forced_accuracy(
    graphs: Sequence[FragmentGraph3D], params, mcfg: ModelConfig, vocab: FragmentVocab, chunk: int = 64
) -> tuple[float, float]:
    """Argmax accuracy of node types (per node) and edge decisions (per trace step)."""
    P = _tensors(params)
    t_hit = t_all = e_hit = e_all = 0
    with ad.no_grad():
        for s in range(0, len(graphs), chunk):
            part = graphs[s : s + chunk]
            batch = GraphBatch.from_graphs(part)
            lat = encode(batch, P, mcfg)
            out = reconstruct_teacher_forced(batch, [bfs_trace(g) for g in part], lat, P, mcfg, vocab.compat)
            t_hit += int((out.type_logits.data.argmax(1) == out.type_targets).sum())
            t_all += len(out.type_targets)
            e_hit += int((out.edge_logits.data.argmax(1) == out.edge_targets).sum())
            e_all += len(out.edge_targets)
    return t_hit / t_all, e_hit / e_all


def partner_indices(graphs: Sequence[FragmentGraph3D], seed) -> list[int | None]:
    """For each graph, a different graph with the same fragment count (``None`` if there is none)."""
    rng = np.random.default_rng(seed)
    by_n: dict[int, list[int]] = {}
    for i, g in enumerate(graphs):
        by_n.setdefault(g.n, []).append(i)
    out = []
    for i, g in enumerate(graphs):
        cands = [j for j in by_n[g.n] if j != i]
        out.append(int(rng.choice(cands)) if cands else None)
    return out


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def type_jaccard(a: FragmentGraph3D, b: FragmentGraph3D) -> float:
    """Multiset Jaccard similarity of fragment types."""
    ca = np.bincount(a.frag_types, minlength=1)
    cb = np.bincount(b.frag_types, minlength=1)
    k = max(len(ca), len(cb))
    ca, cb = np.pad(ca, (0, k - len(ca))), np.pad(cb, (0, k - len(cb)))
    union = np.maximum(ca, cb).sum()
    return float(np.minimum(ca, cb).sum() / union) if union else 1.0


def _property_errors(targets, generated, name: str) -> EvalReport:
    errs = []
    for y, g in zip(targets, generated):
        if g is not None and g.n >= 2 and name in g.props:
            errs.append(float(g.props[name]) - y)
    e = np.asarray(errs)
    rate = len(errs) / max(len(targets), 1)
    if not len(e):
        return EvalReport(validity_rate=rate, extra={"n_evaluated": 0})
    return EvalReport(
        property_mse=float(np.mean(e * e)),
        property_mae=float(np.mean(np.abs(e))),
        validity_rate=rate,
        extra={"n_evaluated": len(e)},
    )


# --- generation metrics -----------------------------------------------------

Generator = Callable[[int, LatentState | None, LatentState | None, int], FragmentGraph3D | None]


def _model_generator(params, mcfg, vocab, mode: str) -> Generator:
    def run(i, prop_src, ctx_src, seed):
        n = (prop_src or ctx_src).n if (prop_src or ctx_src) is not None else None
        req = GenerationRequest(
            mode=mode,
            n_fragments=n if n is not None else "sample",
            property_source=prop_src,
            context_source=ctx_src,
            seed=seed,
        )
        return generate(req, params, mcfg, vocab, graph_id=f"gen-{i}")

    return run


def eval_property_targeting(
    test: Sequence[FragmentGraph3D],
    params,
    mcfg: ModelConfig,
    vocab: FragmentVocab,
    seed: int = 0,
    property_name: str = "asphericity",
    generator: Generator | None = None,
) -> tuple[EvalReport, list]:
    """Generate from each reference's property latents fused with another test graph's context.

    The property of each generated graph is compared with the reference's.
    Graphs with fewer than two fragments are excluded and lower the validity rate.
    """
    lats = encode_graphs(test, params, mcfg)
    partners = partner_indices(test, seed)
    gen = generator or _model_generator(params, mcfg, vocab, "property_targeting")
    out = []
    for i, g in enumerate(test):
        ctx = lats[partners[i]] if partners[i] is not None else None
        out.append(gen(i, lats[i], ctx, seed * 100003 + i))
    targets = [float(g.props[property_name]) for g in test]
    return _property_errors(targets, out, property_name), out


def random_latent_baseline(
    test: Sequence[FragmentGraph3D],
    params,
    mcfg: ModelConfig,
    vocab: FragmentVocab,
    seed: int = 0,
    property_name: str = "asphericity",
) -> tuple[EvalReport, list]:
    """Same protocol as :func:`eval_property_targeting` but with all latents drawn from the prior."""
    P = _tensors(params)
    from .generation import decode_latents

    out = []
    for i, g in enumerate(test):
        lat = sample_latents(g.n, mcfg.d_h, mcfg.d_v, seed * 100003 + i)
        out.append(decode_latents(lat, P, mcfg, vocab, None, f"rand-{i}"))
    targets = [float(g.props[property_name]) for g in test]
    rep = _property_errors(targets, out, property_name)
    rep.extra = {f"baseline_{k}": v for k, v in rep.extra.items()}
    rep.extra["baseline_mae"] = rep.property_mae
    rep.extra["baseline_mse"] = rep.property_mse
    return rep, out


def eval_context_preserving(
    test: Sequence[FragmentGraph3D],
    params,
    mcfg: ModelConfig,
    vocab: FragmentVocab,
    seed: int = 0,
) -> tuple[EvalReport, list]:
    """Generate from each template's context latents fused with another graph's property latents.

    Reports cosine similarity of pooled context scalars between template and
    re-encoded generation, and the fragment-type multiset Jaccard similarity.
    """
    lats = encode_graphs(test, params, mcfg)
    partners = partner_indices(test, seed)
    gen = _model_generator(params, mcfg, vocab, "context_preserving")
    generated = []
    for i in range(len(test)):
        prop = lats[partners[i]] if partners[i] is not None else None
        generated.append(gen(i, prop, lats[i], seed * 100003 + i))
    _, hs_t = graph_readouts(lats, mcfg.readout)
    _, hs_g = graph_readouts(encode_graphs(generated, params, mcfg), mcfg.readout)
    sims = np.array([cosine(a, b) for a, b in zip(hs_t, hs_g)])
    jac = np.array([type_jaccard(a, b) for a, b in zip(test, generated)])
    rep = EvalReport(
        context_similarity_mean=float(sims.mean()),
        context_similarity_max=float(sims.max()),
        validity_rate=float(np.mean([g.n >= 1 for g in generated])),
        extra={"jaccard_mean": float(jac.mean()), "jaccard_max": float(jac.max())},
    )
    return rep, generated


def retrieval_baseline(
    test: Sequence[FragmentGraph3D],
    train: Sequence[FragmentGraph3D],
    params,
    mcfg: ModelConfig,
    threshold: float | None = None,
    property_name: str = "asphericity",
    train_lats: Sequence[LatentState] | None = None,
) -> tuple[float, float, dict]:
    """Context similarity of each template to training graphs with a similar property value.

    ``threshold`` defaults to 5% of the training property range and is doubled
    for a template until at least one graph is retrieved.  Returns the mean over
    templates of the per-template mean and max cosine similarity.
    """
    y_tr = np.array([float(g.props[property_name]) for g in train])
    if threshold is None:
        threshold = 0.05 * float(y_tr.max() - y_tr.min())
    _, hs_te = graph_readouts(encode_graphs(test, params, mcfg), mcfg.readout)
    _, hs_tr = graph_readouts(train_lats or encode_graphs(train, params, mcfg), mcfg.readout)
    means, maxes, widened = [], [], 0
    for g, e in zip(test, hs_te):
        y = float(g.props[property_name])
        thr = threshold
        hit = np.flatnonzero(np.abs(y_tr - y) <= thr)
        while hit.size == 0:
            thr = thr * 2.0 if thr > 0 else 1e-12
            widened += 1
            hit = np.flatnonzero(np.abs(y_tr - y) <= thr)
        sims = np.array([cosine(e, hs_tr[j]) for j in hit])
        means.append(sims.mean())
        maxes.append(sims.max())
    info = {"threshold": threshold, "widenings": widened}
    return float(np.mean(means)), float(np.mean(maxes)), info


def probe_disentanglement(
    graphs: Sequence[FragmentGraph3D],
    params,
    mcfg: ModelConfig,
    seed: int = 0,
    property_name: str = "asphericity",
    train_fraction: float = 0.7,
    lam: float = 1e-3,
) -> tuple[float, float, dict]:
    """Held-out R^2 of linear ridge probes from each branch's pooled scalars to the property.

    Features are standardized on the probe's training rows so the penalty does
    not depend on the latent scale.
    """
    y = np.array([float(g.props[property_name]) for g in graphs])
    hp, hs = graph_readouts(encode_graphs(graphs, params, mcfg), mcfg.readout)
    perm = np.random.default_rng(seed).permutation(len(graphs))
    k = int(round(train_fraction * len(graphs)))
    tr, te = perm[:k], perm[k:]
    if len(tr) < 2 or len(te) < 2:
        raise ContractViolation("probe needs at least two graphs per split")
    if np.ptp(y[te]) == 0.0:
        return 0.0, 0.0, {"constant_target": True}
    scores = []
    for X in (hp, hs):
        model = make_pipeline(StandardScaler(), Ridge(alpha=lam)).fit(X[tr], y[tr])
        scores.append(float(r2_score(y[te], model.predict(X[te]))))
    return scores[0], scores[1], {"constant_target": False}


def pca_emit(hp: np.ndarray, hs: np.ndarray, props, path) -> np.ndarray:
    """Write 2-D principal-component projections of both branches to CSV.

    Columns ``pc1,pc2,property,branch``; property-branch rows come first.
    """
    props = np.asarray(props, dtype=np.float64)
    if len(hp) < 3 or len(hs) != len(hp) or len(props) != len(hp):
        raise ContractViolation("PCA export needs at least 3 aligned samples")
    rows = []
    for name, X in (("property", hp), ("context", hs)):
        k = min(2, X.shape[1], X.shape[0])
        Xc = X - X.mean(axis=0)
        if np.allclose(Xc, 0.0):
            proj = np.zeros((len(X), 2))
        else:
            proj = PCA(n_components=k).fit_transform(X)
            proj = np.pad(proj, ((0, 0), (0, 2 - k)))
        rows.extend((p[0], p[1], y, name) for p, y in zip(proj, props))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pc1", "pc2", "property", "branch"])
        for r in rows:
            w.writerow([repr(float(r[0])), repr(float(r[1])), repr(float(r[2])), r[3]])
    return np.array([[r[0], r[1]] for r in rows])


def control_separation(
    graphs: Sequence[FragmentGraph3D],
    params,
    mcfg: ModelConfig,
    vocab: FragmentVocab,
    pairs: int = 100,
    seed: int = 0,
) -> tuple[float, float]:
    """Mean |Δŷ| for (same property latents, different contexts) vs (different property latents, same context).

    ``ŷ`` is the property head applied to the re-encoded generations.
    """
    lats = encode_graphs(graphs, params, mcfg)
    by_n: dict[int, list[int]] = {}
    for i, g in enumerate(graphs):
        by_n.setdefault(g.n, []).append(i)
    groups = [v for v in by_n.values() if len(v) >= 3 and graphs[v[0]].n >= 2]
    if not groups:
        raise ContractViolation("need three graphs of one size")
    rng = np.random.default_rng(seed)
    gen = _model_generator(params, mcfg, vocab, "property_targeting")
    same_p, same_s = [], []
    for t in range(pairs):
        grp = groups[int(rng.integers(len(groups)))]
        a, b, c = rng.choice(grp, size=3, replace=False)
        g1 = gen(t, lats[a], lats[b], seed + t)
        g2 = gen(t, lats[a], lats[c], seed + t)
        g3 = gen(t, lats[b], lats[c], seed + t)
        y1, y2, y3 = predict_properties([g1, g2, g3], params, mcfg)
        same_p.append(abs(y1 - y2))
        same_s.append(abs(y2 - y3))
    return float(np.mean(same_p)), float(np.mean(same_s))
