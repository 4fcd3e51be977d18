"""Deterministic training: batching, teacher forcing, Adam, checkpoints and metrics."""

from __future__ import annotations

import csv
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ContractViolation, NonFiniteLossError, ParseError, UnsupportedVersionError
from .losses import (
    CoordSample,
    LossReport,
    LossWeights,
    coord_loss,
    disentangle_loss,
    draw_prior,
    edge_loss,
    node_type_loss,
    property_loss,
    total_loss,
)
from .model import GraphBatch, ModelConfig, encode, init_params, predict_property, reconstruct_teacher_forced
from .molgraph import FragmentGraph3D, FragmentVocab, bfs_trace

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "clip_global_norm",
    "split_dataset",
    "batch_loss",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "TrainResult",
    "train",
    "METRICS_HEADER",
    "write_metrics_csv",
    "coord_metric",
    "AblationResult",
    "coord_loss_ablation",
]

METRICS_HEADER = ["epoch", "total", "prop", "dis_h", "dis_v", "node_type", "edge", "coords", "val_total"]
MAGIC = b"E3WAE1\n"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    d_h: int = 28
    d_v: int = 8
    layers: int = 4
    lr: float = 1e-3
    lr_decay_factor: float = 0.5
    lr_decay_epochs: int = 25
    epochs: int = 60
    batch_size: int = 16
    alpha: float = 5.0
    beta: float = 0.01
    seed: int = 0
    readout_mode: str = "mean"
    property_name: str = "asphericity"
    coord_align_max_nodes: int = 3
    grad_clip: float = 5.0

    def __post_init__(self):
        for name in ("d_h", "d_v", "layers", "epochs", "lr_decay_epochs"):
            if int(getattr(self, name)) < 1:
                raise ContractViolation(f"{name} must be positive")
        if self.batch_size < 2:
            raise ContractViolation("batch_size must be at least 2")
        if self.lr < 0 or self.alpha < 0 or self.beta < 0 or not self.lr_decay_factor > 0:
            raise ContractViolation("lr, alpha, beta must be non-negative and the decay factor positive")
        if self.readout_mode not in ("mean", "sum"):
            raise ContractViolation(f"unknown readout mode {self.readout_mode!r}")

    def model_config(self, K: int) -> ModelConfig:
        return ModelConfig(K=K, d_h=self.d_h, d_v=self.d_v, layers=self.layers, readout=self.readout_mode)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_epochs)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True), encoding="utf-8")


# --- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name in sorted(params):
        g = grads[name]
        if g.shape != params[name].shape:
            raise ContractViolation(f"gradient shape {g.shape} != parameter {name} {params[name].shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``; returns the raw norm."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for _, g in sorted(grads.items()))))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


# --- data and loss ----------------------------------------------------------


def split_dataset(graphs: Sequence[FragmentGraph3D], seed: int) -> tuple[list, list, list]:
    """70/15/15 split by a seeded shuffle of the sorted graph ids."""
    order = sorted(range(len(graphs)), key=lambda i: graphs[i].id)
    perm = np.random.default_rng(seed).permutation(len(order))
    idx = [order[i] for i in perm]
    n_tr = int(round(0.7 * len(idx)))
    n_va = int(round(0.15 * len(idx)))
    pick = lambda ids: [graphs[i] for i in ids]
    return pick(idx[:n_tr]), pick(idx[n_tr : n_tr + n_va]), pick(idx[n_tr + n_va :])


def property_targets(graphs: Sequence[FragmentGraph3D], name: str) -> np.ndarray:
    try:
        return np.array([float(g.props[name]) for g in graphs])
    except KeyError as exc:
        raise ContractViolation(f"graph lacks property {name!r}") from exc


def batch_loss(
    graphs: Sequence[FragmentGraph3D],
    P: Mapping[str, Tensor],
    mcfg: ModelConfig,
    vocab: FragmentVocab,
    weights: LossWeights,
    rng: np.random.Generator | None = None,
    prior=None,
    property_name: str = "asphericity",
    align_max_nodes: int = 3,
    traces=None,
):
    """Full training objective on one batch; returns ``(loss tensor, report, teacher-forced outputs)``.

    The prior draw for the disentanglement terms comes from ``prior`` if given,
    otherwise from ``rng``.
    """
    batch = GraphBatch.from_graphs(graphs)
    traces = [bfs_trace(g) for g in graphs] if traces is None else traces
    lat = encode(batch, P, mcfg)
    y_hat = predict_property(lat, P, mcfg)
    out = reconstruct_teacher_forced(batch, traces, lat, P, mcfg, vocab.compat)
    if prior is None and rng is not None:
        prior = draw_prior(rng, lat.n, len(graphs), mcfg.d_h, mcfg.d_v)
    dis_h, dis_v = disentangle_loss(lat.z_h, lat.z_v, prior)
    samples = [
        CoordSample(prev, tgt, int(t))
        for prev, tgt, t in zip(out.coord_prev_true, out.coords_true, out.coord_step_t)
    ]
    parts = {
        "prop": property_loss(property_targets(graphs, property_name), y_hat),
        "dis_h": dis_h,
        "dis_v": dis_v,
        "node_type": node_type_loss(out.type_logits, out.type_targets),
        "edge": edge_loss(out.edge_logits, out.edge_targets),
        "coords": coord_loss(out.coords_pred, samples, align_max_nodes=align_max_nodes),
    }
    loss, report = total_loss(parts, weights)
    report.flags = np.ones(len(samples), dtype=bool)
    return loss, report, out


def _check_finite(report: LossReport, where: str) -> None:
    for name in ("total",) + LossReport.COMPONENTS:
        val = getattr(report, name)
        if not np.isfinite(val):
            raise NonFiniteLossError(f"non-finite {name} loss ({val}) {where}")


# --- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    adam: AdamState
    epoch: int
    rng_state: dict
    extra: dict = field(default_factory=dict)
    best_params: dict[str, np.ndarray] | None = None


def save_checkpoint(path, ck: Checkpoint) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    arrays += [(f"param/{k}", ck.params[k]) for k in sorted(ck.params)]
    arrays += [(f"adam_m/{k}", ck.adam.m[k]) for k in sorted(ck.adam.m)]
    arrays += [(f"adam_v/{k}", ck.adam.v[k]) for k in sorted(ck.adam.v)]
    if ck.best_params is not None:
        arrays += [(f"best/{k}", ck.best_params[k]) for k in sorted(ck.best_params)]
    table, offset = [], 0
    for name, a in arrays:
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
    meta = {
        "version": FORMAT_VERSION,
        "config": ck.config,
        "arrays": table,
        "epoch": ck.epoch,
        "adam": {"t": ck.adam.t, "beta1": ck.adam.beta1, "beta2": ck.adam.beta2, "eps": ck.adam.eps},
        "rng_state": ck.rng_state,
        "extra": ck.extra,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for _, a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise ParseError(f"{path}: not a checkpoint (bad magic header)")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise ParseError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if len(raw) < pos + n:
        raise ParseError(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[pos : pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: corrupt metadata: {exc}") from exc
    pos += n
    if meta.get("version") != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    body = raw[pos:]
    total = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in meta["arrays"])
    if len(body) != 8 * total:
        raise ParseError(f"{path}: array payload has {len(body)} bytes, expected {8 * total}")
    flat = np.frombuffer(body, dtype="<f8")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}, "best": {}}
    for e in meta["arrays"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        kind, name = e["name"].split("/", 1)
        groups[kind][name] = flat[e["offset"] : e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    a = meta["adam"]
    adam = AdamState(groups["adam_m"], groups["adam_v"], a["t"], a["beta1"], a["beta2"], a["eps"])
    return Checkpoint(
        config=meta["config"],
        params=groups["param"],
        adam=adam,
        epoch=meta["epoch"],
        rng_state=meta["rng_state"],
        extra=meta.get("extra", {}),
        best_params=groups["best"] or None,
    )


# --- loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    history: list[dict]
    config: TrainConfig
    vocab: FragmentVocab
    split: dict[str, list[str]]

    @property
    def model_config(self) -> ModelConfig:
        return self.config.model_config(self.vocab.K)


def write_metrics_csv(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRICS_HEADER[1:]])


def _evaluate_total(graphs, params, mcfg, vocab, cfg: TrainConfig, epoch: int, traces) -> float:
    """Mean batch objective on held-out graphs (fixed per-epoch prior draws)."""
    if not graphs:
        return float("nan")
    rng = np.random.default_rng([cfg.seed, epoch, 7])
    P = {k: Tensor(v) for k, v in params.items()}
    vals, weights = [], []
    with ad.no_grad():
        for s in range(0, len(graphs), cfg.batch_size):
            chunk = graphs[s : s + cfg.batch_size]
            _, rep, _ = batch_loss(
                chunk, P, mcfg, vocab, cfg.weights, rng, property_name=cfg.property_name,
                align_max_nodes=cfg.coord_align_max_nodes, traces=traces[s : s + len(chunk)],
            )
            vals.append(rep.total)
            weights.append(len(chunk))
    return float(np.average(vals, weights=weights))


def train(
    graphs: Sequence[FragmentGraph3D],
    cfg: TrainConfig,
    vocab: FragmentVocab,
    out_dir=None,
    resume_from=None,
    stop_after_epoch: int | None = None,
    log: Callable[[str], None] | None = None,
    epoch_hook: Callable[[int, dict, dict], None] | None = None,
) -> TrainResult:
    """Minimize the weighted objective with Adam over a seeded 70/15/15 split.

    With ``out_dir`` the metrics CSV and ``last.ckpt``/``best.ckpt`` are written
    after every epoch.  ``stop_after_epoch`` ends early (for resumption tests).
    ``epoch_hook(epoch, params, row)`` may add extra columns to the history row.
    """
    if not graphs:
        raise ContractViolation("empty dataset")
    for g in graphs:
        g.validate(vocab)
    train_set, val_set, test_set = split_dataset(graphs, cfg.seed)
    if len(train_set) < 2:
        raise ContractViolation("training split needs at least 2 graphs")
    mcfg = cfg.model_config(vocab.K)
    split = {"train": [g.id for g in train_set], "val": [g.id for g in val_set], "test": [g.id for g in test_set]}
    tr_traces = [bfs_trace(g) for g in train_set]
    va_traces = [bfs_trace(g) for g in val_set]

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck.config.get("train") != asdict(cfg):
            raise ContractViolation("checkpoint was written with a different configuration")
        params, adam, start = ck.params, ck.adam, ck.epoch
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
        history = ck.extra.get("history", [])
        best_val = ck.extra.get("best_val", float("inf"))
        best = ck.best_params if ck.best_params is not None else {k: v.copy() for k, v in params.items()}
    else:
        params = init_params(mcfg, cfg.seed)
        adam = AdamState()
        start = 0
        rng = np.random.default_rng(cfg.seed)
        history = []
        best_val = float("inf")
        best = {k: v.copy() for k, v in params.items()}

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    last = start
    for epoch in range(start, cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = rng.permutation(len(train_set))
        sums = {k: 0.0 for k in ("total",) + LossReport.COMPONENTS}
        nb = 0
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            if len(idx) < 2:
                continue
            P = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            with ad.Tape() as tape:
                loss, rep, _ = batch_loss(
                    [train_set[i] for i in idx], P, mcfg, vocab, cfg.weights, rng,
                    property_name=cfg.property_name, align_max_nodes=cfg.coord_align_max_nodes,
                    traces=[tr_traces[i] for i in idx],
                )
            _check_finite(rep, f"at epoch {epoch}, batch {nb}")
            grads = tape.gradient(loss, P)
            clip_global_norm(grads, cfg.grad_clip)
            adam_step(params, grads, adam, lr)
            for k in sums:
                sums[k] += getattr(rep, k)
            nb += 1
        row = {"epoch": epoch + 1, **{k: v / max(nb, 1) for k, v in sums.items()}}
        row["val_total"] = _evaluate_total(val_set, params, mcfg, vocab, cfg, epoch, va_traces)
        if epoch_hook is not None:
            epoch_hook(epoch + 1, params, row)
        history.append(row)
        if np.isfinite(row["val_total"]) and row["val_total"] < best_val:
            best_val = row["val_total"]
            best = {k: v.copy() for k, v in params.items()}
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} total={row['total']:.4f} val={row['val_total']:.4f}")
        last = epoch + 1
        if out is not None:
            write_metrics_csv(out / "metrics.csv", history)
            ck = Checkpoint(
                config={"train": asdict(cfg), "vocab": vocab.to_dict()},
                params=params,
                adam=adam,
                epoch=last,
                rng_state=rng.bit_generator.state,
                extra={"history": history, "best_val": best_val, "split": split},
                best_params=best,
            )
            save_checkpoint(out / "last.ckpt", ck)
            if best_val == row["val_total"]:
                save_checkpoint(out / "best.ckpt", Checkpoint(ck.config, best, adam, last, ck.rng_state, ck.extra, None))
        if stop_after_epoch is not None and last >= stop_after_epoch:
            break
    return TrainResult(params, best, history, cfg, vocab, split)


# --- coordinate-loss ablation ----------------------------------------------


def coord_metric(graphs, params, mcfg: ModelConfig, vocab: FragmentVocab, align_max_nodes: int = 3, batch_size: int = 16) -> float:
    """Mean teacher-forced coordinate loss (graph-weighted over batches), no gradients."""
    P = {k: Tensor(v) for k, v in params.items()}
    vals, w = [], []
    with ad.no_grad():
        for s in range(0, len(graphs), batch_size):
            chunk = graphs[s : s + batch_size]
            _, rep, _ = batch_loss(chunk, P, mcfg, vocab, LossWeights(), None, align_max_nodes=align_max_nodes)
            vals.append(rep.coords)
            w.append(len(chunk))
    return float(np.average(vals, weights=w))


@dataclass
class AblationResult:
    aligned: list[float]  # per-epoch validation coordinate metric
    plain: list[float]
    aligned_train: list[float]  # each variant's own training coordinate loss
    plain_train: list[float]
    tail: int = 10

    def tail_means(self) -> tuple[float, float]:
        return float(np.mean(self.aligned[-self.tail :])), float(np.mean(self.plain[-self.tail :]))

    def epochs_to_reach(self, curve: Sequence[float], level: float) -> int | None:
        for i, v in enumerate(curve):
            if v <= level:
                return i + 1
        return None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "aligned_val", "plain_val", "aligned_train", "plain_train"])
            for i, row in enumerate(zip(self.aligned, self.plain, self.aligned_train, self.plain_train)):
                w.writerow([i + 1] + [repr(float(v)) for v in row])


def coord_loss_ablation(graphs, cfg: TrainConfig, vocab: FragmentVocab, log=None) -> AblationResult:
    """Train twice on the same seed and data: aligned coordinate loss vs plain log-MSE.

    Both runs are scored each epoch with the same validation metric, the
    coordinate loss with alignment of small subgraphs, so the curves are
    directly comparable.
    """
    _, val_set, _ = split_dataset(graphs, cfg.seed)
    curves = {}
    for name, amax in (("aligned", cfg.coord_align_max_nodes), ("plain", 0)):
        run_cfg = replace(cfg, coord_align_max_nodes=amax)
        mcfg = run_cfg.model_config(vocab.K)
        vals: list[float] = []

        def hook(epoch, params, row, vals=vals, mcfg=mcfg):
            vals.append(coord_metric(val_set, params, mcfg, vocab, cfg.coord_align_max_nodes, cfg.batch_size))

        res = train(graphs, run_cfg, vocab, log=log, epoch_hook=hook)
        curves[name] = vals
        curves[name + "_train"] = [r["coords"] for r in res.history]
    return AblationResult(**curves)
