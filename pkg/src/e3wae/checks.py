"""Self-checks: finite-difference gradient check of the full objective and an E(3) consistency sweep."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import apply_transform, random_transform
from .losses import LossWeights, draw_prior
from .model import GraphBatch, ModelConfig, encode, init_params, predict_property, reconstruct_teacher_forced
from .molgraph import FragmentGraph3D, FragmentVocab, SynthConfig, bfs_trace, make_vocab, synth_dataset
from .training import batch_loss

__all__ = ["GRADCHECK_TOL", "EQUICHECK_TOL", "gradient_check", "EquiReport", "equivariance_check"]

GRADCHECK_TOL = 1e-4
EQUICHECK_TOL = 1e-7


def _three_fragment_graphs(seed: int, vocab: FragmentVocab, count: int) -> list[FragmentGraph3D]:
    return synth_dataset(SynthConfig(count=count, K=vocab.K, n_range=(3, 3), seed=seed), vocab)


def gradient_check(
    seed: int = 0,
    graphs: int = 1,
    mcfg: ModelConfig | None = None,
    step: float = 1e-4,
    weights: LossWeights | None = None,
    order: int = 4,
) -> float:
    """Max relative error of tape gradients of the full objective on random 3-fragment graphs.

    Every parameter entry of a small model is checked against central
    differences.  The five-point stencil at a moderate step keeps both the
    truncation error and the roundoff on near-zero gradient entries small.
    """
    vocab = make_vocab(8, seed=seed)
    gs = _three_fragment_graphs(seed, vocab, graphs)
    mcfg = mcfg or ModelConfig(K=vocab.K, d_h=3, d_v=2, layers=2)
    params = init_params(mcfg, seed)
    num_nodes = sum(g.n for g in gs)
    prior = draw_prior(np.random.default_rng(seed), num_nodes, num_nodes, mcfg.d_h, mcfg.d_v)
    traces = [bfs_trace(g) for g in gs]
    w = weights or LossWeights()

    def f(P):
        return batch_loss(gs, P, mcfg, vocab, w, prior=prior, traces=traces)[0]

    return ad.finite_diff_check(f, params, step=step, order=order)


@dataclass
class EquiReport:
    invariant: float  # scalar latents, property, node-type and edge logits, total loss
    covariant: float  # vector latents and predicted coordinates
    trials: int

    @property
    def worst(self) -> float:
        return max(self.invariant, self.covariant)


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    fin = np.isfinite(a) & np.isfinite(b)
    if not np.array_equal(np.isfinite(a), np.isfinite(b)):
        return float("inf")
    if not fin.any():
        return 0.0
    return float(np.abs(a[fin] - b[fin]).max() / max(1.0, np.abs(a[fin]).max()))


def equivariance_check(trials: int = 100, seed: int = 0, num_graphs: int = 4, mcfg: ModelConfig | None = None) -> EquiReport:
    """Apply random rotations, reflections and translations to a batch and compare model outputs.

    Deviations are ``max |x' - x| / max(1, max |x|)`` per quantity, where ``x'``
    is the output on transformed input and ``x`` the reference (rotated for
    covariant quantities).  The vector prior is rotated with the input, which
    leaves its law unchanged.
    """
    vocab = make_vocab(8, seed=seed)
    gs = synth_dataset(SynthConfig(count=num_graphs, K=vocab.K, seed=seed), vocab)
    mcfg = mcfg or ModelConfig(K=vocab.K)
    params = init_params(mcfg, seed)
    P = {k: Tensor(v) for k, v in params.items()}
    traces = [bfs_trace(g) for g in gs]
    num_nodes = sum(g.n for g in gs)
    prior = draw_prior(np.random.default_rng(seed), num_nodes, num_nodes, mcfg.d_h, mcfg.d_v)

    def run(graphs, pr):
        with ad.no_grad():
            b = GraphBatch.from_graphs(graphs)
            lat = encode(b, P, mcfg)
            y = predict_property(lat, P, mcfg)
            out = reconstruct_teacher_forced(b, traces, lat, P, mcfg, vocab.compat)
            loss, _, _ = batch_loss(graphs, P, mcfg, vocab, LossWeights(), prior=pr, traces=traces)
        inv = [lat.z_h.data, y.data, out.type_logits.data, out.edge_logits.data, loss.data]
        # coordinates are expressed in each graph's centroid frame, so translations drop out
        return inv, lat.z_v.data, out.coords_pred.data

    ref_inv, ref_v, ref_c = run(gs, prior)
    worst_inv = worst_cov = 0.0
    rng = np.random.default_rng(seed)
    for t in range(trials):
        T = random_transform(rng, proper_only=False)
        R = T.rotation
        moved = []
        for g in gs:
            h = g.copy()
            h.coords = apply_transform(T, g.coords)
            moved.append(h)
        inv, v, c = run(moved, prior.transformed(R))
        for a, b in zip(ref_inv, inv):
            worst_inv = max(worst_inv, _rel(a, b))
        worst_cov = max(worst_cov, _rel(np.einsum("ij,njd->nid", R, ref_v), v))
        worst_cov = max(worst_cov, _rel(ref_c @ R.T, c))
    return EquiReport(worst_inv, worst_cov, trials)
