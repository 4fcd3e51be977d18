"""Latent sampling and autoregressive generation without teacher forcing."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ContractViolation, GenerationError
from .molgraph import N_MAX, FragmentGraph3D, FragmentVocab, _safe_asphericity
from .geometry import radius_of_gyration
from .model import (
    LatentState,
    ModelConfig,
    StepBatch,
    StepSpec,
    decode_node_types,
    decoder_inputs,
    edge_logits,
    predict_coordinates,
    step_features,
)

__all__ = [
    "MODES",
    "GenerationRequest",
    "sample_latents",
    "fuse_latents",
    "FragmentCountSampler",
    "decode_latents",
    "generate",
]

MODES = ("unconditional", "property_targeting", "context_preserving")


@dataclass
class GenerationRequest:
    mode: str = "unconditional"
    n_fragments: int | str = "sample"
    max_fragments: int = N_MAX
    property_source: LatentState | None = None
    context_source: LatentState | None = None
    seed: int = 0
    sample: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractViolation(f"unknown generation mode {self.mode!r}")
        if self.mode == "property_targeting" and self.property_source is None:
            raise ContractViolation("property targeting needs property latents")
        if self.mode == "context_preserving" and self.context_source is None:
            raise ContractViolation("context preservation needs context latents")
        if not (self.n_fragments == "sample" or (isinstance(self.n_fragments, (int, np.integer)) and self.n_fragments >= 1)):
            raise ContractViolation(f"n_fragments must be a positive count or 'sample', got {self.n_fragments!r}")
        if self.max_fragments < 1:
            raise ContractViolation("max_fragments must be positive")


def sample_latents(n: int, d_h: int, d_v: int, seed) -> LatentState:
    """Draw ``n`` latent rows from the isotropic Gaussian priors.

    Scalar rows are ``N(0, I_{2 d_h})``; each spatial column of a vector block is
    an independent ``N(0, I_{2 d_v})`` draw.  Both are split into halves.
    """
    if n < 1:
        raise ContractViolation("need at least one node")
    rng = np.random.default_rng(seed)
    z_h = rng.standard_normal((n, 2 * d_h))
    z_v = np.stack([rng.standard_normal((n, 2 * d_v)) for _ in range(3)], axis=1)
    return LatentState(
        Tensor(z_h[:, :d_h]), Tensor(z_v[:, :, :d_v]), Tensor(z_h[:, d_h:]), Tensor(z_v[:, :, d_v:])
    )


def fuse_latents(prop: LatentState, context: LatentState) -> LatentState:
    """Property blocks of ``prop`` joined with context blocks of ``context``."""
    if prop.n != context.n:
        raise ContractViolation(f"cannot fuse latents of {prop.n} and {context.n} nodes")
    return LatentState(prop.z_h_p, prop.z_v_p, context.z_h_s, context.z_v_s)


class FragmentCountSampler:
    """Empirical fragment-count distribution of a graph collection."""

    def __init__(self, counts: Sequence[int]):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.size == 0 or counts.min() < 1:
            raise ContractViolation("need positive fragment counts")
        self.values, freq = np.unique(counts, return_counts=True)
        self.probs = freq / freq.sum()

    @classmethod
    def from_graphs(cls, graphs: Sequence[FragmentGraph3D]) -> "FragmentCountSampler":
        return cls([g.n for g in graphs])

    def sample(self, rng: np.random.Generator, max_n: int = N_MAX) -> int:
        ok = self.values <= max_n
        if not ok.any():
            return int(max_n)
        p = self.probs[ok] / self.probs[ok].sum()
        return int(rng.choice(self.values[ok], p=p))

    def to_dict(self) -> dict:
        return {"values": self.values.tolist(), "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FragmentCountSampler":
        out = cls.__new__(cls)
        out.values = np.asarray(d["values"], dtype=np.int64)
        out.probs = np.asarray(d["probs"], dtype=np.float64)
        if out.values.shape != out.probs.shape or out.values.size == 0 or out.values.min() < 1:
            raise ContractViolation("malformed fragment-count distribution")
        return out


def _choose(logits: np.ndarray, rng: np.random.Generator | None) -> int:
    if rng is None:
        return int(np.argmax(logits))
    z = logits - logits.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def decode_latents(
    lat: LatentState,
    P: Mapping[str, Tensor],
    mcfg: ModelConfig,
    vocab: FragmentVocab,
    rng: np.random.Generator | None = None,
    graph_id: str = "generated",
) -> FragmentGraph3D:
    """Focus-and-expand decoding of one latent set.

    Node 0 is placed at the origin and seeds the queue.  Each focus keeps
    linking until the stop candidate wins; nodes linked for the first time get
    coordinates and join the queue.  Nodes never linked are dropped.  With
    ``rng`` decisions are sampled, otherwise argmax.
    """
    n = lat.n
    with ad.no_grad():
        types = decode_node_types(lat, P, mcfg).data
        node_types = np.array([_choose(row, rng) for row in types], dtype=np.int64)
        feats = decoder_inputs(lat, node_types, P)
        coords = np.zeros((n, 3))
        placed = [0]
        edges: list[tuple[int, int]] = []
        queue = deque([0])
        budget = n + n * (n - 1) // 2 + 1
        while queue:
            focus = queue.popleft()
            while True:
                budget -= 1
                if budget < 0:
                    raise GenerationError("decoding did not terminate")
                spec = StepSpec(0, n, list(placed), coords, list(edges), focus)
                sb = StepBatch.build([spec], node_types, vocab.compat)
                z = step_features(sb, feats, P)
                logits = edge_logits(sb, z, P).data[0]
                choice = _choose(logits, rng)
                if choice == sb.C - 1:
                    break
                if choice not in placed:
                    spec.target, spec.new_node = choice, True
                    sb = StepBatch.build([spec], node_types, vocab.compat)
                    z = step_features(sb, feats, P)
                    coords[choice] = predict_coordinates(sb, z, P).data[0]
                    placed.append(choice)
                    queue.append(choice)
                edges.append((focus, choice))
    if not placed:
        raise GenerationError("no fragment was placed")
    remap = {old: new for new, old in enumerate(placed)}
    c = coords[placed]
    g = FragmentGraph3D(
        frag_types=node_types[placed],
        edges=[(remap[i], remap[j]) for i, j in edges],
        coords=c,
        id=graph_id,
    )
    if g.n >= 2:
        g.props["asphericity"] = _safe_asphericity(c)
    g.props["rg"] = radius_of_gyration(c)
    return g


def generate(
    req: GenerationRequest,
    params: Mapping[str, np.ndarray],
    mcfg: ModelConfig,
    vocab: FragmentVocab,
    counts: FragmentCountSampler | None = None,
    graph_id: str = "generated",
) -> FragmentGraph3D:
    """Assemble latents for the requested mode and decode them.

    Supplied property and/or context blocks are used as given; missing blocks
    are drawn from the prior.  Without any source the fragment count comes
    from ``req.n_fragments`` or, for ``"sample"``, from ``counts``.
    """
    rng = np.random.default_rng(req.seed)
    srcs = [s for s in (req.property_source, req.context_source) if s is not None]
    if srcs:
        n = srcs[0].n
        if any(s.n != n for s in srcs):
            raise ContractViolation("property and context sources differ in node count")
    elif req.n_fragments == "sample":
        if counts is None:
            raise ContractViolation("sampling the fragment count needs a count distribution")
        n = counts.sample(rng, req.max_fragments)
    else:
        n = int(req.n_fragments)
    if n > req.max_fragments:
        raise ContractViolation(f"{n} fragments exceed the maximum {req.max_fragments}")
    prior = sample_latents(n, mcfg.d_h, mcfg.d_v, rng)
    lat = fuse_latents(req.property_source or prior, req.context_source or prior)
    P = {k: Tensor(v) for k, v in params.items()}
    dec_rng = rng if req.sample else None
    return decode_latents(lat, P, mcfg, vocab, dec_rng, graph_id)
