"""Scikit-learn style wrapper around training, encoding, prediction and generation."""

from __future__ import annotations

from dataclasses import asdict, fields
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.metrics import r2_score

from .exceptions import ContractViolation
from .generation import FragmentCountSampler, GenerationRequest, generate
from .evaluation import encode_graphs, graph_readouts, predict_properties
from .model import LatentState
from .molgraph import FragmentGraph3D, FragmentVocab
from .training import AdamState, Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = ["E3WAE", "infer_vocab"]

_MODE_ALIASES = {
    "uncond": "unconditional",
    "prop": "property_targeting",
    "context": "context_preserving",
}


def infer_vocab(graphs: Sequence[FragmentGraph3D]) -> FragmentVocab:
    """Vocabulary spanning the observed types; a pair is compatible iff it is linked somewhere."""
    K = max(max(g.frag_types) for g in graphs) + 1
    compat = np.zeros((K, K), dtype=bool)
    for g in graphs:
        for i, j in g.edges:
            a, b = g.frag_types[i], g.frag_types[j]
            compat[a, b] = compat[b, a] = True
    return FragmentVocab([f"frag{k}" for k in range(K)], compat)


def _check_graphs(X) -> list[FragmentGraph3D]:
    if isinstance(X, FragmentGraph3D):
        X = [X]
    X = list(X)
    if not X or not all(isinstance(g, FragmentGraph3D) for g in X):
        raise ContractViolation("expected a non-empty sequence of FragmentGraph3D")
    return X


class E3WAE(BaseEstimator):
    """Disentangled equivariant autoencoder over 3D fragment graphs.

    Hyperparameters mirror :class:`TrainConfig`.  ``fit`` trains on a list of
    graphs (``y`` overrides the stored property values), ``predict`` returns the
    property head's output, ``transform`` returns pooled property and context
    scalar latents side by side, and ``generate`` decodes new graphs.
    """

    def __init__(
        self,
        d_h: int = TrainConfig.d_h,
        d_v: int = TrainConfig.d_v,
        layers: int = TrainConfig.layers,
        lr: float = TrainConfig.lr,
        lr_decay_factor: float = TrainConfig.lr_decay_factor,
        lr_decay_epochs: int = TrainConfig.lr_decay_epochs,
        epochs: int = TrainConfig.epochs,
        batch_size: int = TrainConfig.batch_size,
        alpha: float = TrainConfig.alpha,
        beta: float = TrainConfig.beta,
        seed: int = TrainConfig.seed,
        readout_mode: str = TrainConfig.readout_mode,
        property_name: str = TrainConfig.property_name,
        coord_align_max_nodes: int = TrainConfig.coord_align_max_nodes,
        grad_clip: float = TrainConfig.grad_clip,
        vocab: FragmentVocab | None = None,
    ):
        self.d_h = d_h
        self.d_v = d_v
        self.layers = layers
        self.lr = lr
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_epochs = lr_decay_epochs
        self.epochs = epochs
        self.batch_size = batch_size
        self.alpha = alpha
        self.beta = beta
        self.seed = seed
        self.readout_mode = readout_mode
        self.property_name = property_name
        self.coord_align_max_nodes = coord_align_max_nodes
        self.grad_clip = grad_clip
        self.vocab = vocab

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})

    def check_is_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise NotFittedError("E3WAE instance is not fitted yet; call fit first")

    # --- training -----------------------------------------------------------

    def fit(self, X, y=None, out_dir=None, log=None) -> "E3WAE":
        graphs = _check_graphs(X)
        if y is not None:
            y = np.asarray(y, dtype=np.float64).ravel()
            if len(y) != len(graphs):
                raise ContractViolation(f"{len(y)} targets for {len(graphs)} graphs")
            graphs = [g.copy() for g in graphs]
            for g, v in zip(graphs, y):
                g.props[self.property_name] = float(v)
        cfg = self.train_config()
        vocab = self.vocab if self.vocab is not None else infer_vocab(graphs)
        res = train(graphs, cfg, vocab, out_dir=out_dir, log=log)
        self.params_ = res.params
        self.best_params_ = res.best_params
        self.history_ = res.history
        self.vocab_ = vocab
        self.split_ = res.split
        self.model_config_ = res.model_config
        self.counts_ = FragmentCountSampler.from_graphs(graphs)
        return self

    # --- inference ----------------------------------------------------------

    def encode(self, X) -> list[LatentState]:
        self.check_is_fitted()
        return encode_graphs(_check_graphs(X), self.params_, self.model_config_)

    def predict(self, X) -> np.ndarray:
        self.check_is_fitted()
        return predict_properties(_check_graphs(X), self.params_, self.model_config_)

    def transform(self, X) -> np.ndarray:
        """``(G, 2 d_h)``: pooled property scalars followed by pooled context scalars."""
        hp, hs = graph_readouts(self.encode(X), self.model_config_.readout)
        return np.hstack([hp, hs])

    def score(self, X, y=None) -> float:
        graphs = _check_graphs(X)
        if y is None:
            y = [g.props[self.property_name] for g in graphs]
        return float(r2_score(np.asarray(y, dtype=np.float64), self.predict(graphs)))

    def generate(
        self,
        mode: str = "unconditional",
        n_fragments: int | str = "sample",
        reference: FragmentGraph3D | None = None,
        partner: FragmentGraph3D | None = None,
        seed: int = 0,
        sample: bool = False,
    ) -> FragmentGraph3D:
        """Decode one graph.

        ``reference`` supplies the fixed block for the targeted mode (property
        latents for ``property_targeting``, context latents for
        ``context_preserving``); ``partner`` optionally supplies the other
        block, otherwise it is drawn from the prior.
        """
        self.check_is_fitted()
        mode = _MODE_ALIASES.get(mode, mode)
        prop_src = ctx_src = None
        if mode != "unconditional":
            if reference is None:
                raise ContractViolation(f"mode {mode!r} needs a reference graph")
            ref_lat = self.encode([reference])[0]
            other = self.encode([partner])[0] if partner is not None else None
            if mode == "property_targeting":
                prop_src, ctx_src = ref_lat, other
            else:
                prop_src, ctx_src = other, ref_lat
        req = GenerationRequest(mode, n_fragments, property_source=prop_src, context_source=ctx_src, seed=seed, sample=sample)
        return generate(req, self.params_, self.model_config_, self.vocab_, self.counts_)

    # --- persistence --------------------------------------------------------

    def save(self, path) -> None:
        self.check_is_fitted()
        ck = Checkpoint(
            config={"train": asdict(self.train_config()), "vocab": self.vocab_.to_dict()},
            params=self.params_,
            adam=AdamState(),
            epoch=len(self.history_),
            rng_state={},
            extra={"history": self.history_, "split": self.split_, "counts": self.counts_.to_dict()},
            best_params=self.best_params_,
        )
        save_checkpoint(path, ck)

    @classmethod
    def load(cls, path) -> "E3WAE":
        ck = load_checkpoint(path)
        cfg = TrainConfig(**ck.config["train"])
        vocab = FragmentVocab.from_dict(ck.config["vocab"])
        est = cls(**asdict(cfg), vocab=vocab)
        est.params_ = ck.params
        est.best_params_ = ck.best_params or ck.params
        est.history_ = ck.extra.get("history", [])
        est.split_ = ck.extra.get("split", {})
        est.vocab_ = vocab
        est.model_config_ = cfg.model_config(vocab.K)
        counts = ck.extra.get("counts")
        est.counts_ = FragmentCountSampler.from_dict(counts) if counts is not None else None
        return est
