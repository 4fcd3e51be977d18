"""Command-line entry point: ``e3wae <command> [flags]``.

Exit codes: 0 success, 1 validation or contract error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checks import EQUICHECK_TOL, GRADCHECK_TOL, equivariance_check, gradient_check
from .estimator import infer_vocab
from .evaluation import (
    EvalReport,
    encode_graphs,
    eval_context_preserving,
    eval_property_targeting,
    graph_readouts,
    pca_emit,
    probe_disentanglement,
    random_latent_baseline,
    retrieval_baseline,
    teacher_forced_accuracy,
)
from .exceptions import E3WAEError, ParseError
from .generation import FragmentCountSampler, GenerationRequest, generate
from .molgraph import (
    FragmentVocab,
    SynthConfig,
    make_vocab,
    read_atom_graph,
    read_jsonl,
    read_vocab,
    synth_dataset,
    fragmentize,
    write_jsonl,
    write_vocab,
)
from .training import TrainConfig, coord_loss_ablation, load_checkpoint, split_dataset, train

__all__ = ["build_parser", "run", "main"]

MODES = {"uncond": "unconditional", "prop": "property_targeting", "context": "context_preserving"}


class _Parser(argparse.ArgumentParser):
    """Argument errors print usage and exit with the validation code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="e3wae", description="Disentangled equivariant autoencoder for 3D fragment graphs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="write a synthetic fragment-graph dataset")
    s.add_argument("--count", type=int, default=500, help="number of graphs")
    s.add_argument("--K", type=int, default=8, help="vocabulary size")
    s.add_argument("--min-n", type=int, default=3, help="minimum fragments per graph")
    s.add_argument("--max-n", type=int, default=8, help="maximum fragments per graph")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--out", required=True, help="output JSONL path")
    s.add_argument("--vocab-out", help="optional vocabulary JSON path")

    s = sub.add_parser("fragmentize", help="decompose atom graphs into fragment graphs")
    s.add_argument("--input", required=True, nargs="+", help="atom graph JSON files")
    s.add_argument("--vocab", help="existing vocabulary JSON to extend")
    s.add_argument("--out", required=True, help="output JSONL path")
    s.add_argument("--vocab-out", required=True, help="output vocabulary JSON path")
    s.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data", required=True, help="fragment dataset JSONL")
    s.add_argument("--vocab", help="vocabulary JSON (inferred from the data if omitted)")
    s.add_argument("--config", help="training config JSON")
    s.add_argument("--epochs", type=int, help="override the configured epoch count")
    s.add_argument("--seed", type=int, help="override the configured seed")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("generate", help="generate fragment graphs from a checkpoint")
    s.add_argument("--checkpoint", required=True, help="checkpoint file")
    s.add_argument("--data", help="dataset JSONL (references and fragment-count distribution)")
    s.add_argument("--mode", choices=sorted(MODES), default="uncond", help="generation mode")
    s.add_argument("--ref-id", help="reference graph id for prop/context modes")
    s.add_argument("--partner-id", help="graph id supplying the other latent block (prior if omitted)")
    s.add_argument("--n", type=int, default=1, help="number of graphs to generate")
    s.add_argument("--num-fragments", type=int, help="fragment count for uncond mode (sampled if omitted)")
    s.add_argument("--sample", action="store_true", help="sample decisions instead of argmax")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--out", required=True, help="output JSONL path")

    s = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    s.add_argument("--checkpoint", required=True, help="checkpoint file")
    s.add_argument("--data", required=True, help="dataset JSONL used for training")
    s.add_argument("--seed", type=int, default=0, help="random seed for pairing and probes")
    s.add_argument("--out", required=True, help="EvalReport JSON path")
    s.add_argument("--pca-out", help="optional CSV of 2-D latent projections")

    s = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--step", type=float, default=1e-4, help="finite-difference step (five-point stencil)")

    s = sub.add_parser("equicheck", help="E(3) equivariance and invariance sweep")
    s.add_argument("--trials", type=int, default=100, help="number of random transforms")
    s.add_argument("--seed", type=int, default=0, help="random seed")

    s = sub.add_parser("ablate-coordloss", help="aligned vs plain log-MSE coordinate loss")
    s.add_argument("--data", required=True, help="fragment dataset JSONL")
    s.add_argument("--vocab", help="vocabulary JSON (inferred from the data if omitted)")
    s.add_argument("--config", help="training config JSON")
    s.add_argument("--epochs", type=int, help="override the configured epoch count")
    s.add_argument("--seed", type=int, help="override the configured seed")
    s.add_argument("--out", required=True, help="output CSV of both loss curves")
    return p


# --- helpers ----------------------------------------------------------------


def _config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _dataset(args):
    vocab = read_vocab(args.vocab) if args.vocab else None
    graphs = read_jsonl(args.data, vocab)
    return graphs, vocab or infer_vocab(graphs)


def _load_model(path):
    ck = load_checkpoint(path)
    cfg = TrainConfig(**ck.config["train"])
    vocab = FragmentVocab.from_dict(ck.config["vocab"])
    return ck, cfg, vocab


def _by_id(graphs, gid):
    for g in graphs:
        if g.id == gid:
            return g
    raise KeyError(gid)


# --- commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    vocab = make_vocab(args.K, seed=args.seed)
    graphs = synth_dataset(SynthConfig(count=args.count, K=args.K, n_range=(args.min_n, args.max_n), seed=args.seed), vocab)
    write_jsonl(args.out, graphs)
    if args.vocab_out:
        write_vocab(args.vocab_out, vocab)
    print(f"wrote {len(graphs)} graphs to {args.out}")
    return 0


def cmd_fragmentize(args) -> int:
    base = read_vocab(args.vocab) if args.vocab else None
    index = {name: k for k, name in enumerate(base.names)} if base else {}
    out = []
    for path in args.input:
        frag, _ = fragmentize(read_atom_graph(path), index)
        frag.id = Path(path).stem
        out.append(frag)
    names = sorted(index, key=index.get)
    compat = np.zeros((len(names), len(names)), dtype=bool)
    if base is not None:
        compat[: base.K, : base.K] = base.compat
    for g in out:
        for i, j in g.edges:
            a, b = g.frag_types[i], g.frag_types[j]
            compat[a, b] = compat[b, a] = True
    write_jsonl(args.out, out)
    write_vocab(args.vocab_out, FragmentVocab(names, compat))
    print(f"wrote {len(out)} fragment graphs, vocabulary size {len(names)}")
    return 0


def cmd_train(args) -> int:
    graphs, vocab = _dataset(args)
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.to_json(out / "config.json")
    write_vocab(out / "vocab.json", vocab)
    res = train(graphs, cfg, vocab, out_dir=out, resume_from=args.resume, log=print)
    print(f"trained {len(res.history)} epochs; checkpoints in {out}")
    return 0


def cmd_generate(args) -> int:
    ck, cfg, vocab = _load_model(args.checkpoint)
    mcfg = cfg.model_config(vocab.K)
    mode = MODES[args.mode]
    graphs = read_jsonl(args.data, vocab) if args.data else []
    counts = FragmentCountSampler.from_graphs(graphs) if graphs else None
    prop_src = ctx_src = None
    if mode != "unconditional":
        if not args.ref_id or not graphs:
            print("prop/context modes need --data and --ref-id", file=sys.stderr)
            return 1
        try:
            picked = [_by_id(graphs, args.ref_id)]
            if args.partner_id:
                picked.append(_by_id(graphs, args.partner_id))
        except KeyError as exc:
            print(f"unknown graph id {exc}", file=sys.stderr)
            return 1
        lats = encode_graphs(picked, ck.params, mcfg)
        other = lats[1] if len(lats) > 1 else None
        prop_src, ctx_src = (lats[0], other) if mode == "property_targeting" else (other, lats[0])
    n_frag = args.num_fragments if args.num_fragments is not None else "sample"
    out = []
    for k in range(args.n):
        req = GenerationRequest(mode, n_frag, property_source=prop_src, context_source=ctx_src, seed=[args.seed, k], sample=args.sample)
        out.append(generate(req, ck.params, mcfg, vocab, counts, graph_id=f"gen-{args.seed}-{k}"))
    write_jsonl(args.out, out)
    print(f"wrote {len(out)} graphs to {args.out}")
    return 0


def cmd_eval(args) -> int:
    ck, cfg, vocab = _load_model(args.checkpoint)
    mcfg = cfg.model_config(vocab.K)
    graphs = read_jsonl(args.data, vocab)
    split = ck.extra.get("split")
    if split:
        ids = {g.id: g for g in graphs}
        tr, va, te = ([ids[i] for i in split[k] if i in ids] for k in ("train", "val", "test"))
    else:
        tr, va, te = split_dataset(graphs, cfg.seed)
    P = ck.params
    t_acc, e_acc = teacher_forced_accuracy(va or te, P, mcfg, vocab)
    report, _ = eval_property_targeting(te, P, mcfg, vocab, args.seed, cfg.property_name)
    base, _ = random_latent_baseline(te, P, mcfg, vocab, args.seed, cfg.property_name)
    ctx, _ = eval_context_preserving(te, P, mcfg, vocab, args.seed)
    ret_mean, ret_max, ret_info = retrieval_baseline(te, tr, P, mcfg, property_name=cfg.property_name)
    r2_p, r2_s, probe_info = probe_disentanglement(te, P, mcfg, args.seed, cfg.property_name)
    report = report.merge(base.__class__(extra=base.extra)).merge(ctx)
    report.probe_r2_property_branch = r2_p
    report.probe_r2_context_branch = r2_s
    report.extra.update(
        {
            "node_type_accuracy": t_acc,
            "edge_accuracy": e_acc,
            "retrieval_mean": ret_mean,
            "retrieval_max": ret_max,
            "retrieval_threshold": ret_info["threshold"],
            "retrieval_widenings": ret_info["widenings"],
            "probe_constant_target": probe_info["constant_target"],
        }
    )
    report.to_json(args.out)
    if args.pca_out:
        hp, hs = graph_readouts(encode_graphs(te, P, mcfg), mcfg.readout)
        pca_emit(hp, hs, [g.props[cfg.property_name] for g in te], args.pca_out)
    print(json.dumps({k: v for k, v in asdict(report).items() if k != "extra"}, default=float))
    return 0


def cmd_gradcheck(args) -> int:
    err = gradient_check(seed=args.seed, step=args.step)
    ok = err < GRADCHECK_TOL
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAIL'}, tolerance {GRADCHECK_TOL:g})")
    return 0 if ok else 1


def cmd_equicheck(args) -> int:
    rep = equivariance_check(trials=args.trials, seed=args.seed)
    ok = rep.worst < EQUICHECK_TOL
    print(
        f"max equivariance deviation {rep.worst:.3e} (invariant {rep.invariant:.3e}, "
        f"covariant {rep.covariant:.3e}; {'ok' if ok else 'FAIL'}, tolerance {EQUICHECK_TOL:g})"
    )
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    graphs, vocab = _dataset(args)
    res = coord_loss_ablation(graphs, _config(args), vocab, log=print)
    res.write_csv(args.out)
    a, p = res.tail_means()
    print(f"final-{res.tail}-epoch mean coordinate loss: aligned {a:.4f}, plain {p:.4f}")
    return 0


COMMANDS = {
    "synth-data": cmd_synth,
    "fragmentize": cmd_fragmentize,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "equicheck": cmd_equicheck,
    "ablate-coordloss": cmd_ablate,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (OSError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (E3WAEError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
