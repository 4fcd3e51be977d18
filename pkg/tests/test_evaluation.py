import json

import numpy as np
import pytest

from e3wae.evaluation import (
    EvalReport,
    control_separation,
    cosine,
    encode_graphs,
    eval_context_preserving,
    eval_property_targeting,
    graph_readouts,
    partner_indices,
    pca_emit,
    probe_disentanglement,
    random_latent_baseline,
    retrieval_baseline,
    teacher_forced_accuracy,
    type_jaccard,
)
from e3wae.exceptions import ContractViolation
from e3wae.model import ModelConfig, init_params
from e3wae.molgraph import FragmentGraph3D, SynthConfig, make_vocab, synth_dataset


@pytest.fixture(scope="module")
def setup():
    vocab = make_vocab(6, seed=3)
    graphs = synth_dataset(SynthConfig(count=24, K=6, n_range=(3, 5), seed=3), vocab)
    mcfg = ModelConfig(K=6, d_h=6, d_v=3, layers=1)
    return vocab, graphs, mcfg, init_params(mcfg, 1)


def test_report_validation_and_json(tmp_path):
    with pytest.raises(ContractViolation):
        EvalReport(property_mse=-1.0)
    with pytest.raises(ContractViolation):
        EvalReport(validity_rate=1.5)
    merged = EvalReport(property_mae=0.3, extra={"a": 1}).merge(EvalReport(context_similarity_mean=0.9, extra={"b": 2}))
    assert merged.property_mae == 0.3 and merged.context_similarity_mean == 0.9 and merged.extra == {"a": 1, "b": 2}
    merged.to_json(tmp_path / "r.json")
    raw = json.loads((tmp_path / "r.json").read_text())
    assert raw["property_mse"] is None and raw["property_mae"] == 0.3


def test_cosine_and_jaccard():
    v = np.array([1.0, -2.0, 3.0])
    assert cosine(v, v) == 1.0 and cosine(v, -v) == -1.0 and cosine(v, np.zeros(3)) == 0.0
    a = FragmentGraph3D([0, 0, 1], [(0, 1), (1, 2)], np.zeros((3, 3)))
    b = FragmentGraph3D([0, 1, 1], [(0, 1), (1, 2)], np.zeros((3, 3)))
    assert type_jaccard(a, a) == 1.0
    assert type_jaccard(a, b) == pytest.approx(2 / 4)


def test_partners_share_fragment_count(setup):
    _, graphs, _, _ = setup
    for i, j in enumerate(partner_indices(graphs, 0)):
        if j is not None:
            assert j != i and graphs[j].n == graphs[i].n


def test_stub_generator_returning_reference_scores_zero(setup):
    vocab, graphs, mcfg, params = setup
    rep, gen = eval_property_targeting(graphs, params, mcfg, vocab, generator=lambda i, p, c, s: graphs[i])
    assert rep.property_mse == 0.0 and rep.property_mae == 0.0 and rep.validity_rate == 1.0
    assert gen == list(graphs)


def test_stub_generator_failures_lower_validity(setup):
    vocab, graphs, mcfg, params = setup
    rep, _ = eval_property_targeting(graphs, params, mcfg, vocab, generator=lambda i, p, c, s: graphs[i] if i % 2 else None)
    assert rep.validity_rate == 0.5 and rep.property_mae == 0.0


def test_model_metrics_run(setup):
    vocab, graphs, mcfg, params = setup
    rep, gen = eval_property_targeting(graphs[:6], params, mcfg, vocab)
    assert len(gen) == 6 and 0.0 <= rep.validity_rate <= 1.0
    base, _ = random_latent_baseline(graphs[:6], params, mcfg, vocab)
    assert "baseline_mae" in base.extra
    ctx, gen = eval_context_preserving(graphs[:6], params, mcfg, vocab)
    assert -1.0 <= ctx.context_similarity_mean <= ctx.context_similarity_max <= 1.0
    t_acc, e_acc = teacher_forced_accuracy(graphs[:6], params, mcfg, vocab)
    assert 0.0 <= t_acc <= 1.0 and 0.0 <= e_acc <= 1.0


def test_retrieval_self_match_and_ordering(setup):
    _, graphs, mcfg, params = setup
    mean, mx, info = retrieval_baseline(graphs[:5], graphs, params, mcfg, threshold=np.inf)
    assert mx == pytest.approx(1.0, abs=1e-12)
    assert mean <= mx
    mean, mx, info = retrieval_baseline(graphs[:5], graphs[5:], params, mcfg)
    assert mean <= mx and info["threshold"] > 0


def test_retrieval_widens_empty_neighbourhoods(setup):
    _, graphs, mcfg, params = setup
    _, _, info = retrieval_baseline(graphs[:3], graphs[3:], params, mcfg, threshold=0.0)
    assert info["widenings"] >= 1


def test_probe_constant_target_guard(setup):
    _, graphs, mcfg, params = setup
    flat = [g.copy() for g in graphs]
    for g in flat:
        g.props["asphericity"] = 0.25
    assert probe_disentanglement(flat, params, mcfg) == (0.0, 0.0, {"constant_target": True})
    with pytest.raises(ContractViolation):
        probe_disentanglement(graphs[:3], params, mcfg)


def test_probe_recovers_a_planted_linear_property(setup):
    _, graphs, mcfg, params = setup
    hp, _ = graph_readouts(encode_graphs(graphs, params, mcfg))
    planted = [g.copy() for g in graphs]
    for g, row in zip(planted, hp):
        g.props["asphericity"] = float(row @ np.arange(1, hp.shape[1] + 1))
    r2_p, _, _ = probe_disentanglement(planted, params, mcfg)
    assert r2_p > 0.999


def test_pca_emit(tmp_path):
    rng = np.random.default_rng(0)
    hp, hs = rng.normal(size=(10, 4)), np.zeros((10, 4))
    proj = pca_emit(hp, hs, np.arange(10.0), tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "pc1,pc2,property,branch" and len(lines) == 21
    assert lines[1].endswith(",property") and lines[-1].endswith(",context")
    assert np.array_equal(proj[10:], np.zeros((10, 2)))
    # two components never reconstruct worse than one
    Xc = hp - hp.mean(0)
    err = []
    for k in (1, 2):
        U, S, Vt = np.linalg.svd(Xc, full_matrices=False)
        err.append(np.linalg.norm(Xc - (U[:, :k] * S[:k]) @ Vt[:k]))
    assert err[1] <= err[0]
    np.testing.assert_allclose(np.abs(proj[:10]), np.abs(U[:, :2] * S[:2]), atol=1e-10)
    with pytest.raises(ContractViolation):
        pca_emit(hp[:2], hs[:2], [0, 1], tmp_path / "q.csv")


def test_control_separation_runs(setup):
    vocab, graphs, mcfg, params = setup
    a, b = control_separation(graphs, params, mcfg, vocab, pairs=3)
    assert a >= 0.0 and b >= 0.0
