"""Training pipeline: config grammar, batch loss against reference loops,
classifier fit, scoring, ranking metrics, checkpoints, cost accounting."""

import numpy as np
import pytest

from relkgc import kg, layers, objectives, pipeline, relnet, rng, tensor
from relkgc.layers import CombinerKind, MpLayerKind
from relkgc.objectives import MiEstimatorKind
from relkgc.pipeline import (Checkpoint, EvalReport, InferenceContext, Model,
                             RankingMode, TrainConfig)
from relkgc.tensor import Tensor


def small_cfg(**kw):
    base = dict(dim=6, gnn=MpLayerKind.GAT, depth=2,
                estimator=MiEstimatorKind.JSD, combiner=CombinerKind.CONCAT,
                learning_rate=0.01, batch_size=4, epochs=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# Config grammar.

def test_config_kv_roundtrip():
    cfg = small_cfg(degree_cap=3, tie_omega_psi=True, margin=0.25)
    again = TrainConfig.from_kv(cfg.to_kv())
    assert again == cfg


def test_config_kv_roundtrip_none_cap():
    cfg = small_cfg(degree_cap=None)
    again = TrainConfig.from_kv(cfg.to_kv())
    assert again.degree_cap is None


def test_config_accepts_string_enums():
    cfg = TrainConfig(dim=6, gnn="gcn", estimator="infonce", combiner="concat",
                      mask="HH,HT")
    assert cfg.gnn == MpLayerKind.GCN
    assert cfg.estimator == MiEstimatorKind.INFONCE
    assert cfg.mask == relnet.PatternMask(True, False, True)


def test_config_rejects_unknown_key():
    with pytest.raises(ValueError):
        TrainConfig.from_kv({"learning_rte": "0.1"})


def test_config_rejects_bad_value():
    with pytest.raises(ValueError):
        TrainConfig.from_kv({"epochs": "many"})


def test_config_validation_errors():
    with pytest.raises(ValueError):
        small_cfg(dim=0).validate()
    with pytest.raises(ValueError):
        small_cfg(combiner=CombinerKind.BILSTM, dim=7).validate()
    with pytest.raises(ValueError):
        small_cfg(batch_size=1).validate()
    with pytest.raises(ValueError):
        small_cfg(learning_rate=0.0).validate()
    with pytest.raises(ValueError):
        small_cfg(margin=1.5).validate()
    with pytest.raises(ValueError):
        small_cfg(degree_cap=0).validate()


# ---------------------------------------------------------------------------
# Batch loss against explicit reference loops.

def reference_jsd_loss(model, state, batch, sigma):
    """Per-anchor loop over discriminator_score, the definitional form."""
    x_all = pipeline._node_features(model, state.heads, state.rels, state.tails)
    h_psi = layers.mp_forward(model.psi, state.net_prop, x_all)
    t_pos, t_neg = [], []
    for slot, v in enumerate(batch):
        ego = state.egos[int(v)]
        emb = layers.mp_forward(model.omega, ego,
                                tensor.gather_rows(x_all, ego.nodes))
        x_v = tensor.gather_rows(h_psi, np.array([int(v)]))
        t_pos.append(objectives.discriminator_score(ego, emb, x_v, model.disc))
    for slot in range(len(batch)):
        other = state.egos[int(batch[int(sigma[slot])])]
        emb = layers.mp_forward(model.omega, other,
                                tensor.gather_rows(x_all, other.nodes))
        x_v = tensor.gather_rows(h_psi, np.array([int(batch[slot])]))
        t_neg.append(objectives.discriminator_score(other, emb, x_v, model.disc))
    pos = tensor.concat([tensor.reshape(t, (1,)) for t in t_pos])
    neg = tensor.concat([tensor.reshape(t, (1,)) for t in t_neg])
    return -objectives.jsd_mi(pos, neg)


@pytest.mark.parametrize("gnn", [MpLayerKind.GAT, MpLayerKind.GCN])
def test_batch_loss_matches_reference(tiny_kg, gnn):
    cfg = small_cfg(gnn=gnn, epochs=0, batch_size=6)
    model = Model.create(cfg, tiny_kg)
    state = pipeline._TrainState.build(tiny_kg, cfg)
    batch = np.arange(6, dtype=np.int64)

    got = pipeline._batch_loss(model, state, batch,
                               rng.substream(0, "negatives", 0, 0))
    sigma = objectives.pair_negatives(6, rng.substream(0, "negatives", 0, 0),
                                      MiEstimatorKind.JSD)
    want = reference_jsd_loss(model, state, batch, sigma)
    assert np.isclose(float(got.data), float(want.data), atol=1e-10)


def test_batch_loss_infonce_diagonal_is_positive_pair(tiny_kg):
    # the InfoNCE positive scores must equal the JSD positive scores: both
    # are each anchor against its own ego graph
    cfg = small_cfg(epochs=0, batch_size=6)
    model = Model.create(cfg, tiny_kg)
    state = pipeline._TrainState.build(tiny_kg, cfg)
    batch = np.arange(6, dtype=np.int64)
    sigma = objectives.pair_negatives(6, rng.substream(0, "negatives", 0, 0),
                                      MiEstimatorKind.JSD)
    ref = reference_jsd_loss(model, state, batch, sigma)

    cfg2 = small_cfg(estimator=MiEstimatorKind.INFONCE, epochs=0, batch_size=6)
    model2 = Model.create(cfg2, tiny_kg)
    state2 = pipeline._TrainState.build(tiny_kg, cfg2)
    got = pipeline._batch_loss(model2, state2, batch,
                               rng.substream(0, "negatives", 0, 0))
    # same seed, same parameters: models are identical, losses merely use
    # different estimators, so both must be finite and different
    assert np.isfinite(float(got.data))
    assert not np.isclose(float(got.data), float(ref.data))


def test_train_runs_and_reports_epochs(tiny_kg):
    seen = []
    ckpt = pipeline.train(tiny_kg, small_cfg(epochs=3),
                          on_epoch=lambda e, l: seen.append((e, l)))
    assert [e for e, _ in seen] == [1, 2, 3]
    assert all(np.isfinite(l) for _, l in seen)
    assert isinstance(ckpt, Checkpoint)
    assert ckpt.entities == tiny_kg.entity_names


def test_train_is_deterministic(tiny_kg):
    a = pipeline.train(tiny_kg, small_cfg(epochs=2))
    b = pipeline.train(tiny_kg, small_cfg(epochs=2))
    assert pipeline.checkpoint_bytes(a) == pipeline.checkpoint_bytes(b)


def test_train_entity_table_stays_frozen(tiny_kg):
    cfg = small_cfg(epochs=2)
    before = kg.init_embeddings(tiny_kg, cfg.dim, cfg.seed).entity_emb.data.copy()
    ckpt = pipeline.train(tiny_kg, cfg)
    assert np.array_equal(ckpt.tensors["entity_emb"], before)
    rel_init = kg.init_embeddings(tiny_kg, cfg.dim, cfg.seed).relation_emb.data
    assert not np.array_equal(ckpt.tensors["relation_emb"], rel_init)


def test_train_zero_epochs_still_fits_classifier(tiny_kg):
    ckpt = pipeline.train(tiny_kg, small_cfg(epochs=0))
    assert np.any(ckpt.tensors["clf.w"] != 0)


def test_train_naive_ns_estimator(tiny_kg):
    ckpt = pipeline.train(tiny_kg, small_cfg(
        estimator=MiEstimatorKind.NAIVE_NS, epochs=1))
    assert isinstance(ckpt, Checkpoint)


def test_train_tied_stacks_share_parameters(tiny_kg):
    ckpt = pipeline.train(tiny_kg, small_cfg(tie_omega_psi=True, epochs=1))
    assert not any(name.startswith("omega.") for name in ckpt.tensors)
    model = Model.from_checkpoint(ckpt)
    assert model.omega is model.psi


def test_train_rejects_empty_graph():
    empty = kg.KnowledgeGraph(["a"], ["r"], [])
    with pytest.raises(kg.EmptyTrainGraph):
        pipeline.train(empty, small_cfg())


# ---------------------------------------------------------------------------
# Ranking metrics.

def test_rank_with_ties_is_average_rank():
    assert pipeline.rank_from_scores([0.9, 0.5, 0.1], 0) == 1.0
    assert pipeline.rank_from_scores([0.9, 0.5, 0.1], 2) == 3.0
    assert pipeline.rank_from_scores([0.5, 0.5, 0.1], 0) == 1.5
    assert pipeline.rank_from_scores([0.5, 0.5, 0.5], 1) == 2.0


def test_aggregate_metrics_closed_form():
    report = pipeline.aggregate_metrics([1.0, 2.0, 4.0])
    assert abs(report.mrr - (1 + 0.5 + 0.25) / 3) < 1e-12
    assert report.hit1 == pytest.approx(1 / 3)
    assert report.hit3 == pytest.approx(2 / 3)
    assert report.n == 3


def test_aggregate_metrics_empty():
    with pytest.raises(pipeline.EmptyEval):
        pipeline.aggregate_metrics([])


def test_report_kv_and_table():
    report = EvalReport(mrr=0.5, hit1=0.25, hit3=0.75, n=4)
    kv = report.to_kv()
    assert "mrr=0.5" in kv and "n=4" in kv
    table = report.table()
    assert "0.5000" in table and "hit3" in table


# ---------------------------------------------------------------------------
# Scoring and evaluation.

@pytest.fixture(scope="module")
def trained(request):
    text = ("a\tr1\tb\nb\tr2\tc\na\tr3\tc\nc\tr1\td\nd\tr2\ta\nb\tr3\td\n")
    graph = kg.parse_triples(text)
    cfg = TrainConfig(dim=6, gnn=MpLayerKind.GAT, depth=2,
                      estimator=MiEstimatorKind.JSD, combiner=CombinerKind.CONCAT,
                      learning_rate=0.01, batch_size=4, epochs=2, seed=0)
    ckpt = pipeline.train(graph, cfg)
    net = relnet.build_relation_network(graph, cfg.mask, cfg.degree_cap, cfg.seed)
    return graph, cfg, ckpt, net


def test_score_triple_in_unit_interval(trained):
    graph, _cfg, ckpt, net = trained
    p = pipeline.score_triple(ckpt, net, graph, kg.Triple(0, 1, 2))
    assert 0.0 < p < 1.0


def test_score_triple_deterministic(trained):
    graph, _cfg, ckpt, net = trained
    a = pipeline.score_triple(ckpt, net, graph, kg.Triple(0, 0, 3))
    b = pipeline.score_triple(ckpt, net, graph, kg.Triple(0, 0, 3))
    assert a == b


def test_score_triple_validates_ids(trained):
    graph, _cfg, ckpt, net = trained
    with pytest.raises(pipeline.UnknownRelation):
        pipeline.score_triple(ckpt, net, graph, kg.Triple(0, 9, 1))
    with pytest.raises(ValueError):
        pipeline.score_triple(ckpt, net, graph, kg.Triple(0, 0, 99))


def test_score_unseen_entities_via_extended_vocab(trained):
    graph, _cfg, ckpt, net = trained
    ext, triples, flags = kg.parse_eval_triples("x\tr1\tb\n", graph)
    assert flags == [True]
    p = pipeline.score_triple(ckpt, net, ext, triples[0])
    assert 0.0 < p < 1.0


def test_extended_entity_rows_are_deterministic(trained):
    graph, _cfg, ckpt, net = trained
    ext, _t, _f = kg.parse_eval_triples("x\tr1\tb\ny\tr2\tc\n", graph)
    m1 = pipeline._extend_entities(Model.from_checkpoint(ckpt), ext)
    m2 = pipeline._extend_entities(Model.from_checkpoint(ckpt), ext)
    assert np.array_equal(m1.entity_emb.data, m2.entity_emb.data)
    assert m1.entity_emb.shape == (ext.num_entities, 6)


def test_evaluate_relations_mode(trained):
    graph, _cfg, ckpt, net = trained
    ext, triples, _f = kg.parse_eval_triples("x\tr1\tb\nx\tr3\tc\n", graph)
    report = pipeline.evaluate(ckpt, net, ext, triples)
    assert report.n == 2
    assert len(report.ranks) == 2
    for r in report.ranks:
        assert 1.0 <= r <= 3.0       # three relations in the vocabulary
    assert 0.0 <= report.hit1 <= report.hit3 <= 1.0
    assert report.mrr >= 1.0 / 3.0


def test_evaluate_tails_mode_filters_known(trained):
    graph, _cfg, ckpt, net = trained
    ext, triples, _f = kg.parse_eval_triples("x\tr1\tb\n", graph)
    report = pipeline.evaluate(ckpt, net, ext, triples, mode=RankingMode.TAILS)
    assert report.n == 1
    # candidate pool: the true tail plus every entity not forming a known
    # triple; small vocabulary so the rank is bounded by it
    assert report.ranks[0] <= ext.num_entities


def test_evaluate_empty_queries(trained):
    graph, _cfg, ckpt, net = trained
    with pytest.raises(pipeline.EmptyEval):
        pipeline.evaluate(ckpt, net, graph, [])


def test_evaluate_rejects_unknown_relation(trained):
    graph, _cfg, ckpt, net = trained
    with pytest.raises(pipeline.UnknownRelation):
        pipeline.evaluate(ckpt, net, graph, [kg.Triple(0, 7, 1)])


def test_evaluate_is_read_only(trained):
    graph, _cfg, ckpt, net = trained
    nodes_before = net.num_nodes
    blob_before = pipeline.checkpoint_bytes(ckpt)
    ext, triples, _f = kg.parse_eval_triples("x\tr1\tb\n", graph)
    pipeline.evaluate(ckpt, net, ext, triples)
    assert net.num_nodes == nodes_before
    assert pipeline.checkpoint_bytes(ckpt) == blob_before


def test_random_scorer_mrr_reference():
    # ranks of a uniform scorer over m candidates: the true one lands
    # uniformly, MRR approaches H(m)/m = 0.29289 for m = 10
    gen = np.random.default_rng(0)
    ranks = []
    for _ in range(2000):
        scores = gen.normal(size=10)
        ranks.append(pipeline.rank_from_scores(scores, 0))
    report = pipeline.aggregate_metrics(ranks)
    want = np.sum(1.0 / np.arange(1, 11)) / 10
    assert abs(report.mrr - want) < 0.05


# ---------------------------------------------------------------------------
# Checkpoint serialization.

def test_checkpoint_roundtrip_bytes(trained, tmp_path):
    _g, _cfg, ckpt, _net = trained
    path = tmp_path / "model.ckpt"
    pipeline.save_checkpoint(ckpt, path)
    again = pipeline.load_checkpoint(path)
    assert pipeline.checkpoint_bytes(again) == pipeline.checkpoint_bytes(ckpt)
    assert again.cfg == ckpt.cfg
    assert again.entities == ckpt.entities
    for name, arr in ckpt.tensors.items():
        assert np.array_equal(again.tensors[name], arr)


def test_checkpoint_magic_and_version():
    blob = pipeline.checkpoint_bytes(
        Checkpoint(pipeline.CHECKPOINT_VERSION, small_cfg(),
                   {"t": np.zeros((2, 2))}, ["a"], ["r"]))
    assert blob[:4] == b"NORN"
    with pytest.raises(pipeline.BadMagic):
        pipeline.checkpoint_from_bytes(b"XXXX" + blob[4:])
    bad_version = blob[:4] + (99).to_bytes(4, "little") + blob[8:]
    with pytest.raises(pipeline.UnsupportedVersion):
        pipeline.checkpoint_from_bytes(bad_version)


def test_checkpoint_truncation_detected():
    blob = pipeline.checkpoint_bytes(
        Checkpoint(pipeline.CHECKPOINT_VERSION, small_cfg(),
                   {"t": np.arange(4.0).reshape(2, 2)}, ["a"], ["r"]))
    for cut in (3, 10, len(blob) - 1):
        with pytest.raises(pipeline.TruncatedFile):
            pipeline.checkpoint_from_bytes(blob[:cut])
    with pytest.raises(ValueError):
        pipeline.checkpoint_from_bytes(blob + b"junk")


def test_model_from_checkpoint_validates_tensors(trained):
    _g, _cfg, ckpt, _net = trained
    broken = Checkpoint(ckpt.version, ckpt.cfg, dict(ckpt.tensors),
                        ckpt.entities, ckpt.relations)
    broken.tensors.pop("clf.w")
    with pytest.raises(ValueError):
        Model.from_checkpoint(broken)

    wrong_shape = Checkpoint(ckpt.version, ckpt.cfg, dict(ckpt.tensors),
                             ckpt.entities, ckpt.relations)
    wrong_shape.tensors["clf.w"] = np.zeros((3, 3))
    with pytest.raises(ValueError):
        Model.from_checkpoint(wrong_shape)


# ---------------------------------------------------------------------------
# Cost model.

def test_cost_estimate_formula():
    cfg = small_cfg(dim=32, depth=2)
    stats = relnet.NetworkStats(num_nodes=10, num_edges=20, pattern_counts={},
                                mean_degree=4.0, max_degree=6)
    f, d = 32.0, 4.0
    want = 3 * f * f + d ** 2 * f + 2 * f * f
    assert pipeline.estimate_inference_cost(cfg, stats, 1) == pytest.approx(want)
    assert pipeline.estimate_inference_cost(cfg, stats, 8) == pytest.approx(8 * want)


def test_measured_macs_positive_and_additive(trained):
    graph, _cfg, ckpt, net = trained
    ctx = InferenceContext.build(ckpt, net, graph)
    one = pipeline.measure_inference_macs(ctx, [kg.Triple(0, 0, 1)])
    three = pipeline.measure_inference_macs(ctx, [kg.Triple(0, 0, 1)] * 3)
    assert one > 0
    assert three == 3 * one
