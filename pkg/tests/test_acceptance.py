"""Acceptance suite: one test per release criterion, in order.

Each test prints a single `criterion N` verdict line with the measured
numbers and registers it with the recorder in conftest, so the verdicts
are echoed in the terminal summary whether or not the assertion holds.
Criteria 5 and 6 share one module-scoped fixture: the five full-mask
planted-rule trainings are the expensive part and both criteria read
them.
"""

import time

import numpy as np
import pytest

import conftest
from relkgc import gradcheck, kg, pipeline, relnet
from relkgc.influence import builtin_graph, verify_influence
from relkgc.layers import FIXED_KINDS, CombinerKind, MpLayerKind
from relkgc.objectives import MiEstimatorKind
from relkgc.relnet import PatternMask


def _verdict(num, name, ok, detail):
    line = f"criterion {num} {name}: {'PASS' if ok else 'FAIL'}  [{detail}]"
    conftest.record_criterion(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. Relation-network construction equals the all-pairs oracle.

ALL_MASKS = [PatternMask(hh, tt, ht)
             for hh in (False, True) for tt in (False, True)
             for ht in (False, True)]


def _oracle_pattern_bits(graph):
    """Bitset of shared-entity patterns for every unordered triple pair,
    computed by dense all-pairs comparison; pairs with no shared entity
    are absent."""
    h, _r, t = graph.triple_arrays()
    hh = h[:, None] == h[None, :]
    tt = t[:, None] == t[None, :]
    ht = (h[:, None] == t[None, :]) | (t[:, None] == h[None, :])
    bits = hh * 1 + tt * 2 + ht * 4
    iu = np.triu_indices(len(h), k=1)
    vals = bits[iu]
    keep = vals > 0
    return {(int(u), int(v)): int(b)
            for u, v, b in zip(iu[0][keep], iu[1][keep], vals[keep])}


def test_criterion_1_network_matches_pairwise_oracle():
    t0 = time.perf_counter()
    builds = 0
    mismatches = 0
    for graph_seed in range(100):
        text = conftest.random_kg_text(np.random.default_rng(graph_seed))
        graph = kg.parse_triples(text)
        full_bits = _oracle_pattern_bits(graph)
        for mask in ALL_MASKS:
            m = ((1 if mask.include_head_head else 0)
                 | (2 if mask.include_tail_tail else 0)
                 | (4 if mask.include_head_tail else 0))
            want = {pair: b & m for pair, b in full_bits.items() if b & m}
            net = relnet.build_relation_network(graph, mask)
            got = {(u, v): bits for u, v, _label, bits in net.undirected_edges()}
            builds += 1
            if got != want:
                mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 10.0
    _verdict(1, "relation-network oracle equivalence", ok,
             f"{builds} builds (100 graphs x 8 masks), "
             f"{mismatches} mismatches, {elapsed:.1f}s < 10s")


# ---------------------------------------------------------------------------
# 2. Finite-difference gradient suite.

def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    results = gradcheck.run_suite(seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_err)
    ok = (all(r.passed for r in results)
          and worst.max_rel_err < 1e-4 and elapsed < 60.0)
    _verdict(2, "finite-difference gradients", ok,
             f"{len(results)} components, max rel err "
             f"{worst.max_rel_err:.2e} ({worst.name}) < 1e-4, "
             f"{elapsed:.1f}s < 60s")


# ---------------------------------------------------------------------------
# 3. Fixed families: influence distribution equals the k-step walk row.

WALK_GRAPHS = ("path-4", "cycle-5", "star-5")


def test_criterion_3_fixed_family_walk_equivalence():
    t0 = time.perf_counter()
    worst_tv = 0.0
    checks = 0
    for kind in FIXED_KINDS:
        for name in WALK_GRAPHS:
            for k in (1, 2, 3):
                report = verify_influence(kind, builtin_graph(name), k,
                                          mode="exact")
                worst_tv = max(worst_tv, report.tv)
                checks += 1
    elapsed = time.perf_counter() - t0
    ok = worst_tv < 1e-9 and elapsed < 5.0
    _verdict(3, "walk characterization (exact)", ok,
             f"{checks} kind/graph/k combinations, worst TV "
             f"{worst_tv:.2e} < 1e-9, {elapsed:.1f}s < 5s")


# ---------------------------------------------------------------------------
# 4. Learnable vs fixed convolution: feature sensitivity of influence.

def test_criterion_4_gat_contrast():
    report = verify_influence(MpLayerKind.GCN, builtin_graph("asym-gadget"),
                              2, mode="gat-contrast")
    fixed_worst = max(report.details["fixed_tv"].values())
    gat_tv = report.details["gat_tv"]
    ok = report.passed and fixed_worst <= 1e-12 and gat_tv >= 1e-3
    _verdict(4, "learnable-vs-fixed contrast", ok,
             f"fixed families worst TV {fixed_worst:.2e} <= 1e-12, "
             f"attention TV {gat_tv:.4f} >= 1e-3")


# ---------------------------------------------------------------------------
# 5 and 6. Planted composition rule, trained end to end.
#
# r3(a, c) holds iff some b satisfies r1(a, b) and r2(b, c); 15% of the
# entities are held out as unseen and the model ranks the relation of
# each eval triple that touches them. Criterion 5 wants median Hit@1
# >= 0.70 on the full pattern mask; criterion 6 compares the single-
# pattern ablations against it.

PLANTED_MASKS = {
    "full": "HH,TT,HT",
    "no-HH": "TT,HT",
    "no-TT": "HH,HT",
    "no-HT": "HH,TT",
}


def _planted_run(mask_codes, seed):
    graph = conftest.planted_rule_kg(seed)
    split = kg.make_inductive_split(graph, 0.15, seed)
    cfg = pipeline.TrainConfig(
        dim=24, gnn=MpLayerKind.GAT, depth=2,
        estimator=MiEstimatorKind.JSD, combiner=CombinerKind.CONCAT,
        mask=PatternMask.from_codes(mask_codes), degree_cap=2,
        learning_rate=1e-3, batch_size=32, epochs=200, seed=seed)
    ckpt = pipeline.train(split.train_graph, cfg)
    net = relnet.build_relation_network(split.train_graph, cfg.mask,
                                        cfg.degree_cap, cfg.seed)
    report = pipeline.evaluate(ckpt, net, split.train_graph,
                               split.eval_triples)
    return report.hit1


@pytest.fixture(scope="module")
def planted_results():
    out = {}
    for label, codes in PLANTED_MASKS.items():
        t0 = time.perf_counter()
        hits = [_planted_run(codes, seed) for seed in range(5)]
        out[label] = {"hits": hits,
                      "median": float(np.median(hits)),
                      "elapsed": time.perf_counter() - t0}
    return out


def test_criterion_5_planted_rule_recovery(planted_results):
    full = planted_results["full"]
    hits = ", ".join(f"{h:.3f}" for h in full["hits"])
    ok = full["median"] >= 0.70 and full["elapsed"] < 600.0
    _verdict(5, "planted-rule inductive recovery", ok,
             f"hit@1 per seed [{hits}], median {full['median']:.3f} "
             f">= 0.70, {full['elapsed']:.0f}s < 600s")


def test_criterion_6_head_tail_ablation_dominates(planted_results):
    base = planted_results["full"]["median"]
    degr = {label: base - planted_results[label]["median"]
            for label in ("no-HH", "no-TT", "no-HT")}
    ok = degr["no-HT"] >= max(degr["no-HH"], degr["no-TT"])
    detail = ", ".join(f"{label} -{d:.3f}" for label, d in degr.items())
    _verdict(6, "head-tail ablation hurts most", ok,
             f"median degradation vs full {base:.3f}: {detail}")


# ---------------------------------------------------------------------------
# 7. Ranking metrics.

def test_criterion_7_metric_correctness():
    unit = pipeline.aggregate_metrics([1.0, 2.0, 4.0])
    exact_ok = (abs(unit.mrr - 7.0 / 12.0) <= 1e-12
                and abs(unit.hit1 - 1.0 / 3.0) <= 1e-12
                and abs(unit.hit3 - 2.0 / 3.0) <= 1e-12)

    gen = np.random.default_rng(7)
    ranks = [pipeline.rank_from_scores(gen.uniform(size=10),
                                       int(gen.integers(10)))
             for _ in range(2000)]
    uniform_mrr = pipeline.aggregate_metrics(ranks).mrr
    uniform_ok = abs(uniform_mrr - 0.2929) <= 0.05

    ok = exact_ok and uniform_ok
    _verdict(7, "metric correctness", ok,
             f"ranks [1,2,4]: mrr {unit.mrr:.6f} (7/12 +/- 1e-12), "
             f"hit@1 {unit.hit1:.4f}, hit@3 {unit.hit3:.4f}; "
             f"uniform scorer mrr {uniform_mrr:.4f} within 0.2929 +/- 0.05")


# ---------------------------------------------------------------------------
# 8. Determinism and serialization.

def _train_save_load_eval(tmp_path, tag):
    text = conftest.random_kg_text(np.random.default_rng(5),
                                   max_entities=20, max_triples=60)
    graph = kg.parse_triples(text)
    split = kg.make_inductive_split(graph, 0.2, 3)
    cfg = pipeline.TrainConfig(dim=8, gnn=MpLayerKind.GAT, depth=2,
                               estimator=MiEstimatorKind.JSD,
                               batch_size=8, learning_rate=0.01,
                               epochs=3, seed=11)
    ckpt = pipeline.train(split.train_graph, cfg)
    path = tmp_path / f"{tag}.ckpt"
    pipeline.save_checkpoint(ckpt, path)
    loaded = pipeline.load_checkpoint(path)
    net = relnet.build_relation_network(split.train_graph, cfg.mask,
                                        cfg.degree_cap, cfg.seed)
    report = pipeline.evaluate(loaded, net, split.train_graph,
                               split.eval_triples)
    return path.read_bytes(), report.to_kv(), loaded, split.train_graph, cfg


def test_criterion_8_determinism_and_frozen_entities(tmp_path):
    blob_a, report_a, loaded, graph, cfg = _train_save_load_eval(tmp_path, "a")
    blob_b, report_b, _, _, _ = _train_save_load_eval(tmp_path, "b")

    fresh = pipeline.Model.create(cfg, graph)
    entity_frozen = (loaded.tensors["entity_emb"].tobytes()
                     == fresh.entity_emb.data.tobytes())
    relations_moved = (loaded.tensors["relation_emb"].tobytes()
                       != fresh.relation_emb.data.tobytes())

    ok = (blob_a == blob_b and report_a == report_b
          and entity_frozen and relations_moved)
    _verdict(8, "determinism and serialization", ok,
             f"checkpoints byte-identical: {blob_a == blob_b}, "
             f"reports identical: {report_a == report_b}, "
             f"entity rows untouched by training: {entity_frozen}")


# ---------------------------------------------------------------------------
# 9. Inference cost model against instrumented MAC counts.

def test_criterion_9_cost_model_tracks_measured_macs():
    gen = np.random.default_rng(2026)
    lines = [f"e{gen.integers(350)}\tr{gen.integers(6)}\te{gen.integers(350)}"
             for _ in range(1000)]
    graph = kg.parse_triples("\n".join(lines) + "\n")
    net = relnet.build_relation_network(graph, degree_cap=8, seed=0)
    stats = relnet.network_stats(net)

    cfg = pipeline.TrainConfig(dim=32, gnn=MpLayerKind.GCN,
                               combiner=CombinerKind.CONCAT,
                               degree_cap=8, seed=0)
    model = pipeline.Model.create(cfg, graph)
    ctx = pipeline.InferenceContext.build(model, net, graph)

    qgen = np.random.default_rng(7)
    pool = [kg.Triple(int(qgen.integers(graph.num_entities)),
                      int(qgen.integers(graph.num_relations)),
                      int(qgen.integers(graph.num_entities)))
            for _ in range(64)]

    batch_sizes = (1, 8, 64)
    measured = []
    ratios = []
    for b in batch_sizes:
        macs = pipeline.measure_inference_macs(ctx, pool[:b])
        measured.append(float(macs))
        ratios.append(macs / pipeline.estimate_inference_cost(cfg, stats, b))

    bs = np.asarray(batch_sizes, dtype=np.float64)
    ms = np.asarray(measured)
    design = np.vstack([bs, np.ones_like(bs)]).T
    _coef, residual, *_ = np.linalg.lstsq(design, ms, rcond=None)
    ss_tot = float(((ms - ms.mean()) ** 2).sum())
    r_squared = 1.0 - (float(residual[0]) / ss_tot if residual.size else 0.0)

    within = all(1.0 / 3.0 <= r <= 3.0 for r in ratios)
    ok = within and r_squared >= 0.99
    ratio_text = ", ".join(f"b={b}: {r:.2f}x"
                           for b, r in zip(batch_sizes, ratios))
    _verdict(9, "inference cost model", ok,
             f"measured/formula within 3x ({ratio_text}), "
             f"linear fit R^2 {r_squared:.6f} >= 0.99")
