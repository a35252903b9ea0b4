"""Retrieval metric tests against the definitional oracle, plus sweep/ablation."""

from types import SimpleNamespace

import numpy as np
import pytest

from conftest import oracle_retrieval
from uggfuse.dataio import SyntheticSpec, generate, split_instances
from uggfuse.errors import (
    ConfigError,
    ContractViolationError,
    MissingCheckpointError,
    NonFiniteLossError,
)
from uggfuse.evalkit import (
    MetricReport,
    RetrievalResult,
    SweepReport,
    ablation_run,
    ablation_table,
    compute_distances,
    evaluate,
    evaluate_result,
    evaluate_splits,
    noise_sweep,
    write_report_json,
    write_rows_csv,
)
from uggfuse.numerics import RngStream
from uggfuse.objective import TrainConfig, fit


def micro_splits(num_ids=4, per_id=5, dim=6, n_local=3, seed=3):
    spec = SyntheticSpec(num_ids=num_ids, per_id=per_id, dim=dim,
                         n_local=n_local, noise_std=0.2, hetero_frac=0.0,
                         occl_prob=0.0, conflict_prob=0.0, seed=seed)
    return split_instances(generate(spec))


def micro_train_config(**kw):
    base = dict(seed=1, variant="a", dim=6, n_local=3, c=2, k=1,
                epochs=1, p_ids=4, k_inst=2)
    base.update(kw)
    return TrainConfig(**base)


# -- evaluate: hand cases -----------------------------------------------------------


def test_ap_hand_case_relevant_at_ranks_one_and_three():
    dist = np.array([[0.1, 0.2, 0.3, 0.4]])
    rep = evaluate_result(RetrievalResult(
        distances=dist, query_labels=[7], gallery_labels=[7, 1, 7, 2]))
    assert abs(rep.map - 5.0 / 6.0) < 1e-12
    assert rep.per_query_ap == [pytest.approx(5.0 / 6.0, abs=1e-12)]


def test_perfect_prefix_ranking_gives_map_one():
    dist = np.array([[0.0, 0.1, 5.0, 6.0], [0.2, 0.1, 9.0, 8.0]])
    rep = evaluate_result(RetrievalResult(
        distances=dist, query_labels=[1, 1], gallery_labels=[1, 1, 2, 2]))
    assert rep.map == 1.0
    assert rep.rank(1) == 1.0


def test_non_prefix_ranking_gives_map_below_one():
    dist = np.array([[0.0, 0.1, 0.2]])
    rep = evaluate_result(RetrievalResult(
        distances=dist, query_labels=[1], gallery_labels=[1, 2, 1]))
    assert rep.map < 1.0


def test_ties_break_toward_lower_gallery_index():
    dist = np.zeros((1, 3))
    rep = evaluate_result(RetrievalResult(
        distances=dist, query_labels=[5], gallery_labels=[2, 5, 5]))
    # order is 0,1,2; relevants at ranks 2 and 3
    assert rep.map == pytest.approx((1 / 2 + 2 / 3) / 2, abs=1e-12)


def test_self_pair_excluded_by_sample_id():
    dist = np.array([[0.0, 0.3, 0.5]])
    rep = evaluate_result(RetrievalResult(
        distances=dist, query_labels=[4], gallery_labels=[4, 4, 9],
        query_ids=[100], gallery_ids=[100, 101, 102]))
    assert rep.map == 1.0  # the distance-0 self match is skipped


def test_absent_identity_counts_as_invalid_query():
    dist = np.array([[0.1, 0.2], [0.3, 0.1]])
    rep = evaluate_result(RetrievalResult(
        distances=dist, query_labels=[1, 8], gallery_labels=[1, 1]))
    assert rep.invalid_queries == 1
    assert len(rep.per_query_ap) == 1


def test_all_queries_invalid_is_an_error():
    dist = np.array([[0.1]])
    with pytest.raises(ContractViolationError):
        evaluate_result(RetrievalResult(
            distances=dist, query_labels=[3], gallery_labels=[4]))


def test_cmc_is_nondecreasing_and_rank_extraction_ordered():
    rng = RngStream.named(1, "cmc")
    dist = rng.uniform(0.0, 1.0, (12, 30))
    labels_q = np.arange(12) % 4
    labels_g = np.arange(30) % 4
    rep = evaluate_result(RetrievalResult(
        distances=dist, query_labels=labels_q, gallery_labels=labels_g))
    assert (np.diff(rep.cmc) >= 0).all()
    assert rep.rank(1) <= rep.rank(5) <= rep.rank(10)
    assert rep.rank(1000) == rep.cmc[-1]


# -- evaluate: oracle equivalence and invariances --------------------------------------


def random_instance(rng, q_max=10, g_max=50):
    q = int(rng.integers(1, q_max + 1))
    g = int(rng.integers(2, g_max + 1))
    n_ids = int(rng.integers(1, 5))
    dist = rng.uniform(0.0, 2.0, (q, g))
    if rng.uniform(0.0, 1.0) < 0.3:
        dist = np.round(dist, 1)  # force ties
    ql = rng.integers(0, n_ids, (q,))
    gl = rng.integers(0, n_ids, (g,))
    gl[0] = ql[0]  # at least one valid query
    if rng.uniform(0.0, 1.0) < 0.5:
        qi = rng.integers(0, 6, (q,))
        gi = rng.integers(0, 6, (g,))
    else:
        qi = gi = None
    return dist, ql, gl, qi, gi


def test_matches_brute_force_oracle_on_random_instances():
    rng = RngStream.named(7, "metric-oracle")
    checked = 0
    for _ in range(60):
        dist, ql, gl, qi, gi = random_instance(rng)
        o_map, o_cmc, o_aps, o_inv = oracle_retrieval(dist, ql, gl, qi, gi)
        if not o_aps:
            continue
        rep = evaluate_result(RetrievalResult(
            distances=dist, query_labels=ql, gallery_labels=gl,
            query_ids=qi, gallery_ids=gi))
        assert abs(rep.map - o_map) < 1e-12
        assert np.allclose(rep.cmc, o_cmc, atol=1e-12)
        assert rep.invalid_queries == o_inv
        checked += 1
    assert checked >= 40


def test_gallery_permutation_invariance_without_ties():
    rng = RngStream.named(9, "perm")
    feats_q = rng.standard_normal((6, 5))
    feats_g = rng.standard_normal((20, 5))
    ql = np.arange(6) % 3
    gl = np.arange(20) % 3
    base = evaluate(feats_q, feats_g, ql, gl)
    perm = RngStream.named(10, "perm2").permutation(20)
    shuffled = evaluate(feats_q, feats_g[perm], ql, gl[perm])
    assert abs(base.map - shuffled.map) < 1e-12
    assert np.allclose(base.cmc, shuffled.cmc, atol=1e-12)


def test_translation_invariance_of_euclidean_retrieval():
    rng = RngStream.named(11, "shift")
    feats_q = rng.standard_normal((5, 4))
    feats_g = rng.standard_normal((15, 4))
    shift = rng.standard_normal((4,))
    ql = np.arange(5) % 2
    gl = np.arange(15) % 2
    a = evaluate(feats_q, feats_g, ql, gl)
    b = evaluate(feats_q + shift, feats_g + shift, ql, gl)
    assert a.map == pytest.approx(b.map, abs=1e-12)


def test_cosine_metric_is_scale_invariant():
    rng = RngStream.named(13, "cos")
    feats_q = rng.standard_normal((5, 4))
    feats_g = rng.standard_normal((15, 4))
    scales = rng.uniform(0.5, 3.0, (15, 1))
    ql = np.arange(5) % 2
    gl = np.arange(15) % 2
    a = evaluate(feats_q, feats_g, ql, gl, metric="cosine")
    b = evaluate(feats_q, feats_g * scales, ql, gl, metric="cosine")
    assert a.map == pytest.approx(b.map, abs=1e-12)
    with pytest.raises(ConfigError):
        compute_distances(feats_q, feats_g, metric="manhattan")


def test_metric_report_consistency_enforced():
    with pytest.raises(ContractViolationError):
        MetricReport(map=0.9, cmc=np.array([0.5, 0.4]), per_query_ap=[0.9])
    with pytest.raises(ContractViolationError):
        MetricReport(map=0.9, cmc=np.array([0.5, 0.6]), per_query_ap=[0.8])


def test_distance_validation():
    with pytest.raises(ContractViolationError):
        RetrievalResult(distances=np.array([[-0.1]]),
                        query_labels=[0], gallery_labels=[0])
    with pytest.raises(ContractViolationError):
        RetrievalResult(distances=np.zeros((0, 3)),
                        query_labels=[], gallery_labels=[0, 0, 0])


# -- sweep and ablation -------------------------------------------------------------


def test_noise_sweep_grid_shape_and_zero_eps_identity():
    train, query, gallery = micro_splits()
    cfg = micro_train_config()
    ck = fit(cfg, train)
    clean = evaluate_splits(ck, query, gallery)
    report = noise_sweep({"a": ck}, train, query, gallery,
                         eps_list=[0.0, 10.0], seeds=[0, 1])
    assert len(report.rows) == 2 * 2
    for row in report.rows:
        if row["epsilon"] == 0.0:
            assert row["mAP"] == clean.map
            assert row["rank1"] == clean.rank(1)
    assert report.mean_map("a", 0.0) == clean.map


def test_noise_sweep_leaves_inputs_untouched():
    train, query, gallery = micro_splits()
    ck = fit(micro_train_config(), train)
    before = (train.tokens.copy(), query.tokens.copy(), gallery.tokens.copy())
    noise_sweep({"a": ck}, train, query, gallery, eps_list=[25.0], seeds=[3])
    assert np.array_equal(train.tokens, before[0])
    assert np.array_equal(query.tokens, before[1])
    assert np.array_equal(gallery.tokens, before[2])


def test_noise_sweep_missing_variant_is_named():
    train, query, gallery = micro_splits()
    ck = fit(micro_train_config(), train)
    with pytest.raises(MissingCheckpointError, match="e"):
        noise_sweep({"a": ck}, train, query, gallery, eps_list=[0.0],
                    seeds=[0], variants=["a", "e"])


def test_noise_sweep_accepts_per_seed_checkpoints():
    train, query, gallery = micro_splits()
    cks = {s: fit(micro_train_config(seed=s), train) for s in (0, 1)}
    report = noise_sweep({"a": cks}, train, query, gallery,
                         eps_list=[0.0], seeds=[0, 1])
    assert len(report.rows) == 2
    agg = report.aggregate()
    assert agg[0]["seeds"] == 2


def test_ablation_run_row_shape_and_aggregate():
    train, query, gallery = micro_splits()
    rows, checkpoints = ablation_run(micro_train_config(), train, query, gallery,
                                     seeds=[0, 1], variants=("a", "b"))
    assert len(rows) == 2 * 2
    assert set(checkpoints) == {"a", "b"}
    assert set(checkpoints["a"]) == {0, 1}
    table = ablation_table(rows)
    assert [r["variant"] for r in table] == ["a", "b"]
    for entry in table:
        assert entry["seeds"] == 2
        assert 0.0 <= entry["mAP_mean"] <= 1.0
        assert entry["mAP_std"] >= 0.0


def test_ablation_abort_names_the_variant(monkeypatch):
    import uggfuse.evalkit as ek

    def boom(cfg, ds):
        if cfg.variant == "b":
            raise NonFiniteLossError("loss term ce became non-finite at step 0")
        return fit(cfg, ds)

    monkeypatch.setattr(ek, "fit", boom)
    train, query, gallery = micro_splits()
    with pytest.raises(NonFiniteLossError, match="variant b"):
        ablation_run(micro_train_config(), train, query, gallery,
                     seeds=[0], variants=("a", "b"))


# -- report files ------------------------------------------------------------------


def test_rows_csv_layout_and_determinism(tmp_path):
    rows = [{"variant": "a", "seed": 0, "mAP": 0.5},
            {"variant": "b", "seed": 0, "mAP": 0.75}]
    p1, p2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
    write_rows_csv(rows, p1)
    write_rows_csv(rows, p2)
    assert p1.read_bytes() == p2.read_bytes()
    lines = p1.read_text().strip().splitlines()
    assert lines[0] == "variant,seed,mAP"
    assert lines[1] == "a,0,0.5"
    with pytest.raises(ContractViolationError):
        write_rows_csv([], tmp_path / "empty.csv")
    with pytest.raises(ContractViolationError):
        write_rows_csv([{"a": 1}, {"b": 2}], tmp_path / "bad.csv")


def test_report_json_schema(tmp_path):
    import json

    path = tmp_path / "run.json"
    write_report_json(path, run_id="eval", config_hash="abc123",
                      rows=[{"mAP": 1.0}], extra={"invalid_queries": 0})
    doc = json.loads(path.read_text())
    assert doc["run_id"] == "eval"
    assert doc["config_hash"] == "abc123"
    assert doc["rows"] == [{"mAP": 1.0}]
    assert doc["invalid_queries"] == 0
