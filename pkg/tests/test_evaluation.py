import json
import math

import numpy as np
import pytest

from popdynrec.errors import ConfigError, DataError
from popdynrec.evaluation import (EvalConfig, EvalReport, UserResult, evaluate, interpolate, leakage_audit,
                                  load_score_file, mostpop_baseline, ndcg_at, rank_of_target, recall_at,
                                  training_counts, ttest, write_score_file, zero_shot)
from popdynrec.ingest import build_split, from_interactions
from popdynrec.model import ModelConfig, PopDynModel
from popdynrec.popdyn import TimeBucketing, build_popularity


def brute_metrics(score_lists, id_lists, k):
    """Sort each candidate list by (-score, id) and read off the target's position."""
    recall, ndcg = [], []
    for scores, ids in zip(score_lists, id_lists):
        order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
        rank = order.index(0) + 1
        recall.append(1.0 if rank <= k else 0.0)
        ndcg.append(1.0 / math.log2(rank + 1) if rank <= k else 0.0)
    return math.fsum(recall) / len(recall), math.fsum(ndcg) / len(ndcg)


def test_metric_examples():
    assert ndcg_at([1], 10) == 1.0
    assert ndcg_at([3], 10) == 0.5
    assert recall_at([11], 10) == 0.0 and ndcg_at([11], 10) == 0.0
    assert recall_at([], 10) == 0.0


def test_metrics_match_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n_users, n_cand = int(rng.integers(1, 11)), int(rng.integers(2, 21))
        scores = [rng.integers(0, 4, size=n_cand).astype(float).tolist() for _ in range(n_users)]
        ids = [[f"c{j:02d}" for j in rng.permutation(n_cand)] for _ in range(n_users)]
        ranks = [rank_of_target(s, i) for s, i in zip(scores, ids)]
        for k in (1, 5, 10):
            r, n = brute_metrics(scores, ids, k)
            assert recall_at(ranks, k) == r and ndcg_at(ranks, k) == n


def test_ties_break_by_candidate_id():
    assert rank_of_target([1.0, 1.0, 1.0], ["b", "a", "c"]) == 2
    assert rank_of_target([1.0, 1.0, 2.0], ["a", "b", "c"]) == 2


def test_mostpop_orders_by_training_count():
    rows = [("u1", "A", 1), ("u1", "B", 2), ("u1", "x", 3), ("u1", "y", 4),
            ("u2", "A", 1), ("u2", "B", 2), ("u2", "A", 3), ("u2", "z", 5), ("u2", "w", 6)]
    ds = build_split(from_interactions(rows))
    counts = training_counts(ds)
    assert counts[ds.item_index("A")] == 3 and counts[ds.item_index("B")] == 2
    assert counts[ds.item_index("y")] == 0  # test events are not training data
    report = mostpop_baseline(ds, EvalConfig(negatives=100))
    for r in report.rows:
        by_score = sorted(zip(r.scores, r.candidates), key=lambda p: (-p[0], p[1]))
        assert by_score[r.rank - 1][1] == r.target


def test_candidates_exclude_history_and_are_deterministic(small_synth):
    cfg = EvalConfig(negatives=30, seed=2)
    a = mostpop_baseline(small_synth, cfg)
    b = mostpop_baseline(small_synth, cfg)
    assert a.to_ndjson() == b.to_ndjson()
    for r in a.rows:
        u = small_synth.user_index(r.user)
        history = {small_synth.item_ids[i] for i in small_synth.sequence(u)[0]}
        assert r.candidates[0] == r.target
        wanted = min(30, small_synth.n_items - len(history))
        assert len(set(r.candidates[1:])) == len(r.candidates) - 1 == wanted
        assert not history & set(r.candidates[1:])
    assert a.metadata["candidate_seed"] == 2
    other = mostpop_baseline(small_synth, EvalConfig(negatives=30, seed=3))
    assert other.rows[0].candidates != a.rows[0].candidates


def test_valid_and_test_splits_use_different_targets(small_synth):
    v = mostpop_baseline(small_synth, split="valid")
    t = mostpop_baseline(small_synth, split="test")
    u = small_synth.user_index(v.rows[0].user)
    assert v.rows[0].target == small_synth.item_ids[small_synth.valid_event(u)[0]]
    assert t.rows[0].target == small_synth.item_ids[small_synth.test_event(u)[0]]
    with pytest.raises(ConfigError):
        mostpop_baseline(small_synth, split="train")


def test_model_evaluation_and_report_round_trip(small_synth, tmp_path):
    table = build_popularity(small_synth)
    model = PopDynModel(ModelConfig(d=8, L=10), seed=1)
    report = evaluate(model, small_synth, table, EvalConfig(k_list=(5, 10), negatives=100))
    s = report.summary()
    assert s["users"] == len(small_synth.eval_users())
    assert 0 <= s["R@5"] <= s["R@10"] <= 1 and s["N@10"] <= 1
    assert report.metadata["checkpoint_digest"] == model.digest()
    assert report.metadata["dataset_fingerprint"] == small_synth.fingerprint()
    path = tmp_path / "r.ndjson"
    report.save(path)
    back = EvalReport.load(path)
    assert back.summary() == s and back.to_ndjson() == report.to_ndjson()
    users = [json.loads(line)["user"] for line in path.read_text().splitlines()[:-1]]
    assert users == sorted(users)
    assert evaluate(model, small_synth, table, EvalConfig(k_list=(5, 10))).to_ndjson() == report.to_ndjson()


def test_evaluate_refuses_foreign_table(small_synth, toy_dataset):
    with pytest.raises(DataError):
        evaluate(PopDynModel(ModelConfig(d=8, L=10)), small_synth, build_popularity(toy_dataset))


def make_report(scores):
    rows = [UserResult(f"u{i}", "t", rank_of_target(s, ["t", "a", "b"]), ["t", "a", "b"], list(s))
            for i, s in enumerate(scores)]
    return EvalReport(rows, (1, 2))


def test_interpolation_boundaries_and_arithmetic(tmp_path):
    ours = make_report([[0.8, 0.1, 0.5], [0.1, 0.9, 0.3]])
    ext = make_report([[0.2, 0.7, 0.9], [0.6, 0.1, 0.2]])
    assert [r.rank for r in interpolate(ours, ext, 1.0).rows] == [r.rank for r in ours.rows]
    assert [r.rank for r in interpolate(ours, ext, 0.0).rows] == [r.rank for r in ext.rows]
    assert interpolate(ours, ext, 0.5).rows[0].scores[0] == pytest.approx(0.5)
    same = interpolate(ours, ours, 0.5)
    assert [r.rank for r in same.rows] == [r.rank for r in ours.rows]
    write_score_file(ext, tmp_path / "s.ndjson")
    from_file = interpolate(ours, load_score_file(tmp_path / "s.ndjson"), 0.3)
    assert from_file.to_ndjson() == interpolate(ours, ext, 0.3).to_ndjson()
    with pytest.raises(ConfigError):
        interpolate(ours, ext, 1.5)


def test_interpolation_key_mismatch_lists_pairs():
    ours = make_report([[0.8, 0.1, 0.5]])
    ext = {("u0", "t"): 1.0, ("u0", "a"): 0.0, ("u0", "zz"): 0.0}
    with pytest.raises(DataError, match="1 missing.*'b'.*1 unexpected.*'zz'"):
        interpolate(ours, ext)


def brute_leakage(ds):
    hold = ds.holdout_mask()
    users = ds.event_users()
    counts, props = [], []
    for u in ds.eval_users():
        item, t = ds.test_event(int(u))
        train_times = [ds.timestamps[e] for e in range(ds.n_events) if not hold[e] and ds.items[e] == item]
        later = sum(1 for x in train_times if x > t)
        counts.append(later)
        if train_times:
            props.append(later / len(train_times))
    return np.mean(counts), np.mean(props)


def test_leakage_toy_example():
    rows = [("t", "y", 0), ("t", "z", 2), ("t", "X", 4),
            ("p1", "X", 1), ("p1", "w", 20), ("p1", "w", 21),
            ("p2", "X", 5), ("p2", "w", 22), ("p2", "w", 23),
            ("p3", "X", 9), ("p3", "w", 24), ("p3", "w", 25)]
    ds = build_split(from_interactions(rows))
    audit = leakage_audit(ds)
    # X: training times {1, 5, 9}, tested at 4 -> 2 later, proportion 2/3.
    # w has no training interactions: counted as 0 later actions, left out of the proportion.
    assert audit["test_events"] == 4
    assert audit["mean_future_actions"] == pytest.approx(2 / 4)
    assert audit["mean_future_proportion"] == pytest.approx(2 / 3)


def test_leakage_matches_brute_force(small_synth):
    audit = leakage_audit(small_synth)
    count, prop = brute_leakage(small_synth)
    assert audit["mean_future_actions"] == pytest.approx(count)
    assert audit["mean_future_proportion"] == pytest.approx(prop)


def test_zero_shot_guards_and_digest(small_synth):
    toy_dataset = small_synth
    table = build_popularity(toy_dataset)
    model = PopDynModel(ModelConfig(d=8, L=10), seed=3)
    header = {"popularity": table.signature()}
    report = zero_shot(model, header, toy_dataset, table, EvalConfig(negatives=20))
    assert report.metadata["digest_before"] == report.metadata["digest_after"] == model.digest()
    bad = dict(table.signature(), gamma=1.0)
    with pytest.raises(ConfigError, match="gamma"):
        zero_shot(model, {"popularity": bad}, toy_dataset, table)
    other = build_popularity(toy_dataset, TimeBucketing(int(toy_dataset.timestamps.min()), 86_400, 4 * 86_400))
    with pytest.raises(ConfigError, match="fine_len"):
        zero_shot(model, header, toy_dataset, other)


def test_ttest_helper():
    res = ttest([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0])
    assert res["t"] == 0.0 and res["p"] == 1.0
    assert ttest(np.linspace(0.9, 1.1, 50), np.linspace(0.0, 0.1, 50))["p"] < 1e-6
