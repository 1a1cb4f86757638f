"""Leave-one-out evaluation against sampled negatives, baselines and audits."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .batching import sample_distinct_negatives, sequence_batch, stream
from .errors import ConfigError, DataError
from .ingest import InteractionDataset
from .model import PopDynModel
from .popdyn import PopularityTable, window_features

log = logging.getLogger(__name__)

SPLIT_CODES = {"valid": 0, "test": 1}


@dataclass(frozen=True)
class EvalConfig:
    k_list: tuple = (10,)
    negatives: int = 100
    seed: int = 0
    offset: int = 1
    chunk_users: int = 256

    def __post_init__(self):
        if self.negatives < 1:
            raise ConfigError("negatives must be >= 1")
        if not self.k_list or any(k < 1 for k in self.k_list):
            raise ConfigError("k_list must hold positive cutoffs")
        object.__setattr__(self, "k_list", tuple(int(k) for k in self.k_list))

    def to_dict(self) -> dict:
        return {"k_list": list(self.k_list), "negatives": self.negatives,
                "seed": self.seed, "offset": self.offset}


def rank_of_target(scores, ids, target: int = 0) -> int:
    """1-based rank of entry ``target`` when sorting by score descending.

    Ties go to the smaller id, so the order is total and deterministic.
    """
    scores = np.asarray(scores)
    s, tid = scores[target], ids[target]
    better = int(np.sum(scores > s))
    tied = sum(1 for i, x in enumerate(scores) if i != target and x == s and ids[i] < tid)
    return 1 + better + tied


# Means use math.fsum (exactly rounded), so a metric does not depend on the
# order in which users are listed.

def recall_at(ranks, k: int) -> float:
    ranks = [int(r) for r in ranks]
    return math.fsum(1.0 for r in ranks if r <= k) / len(ranks) if ranks else 0.0


def ndcg_at(ranks, k: int) -> float:
    ranks = [int(r) for r in ranks]
    if not ranks:
        return 0.0
    return math.fsum(1.0 / math.log2(r + 1) for r in ranks if r <= k) / len(ranks)


@dataclass
class UserResult:
    user: str
    target: str
    rank: int
    candidates: list  # target first
    scores: list


@dataclass
class EvalReport:
    """Per-user ranks and candidate scores plus aggregate R@k / N@k."""

    rows: list
    k_list: tuple = (10,)
    metadata: dict = field(default_factory=dict)

    @property
    def ranks(self) -> np.ndarray:
        return np.array([r.rank for r in self.rows], dtype=np.int64)

    def recall(self, k: int) -> float:
        return recall_at(self.ranks, k)

    def ndcg(self, k: int) -> float:
        return ndcg_at(self.ranks, k)

    def per_user(self, metric: str, k: int) -> np.ndarray:
        r = self.ranks
        if metric == "recall":
            return (r <= k).astype(np.float64)
        return np.array([1.0 / math.log2(x + 1) if x <= k else 0.0 for x in r.tolist()])

    def summary(self) -> dict:
        out = {"users": len(self.rows)}
        for k in self.k_list:
            out[f"R@{k}"] = self.recall(k)
            out[f"N@{k}"] = self.ndcg(k)
        return out

    def score_map(self) -> dict:
        return {(r.user, c): s for r in self.rows for c, s in zip(r.candidates, r.scores)}

    # NDJSON: one {"type": "user", ...} record per user sorted by user id, then
    # one {"type": "summary", "metrics": ..., "k_list": ..., "metadata": ...}.
    def to_ndjson(self) -> str:
        lines = []
        for r in sorted(self.rows, key=lambda r: r.user):
            lines.append(json.dumps({"type": "user", "user": r.user, "target": r.target,
                                     "rank": r.rank, "candidates": r.candidates,
                                     "scores": [float(s) for s in r.scores]},
                                    sort_keys=True, separators=(",", ":")))
        lines.append(json.dumps({"type": "summary", "metrics": self.summary(),
                                 "k_list": list(self.k_list), "metadata": self.metadata},
                                sort_keys=True, separators=(",", ":")))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_ndjson(cls, text: str) -> "EvalReport":
        rows, meta, k_list = [], {}, (10,)
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("type") == "summary":
                meta, k_list = rec.get("metadata", {}), tuple(rec.get("k_list", [10]))
            else:
                rows.append(UserResult(rec["user"], rec["target"], rec["rank"],
                                       rec["candidates"], rec["scores"]))
        return cls(rows, k_list, meta)

    def save(self, path) -> None:
        Path(path).write_text(self.to_ndjson(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_ndjson(Path(path).read_text(encoding="utf-8"))


def _eval_plan(ds: InteractionDataset, cfg: EvalConfig, split: str):
    """(user, history, target item, target time, candidates) per evaluable user.

    Candidates are the target followed by ``cfg.negatives`` distinct items the
    user never interacted with, drawn from a stream keyed by (seed, split, user).
    """
    if split not in SPLIT_CODES:
        raise ConfigError(f"split must be 'valid' or 'test', got {split!r}")
    plan = []
    for u in ds.eval_users():
        items, times = ds.sequence(int(u))
        cut = len(items) - 2 if split == "valid" else len(items) - 1
        seen = np.unique(items)
        rng = stream(cfg.seed, "candidates", SPLIT_CODES[split], int(u))
        negs = sample_distinct_negatives(seen, cfg.negatives, ds.n_items, rng)
        cands = np.concatenate([[items[cut]], negs])
        plan.append((int(u), (items[:cut], times[:cut]), int(items[cut]), int(times[cut]), cands))
    return plan


def _rows_from_scores(ds: InteractionDataset, plan, scores) -> list:
    rows = []
    for (u, _, target, _, cands), sc in zip(plan, scores):
        ids = [ds.item_ids[c] for c in cands]
        rows.append(UserResult(ds.user_ids[u], ds.item_ids[target], rank_of_target(sc, ids, 0),
                               ids, [float(s) for s in sc]))
    return rows


def model_scores(model: PopDynModel, table: PopularityTable, plan, offset: int, chunk: int = 256):
    """Inner-product scores for each plan entry's candidates at its target time."""
    cfg = model.cfg
    dtype = nc.default_dtype()
    out = []
    with nc.no_grad():
        for start in range(0, len(plan), chunk):
            part = plan[start:start + chunk]
            batch = sequence_batch([p[1] for p in part], table, cfg.L, offset, dtype)
            q = model.user_embedding(batch.feats, batch.ranks, batch.valid)
            width = max(len(p[4]) for p in part)
            cands = np.full((len(part), width), -1, dtype=np.int64)
            for i, p in enumerate(part):
                cands[i, :len(p[4])] = p[4]
            t = np.array([p[3] for p in part], dtype=np.int64)
            feats = window_features(table, cands, t[:, None], offset, dtype=dtype)
            e = model.encode_items(feats).data
            s = np.einsum("bd,bcd->bc", q, e)
            out.extend(s[i, :len(p[4])] for i, p in enumerate(part))
    return out


def evaluate(model: PopDynModel, ds: InteractionDataset, table: PopularityTable,
             cfg: EvalConfig | None = None, split: str = "test") -> EvalReport:
    """Rank each held-out item among sampled unobserved items with the model's scores."""
    cfg = cfg or EvalConfig(offset=model.cfg.offset)
    if table.item_ids != ds.item_ids:
        raise DataError("popularity table was built for a different item catalog")
    plan = _eval_plan(ds, cfg, split)
    scores = model_scores(model, table, plan, cfg.offset, cfg.chunk_users)
    meta = {"split": split, "config": cfg.to_dict(), "candidate_seed": cfg.seed,
            "checkpoint_digest": model.digest(), "dataset_fingerprint": ds.fingerprint(),
            "scorer": "model"}
    return EvalReport(_rows_from_scores(ds, plan, scores), cfg.k_list, meta)


def training_counts(ds: InteractionDataset) -> np.ndarray:
    """Per-item number of training interactions (validation/test events excluded)."""
    keep = ~ds.holdout_mask()
    return np.bincount(ds.items[keep], minlength=ds.n_items)


def mostpop_baseline(ds: InteractionDataset, cfg: EvalConfig | None = None, split: str = "test") -> EvalReport:
    """Rank candidates by global training popularity (ties by item id)."""
    cfg = cfg or EvalConfig()
    counts = training_counts(ds)
    plan = _eval_plan(ds, cfg, split)
    scores = [counts[p[4]].astype(np.float64) for p in plan]
    meta = {"split": split, "config": cfg.to_dict(), "candidate_seed": cfg.seed,
            "dataset_fingerprint": ds.fingerprint(), "scorer": "mostpop"}
    return EvalReport(_rows_from_scores(ds, plan, scores), cfg.k_list, meta)


def zero_shot(model: PopDynModel, header: dict | None, ds: InteractionDataset, table: PopularityTable,
              cfg: EvalConfig | None = None, split: str = "test") -> EvalReport:
    """Evaluate a model trained elsewhere on ``ds`` without touching its parameters.

    Refuses to run when the checkpoint's popularity settings differ from the
    target table's.
    """
    expected = (header or {}).get("popularity") or {}
    actual = table.signature()
    diff = {k: (expected[k], actual[k]) for k in expected if k in actual and expected[k] != actual[k]}
    for name in ("gamma", "k", "m", "n"):
        if getattr(model.cfg, name) != actual[name]:
            diff[name] = (getattr(model.cfg, name), actual[name])
    if diff:
        raise ConfigError(f"checkpoint and target popularity settings differ: {diff}")
    before = model.digest()
    report = evaluate(model, ds, table, cfg, split)
    after = model.digest()
    if before != after:
        raise RuntimeError("model parameters changed during zero-shot inference")
    report.metadata.update({"zero_shot": True, "digest_before": before, "digest_after": after,
                            "source_dataset": (header or {}).get("dataset_fingerprint", "")})
    return report


def load_score_file(path) -> dict:
    """NDJSON lines ``{"user": ..., "candidate": ..., "score": ...}`` keyed by (user, candidate)."""
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out[(rec["user"], rec["candidate"])] = float(rec["score"])
    return out


def write_score_file(report: EvalReport, path) -> None:
    lines = [json.dumps({"user": u, "candidate": c, "score": s}, sort_keys=True)
             for (u, c), s in sorted(report.score_map().items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def interpolate(ours: EvalReport, external: dict | EvalReport, alpha: float = 0.5) -> EvalReport:
    """Re-rank with ``alpha * ours + (1 - alpha) * external`` per (user, candidate)."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    ext = external.score_map() if isinstance(external, EvalReport) else external
    mine = ours.score_map()
    missing = sorted(set(mine) - set(ext))
    extra = sorted(set(ext) - set(mine))
    if missing or extra:
        raise DataError(f"score keys differ: {len(missing)} missing from external "
                        f"(e.g. {missing[:3]}), {len(extra)} unexpected (e.g. {extra[:3]})")
    rows = []
    for r in ours.rows:
        sc = [alpha * s + (1.0 - alpha) * ext[(r.user, c)] for c, s in zip(r.candidates, r.scores)]
        rows.append(UserResult(r.user, r.target, rank_of_target(sc, r.candidates, 0),
                               list(r.candidates), sc))
    meta = dict(ours.metadata, interpolation_alpha=alpha, scorer="interpolated")
    return EvalReport(rows, ours.k_list, meta)


def leakage_audit(ds: InteractionDataset) -> dict:
    """How many training interactions of each test item happen after the test event.

    Reports the mean count over test events, and the mean proportion over
    test events whose item has at least one training interaction.
    """
    keep = ~ds.holdout_mask()
    tr_items, tr_times = ds.items[keep], ds.timestamps[keep]
    order = np.lexsort((tr_times, tr_items))
    tr_items, tr_times = tr_items[order], tr_times[order]
    starts = np.searchsorted(tr_items, np.arange(ds.n_items + 1))
    counts, props = [], []
    for u in ds.eval_users():
        item, t = ds.test_event(int(u))
        times = tr_times[starts[item]:starts[item + 1]]
        future = len(times) - int(np.searchsorted(times, t, side="right"))
        counts.append(future)
        if len(times):
            props.append(future / len(times))
    return {"test_events": len(counts),
            "mean_future_actions": float(np.mean(counts)) if counts else 0.0,
            "mean_future_proportion": float(np.mean(props)) if props else 0.0}


def ttest(a, b) -> dict:
    """Two-sided independent-samples t-test on per-user metric arrays."""
    from scipy import stats

    res = stats.ttest_ind(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return {"t": float(res.statistic), "p": float(res.pvalue)}
