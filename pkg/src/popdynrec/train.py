"""Training loop: sampled-negative binary cross-entropy, Adam, early stopping."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .batching import sample_negatives, sequence_batch, stream
from .errors import ConfigError, NumericalError
from .ingest import InteractionDataset, to_fixed_sequence
from .model import ModelConfig, PopDynModel, init_params
from .popdyn import PopularityTable, window_features

log = logging.getLogger(__name__)

LR_GRID = (1e-4, 1e-3, 1e-2)
LOSS_MODES = ("bce", "paper-literal")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 80
    lr: float = 1e-3
    weight_decay: float = 1e-5
    negatives_per_positive: int = 1
    patience: int = 10
    seed: int = 0
    loss: str = "bce"
    eval_negatives: int = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.negatives_per_positive < 1:
            raise ConfigError("negatives_per_positive must be >= 1")
        if self.max_epochs < 0 or self.patience < 0:
            raise ConfigError("max_epochs and patience must be >= 0")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be >= 0")
        if self.loss not in LOSS_MODES:
            raise ConfigError(f"loss must be one of {LOSS_MODES}, got {self.loss!r}")
        if self.lr not in LR_GRID:
            log.warning("learning rate %g is outside the grid %s", self.lr, LR_GRID)


def bce_loss(pos_logits, neg_logits, weights, mode: str = "bce") -> nc.Tensor:
    """Mean over weighted positions of ``-[log s(y+) + sum log(1 - s(y-))]``.

    ``pos_logits`` is (..., ) and ``neg_logits`` (..., n_neg). In
    ``paper-literal`` mode the negative term is ``log s(1 - y-)``.
    """
    if mode not in LOSS_MODES:
        raise ConfigError(f"unknown loss mode {mode!r}")
    pos_logits, neg_logits = nc.as_tensor(pos_logits), nc.as_tensor(neg_logits)
    w = np.asarray(weights, dtype=pos_logits.data.dtype)
    if mode == "bce":
        neg_term = nc.log_sigmoid(nc.neg(neg_logits))
    else:
        neg_term = nc.log_sigmoid(nc.sub(np.asarray(1.0, dtype=neg_logits.data.dtype), neg_logits))
    per_pos = nc.add(nc.log_sigmoid(pos_logits), nc.sum_(neg_term, axis=-1))
    total = nc.sum_(nc.mul(per_pos, w))
    denom = np.asarray(1.0 / max(float(w.sum()), 1.0), dtype=w.dtype)
    return nc.neg(nc.mul(total, denom))


def trainable_users(ds: InteractionDataset) -> np.ndarray:
    return np.array([u for u in range(ds.n_users) if len(ds.train_sequence(u)[0]) >= 2], dtype=np.int64)


def batch_loss(model: PopDynModel, ds: InteractionDataset, table: PopularityTable, users,
               tcfg: TrainConfig, neg_rng, dropout_rng, training: bool = True,
               seen_sets=None) -> tuple[nc.Tensor, int]:
    """Loss over all next-event positions of the given users' training sequences."""
    cfg = model.cfg
    dtype = nc.default_dtype()
    inputs, targets = [], []
    for u in users:
        items, times = ds.train_sequence(int(u))
        inputs.append((items[:-1], times[:-1]))
        targets.append(to_fixed_sequence(items[1:], times[1:], cfg.L))
    batch = sequence_batch(inputs, table, cfg.L, cfg.offset, dtype)
    tgt_items = np.stack([t.items for t in targets])
    tgt_times = np.stack([t.timestamps for t in targets])
    valid = batch.valid

    n_neg = tcfg.negatives_per_positive
    neg_items = np.full(tgt_items.shape + (n_neg,), -1, dtype=np.int64)
    for b, u in enumerate(users):
        seen = seen_sets[u] if seen_sets is not None else np.unique(ds.sequence(int(u))[0])
        slots = np.flatnonzero(valid[b])
        neg_items[b, slots] = sample_negatives(seen, len(slots) * n_neg, ds.n_items,
                                               neg_rng).reshape(len(slots), n_neg)

    pos_feats = window_features(table, tgt_items, tgt_times, cfg.offset, dtype=dtype)
    neg_feats = window_features(table, neg_items, tgt_times[..., None], cfg.offset, dtype=dtype)

    states = model.user_states(batch.feats, batch.ranks, valid, training, dropout_rng)
    pos_e = model.encode_items(pos_feats)
    neg_e = model.encode_items(neg_feats)
    pos_logits = nc.sum_(nc.mul(states, pos_e), axis=-1)
    B, L, d = states.shape
    neg_logits = nc.sum_(nc.mul(nc.reshape(states, (B, L, 1, d)), neg_e), axis=-1)
    loss = bce_loss(pos_logits, neg_logits, valid, tcfg.loss)
    return loss, int(valid.sum())


def train_epoch(model: PopDynModel, ds: InteractionDataset, table: PopularityTable,
                tcfg: TrainConfig, optimizer: nc.Adam, epoch: int, seen_sets=None) -> dict:
    """One pass over shuffled users with one Adam step per batch."""
    users = trainable_users(ds)
    order = stream(tcfg.seed, "shuffle", epoch).permutation(users)
    neg_rng = stream(tcfg.seed, "negatives", epoch)
    drop_rng = stream(tcfg.seed, "dropout", epoch)
    if seen_sets is None:
        seen_sets = ds.user_item_sets()
    total, positions, batches = 0.0, 0, 0
    params = model.parameters()
    for start in range(0, len(order), tcfg.batch_size):
        chunk = order[start:start + tcfg.batch_size]
        loss, n = batch_loss(model, ds, table, chunk, tcfg, neg_rng, drop_rng, True, seen_sets)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch {batches} "
                                 f"(users {chunk[:5].tolist()}...), lr={tcfg.lr}")
        optimizer.zero_grad()
        nc.backward(loss, params)
        optimizer.step()
        total += value * n
        positions += n
        batches += 1
    return {"loss": total / max(positions, 1), "batches": batches, "positions": positions}


@dataclass
class FitResult:
    model: PopDynModel
    curve: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_ndcg: float = float("-inf")
    seed: int = 0


def fit(ds: InteractionDataset, table: PopularityTable, mcfg: ModelConfig, tcfg: TrainConfig,
        curve_path=None, eval_k: int = 10) -> FitResult:
    """Train up to ``max_epochs``, keep the epoch with the best validation NDCG@10.

    Stops once ``patience`` consecutive epochs fail to improve on the best.
    """
    from .evaluation import EvalConfig, evaluate

    check_compatible(mcfg, table)
    model = PopDynModel(mcfg, init_params(mcfg, stream(tcfg.seed, "init")))
    result = FitResult(model=model, seed=tcfg.seed)
    if tcfg.max_epochs == 0:
        log.warning("max_epochs=0: returning freshly initialised parameters")
        return result
    optimizer = nc.Adam(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    ecfg = EvalConfig(k_list=(eval_k,), negatives=tcfg.eval_negatives, seed=tcfg.seed, offset=mcfg.offset)
    seen_sets = ds.user_item_sets()
    best_params = None
    since_best = 0
    for epoch in range(tcfg.max_epochs):
        t0 = time.perf_counter()
        stats = train_epoch(model, ds, table, tcfg, optimizer, epoch, seen_sets)
        report = evaluate(model, ds, table, ecfg, split="valid")
        val_r, val_n = report.recall(eval_k), report.ndcg(eval_k)
        result.curve.append({"epoch": epoch + 1, "loss": stats["loss"],
                             f"val_recall{eval_k}": val_r, f"val_ndcg{eval_k}": val_n,
                             "wall_seconds": time.perf_counter() - t0})
        log.info("epoch %d loss %.4f val R@%d %.4f N@%d %.4f", epoch + 1, stats["loss"],
                 eval_k, val_r, eval_k, val_n)
        if val_n > result.best_val_ndcg:
            result.best_val_ndcg, result.best_epoch = val_n, epoch + 1
            best_params = copy.deepcopy({k: p.data for k, p in model.params.items()})
            since_best = 0
        else:
            since_best += 1
        if since_best >= tcfg.patience:
            break
    if best_params is not None:
        for k, p in model.params.items():
            p.data = best_params[k]
    if curve_path is not None:
        Path(curve_path).write_text(json.dumps(result.curve, indent=1))
    return result


def check_compatible(mcfg: ModelConfig, table: PopularityTable) -> None:
    mismatched = [name for name in ("k", "m", "n", "gamma")
                  if getattr(mcfg, name) != getattr(table, name)]
    if mismatched:
        raise ConfigError("model config and popularity table disagree on "
                          + ", ".join(f"{n} ({getattr(mcfg, n)} vs {getattr(table, n)})" for n in mismatched))


def select_lr(ds, table, mcfg: ModelConfig, tcfg: TrainConfig, grid=LR_GRID) -> tuple[float, FitResult]:
    """Fit once per learning rate and keep the best validation NDCG."""
    best = None
    for lr in grid:
        res = fit(ds, table, mcfg, TrainConfig(**{**asdict(tcfg), "lr": lr}))
        if best is None or res.best_val_ndcg > best[1].best_val_ndcg:
            best = (lr, res)
    return best


def summarize_runs(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()) if len(arr) else float("nan"),
            "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
            "runs": [float(v) for v in arr]}
