"""Popularity-dynamics transformer: item encoder, causal self-attention stack, scoring."""

from __future__ import annotations

import functools
import hashlib
import json
import struct
import subprocess
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import numcore as nc
from .encoders import K_DEFAULT, build_sinusoid_table
from .errors import ConfigError, DataError, ShapeError

CKPT_MAGIC = b"PDRCKPT\x01"


@dataclass(frozen=True)
class ModelConfig:
    d: int = 50
    h: int = 2
    layers: int = 2
    L: int = 200
    k: int = K_DEFAULT
    m: int = 12
    n: int = 4
    dropout: float = 0.3
    gamma: float = 0.5
    offset: int = 1
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.d <= 0 or self.h <= 0 or self.d % self.h:
            raise ConfigError(f"d={self.d} must be divisible by h={self.h}")
        if self.d % 2:
            raise ConfigError("d must be even for the sinusoid encodings")
        if self.layers < 0 or self.L < 1 or self.k < 2 or self.m < 1 or self.n < 1:
            raise ConfigError("layers >= 0, L >= 1, k >= 2, m >= 1, n >= 1 required")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.offset < 1:
            raise ConfigError("offset must be >= 1")

    @property
    def feature_dim(self) -> int:
        return self.k * (self.m + self.n)

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Declared parameter order; also the checkpoint array order."""
    d = cfg.d
    shapes = OrderedDict(W_p=(d, cfg.feature_dim))
    for i in range(cfg.layers):
        p = f"layer{i}."
        shapes[p + "attn_norm.alpha"] = (d,)
        shapes[p + "attn_norm.beta"] = (d,)
        for w in ("W_Q", "W_K", "W_V", "W_O"):
            shapes[p + w] = (d, d)
        shapes[p + "ffn_norm.alpha"] = (d,)
        shapes[p + "ffn_norm.beta"] = (d,)
        shapes[p + "W_1"] = (d, d)
        shapes[p + "b_1"] = (d,)
        shapes[p + "W_2"] = (d, d)
        shapes[p + "b_2"] = (d,)
    shapes["final_norm.alpha"] = (d,)
    shapes["final_norm.beta"] = (d,)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    """Closed form; no term depends on the number of users or items."""
    d = cfg.d
    per_layer = 4 * d * d + (2 * d * d + 2 * d) + 4 * d
    return d * cfg.feature_dim + cfg.layers * per_layer + 2 * d


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=None) -> "OrderedDict[str, nc.Tensor]":
    dtype = dtype or nc.default_dtype()
    params = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "alpha":
            data = np.ones(shape)
        elif leaf == "beta" or leaf.startswith("b_"):
            data = np.zeros(shape)
        else:
            # W_p is stored (d, fan_in); the others are applied as x @ W
            fan_in = shape[1] if name == "W_p" else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = nc.Tensor(data, requires_grad=True, dtype=dtype, name=name)
    return params


@functools.lru_cache(maxsize=8)
def _causal(L: int) -> np.ndarray:
    return np.tril(np.ones((L, L), dtype=bool))


class PopDynModel:
    """Parameters plus the forward computation.

    Holds no table indexed by item or user; everything item-specific arrives
    as encoded popularity windows.
    """

    def __init__(self, cfg: ModelConfig, params=None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, np.random.default_rng(seed))
        expected = param_shapes(cfg)
        if list(self.params) != list(expected) or any(
                self.params[k].shape != s for k, s in expected.items()):
            raise ShapeError("parameter set does not match the model config")
        self._table = build_sinusoid_table(cfg.L, cfg.d)

    def parameters(self) -> list[nc.Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # -- item encoder -------------------------------------------------------

    def encode_items(self, feats) -> nc.Tensor:
        """Item embeddings from flattened dynamics windows: ``feats @ W_p.T``."""
        feats = nc.as_tensor(feats)
        if feats.shape[-1] != self.cfg.feature_dim:
            raise ShapeError(f"window width {feats.shape[-1]} != k*(m+n) = {self.cfg.feature_dim}")
        return nc.matmul(feats, nc.transpose(self.params["W_p"]))

    def time_position(self, ranks: np.ndarray) -> np.ndarray:
        """Fixed part of the input rows: ``T[rank] + P[position]``."""
        L = ranks.shape[-1]
        if L != self.cfg.L:
            raise ShapeError(f"sequence length {L} != configured L={self.cfg.L}")
        table = self._table.astype(nc.default_dtype(), copy=False)
        return table[ranks] + table[np.arange(L)]

    def assemble_input(self, feats, ranks, valid) -> nc.Tensor:
        """(B, L, d) input rows; padding rows are zero."""
        e = self.encode_items(feats)
        fixed = self.time_position(np.asarray(ranks))
        mask = np.asarray(valid, dtype=e.data.dtype)[..., None]
        return nc.mul(nc.add(e, fixed), mask)

    # -- transformer --------------------------------------------------------

    def _attention(self, x: nc.Tensor, keep: np.ndarray, prefix: str) -> nc.Tensor:
        B, L, d = x.shape
        h = self.cfg.h
        dh = d // h
        P = self.params

        def heads(w):
            return nc.transpose(nc.reshape(nc.matmul(x, P[prefix + w]), (B, L, h, dh)), (0, 2, 1, 3))

        q, k, v = heads("W_Q"), heads("W_K"), heads("W_V")
        scale = np.asarray(1.0 / np.sqrt(dh), dtype=x.data.dtype)
        logits = nc.mul(nc.matmul(q, nc.swapaxes(k, -1, -2)), scale)
        attn = nc.softmax_masked(logits, keep)
        out = nc.reshape(nc.transpose(nc.matmul(attn, v), (0, 2, 1, 3)), (B, L, d))
        return nc.matmul(out, P[prefix + "W_O"])

    def _ffn(self, x: nc.Tensor, prefix: str) -> nc.Tensor:
        P = self.params
        hidden = nc.relu(nc.add(nc.matmul(x, P[prefix + "W_1"]), P[prefix + "b_1"]))
        return nc.add(nc.matmul(hidden, P[prefix + "W_2"]), P[prefix + "b_2"])

    def attention_mask(self, valid: np.ndarray) -> np.ndarray:
        """(B, 1, L, L): query i may attend key j iff j <= i and both are real events."""
        valid = np.asarray(valid, dtype=bool)
        L = valid.shape[-1]
        return _causal(L)[None, None] & valid[:, None, None, :] & valid[:, None, :, None]

    def forward(self, E, valid, training: bool = False, rng: np.random.Generator | None = None) -> nc.Tensor:
        """Pre-norm blocks ``x + Dropout(f(LayerNorm(x)))`` then a final LayerNorm."""
        E = nc.as_tensor(E)
        keep = self.attention_mask(valid)
        P, rate, eps = self.params, self.cfg.dropout, self.cfg.ln_eps
        x = E
        for i in range(self.cfg.layers):
            pre = f"layer{i}."
            h = nc.layer_norm(x, P[pre + "attn_norm.alpha"], P[pre + "attn_norm.beta"], eps)
            x = nc.add(x, nc.dropout(self._attention(h, keep, pre), rate, training, rng))
            h = nc.layer_norm(x, P[pre + "ffn_norm.alpha"], P[pre + "ffn_norm.beta"], eps)
            x = nc.add(x, nc.dropout(self._ffn(h, pre), rate, training, rng))
        return nc.layer_norm(x, P["final_norm.alpha"], P["final_norm.beta"], eps)

    def user_states(self, feats, ranks, valid, training=False, rng=None) -> nc.Tensor:
        return self.forward(self.assemble_input(feats, ranks, valid), valid, training, rng)

    def user_embedding(self, feats, ranks, valid) -> np.ndarray:
        """``q_u``: the output at the last slot, which holds the latest event (left padding)."""
        with nc.no_grad():
            return self.user_states(feats, ranks, valid).data[:, -1, :]


def score(q_u, e_j) -> np.ndarray:
    """Inner product over the last axis."""
    q_u, e_j = np.asarray(q_u), np.asarray(e_j)
    if q_u.shape[-1] != e_j.shape[-1]:
        raise ShapeError(f"score: dims {q_u.shape[-1]} and {e_j.shape[-1]} differ")
    return np.sum(q_u * e_j, axis=-1)


# ---------------------------------------------------------------------------
# checkpoints
#
#   8 bytes   magic b"PDRCKPT\1"
#   uint64    LE header length H
#   H bytes   UTF-8 JSON: config, seed, git_describe, dataset_fingerprint,
#             popularity (table signature), params [{name, shape}], dtype "<f4"
#   float32   LE arrays in header order, C-contiguous
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=1)
def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--tags", "--dirty"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def checkpoint_bytes(model: PopDynModel, seed: int = 0, dataset_fingerprint: str = "",
                     popularity: dict | None = None, extra: dict | None = None) -> bytes:
    head = {
        "format": "popdynrec-checkpoint", "version": 1,
        "config": model.cfg.to_dict(), "seed": seed, "git_describe": git_describe(),
        "dataset_fingerprint": dataset_fingerprint, "popularity": popularity or {},
        "params": [{"name": k, "shape": list(p.shape)} for k, p in model.params.items()],
        "dtype": "<f4",
    }
    if extra:
        head["extra"] = extra
    raw = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in model.params.values())
    return CKPT_MAGIC + struct.pack("<Q", len(raw)) + raw + body


def save_checkpoint(path, model: PopDynModel, **meta) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, **meta))


def load_checkpoint(path) -> tuple[PopDynModel, dict]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if buf[:8] != CKPT_MAGIC:
        raise DataError("not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    head = json.loads(buf[16:16 + hlen].decode())
    cfg = ModelConfig(**head["config"])
    declared = sum(int(np.prod(p["shape"])) for p in head["params"])
    body = len(buf) - 16 - hlen
    if body != 4 * declared:
        raise DataError(f"checkpoint body has {body} bytes, header declares {4 * declared}")
    pos = 16 + hlen
    params = OrderedDict()
    for spec in head["params"]:
        count = int(np.prod(spec["shape"]))
        arr = np.frombuffer(buf, "<f4", count, pos).reshape(spec["shape"])
        params[spec["name"]] = nc.Tensor(arr.astype(np.float32), requires_grad=True,
                                         dtype=np.float32, name=spec["name"])
        pos += 4 * count
    return PopDynModel(cfg, params), head
