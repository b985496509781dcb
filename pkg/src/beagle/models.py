"""Tiny decoder-only target LM and the single-block cross-attention draft head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt_io
from .data import VOCAB_SIZE, sha256
from .masks import causal_mask
from .tensor import (
    Tensor,
    cast,
    embedding,
    masked_softmax,
    matmul,
    no_grad,
    rms_norm,
    rope,
    rope_tables,
    silu,
    softmax_np,
)

NORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    t_max: int = 512
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary encoding")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.d_model, self.n_heads, self.n_layers, self.t_max, self.vocab_size)


def _normal(rng, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _linear(x: Tensor, w: Tensor) -> Tensor:
    """Weight product accumulated in f64, returned in the activation dtype.

    OpenBLAS switches kernels with the number of rows, so the same row can
    round differently in an f32 block than on its own. Accumulating in f64
    makes the incremental draft step agree with the batch forward.
    """
    return cast(matmul(cast(x, np.float64), cast(w, np.float64)), x.dtype)


def _attention(q: Tensor, k: Tensor, v: Tensor, allowed: np.ndarray) -> Tensor:
    # same reasoning as _linear; the key count also differs between the two paths
    out_dtype = q.dtype
    q, k, v = cast(q, np.float64), cast(k, np.float64), cast(v, np.float64)
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    return cast(matmul(masked_softmax(scores, allowed), v), out_dtype)


class TargetModel:
    """Pre-norm causal transformer with rotary positions and a tied LM head."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c, d = config, config.d_model
        out_std = 0.02 / np.sqrt(2 * c.n_layers)
        p = {"embed": _normal(rng, (c.vocab_size, d), 0.02, dtype),
             "final_norm": np.ones(d, dtype)}
        for l in range(c.n_layers):
            p[f"layers.{l}.attn_norm"] = np.ones(d, dtype)
            p[f"layers.{l}.mlp_norm"] = np.ones(d, dtype)
            for name in ("wq", "wk", "wv"):
                p[f"layers.{l}.{name}"] = _normal(rng, (d, d), 0.02, dtype)
            p[f"layers.{l}.wo"] = _normal(rng, (d, d), out_std, dtype)
            p[f"layers.{l}.w1"] = _normal(rng, (d, 4 * d), 0.02, dtype)
            p[f"layers.{l}.w2"] = _normal(rng, (4 * d, d), out_std, dtype)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}
        self._hash = None

    # -- parameters / persistence -------------------------------------------
    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def to_checkpoint(self, meta: dict | None = None) -> ckpt_io.Checkpoint:
        return ckpt_io.Checkpoint(ckpt_io.ROLE_TARGET, self.config.as_tuple(),
                                  {k: t.data for k, t in self.params.items()}, meta or {})

    def save(self, path, meta: dict | None = None) -> None:
        raw = ckpt_io.save(path, self.to_checkpoint(meta))
        self._hash = sha256(raw)

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint, dtype=np.float32) -> TargetModel:
        if ck.role != ckpt_io.ROLE_TARGET:
            raise ckpt_io.CheckpointError("checkpoint does not hold a target model")
        model = cls(ModelConfig(*ck.config), dtype=dtype)
        model._load_tensors(ck.tensors)
        return model

    @classmethod
    def load(cls, path, dtype=np.float32) -> TargetModel:
        with open(path, "rb") as fh:
            raw = fh.read()
        model = cls.from_checkpoint(ckpt_io.loads(raw), dtype)
        model._hash = sha256(raw)
        return model

    def _load_tensors(self, tensors: dict) -> None:
        if set(tensors) != set(self.params):
            raise ckpt_io.CheckpointError("checkpoint tensor names do not match the model")
        for k, v in tensors.items():
            if v.shape != self.params[k].shape:
                raise ckpt_io.CheckpointError(f"shape mismatch for {k}")
            self.params[k] = Tensor(np.asarray(v, dtype=self.dtype), requires_grad=True)
        self._hash = None

    def checkpoint_hash(self) -> bytes:
        """sha256 of the checkpoint bytes this model was loaded from or saved to."""
        if self._hash is None:
            self._hash = sha256(ckpt_io.dumps(self.to_checkpoint()))
        return self._hash

    def astype(self, dtype) -> TargetModel:
        other = TargetModel.__new__(TargetModel)
        other.config = self.config
        other.dtype = np.dtype(dtype)
        other.params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        other._hash = self.checkpoint_hash()
        return other

    # -- forward ----------------------------------------------------------------
    def _block(self, x: Tensor, l: int, cos, sin, allowed, past=None):
        P, c = self.params, self.config
        h = rms_norm(x, P[f"layers.{l}.attn_norm"], NORM_EPS)
        q = rope(_split_heads(matmul(h, P[f"layers.{l}.wq"]), c.n_heads), cos, sin)
        k = rope(_split_heads(matmul(h, P[f"layers.{l}.wk"]), c.n_heads), cos, sin)
        v = _split_heads(matmul(h, P[f"layers.{l}.wv"]), c.n_heads)
        if past is not None:
            pk, pv, start = past
            n = k.shape[2]
            pk[:, start:start + n] = k.data[0]
            pv[:, start:start + n] = v.data[0]
            k = Tensor(pk[None, :, :start + n])
            v = Tensor(pv[None, :, :start + n])
        o = _attention(q, k, v, allowed)
        x = x + matmul(_merge_heads(o), P[f"layers.{l}.wo"])
        h = rms_norm(x, P[f"layers.{l}.mlp_norm"], NORM_EPS)
        return x + matmul(silu(matmul(h, P[f"layers.{l}.w1"])), P[f"layers.{l}.w2"])

    def head(self, states) -> Tensor:
        """LM head e^-1: final norm followed by the tied embedding transpose."""
        states = states if isinstance(states, Tensor) else Tensor(states)
        return matmul(rms_norm(states, self.params["final_norm"], NORM_EPS), self.params["embed"].T)

    def forward(self, tokens) -> tuple[Tensor, Tensor]:
        """Full causal forward over ``tokens[B, T]``; returns (states, logits)."""
        tokens = np.atleast_2d(np.asarray(tokens))
        T = tokens.shape[1]
        if T > self.config.t_max:
            raise ValueError(f"sequence length {T} exceeds t_max={self.config.t_max}")
        cos, sin = rope_tables(np.arange(1, T + 1), self.config.d_head, dtype=self.dtype)
        allowed = causal_mask(T)
        x = embedding(self.params["embed"], tokens)
        for l in range(self.config.n_layers):
            x = self._block(x, l, cos, sin, allowed)
        return x, self.head(x)

    def infer(self, tokens) -> tuple[np.ndarray, np.ndarray]:
        with no_grad():
            h, z = self.forward(tokens)
        return h.data, z.data

    def probs(self, states: np.ndarray) -> np.ndarray:
        with no_grad():
            return softmax_np(self.head(Tensor(np.asarray(states, dtype=self.dtype))).data)

    # -- incremental decoding ---------------------------------------------------
    def new_cache(self, capacity: int | None = None) -> TargetCache:
        c = self.config
        cap = capacity or c.t_max
        return TargetCache(np.zeros((c.n_layers, c.n_heads, cap, c.d_head), self.dtype),
                           np.zeros((c.n_layers, c.n_heads, cap, c.d_head), self.dtype))

    def forward_cached(self, cache: TargetCache, tokens) -> tuple[np.ndarray, np.ndarray]:
        """Feed ``tokens`` after the cached prefix; returns their states and logits."""
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        n, start = len(tokens), cache.length
        if start + n > min(self.config.t_max, cache.capacity):
            raise ValueError("sequence would overflow the target context")
        if n == 0:
            return (np.zeros((0, self.config.d_model), self.dtype),
                    np.zeros((0, self.config.vocab_size), self.dtype))
        pos = np.arange(start + 1, start + n + 1)
        cos, sin = rope_tables(pos, self.config.d_head, dtype=self.dtype)
        allowed = np.arange(1, start + n + 1)[None, :] <= pos[:, None]
        with no_grad():
            x = embedding(self.params["embed"], tokens[None, :])
            for l in range(self.config.n_layers):
                x = self._block(x, l, cos, sin, allowed, past=(cache.k[l], cache.v[l], start))
            z = self.head(x)
        cache.length = start + n
        return x.data[0], z.data[0]


class TargetCache:
    def __init__(self, k: np.ndarray, v: np.ndarray):
        self.k, self.v = k, v
        self.length = 0

    @property
    def capacity(self) -> int:
        return self.k.shape[2]

    def truncate(self, length: int) -> None:
        if not 0 <= length <= self.length:
            raise ValueError("cannot truncate beyond the cached length")
        self.length = length

    def copy(self) -> TargetCache:
        other = TargetCache(self.k.copy(), self.v.copy())
        other.length = self.length
        return other


DRAFT_PARAM_NAMES = ("wq", "wk", "wv", "wo", "w1", "w2", "q_norm", "kv_norm", "mlp_norm", "final_norm")


class DraftHead:
    """One cross-attention block plus MLP; queries are token embeddings, keys are states.

    The embedding table and LM head are borrowed from the target and stay frozen.
    """

    def __init__(self, config: ModelConfig, embed, final_norm=None, seed: int = 0,
                 dtype=np.float32, init_std: float = 0.02):
        self.config = config
        self.dtype = np.dtype(dtype)
        d = config.d_model
        rng = np.random.default_rng(seed)
        p = {name: _normal(rng, (d, d), init_std, dtype) for name in ("wq", "wk", "wv", "wo")}
        p["w1"] = _normal(rng, (d, 4 * d), init_std, dtype)
        p["w2"] = _normal(rng, (4 * d, d), init_std, dtype)
        for name in ("q_norm", "kv_norm", "mlp_norm"):
            p[name] = np.ones(d, dtype)
        p["final_norm"] = (np.ones(d, dtype) if final_norm is None
                           else np.array(final_norm, dtype=dtype))
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}
        self.embed = Tensor(np.asarray(embed.data if isinstance(embed, Tensor) else embed, dtype=dtype))

    @classmethod
    def for_target(cls, target: TargetModel, seed: int = 0, dtype=None, init_std: float = 0.02) -> DraftHead:
        dtype = dtype or target.dtype
        return cls(target.config, target.params["embed"].data, target.params["final_norm"].data,
                   seed=seed, dtype=dtype, init_std=init_std)

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def astype(self, dtype) -> DraftHead:
        other = DraftHead.__new__(DraftHead)
        other.config, other.dtype = self.config, np.dtype(dtype)
        other.params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        other.embed = Tensor(self.embed.data.astype(dtype))
        return other

    def to_checkpoint(self, meta: dict | None = None, extra: dict | None = None) -> ckpt_io.Checkpoint:
        tensors = {k: t.data for k, t in self.params.items()}
        tensors.update(extra or {})
        return ckpt_io.Checkpoint(ckpt_io.ROLE_DRAFT, self.config.as_tuple(), tensors, meta or {})

    def load_params(self, tensors: dict) -> None:
        for k in DRAFT_PARAM_NAMES:
            if k not in tensors:
                raise ckpt_io.CheckpointError(f"draft checkpoint lacks {k}")
            if tensors[k].shape != self.params[k].shape:
                raise ckpt_io.CheckpointError(f"shape mismatch for {k}")
            self.params[k] = Tensor(np.asarray(tensors[k], dtype=self.dtype), requires_grad=True)

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint, target: TargetModel, dtype=None) -> DraftHead:
        if ck.role != ckpt_io.ROLE_DRAFT:
            raise ckpt_io.CheckpointError("checkpoint does not hold a draft head")
        if tuple(ck.config) != target.config.as_tuple():
            raise ckpt_io.CheckpointError("draft checkpoint was trained for a different target config")
        head = cls.for_target(target, dtype=dtype)
        head.load_params(ck.tensors)
        return head

    # -- block pieces -------------------------------------------------------
    def project_kv(self, keys: Tensor, k_pos) -> tuple[Tensor, Tensor]:
        """Per-head key/value projections of states ``keys[B, Tk, d]`` at positions ``k_pos``."""
        P, H = self.params, self.config.n_heads
        cos, sin = rope_tables(k_pos, self.config.d_head, dtype=self.dtype)
        h = rms_norm(keys, P["kv_norm"], NORM_EPS)
        k = rope(_split_heads(_linear(h, P["wk"]), H), cos, sin)
        v = _split_heads(_linear(h, P["wv"]), H)
        return k, v

    def attend(self, q_tokens, q_pos, k: Tensor, v: Tensor, allowed) -> Tensor:
        """Draft states for query tokens ``q_tokens[B, Q]`` at positions ``q_pos``."""
        P, H = self.params, self.config.n_heads
        e = embedding(self.embed, np.asarray(q_tokens))
        cos, sin = rope_tables(q_pos, self.config.d_head, dtype=self.dtype)
        q = rope(_split_heads(_linear(rms_norm(e, P["q_norm"], NORM_EPS), P["wq"]), H), cos, sin)
        o = _attention(q, k, v, allowed)
        y = e + _linear(_merge_heads(o), P["wo"])
        return y + _linear(silu(_linear(rms_norm(y, P["mlp_norm"], NORM_EPS), P["w1"])), P["w2"])

    def block_forward(self, q_tokens, key_states, mask: np.ndarray, q_pos=None) -> Tensor:
        """Masked batch forward: ``mask[Q, Tk]`` says which key positions each query sees."""
        q_tokens = np.atleast_2d(np.asarray(q_tokens))
        if not isinstance(key_states, Tensor):
            key_states = Tensor(np.asarray(key_states, dtype=self.dtype))
        if key_states.ndim == 2:
            key_states = key_states.reshape(1, *key_states.shape)
        Q, Tk = q_tokens.shape[1], key_states.shape[1]
        if mask.shape != (Q, Tk):
            raise ValueError(f"mask shape {mask.shape} does not match queries x keys ({Q}, {Tk})")
        q_pos = np.arange(1, Q + 1) if q_pos is None else np.asarray(q_pos)
        k, v = self.project_kv(key_states, np.arange(1, Tk + 1))
        return self.attend(q_tokens, q_pos, k, v, mask)

    def logits(self, states) -> Tensor:
        states = states if isinstance(states, Tensor) else Tensor(np.asarray(states, dtype=self.dtype))
        return matmul(rms_norm(states, self.params["final_norm"], NORM_EPS), self.embed.T)

    # -- incremental drafting -------------------------------------------------
    def new_cache(self, capacity: int) -> KVCache:
        return KVCache(self, capacity)

    def step(self, cache: KVCache, token: int, pos: int, allow_stale: bool = False):
        """Draft state and next-token distribution for ``token`` at ``pos``; cache is not mutated."""
        if cache.head is not self:
            raise ValueError("cache belongs to a different draft head")
        if cache.filled > pos - 1 or (not allow_stale and cache.filled != pos - 1):
            raise RuntimeError(f"cache holds {cache.filled} entries, query at position {pos}")
        n = cache.filled
        with no_grad():
            k = Tensor(cache.k[None, :, :n])
            v = Tensor(cache.v[None, :, :n])
            h = self.attend(np.array([[token]]), np.array([pos]), k, v, np.ones((1, n), dtype=bool))
            z = self.logits(h)
        return h.data[0, 0], softmax_np(z.data[0, 0].astype(np.float64))


class KVCache:
    """Per-head draft keys/values; the first ``true_len`` entries come from target states."""

    def __init__(self, head: DraftHead, capacity: int):
        c = head.config
        self.head = head
        self.k = np.zeros((c.n_heads, capacity, c.d_head), head.dtype)
        self.v = np.zeros((c.n_heads, capacity, c.d_head), head.dtype)
        self.filled = 0
        self.true_len = 0

    @property
    def capacity(self) -> int:
        return self.k.shape[1]

    def append(self, states, is_true: bool) -> None:
        states = np.asarray(states, dtype=self.head.dtype).reshape(-1, self.head.config.d_model)
        n = len(states)
        if self.filled + n > self.capacity:
            raise OverflowError("draft KV cache capacity exceeded")
        if is_true and self.filled != self.true_len:
            raise RuntimeError("true states cannot follow draft entries; reset first")
        if n == 0:
            return
        pos = np.arange(self.filled + 1, self.filled + n + 1)
        with no_grad():
            k, v = self.head.project_kv(Tensor(states[None]), pos)
        self.k[:, self.filled:self.filled + n] = k.data[0]
        self.v[:, self.filled:self.filled + n] = v.data[0]
        self.filled += n
        if is_true:
            self.true_len = self.filled

    def reset_to_true(self, new_true_states=None) -> None:
        """Drop draft entries, then append freshly verified true states."""
        self.filled = self.true_len
        if new_true_states is not None:
            self.append(new_true_states, is_true=True)

    def copy(self) -> KVCache:
        other = KVCache.__new__(KVCache)
        other.head, other.k, other.v = self.head, self.k.copy(), self.v.copy()
        other.filled, other.true_len = self.filled, self.true_len
        return other
