"""Decoder-only transformer with per-layer hidden-state capture, plus the
deep linear network used for curvature experiments.

Architecture is LLaMA-flavored: pre-RMSNorm blocks, rotary position
embeddings, optional grouped-query attention, no biases, weight-tied output
head by default.
"""

from __future__ import annotations

import hashlib
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from . import tensor as T
from .tensor import Tensor

ACTIVATIONS = ("relu", "gelu", "silu", "swiglu")


@dataclass
class ModelConfig:
    vocab_size: int
    hidden_size: int
    intermediate_size: int
    num_layers: int
    num_heads: int
    num_kv_heads: int = 0  # 0 means "same as num_heads" (full attention)
    activation: str = "swiglu"
    max_seq_len: int = 128
    tied_head: bool = True
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.num_kv_heads == 0:
            self.num_kv_heads = self.num_heads
        self.validate()

    def validate(self):
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_size % self.num_heads:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if self.num_heads % self.num_kv_heads:
            raise ConfigError(
                f"num_heads {self.num_heads} not divisible by num_kv_heads {self.num_kv_heads}")
        if (self.hidden_size // self.num_heads) % 2:
            raise ConfigError("head dim must be even for rotary embeddings")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "hidden_size": self.hidden_size,
            "intermediate_size": self.intermediate_size,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "num_kv_heads": self.num_kv_heads,
            "activation": self.activation,
            "max_seq_len": self.max_seq_len,
            "tied_head": self.tied_head,
            "rope_base": self.rope_base,
        }


def parameter_count(config: ModelConfig) -> int:
    """Analytic parameter count for a config (checked against enumeration)."""
    d = config.hidden_size
    inter = config.intermediate_size
    kv_dim = config.num_kv_heads * config.head_dim
    per_layer = d + d * d + 2 * d * kv_dim + d * d + d  # norms + wq/wk/wv/wo
    if config.activation == "swiglu":
        per_layer += 3 * d * inter
    else:
        per_layer += 2 * d * inter
    total = config.vocab_size * d + config.num_layers * per_layer + d
    if not config.tied_head:
        total += d * config.vocab_size
    return total


def _stream_rng(seed: int, name: str) -> np.random.Generator:
    """Named, collision-resistant substream of the run seed."""
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(name.encode())]))


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations, via resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class TransformerModel:
    """Config plus an ordered name->Tensor parameter map."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params
        self._rope_cache = {}

    def named_parameters(self) -> dict:
        return self.params

    def parameter_arrays(self):
        return {name: t.data for name, t in self.params.items()}

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def set_requires_grad(self, flag: bool):
        for t in self.params.values():
            t.requires_grad = flag

    def params_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def _rope_tables(self, seq_len: int):
        key = seq_len
        cached = self._rope_cache.get(key)
        if cached is None:
            half = self.config.head_dim // 2
            freqs = self.config.rope_base ** (-np.arange(half) * 2.0 / self.config.head_dim)
            angles = np.arange(seq_len)[:, None] * freqs[None, :]
            # shaped (seq, 1, half) so they broadcast over the head axis of
            # the pre-transpose (batch, seq, heads, head_dim) layout
            cached = (np.cos(angles)[:, None, :], np.sin(angles)[:, None, :])
            self._rope_cache[key] = cached
        return cached

    def forward_with_hidden(self, tokens: np.ndarray):
        """Run the model on a (batch, seq) int array.

        Returns (logits Tensor of (batch, seq, vocab), hidden list of
        num_layers+1 Tensors; hidden[0] is the embedding output and hidden[k]
        the post-block activation of layer k).
        """
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        batch, seq = tokens.shape
        if seq > cfg.max_seq_len:
            raise ShapeError(f"sequence length {seq} exceeds max_seq_len {cfg.max_seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            flat = np.argmax((tokens < 0) | (tokens >= cfg.vocab_size))
            b, t = divmod(int(flat), seq)
            raise ShapeError(
                f"token id {tokens[b, t]} out of range at batch {b} position {t} "
                f"(vocab_size {cfg.vocab_size})")

        p = self.params
        x = T.gather_rows(p["embed"], tokens)
        hidden = [x]
        for layer in range(cfg.num_layers):
            x = self._block(x, layer, batch, seq)
            hidden.append(x)

        final = T.rms_norm(x, p["final_norm"])
        head = T.transpose(p["embed"]) if cfg.tied_head else p["head"]
        logits = T.matmul(final, head)
        return logits, hidden

    def _block(self, x, layer: int, batch: int, seq: int):
        cfg = self.config
        p = self.params
        heads, kv_heads, hd = cfg.num_heads, cfg.num_kv_heads, cfg.head_dim
        cos, sin = self._rope_tables(seq)
        pref = f"layers.{layer}."

        xn = T.rms_norm(x, p[pref + "attn_norm"])
        q = T.matmul(xn, p[pref + "wq"])
        k = T.matmul(xn, p[pref + "wk"])
        v = T.matmul(xn, p[pref + "wv"])
        # rotate positions while the layout is still contiguous, then bring
        # heads forward for the batched attention matmuls
        q = T.rope(T.reshape(q, (batch, seq, heads, hd)), cos, sin)
        k = T.rope(T.reshape(k, (batch, seq, kv_heads, hd)), cos, sin)
        q = T.transpose(q, (0, 2, 1, 3))
        k = T.transpose(k, (0, 2, 1, 3))
        v = T.transpose(T.reshape(v, (batch, seq, kv_heads, hd)), (0, 2, 1, 3))
        if kv_heads != heads:
            rep = heads // kv_heads
            k = T.repeat_heads(k, rep)
            v = T.repeat_heads(v, rep)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        probs = T.masked_causal_softmax(scores)
        ctx = T.matmul(probs, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (batch, seq, cfg.hidden_size))
        x = T.add(x, T.matmul(ctx, p[pref + "wo"]))

        xn = T.rms_norm(x, p[pref + "ffn_norm"])
        if cfg.activation == "swiglu":
            gate = T.silu(T.matmul(xn, p[pref + "w_gate"]))
            up = T.matmul(xn, p[pref + "w_up"])
            ff = T.matmul(T.mul(gate, up), p[pref + "w_down"])
        else:
            act = {"relu": T.relu, "gelu": T.gelu, "silu": T.silu}[cfg.activation]
            ff = T.matmul(act(T.matmul(xn, p[pref + "w1"])), p[pref + "w2"])
        return T.add(x, ff)

    def recompute_layer(self, h_prev: np.ndarray, layer: int) -> np.ndarray:
        """Re-run one block from a stored hidden state (chain verification)."""
        h_prev = np.asarray(h_prev)
        batch, seq = h_prev.shape[0], h_prev.shape[1]
        with T.no_grad():
            return self._block(Tensor(h_prev), layer, batch, seq).data

    def greedy_decode(self, prefix: np.ndarray, steps: int) -> np.ndarray:
        """Debug-only greedy continuation of a 1-D token prefix."""
        out = list(np.asarray(prefix).reshape(-1))
        for _ in range(steps):
            ctx = np.asarray(out[-self.config.max_seq_len:], dtype=np.int64)[None, :]
            with T.no_grad():
                logits, _ = self.forward_with_hidden(ctx)
            out.append(int(np.argmax(logits.data[0, -1])))
        return np.asarray(out, dtype=np.int64)


def init_params(config: ModelConfig, seed: int) -> TransformerModel:
    """Deterministic initialization: truncated normal std 0.02, residual
    output projections scaled down by 1/sqrt(2 * num_layers)."""
    rng = _stream_rng(seed, "init")
    d = config.hidden_size
    inter = config.intermediate_size
    kv_dim = config.num_kv_heads * config.head_dim
    std = 0.02
    resid_std = std / math.sqrt(2.0 * config.num_layers)

    params: dict = {}

    def add(name, shape, s=std):
        params[name] = Tensor(_trunc_normal(rng, shape, s), requires_grad=True)

    add("embed", (config.vocab_size, d))
    for layer in range(config.num_layers):
        pref = f"layers.{layer}."
        params[pref + "attn_norm"] = Tensor(np.ones(d), requires_grad=True)
        add(pref + "wq", (d, d))
        add(pref + "wk", (d, kv_dim))
        add(pref + "wv", (d, kv_dim))
        add(pref + "wo", (d, d), resid_std)
        params[pref + "ffn_norm"] = Tensor(np.ones(d), requires_grad=True)
        if config.activation == "swiglu":
            add(pref + "w_gate", (d, inter))
            add(pref + "w_up", (d, inter))
            add(pref + "w_down", (inter, d), resid_std)
        else:
            add(pref + "w1", (d, inter))
            add(pref + "w2", (inter, d), resid_std)
    params["final_norm"] = Tensor(np.ones(d), requires_grad=True)
    if not config.tied_head:
        add("head", (d, config.vocab_size))
    return TransformerModel(config, params)


@dataclass
class DeepLinearNet:
    """Bias-free, activation-free chain h^(l+1) = W^(l) h^(l)."""

    weights: list = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.weights[0].shape[0]

    @classmethod
    def random(cls, depth: int, dim: int, seed: int, scale: float = 1.0) -> "DeepLinearNet":
        rng = _stream_rng(seed, "deep_linear")
        return cls([scale * rng.standard_normal((dim, dim)) for _ in range(depth)])

    @classmethod
    def identity(cls, depth: int, dim: int) -> "DeepLinearNet":
        return cls([np.eye(dim) for _ in range(depth)])

    def flatten(self) -> np.ndarray:
        return np.concatenate([w.reshape(-1) for w in self.weights])

    @classmethod
    def from_flat(cls, theta: np.ndarray, depth: int, dim: int) -> "DeepLinearNet":
        if theta.size != depth * dim * dim:
            raise ShapeError(f"flat vector of {theta.size} entries cannot fill "
                             f"{depth} layers of {dim}x{dim}")
        chunks = theta.reshape(depth, dim, dim)
        return cls([chunks[i].copy() for i in range(depth)])


def deep_linear_forward(net: DeepLinearNet, x: np.ndarray) -> list:
    """All intermediate states [h^(0)=x, h^(1), ..., h^(L)]."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.dim,):
        raise ShapeError(f"input of shape {x.shape} does not match net dim {net.dim}")
    states = [x]
    for w in net.weights:
        states.append(w @ states[-1])
    return states
