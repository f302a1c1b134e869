"""Corpora: byte-level tokenization, synthetic Markov sources with a known
entropy rate, deterministic batching, and the LETTOK01 token-file format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

TOKEN_MAGIC = b"LETTOK01"
MAX_MARKOV_STATES = 4096


@dataclass
class Corpus:
    tokens: np.ndarray
    vocab_size: int
    provenance: str = "synthetic"  # "file" or "synthetic"

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1 or self.tokens.size < 2:
            raise DataError("corpus needs a flat token sequence of length >= 2")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.vocab_size):
            raise DataError(f"token ids exceed vocab_size {self.vocab_size}")

    def __len__(self):
        return self.tokens.size

    def split(self, train_fraction: float):
        """Contiguous train/test split; both halves keep the vocab."""
        if not 0.0 < train_fraction < 1.0:
            raise DataError(f"train fraction must be in (0, 1), got {train_fraction}")
        cut = int(round(self.tokens.size * train_fraction))
        if cut < 2 or self.tokens.size - cut < 2:
            raise DataError("split leaves a side with fewer than 2 tokens")
        return (Corpus(self.tokens[:cut], self.vocab_size, self.provenance),
                Corpus(self.tokens[cut:], self.vocab_size, self.provenance))


@dataclass
class TokenBatch:
    inputs: np.ndarray   # (batch, seq) int
    targets: np.ndarray  # inputs shifted forward by one position


@dataclass
class MarkovSpec:
    """Order-k Markov chain over a finite alphabet.

    `table` has one row per state (alphabet**order rows, lexicographic state
    order) and one column per next symbol; rows must sum to 1.
    """

    order: int
    table: np.ndarray
    seed: int = 0
    _stationary: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.order < 1:
            raise DataError(f"order must be >= 1, got {self.order}")
        if self.table.ndim != 2:
            raise DataError("transition table must be 2-D")
        alphabet = self.table.shape[1]
        if alphabet < 2:
            raise DataError("alphabet needs at least 2 symbols")
        if self.table.shape[0] != alphabet ** self.order:
            raise DataError(
                f"table has {self.table.shape[0]} rows; expected "
                f"{alphabet}**{self.order} = {alphabet ** self.order}")
        if self.table.shape[0] > MAX_MARKOV_STATES:
            raise DataError(f"state space above {MAX_MARKOV_STATES} is unsupported")
        if (self.table < 0).any():
            raise DataError("transition probabilities must be nonnegative")
        rowsums = self.table.sum(axis=1)
        if np.abs(rowsums - 1.0).max() > 1e-9:
            bad = int(np.argmax(np.abs(rowsums - 1.0)))
            raise DataError(f"transition row {bad} sums to {rowsums[bad]!r}, not 1")

    @property
    def alphabet_size(self) -> int:
        return self.table.shape[1]

    @property
    def num_states(self) -> int:
        return self.table.shape[0]

    def state_transition_matrix(self) -> np.ndarray:
        """Chain over full states: (a1..ak) --t--> (a2..ak, t)."""
        n, a = self.num_states, self.alphabet_size
        big = np.zeros((n, n))
        for s in range(n):
            suffix = (s % (a ** (self.order - 1))) * a if self.order > 1 else 0
            for t in range(a):
                big[s, suffix + t if self.order > 1 else t] += self.table[s, t]
        return big

    def stationary_distribution(self) -> np.ndarray:
        """Left fixed point of the state chain (assumes irreducibility);
        solved as a least-squares system so periodic chains work too."""
        if self._stationary is None:
            big = self.state_transition_matrix()
            n = big.shape[0]
            a = np.vstack([big.T - np.eye(n), np.ones((1, n))])
            b = np.zeros(n + 1)
            b[-1] = 1.0
            pi, *_ = np.linalg.lstsq(a, b, rcond=None)
            pi = np.clip(pi, 0.0, None)
            self._stationary = pi / pi.sum()
        return self._stationary

    def entropy_rate(self) -> float:
        """Nats per token under the stationary distribution."""
        pi = self.stationary_distribution()
        rows = self.table
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(rows > 0, rows * np.log(rows), 0.0)
        return float(-(pi * plogp.sum(axis=1)).sum())

    @classmethod
    def uniform(cls, alphabet_size: int, seed: int = 0) -> "MarkovSpec":
        table = np.full((alphabet_size, alphabet_size), 1.0 / alphabet_size)
        return cls(order=1, table=table, seed=seed)

    @classmethod
    def cycle(cls, alphabet_size: int, seed: int = 0) -> "MarkovSpec":
        table = np.zeros((alphabet_size, alphabet_size))
        for s in range(alphabet_size):
            table[s, (s + 1) % alphabet_size] = 1.0
        return cls(order=1, table=table, seed=seed)


def gen_markov_corpus(spec: MarkovSpec, length: int) -> Corpus:
    """Sample a token sequence; deterministic given spec.seed. The initial
    state is drawn from the stationary distribution."""
    if length < spec.order + 1:
        raise DataError(f"length {length} too short for order {spec.order}")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed & 0xFFFFFFFF, 0x6D61726B]))
    a = spec.alphabet_size
    state = int(rng.choice(spec.num_states, p=spec.stationary_distribution()))

    # peel the initial state into its symbols (most significant first)
    prefix = []
    s = state
    for _ in range(spec.order):
        prefix.append(s % a)
        s //= a
    out = np.empty(length, dtype=np.int64)
    out[:spec.order] = prefix[::-1]

    cum = np.cumsum(spec.table, axis=1)
    cum[:, -1] = 1.0  # guard against accumulated rounding
    draws = rng.random(length - spec.order)
    suffix_mod = a ** (spec.order - 1)
    row = cum[state]
    for i in range(length - spec.order):
        t = int(np.searchsorted(row, draws[i], side="right"))
        out[spec.order + i] = t
        state = (state % suffix_mod) * a + t if spec.order > 1 else t
        row = cum[state]
    return Corpus(out, vocab_size=a, provenance="synthetic")


def tokenize_bytes(data: bytes) -> Corpus:
    """Byte-level tokenization: ids are raw byte values, vocab is 256."""
    if not data:
        raise DataError("cannot tokenize an empty byte stream")
    return Corpus(np.frombuffer(data, dtype=np.uint8).astype(np.int64),
                  vocab_size=256, provenance="file")


def detokenize(corpus: Corpus) -> bytes:
    if corpus.vocab_size != 256:
        raise DataError("detokenize is only defined for byte-level corpora")
    return corpus.tokens.astype(np.uint8).tobytes()


def num_batches_per_epoch(corpus_len: int, batch_size: int, seq_len: int) -> int:
    return (corpus_len - 1) // (batch_size * seq_len)


def _epoch_window_order(num_used: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x73687566, epoch]))
    return rng.permutation(num_used)


def batch_at(corpus: Corpus, batch_size: int, seq_len: int, seed: int,
             epoch: int, index: int) -> TokenBatch:
    """The index-th batch of the given epoch; the full (seed, epoch, index)
    addressing is what makes checkpoint resume exact."""
    nb = num_batches_per_epoch(len(corpus), batch_size, seq_len)
    if nb < 1:
        raise DataError(
            f"corpus of {len(corpus)} tokens is too short for one "
            f"{batch_size}x{seq_len} batch")
    if not 0 <= index < nb:
        raise DataError(f"batch index {index} out of range 0..{nb - 1}")
    order = _epoch_window_order(nb * batch_size, seed, epoch)
    windows = order[index * batch_size:(index + 1) * batch_size]
    inputs = np.empty((batch_size, seq_len), dtype=np.int64)
    targets = np.empty((batch_size, seq_len), dtype=np.int64)
    toks = corpus.tokens
    for row, w in enumerate(windows):
        start = int(w) * seq_len
        inputs[row] = toks[start:start + seq_len]
        targets[row] = toks[start + 1:start + seq_len + 1]
    return TokenBatch(inputs, targets)


def batches(corpus: Corpus, batch_size: int, seq_len: int, seed: int,
            start_step: int = 0):
    """Infinite deterministic stream of TokenBatch. Windows are
    non-overlapping contiguous spans; each epoch covers the same leading
    span of the corpus in a seed-shuffled order, dropping the partial tail."""
    nb = num_batches_per_epoch(len(corpus), batch_size, seq_len)
    if nb < 1:
        raise DataError(
            f"corpus of {len(corpus)} tokens is too short for one "
            f"{batch_size}x{seq_len} batch")
    step = start_step
    while True:
        yield batch_at(corpus, batch_size, seq_len, seed, step // nb, step % nb)
        step += 1


def write_token_file(path, corpus: Corpus):
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(TOKEN_MAGIC)
        fh.write(struct.pack("<I", corpus.vocab_size))
        fh.write(corpus.tokens.astype("<u4").tobytes())


def read_token_file(path) -> Corpus:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:8] != TOKEN_MAGIC:
        raise DataError(f"{path}: not a {TOKEN_MAGIC.decode()} token file")
    vocab_size = struct.unpack("<I", blob[8:12])[0]
    ids = np.frombuffer(blob[12:], dtype="<u4").astype(np.int64)
    return Corpus(ids, vocab_size=vocab_size, provenance="file")


def load_corpus(path) -> Corpus:
    """Token file if it carries the magic header, raw bytes otherwise."""
    blob = Path(path).read_bytes()
    if blob[:8] == TOKEN_MAGIC:
        return read_token_file(path)
    return tokenize_bytes(blob)
