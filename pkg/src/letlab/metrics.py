"""Evaluation and run-log analysis: held-out perplexity, cosine-similarity
trajectories, and aligned multi-run comparison tables emitted as CSV.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Corpus
from .errors import DataError
from .models import TransformerModel


def perplexity(model: TransformerModel, corpus: Corpus, seq_len: int,
               batch_size: int) -> float:
    """exp of the mean per-token NLL over all full, non-overlapping windows
    of the corpus, taken in corpus order (no shuffling, so the number is
    independent of any training run)."""
    toks = corpus.tokens
    num_windows = (len(toks) - 1) // seq_len
    if num_windows < 1:
        raise DataError(
            f"corpus of {len(toks)} tokens has no full window of length {seq_len}")
    total_nll = 0.0
    total_tokens = 0
    for start in range(0, num_windows, batch_size):
        rows = range(start, min(start + batch_size, num_windows))
        inputs = np.stack([toks[w * seq_len:(w + 1) * seq_len] for w in rows])
        targets = np.stack([toks[w * seq_len + 1:(w + 1) * seq_len + 1] for w in rows])
        with T.no_grad():
            logits, _ = model.forward_with_hidden(inputs)
        z = logits.data
        m = z.max(axis=-1, keepdims=True)
        lse = m[..., 0] + np.log(np.sum(np.exp(z - m), axis=-1))
        picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
        total_nll += float(np.sum(lse - picked))
        total_tokens += targets.size
    return float(np.exp(total_nll / total_tokens))


def read_metrics(path) -> list:
    """Parse a JSON-lines metrics log into a list of dicts."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def _as_records(log) -> list:
    if isinstance(log, (str, Path)):
        return read_metrics(log)
    return list(log)


def similarity_trajectory(log, window: int = 50) -> list:
    """Sliding-window means of cos_sim over the records that carry it.

    Returns (step, mean over the `window` records ending at that step); the
    first entry therefore summarizes the first full window.
    """
    records = [r for r in _as_records(log) if r.get("cos_sim") is not None]
    if window < 1:
        raise DataError(f"window must be >= 1, got {window}")
    if window > len(records):
        raise DataError(
            f"window {window} exceeds the {len(records)} cos_sim records available")
    values = np.array([r["cos_sim"] for r in records])
    steps = [r["step"] for r in records]
    csum = np.concatenate(([0.0], np.cumsum(values)))
    out = []
    for i in range(window - 1, len(values)):
        out.append((steps[i], float((csum[i + 1] - csum[i + 1 - window]) / window)))
    return out


def extract_series(log, fieldname: str) -> list:
    """(step, value) pairs for records carrying the field, in log order."""
    return [(r["step"], r[fieldname]) for r in _as_records(log)
            if r.get(fieldname) is not None]


def compare_runs(logs, fieldname: str, names=None) -> tuple:
    """Align one field across runs on a shared step grid.

    Returns (header, rows): header is ["step", name...]; each row is
    [step, value...]. Raises if the step grids differ, naming the first
    divergence.
    """
    logs = list(logs)
    if names is None:
        names = [f"run{i}" for i in range(len(logs))]
    series = [extract_series(log, fieldname) for log in logs]
    if not series or not series[0]:
        raise DataError(f"no records with field {fieldname!r}")
    base = [s for s, _ in series[0]]
    for name, ser in zip(names[1:], series[1:]):
        steps = [s for s, _ in ser]
        if steps != base:
            for i, (a, b) in enumerate(zip(base + [None], steps + [None])):
                if a != b:
                    raise DataError(
                        f"step grids diverge for {fieldname!r}: run {names[0]!r} has "
                        f"{a} where run {name!r} has {b} (entry {i})")
    header = ["step"] + list(names)
    rows = []
    for i, step in enumerate(base):
        rows.append([step] + [ser[i][1] for ser in series])
    return header, rows


def merge_runs_by_step(logs, fieldname: str, names=None) -> tuple:
    """Outer-join variant of compare_runs: rows span the union of steps and
    absent values are emitted as empty cells (used when grids legitimately
    differ, e.g. alignment stop-step sweeps)."""
    logs = list(logs)
    if names is None:
        names = [f"run{i}" for i in range(len(logs))]
    series = [dict(extract_series(log, fieldname)) for log in logs]
    all_steps = sorted(set().union(*[set(s) for s in series])) if series else []
    header = ["step"] + list(names)
    rows = [[step] + [ser.get(step, "") for ser in series] for step in all_steps]
    return header, rows


def write_csv(path, header, rows):
    """UTF-8, LF-terminated CSV with a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
