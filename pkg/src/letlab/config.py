"""Run-config files: a single JSON document drives data generation, teacher
pretraining, training, and ablation grids. Unknown keys are rejected so grid
typos fail before any compute."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .alignment import AlignmentSpec, LayerPairStrategy
from .data import MarkovSpec, gen_markov_corpus, load_corpus
from .errors import ConfigError
from .models import ModelConfig
from .trainer import TrainConfig

_MODEL_KEYS = {"vocab_size", "hidden_size", "intermediate_size", "num_layers",
               "num_heads", "num_kv_heads", "activation", "max_seq_len",
               "tied_head", "rope_base"}
_DATA_KEYS = {"source", "length", "train_fraction", "markov",
              "train_path", "test_path"}
_MARKOV_KEYS = {"order", "table", "seed"}
_TRAIN_KEYS = {"mode", "total_steps", "batch_size", "seq_len", "peak_lr",
               "seed", "n_kd", "warmup_fraction", "final_lr_fraction",
               "adam_beta1", "adam_beta2", "adam_eps", "weight_decay",
               "grad_clip_norm", "eval_interval", "rkd_temperature",
               "rkd_weight"}
_ALIGN_KEYS = {"strategy", "loss_kind", "lambda0", "s_stop",
               "token_reduction", "early_layer"}
_TOP_KEYS = {"seed", "output_dir", "model_m", "model_t", "data", "train",
             "alignment", "teacher_checkpoint", "teacher_train"}


def _reject_unknown(section: str, obj: dict, allowed):
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(
            f"unknown key(s) in {section}: {sorted(unknown)}; "
            f"allowed: {sorted(allowed)}")


def _require(section: str, obj: dict, key: str):
    if key not in obj:
        raise ConfigError(f"{section} is missing required key {key!r}")
    return obj[key]


class RunConfig:
    """Validated, fully materialized view of a config file."""

    def __init__(self, raw: dict, base_dir: Path | None = None):
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        _reject_unknown("config", raw, _TOP_KEYS)
        self.base_dir = Path(base_dir) if base_dir else Path.cwd()
        self.seed = int(raw.get("seed", 0))

        out = os.environ.get("LET_LAB_OUT") or _require("config", raw, "output_dir")
        self.output_dir = Path(out)
        if not self.output_dir.is_absolute():
            self.output_dir = self.base_dir / self.output_dir

        self.model_m = self._model(raw, "model_m", required=True)
        self.model_t = self._model(raw, "model_t", required=False)

        self.data = dict(_require("config", raw, "data"))
        _reject_unknown("data", self.data, _DATA_KEYS)
        source = _require("data", self.data, "source")
        if source not in ("markov", "file"):
            raise ConfigError(f"data.source must be 'markov' or 'file', got {source!r}")
        if source == "markov":
            markov = dict(_require("data", self.data, "markov"))
            _reject_unknown("data.markov", markov, _MARKOV_KEYS)
            self.markov = MarkovSpec(
                order=int(markov.get("order", 1)),
                table=np.asarray(_require("data.markov", markov, "table"), dtype=np.float64),
                seed=int(markov["seed"]) if markov.get("seed") is not None else self.seed,
            )
            self.data_length = int(self.data.get("length", 200_000))
            self.train_fraction = float(self.data.get("train_fraction", 0.9))
        else:
            self.markov = None
            self.data_length = None
            self.train_fraction = None
            _require("data", self.data, "train_path")
            _require("data", self.data, "test_path")

        train_raw = dict(_require("config", raw, "train"))
        _reject_unknown("train", train_raw, _TRAIN_KEYS)
        self.train_raw = train_raw

        self.alignment_raw = raw.get("alignment")
        if self.alignment_raw is not None:
            _reject_unknown("alignment", self.alignment_raw, _ALIGN_KEYS)

        self.teacher_checkpoint = raw.get("teacher_checkpoint")
        self.teacher_train_raw = raw.get("teacher_train")
        if self.teacher_train_raw is not None:
            _reject_unknown("teacher_train", self.teacher_train_raw, _TRAIN_KEYS)

    @staticmethod
    def _model(raw: dict, key: str, required: bool) -> ModelConfig | None:
        obj = raw.get(key)
        if obj is None:
            if required:
                raise ConfigError(f"config is missing required section {key!r}")
            return None
        _reject_unknown(key, obj, _MODEL_KEYS)
        try:
            return ModelConfig(**obj)
        except TypeError as exc:
            raise ConfigError(f"{key}: {exc}") from exc

    # -- materialized pieces ------------------------------------------------

    def alignment_spec(self) -> AlignmentSpec | None:
        if self.alignment_raw is None:
            return None
        a = self.alignment_raw
        return AlignmentSpec(
            strategy=LayerPairStrategy.parse(a.get("strategy", "L2E")),
            loss_kind=a.get("loss_kind", "cosine"),
            lambda0=float(a.get("lambda0", 0.1)),
            s_stop=int(a.get("s_stop", 1500)),
            token_reduction=a.get("token_reduction", "mean"),
            early_layer=int(a.get("early_layer", 3)),
        )

    def train_config(self, mode: str | None = None, seed: int | None = None,
                     overrides: dict | None = None) -> TrainConfig:
        raw = dict(self.train_raw)
        if overrides:
            raw.update(overrides)
        if mode is not None:
            raw["mode"] = mode
        raw.setdefault("mode", "baseline")
        raw.setdefault("seed", self.seed)
        if seed is not None:
            raw["seed"] = seed
        for key in ("total_steps", "batch_size", "seq_len", "peak_lr"):
            if key not in raw:
                raise ConfigError(f"train is missing required key {key!r}")
        alignment = self.alignment_spec() if raw["mode"] == "let" else None
        try:
            return TrainConfig(alignment=alignment, **raw)
        except TypeError as exc:
            raise ConfigError(f"train: {exc}") from exc

    def teacher_train_config(self, steps: int | None = None) -> TrainConfig:
        raw = dict(self.train_raw)
        if self.teacher_train_raw:
            raw.update(self.teacher_train_raw)
        raw["mode"] = "baseline"
        raw.setdefault("seed", self.seed)
        if steps is not None:
            raw["total_steps"] = steps
        try:
            return TrainConfig(**raw)
        except TypeError as exc:
            raise ConfigError(f"teacher_train: {exc}") from exc

    def corpora(self) -> tuple:
        """Resolve the data block to (train_corpus, test_corpus)."""
        if self.markov is not None:
            corpus = gen_markov_corpus(self.markov, self.data_length)
            return corpus.split(self.train_fraction)
        train = load_corpus(self._resolve(self.data["train_path"]))
        test = load_corpus(self._resolve(self.data["test_path"]))
        return train, test

    def _resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def resolved(self, train_config: TrainConfig | None = None) -> dict:
        """Fully materialized echo, sufficient to reproduce a run."""
        out = {
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            "model_m": self.model_m.to_dict(),
            "model_t": self.model_t.to_dict() if self.model_t else None,
            "data": self._data_echo(),
            "train": (train_config or self.train_config()).to_dict(),
            "teacher_checkpoint": self.teacher_checkpoint,
        }
        return out

    def _data_echo(self) -> dict:
        if self.markov is not None:
            return {
                "source": "markov",
                "length": self.data_length,
                "train_fraction": self.train_fraction,
                "markov": {
                    "order": self.markov.order,
                    "table": self.markov.table.tolist(),
                    "seed": self.markov.seed,
                },
                "entropy_rate": self.markov.entropy_rate(),
            }
        return {"source": "file",
                "train_path": str(self.data["train_path"]),
                "test_path": str(self.data["test_path"])}


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig(raw, base_dir=path.parent)


def desk_defaults(total_steps: int = 3000, s_stop: int | None = None) -> dict:
    """The shipped desk-scale configuration: an 8-layer d=128 target, a
    4-layer d=64 teacher, 16x64 batches, and schedule spans scaled to keep
    the reference ratios (stop step ~10%, warmup ~10% of the run)."""
    if s_stop is None:
        s_stop = max(1, total_steps // 10)
    return {
        "seed": 0,
        "output_dir": "runs/desk",
        "model_m": {
            "vocab_size": 16, "hidden_size": 128, "intermediate_size": 256,
            "num_layers": 8, "num_heads": 2, "activation": "swiglu",
            "max_seq_len": 128,
        },
        "model_t": {
            "vocab_size": 16, "hidden_size": 64, "intermediate_size": 128,
            "num_layers": 4, "num_heads": 2, "num_kv_heads": 1,
            "activation": "silu", "max_seq_len": 128,
        },
        "data": {
            "source": "markov",
            "length": 200_000,
            "train_fraction": 0.9,
            "markov": {"order": 1, "table": MarkovSpec.uniform(16).table.tolist()},
        },
        "train": {
            "mode": "let",
            "total_steps": total_steps,
            "batch_size": 16,
            "seq_len": 64,
            "peak_lr": 1e-3,
            "eval_interval": max(1, total_steps // 10),
        },
        "alignment": {
            "strategy": "L2E",
            "loss_kind": "cosine",
            "lambda0": 0.1,
            "s_stop": s_stop,
            "early_layer": 3,
        },
    }
