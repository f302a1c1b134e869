"""Training loop for all four modes (baseline, let, rkd, kd_then_standard),
AdamW with global-norm clipping, warmup+cosine learning-rate schedule, and
LETCKPT1 checkpoints that support bitwise-exact resume.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .alignment import (AlignmentSpec, PROJ_LOSSES, cosine_similarity_metric,
                        interpolate_tensor, lambda_at, select_layers)
from .data import Corpus, TokenBatch, batch_at, num_batches_per_epoch
from .errors import CheckpointError, ConfigError, DivergenceError, NonFiniteError
from .metrics import perplexity
from .models import ModelConfig, TransformerModel, init_params
from .tensor import Tensor

MODES = ("baseline", "let", "rkd", "kd_then_standard")
CKPT_MAGIC = b"LETCKPT1"


@dataclass
class TrainConfig:
    mode: str
    total_steps: int
    batch_size: int
    seq_len: int
    peak_lr: float
    seed: int = 0
    alignment: AlignmentSpec | None = None
    n_kd: int = 0
    warmup_fraction: float = 0.10
    final_lr_fraction: float = 0.10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    eval_interval: int = 500
    rkd_temperature: float = 1.0
    rkd_weight: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie strictly between 0 and 1")
        if self.mode == "let" and self.alignment is None:
            raise ConfigError("mode 'let' requires an alignment spec")
        if self.mode == "kd_then_standard" and not 0 <= self.n_kd <= self.total_steps:
            raise ConfigError("kd_then_standard needs 0 <= n_kd <= total_steps")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "total_steps": self.total_steps,
            "batch_size": self.batch_size,
            "seq_len": self.seq_len,
            "peak_lr": self.peak_lr,
            "seed": self.seed,
            "n_kd": self.n_kd,
            "warmup_fraction": self.warmup_fraction,
            "final_lr_fraction": self.final_lr_fraction,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "weight_decay": self.weight_decay,
            "grad_clip_norm": self.grad_clip_norm,
            "eval_interval": self.eval_interval,
            "rkd_temperature": self.rkd_temperature,
            "rkd_weight": self.rkd_weight,
        }
        out["alignment"] = self.alignment.to_dict() if self.alignment else None
        return out


# ---------------------------------------------------------------------------
# losses


def loss_nll(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean per-token negative log-likelihood of the target ids."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ConfigError(f"targets {targets.shape} vs logits {logits.shape}")
    logp = T.log_softmax(logits)
    return T.scale(T.tmean(T.take_along_last(logp, targets)), -1.0)


def loss_rkd(student_logits: Tensor, teacher_logits: np.ndarray,
             temperature: float = 1.0) -> Tensor:
    """Mean per-token cross-entropy from the (constant) teacher distribution
    to the student distribution, both softened by the temperature."""
    t = np.asarray(teacher_logits)
    if t.shape != student_logits.shape:
        raise ConfigError(f"teacher logits {t.shape} vs student {student_logits.shape}")
    z = t / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    teacher_probs = e / e.sum(axis=-1, keepdims=True)
    s_logp = T.log_softmax(T.scale(student_logits, 1.0 / temperature))
    per_pos = T.tsum(T.mul(Tensor(teacher_probs), s_logp), axis=-1)
    return T.scale(T.tmean(per_pos), -1.0)


def loss_total(nll: Tensor, proj: Tensor | None, s: int, spec: AlignmentSpec) -> Tensor:
    """nll + lambda(s) * proj; collapses to nll exactly once lambda hits 0."""
    lam = lambda_at(s, spec.lambda0, spec.s_stop)
    if lam == 0.0 or proj is None:
        return nll
    return T.add(nll, T.scale(proj, lam))


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear ramp 0 -> peak over the warmup span, then cosine decay to
    final_lr_fraction * peak at total_steps."""
    if step < 0 or step > config.total_steps:
        raise ConfigError(f"step {step} outside 0..{config.total_steps}")
    warmup = max(1, int(round(config.warmup_fraction * config.total_steps)))
    peak = config.peak_lr
    if step <= warmup:
        return peak * step / warmup
    final = config.final_lr_fraction * peak
    span = config.total_steps - warmup
    progress = (step - warmup) / span
    return final + (peak - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_model(cls, model: TransformerModel) -> "OptimizerState":
        state = cls()
        for name, p in model.named_parameters().items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so the global L2 norm is at most
    max_norm; returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        flat = g.reshape(-1)
        total += float(np.dot(flat, flat))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def adamw_update(params: dict, grads: dict, opt: OptimizerState, lr: float,
                 config: TrainConfig):
    """One decoupled-weight-decay Adam step over the named parameter map.

    Decay is applied to the parameter before the moment-based step; moments
    are bias-corrected with the post-increment step count.
    """
    b1, b2, eps, wd = (config.adam_beta1, config.adam_beta2,
                       config.adam_eps, config.weight_decay)
    opt.step += 1
    t = opt.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if wd != 0.0:
            p.data -= (lr * wd) * p.data
        # reuse g as scratch for the bias-corrected step
        np.divide(v, c2, out=g)
        np.sqrt(g, out=g)
        g += eps
        np.divide(m, g, out=g)
        g *= lr / c1
        p.data -= g


# ---------------------------------------------------------------------------
# run state and the per-step update


@dataclass
class RunState:
    config: TrainConfig
    model: TransformerModel
    teacher: TransformerModel | None
    optimizer: OptimizerState
    step: int = 0
    teacher_layer: int = 0
    target_layer: int = 0
    teacher_forward_count: int = 0

    @classmethod
    def create(cls, config: TrainConfig, model: TransformerModel,
               teacher: TransformerModel | None) -> "RunState":
        if config.mode != "baseline" and teacher is None:
            raise ConfigError(f"mode {config.mode!r} requires a teacher model")
        state = cls(config, model, teacher, OptimizerState.for_model(model))
        if config.mode == "let":
            spec = config.alignment
            state.teacher_layer, state.target_layer = select_layers(
                spec.strategy, teacher.config.num_layers,
                model.config.num_layers, spec.early_layer)
        if teacher is not None:
            teacher.set_requires_grad(False)
        return state


def _named_grads(model: TransformerModel, grads: dict, step: int) -> dict:
    out = {}
    seen = set()
    for name, p in model.named_parameters().items():
        g = grads[p]
        if not np.isfinite(g.sum()) and not np.isfinite(g).all():
            raise DivergenceError(
                f"non-finite gradient for {name!r} at step {step}",
                step=step, parameter=name)
        if id(g) in seen:
            # two leaves can share one backward buffer (e.g. through add);
            # clipping and the update mutate in place, so split them
            g = g.copy()
        seen.add(id(g))
        out[name] = g
    return out


def train_step(state: RunState, batch: TokenBatch) -> dict:
    """Run one optimizer step and return the metrics record for it."""
    config = state.config
    s = state.step
    lam = 0.0
    loss_proj_val = None
    loss_kd_val = None
    cos_val = None
    lr = lr_at(s + 1, config)

    kd_phase = (config.mode == "rkd"
                or (config.mode == "kd_then_standard" and s < config.n_kd))
    align_phase = False
    if config.mode == "let":
        spec = config.alignment
        lam = lambda_at(s, spec.lambda0, spec.s_stop)
        align_phase = lam > 0.0

    try:
        with T.Tape():
            logits, hidden = state.model.forward_with_hidden(batch.inputs)
            nll = loss_nll(logits, batch.targets)
            if align_phase:
                spec = config.alignment
                with T.no_grad():
                    _, t_hidden = state.teacher.forward_with_hidden(batch.inputs)
                state.teacher_forward_count += 1
                h_t = t_hidden[state.teacher_layer].data
                h_m = interpolate_tensor(hidden[state.target_layer], h_t.shape[-1])
                proj = PROJ_LOSSES[spec.loss_kind](h_m, Tensor(h_t), spec.token_reduction)
                total = loss_total(nll, proj, s, spec)
                loss_proj_val = proj.item()
                cos_val = cosine_similarity_metric(h_m.data, h_t)
            elif kd_phase:
                with T.no_grad():
                    t_logits, _ = state.teacher.forward_with_hidden(batch.inputs)
                state.teacher_forward_count += 1
                kd = loss_rkd(logits, t_logits.data, config.rkd_temperature)
                total = T.add(nll, T.scale(kd, config.rkd_weight)) \
                    if config.rkd_weight != 1.0 else T.add(nll, kd)
                loss_kd_val = kd.item()
            else:
                total = nll
            grads = T.backward(total)
    except NonFiniteError as exc:
        raise DivergenceError(f"non-finite loss at step {s}: {exc}", step=s) from exc

    named = _named_grads(state.model, grads, s)
    clip_global_norm(named, config.grad_clip_norm)
    adamw_update(state.model.named_parameters(), named, state.optimizer, lr, config)
    state.step = s + 1

    return {
        "step": s + 1,
        "lr": lr,
        "lambda": lam,
        "loss_nll": nll.item(),
        "loss_proj": loss_proj_val,
        "loss_kd": loss_kd_val,
        "loss_total": total.item(),
        "cos_sim": cos_val,
    }


# ---------------------------------------------------------------------------
# checkpoints (LETCKPT1)


def save_checkpoint(path, model: TransformerModel, optimizer: OptimizerState | None,
                    step: int, config: TrainConfig | None = None,
                    data_cursor: dict | None = None, role: str = "target"):
    """Magic, length-prefixed JSON header, then raw little-endian float64
    arrays in manifest order."""
    arrays = []
    manifest = []
    for name, p in model.named_parameters().items():
        manifest.append([f"param.{name}", list(p.data.shape)])
        arrays.append(p.data)
    if optimizer is not None:
        for name in model.named_parameters():
            manifest.append([f"adam_m.{name}", list(optimizer.m[name].shape)])
            arrays.append(optimizer.m[name])
        for name in model.named_parameters():
            manifest.append([f"adam_v.{name}", list(optimizer.v[name].shape)])
            arrays.append(optimizer.v[name])
    header = {
        "role": role,
        "step": int(step),
        "adam_step": int(optimizer.step) if optimizer is not None else 0,
        "model_config": model.config.to_dict(),
        "config": config.to_dict() if config is not None else None,
        "data_cursor": data_cursor,
        "manifest": manifest,
    }
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path):
    """Returns (header dict, {manifest name: float64 array})."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    out = {}
    for name, shape in header["manifest"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at array {name!r}")
        out[name] = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, out


def model_from_checkpoint(path) -> TransformerModel:
    header, arrays = load_checkpoint(path)
    config = ModelConfig(**header["model_config"])
    model = init_params(config, seed=0)
    for name, p in model.named_parameters().items():
        key = f"param.{name}"
        if key not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        if tuple(arrays[key].shape) != p.data.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}")
        p.data = arrays[key]
    return model


def _restore_optimizer(model: TransformerModel, arrays: dict, adam_step: int) -> OptimizerState:
    opt = OptimizerState(step=adam_step)
    for name in model.named_parameters():
        opt.m[name] = arrays[f"adam_m.{name}"]
        opt.v[name] = arrays[f"adam_v.{name}"]
    return opt


# ---------------------------------------------------------------------------
# full run orchestration


@dataclass
class RunResult:
    model: TransformerModel
    metrics_path: Path
    checkpoint_path: Path
    final_eval_ppl: float | None = None


def _metrics_line(record: dict) -> str:
    return json.dumps(record, separators=(",", ":")) + "\n"


def _truncate_metrics(path: Path, step: int):
    if not path.exists():
        return
    kept = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["step"] <= step:
                kept.append(line)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.writelines(kept)


def run(config: TrainConfig, model_config: ModelConfig, train_corpus: Corpus,
        eval_corpus: Corpus | None, out_dir,
        teacher: TransformerModel | None = None, resume: bool = False,
        role: str = "target", stop_at_ppl: float | None = None) -> RunResult:
    """Train to total_steps, appending one metrics record per step, an eval
    record every eval_interval, and checkpoints at each eval boundary plus
    completion. With resume=True, continues from the newest checkpoint and
    reproduces the uninterrupted trajectory bitwise. stop_at_ppl ends the run
    early once an evaluation reaches the target (schedule spans unchanged)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    final_path = out_dir / "checkpoint_final.bin"
    nb = num_batches_per_epoch(len(train_corpus), config.batch_size, config.seq_len)

    start_step = 0
    model = None
    optimizer = None
    if resume:
        candidates = sorted(out_dir.glob("checkpoint_step_*.bin"))
        if final_path.exists():
            candidates.append(final_path)
        if candidates:
            newest = max(candidates, key=lambda p: load_checkpoint(p)[0]["step"])
            header, arrays = load_checkpoint(newest)
            model = model_from_checkpoint(newest)
            optimizer = _restore_optimizer(model, arrays, header["adam_step"])
            start_step = header["step"]
            _truncate_metrics(metrics_path, start_step)
    if model is None:
        model = init_params(model_config, seed=config.seed)
        optimizer = OptimizerState.for_model(model)
        if metrics_path.exists():
            metrics_path.unlink()

    state = RunState.create(config, model, teacher)
    state.optimizer = optimizer
    state.step = start_step

    last_ppl = None
    log = open(metrics_path, "a", encoding="utf-8", newline="")
    try:
        for s in range(start_step, config.total_steps):
            batch = batch_at(train_corpus, config.batch_size, config.seq_len,
                             config.seed, s // nb, s % nb)
            record = train_step(state, batch)
            log.write(_metrics_line(record))
            done = s + 1
            if done % config.eval_interval == 0 or done == config.total_steps:
                if eval_corpus is not None:
                    last_ppl = perplexity(model, eval_corpus,
                                          config.seq_len, config.batch_size)
                    log.write(_metrics_line({"step": done, "test_ppl": last_ppl}))
                log.flush()
                cursor = {"epoch": done // nb, "index": done % nb}
                stopping = (stop_at_ppl is not None and last_ppl is not None
                            and last_ppl <= stop_at_ppl)
                ckpt = (final_path if done == config.total_steps or stopping
                        else out_dir / f"checkpoint_step_{done:08d}.bin")
                save_checkpoint(ckpt, model, state.optimizer, done,
                                config=config, data_cursor=cursor, role=role)
                if stopping:
                    break
    finally:
        log.close()
    return RunResult(model, metrics_path, final_path, last_ppl)
