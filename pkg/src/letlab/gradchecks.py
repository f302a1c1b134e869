"""Finite-difference gradient audits for the primitive set, every training
loss, and the full transformer, backing the gradcheck CLI command."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .alignment import (AlignmentSpec, LayerPairStrategy, proj_loss_cosine,
                        proj_loss_logsum)
from .models import ModelConfig, init_params
from .tensor import Tensor
from .trainer import loss_nll, loss_rkd, loss_total

THRESHOLD = 1e-4


def _away_from_zero(rng, shape, low=0.2, high=1.5):
    # keeps relu/max kinks and log domains clear of the FD step
    return rng.uniform(low, high, size=shape) * np.where(rng.random(shape) < 0.5, -1.0, 1.0)


def check_primitives(num_seeds: int = 20) -> list:
    """Worst relative FD error for each named primitive over random seeds."""
    results = []

    def scalarize(out):
        return T.tmean(T.mul(out, out)) if out.data.size != 1 else out

    def run(name, build):
        worst = 0.0
        for seed in range(num_seeds):
            rng = np.random.default_rng(seed)
            params, fn = build(rng)
            worst = max(worst, T.grad_check(lambda ps: scalarize(fn(ps)), params))
        results.append((name, worst))

    run("matmul", lambda rng: (
        [Tensor(rng.standard_normal((3, 4)), requires_grad=True),
         Tensor(rng.standard_normal((4, 2)), requires_grad=True)],
        lambda ps: T.primitive_forward("matmul", ps)))
    run("add", lambda rng: (
        [Tensor(rng.standard_normal((3, 4)), requires_grad=True),
         Tensor(rng.standard_normal((3, 4)), requires_grad=True)],
        lambda ps: T.primitive_forward("add", ps)))
    run("mul", lambda rng: (
        [Tensor(rng.standard_normal((3, 4)), requires_grad=True),
         Tensor(rng.standard_normal((3, 4)), requires_grad=True)],
        lambda ps: T.primitive_forward("mul", ps)))
    run("scale", lambda rng: (
        [Tensor(rng.standard_normal((3, 4)), requires_grad=True)],
        lambda ps: T.primitive_forward("scale", ps, c=-1.7)))
    run("relu", lambda rng: (
        [Tensor(_away_from_zero(rng, (3, 4)), requires_grad=True)],
        lambda ps: T.primitive_forward("relu", ps)))
    run("gelu", lambda rng: (
        [Tensor(rng.standard_normal((3, 4)), requires_grad=True)],
        lambda ps: T.primitive_forward("gelu", ps)))
    run("silu", lambda rng: (
        [Tensor(rng.standard_normal((3, 4)), requires_grad=True)],
        lambda ps: T.primitive_forward("silu", ps)))
    run("rms_norm", lambda rng: (
        [Tensor(rng.standard_normal((3, 5)), requires_grad=True),
         Tensor(rng.standard_normal(5), requires_grad=True)],
        lambda ps: T.primitive_forward("rms_norm", ps)))
    run("l2_normalize_rows", lambda rng: (
        [Tensor(_away_from_zero(rng, (3, 5)), requires_grad=True)],
        lambda ps: T.primitive_forward("l2_normalize_rows", ps)))
    run("row_softmax", lambda rng: (
        [Tensor(rng.standard_normal((3, 5)), requires_grad=True)],
        lambda ps: T.primitive_forward("row_softmax", ps)))
    run("log", lambda rng: (
        [Tensor(rng.uniform(0.3, 2.0, (3, 4)), requires_grad=True)],
        lambda ps: T.primitive_forward("log", ps)))
    run("sum", lambda rng: (
        [Tensor(rng.standard_normal((3, 4)), requires_grad=True)],
        lambda ps: T.primitive_forward("sum", ps)))
    run("mean", lambda rng: (
        [Tensor(rng.standard_normal((3, 4)), requires_grad=True)],
        lambda ps: T.primitive_forward("mean", ps, axis=-1)))
    run("gather_rows", lambda rng: (
        [Tensor(rng.standard_normal((6, 3)), requires_grad=True)],
        lambda ps, idx=rng.integers(0, 6, size=(2, 4)):
        T.primitive_forward("gather_rows", [ps[0]], indices=idx)))
    run("transpose", lambda rng: (
        [Tensor(rng.standard_normal((3, 4)), requires_grad=True)],
        lambda ps: T.primitive_forward("transpose", ps)))
    run("concat", lambda rng: (
        [Tensor(rng.standard_normal((2, 3)), requires_grad=True),
         Tensor(rng.standard_normal((2, 3)), requires_grad=True)],
        lambda ps: T.primitive_forward("concat", ps, axis=1)))
    return results


def check_losses(num_seeds: int = 20) -> list:
    """Worst relative FD error for the NLL, distillation, projection, and
    composite losses, differentiating the model-side inputs."""
    batch, seq, vocab, dim = 2, 3, 5, 4
    spec = AlignmentSpec(strategy=LayerPairStrategy.parse("L2E"),
                         lambda0=0.1, s_stop=1500)
    results = []

    def run(name, build):
        worst = 0.0
        for seed in range(num_seeds):
            rng = np.random.default_rng(seed)
            params, fn = build(rng)
            worst = max(worst, T.grad_check(fn, params))
        results.append((name, worst))

    def nll_case(rng):
        logits = Tensor(rng.standard_normal((batch, seq, vocab)), requires_grad=True)
        targets = rng.integers(0, vocab, size=(batch, seq))
        return [logits], lambda ps: loss_nll(ps[0], targets)

    def rkd_case(rng):
        logits = Tensor(rng.standard_normal((batch, seq, vocab)), requires_grad=True)
        teacher = rng.standard_normal((batch, seq, vocab))
        return [logits], lambda ps: loss_rkd(ps[0], teacher, temperature=1.0)

    def cosine_case(rng):
        h_m = Tensor(rng.standard_normal((batch, seq, dim)), requires_grad=True)
        h_t = Tensor(rng.standard_normal((batch, seq, dim)))
        return [h_m], lambda ps: proj_loss_cosine(ps[0], h_t)

    def logsum_case(rng):
        h_m = Tensor(rng.standard_normal((batch, seq, dim)), requires_grad=True)
        h_t = Tensor(rng.standard_normal((batch, seq, dim)))
        return [h_m], lambda ps: proj_loss_logsum(ps[0], h_t)

    def total_case(rng):
        logits = Tensor(rng.standard_normal((batch, seq, vocab)), requires_grad=True)
        h_m = Tensor(rng.standard_normal((batch, seq, dim)), requires_grad=True)
        h_t = Tensor(rng.standard_normal((batch, seq, dim)))
        targets = rng.integers(0, vocab, size=(batch, seq))

        def fn(ps):
            nll = loss_nll(ps[0], targets)
            proj = proj_loss_cosine(ps[1], h_t)
            return loss_total(nll, proj, s=300, spec=spec)

        return [logits, h_m], fn

    run("nll", nll_case)
    run("rkd", rkd_case)
    run("proj_cosine", cosine_case)
    run("total_composite", total_case)
    run("proj_logsum", logsum_case)
    return results


def check_model(num_seeds: int = 2) -> list:
    """Full-parameter FD audit of a small transformer under the NLL loss."""
    config = ModelConfig(vocab_size=7, hidden_size=8, intermediate_size=12,
                         num_layers=2, num_heads=2, num_kv_heads=1,
                         activation="swiglu", max_seq_len=16)
    results = []
    worst = 0.0
    for seed in range(num_seeds):
        rng = np.random.default_rng(seed)
        model = init_params(config, seed=seed)
        tokens = rng.integers(0, config.vocab_size, size=(2, 4))
        targets = rng.integers(0, config.vocab_size, size=(2, 4))

        def fn(ps):
            logits, _ = model.forward_with_hidden(tokens)
            return loss_nll(logits, targets)

        worst = max(worst, T.grad_check(fn, list(model.params.values())))
    results.append(("transformer_nll", worst))
    return results


SCOPES = {
    "primitives": check_primitives,
    "losses": check_losses,
    "model": check_model,
}
