"""Executable curvature checks for deep linear networks: the alignment loss
at depth k has zero gradient for all layers at or above k, its dense Hessian
is block-zero outside the first k layer blocks, and its Frobenius norm is
bounded by k times the largest live-block norm.

All second derivatives come from central finite differences so the checks
are independent of the reverse-mode engine they corroborate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, NonFiniteError, ShapeError
from .metrics import write_csv
from .models import DeepLinearNet, deep_linear_forward
from .tensor import Tensor

DENSE_HESSIAN_GUARD = 400
DEFAULT_FD_STEP = 1e-4


def alignment_loss(net: DeepLinearNet, k: int, x: np.ndarray,
                   target: np.ndarray) -> float:
    """Negative cosine similarity between h^(k) and a fixed target vector."""
    h = deep_linear_forward(net, x)[k]
    nh = np.linalg.norm(h)
    nt = np.linalg.norm(target)
    return float(-(h @ target) / (max(nh, T.L2_NORM_EPS) * max(nt, T.L2_NORM_EPS)))


def _loss_on_flat(theta: np.ndarray, depth: int, dim: int, k: int,
                  x: np.ndarray, target: np.ndarray) -> float:
    return alignment_loss(DeepLinearNet.from_flat(theta, depth, dim), k, x, target)


def numeric_hessian(loss_fn, params: np.ndarray, fd_step: float) -> np.ndarray:
    """Dense central-difference Hessian, symmetrized as (H + H^T)/2.

    Off-diagonal entries use the four-point cross formula; diagonal entries
    the three-point second difference.
    """
    theta = np.asarray(params, dtype=np.float64).copy()
    n = theta.size
    h = float(fd_step)
    hess = np.empty((n, n))
    f0 = loss_fn(theta)
    if not np.isfinite(f0):
        raise NonFiniteError("numeric_hessian: loss not finite at base point")

    def at(*adjustments) -> float:
        probe = theta.copy()
        for idx, delta in adjustments:
            probe[idx] += delta
        val = loss_fn(probe)
        if not np.isfinite(val):
            raise NonFiniteError(
                f"numeric_hessian: non-finite probe at offsets {adjustments}")
        return val

    for i in range(n):
        hess[i, i] = (at((i, h)) - 2.0 * f0 + at((i, -h))) / (h * h)
        for j in range(i + 1, n):
            val = (at((i, h), (j, h)) - at((i, h), (j, -h))
                   - at((i, -h), (j, h)) + at((i, -h), (j, -h))) / (4.0 * h * h)
            hess[i, j] = val
            hess[j, i] = val
    return 0.5 * (hess + hess.T)


def verify_gradient_vanishing(net: DeepLinearNet, k: int, x: np.ndarray,
                              target: np.ndarray) -> float:
    """Max |dL/dW^(j)| over weight layers j >= k via reverse-mode autodiff.

    Layers at or above the alignment depth are off the computational path,
    so the expected value is zero. An empty layer set returns 0.
    """
    depth = net.depth
    if not 1 <= k <= depth:
        raise ConfigError(f"alignment depth k={k} out of range 1..{depth}")
    weights = [Tensor(w, requires_grad=True) for w in net.weights]
    with T.Tape():
        h = Tensor(np.asarray(x, dtype=np.float64))
        for w in weights:
            h = T.matmul(w, h)
            if not h.requires_grad:
                raise ShapeError("deep linear forward must stay on the tape")
        # rebuild up to h^(k) only for the loss; full forward above keeps all
        # weights registered as leaves
        hk = Tensor(np.asarray(x, dtype=np.float64))
        for w in weights[:k]:
            hk = T.matmul(w, hk)
        cos = T.tsum(T.mul(T.l2_normalize_rows(hk),
                           T.l2_normalize_rows(Tensor(np.asarray(target, dtype=np.float64)))))
        loss = T.scale(cos, -1.0)
        grads = T.backward(loss)
    checked = [np.abs(grads[w]).max() for w in weights[k:]]
    return float(max(checked)) if checked else 0.0


@dataclass
class HessianReport:
    k: int
    depth: int
    dim: int
    fd_step: float
    block_norms: np.ndarray      # (depth, depth) Frobenius norm per layer block
    forbidden_max: float         # max |entry| over blocks with i >= k or j >= k
    total_fro: float             # Frobenius norm of the whole Hessian
    live_fro: float              # accumulated from the k x k live blocks
    max_live_block: float        # the constant C of the k*C bound

    @property
    def bound(self) -> float:
        return self.k * self.max_live_block

    def rows(self) -> list:
        out = []
        for i in range(self.depth):
            for j in range(self.depth):
                live = i < self.k and j < self.k
                out.append([self.k, i, j, self.block_norms[i, j], int(live)])
        return out

    def claims(self) -> dict:
        return {
            "forbidden_blocks_zero": bool(self.forbidden_max < 10.0 * self.fd_step ** 2),
            "block_accumulation_matches_total": bool(
                abs(self.total_fro - self.live_fro)
                <= 1e-8 * max(1.0, self.total_fro)),
            "frobenius_bound_holds": bool(self.total_fro <= self.bound + 1e-12),
        }


def verify_block_structure(net: DeepLinearNet, k: int, x: np.ndarray,
                           target: np.ndarray,
                           fd_step: float = DEFAULT_FD_STEP) -> HessianReport:
    """Dense finite-difference Hessian of the depth-k alignment loss, sliced
    into layer blocks."""
    depth, dim = net.depth, net.dim
    if not 1 <= k <= depth:
        raise ConfigError(f"alignment depth k={k} out of range 1..{depth}")
    n_params = depth * dim * dim
    if n_params > DENSE_HESSIAN_GUARD:
        raise ConfigError(
            f"{n_params} parameters exceeds the dense-Hessian guard of "
            f"{DENSE_HESSIAN_GUARD}; use smaller depth/dim")
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    hess = numeric_hessian(
        lambda th: _loss_on_flat(th, depth, dim, k, x, target),
        net.flatten(), fd_step)

    b = dim * dim
    block_norms = np.empty((depth, depth))
    forbidden_max = 0.0
    live_sq = 0.0
    for i in range(depth):
        for j in range(depth):
            block = hess[i * b:(i + 1) * b, j * b:(j + 1) * b]
            block_norms[i, j] = np.linalg.norm(block)
            if i >= k or j >= k:
                forbidden_max = max(forbidden_max, float(np.abs(block).max()))
            else:
                live_sq += float(np.sum(block * block))
    return HessianReport(
        k=k, depth=depth, dim=dim, fd_step=fd_step,
        block_norms=block_norms,
        forbidden_max=forbidden_max,
        total_fro=float(np.linalg.norm(hess)),
        live_fro=float(np.sqrt(live_sq)),
        max_live_block=float(block_norms[:k, :k].max()),
    )


def noise_floor_test(net: DeepLinearNet, k: int, x, target,
                     fd_step: float = DEFAULT_FD_STEP) -> dict:
    """Step-halving check that forbidden-block residue behaves like
    finite-difference noise (shrinks at least 2x, or is already exact zero)."""
    coarse = verify_block_structure(net, k, x, target, fd_step)
    fine = verify_block_structure(net, k, x, target, fd_step / 2.0)
    passed = fine.forbidden_max <= coarse.forbidden_max / 2.0 + 1e-15
    return {
        "fd_step": fd_step,
        "forbidden_max_coarse": coarse.forbidden_max,
        "forbidden_max_fine": fine.forbidden_max,
        "passed": bool(passed),
    }


@dataclass
class SweepResult:
    rows: list                    # (k, mean total_fro, bound k * C_uniform)
    reports: list
    noise: list
    uniform_c: float
    all_passed: bool

    def summary(self) -> dict:
        return {
            "uniform_block_bound_c": self.uniform_c,
            "per_k": [
                {"k": k, "mean_hessian_fro": fro, "bound": bound}
                for k, fro, bound in self.rows
            ],
            "claims": {
                "forbidden_blocks_zero": all(
                    r.claims()["forbidden_blocks_zero"] for r in self.reports),
                "block_accumulation_matches_total": all(
                    r.claims()["block_accumulation_matches_total"] for r in self.reports),
                "frobenius_bound_holds": all(
                    r.claims()["frobenius_bound_holds"] for r in self.reports),
                "noise_floor": all(n["passed"] for n in self.noise),
            },
            "passed": self.all_passed,
        }


def curvature_sweep(depth: int, dim: int, k_values, trials: int, seed: int = 0,
                    fd_step: float = DEFAULT_FD_STEP,
                    weight_scale: float = 1.0) -> SweepResult:
    """Random-net sweep over alignment depths.

    The bound column uses the sweep-wide uniform constant C (max live-block
    norm over every trial and depth), which makes k*C nondecreasing in k by
    construction; each report additionally checks its own per-net bound.
    """
    k_values = sorted(set(int(k) for k in k_values))
    for k in k_values:
        if not 1 <= k <= depth:
            raise ConfigError(f"k={k} out of range 1..{depth}")
    rng = np.random.default_rng(seed)
    reports = []
    noise = []
    per_k: dict = {k: [] for k in k_values}
    for trial in range(trials):
        net = DeepLinearNet(
            [weight_scale * rng.standard_normal((dim, dim)) for _ in range(depth)])
        x = rng.standard_normal(dim)
        target = rng.standard_normal(dim)
        for k in k_values:
            report = verify_block_structure(net, k, x, target, fd_step)
            reports.append(report)
            per_k[k].append(report)
        noise.append(noise_floor_test(net, k_values[0], x, target, fd_step))

    uniform_c = max(r.max_live_block for r in reports)
    rows = []
    ok = True
    for k in k_values:
        fro = float(np.mean([r.total_fro for r in per_k[k]]))
        rows.append((k, fro, k * uniform_c))
        for r in per_k[k]:
            claims = r.claims()
            ok = ok and all(claims.values())
            ok = ok and r.total_fro <= k * uniform_c + 1e-12
    ok = ok and all(n["passed"] for n in noise)
    return SweepResult(rows, reports, noise, uniform_c, ok)


def emit_sweep(result: SweepResult, out_dir):
    """CSV tables plus a JSON pass/fail summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "curvature_sweep.csv",
              ["k", "mean_hessian_fro", "bound_k_times_c"],
              [[k, f"{fro:.12g}", f"{bound:.12g}"] for k, fro, bound in result.rows])
    block_rows = []
    for r in result.reports:
        block_rows.extend(
            [row[0], row[1], row[2], f"{row[3]:.12g}", row[4]] for row in r.rows())
    write_csv(out_dir / "hessian_blocks.csv",
              ["k", "block_i", "block_j", "frobenius_norm", "live"], block_rows)
    summary = result.summary()
    summary["tolerances"] = {
        "forbidden_block_max_abs": 10.0 * DEFAULT_FD_STEP ** 2,
        "block_accumulation_rel": 1e-8,
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary
