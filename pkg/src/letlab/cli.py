"""Command-line front end: data generation, teacher pretraining, training in
all modes, ablation grids, curvature verification, and gradient audits.

Exit codes: 0 success, 1 check failure, 2 missing prerequisite, 3 numerical
divergence, 64 usage error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .data import write_token_file
from .errors import ConfigError, DataError, DivergenceError, LetLabError
from .gradchecks import SCOPES, THRESHOLD
from .metrics import (compare_runs, merge_runs_by_step, perplexity,
                      read_metrics, write_csv)
from .models import TransformerModel, init_params
from .theory import DENSE_HESSIAN_GUARD, curvature_sweep, emit_sweep
from .trainer import model_from_checkpoint, run, save_checkpoint

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_MISSING_PREREQ = 2
EXIT_DIVERGED = 3
EXIT_USAGE = 64

ABLATION_SUITES = ("layers", "lambda", "sstop", "layer-select")
LAMBDA_GRID = (0.01, 0.1, 0.3, 1.0, 3.0)
LAYER_GRID = ("L2E", "L2M", "L2L", "M2E", "M2M", "M2L")
LAYER_SELECT_GRID = ("L1-F1", "L1-F3", "L1-F5", "L3-F3")
SSTOP_FRACTIONS = ((0.10, "sstop_10pct"), (0.20, "sstop_20pct"))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _usage_error(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_USAGE


def _write_json(path: Path, obj: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _teacher_path(cfg: RunConfig) -> Path:
    if cfg.teacher_checkpoint:
        p = Path(cfg.teacher_checkpoint)
        return p if p.is_absolute() else cfg.base_dir / p
    return cfg.output_dir / "teacher" / "checkpoint_final.bin"


def _load_teacher(cfg: RunConfig) -> TransformerModel | None:
    path = _teacher_path(cfg)
    if not path.exists():
        return None
    return model_from_checkpoint(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if cfg.markov is None:
        return _usage_error("gen-data requires data.source == 'markov'")
    train, test = cfg.corpora()
    data_dir = cfg.output_dir / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    write_token_file(data_dir / "train.tok", train)
    write_token_file(data_dir / "test.tok", test)
    manifest = {
        "vocab_size": train.vocab_size,
        "train_tokens": len(train),
        "test_tokens": len(test),
        "markov_seed": cfg.markov.seed,
        "markov_order": cfg.markov.order,
        "entropy_rate_nats": cfg.markov.entropy_rate(),
    }
    _write_json(data_dir / "manifest.json", manifest)
    print(f"wrote {len(train)} train and {len(test)} test tokens to {data_dir}")
    return EXIT_OK


def cmd_pretrain_teacher(args) -> int:
    cfg = load_config(args.config)
    if cfg.model_t is None:
        print("error: config has no model_t section", file=sys.stderr)
        return EXIT_MISSING_PREREQ
    out_dir = cfg.output_dir / "teacher"
    if args.steps == 0:
        # checkpoint the freshly initialized teacher, no training
        model = init_params(cfg.model_t, seed=cfg.seed)
        ckpt = out_dir / "checkpoint_final.bin"
        save_checkpoint(ckpt, model, None, step=0, role="teacher")
        print(f"teacher checkpoint (untrained): {ckpt}")
        return EXIT_OK
    train_c, test_c = cfg.corpora()
    if cfg.model_t.vocab_size != train_c.vocab_size:
        raise ConfigError(
            f"model_t.vocab_size {cfg.model_t.vocab_size} does not match "
            f"corpus vocab {train_c.vocab_size}")
    tc = cfg.teacher_train_config(steps=args.steps)
    _write_json(out_dir / "config.json", {
        "model": cfg.model_t.to_dict(), "train": tc.to_dict()})
    result = run(tc, cfg.model_t, train_c, test_c, out_dir,
                 resume=args.resume, role="teacher")
    print(f"teacher checkpoint: {result.checkpoint_path}"
          + (f" (test ppl {result.final_eval_ppl:.4f})"
             if result.final_eval_ppl else ""))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tc = cfg.train_config(mode=args.mode, seed=args.seed)
    train_c, test_c = cfg.corpora()
    if cfg.model_m.vocab_size != train_c.vocab_size:
        raise ConfigError(
            f"model_m.vocab_size {cfg.model_m.vocab_size} does not match "
            f"corpus vocab {train_c.vocab_size}")
    teacher = None
    if tc.mode != "baseline":
        teacher = _load_teacher(cfg)
        if teacher is None:
            print(f"error: mode {tc.mode!r} needs a teacher checkpoint at "
                  f"{_teacher_path(cfg)} (run pretrain-teacher first)",
                  file=sys.stderr)
            return EXIT_MISSING_PREREQ
    run_id = args.run_id or tc.mode
    out_dir = cfg.output_dir / "runs" / run_id
    _write_json(out_dir / "config.json", cfg.resolved(tc))
    try:
        result = run(tc, cfg.model_m, train_c, test_c, out_dir,
                     teacher=teacher, resume=args.resume)
    except DivergenceError as exc:
        print(f"error: diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    ppl = f", test ppl {result.final_eval_ppl:.4f}" if result.final_eval_ppl else ""
    print(f"run {run_id}: {tc.total_steps} steps{ppl}; metrics at {result.metrics_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        print(f"error: checkpoint {ckpt} not found", file=sys.stderr)
        return EXIT_MISSING_PREREQ
    model = model_from_checkpoint(ckpt)
    _, test_c = cfg.corpora()
    tc = cfg.train_config()
    ppl = perplexity(model, test_c, tc.seq_len, tc.batch_size)
    print(f"test_ppl {ppl:.6f}")
    return EXIT_OK


def _ablation_cells(cfg: RunConfig, suite: str) -> list:
    """(run_id, train-overrides, alignment-overrides) per grid cell."""
    base_align = dict(cfg.alignment_raw or {})
    cells = []
    if suite == "layers":
        for token in LAYER_GRID:
            cells.append((token, {}, {**base_align, "strategy": token}))
    elif suite == "lambda":
        for lam in LAMBDA_GRID:
            cells.append((f"lambda_{lam}", {}, {**base_align, "lambda0": lam}))
    elif suite == "sstop":
        total = int(cfg.train_raw["total_steps"])
        for frac, name in SSTOP_FRACTIONS:
            cells.append((name, {}, {**base_align,
                                     "s_stop": max(1, int(round(frac * total)))}))
    elif suite == "layer-select":
        for token in LAYER_SELECT_GRID:
            cells.append((token, {}, {**base_align, "strategy": token}))
    else:
        raise ConfigError(f"unknown ablation suite {suite!r}")
    return cells


def _cell_complete(cell_dir: Path, total_steps: int) -> bool:
    final = cell_dir / "checkpoint_final.bin"
    metrics = cell_dir / "metrics.jsonl"
    if not final.exists() or not metrics.exists():
        return False
    records = read_metrics(metrics)
    return any(r.get("step") == total_steps for r in records)


def _run_cell(config_path: str, suite: str, run_id: str, align_overrides: dict,
              train_overrides: dict, resume: bool) -> str:
    """Worker entry: isolated per cell so grids can fan out across processes."""
    cfg = load_config(config_path)
    cfg.alignment_raw = align_overrides
    tc = cfg.train_config(mode="let", overrides=train_overrides)
    teacher = _load_teacher(cfg)
    if teacher is None:
        raise ConfigError(f"cell {run_id}: teacher checkpoint missing at "
                          f"{_teacher_path(cfg)}")
    train_c, test_c = cfg.corpora()
    cell_dir = cfg.output_dir / f"ablate-{suite}" / run_id
    if resume and _cell_complete(cell_dir, tc.total_steps):
        return str(cell_dir)
    _write_json(cell_dir / "config.json", cfg.resolved(tc))
    run(tc, cfg.model_m, train_c, test_c, cell_dir, teacher=teacher, resume=resume)
    return str(cell_dir)


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.suite not in ABLATION_SUITES:
        return _usage_error(f"--suite must be one of {ABLATION_SUITES}")
    if _load_teacher(cfg) is None:
        print(f"error: ablation needs a teacher checkpoint at {_teacher_path(cfg)}",
              file=sys.stderr)
        return EXIT_MISSING_PREREQ
    cells = _ablation_cells(cfg, args.suite)
    suite_dir = cfg.output_dir / f"ablate-{args.suite}"
    suite_dir.mkdir(parents=True, exist_ok=True)

    failures = {}
    completed = {}
    jobs = [(args.config, args.suite, run_id, align, train, args.resume)
            for run_id, train, align in cells]
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = {pool.submit(_run_cell, *job): job[2] for job in jobs}
            for fut in concurrent.futures.as_completed(futures):
                run_id = futures[fut]
                try:
                    completed[run_id] = Path(fut.result())
                except Exception as exc:  # cell isolation: keep the rest going
                    failures[run_id] = str(exc)
    else:
        for job in jobs:
            try:
                completed[job[2]] = Path(_run_cell(*job))
            except LetLabError as exc:
                failures[job[2]] = str(exc)

    run_ids = sorted(completed)  # lexicographic columns keep CSV diffs stable
    if run_ids:
        logs = [completed[rid] / "metrics.jsonl" for rid in run_ids]
        header, rows = compare_runs(logs, "test_ppl", run_ids)
        write_csv(suite_dir / "perplexity_vs_step.csv", header, rows)
        header, rows = merge_runs_by_step(logs, "cos_sim", run_ids)
        write_csv(suite_dir / "similarity_vs_step.csv", header, rows)
    for run_id, message in sorted(failures.items()):
        print(f"cell {run_id} FAILED: {message}", file=sys.stderr)
    print(f"ablation {args.suite}: {len(completed)}/{len(cells)} cells complete; "
          f"tables in {suite_dir}")
    return EXIT_CHECK_FAILED if failures else EXIT_OK


def cmd_verify_theory(args) -> int:
    try:
        k_values = [int(tok) for tok in args.k_list.split(",") if tok.strip()]
    except ValueError:
        return _usage_error(f"--k-list must be comma-separated integers, got {args.k_list!r}")
    if not k_values or min(k_values) < 1 or max(k_values) > args.L:
        return _usage_error(f"k values must lie in 1..{args.L}, got {k_values}")
    if args.trials < 1:
        return _usage_error("--trials must be >= 1")
    if args.L * args.d * args.d > DENSE_HESSIAN_GUARD:
        print(f"error: L*d^2 = {args.L * args.d * args.d} exceeds the dense-"
              f"Hessian guard ({DENSE_HESSIAN_GUARD}); reduce --L or --d",
              file=sys.stderr)
        return EXIT_MISSING_PREREQ
    result = curvature_sweep(args.L, args.d, k_values, args.trials,
                             seed=args.seed, fd_step=args.fd_step)
    summary = emit_sweep(result, args.out)
    for claim, ok in summary["claims"].items():
        print(f"{'PASS' if ok else 'FAIL'} {claim}")
    print(f"tables in {args.out}")
    return EXIT_OK if result.all_passed else EXIT_CHECK_FAILED


def cmd_gradcheck(args) -> int:
    if args.scope not in SCOPES:
        return _usage_error(f"--scope must be one of {sorted(SCOPES)}")
    kwargs = {} if args.seeds is None else {"num_seeds": args.seeds}
    results = SCOPES[args.scope](**kwargs)
    offenders = []
    for name, err in results:
        status = "PASS" if err < THRESHOLD else "FAIL"
        print(f"{status} {name}: max relative error {err:.3e}")
        if err >= THRESHOLD:
            offenders.append(name)
    if offenders:
        print(f"error: gradient check failed for {offenders}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="let-lab",
                     description="Desk-scale late-to-early training lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and split a corpus")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain-teacher", help="baseline-train the small model")
    p.add_argument("--config", required=True)
    p.add_argument("--steps", type=int, default=None,
                   help="override teacher total_steps (0 = just initialize)")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_pretrain_teacher)

    p = sub.add_parser("train", help="train the target model")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=("baseline", "let", "rkd", "kd_then_standard"))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--run-id", default=None)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="held-out perplexity of a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--suite", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("verify-theory", help="deep-linear Hessian structure checks")
    p.add_argument("--L", type=int, default=4, help="network depth")
    p.add_argument("--d", type=int, default=2, help="hidden dimension")
    p.add_argument("--k-list", default="1,2,3", help="alignment depths, comma separated")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fd-step", type=float, default=1e-4)
    p.add_argument("--out", default="verify-theory")
    p.set_defaults(fn=cmd_verify_theory)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--scope", required=True)
    p.add_argument("--seeds", type=int, default=None)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return args.fn(args)
    except DivergenceError as exc:
        print(f"error: diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_PREREQ
    except LetLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
