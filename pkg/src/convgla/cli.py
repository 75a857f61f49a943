"""Command-line entry point.

One binary, nine subcommands: gen-data, train-teacher, distill, finetune,
eval, ablate, bench, grad-check, oracle-check. Configuration comes from an
optional TOML/JSON file plus repeatable ``--set dotted.key=value``
overrides; the fully resolved config is written into the run directory,
which is named by config hash + seed so identical invocations land in the
same place and reproduce bitwise (timing fields aside).

Exit codes: 0 success, 1 runtime failure, 2 usage/configuration error.
Errors print one machine-parsable line: ``error: <Type>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model import GlaOptions

RUN_ROOT_ENV = "CONVGLA_RUN_ROOT"

DEFAULTS: dict = {
    "seed": 0,
    # student attention hyperparameters (conv width 4, gate rank 32,
    # LoRA 8/16, window 64 are the reference defaults)
    "gla": dataclasses.asdict(GlaOptions()),
    "task": {"tasks": ["passkey"], "lengths": [128, 256], "count": 40,
             "pools": ["train", "eval"]},
    "eval": {"lengths": [128, 256], "n": 40, "tasks": ["passkey"], "mode": "chunked"},
    "bench": {"lengths": [256, 512, 1024, 2048], "reps": 5, "d_model": 32,
              "n_heads": 2, "n_layers": 1, "window": 64, "chunk": 16},
    "oracle": {"n": 64, "seeds": 50, "chunk": 16},
    "grad": {"seeds": 3, "n": 6, "d_model": 8, "n_heads": 2, "tol": 1e-4},
}


# ---------------------------------------------------------------------------
# configuration plumbing


def _load_config_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    text = p.read_text()
    if p.suffix == ".json":
        return json.loads(text)
    if p.suffix == ".toml":
        try:
            import tomllib  # 3.11+
        except ImportError:  # pragma: no cover - version-dependent
            import tomli as tomllib
        return tomllib.loads(text)
    raise ConfigError(f"config must be .toml or .json, got {p.suffix!r}")


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _apply_override(cfg: dict, pair: str) -> None:
    if "=" not in pair:
        raise ConfigError(f"override must look like key=value, got {pair!r}")
    key, raw = pair.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare string
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into {part!r} of override {pair!r}")
    node[parts[-1]] = value


def resolve_config(args) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))  # deep copy
    if getattr(args, "config", None):
        cfg = _deep_merge(cfg, _load_config_file(args.config))
    for pair in getattr(args, "set", None) or []:
        _apply_override(cfg, pair)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:10]


def make_run_dir(command: str, cfg: dict, root: str | None = None) -> Path:
    base = Path(root or os.environ.get(RUN_ROOT_ENV, "runs"))
    run = base / f"{command}-{config_hash(cfg)}-s{cfg['seed']}"
    run.mkdir(parents=True, exist_ok=True)
    with open(run / "config.json", "w") as fh:
        json.dump({"command": command, **cfg}, fh, indent=1, sort_keys=True)
    return run


def _gla_options(cfg: dict) -> GlaOptions:
    doc = dict(cfg["gla"])
    return GlaOptions(**doc)


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise ConfigError(f"expected comma-separated ints, got {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg) -> int:
    from .tasks import dump_samples, generate_set

    run = make_run_dir("gen-data", cfg, args.runs_root)
    t = cfg["task"]
    for task in t["tasks"]:
        for n in t["lengths"]:
            for pool in t["pools"]:
                base = 0 if pool == "train" else 1_000_000
                samples = generate_set(task, n, range(base + cfg["seed"], base + cfg["seed"] + t["count"]), pool)
                out = run / f"{task}_{n}_{pool}.jsonl"
                dump_samples(out, samples)
                print(f"wrote {len(samples):4d} samples -> {out}")
    return 0


def cmd_train_teacher(args, cfg) -> int:
    from .model import save_model
    from .recipe import eval_accuracy, train_teacher

    run = make_run_dir("train-teacher", cfg, args.runs_root)
    model = train_teacher(cfg["seed"], log_path=run / "teacher.jsonl")
    save_model(run / "teacher", model)
    accs = {n: eval_accuracy(model, n, cfg["eval"]["n"]) for n in cfg["eval"]["lengths"]}
    with open(run / "metrics.json", "w") as fh:
        json.dump({"accuracy": {str(k): v for k, v in accs.items()}}, fh, indent=1)
    for n, a in accs.items():
        print(f"teacher passkey@{n}: {a:.1%}")
    print(f"checkpoint: {run / 'teacher'}")
    return 0


def cmd_distill(args, cfg) -> int:
    from .model import load_model, save_model
    from .recipe import distill_student

    run = make_run_dir("distill", cfg, args.runs_root)
    teacher = load_model(args.teacher)
    student, _, (first, last) = distill_student(teacher, cfg["seed"], _gla_options(cfg),
                                                log_path=run / "distill.jsonl")
    save_model(run / "student", student)
    print(f"distill loss {first:.5f} -> {last:.5f} "
          f"({1 - last / first:.1%} drop)")
    print(f"checkpoint: {run / 'student'}")
    return 0


def cmd_finetune(args, cfg) -> int:
    from .model import load_model, save_lora
    from .recipe import eval_accuracy, finetune_student

    run = make_run_dir("finetune", cfg, args.runs_root)
    student = load_model(args.student)
    lora, recs = finetune_student(student, cfg["seed"], log_path=run / "finetune.jsonl")
    save_lora(run / "lora", lora)
    accs = {n: eval_accuracy(student, n, cfg["eval"]["n"], lora=lora)
            for n in cfg["eval"]["lengths"]}
    with open(run / "metrics.json", "w") as fh:
        json.dump({"accuracy": {str(k): v for k, v in accs.items()},
                   "final_loss": recs[-1]["loss"]}, fh, indent=1)
    for n, a in accs.items():
        print(f"student passkey@{n}: {a:.1%}")
    print(f"adapters: {run / 'lora'}")
    return 0


def _write_eval_grid(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "context_len", "n", "accuracy"])
        w.writerows(rows)


def cmd_eval(args, cfg) -> int:
    from .model import load_lora, load_model
    from .recipe import eval_accuracy

    run = make_run_dir("eval", cfg, args.runs_root)
    model = load_model(args.model)
    lora = load_lora(args.lora, model) if args.lora else None
    lengths = _csv_ints(args.lengths) if args.lengths else cfg["eval"]["lengths"]
    rows = []
    for task in cfg["eval"]["tasks"]:
        for n in lengths:
            acc = eval_accuracy(model, n, cfg["eval"]["n"], task=task, lora=lora)
            rows.append([task, n, cfg["eval"]["n"], acc])
            print(f"{task}@{n}: {acc:.1%}")
    _write_eval_grid(run / "eval.csv", rows)
    print(f"grid: {run / 'eval.csv'}")
    return 0


def cmd_ablate(args, cfg) -> int:
    from .model import load_model
    from .recipe import ablation_options, eval_accuracy, run_recipe

    opts = ablation_options(args.arm)  # validate before any work
    cfg = dict(cfg)
    cfg["gla"] = dataclasses.asdict(opts)
    cfg["arm"] = args.arm
    run = make_run_dir("ablate", cfg, args.runs_root)
    teacher = load_model(args.teacher) if args.teacher else None
    res, _, student, lora = run_recipe(cfg["seed"], opts, teacher=teacher, run_dir=run)
    lengths = _csv_ints(args.lengths) if args.lengths else cfg["eval"]["lengths"]
    rows = [["passkey", n, cfg["eval"]["n"],
             eval_accuracy(student, n, cfg["eval"]["n"], lora=lora)] for n in lengths]
    _write_eval_grid(run / "eval.csv", rows)
    print(f"arm {args.arm}: student@128 {res.student_acc_128:.1%}, "
          f"@256 {res.student_acc_256:.1%}, distill drop {res.distill_drop:.1%}")
    print(f"artifacts: {run}")
    return 0


def cmd_bench(args, cfg) -> int:
    from .bench import (BenchConfig, bench_prefill, crossover_length,
                        fit_scaling_exponent, write_csv, write_gnuplot_long)

    run = make_run_dir("bench", cfg, args.runs_root)
    b = cfg["bench"]
    bc = BenchConfig(d_model=b["d_model"], n_heads=b["n_heads"], n_layers=b["n_layers"],
                     window=b["window"], chunk=b["chunk"], seed=cfg["seed"])
    lengths = _csv_ints(args.lengths) if args.lengths else b["lengths"]
    rows = bench_prefill(bc, lengths, reps=b["reps"])
    write_csv(run / "bench.csv", rows)
    write_gnuplot_long(run / "bench.dat", rows)
    summary = {}
    for impl in sorted({r.impl for r in rows}):
        mine = [r for r in rows if r.impl == impl and not r.failed_reason]
        if len(mine) >= 4:
            alpha = fit_scaling_exponent(mine)
            summary[impl] = alpha
            print(f"{impl}: alpha = {alpha:.3f}")
    cross = crossover_length(rows)
    if cross is not None:
        print(f"gla_recurrent beats softmax from seq_len {cross}")
    with open(run / "summary.json", "w") as fh:
        json.dump({"alpha": summary, "crossover": cross}, fh, indent=1)
    print(f"csv: {run / 'bench.csv'}")
    return 0


def cmd_grad_check(args, cfg) -> int:
    from .attention import conv_gla_attention, init_conv_gla_params
    from .tensor import Tensor, grad_check

    g = cfg["grad"]
    n, d, h = args.n or g["n"], g["d_model"], g["n_heads"]
    worst = 0.0
    for seed in range(args.seeds or g["seeds"]):
        rng = np.random.default_rng(seed)
        p = init_conv_gla_params(rng, d, h)
        x = Tensor(rng.normal(0.0, 0.5, (n, d)), requires_grad=True)
        for mode in ("recurrent", "chunked"):
            err = grad_check(lambda t: conv_gla_attention(t, p, mode=mode).mean(), x)
            worst = max(worst, err)
    print(f"max gradient error: {worst:.3e}")
    return 0 if worst < g["tol"] else 1


def cmd_oracle_check(args, cfg) -> int:
    from .attention import conv_gla_attention, init_conv_gla_params

    o = cfg["oracle"]
    n = args.n or o["n"]
    seeds = args.seeds or o["seeds"]
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        p = init_conv_gla_params(rng, 8, 2)
        x = rng.normal(0.0, 0.5, (n, 8))
        want = conv_gla_attention(x, p, mode="oracle")
        for mode, kw in (("recurrent", {}), ("chunked", {"chunk": o["chunk"]})):
            got = conv_gla_attention(x, p, mode=mode, **kw)
            worst = max(worst, float(np.max(np.abs(got - want))))
    print(f"max deviation from oracle over {seeds} seeds at n={n}: {worst:.3e}")
    return 0 if worst < 1e-8 else 1


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="convgla",
                                 description="conv-gated linear attention toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override (repeatable)")
        p.add_argument("--seed", type=int, help="run seed")
        p.add_argument("--runs-root", help=f"run directory root (default ${RUN_ROOT_ENV} or ./runs)")

    common(sub.add_parser("gen-data", help="write task sample JSONL files"))
    common(sub.add_parser("train-teacher", help="train the softmax teacher"))

    p = sub.add_parser("distill", help="distill attention into the linear student")
    common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint path")

    p = sub.add_parser("finetune", help="LoRA-finetune a distilled student")
    common(p)
    p.add_argument("--student", required=True, help="student checkpoint path")

    p = sub.add_parser("eval", help="accuracy sweep over context lengths")
    common(p)
    p.add_argument("--model", required=True, help="checkpoint to evaluate")
    p.add_argument("--lora", help="optional adapter checkpoint")
    p.add_argument("--lengths", help="comma-separated context lengths")

    p = sub.add_parser("ablate", help="run one named ablation arm end to end")
    common(p)
    p.add_argument("arm", help="no-norm | no-conv | rope-on | swa-on | share-conv | gate-rank=N | default")
    p.add_argument("--teacher", help="reuse an existing teacher checkpoint")
    p.add_argument("--lengths", help="eval lengths, comma-separated")

    p = sub.add_parser("bench", help="prefill latency benchmark")
    common(p)
    p.add_argument("--lengths", help="comma-separated sequence lengths")

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    common(p)
    p.add_argument("--n", type=int, help="sequence length")
    p.add_argument("--seeds", type=int, help="number of random instances")

    p = sub.add_parser("oracle-check", help="scan paths vs the quadratic oracle")
    common(p)
    p.add_argument("--n", type=int, help="sequence length")
    p.add_argument("--seeds", type=int, help="number of random instances")
    return ap


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "grad-check": cmd_grad_check,
    "oracle-check": cmd_oracle_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ConfigError, DataError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    try:
        return HANDLERS[args.command](args, cfg)
    except ConfigError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
