"""Command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 configuration error, 3 numerical
abort.  Errors after argument parsing also leave ``error.json`` in the output
directory.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck, grape
from .data import Task, gen_prompts, save_dataset, synthetic_pairs
from .errors import ConfigError, DatasetError, InvalidInputError, NumericalError
from .model import Network, PolicyModel
from .numerics import make_rng
from .trainer import Checkpoint, TrainConfig, evaluate, shipped_config, train

OUT_ENV = "TINYALIGN_OUT"
RL_ALGOS = ("reinforce", "trpo", "ppo", "grpo", "grape", "dpo")
DEFAULT_CONFIG = {"sft": "sft_memorize", "reject": "rejection_copy", "train-reward": "reward_copy"}

log = logging.getLogger("tinyalign")


def _out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config JSON path or shipped config name")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field (repeatable)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--resume", help="checkpoint directory to continue from")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tinyalign", description="Alignment objectives on tiny models.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic SFT or preference dataset")
    g.add_argument("--kind", choices=("sft", "pairs"), default="sft")
    g.add_argument("--task", default="copy")
    g.add_argument("--vocab-size", type=int, default=16)
    g.add_argument("--prompt-len", type=int, default=2)
    g.add_argument("--answer-len", type=int, default=3)
    g.add_argument("--n", type=int, default=64, help="number of prompts")
    g.add_argument("--per-prompt", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="output directory")

    for name, text in (("sft", "supervised fine-tuning"), ("reject", "rejection sampling rounds"),
                       ("train-reward", "reward model on preference pairs")):
        _add_train_args(sub.add_parser(name, help=text))
    rl = sub.add_parser("rl", help="policy optimization (and DPO)")
    rl.add_argument("--algo", choices=RL_ALGOS, required=True)
    _add_train_args(rl)

    ev = sub.add_parser("eval", help="mean true reward and KL to reference of a checkpoint")
    ev.add_argument("checkpoint", help="checkpoint directory (or policy JSON)")
    ev.add_argument("--reference", help="reference policy JSON (default: the checkpoint's own)")
    ev.add_argument("--task", default="copy")
    ev.add_argument("--vocab-size", type=int)
    ev.add_argument("--prompt-len", type=int, default=2)
    ev.add_argument("--answer-len", type=int, default=3)
    ev.add_argument("--n", type=int, default=500)
    ev.add_argument("--temperature", type=float, default=1.0)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", help="output directory")

    gc = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    gc.add_argument("--seed", type=int, default=0, help="first of three seeds")
    gc.add_argument("--out", help="output directory")

    lc = sub.add_parser("lemma-check", help="weighted vs unweighted variance sweep")
    lc.add_argument("--n-vectors", type=int, default=10_000)
    lc.add_argument("--n-sim", type=int, default=20_000, help="draws per simulated cross-check")
    lc.add_argument("--seed", type=int, default=0)
    lc.add_argument("--out", help="output directory")
    return ap


# ---------------------------------------------------------------------------
# subcommands


def _resolve_config(args, default_name: str, algorithm: str | None = None) -> TrainConfig:
    ref = args.config or default_name
    path = Path(ref)
    if not path.exists():
        path = shipped_config(ref)
    cfg = TrainConfig.load(path)
    overrides = list(args.overrides)
    if algorithm is not None:
        overrides.insert(0, f"algorithm={algorithm}")
    overrides.append(f"out_dir={args.out_dir}")
    return cfg.with_overrides(overrides)


def _cmd_train(args) -> int:
    if args.command == "rl":
        name, algorithm = f"{args.algo}_copy", args.algo
    else:
        name = DEFAULT_CONFIG[args.command]
        algorithm = {"sft": "sft", "reject": "rejection", "train-reward": "reward"}[args.command]
    cfg = _resolve_config(args, name, algorithm)
    t0 = time.perf_counter()
    res = train(cfg, resume=args.resume)
    last = res.rows[-1] if res.rows else {}
    shown = {k: v for k, v in last.items() if v is not None}
    print(f"{cfg.algorithm}: {len(res.rows)} steps in {time.perf_counter() - t0:.1f}s; last row {shown}")
    print(f"metrics: {res.out_dir / 'metrics.csv'}  final checkpoint: {res.out_dir / 'final'}")
    return 0


def _cmd_gen_data(args) -> int:
    task = Task(args.task, args.vocab_size, args.prompt_len, args.answer_len, args.seed)
    rng = make_rng(args.seed, 1)
    if args.kind == "sft":
        items = [task.reference_text(p) for p in gen_prompts(task, args.n, rng)]
    else:
        items = synthetic_pairs(task, args.n, args.per_prompt, rng)
    path = args.out_dir / f"{args.kind}.jsonl"
    save_dataset(path, items)
    print(f"wrote {len(items)} records to {path}")
    return 0


def _load_policy(path: Path) -> tuple[PolicyModel, PolicyModel | None]:
    if path.is_dir():
        ck = Checkpoint.load(path)
        if ck.policy is None:
            raise ConfigError(f"{path} holds no policy")
        return ck.policy, ck.reference
    model = Network.load(path)
    if not isinstance(model, PolicyModel):
        raise ConfigError(f"{path} is not a policy")
    return model, None


def _cmd_eval(args) -> int:
    policy, reference = _load_policy(Path(args.checkpoint))
    if args.reference:
        reference = Network.load(args.reference)
    V = args.vocab_size or policy.vocab_size
    task = Task(args.task, V, args.prompt_len, args.answer_len, args.seed)
    res = evaluate(policy, reference, task, args.n, make_rng(args.seed, 3), args.temperature)
    (args.out_dir / "eval.json").write_text(json.dumps(res, indent=2))
    for k, v in res.items():
        print(f"{k}: {v:.6f}")
    return 0


def _cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = gradcheck.run_suite(seeds=(args.seed, args.seed + 1, args.seed + 2))
    elapsed = time.perf_counter() - t0
    with open(args.out_dir / "gradcheck.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["loss", "arch", "seed", "n_params", "max_rel_err", "passed"])
        for r in results:
            w.writerow([r.loss, r.arch, r.seed, r.n_params, repr(r.max_rel_err), r.passed])
    print(gradcheck.format_table(results, elapsed))
    return 0 if all(r.passed for r in results) else 1


def lemma_sweep(n_vectors: int, n_sim: int, seed: int, out: Path | None = None) -> dict:
    """Check weighted <= unweighted variance on random sigma vectors, and the
    weighted closed form against simulation on a few of them."""
    rng = make_rng(seed, 5)
    rows, violations, eq_fail = [], 0, 0
    for i in range(n_vectors):
        size = int(rng.integers(2, 11))
        sigma = rng.uniform(0.1, 3.0, size)
        if i % 10 == 0:
            sigma[:] = sigma[0]
        unw, wtd = grape.lemma_variances(sigma)
        equal = bool(np.all(sigma == sigma[0]))
        violations += wtd > unw + 1e-12
        eq_fail += equal != (abs(unw - wtd) <= 1e-10)
        rows.append((i, size, unw, wtd, equal))
    sims = []
    for j in range(5):
        sigma = rng.uniform(0.2, 2.0, int(rng.integers(2, 6)))
        _, wtd = grape.lemma_variances(sigma)
        var, se = grape.simulated_weighted_variance(sigma, n_sim, rng)
        sims.append((j, wtd, var, se, abs(var - wtd) <= 3 * se))
    if out is not None:
        with open(out / "lemma.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", "size", "unweighted", "weighted", "all_equal"])
            w.writerows([(i, r, repr(u), repr(v), e) for i, r, u, v, e in rows])
        with open(out / "lemma_sim.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", "closed_form", "simulated", "stderr", "within_3se"])
            w.writerows([(j, repr(c), repr(v), repr(s), ok) for j, c, v, s, ok in sims])
    return {"vectors": n_vectors, "violations": int(violations), "equality_mismatches": int(eq_fail),
            "simulations_within_3se": int(sum(s[-1] for s in sims)), "simulations": len(sims)}


def _cmd_lemma(args) -> int:
    t0 = time.perf_counter()
    res = lemma_sweep(args.n_vectors, args.n_sim, args.seed, args.out_dir)
    (args.out_dir / "lemma.json").write_text(json.dumps(res, indent=2))
    for k, v in res.items():
        print(f"{k}: {v}")
    print(f"elapsed: {time.perf_counter() - t0:.1f}s")
    ok = res["violations"] == 0 and res["equality_mismatches"] == 0 and \
        res["simulations_within_3se"] == res["simulations"]
    return 0 if ok else 1


COMMANDS = {"gen-data": _cmd_gen_data, "sft": _cmd_train, "reject": _cmd_train, "train-reward": _cmd_train,
            "rl": _cmd_train, "eval": _cmd_eval, "gradcheck": _cmd_gradcheck, "lemma-check": _cmd_lemma}


def _default_out(args) -> Path:
    name = args.command + (f"-{args.algo}" if args.command == "rl" else "")
    return _out_root() / name


def _write_error(out: Path, code: int, kind: str, exc: Exception) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "error.json").write_text(json.dumps({"exit_code": code, "kind": kind, "message": str(exc)},
                                               indent=2))


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.out_dir = Path(args.out) if args.out else _default_out(args)
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        if args.command not in ("sft", "reject", "train-reward", "rl"):
            resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
            (args.out_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError, InvalidInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_error(args.out_dir, 2, "config", exc)
        return 2
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        _write_error(args.out_dir, 3, "numerical", exc)
        return 3


def main() -> None:
    sys.exit(run())
