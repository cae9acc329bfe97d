"""Command line entry point: ``headkv <command> [flags]``.

Exit status is 0 on success, 1 for a bad configuration or flag, and 2 when a
run trips a runtime invariant.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..allocation import POLICIES, BudgetPlan, allocate, allocate_ada, concentration
from ..errors import ConfigError, HeadKVError
from ..importance import ESTIMATORS, ImportanceScores
from ..numkit import SeededRng, derive_seed
from ..probes import sample_retrieval_example
from ..selection import compress, pooled_scores, retained_json
from . import report
from .config import ExperimentConfig, default_config, load_config
from .runner import (FULL, NEEDLE, Method, compare_methods, config_method, evaluate,
                     make_backend, plan_for, run_estimation)

log = logging.getLogger("headkv")

COMPARE_BUDGETS = [16, 32, 64, FULL]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--seed", type=_u64, help="corpus seed")
    common.add_argument("--policy", choices=POLICIES)
    common.add_argument("--budget", type=int, help="mean per-head budget b")
    common.add_argument("--beta", type=float)
    common.add_argument("--alpha", type=int, help="observation window size")
    common.add_argument("--estimator", choices=ESTIMATORS)
    common.add_argument("--model", choices=("oracle", "toy"), default="oracle",
                        help="model used when no --config is given")
    common.add_argument("--scores", type=Path, help="scores.json to reuse instead of estimating")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="headkv", description="Head-level KV-cache compression experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "estimate": "score heads from probe traces",
        "allocate": "turn scores into a per-head budget plan",
        "compress": "compress one probe prompt and report memory",
        "eval-needle": "run the needle grid for the configured policy",
        "eval-reason": "run the multi-fact reasoning suite",
        "compare": "all policies and estimators on paired corpora",
        "report": "summary table and figures from an output directory",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return p


def resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = default_config(args.model, seed=args.seed or 0)
    return cfg.with_overrides(seed=args.seed, policy=args.policy, budget=args.budget,
                              beta=args.beta, alpha=args.alpha, estimator=args.estimator)


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")
    log.info("wrote %s", path)


def _scores(cfg: ExperimentConfig, args, backend) -> ImportanceScores:
    if args.scores is None:
        return run_estimation(cfg, backend)
    try:
        s = ImportanceScores.from_dict(json.loads(args.scores.read_text(encoding="utf-8")))
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read scores {args.scores}: {exc}") from exc
    if s.shape != cfg.shape:
        raise ConfigError(f"scores shape {s.shape} does not match model {cfg.shape}")
    return s


def _write_scores(out: Path, s: ImportanceScores) -> None:
    _write(out / "scores.json", s.to_json() + "\n")
    _write(out / "scores_heatmap.csv", s.heatmap_csv())


def _write_plan(out: Path, plan: BudgetPlan) -> None:
    _write(out / "plan.json", plan.to_json() + "\n")
    _write(out / "plan_heatmap.csv", plan.heatmap_csv())


def _probe(cfg: ExperimentConfig, backend):
    """Prefill of the first needle example at the longest grid length."""
    length = max(cfg.grid.lengths)
    key = derive_seed(cfg.corpus_seed, NEEDLE, length, 0, 0)
    ex = sample_retrieval_example(SeededRng(key), length, cfg.vocab_size, cfg.grid.depths[0],
                                  needle_len=cfg.needle_len)
    full, attention = backend.prefill(ex.prompt, ex.needle_span.positions, cfg.alpha, key)
    pooled = {h: pooled_scores(attention[h], cfg.pooling) for h in full}
    return len(ex.prompt), full, attention, pooled


def _method(cfg, args, backend) -> Method:
    scores = _scores(cfg, args, backend) if cfg.allocation.policy == "headkv" else None
    return config_method(cfg, scores)


def cmd_estimate(cfg, args, backend) -> None:
    _write_scores(args.out, run_estimation(cfg, backend))


def cmd_allocate(cfg, args, backend) -> None:
    a = cfg.allocation
    if a.policy == "headkv":
        scores = _scores(cfg, args, backend)
        _write_scores(args.out, scores)
        plan = allocate(a, cfg.shape, scores)
    elif a.policy == "ada":
        _, _, _, pooled = _probe(cfg, backend)
        conc = np.zeros(cfg.shape)
        for h, p in pooled.items():
            conc[h] = concentration(p, a.b)
        plan = allocate_ada(a, conc, *cfg.shape)
    else:
        plan = allocate(a, cfg.shape)
    _write_plan(args.out, plan)


def cmd_compress(cfg, args, backend) -> None:
    method = _method(cfg, args, backend)
    n, full, attention, pooled = _probe(cfg, backend)
    plan = plan_for(method, cfg.shape, n, cfg.alpha, pooled)
    _, rep, kept = compress(full, attention, plan, cfg.pooling, pooled)
    _write_plan(args.out, plan)
    _write(args.out / "memory.csv", rep.to_csv())
    _write(args.out / "memory.json", rep.to_json() + "\n")
    _write(args.out / "retained.json", retained_json(kept) + "\n")


def _cmd_eval(suite: str):
    def run(cfg, args, backend) -> None:
        method = _method(cfg, args, backend)
        res = evaluate(cfg, [method], suite, backend)
        _write(args.out / "results.csv", report.rows_csv(res.rows))
        for rep in res.reports.values():
            _write(args.out / "memory.csv", rep.to_csv())
    return run


def _safe(name: str) -> str:
    return name.replace("@", "_").replace("=", "")


def cmd_compare(cfg, args, backend) -> None:
    if not cfg.budgets:
        cfg = replace(cfg, budgets=list(COMPARE_BUDGETS))
    cmp = compare_methods(cfg)
    _write(args.out / "results.csv", report.rows_csv(cmp.needle))
    _write(args.out / "reasoning.csv", report.rows_csv(cmp.reasoning))
    for est, s in cmp.scores.items():
        _write(args.out / f"scores_{est}.json", s.to_json() + "\n")
    mem = args.out / "memory"
    mem.mkdir(exist_ok=True)
    for (name, b), rep in cmp.reports.items():
        _write(mem / f"{_safe(name)}_b{b}.csv", rep.to_csv())
    _write(args.out / "summary.csv",
           report.summarize({"needle": cmp.needle, "reasoning": cmp.reasoning}))


def cmd_report(cfg, args, backend) -> None:
    out = args.out
    if not (out / "results.csv").exists():
        log.info("no results.csv in %s, running compare first", out)
        cmd_compare(cfg, args, backend)
    needle = report.read_rows(out / "results.csv")
    reasoning = report.read_rows(out / "reasoning.csv") if (out / "reasoning.csv").exists() else []
    scores = plan = None
    for name in ("scores.json", "scores_R2.json"):
        if (out / name).exists():
            scores = ImportanceScores.from_dict(json.loads((out / name).read_text(encoding="utf-8")))
            break
    if (out / "plan.json").exists():
        plan = BudgetPlan.from_dict(json.loads((out / "plan.json").read_text(encoding="utf-8")))
    for path in report.render(out, needle, reasoning, scores, plan):
        log.info("wrote %s", path)


COMMANDS = {
    "estimate": cmd_estimate,
    "allocate": cmd_allocate,
    "compress": cmd_compress,
    "eval-needle": _cmd_eval("needle"),
    "eval-reason": _cmd_eval("reason"),
    "compare": cmd_compare,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args, make_backend(cfg))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except HeadKVError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
