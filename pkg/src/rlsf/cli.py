"""Command-line entry point: ``rlsf <subcommand> ...``.

Exit codes: 0 success, 1 other errors, 2 config or usage error, 3 failure
in a statistical stage, 4 failure in a training stage.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from rlsf.abtest import Verdict, outcome_to_preferences, run_ab_test
from rlsf.config import ConfigError, ExperimentConfig, load_config, parse_config
from rlsf.pipeline import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_STATS,
    EXIT_TRAINING,
    STAGES,
    StageError,
    World,
    load_policy,
    load_preferences,
    make_choice_sets,
    planted_pair,
    read_csv,
    read_jsonl,
    run_pipeline,
    save_policy,
    write_csv,
    write_jsonl,
)
from rlsf.policy import PolicyDivergedError, evaluate_business_value, finetune, pretrain
from rlsf.population import InsufficientUsersError
from rlsf.reward import RewardModel, TrainingDivergedError, load_checkpoint, save_checkpoint, train
from rlsf.seeding import derive_seed, make_rng
from rlsf.stats import DomainError, min_sample_size_mean, min_sample_size_proportion
from rlsf.tournament import EloState, elo_rank, run_tournament, true_order

log = logging.getLogger("rlsf")
EXIT_OTHER = 1


class ReportError(RuntimeError):
    pass


# -- config handling ----------------------------------------------------------


def _apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {k} is not a section")
        node[keys[-1]] = yaml.safe_load(raw)
    return data


def _config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(getattr(args, "config", None))
    overrides = getattr(args, "set", None) or []
    if overrides:
        cfg = parse_config(_apply_overrides(json.loads(cfg.model_dump_json()), overrides))
    if getattr(args, "seed", None) is not None:
        cfg = parse_config({**json.loads(cfg.model_dump_json()), "seed": args.seed})
    return cfg


def _emit(obj: dict[str, Any]) -> None:
    print(json.dumps(obj, sort_keys=True))


# -- subcommands --------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    out = run_pipeline(_config(args), args.out, "plain", args.stage)
    print(f"run complete: {out}")
    return EXIT_OK


def cmd_ant_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    if cfg.horizons is None:
        raise ConfigError("ant-run needs a 'horizons' section in the config")
    out = run_pipeline(cfg, args.out, args.mode, args.stage)
    print(f"ant run ({args.mode}) complete: {out}")
    return EXIT_OK


def cmd_samplesize(args: argparse.Namespace) -> int:
    if args.kind == "proportion":
        if args.p1 is None or args.p2 is None:
            raise ConfigError("proportion sample size needs --p1 and --p2")
        res = min_sample_size_proportion(args.p1, args.p2, args.k, args.alpha, args.beta, args.delta)
    else:
        if args.s1 is None or args.s2 is None:
            raise ConfigError("mean sample size needs --s1 and --s2")
        res = min_sample_size_mean(args.s1, args.s2, args.k, args.alpha, args.beta, args.delta)
    if args.json:
        _emit({"n1": res.n1, "n2": res.n2, "z_alpha": res.z_alpha, "z_beta": res.z_beta})
    else:
        print(f"n1 = {res.n1}")
        print(f"n2 = {res.n2}")
        print(f"z(1-alpha/2) = {res.z_alpha:.10f}")
        print(f"z(1-beta) = {res.z_beta:.10f}")
    return EXIT_OK


def cmd_abtest(args: argparse.Namespace) -> int:
    cfg = _config(args)
    world = World(cfg)
    test_cfg = world.test_cfg
    if args.rates is not None:
        pair, truth = planted_pair(args.rates, cfg)
    else:
        truth = world.primary
        policy = pretrain(world.env, cfg.pretrain_obj(), derive_seed(cfg.seed, "pretrain"))
        one = cfg.model_copy(update={"choices": cfg.choices.model_copy(update={"n": 2, "sets": 1})})
        cs = make_choice_sets(policy, world.env, one, make_rng(cfg.seed, "abtest", "pair"))[0]
        pair = cs.pair(0, 1)
    if args.null:
        pair = type(pair)(pair.first, pair.first, pair.prefix, pair.suffix)
    flows = pair.flows()
    true_gap = truth.indicator_from_quality(truth.quality(flows[0])) - truth.indicator_from_quality(
        truth.quality(flows[1]))
    outcomes, prefs = [], []
    for r in range(args.replications):
        outcome = run_ab_test(pair, test_cfg, world.pool, truth, make_rng(cfg.seed, "abtest", r))
        row = {"replication": r, "seed": cfg.seed, "null": args.null, "true_gap": float(true_gap),
               **outcome.to_json()}
        if outcome.verdict in (Verdict.FIRST_BETTER, Verdict.SECOND_BETTER) and true_gap != 0:
            row["correct"] = (outcome.verdict is Verdict.FIRST_BETTER) == (true_gap > 0)
        outcomes.append(row)
        rec = outcome_to_preferences(outcome, pair, f"abtest/{cfg.seed}/{r}")
        if rec is not None:
            prefs.append(rec)
        if not args.quiet:
            _emit(row)
    if args.out:
        out = Path(args.out)
        _append_jsonl(out / "outcomes.jsonl", outcomes)
        _append_jsonl(out / "preferences.jsonl", [p.to_json() for p in prefs])
    return EXIT_OK


def _append_jsonl(path: Path, rows: list[dict[str, Any]]) -> None:
    prior = read_jsonl(path) if path.exists() else []
    write_jsonl(path, [{k: v for k, v in r.items() if k != "schema_version"} for r in prior] + rows)


def cmd_antest(args: argparse.Namespace) -> int:
    cfg = _config(args)
    world = World(cfg)
    policy = pretrain(world.env, cfg.pretrain_obj(), derive_seed(cfg.seed, "pretrain"))
    one = cfg.model_copy(update={"choices": cfg.choices.model_copy(update={"sets": 1})})
    cs = make_choice_sets(policy, world.env, one, make_rng(cfg.seed, "antest", "choices"))[0]
    graph = run_tournament(cs, world.test_cfg, world.pool, world.primary, make_rng(cfg.seed, "antest"))
    e = cfg.elo
    ranking = elo_rank(graph, EloState.fresh(len(cs), e.initial, e.k_factor), e.passes,
                       make_rng(cfg.seed, "antest", "elo"))
    truth_order = true_order(cs, world.primary)
    summary = {"seed": cfg.seed, "order": list(ranking.order), "ratings": list(ranking.ratings),
               "true_order": list(truth_order), "recovered": ranking.order == truth_order,
               "edges": {f"{i}-{j}": ed.value for (i, j), ed in sorted(graph.edges.items())}}
    if args.out:
        out = Path(args.out)
        write_jsonl(out / "graph.jsonl", graph.to_json_lines())
        write_csv(out / "elo.csv", ("round", "choice", "rating"), ranking.history)
        write_jsonl(out / "ranking.jsonl", [summary])
    _emit(summary)
    return EXIT_OK


def cmd_train_reward(args: argparse.Namespace) -> int:
    cfg = _config(args)
    world = World(cfg)
    try:
        records = load_preferences(Path(args.preferences))
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read preferences {args.preferences}: {exc}") from exc
    model, trace = train(RewardModel(world.features), records, cfg.reward_obj(derive_seed(cfg.seed, "reward", 0)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "reward_model.json")
    write_csv(out / "reward_loss.csv", ("epoch", "loss"), enumerate(trace))
    print(f"loss {trace[0]:.6f} -> {trace[-1]:.6f} over {len(trace) - 1} epochs; checkpoint {out / 'reward_model.json'}")
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    cfg = _config(args)
    world = World(cfg)
    env = world.env
    try:
        reward = load_checkpoint(args.reward)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load reward checkpoint {args.reward}: {exc}") from exc
    if reward.features.digest() != world.features.digest():
        raise ConfigError("reward checkpoint feature map does not match the config's environment")
    if args.policy:
        policy = load_policy(Path(args.policy), env)
    else:
        policy = pretrain(env, cfg.pretrain_obj(), derive_seed(cfg.seed, "pretrain"))
    tuned, records = finetune(policy, reward, cfg.ppo_obj(derive_seed(cfg.seed, "ppo")), env, world.primary)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_policy(out / "policy_finetuned.json", tuned, env)
    write_csv(out / "finetune.csv", ("phase", "iteration", "mean_reward", "true_indicator", "kl", "clip_fraction"),
              ((r.phase, r.iteration, r.mean_reward, r.true_indicator, r.kl, r.clip_fraction) for r in records))
    rows = []
    for name, pol in (("pretrained", policy), ("finetuned", tuned)):
        est = evaluate_business_value(pol, env, world.primary, cfg.evaluation.episodes,
                                      make_rng(cfg.seed, "evaluation", 0))
        rows.append((name, world.horizons[0].id, est.mean, est.ci_low, est.ci_high, est.episodes))
        print(f"{name}: true indicator {est.mean:.4f} [{est.ci_low:.4f}, {est.ci_high:.4f}]")
    write_csv(out / "evaluation.csv", ("policy", "horizon", "mean", "ci_low", "ci_high", "episodes"), rows)
    return EXIT_OK


def collect_report(dirs: list[Path]) -> dict[str, Any]:
    """Summary tables over every run found below ``dirs``.

    Raises:
        ReportError: if no run artifacts exist.
    """
    ab, an, runs = [], [], []
    for d in dirs:
        if not d.is_dir():
            continue
        for p in sorted(d.rglob("outcomes.jsonl")):
            ab.extend(read_jsonl(p))
        for p in sorted(d.rglob("ranking.jsonl")):
            an.extend(r for r in read_jsonl(p) if "recovered" in r)
        for p in sorted(d.rglob("evaluation.csv")):
            rows = read_csv(p)
            horizon = rows[0]["horizon"] if rows else None
            means = {r["policy"]: float(r["mean"]) for r in rows if r["horizon"] == horizon}
            if {"pretrained", "finetuned"} <= means.keys():
                runs.append({"run": str(p.parent), "horizon": horizon,
                             "improvement": means["finetuned"] - means["pretrained"]})
    if not (ab or an or runs):
        raise ReportError(f"no runs found under {', '.join(map(str, dirs))}")
    report: dict[str, Any] = {}
    if ab:
        null = [r for r in ab if r["null"]]
        alt = [r for r in ab if not r["null"]]
        report["abtest"] = {
            "replications": len(ab),
            "type_i_rate": (sum(r["verdict"] != Verdict.EQUAL.value for r in null) / len(null)) if null else None,
            "power": (sum(bool(r.get("correct")) for r in alt) / len(alt)) if alt else None,
            "inconclusive_rate": sum(r["verdict"] == Verdict.INCONCLUSIVE.value for r in ab) / len(ab),
        }
    if an:
        report["antest"] = {"tournaments": len(an),
                            "order_recovery_rate": sum(bool(r["recovered"]) for r in an) / len(an)}
    if runs:
        deltas = np.array([r["improvement"] for r in runs])
        report["runs"] = {"count": len(runs), "mean_improvement": float(deltas.mean()),
                          "min_improvement": float(deltas.min()), "max_improvement": float(deltas.max())}
    return report


def cmd_report(args: argparse.Namespace) -> int:
    report = collect_report([Path(d) for d in args.dirs])
    if args.json:
        _emit(report)
        return EXIT_OK
    for section, table in report.items():
        print(f"[{section}]")
        for key, value in table.items():
            text = "n/a" if value is None else (f"{value:.4f}" if isinstance(value, float) else str(value))
            print(f"  {key:<22} {text}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", help="experiment config (YAML or JSON); defaults if omitted")
    p.add_argument("--seed", type=int, help="master seed, overrides the config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlsf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full pipeline")
    _common(p, out_required=True)
    p.add_argument("--stage", choices=STAGES, help="run only this stage (prior artifacts must exist)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ant-run", help="multi-horizon pipeline")
    _common(p, out_required=True)
    p.add_argument("--mode", choices=("gradual", "onetime"), required=True)
    p.add_argument("--stage", choices=STAGES)
    p.set_defaults(func=cmd_ant_run)

    p = sub.add_parser("samplesize", help="minimum group sizes for a target gap")
    p.add_argument("--kind", choices=("mean", "proportion"), default="proportion")
    p.add_argument("--p1", type=float)
    p.add_argument("--p2", type=float)
    p.add_argument("--s1", type=float)
    p.add_argument("--s2", type=float)
    p.add_argument("--k", type=float, default=1.0, help="group size ratio n2/n1")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--beta", type=float, default=0.2)
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_samplesize)

    p = sub.add_parser("abtest", help="seeded A/B tests of two variants")
    _common(p)
    p.add_argument("--replications", type=int, default=1)
    p.add_argument("--null", action="store_true", help="test a variant against itself")
    p.add_argument("--rates", type=float, nargs=2, metavar=("ETA1", "ETA2"),
                   help="plant these true indicators instead of sampling variants")
    p.add_argument("--quiet", action="store_true", help="do not print one record per replication")
    p.set_defaults(func=cmd_abtest)

    p = sub.add_parser("antest", help="one N-way tournament with Elo ranking")
    _common(p)
    p.set_defaults(func=cmd_antest)

    p = sub.add_parser("train-reward", help="fit a reward model to a preferences file")
    _common(p, out_required=True)
    p.add_argument("--preferences", required=True)
    p.set_defaults(func=cmd_train_reward)

    p = sub.add_parser("finetune", help="PPO fine-tune against a reward checkpoint")
    _common(p, out_required=True)
    p.add_argument("--reward", required=True, help="reward_model.json checkpoint")
    p.add_argument("--policy", help="starting policy (pretrained from the config if omitted)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("report", help="summarize runs below one or more directories")
    p.add_argument("dirs", nargs="*", default=["."])
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (DomainError, InsufficientUsersError) as exc:
        print(f"statistical error: {exc}", file=sys.stderr)
        return EXIT_STATS
    except (TrainingDivergedError, PolicyDivergedError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except ReportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
