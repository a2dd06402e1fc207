"""Seeded end-to-end runs with every stage persisted to a run directory.

Stages run in order and each one reads only the artifacts written by the
stages before it, so any stage can be re-run on its own:

    pretrain -> choices -> preferences -> [prediction] -> reward -> finetune -> evaluation

A plain run has one immediate horizon and writes its per-horizon artifacts
at the top of the run directory. A multi-horizon run writes them under
``horizons/<id>/`` and fine-tunes in ``gradual`` or ``onetime`` mode.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np

from rlsf import __version__
from rlsf.abtest import FlowPair, TestConfig
from rlsf.ant import (
    FusionSpec,
    HorizonSpec,
    correlated_model,
    long_run_value,
    predict_unobserved,
    run_gradual,
    run_onetime,
    simulate_tick_history,
)
from rlsf.config import ConfigError, ExperimentConfig, HorizonSection
from rlsf.policy import (
    GenerationEnv,
    IterationRecord,
    PolicyDivergedError,
    PolicyModel,
    evaluate_business_value,
    finetune,
    generate,
    pretrain,
)
from rlsf.population import GroundTruthModel, InsufficientUsersError, UserPool, quality_for_indicator
from rlsf.reward import (
    FeatureMap,
    RewardModel,
    TrainingDivergedError,
    load_checkpoint,
    save_checkpoint,
    train,
)
from rlsf.seeding import derive_seed, make_rng
from rlsf.stats import DomainError
from rlsf.tournament import ChoiceSet, TournamentBatch, run_choice_sets
from rlsf.trajectory import PreferenceRecord, Trajectory

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_STATS, EXIT_TRAINING = 0, 2, 3, 4
STAGES = ("pretrain", "choices", "preferences", "prediction", "reward", "finetune", "evaluation")
MODES = ("plain", "gradual", "onetime")
_STAGE_EXIT = {
    "pretrain": EXIT_TRAINING,
    "choices": EXIT_STATS,
    "preferences": EXIT_STATS,
    "prediction": EXIT_STATS,
    "reward": EXIT_TRAINING,
    "finetune": EXIT_TRAINING,
    "evaluation": EXIT_STATS,
}


class StageError(RuntimeError):
    def __init__(self, stage: str, exit_code: int, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage
        self.exit_code = exit_code


# -- file helpers -------------------------------------------------------------


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _fmt(x: Any) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schema_version", *header])
    for row in rows:
        w.writerow([SCHEMA_VERSION, *(_fmt(v) for v in row)])
    atomic_write(path, buf.getvalue())


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_jsonl(path: Path, rows: Iterable[dict[str, Any]]) -> None:
    lines = [json.dumps({"schema_version": SCHEMA_VERSION, **r}, sort_keys=True) for r in rows]
    atomic_write(path, "".join(line + "\n" for line in lines))


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def save_preferences(path: Path, records: Sequence[PreferenceRecord]) -> None:
    write_jsonl(path, (r.to_json() for r in records))


def load_preferences(path: Path) -> list[PreferenceRecord]:
    return [PreferenceRecord.from_json(row) for row in read_jsonl(path)]


def save_policy(path: Path, policy: PolicyModel, env: GenerationEnv) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "format": "rlsf-policy",
        "env": {"vocab_size": env.vocab_size, "seq_len": env.seq_len, "n_prompts": env.n_prompts},
        "temperature": repr(policy.temperature),
        "logits": policy.logits.tolist(),
        "reference": policy.reference.tolist(),
    }
    atomic_write(path, json.dumps(payload) + "\n")


def load_policy(path: Path, env: GenerationEnv | None = None) -> PolicyModel:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != "rlsf-policy":
        raise ValueError(f"{path}: not a policy file")
    if env is not None and GenerationEnv(**payload["env"]) != env:
        raise ValueError(f"{path}: policy was trained for a different environment")
    return PolicyModel(
        np.array(payload["logits"], dtype=float),
        np.array(payload["reference"], dtype=float),
        float(payload["temperature"]),
    )


# -- simulated world ----------------------------------------------------------


def base_truth(cfg: ExperimentConfig) -> GroundTruthModel:
    gt = cfg.ground_truth
    rng = np.random.default_rng(gt.seed) if gt.seed is not None else make_rng(cfg.seed, "ground_truth")
    bias = quality_for_indicator(gt.base_rate, gt.kind, cfg.population.trait_std)
    return GroundTruthModel.random(
        gt.kind, cfg.env.vocab_size, rng, bias=bias, unigram_scale=gt.unigram_scale,
        bigram_scale=gt.bigram_scale, trait_std=cfg.population.trait_std, noise_std=gt.noise_std,
    )


def horizon_truth(cfg: ExperimentConfig, base: GroundTruthModel, idx: int, h: HorizonSection) -> GroundTruthModel:
    """Horizon ``idx``'s ground truth; perfectly correlated horizons share ``base``."""
    if h.correlation == 1.0 and h.base_rate is None:
        return base
    bias = None
    if h.base_rate is not None:
        bias = quality_for_indicator(h.base_rate, base.kind, base.trait_std)
    return correlated_model(base, h.correlation, make_rng(cfg.seed, "ground_truth", idx), bias)


@dataclass
class World:
    """Everything a stage can rebuild from (config, seed) alone."""

    cfg: ExperimentConfig

    @cached_property
    def env(self) -> GenerationEnv:
        return self.cfg.env_obj()

    @cached_property
    def pool(self) -> UserPool:
        return UserPool.create(self.cfg.population.size, self.cfg.population.trait_std,
                               derive_seed(self.cfg.seed, "population"))

    @cached_property
    def horizons(self) -> list[HorizonSection]:
        return self.cfg.horizon_sections()

    @cached_property
    def fusion(self) -> FusionSpec:
        return self.cfg.fusion_spec()

    @cached_property
    def truths(self) -> dict[str, GroundTruthModel]:
        base = base_truth(self.cfg)
        return {h.id: horizon_truth(self.cfg, base, i, h) for i, h in enumerate(self.horizons)}

    @property
    def primary(self) -> GroundTruthModel:
        return self.truths[self.horizons[0].id]

    @cached_property
    def features(self) -> FeatureMap:
        e = self.env
        return FeatureMap(e.vocab_size, e.seq_len, e.n_prompts, tuple(self.cfg.reward.blocks))

    @property
    def test_cfg(self) -> TestConfig:
        return self.cfg.test_obj()

    def sub_seeds(self) -> dict[str, int]:
        s = self.cfg.seed
        return {
            "pretrain": derive_seed(s, "pretrain"),
            "population": derive_seed(s, "population"),
            "ppo": derive_seed(s, "ppo"),
            **{f"reward/{h.id}": derive_seed(s, "reward", i) for i, h in enumerate(self.horizons)},
        }


def planted_pair(rates: Sequence[float], cfg: ExperimentConfig) -> tuple[FlowPair, GroundTruthModel]:
    """Two variants whose true indicators are exactly ``rates`` under the returned model.

    The first variant repeats token 0 and the second token 1; only token 1
    carries quality, so the gap is set by one unigram weight.
    """
    eta1, eta2 = rates
    kind, tau = cfg.ground_truth.kind, cfg.population.trait_std
    k, v = cfg.env.seq_len, cfg.env.vocab_size
    q1, q2 = quality_for_indicator(eta1, kind, tau), quality_for_indicator(eta2, kind, tau)
    uni = np.zeros(v)
    uni[1] = (q2 - q1) / k
    model = GroundTruthModel(kind, q1, uni, np.zeros((v + 1, v)), tau, cfg.ground_truth.noise_std)
    return FlowPair(Trajectory(0, (0,) * k), Trajectory(0, (1,) * k)), model


def make_choice_sets(
    policy: PolicyModel, env: GenerationEnv, cfg: ExperimentConfig, rng: np.random.Generator,
    max_tries: int = 1000,
) -> list[ChoiceSet]:
    """Sample ``sets`` choice sets of ``n`` distinct variants from ``policy``.

    Context segments before and after the variant position are sampled once
    per set and shared by its variants.
    """
    c = cfg.choices
    out = []
    for _ in range(c.sets):
        for _ in range(max_tries):
            variants = generate(policy, env, c.n, rng)
            if len(set(variants)) == c.n:
                break
        else:
            raise DomainError(f"could not sample {c.n} distinct variants in {max_tries} tries")
        context = generate(policy, env, c.flow_length - 1, rng) if c.flow_length > 1 else []
        pos = c.variant_position
        out.append(ChoiceSet(tuple(variants), tuple(context[:pos]), tuple(context[pos:])))
    return out


def _choice_json(idx: int, cs: ChoiceSet) -> dict[str, Any]:
    return {
        "set": idx,
        "variants": [v.to_json() for v in cs.variants],
        "prefix": [v.to_json() for v in cs.prefix],
        "suffix": [v.to_json() for v in cs.suffix],
    }


def _choice_from_json(row: dict[str, Any]) -> ChoiceSet:
    seg = lambda key: tuple(Trajectory.from_json(v) for v in row[key])  # noqa: E731
    return ChoiceSet(seg("variants"), seg("prefix"), seg("suffix"))


# -- runner -------------------------------------------------------------------


@dataclass
class Run:
    cfg: ExperimentConfig
    out: Path
    mode: str = "plain"
    manifest: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "plain" and self.cfg.horizons is not None and len(self.cfg.horizons) > 1:
            raise ConfigError("a plain run takes a single horizon; use ant-run for several")
        if self.mode != "plain" and self.cfg.ppo.refresh_every:
            raise ConfigError("ppo.refresh_every is only supported for plain runs")
        self.out = Path(self.out)
        self.world = World(self.cfg)

    # paths
    def hdir(self, hid: str) -> Path:
        return self.out if self.mode == "plain" else self.out / "horizons" / hid

    @property
    def predicted(self) -> HorizonSection | None:
        return next((h for h in self.world.horizons if math.isinf(h.delay)), None)

    def _needs_prediction(self) -> bool:
        h = self.predicted
        return h is not None and h.weight > 0

    # manifest
    def _write_manifest(self) -> None:
        atomic_write(self.out / "manifest.json", json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def _start_manifest(self) -> None:
        path = self.out / "manifest.json"
        prior = json.loads(path.read_text()) if path.exists() else {}
        if prior and prior.get("config_hash") == self.cfg.digest():
            self.manifest = prior
        else:
            self.manifest = {
                "schema_version": SCHEMA_VERSION,
                "tool": "rlsf",
                "version": __version__,
                "config_hash": self.cfg.digest(),
                "config": json.loads(self.cfg.model_dump_json()),
                "seed": self.cfg.seed,
                "mode": self.mode,
                "sub_seeds": self.world.sub_seeds(),
                "artifacts": {},
                "timings": {},
            }
        self.manifest.update(status="running", failed_stage=None, error=None)
        self._write_manifest()

    # stages
    def stage_pretrain(self) -> list[Path]:
        policy = pretrain(self.world.env, self.cfg.pretrain_obj(), derive_seed(self.cfg.seed, "pretrain"))
        path = self.out / "policy_pretrained.json"
        save_policy(path, policy, self.world.env)
        return [path]

    def stage_choices(self) -> list[Path]:
        policy = load_policy(self.out / "policy_pretrained.json", self.world.env)
        sets = make_choice_sets(policy, self.world.env, self.cfg, make_rng(self.cfg.seed, "choices"))
        path = self.out / "choices.jsonl"
        write_jsonl(path, (_choice_json(i, cs) for i, cs in enumerate(sets)))
        return [path]

    def load_choices(self) -> list[ChoiceSet]:
        return [_choice_from_json(r) for r in read_jsonl(self.out / "choices.jsonl")]

    def _tournaments(self, sets: list[ChoiceSet], truth: GroundTruthModel, rng: np.random.Generator) -> TournamentBatch:
        e = self.cfg.elo
        return run_choice_sets(sets, self.world.test_cfg, self.world.pool, truth, rng, e.passes,
                               e.k_factor, e.initial, self.cfg.reward.train_on)

    def _write_batch(self, d: Path, batch: TournamentBatch) -> list[Path]:
        graph_rows, elo_rows = [], []
        for s, (g, r) in enumerate(zip(batch.graphs, batch.rankings)):
            graph_rows.extend({"set": s, **row} for row in g.to_json_lines())
            elo_rows.extend((s, rnd, c, rating) for rnd, c, rating in r.history)
        paths = [d / "graph.jsonl", d / "elo.csv", d / "ranking.jsonl", d / "preferences.jsonl"]
        write_jsonl(paths[0], graph_rows)
        write_csv(paths[1], ("set", "round", "choice", "rating"), elo_rows)
        write_jsonl(paths[2], ({"set": s, "order": list(r.order), "ratings": list(r.ratings)}
                               for s, r in enumerate(batch.rankings)))
        save_preferences(paths[3], batch.records)
        return paths

    def stage_preferences(self) -> list[Path]:
        sets = self.load_choices()
        paths: list[Path] = []
        for idx, h in enumerate(self.world.horizons):
            if math.isinf(h.delay):
                continue
            batch = self._tournaments(sets, self.world.truths[h.id], make_rng(self.cfg.seed, "preferences", idx))
            if not batch.records:
                raise DomainError(f"horizon {h.id!r}: every test was inconclusive; no preferences")
            paths += self._write_batch(self.hdir(h.id), batch)
        return paths

    def stage_prediction(self) -> list[Path]:
        h = self.predicted
        if h is None or h.weight == 0:
            return []
        idx = self.world.horizons.index(h)
        truth, p = self.world.truths[h.id], self.cfg.prediction
        sets = self.load_choices()
        histories, true_vals = [], []
        for s, cs in enumerate(sets):
            histories.append([
                simulate_tick_history(truth, cs.flow(i), p.users_per_tick, p.ticks, h.decay,
                                      make_rng(self.cfg.seed, "history", s, i), self.world.pool)
                for i in range(len(cs))
            ])
            true_vals.append([long_run_value(truth, cs.flow(i), h.decay, p.gamma) for i in range(len(cs))])
        result = predict_unobserved(sets, histories, p.gamma, self.world.features,
                                    self.cfg.reward_obj(derive_seed(self.cfg.seed, "reward", idx)), true_vals)
        d = self.hdir(h.id)
        rows = []
        for s, (pred, tv) in enumerate(zip(result.predictions, true_vals)):
            rows.extend((s, i, pv, t, abs(pv - t) / abs(t)) for i, (pv, t) in enumerate(zip(pred, tv)))
        write_csv(d / "prediction.csv", ("set", "variant", "predicted", "true", "relative_error"), rows)
        save_preferences(d / "preferences.jsonl", result.records)
        return [d / "prediction.csv", d / "preferences.jsonl"]

    def _train_reward(self, records: Sequence[PreferenceRecord], idx: int) -> tuple[RewardModel, list[float]]:
        return train(RewardModel(self.world.features), records,
                     self.cfg.reward_obj(derive_seed(self.cfg.seed, "reward", idx)))

    def stage_reward(self) -> list[Path]:
        paths: list[Path] = []
        for idx, h in enumerate(self.world.horizons):
            d = self.hdir(h.id)
            if math.isinf(h.delay) and not self._needs_prediction():
                continue
            model, trace = self._train_reward(load_preferences(d / "preferences.jsonl"), idx)
            save_checkpoint(model, d / "reward_model.json")
            write_csv(d / "reward_loss.csv", ("epoch", "loss"), enumerate(trace))
            paths += [d / "reward_model.json", d / "reward_loss.csv"]
        return paths

    def _reward_models(self) -> dict[str, Callable[[], RewardModel]]:
        # Loaded lazily so unused horizons are never touched.
        return {h.id: (lambda d=self.hdir(h.id): load_checkpoint(d / "reward_model.json"))
                for h in self.world.horizons}

    def _finetune_plain(self, policy: PolicyModel, reward: RewardModel) -> tuple[PolicyModel, list[IterationRecord]]:
        ppo = self.cfg.ppo_obj(derive_seed(self.cfg.seed, "ppo"))
        every = self.cfg.ppo.refresh_every
        if not every or every >= ppo.iterations:
            return finetune(policy, reward, ppo, self.world.env, self.world.primary)
        # Periodic refresh: new tests on the current policy's outputs every
        # ``every`` iterations, reward retrained on all preferences so far.
        records = load_preferences(self.out / "preferences.jsonl")
        history: list[IterationRecord] = []
        done, chunk, fresh = 0, 0, []
        while done < ppo.iterations:
            n = min(every, ppo.iterations - done)
            seed = ppo.seed if chunk == 0 else derive_seed(self.cfg.seed, "ppo", "chunk", chunk)
            step_cfg = type(ppo)(ppo.clip, ppo.kl_coef, ppo.learning_rate, n, ppo.episodes, ppo.update_epochs, seed)
            policy, recs = finetune(policy, reward, step_cfg, self.world.env, self.world.primary)
            history.extend(IterationRecord(r.phase, r.iteration + done, r.mean_reward, r.true_indicator,
                                           r.kl, r.clip_fraction) for r in recs)
            done += n
            chunk += 1
            if done < ppo.iterations:
                sets = make_choice_sets(policy, self.world.env, self.cfg,
                                        make_rng(self.cfg.seed, "refresh", chunk, "choices"))
                batch = self._tournaments(sets, self.world.primary, make_rng(self.cfg.seed, "refresh", chunk))
                fresh.extend(batch.records)
                reward, _ = self._train_reward(records + fresh, 0)
        save_preferences(self.out / "refresh_preferences.jsonl", fresh)
        return policy, history

    def stage_finetune(self) -> list[Path]:
        env = self.world.env
        policy = load_policy(self.out / "policy_pretrained.json", env)
        truth = self.world.primary
        ppo = self.cfg.ppo_obj(derive_seed(self.cfg.seed, "ppo"))
        models = self._reward_models()
        if self.mode == "plain":
            policy, records = self._finetune_plain(policy, models[self.world.horizons[0].id]())
        elif self.mode == "gradual":
            schedule = [(spec, models[spec.id]) for spec in self.world.fusion.horizons if spec.weight > 0]
            if not schedule:
                raise DomainError("gradual mode needs at least one horizon with positive weight")
            policy, records = run_gradual(schedule, env, policy, ppo, truth)
        else:
            active = {h.id: models[h.id] for h in self.world.fusion.horizons if h.weight > 0}
            policy, records = run_onetime(self.world.fusion, active, env, policy, ppo, truth)
        save_policy(self.out / "policy_finetuned.json", policy, env)
        write_csv(
            self.out / "finetune.csv",
            ("phase", "iteration", "mean_reward", "true_indicator", "kl", "clip_fraction"),
            ((r.phase, r.iteration, r.mean_reward, r.true_indicator, r.kl, r.clip_fraction) for r in records),
        )
        return [self.out / "policy_finetuned.json", self.out / "finetune.csv"]

    def stage_evaluation(self) -> list[Path]:
        env = self.world.env
        policies = {
            "pretrained": load_policy(self.out / "policy_pretrained.json", env),
            "finetuned": load_policy(self.out / "policy_finetuned.json", env),
        }
        rows = []
        episodes = self.cfg.evaluation.episodes
        for idx, h in enumerate(self.world.horizons):
            for name, pol in policies.items():
                # Same stream for both policies: a paired comparison.
                est = evaluate_business_value(pol, env, self.world.truths[h.id], episodes,
                                              make_rng(self.cfg.seed, "evaluation", idx))
                rows.append((name, h.id, est.mean, est.ci_low, est.ci_high, est.episodes))
        path = self.out / "evaluation.csv"
        write_csv(path, ("policy", "horizon", "mean", "ci_low", "ci_high", "episodes"), rows)
        return [path]

    def stages(self) -> list[str]:
        return [s for s in STAGES if s != "prediction" or self._needs_prediction()]

    def run_stage(self, stage: str) -> None:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        t0 = time.perf_counter()
        try:
            paths = getattr(self, f"stage_{stage}")()
        except (TrainingDivergedError, PolicyDivergedError) as exc:
            raise StageError(stage, EXIT_TRAINING, str(exc)) from exc
        except (DomainError, InsufficientUsersError) as exc:
            raise StageError(stage, EXIT_STATS, str(exc)) from exc
        except FileNotFoundError as exc:
            raise StageError(stage, _STAGE_EXIT[stage], f"missing input artifact: {exc.filename}") from exc
        except ValueError as exc:
            raise StageError(stage, _STAGE_EXIT[stage], str(exc)) from exc
        self.manifest["timings"][stage] = round(time.perf_counter() - t0, 6)
        self.manifest["artifacts"][stage] = [str(p.relative_to(self.out)) for p in paths]
        self._write_manifest()

    def execute(self, only: str | None = None) -> int:
        self.out.mkdir(parents=True, exist_ok=True)
        self._start_manifest()
        try:
            for stage in ([only] if only else self.stages()):
                log.info("stage %s", stage)
                self.run_stage(stage)
        except StageError as exc:
            self.manifest.update(status="failed", failed_stage=exc.stage, error=str(exc))
            self._write_manifest()
            raise
        self.manifest["status"] = "complete"
        self._write_manifest()
        return EXIT_OK


def run_pipeline(cfg: ExperimentConfig, out: str | Path, mode: str = "plain", only: str | None = None) -> Path:
    """Execute all stages (or just ``only``) into ``out``; returns the run directory.

    Raises:
        ConfigError: for an invalid mode or config combination.
        StageError: when a stage fails; the manifest names the stage.
    """
    run = Run(cfg, Path(out), mode)
    run.execute(only)
    return run.out


def evaluation_summary(run_dir: str | Path) -> dict[str, dict[str, float]]:
    """{horizon: {policy: mean true indicator}} from a run's evaluation.csv."""
    out: dict[str, dict[str, float]] = {}
    for row in read_csv(Path(run_dir) / "evaluation.csv"):
        out.setdefault(row["horizon"], {})[row["policy"]] = float(row["mean"])
    return out
