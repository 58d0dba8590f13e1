"""Run configuration: one JSON document covering the scenario, networks,
preference anchors, per-stage training budgets, and evaluation sizes."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any

from ..nets import EncoderConfig
from ..sim.types import ConfigError, ScenarioConfig

STAGES = ("ego-initial", "guiding", "meta", "ego-final")


@dataclass(frozen=True)
class PreferenceAnchors:
    values: tuple[float, ...] = (-1.0, 0.0, 1.0, 2.0, 3.0)
    guide_distance: float = 0.1
    reg_weight: float = 0.01

    def validate(self) -> None:
        if list(self.values) != sorted(set(self.values)):
            raise ConfigError(f"anchors must be sorted and distinct, got {self.values}")
        if self.guide_distance <= 0:
            raise ConfigError("guide_distance must be positive")
        if self.reg_weight < 0:
            raise ConfigError("reg_weight must be non-negative")

    def match(self, beta: float) -> int | None:
        """Index of the anchor within guide_distance of beta, if any."""
        best = None
        best_dist = self.guide_distance
        for k, a in enumerate(self.values):
            d = abs(a - beta)
            if d <= best_dist:
                best = k
                best_dist = d
        return best


@dataclass
class TrainParams:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    epochs: int = 4
    minibatch_size: int = 256
    learning_rate: float = 1e-4
    n_envs: int = 8
    rollout_steps: int = 128
    beta_min: float = -1.0
    beta_max: float = 3.0
    idm_mix: float = 0.5

    def validate(self) -> None:
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigError("gae_lambda must lie in [0, 1]")
        for name in ("clip_eps", "learning_rate"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs", "minibatch_size", "n_envs", "rollout_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.beta_min > self.beta_max:
            raise ConfigError("beta_min must not exceed beta_max")
        if not 0 <= self.idm_mix <= 1:
            raise ConfigError("idm_mix must lie in [0, 1]")


@dataclass
class TrajPretrainParams:
    collect_steps: int = 12000
    updates: int = 1500
    batch_size: int = 32
    learning_rate: float = 3e-3
    window_stride: int = 3

    def validate(self) -> None:
        for name in ("collect_steps", "updates", "batch_size", "window_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"traj_pretrain.{name} must be >= 1")


@dataclass
class EvalParams:
    kl_samples: int = 10000
    sweep_steps: int = 100000
    cross_episodes: int = 200
    cross_seeds: int = 5
    beta_grid_min: float = -1.0
    beta_grid_max: float = 3.0
    beta_grid_interval: float = 0.5
    ood_beta_min: float = -3.0
    ood_beta_max: float = 3.0

    def validate(self) -> None:
        for name in ("kl_samples", "sweep_steps", "cross_episodes", "cross_seeds"):
            if getattr(self, name) < 1:
                raise ConfigError(f"eval.{name} must be >= 1")
        if self.beta_grid_interval <= 0:
            raise ConfigError("eval.beta_grid_interval must be positive")

    def beta_grid(self) -> list[float]:
        grid = []
        b = self.beta_grid_min
        while b <= self.beta_grid_max + 1e-9:
            grid.append(round(b, 10))
            b += self.beta_grid_interval
        return grid


# Desk-scale stage budgets (environment steps). The guiding stage trains all
# anchor heads jointly from shared rollouts: its budget is 200K environment
# steps per guiding policy, five policies.
DEFAULT_STAGE_STEPS = {
    "ego-initial": 500_000,
    "guiding": 1_000_000,
    "meta": 500_000,
    "ego-final": 500_000,
}


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    anchors: PreferenceAnchors = field(default_factory=PreferenceAnchors)
    train: TrainParams = field(default_factory=TrainParams)
    traj_pretrain: TrajPretrainParams = field(default_factory=TrajPretrainParams)
    eval: EvalParams = field(default_factory=EvalParams)
    stage_steps: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_STAGE_STEPS))
    seed: int = 0

    def validate(self) -> None:
        self.scenario.validate()
        try:
            self.encoder.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        self.anchors.validate()
        self.train.validate()
        self.traj_pretrain.validate()
        self.eval.validate()
        for stage, steps in self.stage_steps.items():
            if stage not in STAGES:
                raise ConfigError(f"unknown stage {stage!r} in stage_steps")
            if steps < 1:
                raise ConfigError(f"stage_steps[{stage!r}] must be >= 1")
        missing = [s for s in STAGES if s not in self.stage_steps]
        if missing:
            raise ConfigError(f"stage_steps missing stages: {missing}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario.to_dict(),
            "encoder": self.encoder.to_dict(),
            "anchors": {
                "values": list(self.anchors.values),
                "guide_distance": self.anchors.guide_distance,
                "reg_weight": self.anchors.reg_weight,
            },
            "train": asdict(self.train),
            "traj_pretrain": asdict(self.traj_pretrain),
            "eval": asdict(self.eval),
            "stage_steps": dict(self.stage_steps),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        known = {"scenario", "encoder", "anchors", "train", "traj_pretrain", "eval", "stage_steps", "seed"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")

        def section(name, builder, default):
            part = doc.get(name)
            if part is None:
                return default()
            if not isinstance(part, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            try:
                return builder(part)
            except ConfigError:
                raise
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid {name!r} section: {e}") from None

        cfg = cls(
            scenario=section("scenario", ScenarioConfig.from_dict, ScenarioConfig),
            encoder=section("encoder", EncoderConfig.from_dict, EncoderConfig),
            anchors=section(
                "anchors",
                lambda d: PreferenceAnchors(
                    values=tuple(d.get("values", (-1.0, 0.0, 1.0, 2.0, 3.0))),
                    guide_distance=d.get("guide_distance", 0.1),
                    reg_weight=d.get("reg_weight", 0.01),
                ),
                PreferenceAnchors,
            ),
            train=section("train", lambda d: TrainParams(**d), TrainParams),
            traj_pretrain=section("traj_pretrain", lambda d: TrajPretrainParams(**d), TrajPretrainParams),
            eval=section("eval", lambda d: EvalParams(**d), EvalParams),
            stage_steps={**DEFAULT_STAGE_STEPS, **doc.get("stage_steps", {})},
            seed=int(doc.get("seed", 0)),
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_json_file(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        return cls.from_dict(doc)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()
