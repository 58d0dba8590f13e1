"""Evaluation procedures: divergence from the guiding policies, preference
sweeps, an action probe at a scripted merge moment, and the cross-evaluation
matrix over (ego policy x social family).

All estimates are seeded and deterministic. Outcome rates come from integer
episode counting, so success + collision + timeout counts always partition the
episode total exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..nets import EgoPolicyNet, SocialPolicyNet, TrajAutoencoder, social_net_inputs
from ..sim import ACTION_SPEEDS, Env
from ..sim.env import _state_rows
from ..train.config import RunConfig
from ..train.rollout import NetBundle, RolloutBatch, RolloutCollector, StagePlan

STATE_SAMPLING_NOTE = (
    "divergence states are sampled from the evaluated meta-policy's own "
    "rollouts against the frozen initial ego policy"
)


@dataclass
class FamilySpec:
    """How social vehicles behave in one evaluation family."""

    name: str
    kind: str  # "idm" | "meta"
    beta_lo: float = -1.0
    beta_hi: float = 3.0
    social_net: SocialPolicyNet | None = None

    def ood_for(self, ego_metadata: dict) -> bool:
        trained = set(ego_metadata.get("trained_families", []))
        if self.kind == "idm":
            return "idm" not in trained
        if "meta-rl" not in trained:
            return True
        # broader preference range than the ego ever trained against
        return self.beta_lo < -1.0 or self.beta_hi > 3.0


@dataclass
class EgoSpec:
    name: str
    net: EgoPolicyNet
    metadata: dict
    trajae: TrajAutoencoder | None = None


def _eval_plan(name: str, family: FamilySpec, use_latents: bool, record_social: bool = False) -> StagePlan:
    if family.kind == "idm":
        return StagePlan(
            name, learner=None, ego_mode="frozen", social_mode="idm", beta_mode="zero",
            use_latents=use_latents, track_history=use_latents, record_social=record_social,
        )
    return StagePlan(
        name, learner=None, ego_mode="frozen", social_mode="frozen-meta", beta_mode="range",
        beta_lo=family.beta_lo, beta_hi=family.beta_hi,
        use_latents=use_latents, track_history=use_latents, record_social=record_social,
    )


def run_episodes(
    run_cfg: RunConfig,
    ego: EgoSpec,
    family: FamilySpec,
    n_episodes: int,
    seed: int,
) -> dict[str, int]:
    """Outcome counts over exactly ``n_episodes`` completed episodes."""
    use_latents = bool(ego.metadata.get("uses_latents")) and ego.trajae is not None
    plan = _eval_plan(f"eval-{family.name}", family, use_latents)
    nets = NetBundle(ego=ego.net, social=family.social_net, trajae=ego.trajae)
    collector = RolloutCollector(run_cfg, plan, nets, seed)
    episodes = []
    while len(episodes) < n_episodes:
        batch = collector.collect(64)
        episodes.extend(batch.episodes)
    counts = {"success": 0, "collision": 0, "timeout": 0}
    for ep in episodes[:n_episodes]:
        counts[ep.outcome] += 1
    return counts


def collect_social_records(
    run_cfg: RunConfig,
    social_net: SocialPolicyNet,
    ego_net: EgoPolicyNet,
    beta: float,
    n_records: int,
    seed: int,
) -> RolloutBatch:
    """Rollout records of the meta policy with every social preference at beta."""
    plan = StagePlan(
        "eval-records", learner=None, ego_mode="frozen", social_mode="frozen-meta",
        beta_mode="const", beta_const=beta, record_social=True,
    )
    nets = NetBundle(ego=ego_net, social=social_net)
    collector = RolloutCollector(run_cfg, plan, nets, seed)
    batches = []
    total = 0
    while total < n_records:
        b = collector.collect(32)
        batches.append(b)
        total += len(b)
    return _concat_batches(batches, n_records)


def _concat_batches(batches: list[RolloutBatch], limit: int) -> RolloutBatch:
    out = RolloutBatch(
        **{
            name: np.concatenate([getattr(b, name) for b in batches])[:limit]
            for name in (
                "rows", "self_row", "viewer", "hidden", "beta", "action", "logp", "reward",
                "value", "terminal", "boundary", "next_value", "anchor", "head", "stream",
            )
        }
    )
    out.episodes = [ep for b in batches for ep in b.episodes]
    return out


@dataclass
class KlEstimate:
    beta: float
    anchor_index: int
    kl: float
    n_samples: int
    low_sample_warning: bool


def estimate_kl(
    run_cfg: RunConfig,
    social_net: SocialPolicyNet,
    ego_net: EgoPolicyNet,
    anchor_index: int,
    beta: float,
    n_samples: int,
    seed: int,
) -> KlEstimate:
    """Mean KL(guide_k || meta(.|o, beta)) over states visited by the meta policy."""
    batch = collect_social_records(run_cfg, social_net, ego_net, beta, n_samples, seed)
    n = len(batch)
    rows_flat = batch.rows.reshape(n * batch.rows.shape[1], batch.rows.shape[2])
    feats = social_net.features_np(rows_flat, batch.self_row, batch.hidden)
    guide_logits, _ = social_net.head_forward_np(f"guide{anchor_index}", feats)
    meta_logits, _ = social_net.head_forward_np("meta", feats, batch.beta)
    kl = float(np.mean(_kl_rows(guide_logits, meta_logits)))
    return KlEstimate(
        beta=beta,
        anchor_index=anchor_index,
        kl=kl,
        n_samples=n,
        low_sample_warning=n < 1000,
    )


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _kl_rows(p_logits: np.ndarray, q_logits: np.ndarray) -> np.ndarray:
    lp = _log_softmax_np(p_logits.astype(np.float64))
    lq = _log_softmax_np(q_logits.astype(np.float64))
    p = np.exp(lp)
    return np.maximum((p * (lp - lq)).sum(axis=-1), 0.0)


@dataclass
class CurvePoint:
    beta: float
    mean: float
    stderr: float
    n: int


def sweep_preference_reward(
    run_cfg: RunConfig,
    social_net: SocialPolicyNet,
    ego_net: EgoPolicyNet,
    betas: list[float],
    steps_per_beta: int,
    seed: int,
) -> list[CurvePoint]:
    """Mean per-step final reward of social vehicles at each preference."""
    curve = []
    for i, beta in enumerate(betas):
        batch = collect_social_records(run_cfg, social_net, ego_net, beta, steps_per_beta, seed + i)
        rewards = batch.reward
        curve.append(
            CurvePoint(
                beta=float(beta),
                mean=float(rewards.mean()),
                stderr=float(rewards.std(ddof=1) / np.sqrt(len(rewards))),
                n=len(rewards),
            )
        )
    return curve


@dataclass
class ProbeResult:
    query: str  # "meta@<beta>" or "guide<k>"
    beta: float
    action: int
    desired_speed: float
    probs: list[float]


# Probe geometry: the moment the turning ego's footprint pushes into the
# upper lane (mid-arc) while the probed vehicle bears down on it from behind.
PROBE_EGO_PROGRESS = 14.5
PROBE_VEHICLE_X = 4.0


def probe_actions(
    run_cfg: RunConfig,
    social_net: SocialPolicyNet,
    queries: list[tuple[str, float | int]],
    seed: int = 0,
    warm_steps: int = 12,
) -> list[ProbeResult]:
    """Desired speed chosen at a scripted merge moment.

    The ego is mid-turn, nosing into the upper lane; the probed vehicle leads
    the upper-lane platoon toward the merge point at full speed. All traffic
    flows normally (lower-lane vehicles have already passed the crossing), so
    the probe state stays on the distribution the policies trained on. The
    recurrent state is warmed by replaying the scripted approach, with
    observation preferences set per query.
    """
    from ..sim.env import _vehicle_at, spawn
    from ..sim.env import step as sim_step

    scenario = run_cfg.scenario
    results = []
    for kind, value in queries:
        if kind == "meta":
            beta = float(value)
        else:
            beta = float(run_cfg.anchors.values[int(value)])
        state = spawn(scenario, lambda rng: beta, seed=seed)
        n = scenario.n_social
        per_lane = scenario.n_social_per_lane
        probe_slot = per_lane  # first upper-lane slot leads the platoon
        drift = warm_steps * 0.3
        ego_progress = PROBE_EGO_PROGRESS - drift
        state.ego = _vehicle_at(scenario, "ego-approach", "ego", float(ego_progress), 3000)
        upper_mid = scenario.road_half_length  # upper-lane progress of x=0
        for k in range(per_lane):
            # probed vehicle first, followers nose-to-tail behind it
            x = PROBE_VEHICLE_X + drift + k * (scenario.vehicle_length + 9.0)
            state.social[probe_slot + k].state = _vehicle_at(scenario, "upper", "social", upper_mid - x, 3000)
        for k in range(per_lane):
            # lower-lane traffic already past the crossing, cruising away
            state.social[k].state = _vehicle_at(
                scenario, "lower", "social", scenario.road_half_length + 8.0 + 10.0 * k - drift, 3000
            )

        hidden = social_net.new_hidden(n)
        viewers = np.arange(1, n + 1)
        for _ in range(warm_steps):
            raw = _state_rows(state)
            pool, self_rows = social_net_inputs(np.repeat(raw[None], n, axis=0), viewers)
            hidden = social_net.features_np(pool, self_rows, hidden)
            sim_step(state, [2] * (n + 1))

        raw = _state_rows(state)
        pool, self_rows = social_net_inputs(np.repeat(raw[None], n, axis=0), viewers)
        feat = social_net.features_np(pool, self_rows, hidden)
        probe_feat = feat[probe_slot : probe_slot + 1]
        if kind == "meta":
            logits, _ = social_net.head_forward_np("meta", probe_feat, np.asarray([beta]))
            label = f"meta@{beta}"
        else:
            logits, _ = social_net.head_forward_np(f"guide{int(value)}", probe_feat)
            label = f"guide{int(value)}"
        shifted = logits[0] - logits[0].max()
        probs = np.exp(shifted) / np.exp(shifted).sum()
        action = int(np.argmax(probs))
        results.append(
            ProbeResult(
                query=label,
                beta=beta,
                action=action,
                desired_speed=ACTION_SPEEDS[action],
                probs=[float(p) for p in probs],
            )
        )
    return results


@dataclass
class EvalCell:
    ego: str
    family: str
    seed: int
    episodes: int
    success: int
    collision: int
    timeout: int
    ood: bool

    @property
    def rates(self) -> tuple[float, float, float]:
        return (
            self.success / self.episodes,
            self.collision / self.episodes,
            self.timeout / self.episodes,
        )


@dataclass
class EvalReport:
    cells: list[EvalCell] = field(default_factory=list)
    kl_curves: list[dict] = field(default_factory=list)
    reward_curves: list[dict] = field(default_factory=list)
    probe: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "cells": [
                {
                    "ego": c.ego,
                    "family": c.family,
                    "seed": c.seed,
                    "episodes": c.episodes,
                    "success": c.success,
                    "collision": c.collision,
                    "timeout": c.timeout,
                    "success_rate": c.success / c.episodes,
                    "collision_rate": c.collision / c.episodes,
                    "timeout_rate": c.timeout / c.episodes,
                    "ood": c.ood,
                }
                for c in self.cells
            ],
            "kl_curves": self.kl_curves,
            "reward_curves": self.reward_curves,
            "probe": self.probe,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_cells_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["ego", "family", "seed", "episodes", "success", "collision", "timeout",
                 "success_rate", "collision_rate", "timeout_rate", "ood"]
            )
            for c in self.cells:
                s, col, t = c.rates
                w.writerow([c.ego, c.family, c.seed, c.episodes, c.success, c.collision, c.timeout,
                            repr(s), repr(col), repr(t), int(c.ood)])

    def write_curves_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["curve", "policy", "beta", "value", "stderr", "n", "warning"])
            for row in self.kl_curves:
                w.writerow(["kl", row["policy"], row["beta"], repr(row["kl"]), "", row["n_samples"],
                            int(row["low_sample_warning"])])
            for row in self.reward_curves:
                w.writerow(["reward", row["policy"], row["beta"], repr(row["mean"]), repr(row["stderr"]), row["n"], 0])


def _cell_task(args):
    run_cfg_doc, ego_name, ego_ckpt, trajae_ckpt, family_doc, social_ckpt, n_episodes, seed = args
    from ..train.stages import load_ego_net, load_social_net, load_trajae

    run_cfg = RunConfig.from_dict(run_cfg_doc)
    net, meta = load_ego_net(ego_ckpt)
    trajae = load_trajae(trajae_ckpt) if trajae_ckpt else None
    ego = EgoSpec(ego_name, net, meta, trajae)
    social = load_social_net(social_ckpt) if social_ckpt else None
    family = FamilySpec(
        name=family_doc["name"], kind=family_doc["kind"],
        beta_lo=family_doc["beta_lo"], beta_hi=family_doc["beta_hi"], social_net=social,
    )
    counts = run_episodes(run_cfg, ego, family, n_episodes, seed)
    return ego_name, family.name, seed, counts, family.ood_for(meta)


def cross_evaluate(
    run_cfg: RunConfig,
    ego_checkpoints: dict[str, tuple[str | Path, str | Path | None]],
    family_specs: dict[str, dict],
    n_episodes: int,
    seeds: list[int],
    workers: int = 1,
) -> EvalReport:
    """Outcome-rate matrix over ego policies x social families x seeds.

    ``ego_checkpoints`` maps name -> (ego checkpoint path, trajae path or None).
    ``family_specs`` maps name -> {"kind", "beta_lo", "beta_hi", "social"(path)}.
    """
    tasks = []
    doc = run_cfg.to_dict()
    for ego_name, (ego_ckpt, trajae_ckpt) in ego_checkpoints.items():
        for fam_name, spec in family_specs.items():
            for seed in seeds:
                family_doc = {
                    "name": fam_name,
                    "kind": spec["kind"],
                    "beta_lo": spec.get("beta_lo", -1.0),
                    "beta_hi": spec.get("beta_hi", 3.0),
                }
                tasks.append(
                    (doc, ego_name, str(ego_ckpt), str(trajae_ckpt) if trajae_ckpt else None,
                     family_doc, spec.get("social"), n_episodes, seed)
                )
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(workers) as pool:
            outcomes = pool.map(_cell_task, tasks)
    else:
        outcomes = [_cell_task(t) for t in tasks]

    report = EvalReport(metadata={"state_sampling": STATE_SAMPLING_NOTE, "episodes_per_cell": n_episodes})
    for ego_name, fam_name, seed, counts, ood in outcomes:
        report.cells.append(
            EvalCell(
                ego=ego_name, family=fam_name, seed=seed, episodes=n_episodes,
                success=counts["success"], collision=counts["collision"], timeout=counts["timeout"],
                ood=ood,
            )
        )
    return report
