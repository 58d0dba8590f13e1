"""Stage orchestration: ego-initial -> guiding -> meta -> ego-final.

Each stage trains one network against the controllers its plan prescribes,
streams metrics to CSV, and writes a value-exact checkpoint. Stages are
reproducible byte-for-byte from (config, seed).

Stage wiring:

* ego-initial: fresh ego network (latent inputs held at zero) vs IDM traffic.
* guiding: fresh social network; backbone + anchor heads train while the meta
  head waits frozen; the ego runs its frozen ego-initial policy.
* meta: loads the guiding checkpoint; only the meta head trains. The shared
  backbone and anchor heads stay frozen so the distillation targets are fixed.
  ``reg_weight = 0`` (or guided=False) is the non-guided ablation and runs the
  identical code path with the regularization branch skipped.
* ego-final: pretrains the trajectory autoencoder on mixed IDM/meta traffic,
  then trains a fresh ego network with live latent traits in that mixture.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..ad import load_checkpoint, save_checkpoint
from ..nets import EgoPolicyNet, EncoderConfig, SocialPolicyNet, TrajAutoencoder
from .config import RunConfig, STAGES
from .ppo import ppo_update
from .rollout import NetBundle, RolloutCollector, StagePlan, plan_for_stage

METRICS_COLUMNS = (
    "iteration",
    "env_steps",
    "stage",
    "loss_total",
    "loss_policy",
    "loss_value",
    "entropy",
    "loss_reg",
    "mean_kl",
    "mean_return",
    "episodes",
    "lr",
)


class MissingPrerequisite(Exception):
    """A stage was started without the checkpoint(s) it builds on."""


def _require(prereq: dict[str, str | Path], key: str, stage: str) -> Path:
    path = prereq.get(key)
    if path is None or not Path(path).exists():
        raise MissingPrerequisite(f"stage '{stage}' requires the '{key}' checkpoint (missing: {path})")
    return Path(path)


def load_social_net(path: str | Path) -> SocialPolicyNet:
    store, meta = load_checkpoint(path)
    if meta.get("kind") != "social":
        raise MissingPrerequisite(f"{path} is not a social-policy checkpoint")
    return SocialPolicyNet.from_checkpoint(store, meta)


def load_ego_net(path: str | Path) -> tuple[EgoPolicyNet, dict]:
    store, meta = load_checkpoint(path)
    if meta.get("kind") != "ego":
        raise MissingPrerequisite(f"{path} is not an ego-policy checkpoint")
    return EgoPolicyNet.from_checkpoint(store, meta), meta


def load_trajae(path: str | Path) -> TrajAutoencoder:
    store, meta = load_checkpoint(path)
    if meta.get("kind") != "trajae":
        raise MissingPrerequisite(f"{path} is not a trajectory-autoencoder checkpoint")
    return TrajAutoencoder.from_checkpoint(store, meta)


def _freeze_all(net) -> None:
    net.store.set_trainable("", False)


def _schedule(store, run_cfg: RunConfig, stage: str, records_per_iter: int, n_iters: int) -> None:
    t = run_cfg.train
    per_iter = t.epochs * math.ceil(records_per_iter / t.minibatch_size)
    store.step_count = 0
    store.configure_schedule(t.learning_rate, n_iters * per_iter)


class _MetricsWriter:
    def __init__(self, path: Path):
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(METRICS_COLUMNS)

    def row(self, **kv) -> None:
        self.writer.writerow([kv[c] for c in METRICS_COLUMNS])

    def close(self) -> None:
        self.fh.close()


def collect_trajectory_windows(
    run_cfg: RunConfig, nets: NetBundle, seed: int, n_steps: int
) -> np.ndarray:
    """Mixed-traffic vehicle histories for autoencoder pretraining."""
    plan = StagePlan(
        "traj-pretrain",
        learner=None,
        ego_mode="frozen",
        social_mode="mixed",
        beta_mode="range",
        beta_lo=run_cfg.train.beta_min,
        beta_hi=run_cfg.train.beta_max,
        idm_mix=run_cfg.train.idm_mix,
        track_history=True,
    )
    collector = RolloutCollector(run_cfg, plan, nets, seed)
    h = run_cfg.encoder.history_len
    stride = run_cfg.traj_pretrain.window_stride
    windows = []
    steps_done = 0
    chunk = max(h * 2, 64)
    while steps_done < n_steps:
        collector.collect(chunk)
        steps_done += chunk * collector.n_envs
        ready = np.argwhere(collector.hist_age >= h)
        for env_id, slot in ready[:: max(1, stride)]:
            windows.append(collector.hist[env_id, slot].copy())
    return np.asarray(windows)


def pretrain_trajae(
    run_cfg: RunConfig, nets: NetBundle, seed: int
) -> TrajAutoencoder:
    p = run_cfg.traj_pretrain
    ss = np.random.SeedSequence(seed)
    init_seed, data_seed, batch_seed = [np.random.default_rng(c) for c in ss.spawn(3)]
    ae = TrajAutoencoder(run_cfg.encoder, init_seed)
    data = collect_trajectory_windows(run_cfg, nets, int(data_seed.integers(2**31)), p.collect_steps)
    if len(data) == 0:
        raise RuntimeError("trajectory pretraining collected no windows")
    ae.store.configure_schedule(p.learning_rate, p.updates)
    for _ in range(p.updates):
        idx = batch_seed.integers(0, len(data), size=min(p.batch_size, len(data)))
        ae.store.zero_grad()
        ae.recon_loss(data[idx]).backward()
        ae.store.adam_step()
    return ae


def run_stage(
    stage: str,
    run_cfg: RunConfig,
    out_dir: str | Path,
    seed: int,
    prereq: dict[str, str | Path] | None = None,
    total_env_steps: int | None = None,
    reg_weight: float | None = None,
    progress=None,
) -> dict[str, Path]:
    """Train one pipeline stage; returns paths of the artifacts written."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    prereq = prereq or {}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    budget = total_env_steps if total_env_steps is not None else run_cfg.stage_steps[stage]
    if reg_weight is not None:
        run_cfg = copy.copy(run_cfg)
        run_cfg.anchors = replace(run_cfg.anchors, reg_weight=reg_weight)

    ss = np.random.SeedSequence(seed)
    init_ss, collect_ss, mb_ss, traj_ss = ss.spawn(4)
    init_rng = np.random.default_rng(init_ss)
    mb_rng = np.random.default_rng(mb_ss)
    collect_seed = int(np.random.default_rng(collect_ss).integers(2**31))

    nets = NetBundle()
    artifacts: dict[str, Path] = {}
    use_reg = False

    if stage == "ego-initial":
        nets.ego = EgoPolicyNet(run_cfg.encoder, init_rng)
        metadata = {
            **nets.ego.metadata(),
            "stage": stage,
            "uses_latents": False,
            "trained_families": ["idm"],
        }
        store = nets.ego.store
    elif stage == "guiding":
        ego, _ = load_ego_net(_require(prereq, "ego-initial", stage))
        _freeze_all(ego)
        nets.ego = ego
        nets.social = SocialPolicyNet(run_cfg.encoder, run_cfg.anchors.values, init_rng)
        nets.social.store.set_trainable("head/meta", False)
        metadata = {**nets.social.metadata(), "stage": stage}
        store = nets.social.store
    elif stage == "meta":
        ego, _ = load_ego_net(_require(prereq, "ego-initial", stage))
        _freeze_all(ego)
        nets.ego = ego
        nets.social = load_social_net(_require(prereq, "guiding", stage))
        nets.social.store.set_trainable("", False)
        nets.social.store.set_trainable("head/meta", True)
        use_reg = run_cfg.anchors.reg_weight != 0.0
        metadata = {
            **nets.social.metadata(),
            "stage": stage,
            "guided": use_reg,
            "reg_weight": run_cfg.anchors.reg_weight,
        }
        store = nets.social.store
    else:  # ego-final
        ego0, _ = load_ego_net(_require(prereq, "ego-initial", stage))
        _freeze_all(ego0)
        nets.social = load_social_net(_require(prereq, "meta", stage))
        _freeze_all(nets.social)
        pre_nets = NetBundle(ego=ego0, social=nets.social)
        trajae = pretrain_trajae(run_cfg, pre_nets, int(np.random.default_rng(traj_ss).integers(2**31)))
        trajae_path = out_dir / "trajae.json"
        save_checkpoint(trajae_path, trajae.store, {**trajae.metadata(), "stage": stage})
        artifacts["trajae"] = trajae_path
        nets.trajae = trajae
        nets.ego = EgoPolicyNet(run_cfg.encoder, init_rng)
        metadata = {
            **nets.ego.metadata(),
            "stage": stage,
            "uses_latents": True,
            "trained_families": ["idm", "meta-rl"],
            "trajae_file": "trajae.json",
        }
        store = nets.ego.store

    plan = plan_for_stage(stage, run_cfg)
    t = run_cfg.train
    steps_per_iter = t.rollout_steps * t.n_envs
    n_iters = math.ceil(budget / steps_per_iter)
    learners = run_cfg.scenario.n_social if plan.learner == "social" else 1
    _schedule(store, run_cfg, stage, t.rollout_steps * t.n_envs * learners, n_iters)

    collector = RolloutCollector(run_cfg, plan, nets, collect_seed)
    metrics_path = out_dir / "metrics.csv"
    writer = _MetricsWriter(metrics_path)
    bad_counter = [0]
    try:
        for it in range(n_iters):
            batch = collector.collect(t.rollout_steps)
            res = ppo_update(nets, plan, batch, run_cfg, mb_rng, use_reg, bad_counter)
            if plan.learner == "social":
                returns = [ep.social_return for ep in batch.episodes]
            else:
                returns = [ep.ego_return for ep in batch.episodes]
            writer.row(
                iteration=it,
                env_steps=collector.total_env_steps,
                stage=stage,
                loss_total=repr(res.loss_total),
                loss_policy=repr(res.loss_policy),
                loss_value=repr(res.loss_value),
                entropy=repr(res.entropy),
                loss_reg=repr(res.loss_reg),
                mean_kl=repr(res.mean_kl),
                mean_return=repr(float(np.mean(returns)) if returns else float("nan")),
                episodes=len(batch.episodes),
                lr=repr(store.current_lr()),
            )
            if progress is not None:
                progress(stage, it, n_iters, res)
    finally:
        writer.close()

    ckpt_path = out_dir / "checkpoint.json"
    metadata["spawned_social_vehicles"] = len(collector.spawned_betas)
    metadata["env_steps"] = collector.total_env_steps
    save_checkpoint(ckpt_path, store, metadata)
    artifacts["checkpoint"] = ckpt_path
    artifacts["metrics"] = metrics_path
    return artifacts
