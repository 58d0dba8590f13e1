"""Vectorized rollout collection for every pipeline stage and for evaluation.

One collector drives ``n_envs`` games in lockstep. Per step it batches all
network-controlled agents across environments into a single forward pass,
steps each game, and records per-agent transition tuples for whichever side
is learning (or being measured).

Stream bookkeeping: every (env, agent) pair is a record stream. A stream
segment ends either with the agent's own terminal flag (goal/fail, no
bootstrap) or by truncation (episode end caused by someone else, timeout, or
the collection cutoff), in which case V(next observation) is recorded for
bootstrapping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..idm import PRESETS, IdmGeometry, idm_policy
from ..nets import (
    EgoPolicyNet,
    SocialPolicyNet,
    TrajAutoencoder,
    ego_net_inputs,
    policy_step,
    sample_actions,
    social_net_inputs,
)
from ..sim import Env, RUNNING
from ..sim.env import _state_rows
from ..sim.types import Observation
from .config import PreferenceAnchors, RunConfig

IDM_STYLE_NAMES = ("idm-conservative", "idm-aggressive")


def anchor_choice(anchors: PreferenceAnchors, rng: np.random.Generator) -> float:
    return anchors.values[int(rng.integers(0, len(anchors.values)))]


@dataclass
class StagePlan:
    name: str
    learner: str | None  # "ego" | "social" | None
    ego_mode: str  # "learning" | "frozen" | "stopped"
    social_mode: str  # "idm" | "learning" | "frozen-meta" | "mixed"
    beta_mode: str  # "anchors" | "range" | "const" | "zero"
    beta_lo: float = -1.0
    beta_hi: float = 3.0
    beta_const: float = 0.0
    idm_mix: float = 0.5
    use_latents: bool = False
    record_social: bool = False
    record_ego: bool = False
    track_history: bool = False  # maintain per-vehicle state windows


def plan_for_stage(stage: str, run_cfg: RunConfig) -> StagePlan:
    t = run_cfg.train
    if stage == "ego-initial":
        return StagePlan(stage, "ego", ego_mode="learning", social_mode="idm", beta_mode="zero", record_ego=True)
    if stage == "guiding":
        return StagePlan(
            stage, "social", ego_mode="frozen", social_mode="learning", beta_mode="anchors", record_social=True
        )
    if stage == "meta":
        return StagePlan(
            stage, "social", ego_mode="frozen", social_mode="learning", beta_mode="range",
            beta_lo=t.beta_min, beta_hi=t.beta_max, record_social=True,
        )
    if stage == "ego-final":
        return StagePlan(
            stage, "ego", ego_mode="learning", social_mode="mixed", beta_mode="range",
            beta_lo=t.beta_min, beta_hi=t.beta_max, idm_mix=t.idm_mix, use_latents=True,
            record_ego=True, track_history=True,
        )
    raise ValueError(f"unknown stage {stage!r}")


@dataclass
class NetBundle:
    ego: EgoPolicyNet | None = None
    social: SocialPolicyNet | None = None
    trajae: TrajAutoencoder | None = None


@dataclass
class EpisodeResult:
    outcome: str  # "success" | "collision" | "timeout"
    steps: int
    ego_return: float
    social_return: float
    was_idm: bool


@dataclass
class RolloutBatch:
    rows: np.ndarray  # (N, R, D) float32 pooled network inputs (viewer-relative)
    self_row: np.ndarray  # (N, D) float32 absolute self inputs
    viewer: np.ndarray  # (N,) int64
    hidden: np.ndarray  # (N, H) float32 recurrent state before the step
    beta: np.ndarray  # (N,) float32
    action: np.ndarray  # (N,) int64
    logp: np.ndarray  # (N,) float32
    reward: np.ndarray  # (N,) float64
    value: np.ndarray  # (N,) float32
    terminal: np.ndarray  # (N,) bool: the agent's own goal/fail
    boundary: np.ndarray  # (N,) bool: last record of its stream segment
    next_value: np.ndarray  # (N,) float32: bootstrap value at truncated boundaries
    anchor: np.ndarray  # (N,) int64: matched guiding anchor, -1 when none
    head: np.ndarray  # (N,) int64: -1 = meta head, k = guiding head k
    stream: np.ndarray  # (N,) int64
    advantage: np.ndarray | None = None
    value_target: np.ndarray | None = None
    episodes: list[EpisodeResult] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.action)


class _Column:
    def __init__(self):
        self.chunks = []

    def push(self, arr):
        self.chunks.append(np.asarray(arr))

    def cat(self, dtype=None):
        if not self.chunks:
            return np.empty(0, dtype=dtype)
        out = np.concatenate(self.chunks)
        return out.astype(dtype, copy=False) if dtype is not None else out


class RolloutCollector:
    def __init__(
        self,
        run_cfg: RunConfig,
        plan: StagePlan,
        nets: NetBundle,
        seed: int,
        n_envs: int | None = None,
    ):
        self.run_cfg = run_cfg
        self.plan = plan
        self.nets = nets
        self.scenario = run_cfg.scenario
        self.anchors = run_cfg.anchors
        self.n_envs = n_envs or run_cfg.train.n_envs
        self.n_social = self.scenario.n_social
        self.rows_per_obs = self.n_social + 1
        self.geometry = IdmGeometry(
            vehicle_length=self.scenario.vehicle_length,
            vehicle_width=self.scenario.vehicle_width,
            lane_width=self.scenario.lane_width,
            dt=self.scenario.dt,
        )

        children = np.random.SeedSequence(seed).spawn(2 + self.n_envs)
        self.action_rng = np.random.default_rng(children[0])
        self.style_rng = np.random.default_rng(children[1])
        self.env_seed_rngs = [np.random.default_rng(c) for c in children[2:]]

        self.is_idm_episode = np.zeros(self.n_envs, dtype=bool)
        self.idm_styles = np.zeros((self.n_envs, self.n_social), dtype=np.int64)
        self._episode_seeds = [0] * self.n_envs
        self.envs = [Env(self.scenario, self._make_sampler(e)) for e in range(self.n_envs)]

        h_width = run_cfg.encoder.recurrent_width
        self.social_h = np.zeros((self.n_envs, max(1, self.n_social), h_width), dtype=np.float32)
        self.ego_h = np.zeros((self.n_envs, h_width), dtype=np.float32)
        hist_len = run_cfg.encoder.history_len
        self.hist = np.zeros((self.n_envs, max(1, self.n_social), hist_len, 4), dtype=np.float64)
        self.hist_age = np.zeros((self.n_envs, max(1, self.n_social)), dtype=np.int64)
        self.anchor_ids = np.full((self.n_envs, max(1, self.n_social)), -1, dtype=np.int64)
        self.ego_ret = np.zeros(self.n_envs)
        self.social_ret = np.zeros(self.n_envs)
        self.ep_steps = np.zeros(self.n_envs, dtype=np.int64)
        self.total_env_steps = 0
        self.spawned_betas: list[float] = []
        self._pending_bootstraps: dict[int, float] = {}
        self.trace_dir: Path | None = None
        self.max_traces = 0
        self._traces_written = 0
        self._trace_files: dict[int, tuple] = {}

        for e in range(self.n_envs):
            self._reset_env(e)

    def enable_tracing(self, directory: str | Path, limit: int) -> None:
        """Archive the next ``limit`` episodes as JSONL traces."""
        self.trace_dir = Path(directory)
        self.trace_dir.mkdir(parents=True, exist_ok=True)
        self.max_traces = limit
        for e in range(self.n_envs):
            self._open_trace(e)

    def _sampler_spec(self, e: int) -> dict:
        plan = self.plan
        if plan.beta_mode == "zero" or self.is_idm_episode[e]:
            return {"mode": "zero"}
        if plan.beta_mode == "anchors":
            return {"mode": "anchors", "values": list(self.anchors.values)}
        if plan.beta_mode == "const":
            return {"mode": "const", "value": plan.beta_const}
        return {"mode": "range", "lo": plan.beta_lo, "hi": plan.beta_hi}

    def _open_trace(self, e: int) -> None:
        if self.trace_dir is None or self._traces_written >= self.max_traces:
            return
        from ..sim import TraceWriter

        path = self.trace_dir / f"trace-{self._traces_written:04d}.jsonl"
        fh = open(path, "w")
        writer = TraceWriter(fh)
        writer.write_header(self.envs[e].state, seed=self._episode_seeds[e], sampler_spec=self._sampler_spec(e))
        self._trace_files[e] = (writer, fh)
        self._traces_written += 1

    def _close_trace(self, e: int) -> None:
        entry = self._trace_files.pop(e, None)
        if entry is not None:
            entry[1].close()

    # ------------------------------------------------------------------ setup

    def _make_sampler(self, e: int):
        plan = self.plan

        def sampler(rng: np.random.Generator) -> float:
            if plan.beta_mode == "zero" or self.is_idm_episode[e]:
                return 0.0
            if plan.beta_mode == "anchors":
                return anchor_choice(self.anchors, rng)
            if plan.beta_mode == "const":
                return float(plan.beta_const)
            return float(rng.uniform(plan.beta_lo, plan.beta_hi))

        return sampler

    def _reset_env(self, e: int) -> None:
        if self.plan.social_mode == "mixed":
            self.is_idm_episode[e] = bool(self.style_rng.random() < self.plan.idm_mix)
        else:
            self.is_idm_episode[e] = self.plan.social_mode == "idm"
        if self.is_idm_episode[e] and self.n_social:
            self.idm_styles[e] = (self.style_rng.random(self.n_social) >= 0.5).astype(np.int64)
        seed = int(self.env_seed_rngs[e].integers(0, 2**63 - 1))
        self._episode_seeds[e] = seed
        state = self.envs[e].reset(seed)
        self.social_h[e] = 0.0
        self.ego_h[e] = 0.0
        self.ego_ret[e] = 0.0
        self.social_ret[e] = 0.0
        self.ep_steps[e] = 0
        for s, sv in enumerate(state.social):
            self.spawned_betas.append(sv.beta)
            self.anchor_ids[e, s] = self._match_anchor(sv.beta)
            v = sv.state
            self.hist[e, s] = (v.x, v.y, v.vx, v.vy)
            self.hist_age[e, s] = 1

    def _match_anchor(self, beta: float) -> int:
        if self.plan.beta_mode == "zero" or self.is_idm_episode.all() and self.plan.social_mode == "idm":
            return -1
        m = self.anchors.match(beta)
        return -1 if m is None else m

    def _respawn_slot(self, e: int, s: int) -> None:
        self.social_h[e, s] = 0.0
        v = self.envs[e].state.social[s].state
        self.hist[e, s] = (v.x, v.y, v.vx, v.vy)
        self.hist_age[e, s] = 1
        # the slot's preference persists across respawns, so its anchor does too

    # ------------------------------------------------------- feature assembly

    def _social_inputs(self, env_ids, raw_by_env: dict[int, np.ndarray]):
        """Pool/self inputs + viewer/hidden/beta/head arrays, slot-major per env."""
        n = self.n_social
        stacked = np.stack([raw_by_env[e] for e in env_ids])  # (E', R, 5)
        tiled = np.repeat(stacked[:, None], n, axis=1).reshape(len(env_ids) * n, self.rows_per_obs, 5)
        viewer = np.tile(np.arange(1, n + 1), len(env_ids))
        pool, self_rows = social_net_inputs(tiled, viewer)
        betas = np.asarray(
            [sv.beta for e in env_ids for sv in self.envs[e].state.social], dtype=np.float32
        )
        hidden = self.social_h[np.asarray(env_ids)].reshape(len(env_ids) * n, -1)
        if self.plan.beta_mode == "anchors":
            heads = self.anchor_ids[np.asarray(env_ids)].reshape(-1)
        else:
            heads = np.full(len(env_ids) * n, -1, dtype=np.int64)
        return pool, self_rows, viewer, hidden, betas, heads

    def _latents_for(self, env_ids) -> np.ndarray:
        """(E', R, L) latent traits; zeros until a slot has a full history."""
        cfg = self.run_cfg.encoder
        ids = np.asarray(env_ids)
        latents = np.zeros((len(ids), self.rows_per_obs, cfg.latent_dim), dtype=np.float32)
        if self.plan.use_latents and self.nets.trajae is not None and self.n_social:
            ready = np.argwhere(self.hist_age[ids] >= cfg.history_len)
            if len(ready):
                windows = self.hist[ids[ready[:, 0]], ready[:, 1]]
                z = self.nets.trajae.encode_np(windows)
                latents[ready[:, 0], ready[:, 1] + 1] = z
        return latents

    def _ego_inputs(self, env_ids, raw_by_env: dict[int, np.ndarray]):
        latents = self._latents_for(env_ids)
        phys = np.stack([raw_by_env[e][:, :4] for e in env_ids])
        return ego_net_inputs(phys, latents)

    # --------------------------------------------------------------- main loop

    def collect(self, n_steps: int) -> RolloutBatch:
        plan = self.plan
        n, r = self.n_social, self.rows_per_obs
        names = (
            "rows", "self_row", "viewer", "hidden", "beta", "action", "logp", "reward",
            "value", "terminal", "anchor", "head", "stream",
        )
        cols = {name: _Column() for name in names}
        episodes: list[EpisodeResult] = []
        last_record: dict[int, int] = {}
        self._pending_bootstraps = {}
        n_written = 0

        def push(kind, env_ids, rows, self_rows, viewer, hidden, beta, action, logp, value, heads):
            nonlocal n_written
            b = len(action)
            cols["rows"].push(rows.reshape(b, r, -1))
            cols["self_row"].push(self_rows)
            cols["viewer"].push(viewer)
            cols["hidden"].push(hidden)
            cols["beta"].push(beta)
            cols["action"].push(action)
            cols["logp"].push(logp)
            cols["value"].push(value)
            cols["head"].push(heads)
            if kind == "social":
                anchor = np.concatenate([self.anchor_ids[e] for e in env_ids])
                stream = np.concatenate([e * (n + 1) + 1 + np.arange(n) for e in env_ids])
            else:
                anchor = np.full(b, -1, dtype=np.int64)
                stream = np.asarray(env_ids) * (n + 1)
            cols["anchor"].push(anchor)
            cols["stream"].push(stream)
            for j, srm in enumerate(stream):
                last_record[int(srm)] = n_written + j
            n_written += b

        for _ in range(n_steps):
            raw_by_env = {e: _state_rows(self.envs[e].state) for e in range(self.n_envs)}

            rl_envs = [e for e in range(self.n_envs) if not self.is_idm_episode[e]]
            rl_set = set(rl_envs)
            social_actions = np.zeros((self.n_envs, max(1, n)), dtype=np.int64)
            social_rec = None
            if n and rl_envs and plan.social_mode in ("learning", "frozen-meta", "mixed"):
                pool, self_rows, viewer, hidden, betas, heads = self._social_inputs(rl_envs, raw_by_env)
                probs, values, feat, _ = policy_step(self.nets.social, pool, self_rows, hidden, heads, betas)
                acts = sample_actions(probs, self.action_rng)
                logp = np.log(probs[np.arange(len(acts)), acts]).astype(np.float32)
                for j, e in enumerate(rl_envs):
                    social_actions[e] = acts[j * n : (j + 1) * n]
                    self.social_h[e] = feat[j * n : (j + 1) * n]
                if plan.record_social:
                    social_rec = (rl_envs, pool, self_rows, viewer, hidden, betas, acts, logp, values, heads)
            if n:
                for e in range(self.n_envs):
                    if self.is_idm_episode[e]:
                        obs_rows = raw_by_env[e]
                        for s in range(n):
                            params = PRESETS[IDM_STYLE_NAMES[self.idm_styles[e, s]]]
                            social_actions[e, s] = idm_policy(
                                Observation(viewer=s + 1, rows=obs_rows), params, self.geometry
                            )

            ego_actions = np.zeros(self.n_envs, dtype=np.int64)
            ego_rec = None
            if plan.ego_mode in ("learning", "frozen"):
                all_envs = list(range(self.n_envs))
                pool, self_rows = self._ego_inputs(all_envs, raw_by_env)
                viewer = np.zeros(self.n_envs, dtype=np.int64)
                hidden_before = self.ego_h.copy()
                probs, values, feat, _ = policy_step(self.nets.ego, pool, self_rows, hidden_before)
                ego_actions = sample_actions(probs, self.action_rng)
                logp = np.log(probs[np.arange(self.n_envs), ego_actions]).astype(np.float32)
                self.ego_h = feat
                if plan.record_ego:
                    ego_rec = (pool, self_rows, viewer, hidden_before, ego_actions, logp, values)

            if social_rec is not None:
                env_ids, pool, self_rows, viewer, hidden, betas, acts, logp, values, heads = social_rec
                push("social", env_ids, pool, self_rows, viewer, hidden, betas, acts, logp, values, heads)
            if ego_rec is not None:
                pool, self_rows, viewer, hidden, acts, logp, values = ego_rec
                push(
                    "ego", np.arange(self.n_envs), pool, self_rows, viewer, hidden,
                    np.zeros(self.n_envs, dtype=np.float32), acts, logp, values,
                    np.full(self.n_envs, -1, dtype=np.int64),
                )

            social_rewards, social_terms = [], []
            ego_rewards, ego_terms = [], []
            done_envs = []
            for e in range(self.n_envs):
                env = self.envs[e]
                joint = [int(ego_actions[e])] + list(social_actions[e][:n])
                out = env.step(joint)
                self.ep_steps[e] += 1
                self.total_env_steps += 1
                self.ego_ret[e] += out.rewards[0]
                if n:
                    self.social_ret[e] += float(out.rewards[1:].mean())
                if e in self._trace_files:
                    self._trace_files[e][0].write_step(out, joint)

                if social_rec is not None and e in rl_set:
                    social_rewards.append(out.rewards[1:])
                    social_terms.append([f != RUNNING for f in out.flags[1:]])
                if ego_rec is not None:
                    ego_rewards.append(out.rewards[:1])
                    ego_terms.append([out.flags[0] != RUNNING])

                if plan.track_history and n:
                    self.hist[e, :, :-1] = self.hist[e, :, 1:]
                    self.hist[e, :, -1] = [
                        (sv.state.x, sv.state.y, sv.state.vx, sv.state.vy) for sv in env.state.social
                    ]
                    self.hist_age[e] += 1
                for s in range(n):
                    if out.flags[s + 1] != RUNNING:
                        self._respawn_slot(e, s)

                if out.episode_done:
                    flag = out.flags[0]
                    outcome = "success" if flag == "goal" else ("collision" if flag == "fail" else "timeout")
                    episodes.append(
                        EpisodeResult(
                            outcome=outcome,
                            steps=int(self.ep_steps[e]),
                            ego_return=float(self.ego_ret[e]),
                            social_return=float(self.social_ret[e]),
                            was_idm=bool(self.is_idm_episode[e]),
                        )
                    )
                    done_envs.append(e)

            if social_rec is not None and social_rewards:
                cols["reward"].push(np.concatenate(social_rewards))
                cols["terminal"].push(np.concatenate(social_terms))
            if ego_rec is not None and ego_rewards:
                cols["reward"].push(np.concatenate(ego_rewards))
                cols["terminal"].push(np.concatenate(ego_terms))

            for e in done_envs:
                self._close_trace(e)
                self._record_bootstraps(e, last_record)
                self._reset_env(e)
                self._open_trace(e)

        for e in range(self.n_envs):
            self._record_bootstraps(e, last_record)

        batch = RolloutBatch(
            rows=cols["rows"].cat(np.float32),
            self_row=cols["self_row"].cat(np.float32),
            viewer=cols["viewer"].cat(np.int64),
            hidden=cols["hidden"].cat(np.float32),
            beta=cols["beta"].cat(np.float32),
            action=cols["action"].cat(np.int64),
            logp=cols["logp"].cat(np.float32),
            reward=cols["reward"].cat(np.float64),
            value=cols["value"].cat(np.float32),
            terminal=cols["terminal"].cat(bool),
            boundary=np.zeros(n_written, dtype=bool),
            next_value=np.zeros(n_written, dtype=np.float32),
            anchor=cols["anchor"].cat(np.int64),
            head=cols["head"].cat(np.int64),
            stream=cols["stream"].cat(np.int64),
            episodes=episodes,
        )
        self._finalize_boundaries(batch)
        return batch

    def _record_bootstraps(self, e: int, last_record: dict[int, int]) -> None:
        """Capture V(s_next) for this env's streams at a truncation point."""
        plan = self.plan
        n = self.n_social
        raw = {e: _state_rows(self.envs[e].state)}
        if plan.record_social and n and not self.is_idm_episode[e]:
            pool, self_rows, viewer, hidden, betas, heads = self._social_inputs([e], raw)
            _, values, _, _ = policy_step(self.nets.social, pool, self_rows, hidden, heads, betas)
            for s in range(n):
                idx = last_record.get(e * (n + 1) + 1 + s)
                if idx is not None:
                    self._pending_bootstraps[idx] = float(values[s])
        if plan.record_ego:
            pool, self_rows = self._ego_inputs([e], raw)
            _, values, _, _ = policy_step(self.nets.ego, pool, self_rows, self.ego_h[e : e + 1])
            idx = last_record.get(e * (n + 1))
            if idx is not None:
                self._pending_bootstraps[idx] = float(values[0])

    def _finalize_boundaries(self, batch: RolloutBatch) -> None:
        if len(batch) == 0:
            return
        batch.boundary |= batch.terminal
        for idx, val in self._pending_bootstraps.items():
            if not batch.terminal[idx]:
                batch.boundary[idx] = True
                batch.next_value[idx] = val
        self._pending_bootstraps = {}
