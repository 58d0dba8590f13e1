"""Clipped-surrogate policy optimization with generalized advantage
estimation and the guiding-policy distillation penalty.

Loss signs: the scalar returned by :func:`ppo_loss` is minimized. It is
``-surrogate + value_coef * value_mse - entropy_coef * entropy``, so
minimizing it raises the surrogate objective and the entropy while driving
value errors down. The regularization term added in the meta stage is the
*sum* over guided records of ``KL(guide || meta)`` and is clamped at zero
record-wise, so it can never be negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ad import ParamStore, Tensor, clip, concat, gather, log_softmax, minimum, no_grad, relu, softmax, take_rows, tmean, tsum
from ..ad import exp as texp
from ..nets import EgoPolicyNet, SocialPolicyNet
from .config import RunConfig
from .rollout import NetBundle, RolloutBatch, StagePlan

MAX_CONSECUTIVE_BAD_UPDATES = 5


def compute_gae(batch: RolloutBatch, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-record advantages and value targets, accumulated in float64.

    delta_t = r_t + gamma * V_{t+1} * (1 - done) - V_t
    A_t     = delta_t + gamma * lam * (1 - done) * A_{t+1}

    ``done`` is the agent's own terminal; truncated segment tails substitute
    the recorded bootstrap value for V_{t+1} with A_{t+1} = 0.
    """
    n = len(batch)
    adv = np.zeros(n, dtype=np.float64)
    value = batch.value.astype(np.float64)
    a_next: dict[int, float] = {}
    v_next: dict[int, float] = {}
    for i in range(n - 1, -1, -1):
        s = int(batch.stream[i])
        if batch.boundary[i]:
            nv = 0.0 if batch.terminal[i] else float(batch.next_value[i])
            an = 0.0
        else:
            nv = v_next[s]
            an = a_next[s]
        delta = batch.reward[i] + gamma * nv - value[i]
        adv[i] = delta + gamma * lam * an
        v_next[s] = value[i]
        a_next[s] = adv[i]
    targets = adv + value
    return adv, targets


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_loss(
    new_logp: Tensor,
    entropy_mean: Tensor,
    value: Tensor,
    old_logp: np.ndarray,
    advantages: np.ndarray,
    value_targets: np.ndarray,
    clip_eps: float,
    value_coef: float,
    entropy_coef: float,
) -> tuple[Tensor, dict[str, float]]:
    """Scalar PPO loss for one (sub)batch plus detached term values."""
    dtype = new_logp.dtype
    adv = np.asarray(advantages, dtype=dtype)
    ratio = texp(new_logp - Tensor(np.asarray(old_logp, dtype=dtype)))
    surr = minimum(ratio * adv, clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)
    policy_loss = -tmean(surr)
    diff = value - Tensor(np.asarray(value_targets, dtype=dtype).reshape(-1, 1))
    value_loss = tmean(diff * diff)
    total = policy_loss + value_coef * value_loss - entropy_coef * entropy_mean
    terms = {
        "policy": float(policy_loss.data),
        "value": float(value_loss.data),
        "entropy": float(entropy_mean.data),
    }
    return total, terms


def categorical_kl(target_log_probs: np.ndarray, log_probs: Tensor) -> Tensor:
    """Row-wise KL(target || model) for categorical distributions.

    ``target_log_probs`` is a constant (frozen guiding policy); gradient flows
    only through ``log_probs``. Zero-probability target entries contribute
    exactly zero. Each row is clamped at zero so float rounding can never
    produce a negative divergence.
    """
    lp = np.asarray(target_log_probs, dtype=log_probs.dtype)
    p = np.exp(lp)
    const = np.where(p > 0, p * np.where(np.isfinite(lp), lp, 0.0), 0.0).sum(axis=1)
    cross = tsum(Tensor(p) * log_probs, axis=1)
    return relu(Tensor(const) - cross)


def reg_loss(target_log_probs: np.ndarray, meta_log_probs: Tensor) -> Tensor:
    """Sum of guided-record KL terms (records already filtered to matches)."""
    if target_log_probs.shape[0] == 0:
        return Tensor(np.zeros((), dtype=meta_log_probs.dtype))
    return tsum(categorical_kl(target_log_probs, meta_log_probs))


@dataclass
class UpdateResult:
    loss_total: float = 0.0
    loss_policy: float = 0.0
    loss_value: float = 0.0
    entropy: float = 0.0
    loss_reg: float = 0.0
    mean_kl: float = 0.0
    minibatches: int = 0
    dropped: int = 0


def _social_head_terms(net: SocialPolicyNet, feat: Tensor, batch: RolloutBatch, idx: np.ndarray):
    """Per-head-group (sub_positions, log_probs, taken_logp, value) terms."""
    groups = []
    heads = batch.head[idx]
    for head_id in np.unique(heads):
        sub = np.where(heads == head_id)[0]
        sub_feat = take_rows(feat, sub)
        if head_id < 0:
            logits, value = net.head_forward("meta", sub_feat, batch.beta[idx][sub])
        else:
            logits, value = net.head_forward(f"guide{head_id}", sub_feat)
        ls = log_softmax(logits)
        lp = gather(ls, batch.action[idx][sub])
        groups.append((sub, ls, lp, value))
    return groups


def guide_targets(net: SocialPolicyNet, feats: np.ndarray, anchors_of: np.ndarray) -> np.ndarray:
    """Frozen guiding-head log-probs for each matched record (no gradients)."""
    out = np.zeros((len(anchors_of), 3), dtype=np.float32)
    with no_grad():
        for k in np.unique(anchors_of):
            if k < 0:
                continue
            sub = np.where(anchors_of == k)[0]
            logits, _ = net.head_forward(f"guide{k}", Tensor(feats[sub]))
            out[sub] = log_softmax(logits).data
    return out


class ConsecutiveBadUpdates(RuntimeError):
    pass


def ppo_update(
    nets: NetBundle,
    plan: StagePlan,
    batch: RolloutBatch,
    run_cfg: RunConfig,
    mb_rng: np.random.Generator,
    use_reg: bool,
    bad_update_counter: list[int],
) -> UpdateResult:
    """One full PPO pass (epochs x minibatches) over a rollout batch."""
    t = run_cfg.train
    learner = plan.learner
    net = nets.social if learner == "social" else nets.ego
    store: ParamStore = net.store

    adv, targets = compute_gae(batch, t.gamma, t.gae_lambda)
    batch.advantage = normalize_advantages(adv)
    batch.value_target = targets.astype(np.float32)

    n = len(batch)
    rows_flat = batch.rows.reshape(n * batch.rows.shape[1], batch.rows.shape[2])
    r = batch.rows.shape[1]

    backbone_trainable = any(
        name.startswith("backbone") for name in store.trainable_names()
    )
    feats_cache = None
    if not backbone_trainable:
        # Frozen backbone: compute features once for the whole batch.
        chunks = []
        for lo in range(0, n, 4096):
            hi = min(n, lo + 4096)
            chunks.append(
                net.features_np(rows_flat[lo * r : hi * r], batch.self_row[lo:hi], batch.hidden[lo:hi])
            )
        feats_cache = np.concatenate(chunks) if chunks else np.empty((0, 0), dtype=np.float32)

    reg_targets = None
    kl_monitor = 0.0
    if use_reg and learner == "social":
        assert feats_cache is not None, "guiding heads must be frozen in the meta stage"
        reg_targets = guide_targets(nets.social, feats_cache, batch.anchor)

    result = UpdateResult()
    order = np.arange(n)
    for _epoch in range(t.epochs):
        mb_rng.shuffle(order)
        for lo in range(0, n, t.minibatch_size):
            idx = order[lo : lo + t.minibatch_size]
            b = len(idx)
            store.zero_grad()

            if feats_cache is not None:
                feat = Tensor(feats_cache[idx])
            else:
                mb_rows = batch.rows[idx].reshape(b * r, -1)
                feat = net.features(mb_rows, batch.self_row[idx], batch.hidden[idx])

            if learner == "social":
                groups = _social_head_terms(net, feat, batch, idx)
            else:
                logits, value = net.head_forward(feat)
                ls = log_softmax(logits)
                groups = [(np.arange(b), ls, gather(ls, batch.action[idx]), value)]

            # combine per-group terms into batch means
            total = None
            pol_sum = val_sum = ent_sum = 0.0
            ent_terms = []
            for sub, ls, lp, value in groups:
                gi = idx[sub]
                probs = texp(ls)
                ent = -tsum(probs * ls) * (1.0 / b)
                ratio = texp(lp - Tensor(batch.logp[gi].astype(net.dtype)))
                a = batch.advantage[gi].astype(net.dtype)
                surr = minimum(ratio * a, clip(ratio, 1.0 - t.clip_eps, 1.0 + t.clip_eps) * a)
                pol = -tsum(surr) * (1.0 / b)
                diff = value - Tensor(batch.value_target[gi].reshape(-1, 1).astype(net.dtype))
                val = tsum(diff * diff) * (1.0 / b)
                part = pol + t.value_coef * val - t.entropy_coef * ent
                total = part if total is None else total + part
                pol_sum += float(pol.data)
                val_sum += float(val.data)
                ent_sum += float(ent.data)
                ent_terms.append(ent)

            reg_val = 0.0
            if reg_targets is not None:
                matched = np.where(batch.anchor[idx] >= 0)[0]
                if len(matched):
                    sub_feat = take_rows(feat, matched)
                    gi = idx[matched]
                    logits, _ = net.head_forward("meta", sub_feat, batch.beta[gi])
                    reg = reg_loss(reg_targets[gi], log_softmax(logits))
                    reg_val = float(reg.data)
                    kl_monitor += reg_val
                    total = total + run_cfg.anchors.reg_weight * reg

            loss_val = float(total.data)
            if not np.isfinite(loss_val):
                result.dropped += 1
                bad_update_counter[0] += 1
                if bad_update_counter[0] >= MAX_CONSECUTIVE_BAD_UPDATES:
                    raise ConsecutiveBadUpdates(
                        f"{bad_update_counter[0]} consecutive non-finite losses"
                    )
                continue
            total.backward()
            if store.adam_step():
                bad_update_counter[0] = 0
            else:
                result.dropped += 1
                bad_update_counter[0] += 1
                if bad_update_counter[0] >= MAX_CONSECUTIVE_BAD_UPDATES:
                    raise ConsecutiveBadUpdates(
                        f"{bad_update_counter[0]} consecutive non-finite gradients"
                    )
                continue

            result.minibatches += 1
            result.loss_total += loss_val
            result.loss_policy += pol_sum
            result.loss_value += val_sum
            result.entropy += ent_sum
            result.loss_reg += reg_val

    m = max(1, result.minibatches)
    result.loss_total /= m
    result.loss_policy /= m
    result.loss_value /= m
    result.entropy /= m
    result.loss_reg /= m
    matched_total = int((batch.anchor >= 0).sum()) * t.epochs
    result.mean_kl = kl_monitor / matched_total if matched_total else 0.0
    return result
