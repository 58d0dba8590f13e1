from __future__ import annotations

import numpy as np
import pytest

from tjunction.ad import Tensor, finite_difference_check, gather, log_softmax, softmax, tmean
from tjunction.nets import (
    EgoPolicyNet,
    EncoderConfig,
    SocialPolicyNet,
    TrajAutoencoder,
    ego_net_inputs,
    policy_step,
    sample_actions,
    social_net_inputs,
)

ANCHORS = (-1.0, 0.0, 1.0, 2.0, 3.0)


def _social_net(seed=0, dtype=np.float32, anchors=ANCHORS, cfg=None):
    return SocialPolicyNet(cfg or EncoderConfig(), anchors, np.random.default_rng(seed), dtype=dtype)


def _raw_rows(rng, b, r):
    """(B, R, 5) absolute observation rows with plausible ranges."""
    rows = np.empty((b, r, 5))
    rows[..., 0] = rng.uniform(-30, 30, (b, r))
    rows[..., 1] = rng.uniform(-12, 4, (b, r))
    rows[..., 2] = rng.uniform(-3, 3, (b, r))
    rows[..., 3] = rng.uniform(-3, 3, (b, r))
    rows[..., 4] = rng.uniform(-3, 3, (b, r))
    return rows


def test_features_exactly_permutation_invariant():
    rng = np.random.default_rng(1)
    net = _social_net()
    r = 7
    raw = _raw_rows(rng, 1, r)
    viewer = np.asarray([2])
    h = net.new_hidden(1)
    pool, self_rows = social_net_inputs(raw, viewer, dtype=net.dtype)
    base = net.features_np(pool, self_rows, h)
    for _ in range(10):
        others = [i for i in range(r) if i != 2]
        perm = list(range(r))
        shuffled = rng.permutation(others)
        for slot, src in zip(others, shuffled):
            perm[slot] = src
        raw_p = raw[:, perm, :]
        viewer_p = np.asarray([perm.index(2)])
        pool_p, self_p = social_net_inputs(raw_p, viewer_p, dtype=net.dtype)
        out = net.features_np(pool_p, self_p, h)
        assert np.array_equal(out, base)


def test_identical_observations_same_feature_different_state():
    rng = np.random.default_rng(2)
    net = _social_net()
    pool, self_rows = social_net_inputs(_raw_rows(rng, 1, 7), np.asarray([1]), dtype=net.dtype)
    h0 = net.new_hidden(1)
    h1 = net.features_np(pool, self_rows, h0)
    h2 = net.features_np(pool, self_rows, h1)
    # recurrent state evolves even though the per-step input is identical
    assert not np.array_equal(h1, h2)


def test_policy_output_normalized_for_all_heads():
    rng = np.random.default_rng(3)
    net = _social_net()
    viewer = rng.integers(0, 7, 16)
    pool, self_rows = social_net_inputs(_raw_rows(rng, 16, 7), viewer, dtype=net.dtype)
    h = net.new_hidden(16)
    beta = rng.uniform(-3, 3, 16)
    for head_id in (-1, 0, 1, 2, 3, 4):
        probs, values, _, _ = policy_step(net, pool, self_rows, h, np.full(16, head_id), beta)
        assert np.all(probs >= 0)
        assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-6
        assert values.shape == (16,)


def test_meta_head_continuous_in_beta():
    rng = np.random.default_rng(4)
    net = _social_net(dtype=np.float64)
    pool, self_rows = social_net_inputs(_raw_rows(rng, 1, 7), np.asarray([3]), dtype=np.float64)
    h = net.new_hidden(1)
    feat = Tensor(net.features_np(pool, self_rows, h))
    a, _ = net.head_forward("meta", feat, np.asarray([0.7]))
    b, _ = net.head_forward("meta", feat, np.asarray([0.7 + 1e-9]))
    assert np.max(np.abs(softmax(a).data - softmax(b).data)) < 1e-6


def test_backbone_size_independent_of_anchor_count():
    small = _social_net(anchors=(-1.0, 3.0))
    large = _social_net(anchors=ANCHORS)
    assert small.store.n_params("backbone") == large.store.n_params("backbone")
    assert large.store.n_params("head") > small.store.n_params("head")


def test_guiding_heads_are_isolated():
    rng = np.random.default_rng(5)
    net = _social_net()
    viewer = np.asarray([1, 2, 3, 4])
    pool, self_rows = social_net_inputs(_raw_rows(rng, 4, 7), viewer, dtype=net.dtype)
    h = net.new_hidden(4)
    beta = np.zeros(4)
    before = {hid: policy_step(net, pool, self_rows, h, np.full(4, hid), beta)[0] for hid in (-1, 1, 2)}
    for name in net.store.names():
        if name.startswith("head/guide0/"):
            net.store[name].data += 0.5
    after = {hid: policy_step(net, pool, self_rows, h, np.full(4, hid), beta)[0] for hid in (-1, 1, 2)}
    for hid in (-1, 1, 2):
        assert np.array_equal(before[hid], after[hid])
    changed = policy_step(net, pool, self_rows, h, np.full(4, 0), beta)[0]
    assert not np.array_equal(changed, before[1])


def test_unknown_head_rejected():
    net = _social_net()
    rng = np.random.default_rng(0)
    pool, self_rows = social_net_inputs(_raw_rows(rng, 1, 7), np.asarray([1]), dtype=net.dtype)
    feat = Tensor(net.features_np(pool, self_rows, net.new_hidden(1)))
    with pytest.raises(KeyError):
        net.head_forward("guide99", feat)
    with pytest.raises(ValueError):
        net.head_forward("meta", feat, None)


def test_ego_rows_include_latents_and_normalize():
    rng = np.random.default_rng(6)
    cfg = EncoderConfig()
    net = EgoPolicyNet(cfg, rng)
    raw = rng.uniform(-5, 5, (3, 7, 4))
    latents = rng.standard_normal((3, 7, cfg.latent_dim)).astype(np.float32)
    latents[:, 0] = 0.0
    pool, self_rows = ego_net_inputs(raw, latents)
    assert pool.shape == (21, 4 + cfg.latent_dim)
    assert self_rows.shape == (3, 4 + cfg.latent_dim)
    probs, values, newh, _ = policy_step(net, pool, self_rows, net.new_hidden(3))
    assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-6
    # permuting social rows together with their latents leaves the output alone
    perm = np.concatenate([[0], 1 + rng.permutation(6)])
    pool_p, self_p = ego_net_inputs(raw[:, perm], latents[:, perm])
    probs_p, _, _, _ = policy_step(net, pool_p, self_p, net.new_hidden(3))
    assert np.array_equal(probs, probs_p)


def test_zeroed_latents_change_ego_distribution():
    rng = np.random.default_rng(7)
    cfg = EncoderConfig()
    net = EgoPolicyNet(cfg, rng)
    raw = rng.uniform(-5, 5, (1, 7, 4))
    latents = rng.standard_normal((1, 7, cfg.latent_dim)).astype(np.float32)
    latents[:, 0] = 0.0
    p1, _, _, _ = policy_step(net, *ego_net_inputs(raw, latents), net.new_hidden(1))
    p2, _, _, _ = policy_step(net, *ego_net_inputs(raw, np.zeros_like(latents)), net.new_hidden(1))
    assert not np.allclose(p1, p2)


def test_social_net_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    net = _social_net(dtype=np.float64, anchors=(-1.0, 3.0))
    viewer = rng.integers(0, 7, 6)
    pool, self_rows = social_net_inputs(_raw_rows(rng, 6, 7), viewer, dtype=np.float64)
    h = net.new_hidden(6)
    beta = rng.uniform(-1, 3, 6)
    actions = rng.integers(0, 3, 6)

    def loss():
        feat = net.features(pool, self_rows, h)
        logits, value = net.head_forward("meta", feat, beta)
        lp = gather(log_softmax(logits), actions)
        g_logits, g_value = net.head_forward("guide0", feat)
        return -tmean(lp) + tmean(value * value) + tmean(g_logits * g_logits) + tmean(g_value)

    err = finite_difference_check(loss, net.store, n_coords=6, rng=np.random.default_rng(1))
    assert err < 1e-3


def test_ego_net_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    cfg = EncoderConfig()
    net = EgoPolicyNet(cfg, rng, dtype=np.float64)
    raw = rng.uniform(-5, 5, (4, 7, 4))
    latents = rng.standard_normal((4, 7, cfg.latent_dim))
    pool, self_rows = ego_net_inputs(raw, latents, dtype=np.float64)
    h = net.new_hidden(4)
    actions = rng.integers(0, 3, 4)

    def loss():
        feat = net.features(pool, self_rows, h)
        logits, value = net.head_forward(feat)
        return -tmean(gather(log_softmax(logits), actions)) + 0.5 * tmean(value * value)

    err = finite_difference_check(loss, net.store, n_coords=6, rng=np.random.default_rng(2))
    assert err < 1e-3


def test_trajae_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    cfg = EncoderConfig(history_len=5)
    ae = TrajAutoencoder(cfg, rng, dtype=np.float64)
    hist = rng.uniform(-10, 10, (3, 5, 4))
    err = finite_difference_check(lambda: ae.recon_loss(hist), ae.store, n_coords=6, rng=np.random.default_rng(3))
    assert err < 1e-3


def test_trajae_deterministic_and_loss_nonnegative():
    rng = np.random.default_rng(11)
    ae = TrajAutoencoder(EncoderConfig(), rng)
    hist = rng.uniform(-10, 10, (4, 10, 4))
    assert np.array_equal(ae.encode_np(hist), ae.encode_np(hist))
    assert float(ae.recon_loss(hist).data) >= 0.0
    with pytest.raises(ValueError):
        ae.encode(np.zeros((1, 0, 4)))


def test_recon_loss_zero_iff_perfect_reconstruction():
    # mean squared error of a perfect reconstruction is exactly zero
    x = Tensor(np.random.default_rng(0).standard_normal((5, 4)))
    diff = x - Tensor(x.data.copy())
    assert float(tmean(diff * diff).data) == 0.0


def test_trajae_training_reduces_loss_on_constant_velocity():
    rng = np.random.default_rng(12)
    cfg = EncoderConfig()
    ae = TrajAutoencoder(cfg, rng)
    ae.store.configure_schedule(base_lr=3e-3, total_updates=10**9)

    def make_batch(n):
        x0 = rng.uniform(-20, 20, (n, 1))
        v = rng.uniform(-3, 3, (n, 1))
        t = np.arange(cfg.history_len)[None, :]
        xs = x0 + v * t * 0.1
        ys = np.full_like(xs, -2.0)
        return np.stack([xs, ys, np.broadcast_to(v, xs.shape), np.zeros_like(xs)], axis=-1)

    probe = make_batch(16)
    before = float(ae.recon_loss(probe).data)
    for _ in range(150):
        ae.store.zero_grad()
        ae.recon_loss(make_batch(16)).backward()
        ae.store.adam_step(lr=3e-3)
    after = float(ae.recon_loss(probe).data)
    assert after < before


def test_latent_separates_behavior_styles():
    """Histories of yielding vs non-yielding traffic, probed at the moment the
    ego enters the corridor, should land in separable latent regions."""
    from tjunction.idm import PRESETS, idm_policy
    from tjunction.sim import Env, ScenarioConfig

    rng = np.random.default_rng(13)
    cfg = EncoderConfig()
    H = cfg.history_len

    def collect(style_name, n_eps, seed0):
        train_w, probe_w = [], []
        params = PRESETS[style_name]
        for ep in range(n_eps):
            env = Env(ScenarioConfig(seed=0), lambda r: 0.0)
            env.reset(seed0 + ep)
            buf = {i: [] for i in range(1, 7)}
            enter_t = target = None
            steps = 0
            while not env.done and steps < 120:
                actions = [2]  # scripted ego drives straight in
                for i in range(1, 7):
                    actions.append(idm_policy(env.observe(i), params))
                env.step(actions)
                if enter_t is None and env.state.ego.y > -4.5:
                    enter_t = steps
                    best = None
                    for i in range(1, 4):
                        d = 0.0 - env.state.social[i - 1].state.x
                        if 0 < d < 18 and (best is None or d < best[0]):
                            best = (d, i)
                    target = best[1] if best else None
                for i in range(1, 7):
                    v = env.state.social[i - 1].state
                    buf[i].append((v.x, v.y, v.vx, v.vy))
                steps += 1
            for i in range(1, 7):
                seq = buf[i]
                for t0 in range(0, len(seq) - H, 3):
                    train_w.append(seq[t0 : t0 + H])
            if enter_t is not None and target is not None and enter_t + H <= len(buf[target]):
                probe_w.append(buf[target][enter_t : enter_t + H])
        return np.asarray(train_w), np.asarray(probe_w)

    train_c, probe_c = collect("idm-conservative", 10, 500)
    train_a, probe_a = collect("idm-aggressive", 10, 900)
    assert len(probe_c) >= 3 and len(probe_a) >= 3
    ae = TrajAutoencoder(cfg, rng)
    data = np.concatenate([train_c, train_a], axis=0)
    order = rng.permutation(len(data))
    for it in range(600):
        sel = order[(it * 16) % len(data) : (it * 16) % len(data) + 16]
        if len(sel) == 0:
            continue
        ae.store.zero_grad()
        ae.recon_loss(data[sel]).backward()
        ae.store.adam_step(lr=3e-3)
    zc = ae.encode_np(probe_c)
    za = ae.encode_np(probe_a)
    inter = np.linalg.norm(zc.mean(axis=0) - za.mean(axis=0))
    intra = 0.5 * (
        np.linalg.norm(zc - zc.mean(axis=0), axis=1).mean()
        + np.linalg.norm(za - za.mean(axis=0), axis=1).mean()
    )
    assert inter > intra


def test_sample_actions_matches_probabilities():
    rng = np.random.default_rng(14)
    probs = np.asarray([[0.2, 0.3, 0.5]] * 20000)
    acts = sample_actions(probs, rng)
    freq = np.bincount(acts, minlength=3) / len(acts)
    assert np.max(np.abs(freq - probs[0])) < 0.02
