"""Policy/value networks and the trajectory autoencoder.

All networks share the same observation encoder shape: a per-row embedding
MLP, an exactly permutation-invariant mean pool over rows, concatenation of
the viewer's own row embedding, and a gated recurrent cell whose hidden state
doubles as the step feature.

The social network carries one policy/value head pair per guiding anchor plus
a preference-conditioned meta head (the anchor heads bake their preference in;
only the meta head consumes beta as an input). The ego network has a single
head pair and reads observation rows augmented with per-vehicle latent traits
from the trajectory autoencoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ad import (
    ParamStore,
    Tensor,
    affine,
    concat,
    log_softmax,
    matmul,
    mean_pool_rows,
    mul,
    no_grad,
    sigmoid,
    softmax,
    take_rows,
    tanh,
    tmean,
    tsum,
)
from .sim.types import N_ACTIONS

# Fixed feature scaling so raw meters / m/s / preference inputs land near unit
# scale: positions /30, velocities /3, preference /3.
POS_SCALE = 1.0 / 30.0
VEL_SCALE = 1.0 / 3.0
BETA_SCALE = 1.0 / 3.0

# Initial logit bias on the top-speed action. A near-uniform fresh policy
# almost never samples a completed crossing (it crashes or idles first), so
# goal rewards would never enter the early gradient signal; starting from
# "drive unless told otherwise" makes both outcomes reachable from the first
# rollouts.
DRIVE_BIAS = 1.5


@dataclass(frozen=True)
class EncoderConfig:
    embed_width: int = 32
    pooled_width: int = 32
    recurrent_width: int = 64
    latent_dim: int = 4
    history_len: int = 10

    def validate(self) -> None:
        for name in ("embed_width", "pooled_width", "recurrent_width", "latent_dim", "history_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"EncoderConfig.{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "embed_width": self.embed_width,
            "pooled_width": self.pooled_width,
            "recurrent_width": self.recurrent_width,
            "latent_dim": self.latent_dim,
            "history_len": self.history_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype, scale: float = 1.0) -> np.ndarray:
    limit = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def _zeros(n: int, dtype) -> np.ndarray:
    return np.zeros(n, dtype=dtype)


def _add_mlp(store: ParamStore, prefix: str, sizes: list[int], rng, dtype, final_scale: float = 1.0) -> None:
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        scale = final_scale if i == len(sizes) - 1 else 1.0
        store.add(f"{prefix}/W{i}", _glorot(rng, fi, fo, dtype, scale))
        store.add(f"{prefix}/b{i}", _zeros(fo, dtype))


def _mlp(store: ParamStore, prefix: str, x: Tensor, n_layers: int) -> Tensor:
    out = x
    for i in range(1, n_layers + 1):
        out = affine(out, store[f"{prefix}/W{i}"], store[f"{prefix}/b{i}"])
        if i < n_layers:
            out = tanh(out)
    return out


def _add_gru(store: ParamStore, prefix: str, in_width: int, width: int, rng, dtype) -> None:
    for gate in ("z", "r", "n"):
        store.add(f"{prefix}/W{gate}", _glorot(rng, in_width, width, dtype))
        store.add(f"{prefix}/U{gate}", _glorot(rng, width, width, dtype))
        store.add(f"{prefix}/b{gate}", _zeros(width, dtype))


# Raw-ndarray twins of the graph ops for rollout-time inference. They use the
# same formulas as the engine primitives, so values match the graph forward.


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _mean_pool_np(x: np.ndarray, group: int) -> np.ndarray:
    blocks = x.reshape(x.shape[0] // group, group, x.shape[1]).astype(np.float64)
    blocks.sort(axis=1)
    return (blocks.sum(axis=1) / group).astype(x.dtype)


def _mlp_np(store: ParamStore, prefix: str, x: np.ndarray, n_layers: int) -> np.ndarray:
    out = x
    for i in range(1, n_layers + 1):
        out = out @ store[f"{prefix}/W{i}"].data + store[f"{prefix}/b{i}"].data
        if i < n_layers:
            out = np.tanh(out)
    return out


def gru_step_np(store: ParamStore, prefix: str, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    z = _sigmoid_np(x @ store[f"{prefix}/Wz"].data + store[f"{prefix}/bz"].data + h @ store[f"{prefix}/Uz"].data)
    r = _sigmoid_np(x @ store[f"{prefix}/Wr"].data + store[f"{prefix}/br"].data + h @ store[f"{prefix}/Ur"].data)
    n = np.tanh(x @ store[f"{prefix}/Wn"].data + store[f"{prefix}/bn"].data + (r * h) @ store[f"{prefix}/Un"].data)
    return (1.0 - z) * n + z * h


def gru_step(store: ParamStore, prefix: str, x: Tensor, h: Tensor) -> Tensor:
    z = sigmoid(affine(x, store[f"{prefix}/Wz"], store[f"{prefix}/bz"]) + matmul(h, store[f"{prefix}/Uz"]))
    r = sigmoid(affine(x, store[f"{prefix}/Wr"], store[f"{prefix}/br"]) + matmul(h, store[f"{prefix}/Ur"]))
    n = tanh(affine(x, store[f"{prefix}/Wn"], store[f"{prefix}/bn"]) + matmul(mul(r, h), store[f"{prefix}/Un"]))
    return (1.0 - z) * n + z * h


class _EncoderMixin:
    """Interaction encoder + recurrent cell shared by both policy networks.

    Mirrors a star graph centered on the viewer: every vehicle contributes a
    viewer-relative row (positions shifted by the viewer's position) to an
    exactly permutation-invariant mean pool, while the viewer's own absolute
    state feeds a separate self embedding. Both join a gated recurrent cell
    whose hidden state doubles as the step feature.
    """

    store: ParamStore
    cfg: EncoderConfig
    row_dim: int
    dtype: np.dtype

    def _add_backbone(self, rng) -> None:
        cfg = self.cfg
        _add_mlp(self.store, "backbone/embed", [self.row_dim, cfg.embed_width], rng, self.dtype)
        _add_mlp(self.store, "backbone/self", [self.row_dim, cfg.embed_width], rng, self.dtype)
        _add_mlp(self.store, "backbone/pool", [cfg.embed_width, cfg.pooled_width], rng, self.dtype)
        _add_gru(self.store, "backbone/gru", cfg.pooled_width + cfg.embed_width, cfg.recurrent_width, rng, self.dtype)

    def new_hidden(self, n: int) -> np.ndarray:
        return np.zeros((n, self.cfg.recurrent_width), dtype=self.dtype)

    def features(self, pool_flat: np.ndarray, self_rows: np.ndarray, hidden: np.ndarray) -> Tensor:
        """(B*R, D) relative rows + (B, D) absolute self rows + (B, H) hidden -> new hidden.

        Output is invariant to permuting the pooled rows and serves as both
        the step feature and the next recurrent state.
        """
        b = self_rows.shape[0]
        if pool_flat.shape[0] % b != 0:
            raise ValueError("row count not a multiple of the batch size")
        r = pool_flat.shape[0] // b
        embed = tanh(_mlp(self.store, "backbone/embed", Tensor(pool_flat), 1))
        pooled = tanh(_mlp(self.store, "backbone/pool", mean_pool_rows(embed, r), 1))
        own = tanh(_mlp(self.store, "backbone/self", Tensor(self_rows), 1))
        x = concat([pooled, own], axis=1)
        return gru_step(self.store, "backbone/gru", x, Tensor(hidden))

    def features_np(self, pool_flat: np.ndarray, self_rows: np.ndarray, hidden: np.ndarray) -> np.ndarray:
        """Graph-free twin of :meth:`features` for rollout-time inference."""
        b = self_rows.shape[0]
        r = pool_flat.shape[0] // b
        embed = np.tanh(_mlp_np(self.store, "backbone/embed", pool_flat, 1))
        pooled = np.tanh(_mlp_np(self.store, "backbone/pool", _mean_pool_np(embed, r), 1))
        own = np.tanh(_mlp_np(self.store, "backbone/self", self_rows, 1))
        x = np.concatenate([pooled, own], axis=1)
        return gru_step_np(self.store, "backbone/gru", x, hidden)


def scale_social_rows(rows: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(..., 5) raw observation rows -> scaled network input."""
    out = np.asarray(rows, dtype=np.float64) * np.asarray(
        [POS_SCALE, POS_SCALE, VEL_SCALE, VEL_SCALE, BETA_SCALE]
    )
    return out.astype(dtype)


def scale_ego_rows(rows: np.ndarray, latents: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(..., 4) physical rows + (..., L) latent traits -> scaled network input."""
    phys = np.asarray(rows, dtype=np.float64) * np.asarray([POS_SCALE, POS_SCALE, VEL_SCALE, VEL_SCALE])
    return np.concatenate([phys, np.asarray(latents, dtype=np.float64)], axis=-1).astype(dtype)


def social_net_inputs(
    raw_batch: np.ndarray, viewers: np.ndarray, dtype=np.float32
) -> tuple[np.ndarray, np.ndarray]:
    """(B, R, 5) absolute rows + per-record viewer index -> network inputs.

    Returns the pooled input (B*R, 5) with positions relative to the viewer,
    and the (B, 5) absolute self rows, both scaled.
    """
    raw = np.asarray(raw_batch, dtype=np.float64)
    b = raw.shape[0]
    own = raw[np.arange(b), viewers]  # (B, 5)
    rel = raw.copy()
    rel[:, :, 0] -= own[:, None, 0]
    rel[:, :, 1] -= own[:, None, 1]
    return (
        scale_social_rows(rel, dtype).reshape(b * raw.shape[1], 5),
        scale_social_rows(own, dtype),
    )


def ego_net_inputs(
    raw_batch: np.ndarray, latents: np.ndarray, dtype=np.float32
) -> tuple[np.ndarray, np.ndarray]:
    """(B, R, 4) absolute physical rows + (B, R, L) latents -> ego network inputs.

    The viewer is row 0. Pooled rows are viewer-relative with latents
    appended; the self row is the ego's absolute state plus its (zero) latent.
    """
    raw = np.asarray(raw_batch, dtype=np.float64)
    b, r = raw.shape[0], raw.shape[1]
    rel = raw.copy()
    rel[:, :, 0] -= raw[:, 0:1, 0]
    rel[:, :, 1] -= raw[:, 0:1, 1]
    pool = scale_ego_rows(rel.reshape(b * r, 4), np.asarray(latents).reshape(b * r, -1), dtype)
    self_rows = scale_ego_rows(raw[:, 0], np.asarray(latents)[:, 0], dtype)
    return pool, self_rows


class SocialPolicyNet(_EncoderMixin):
    """Shared backbone with per-anchor guiding heads and a beta-conditioned meta head."""

    def __init__(
        self,
        cfg: EncoderConfig,
        anchors: tuple[float, ...],
        rng: np.random.Generator,
        dtype=np.float32,
        store: ParamStore | None = None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.anchors = tuple(float(a) for a in anchors)
        self.row_dim = 5
        self.dtype = np.dtype(dtype)
        self.store = store if store is not None else ParamStore()
        if store is None:
            self._add_backbone(rng)
            w = cfg.recurrent_width
            hidden = cfg.pooled_width
            for k in range(len(self.anchors)):
                _add_mlp(self.store, f"head/guide{k}/pi", [w, hidden, N_ACTIONS], rng, self.dtype, final_scale=0.01)
                self.store[f"head/guide{k}/pi/b2"].data[-1] = DRIVE_BIAS
                _add_mlp(self.store, f"head/guide{k}/vf", [w, hidden, 1], rng, self.dtype)
            _add_mlp(self.store, "head/meta/pi", [w + 1, hidden, N_ACTIONS], rng, self.dtype, final_scale=0.01)
            self.store["head/meta/pi/b2"].data[-1] = DRIVE_BIAS
            _add_mlp(self.store, "head/meta/vf", [w + 1, hidden, 1], rng, self.dtype)

    def head_names(self) -> list[str]:
        return [f"guide{k}" for k in range(len(self.anchors))] + ["meta"]

    def head_forward(self, head: str, feat: Tensor, beta: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Logits and value for one head. The meta head requires beta."""
        if head == "meta":
            if beta is None:
                raise ValueError("meta head requires beta")
            b = np.asarray(beta, dtype=self.dtype).reshape(-1, 1) * self.dtype.type(BETA_SCALE)
            x = concat([feat, Tensor(b)], axis=1)
        else:
            if head not in {f"guide{k}" for k in range(len(self.anchors))}:
                raise KeyError(f"unknown head {head!r}")
            x = feat
        logits = _mlp(self.store, f"head/{head}/pi", x, 2)
        value = _mlp(self.store, f"head/{head}/vf", x, 2)
        return logits, value

    def head_forward_np(self, head: str, feat: np.ndarray, beta: np.ndarray | None = None):
        if head == "meta":
            b = np.asarray(beta, dtype=self.dtype).reshape(-1, 1) * self.dtype.type(BETA_SCALE)
            x = np.concatenate([feat, b], axis=1)
        else:
            x = feat
        return _mlp_np(self.store, f"head/{head}/pi", x, 2), _mlp_np(self.store, f"head/{head}/vf", x, 2)

    def metadata(self) -> dict:
        return {
            "kind": "social",
            "anchors": list(self.anchors),
            "heads": self.head_names(),
            "encoder": self.cfg.to_dict(),
        }

    @classmethod
    def from_checkpoint(cls, store: ParamStore, metadata: dict) -> "SocialPolicyNet":
        cfg = EncoderConfig.from_dict(metadata["encoder"])
        net = cls.__new__(cls)
        net.cfg = cfg
        net.anchors = tuple(metadata["anchors"])
        net.row_dim = 5
        net.dtype = store[next(iter(store.names()))].data.dtype
        net.store = store
        return net


class EgoPolicyNet(_EncoderMixin):
    """Single policy/value head over latent-augmented observations."""

    def __init__(
        self,
        cfg: EncoderConfig,
        rng: np.random.Generator,
        dtype=np.float32,
        store: ParamStore | None = None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.row_dim = 4 + cfg.latent_dim
        self.dtype = np.dtype(dtype)
        self.store = store if store is not None else ParamStore()
        if store is None:
            self._add_backbone(rng)
            w = cfg.recurrent_width
            _add_mlp(self.store, "head/pi", [w, cfg.pooled_width, N_ACTIONS], rng, self.dtype, final_scale=0.01)
            self.store["head/pi/b2"].data[-1] = DRIVE_BIAS
            _add_mlp(self.store, "head/vf", [w, cfg.pooled_width, 1], rng, self.dtype)

    def head_forward(self, feat: Tensor) -> tuple[Tensor, Tensor]:
        return _mlp(self.store, "head/pi", feat, 2), _mlp(self.store, "head/vf", feat, 2)

    def head_forward_np(self, feat: np.ndarray):
        return _mlp_np(self.store, "head/pi", feat, 2), _mlp_np(self.store, "head/vf", feat, 2)

    def metadata(self) -> dict:
        return {"kind": "ego", "encoder": self.cfg.to_dict()}

    @classmethod
    def from_checkpoint(cls, store: ParamStore, metadata: dict) -> "EgoPolicyNet":
        cfg = EncoderConfig.from_dict(metadata["encoder"])
        net = cls.__new__(cls)
        net.cfg = cfg
        net.row_dim = 4 + cfg.latent_dim
        net.dtype = store[next(iter(store.names()))].data.dtype
        net.store = store
        return net


class TrajAutoencoder:
    """Recurrent autoencoder over one vehicle's recent physical states.

    ``encode`` compresses the last ``history_len`` states into a latent trait
    vector; ``decode`` reconstructs the (scaled) history from the latent.
    Both are deterministic.
    """

    GRU_WIDTH = 32

    def __init__(
        self,
        cfg: EncoderConfig,
        rng: np.random.Generator,
        dtype=np.float32,
        store: ParamStore | None = None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.store = store if store is not None else ParamStore()
        w = self.GRU_WIDTH
        if store is None:
            _add_gru(self.store, "enc/gru", 4, w, rng, self.dtype)
            _add_mlp(self.store, "enc/out", [w, cfg.latent_dim], rng, self.dtype)
            _add_mlp(self.store, "dec/init", [cfg.latent_dim, w], rng, self.dtype)
            _add_gru(self.store, "dec/gru", 4, w, rng, self.dtype)
            _add_mlp(self.store, "dec/out", [w, 4], rng, self.dtype)

    # Max displacement over history_len steps at top speed is ~3m; 1/6 keeps
    # relative positions within about +-0.5.
    REL_POS_SCALE = 1.0 / 6.0

    @staticmethod
    def scale_history(history: np.ndarray, dtype=np.float32) -> np.ndarray:
        """Translation-normalize: positions relative to the window start.

        The latent should capture how a vehicle moves, not where on the road
        the window happened to start.
        """
        h = np.asarray(history, dtype=np.float64).copy()
        h[:, :, 0] -= h[:, :1, 0]
        h[:, :, 1] -= h[:, :1, 1]
        h[:, :, 0] *= TrajAutoencoder.REL_POS_SCALE
        h[:, :, 1] *= TrajAutoencoder.REL_POS_SCALE
        h[:, :, 2] *= VEL_SCALE
        h[:, :, 3] *= VEL_SCALE
        return h.astype(dtype)

    def encode(self, history: np.ndarray) -> Tensor:
        """(B, H, 4) raw physical states -> (B, latent_dim).

        Histories shorter than ``history_len`` must be left-padded with the
        earliest known state by the caller.
        """
        hist = np.asarray(history)
        if hist.ndim != 3 or hist.shape[1] == 0:
            raise ValueError(f"expected (B, H, 4) history, got {hist.shape}")
        scaled = self.scale_history(hist, self.dtype)
        b = scaled.shape[0]
        h = Tensor(np.zeros((b, self.GRU_WIDTH), dtype=self.dtype))
        for t in range(scaled.shape[1]):
            h = gru_step(self.store, "enc/gru", Tensor(scaled[:, t, :]), h)
        return _mlp(self.store, "enc/out", h, 1)

    def encode_np(self, history: np.ndarray) -> np.ndarray:
        """Graph-free twin of :meth:`encode`."""
        hist = np.asarray(history)
        scaled = self.scale_history(hist, self.dtype)
        h = np.zeros((scaled.shape[0], self.GRU_WIDTH), dtype=self.dtype)
        for t in range(scaled.shape[1]):
            h = gru_step_np(self.store, "enc/gru", scaled[:, t, :], h)
        return _mlp_np(self.store, "enc/out", h, 1)

    def decode(self, latent: Tensor, steps: int | None = None) -> Tensor:
        """(B, latent_dim) -> (B*H, 4) scaled reconstruction, time-major per row block."""
        steps = steps or self.cfg.history_len
        h = tanh(_mlp(self.store, "dec/init", latent, 1))
        prev = Tensor(np.zeros((latent.shape[0], 4), dtype=self.dtype))
        outs = []
        for _ in range(steps):
            h = gru_step(self.store, "dec/gru", prev, h)
            out = _mlp(self.store, "dec/out", h, 1)
            outs.append(out)
            prev = out
        return concat(outs, axis=0)

    def recon_loss(self, history: np.ndarray) -> Tensor:
        """Mean squared reconstruction error in scaled coordinates."""
        hist = np.asarray(history)
        latent = self.encode(hist)
        recon = self.decode(latent, steps=hist.shape[1])
        target = self.scale_history(hist, self.dtype)  # (B, H, 4)
        target_flat = np.concatenate([target[:, t, :] for t in range(hist.shape[1])], axis=0)
        diff = recon - Tensor(target_flat)
        return tmean(diff * diff)

    def metadata(self) -> dict:
        return {"kind": "trajae", "encoder": self.cfg.to_dict()}

    @classmethod
    def from_checkpoint(cls, store: ParamStore, metadata: dict) -> "TrajAutoencoder":
        cfg = EncoderConfig.from_dict(metadata["encoder"])
        net = cls.__new__(cls)
        net.cfg = cfg
        net.dtype = store[next(iter(store.names()))].data.dtype
        net.store = store
        return net


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized categorical sampling: one uniform draw per row."""
    u = rng.random(probs.shape[0])
    cum = np.cumsum(probs, axis=1)
    return (u[:, None] > cum[:, :-1]).sum(axis=1).astype(np.int64)


def policy_step(
    net: SocialPolicyNet | EgoPolicyNet,
    pool_flat: np.ndarray,
    self_rows: np.ndarray,
    hidden: np.ndarray,
    head_of_record: np.ndarray | None = None,
    beta: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Graph-free batched forward: probs (B, A), value (B,), new hidden, logits.

    ``head_of_record`` maps each record to a head: -1 for the meta head,
    otherwise a guiding-anchor index. Ego networks ignore it.
    """
    b = self_rows.shape[0]
    feat = net.features_np(pool_flat, self_rows, hidden)
    if isinstance(net, EgoPolicyNet):
        logits, value = net.head_forward_np(feat)
        return _softmax_np(logits), value[:, 0], feat, logits
    values = np.empty(b, dtype=net.dtype)
    logits_all = np.empty((b, N_ACTIONS), dtype=net.dtype)
    if head_of_record is None:
        head_of_record = np.full(b, -1, dtype=np.int64)
    for head_id in np.unique(head_of_record):
        idx = np.where(head_of_record == head_id)[0]
        if head_id < 0:
            logits, value = net.head_forward_np("meta", feat[idx], beta[idx])
        else:
            logits, value = net.head_forward_np(f"guide{head_id}", feat[idx])
        values[idx] = value[:, 0]
        logits_all[idx] = logits
    return _softmax_np(logits_all), values, feat, logits_all
