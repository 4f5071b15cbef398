"""Learned state estimation for noisy observations.

An affine encoder maps the last ``W`` observations to a latent state, which
the shared circuit dynamics roll forward; the K-step loss is taken against
the raw (noisy) observations.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .circuit import NORM_OFF, CircuitModel, accumulate_norm, renormalize
from .dynamics import Trajectory
from .errors import ArgumentError
from .pruning import PruneConfig, prune_loop
from .training import TrainConfig, rollout_loss, window_indices


@dataclass
class EncoderModel:
    window: int
    weights: np.ndarray     # (n, window * n + 1), last column is the bias

    @property
    def state_dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def identity(cls, n: int, window: int = 5) -> "EncoderModel":
        """Encoder returning the newest observation unchanged."""
        if window < 1:
            raise ArgumentError("window must be >= 1")
        w = np.zeros((n, window * n + 1))
        w[:, (window - 1) * n: window * n] = np.eye(n)
        return cls(window, w)

    def to_dict(self) -> dict:
        return {"window": self.window, "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderModel":
        return cls(int(d["window"]), np.atleast_2d(np.array(d["weights"], dtype=float)))


@dataclass
class FilteredBatch:
    windows: np.ndarray     # (B, W, n), oldest row first
    targets: np.ndarray     # (B, K, n)


def _augment(windows: np.ndarray) -> np.ndarray:
    b = windows.shape[0]
    return np.concatenate([windows.reshape(b, -1), np.ones((b, 1))], axis=1)


def encode(encoder: EncoderModel, window) -> np.ndarray:
    """Latent state from a (W, n) window, or a (B, W, n) batch of windows."""
    w = np.asarray(window, dtype=float)
    single = w.ndim == 2
    block = w[None] if single else w
    n = encoder.state_dim
    if block.ndim != 3 or block.shape[1:] != (encoder.window, n):
        raise ArgumentError(f"window shape {w.shape} does not match encoder ({encoder.window}, {n})")
    s = _augment(block) @ encoder.weights.T
    return s[0] if single else s


def make_batch(traj: Trajectory, start_indices, window: int, K: int) -> FilteredBatch:
    """Windows ending at each start index t and the K observations after it."""
    idx = np.asarray(start_indices, dtype=int)
    if idx.size and (idx.min() < window - 1 or idx.max() + K >= len(traj)):
        raise ArgumentError("start index out of range for window/horizon")
    past = idx[:, None] + np.arange(-window + 1, 1)[None, :]
    fut = idx[:, None] + np.arange(1, K + 1)[None, :]
    return FilteredBatch(traj.states[past], traj.states[fut])


def filtered_multi_step_loss(encoder: EncoderModel, dynamics: CircuitModel, batch: FilteredBatch,
                             K: int, dt: float, norm="frozen", need_grad: bool = True):
    """Returns ``(loss, dynamics ParamGrads, encoder weight gradient)``."""
    if batch.targets.shape[1] != K:
        raise ArgumentError(f"batch targets have depth {batch.targets.shape[1]}, expected K={K}")
    aug = _augment(batch.windows)
    s0 = aug @ encoder.weights.T
    loss, grads, ds0 = rollout_loss(dynamics, s0, batch.targets, dt, norm, need_grad)
    if not need_grad:
        return loss, None, None
    return loss, grads, ds0.T @ aug


class FilteredObjective:
    """Joint encoder + dynamics objective used by the training loop."""

    def __init__(self, encoder: EncoderModel, model: CircuitModel, train_traj: Trajectory,
                 val_traj: Trajectory, cfg: TrainConfig, train_encoder: bool = True):
        if encoder.state_dim != model.input_dim:
            raise ArgumentError("encoder latent dimension must equal the dynamics state dimension")
        self.encoder = encoder
        self.model = model
        self.train_traj = train_traj
        self.val_traj = val_traj
        self.cfg = cfg
        self.train_encoder = train_encoder
        self.dt = cfg.dt if cfg.dt is not None else train_traj.dt
        self.K = cfg.horizon
        self.train_idx = window_indices(train_traj, self.K, first=encoder.window - 1)
        self.val_idx = window_indices(val_traj, self.K, first=encoder.window - 1)
        self._enc_mask = np.ones_like(encoder.weights)

    def params(self):
        extra = [self.encoder.weights] if self.train_encoder else []
        return self.model.params() + extra

    def masks(self):
        extra = [self._enc_mask] if self.train_encoder else []
        return self.model.masks() + extra

    def latent_states(self, traj=None):
        traj = self.train_traj if traj is None else traj
        idx = np.arange(self.encoder.window - 1, len(traj))
        past = idx[:, None] + np.arange(-self.encoder.window + 1, 1)[None, :]
        return encode(self.encoder, traj.states[past])

    def warmup(self):
        if self.cfg.norm != NORM_OFF:
            accumulate_norm(self.model, self.latent_states())

    def renormalize(self):
        if self.cfg.norm != NORM_OFF:
            renormalize(self.model, self.latent_states())

    def batch_loss(self, idx):
        batch = make_batch(self.train_traj, idx, self.encoder.window, self.K)
        loss, grads, genc = filtered_multi_step_loss(self.encoder, self.model, batch, self.K,
                                                     self.dt, self.cfg.norm)
        extra = [genc] if self.train_encoder else []
        return loss, grads.arrays + extra

    def val_loss(self):
        batch = make_batch(self.val_traj, self.val_idx, self.encoder.window, self.K)
        return filtered_multi_step_loss(self.encoder, self.model, batch, self.K, self.dt,
                                        self.cfg.norm, need_grad=False)[0]

    def snapshot(self):
        return copy.deepcopy((self.model, self.encoder))

    def restore(self, snap):
        model, enc = copy.deepcopy(snap)
        self.model.__dict__.update(model.__dict__)
        self.encoder.weights = enc.weights


def train_filtered(encoder: EncoderModel, dynamics: CircuitModel, train_traj: Trajectory,
                   val_traj: Trajectory, tcfg: TrainConfig, pcfg: PruneConfig | None = None,
                   prune: bool = True, train_encoder: bool = True):
    """Jointly train encoder and dynamics; prune only the dynamics.

    Returns ``(encoder, dynamics, TrainReport, checkpoints)`` where the
    returned pair is the validation-selected checkpoint.
    """
    obj = FilteredObjective(encoder, dynamics, train_traj, val_traj, tcfg, train_encoder)
    best, checkpoints, report = prune_loop(obj, tcfg, pcfg or PruneConfig(), prune)
    return best.extra["encoder"], best.model, report, checkpoints
