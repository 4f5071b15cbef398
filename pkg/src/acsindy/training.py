"""Multi-step Euler-rollout training with Adam."""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .circuit import (
    NORM_FROZEN,
    NORM_OFF,
    CircuitModel,
    ParamGrads,
    accumulate_norm,
    forward,
    renormalize,
    vjp,
)
from .dynamics import Trajectory
from .errors import ArgumentError, DivergenceError, NumericError, TrainingError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    horizon: int = 10
    batch_size: int = 128
    max_epochs: int = 1000
    plateau_window: int = 20
    plateau_rel_tol: float = 1e-3
    stop_on_plateau: bool = False
    seed: int = 0
    norm: str = NORM_FROZEN
    dt: float | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ArgumentError("horizon K must be >= 1")
        if not self.learning_rate > 0:
            raise ArgumentError("learning_rate must be positive")
        if self.plateau_window < 2:
            raise ArgumentError("plateau_window must be >= 2")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ArgumentError("batch_size must be >= 1 and max_epochs >= 0")

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ArgumentError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    plateau_epochs: list = field(default_factory=list)
    prune_epochs: list = field(default_factory=list)
    lr_halvings: list = field(default_factory=list)
    wall_time: float = 0.0

    def extend(self, other: "TrainReport"):
        offset = len(self.train_loss)
        self.train_loss += other.train_loss
        self.val_loss += other.val_loss
        self.plateau_epochs += [e + offset for e in other.plateau_epochs]
        self.prune_epochs += [e + offset for e in other.prune_epochs]
        self.lr_halvings += [e + offset for e in other.lr_halvings]
        self.wall_time += other.wall_time

    def to_dict(self, include_time: bool = False) -> dict:
        d = {
            "train_loss": [float(v) for v in self.train_loss],
            "val_loss": [float(v) for v in self.val_loss],
            "plateau_epochs": list(self.plateau_epochs),
            "prune_epochs": list(self.prune_epochs),
            "lr_halvings": list(self.lr_halvings),
        }
        if include_time:
            d["wall_time"] = self.wall_time
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        return cls(list(d["train_loss"]), list(d["val_loss"]), list(d.get("plateau_epochs", [])),
                   list(d.get("prune_epochs", [])), list(d.get("lr_halvings", [])),
                   float(d.get("wall_time", 0.0)))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss)):
                w.writerow([i + 1, format(tr, ".17g"), format(va, ".17g")])


# rollout -----------------------------------------------------------------

def rollout(model: CircuitModel, s0, K: int, dt: float, norm=NORM_FROZEN) -> np.ndarray:
    """K forward-Euler steps of the shared model: returns S_{t+1..t+K}.

    ``s0`` may be (n,) giving (K, n) or (B, n) giving (B, K, n).
    """
    if K < 1:
        raise ArgumentError("K must be >= 1")
    s = np.asarray(s0, dtype=float)
    single = s.ndim == 1
    S = s.reshape(1, -1) if single else s
    if S.shape[1] != model.input_dim or model.output_dim != model.input_dim:
        raise ArgumentError("rollout needs a model with input dim == output dim == state dim")
    out = np.empty((S.shape[0], K, S.shape[1]))
    for k in range(K):
        try:
            f, _ = forward(model, S, norm)
        except NumericError as exc:
            raise _output_divergence(model, S, norm, k + 1, exc) from exc
        S = S + dt * f
        _check_finite(S, k + 1)
        out[:, k] = S
    return out[0] if single else out


def _output_divergence(model, S, norm, step, exc):
    """DivergenceError naming the first batch row whose model output is non-finite."""
    row = None
    with np.errstate(all="ignore"):
        for i in range(S.shape[0]):
            try:
                forward(model, S[i:i + 1], norm)
            except NumericError:
                row = i
                break
    return DivergenceError(f"non-finite model output at rollout step {step}: {exc}",
                           step=step, sample=row)


def _check_finite(S, step):
    bad = ~np.all(np.isfinite(S), axis=1)
    if bad.any():
        row = int(np.argmax(bad))
        raise DivergenceError(f"non-finite state at rollout step {step} (sample {row})",
                              step=step, sample=row)


def rollout_loss(model: CircuitModel, s0: np.ndarray, targets: np.ndarray, dt: float,
                 norm=NORM_FROZEN, need_grad: bool = True):
    """Mean over the batch of sum_k ||S_{t+k} - target_k||^2.

    Returns ``(loss, ParamGrads, dloss/ds0)``; the gradient pieces are None
    when ``need_grad`` is false. Gradients accumulate over every application
    of the shared model.
    """
    B, K, n = targets.shape
    S = s0
    traces, resid = [], np.empty_like(targets)
    for k in range(K):
        try:
            f, tr = forward(model, S, norm)
        except NumericError as exc:
            raise _output_divergence(model, S, norm, k + 1, exc) from exc
        S = S + dt * f
        _check_finite(S, k + 1)
        traces.append(tr)
        resid[:, k] = S - targets[:, k]
    loss = float(np.sum(resid**2) / B)
    if not need_grad:
        return loss, None, None
    grads = ParamGrads.zeros_like(model)
    dS = np.zeros((B, n))
    for k in range(K - 1, -1, -1):
        dS = dS + (2.0 / B) * resid[:, k]
        pg, din = vjp(model, traces[k], dt * dS)
        grads += pg
        dS = dS + din
    return loss, grads, dS


def window_indices(traj: Trajectory, K: int, first: int = 0) -> np.ndarray:
    """Start indices t with first <= t and t + K < len(traj)."""
    last = len(traj) - K - 1
    if last < first:
        raise ArgumentError(f"trajectory of {len(traj)} rows too short for horizon {K}")
    return np.arange(first, last + 1)


def _windows(traj: Trajectory, idx: np.ndarray, K: int):
    idx = np.asarray(idx, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() + K >= len(traj)):
        raise ArgumentError(f"start index out of range for horizon {K} and length {len(traj)}")
    offs = idx[:, None] + np.arange(1, K + 1)[None, :]
    return traj.states[idx], traj.states[offs]


def multi_step_loss(model: CircuitModel, traj: Trajectory, start_indices, K: int, dt: float,
                    norm=NORM_FROZEN):
    """Batch-mean K-step rollout loss and its parameter gradients."""
    s0, targets = _windows(traj, start_indices, K)
    loss, grads, _ = rollout_loss(model, s0, targets, dt, norm)
    return loss, grads


def evaluate_loss(model: CircuitModel, traj: Trajectory, K: int, dt: float, norm=NORM_FROZEN,
                  indices=None) -> float:
    idx = window_indices(traj, K) if indices is None else np.asarray(indices)
    s0, targets = _windows(traj, idx, K)
    return rollout_loss(model, s0, targets, dt, norm, need_grad=False)[0]


# optimizer ---------------------------------------------------------------

def adam_update(params, masks, grads, state: AdamState, cfg: TrainConfig, lr=None):
    """In-place Adam step over parallel lists of arrays; masked entries frozen."""
    lr = cfg.learning_rate if lr is None else lr
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, msk, g, m, v in zip(params, masks, grads, state.m, state.v):
        g = g * msk
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= msk * (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps))


def adam_step(model: CircuitModel, grads: ParamGrads, state: AdamState, cfg: TrainConfig):
    adam_update(model.params(), model.masks(), grads.arrays, state, cfg)
    return model, state


def detect_plateau(loss_history, window: int, rel_tol: float) -> bool:
    """Moving average over the last ``window`` epochs improved by < rel_tol
    relative to the window before it."""
    if window < 2:
        raise ArgumentError("window must be >= 2")
    hist = np.asarray(loss_history, dtype=float)
    if hist.size < 2 * window:
        return False
    recent = hist[-window:].mean()
    prev = hist[-2 * window:-window].mean()
    if prev <= 0:
        return True
    return (prev - recent) / prev < rel_tol


# training loop -----------------------------------------------------------

class Objective:
    """Plain dynamics objective: K-step loss on windows of one trajectory."""

    def __init__(self, model: CircuitModel, train_traj: Trajectory, val_traj: Trajectory,
                 cfg: TrainConfig):
        self.model = model
        self.train_traj = train_traj
        self.val_traj = val_traj
        self.cfg = cfg
        self.dt = cfg.dt if cfg.dt is not None else train_traj.dt
        self.K = cfg.horizon
        self.train_idx = window_indices(train_traj, self.K)
        self.val_idx = window_indices(val_traj, self.K)

    def params(self):
        return self.model.params()

    def masks(self):
        return self.model.masks()

    def warmup(self):
        if self.cfg.norm != NORM_OFF:
            accumulate_norm(self.model, self.train_traj.states)

    def renormalize(self):
        if self.cfg.norm != NORM_OFF:
            renormalize(self.model, self.train_traj.states)

    def batch_loss(self, idx):
        loss, grads = multi_step_loss(self.model, self.train_traj, idx, self.K, self.dt, self.cfg.norm)
        return loss, grads.arrays

    def val_loss(self):
        return evaluate_loss(self.model, self.val_traj, self.K, self.dt, self.cfg.norm, self.val_idx)

    def train_loss(self, idx):
        return evaluate_loss(self.model, self.train_traj, self.K, self.dt, self.cfg.norm, idx)

    def snapshot(self):
        return copy.deepcopy(self.model)

    def restore(self, snap):
        self.model.__dict__.update(copy.deepcopy(snap).__dict__)


def run_training(obj, cfg: TrainConfig, adam: AdamState | None = None, warmup: bool = True,
                 max_epochs: int | None = None, stop_on_plateau: bool | None = None):
    """Epochs of shuffled mini-batches; returns ``(adam_state, TrainReport)``."""
    t0 = time.perf_counter()
    if warmup:
        obj.warmup()
    if adam is None:
        adam = AdamState.zeros(obj.params())
    max_epochs = cfg.max_epochs if max_epochs is None else max_epochs
    stop = cfg.stop_on_plateau if stop_on_plateau is None else stop_on_plateau
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    lr = cfg.learning_rate
    halved = False
    best = (np.inf, obj.snapshot(), copy.deepcopy(adam))
    idx_all = obj.train_idx
    epoch = 0
    in_plateau = False
    while epoch < max_epochs:
        order = idx_all[rng.permutation(idx_all.size)]
        total, count = 0.0, 0
        try:
            for start in range(0, order.size, cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                loss, grads = obj.batch_loss(batch)
                if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                    raise DivergenceError("non-finite loss or gradient")
                adam_update(obj.params(), obj.masks(), grads, adam, cfg, lr)
                total += loss * batch.size
                count += batch.size
            val = obj.val_loss()
            if not np.isfinite(val):
                raise DivergenceError("non-finite validation loss")
        except (DivergenceError, NumericError) as exc:
            if halved:
                raise TrainingError(f"training diverged twice: {exc}", checkpoint=best[1]) from exc
            log.warning("divergence at epoch %d (%s); reverting and halving lr", epoch + 1, exc)
            obj.restore(best[1])
            adam.m, adam.v, adam.step = copy.deepcopy(best[2].m), copy.deepcopy(best[2].v), best[2].step
            lr *= 0.5
            halved = True
            report.lr_halvings.append(len(report.train_loss))
            continue
        epoch += 1
        report.train_loss.append(total / count)
        report.val_loss.append(val)
        if val < best[0]:
            best = (val, obj.snapshot(), copy.deepcopy(adam))
        if detect_plateau(report.train_loss, cfg.plateau_window, cfg.plateau_rel_tol):
            if not in_plateau:
                report.plateau_epochs.append(epoch)
            in_plateau = True
            if stop:
                break
        else:
            in_plateau = False
    report.wall_time = time.perf_counter() - t0
    return adam, report


def train(model: CircuitModel, train_traj: Trajectory, val_traj: Trajectory, config: TrainConfig,
          adam: AdamState | None = None, warmup: bool = True):
    """Train ``model`` in place. Returns ``(model, AdamState, TrainReport)``.

    Normalization statistics are accumulated over the training states before
    the first epoch and frozen (``warmup``).
    """
    obj = Objective(model, train_traj, val_traj, config)
    adam, report = run_training(obj, config, adam, warmup)
    return obj.model, adam, report
