"""First-order importance pruning and the iterative prune / finetune loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .circuit import CircuitModel, count_active_params
from .errors import ArgumentError, NumericError, StateError, TrainingError
from .training import AdamState, Objective, TrainConfig, run_training

log = logging.getLogger(__name__)


@dataclass
class PruneConfig:
    fraction: float = 0.1
    floor: int = 4
    patience: int = 3
    degradation_factor: float = 5.0
    scoring_windows: int = 1024
    initial_epochs: int = 2000
    finetune_epochs: int = 400
    max_rounds: int = 100
    criterion: str = "taylor"   # "magnitude" is an ablation only

    def __post_init__(self):
        if not 0 < self.fraction < 1:
            raise ArgumentError("prune fraction must be in (0, 1)")
        if self.criterion not in ("taylor", "magnitude"):
            raise ArgumentError(f"unknown pruning criterion {self.criterion!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "PruneConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ArgumentError(f"unknown PruneConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ImportanceMap:
    scores: list
    epoch: int | None = None


@dataclass
class PruneCheckpoint:
    round: int
    model: CircuitModel
    active_params: int
    val_loss: float
    epoch: int
    extra: dict = field(default_factory=dict)


def scores_from_grads(params, masks, grads) -> ImportanceMap:
    """|w_i * dL/dw_i|, zero at masked entries."""
    scores = []
    for w, m, g in zip(params, masks, grads):
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient while scoring importance")
        scores.append(np.abs(w * g) * m)
    return ImportanceMap(scores)


def scoring_indices(n_windows: int, count: int) -> np.ndarray:
    """Evenly spaced fixed subset of window positions."""
    if n_windows <= count:
        return np.arange(n_windows)
    return np.unique(np.linspace(0, n_windows - 1, count).round().astype(int))


def importance(obj, idx=None, criterion: str = "taylor") -> ImportanceMap:
    """Score every edge of the objective's parameters on a fixed batch.

    ``obj`` is a training objective (see :class:`acsindy.training.Objective`);
    the gradient is that of the batch-mean multi-step loss.
    """
    params, masks = obj.params(), obj.masks()
    if criterion == "magnitude":
        return ImportanceMap([np.abs(w) * m for w, m in zip(params, masks)])
    idx = obj.train_idx if idx is None else idx
    _, grads = obj.batch_loss(idx)
    return scores_from_grads(params, masks, grads)


def prune_lowest(model: CircuitModel, scores: ImportanceMap, fraction: float,
                 adam: AdamState | None = None, floor: int = 0) -> int:
    """Mask the ceil(fraction * active) lowest-scoring active entries in place.

    Ties break by (layer, row, column) ascending, with the head last. Pruned
    weights and their Adam moments are zeroed. Never goes below ``floor``
    active entries. Returns the number pruned.
    """
    if not 0 < fraction < 1:
        raise ArgumentError("fraction must be in (0, 1)")
    masks = model.masks()
    active = count_active_params(model)
    if active == 0:
        raise StateError("every entry is already masked")
    n = min(math.ceil(fraction * active), max(active - floor, 0))
    if n <= 0:
        return 0
    cand = []
    for li, (s, m) in enumerate(zip(scores.scores, masks)):
        rows, cols = np.nonzero(m)
        for r, c in zip(rows, cols):
            cand.append((float(s[r, c]), li, int(r), int(c)))
    cand.sort()
    params = model.params()
    for _, li, r, c in cand[:n]:
        masks[li][r, c] = 0.0
        params[li][r, c] = 0.0
        if adam is not None:
            adam.m[li][r, c] = 0.0
            adam.v[li][r, c] = 0.0
    return n


def write_prune_log(checkpoints, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "active_params", "val_loss"])
        for cp in checkpoints:
            if cp.round == 0:
                continue
            w.writerow([cp.round, cp.active_params, format(cp.val_loss, ".17g")])


def select_best(checkpoints) -> PruneCheckpoint:
    """Validation-loss argmin; earliest round wins ties."""
    return min(checkpoints, key=lambda cp: (cp.val_loss, cp.round))


def prune_loop(obj, tcfg: TrainConfig, pcfg: PruneConfig, prune: bool = True):
    """Train to plateau, then repeatedly score, prune, renormalize and finetune.

    ``obj`` is a training objective whose ``model`` attribute is the circuit
    being pruned (other parameters, e.g. an encoder, are trained but never
    pruned). Returns ``(best checkpoint, checkpoints, TrainReport)`` where
    the report concatenates every epoch and marks prune events.
    Round 0 is the dense model.
    """
    model = obj.model
    adam, report = _train_phase(obj, tcfg, None, True, pcfg.initial_epochs)
    checkpoints = [PruneCheckpoint(0, copy.deepcopy(model), count_active_params(model),
                                   obj.val_loss(), len(report.train_loss),
                                   _extras(obj))]
    if not prune:
        return checkpoints[0], checkpoints, report
    score_idx = obj.train_idx[scoring_indices(obj.train_idx.size, pcfg.scoring_windows)]
    n_model = len(model.params())
    best_val = checkpoints[0].val_loss
    bad = 0
    for rnd in range(1, pcfg.max_rounds + 1):
        if count_active_params(model) <= pcfg.floor:
            break
        imp = importance(obj, score_idx, pcfg.criterion)
        imp.epoch = len(report.train_loss)
        model_scores = ImportanceMap(imp.scores[:n_model], imp.epoch)
        pre = float(np.mean(report.train_loss[-tcfg.plateau_window:]))
        pruned = prune_lowest(model, model_scores, pcfg.fraction, floor=pcfg.floor)
        if pruned == 0:
            break
        obj.renormalize()
        report.prune_epochs.append(len(report.train_loss))
        try:
            # moments gathered at the old minimum are stale once edges vanish;
            # each finetune phase starts from a fresh optimizer state
            adam, phase = _train_phase(obj, tcfg, None, False, pcfg.finetune_epochs)
        except TrainingError as exc:
            log.warning("round %d diverged (%s); returning best checkpoint so far", rnd, exc)
            break
        report.extend(phase)
        val = obj.val_loss()
        cp = PruneCheckpoint(rnd, copy.deepcopy(model), count_active_params(model), val,
                             len(report.train_loss), _extras(obj))
        cp.extra["pre_prune_loss"] = pre
        checkpoints.append(cp)
        log.info("round %d: active=%d val=%.3e", rnd, cp.active_params, val)
        if val < best_val:
            best_val = val
        if val > best_val * pcfg.degradation_factor:
            bad += 1
            if bad >= pcfg.patience:
                break
        else:
            bad = 0
    return select_best(checkpoints), checkpoints, report


def _extras(obj) -> dict:
    enc = getattr(obj, "encoder", None)
    return {"encoder": copy.deepcopy(enc)} if enc is not None else {}


def _train_phase(obj, tcfg, adam, warmup, max_epochs):
    return run_training(obj, tcfg, adam, warmup, max_epochs=max_epochs, stop_on_plateau=True)


def iterative_prune_train(model: CircuitModel, train_traj, val_traj, tcfg: TrainConfig,
                          pcfg: PruneConfig | None = None, prune: bool = True):
    """Prune / finetune a plain dynamics model on clean trajectories.

    Returns ``(best checkpoint, checkpoints, TrainReport)``; see
    :func:`prune_loop`.
    """
    obj = Objective(model, train_traj, val_traj, tcfg)
    return prune_loop(obj, tcfg, pcfg or PruneConfig(), prune)
