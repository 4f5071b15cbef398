"""Experiment configuration and the pipelines behind the CLI commands."""

from __future__ import annotations

import csv
import json
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import baseline, symbolic
from .circuit import (
    CircuitModel,
    default_architecture,
    dumps,
    forward,
    init_model,
    load_model,
    model_to_dict,
    norm_frozen,
)
from .dynamics import (
    DEFAULT_GENERATION,
    BenchmarkSystem,
    Trajectory,
    add_gaussian_noise,
    eval_vector_field,
    read_trajectory_csv,
    simulate,
    split_trajectory,
    write_trajectory_csv,
)
from .errors import ArgumentError, DivergenceError
from .filtering import EncoderModel, FilteredObjective, encode
from .pruning import PruneConfig, prune_loop, write_prune_log
from .training import Objective, TrainConfig, TrainReport

DEFAULT_SEED = 0


def default_seed() -> int:
    env = os.environ.get("ACS_SEED")
    if env is None or env == "":
        return DEFAULT_SEED
    try:
        return int(env)
    except ValueError as exc:
        raise ArgumentError(f"ACS_SEED must be an integer, got {env!r}") from exc


@dataclass
class ArchitectureConfig:
    terms_per_dim: int = 4
    group_size: int = 2
    depth: int = 1
    skip: bool = True
    sin_terms: int = 0


@dataclass
class FilteringConfig:
    enabled: bool = False
    window: int = 5


_TRAIN_RUNTIME_KEYS = ("seed", "dt")


@dataclass
class ExperimentConfig:
    system: str = "nonlinear2d"
    system_params: list = field(default_factory=list)
    x0: list | None = None
    dt: float | None = None
    steps: int | None = None
    noise: float = 0.0
    seed: int = DEFAULT_SEED
    split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    train: dict = field(default_factory=dict)
    prune: dict = field(default_factory=dict)
    prune_enabled: bool = True
    filtering: FilteringConfig = field(default_factory=FilteringConfig)
    eval_horizon: int = 50
    output_dir: str = "out"

    def __post_init__(self):
        self.system = BenchmarkSystem(self.system, tuple(self.system_params)).name
        sysobj = self.benchmark()
        d_x0, d_dt, d_steps = DEFAULT_GENERATION[self.system]
        self.system_params = list(sysobj.params)
        self.x0 = [float(v) for v in (d_x0 if self.x0 is None else self.x0)]
        if len(self.x0) != sysobj.dim:
            raise ArgumentError(f"x0 has {len(self.x0)} entries, {self.system} needs {sysobj.dim}")
        self.dt = float(d_dt if self.dt is None else self.dt)
        self.steps = int(d_steps if self.steps is None else self.steps)
        if self.dt <= 0 or self.steps < 1:
            raise ArgumentError("dt must be positive and steps >= 1")
        self.noise = float(self.noise)
        if self.noise < 0:
            raise ArgumentError("noise must be >= 0")
        self.seed = int(self.seed)
        self.split = [float(v) for v in self.split]
        if isinstance(self.architecture, dict):
            self.architecture = _strict(ArchitectureConfig, self.architecture, "architecture")
        if isinstance(self.filtering, dict):
            self.filtering = _strict(FilteringConfig, self.filtering, "filtering")
        bad = [k for k in _TRAIN_RUNTIME_KEYS if k in self.train]
        if bad:
            raise ArgumentError(f"train.{bad[0]} is set from the top-level config, not the train section")
        # Resolve every default so the written config is complete.
        self.train = asdict(self.train_config())
        for k in _TRAIN_RUNTIME_KEYS:
            self.train.pop(k)
        self.prune = asdict(self.prune_config())

    def benchmark(self) -> BenchmarkSystem:
        return BenchmarkSystem(self.system, tuple(self.system_params))

    def train_config(self, dt: float | None = None) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "seed": self.seed, "dt": dt})

    def prune_config(self) -> PruneConfig:
        return PruneConfig.from_dict(self.prune)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "seed" not in d:
            d["seed"] = default_seed()
        return _strict(cls, d, "config")


def _strict(cls, d, where):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ArgumentError(f"unknown {where} keys: {unknown}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ArgumentError(f"invalid {where}: {exc}") from exc


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ArgumentError(f"{path}: config must be a JSON object")
    return data


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(obj))


def write_resolved_config(cfg: ExperimentConfig, out: Path) -> None:
    write_json(cfg.to_dict(), out / "config.json")


@contextmanager
def output_lock(out: Path):
    """Exclusive lock file in the output directory."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise OSError(f"{lock} exists: another command is using {out}") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        try:
            lock.unlink()
        except FileNotFoundError:
            pass


# simulate ----------------------------------------------------------------

def run_simulate(cfg: ExperimentConfig, out=None) -> dict:
    out = Path(out or cfg.output_dir)
    with output_lock(out):
        clean = simulate(cfg.benchmark(), cfg.x0, cfg.dt, cfg.steps)
        write_trajectory_csv(clean, out / "clean.csv")
        files = {"clean": str(out / "clean.csv")}
        if cfg.noise > 0:
            noisy = add_gaussian_noise(clean, cfg.noise, cfg.seed)
            write_trajectory_csv(noisy, out / "noisy.csv")
            files["noisy"] = str(out / "noisy.csv")
        write_resolved_config(cfg, out)
    return files


# train -------------------------------------------------------------------

@dataclass
class TrainResult:
    best_model: CircuitModel
    best_round: int
    checkpoints: list
    report: TrainReport
    encoder: EncoderModel | None = None


def _checkpoint_payload(cfg: ExperimentConfig, cp, dt: float, encoder=None) -> dict:
    payload = model_to_dict(cp.model)
    payload["meta"] = {
        "system": cfg.system,
        "system_params": list(cfg.system_params),
        "dt": dt,
        "round": cp.round,
        "active_params": cp.active_params,
        "val_loss": cp.val_loss,
    }
    if encoder is not None:
        payload["encoder"] = encoder.to_dict()
    return payload


def train_on_data(cfg: ExperimentConfig, data: Trajectory) -> TrainResult:
    """Split, build and train (with pruning unless disabled)."""
    train_t, val_t, _ = split_trajectory(data, cfg.split)
    dt = data.dt
    tcfg = cfg.train_config(dt)
    pcfg = cfg.prune_config()
    a = cfg.architecture
    n = data.dim
    specs = default_architecture(n, a.terms_per_dim, a.group_size, a.depth, a.sin_terms)
    model = init_model(specs, n, seed=cfg.seed, skip=a.skip)
    if cfg.filtering.enabled:
        enc = EncoderModel.identity(n, cfg.filtering.window)
        obj = FilteredObjective(enc, model, train_t, val_t, tcfg)
    else:
        obj = Objective(model, train_t, val_t, tcfg)
    best, cps, report = prune_loop(obj, tcfg, pcfg, cfg.prune_enabled)
    return TrainResult(best.model, best.round, cps, report, best.extra.get("encoder"))


def training_data_path(cfg: ExperimentConfig, data_dir: Path) -> Path:
    name = "noisy.csv" if cfg.noise > 0 else "clean.csv"
    return data_dir / name


def run_train(cfg: ExperimentConfig, out=None, data=None) -> TrainResult:
    out = Path(out or cfg.output_dir)
    if data is None:
        path = training_data_path(cfg, out)
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run `simulate` first")
        data = read_trajectory_csv(path)
    with output_lock(out):
        write_resolved_config(cfg, out)
        result = train_on_data(cfg, data)
        dt = data.dt
        for stale in out.glob("round_*.json"):
            stale.unlink()
        for cp in result.checkpoints:
            write_json(_checkpoint_payload(cfg, cp, dt, cp.extra.get("encoder")),
                       out / f"round_{cp.round}.json")
        best = next(cp for cp in result.checkpoints if cp.round == result.best_round)
        write_json(_checkpoint_payload(cfg, best, dt, result.encoder), out / "best.json")
        report = result.report.to_dict()
        report["best_round"] = result.best_round
        report["rounds"] = [
            {"round": cp.round, "active_params": cp.active_params, "val_loss": cp.val_loss,
             "epoch": cp.epoch, "pre_prune_loss": cp.extra.get("pre_prune_loss")}
            for cp in result.checkpoints
        ]
        write_json(report, out / "train_report.json")
        write_prune_log(result.checkpoints, out / "prune_log.csv")
        result.report.write_csv(out / "loss_curve.csv")
        # Wall time is kept out of the reports so they stay byte-reproducible.
        write_json({"wall_time": result.report.wall_time}, out / "timing.json")
    return result


# extract -----------------------------------------------------------------

def load_checkpoint(path):
    model, payload = load_model(path)
    enc = payload.get("encoder")
    return model, payload.get("meta", {}), (EncoderModel.from_dict(enc) if enc else None)


def run_extract(checkpoint, precision: int = 3, out_dir=None, text_out=None):
    """Render the checkpoint's equations; compare with ground truth if known.

    Returns ``(text, SymbolicSystem, RecoveryReport | None)``.
    """
    model, meta, _ = load_checkpoint(checkpoint)
    system = symbolic.expand(model, model_norm_mode(model))
    text = symbolic.render(system, precision)
    out_dir = Path(out_dir) if out_dir else Path(checkpoint).parent
    report = None
    write_json(system.to_dict(), out_dir / "symbolic.json")
    if meta.get("system"):
        bench = BenchmarkSystem(meta["system"], tuple(meta.get("system_params", ())))
        report = symbolic.compare(system, symbolic.ground_truth(bench))
        write_json(report.to_dict(), out_dir / "recovery_report.json")
    if text_out:
        Path(text_out).write_text(text + "\n")
    return text, system, report


# eval --------------------------------------------------------------------

def model_norm_mode(model) -> str:
    """Frozen statistics are part of a trained model; hand-built models
    without them are evaluated raw."""
    return "frozen" if norm_frozen(model) else "off"


def horizon_rmse(model, traj: Trajectory, K: int, dt: float, encoder=None, stride: int = 1):
    """RMSE over all start windows at each horizon k = 1..K."""
    first = encoder.window - 1 if encoder is not None else 0
    starts = np.arange(first, len(traj) - K, stride)
    if starts.size == 0:
        raise ArgumentError(f"trajectory too short for eval horizon {K}")
    if encoder is not None:
        past = starts[:, None] + np.arange(-encoder.window + 1, 1)[None, :]
        S = encode(encoder, traj.states[past])
    else:
        S = traj.states[starts]
    sq = np.zeros(K)
    mode = model_norm_mode(model)
    for k in range(K):
        f, _ = forward(model, S, mode)
        S = S + dt * f
        if not np.all(np.isfinite(S)):
            raise DivergenceError(f"non-finite state at eval rollout step {k + 1}", step=k + 1)
        sq[k] = np.mean((S - traj.states[starts + k + 1]) ** 2)
    return np.sqrt(sq)


def vector_field_rmse(model, system: BenchmarkSystem, states) -> tuple:
    """(RMSE of model - f, RMS of f) over the given states."""
    f_true = eval_vector_field(system, states)
    f_model, _ = forward(model, states, model_norm_mode(model))
    return float(np.sqrt(np.mean((f_model - f_true) ** 2))), float(np.sqrt(np.mean(f_true**2)))


def free_rollout(model, s0, steps: int, dt: float):
    """Long open-loop rollout; stops early (returns fewer rows) on divergence."""
    S = np.asarray(s0, dtype=float).reshape(1, -1)
    out = [S[0].copy()]
    mode = model_norm_mode(model)
    for _ in range(steps):
        f, _ = forward(model, S, mode)
        S = S + dt * f
        if not np.all(np.isfinite(S)):
            break
        out.append(S[0].copy())
    return np.array(out)


def run_eval(checkpoint, trajectory, k_eval: int = 50, out_dir=None) -> dict:
    model, meta, encoder = load_checkpoint(checkpoint)
    traj = read_trajectory_csv(trajectory) if not isinstance(trajectory, Trajectory) else trajectory
    if traj.dim != model.input_dim:
        raise ArgumentError(f"trajectory dim {traj.dim} != model dim {model.input_dim}")
    dt = traj.dt
    rmse = horizon_rmse(model, traj, k_eval, dt, encoder)
    metrics = {"k": list(range(1, k_eval + 1)), "rollout_rmse": rmse.tolist(), "dt": dt}
    if meta.get("system"):
        bench = BenchmarkSystem(meta["system"], tuple(meta.get("system_params", ())))
        err, scale = vector_field_rmse(model, bench, traj.states)
        metrics["vector_field_rmse"] = err
        metrics["vector_field_rms"] = scale
        metrics["vector_field_relative_rmse"] = err / scale if scale > 0 else None
    if encoder is not None:
        s0 = encode(encoder, traj.states[: encoder.window])
        start = encoder.window - 1
    else:
        s0 = traj.states[0]
        start = 0
    pred = free_rollout(model, s0, len(traj) - 1 - start, dt)
    metrics["rollout_steps"] = int(pred.shape[0] - 1)
    metrics["rollout_diverged"] = bool(pred.shape[0] < len(traj) - start)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(metrics, out / "metrics.json")
        rows = Trajectory(traj.times[start:start + pred.shape[0]], pred)
        _write_rollout_csv(rows, traj.states[start:start + pred.shape[0]], out / "rollout.csv")
    return metrics


def _write_rollout_csv(pred: Trajectory, true_states, path) -> None:
    n = pred.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"x{i + 1}" for i in range(n)] + [f"true_x{i + 1}" for i in range(n)])
        for t, p, q in zip(pred.times, pred.states, true_states):
            w.writerow([format(t, ".17g")] + [format(v, ".17g") for v in p] + [format(v, ".17g") for v in q])


# paramscaling ------------------------------------------------------------

def run_paramscaling(p_values, d_max: int, out) -> list:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = baseline.scaling_rows(list(p_values), range(1, d_max + 1))
    baseline.write_scaling_csv(rows, out / "scaling.csv")
    return rows


# baseline ----------------------------------------------------------------

def run_baseline(traj: Trajectory, degree: int = 2, threshold: float = 0.02):
    system, res = baseline.sindy(traj, degree, threshold)
    return system, res
