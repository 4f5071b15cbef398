import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from acsindy import experiment
from acsindy.experiment import ExperimentConfig

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"

# Lines recorded by the acceptance tests, echoed in the terminal summary.
ACCEPTANCE_LINES = []


@dataclass
class PipelineRun:
    cfg: ExperimentConfig
    out: Path
    result: experiment.TrainResult
    seconds: float


def make_config(name, out, **overrides):
    d = experiment.load_config(CONFIG_DIR / name) if name else {}
    d.update(overrides)
    d["output_dir"] = str(out)
    d.setdefault("seed", 0)
    return ExperimentConfig.from_dict(d)


def run_pipeline(cfg):
    t0 = time.perf_counter()
    experiment.run_simulate(cfg)
    result = experiment.run_train(cfg)
    return PipelineRun(cfg, Path(cfg.output_dir), result, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def clean2d_run(tmp_path_factory):
    """Default-config clean 2D simulate + train."""
    return run_pipeline(make_config("nonlinear2d.json", tmp_path_factory.mktemp("clean2d")))


@pytest.fixture(scope="session")
def noisy2d_run(tmp_path_factory):
    return run_pipeline(make_config("nonlinear2d_noisy.json", tmp_path_factory.mktemp("noisy2d")))


@pytest.fixture(scope="session")
def noisy2d_plain_run(tmp_path_factory):
    """Same noisy data and schedule as ``noisy2d_run`` but without the encoder."""
    return run_pipeline(make_config("nonlinear2d_noisy.json", tmp_path_factory.mktemp("noisy2d_plain"),
                                    filtering={"enabled": False}))


@pytest.fixture(scope="session")
def lorenz_run(tmp_path_factory):
    return run_pipeline(make_config("lorenz.json", tmp_path_factory.mktemp("lorenz")))


@pytest.fixture
def acceptance_line():
    def record(criterion, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


PIPELINE_FIXTURES = {"clean2d_run", "noisy2d_run", "noisy2d_plain_run", "lorenz_run"}


def pytest_collection_modifyitems(items):
    for item in items:
        if PIPELINE_FIXTURES & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)
