import numpy as np
import pytest

from slimsched.core import SchedulerKnobs
from slimsched.devmodel import GB, MB, DeviceSpec, SegmentProfile, default_cluster, default_segments
from slimsched.simkernel import ClusterConfig


def make_cluster(devices=None, knobs=None, **kw) -> ClusterConfig:
    devices = devices if devices is not None else default_cluster()
    knobs = knobs if knobs is not None else SchedulerKnobs()
    return ClusterConfig(list(devices), default_segments(), [knobs for _ in devices], **kw)


def one_device(kappa=0.001, m_max=8 * GB) -> DeviceSpec:
    return DeviceSpec(0, 0.002, kappa, 60.0, 250.0, 11 * GB, m_max)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- trained presets, shared across modules ----------------------------------

from pathlib import Path

from slimsched.cli import simulate, train_cmd
from slimsched.config import load_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _train_and_eval(root: Path, name: str, seed=None, eval_seed=None):
    cfg = load_config(CONFIGS / f"{name}.yaml")
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    result = train_cmd(cfg, root / "train")
    ev = cfg if eval_seed is None else cfg.model_copy(update={"seed": eval_seed})
    summary, sim = simulate(ev, "ppo", str(root / "train" / "checkpoint.json"), out=root / "eval")
    return {"config": cfg, "train": result, "summary": summary, "sim": sim, "dir": root}


@pytest.fixture(scope="session")
def baseline_run(tmp_path_factory):
    cfg = load_config(CONFIGS / "default.yaml")
    root = tmp_path_factory.mktemp("baseline")
    summary, sim = simulate(cfg, "random", out=root)
    return {"config": cfg, "summary": summary, "sim": sim, "dir": root}


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    return _train_and_eval(tmp_path_factory.mktemp("overfit"), "overfit")


@pytest.fixture(scope="session")
def balanced_run(tmp_path_factory):
    return _train_and_eval(tmp_path_factory.mktemp("balanced"), "balanced")


@pytest.fixture(scope="session")
def sanity_runs(tmp_path_factory):
    return [_train_and_eval(tmp_path_factory.mktemp(f"sanity{s}"), "sanity", seed=s,
                            eval_seed=100 + s) for s in range(3)]


# -- acceptance report -------------------------------------------------------

ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
