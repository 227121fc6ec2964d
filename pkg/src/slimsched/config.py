"""Experiment configuration: one YAML document, validated with pydantic.

Every omitted field takes the default declared here. Validation errors carry
the field path (e.g. ``cluster.devices.2.m_max``) and the reason.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .accprior import AccuracyTable
from .core import DEFAULT_WIDTHS, SchedulerKnobs, validate_widths
from .devmodel import GB, MB, DeviceSpec, SegmentProfile
from .ppo import REWARD_PRESETS, ExplorationSchedule, PPOHyper, RewardWeights
from .simkernel import ClusterConfig, WorkloadSpec


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DeviceConfig(_Model):
    name: str = "fast"
    t0: float = Field(0.002, ge=0)
    kappa: float = Field(0.001, gt=0)
    p_idle: float = Field(60.0, gt=0)
    p_peak: float = Field(250.0, gt=0)
    vram_total: float = Field(11 * GB, gt=0)
    m_max: float = Field(8 * GB, gt=0)
    util_window: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.p_idle > self.p_peak:
            raise ValueError(f"p_idle ({self.p_idle}) exceeds p_peak ({self.p_peak})")
        if self.m_max > self.vram_total:
            raise ValueError(f"m_max ({self.m_max:g}) exceeds vram_total ({self.vram_total:g})")
        return self


def _fast() -> DeviceConfig:
    return DeviceConfig()


def _slow() -> DeviceConfig:
    return DeviceConfig(name="slow", t0=0.003, kappa=0.0025, p_idle=50.0, p_peak=165.0,
                        vram_total=6 * GB, m_max=4.5 * GB)


class SegmentConfig(_Model):
    compute_weight: float = Field(gt=0)
    param_base: float = Field(gt=0)
    act_base: float = Field(gt=0)


def _segments() -> list[SegmentConfig]:
    return [SegmentConfig(compute_weight=c, param_base=p * MB, act_base=a * MB)
            for c, p, a in ((1.0, 8, 4), (1.5, 16, 3), (2.0, 32, 2), (1.0, 8, 1))]


class ClusterSection(_Model):
    devices: list[DeviceConfig] = Field(default_factory=lambda: [_fast(), _fast(), _slow()],
                                        min_length=1)
    segments: list[SegmentConfig] = Field(default_factory=_segments, min_length=4, max_length=4)
    groups: list[int] = Field(default_factory=lambda: [1, 2, 4, 8], min_length=1)
    router_period: float = Field(0.01, ge=0)
    telemetry_period: float = Field(0.05, gt=0)
    unloader_period: float = Field(0.1, gt=0)


class KnobsConfig(_Model):
    B_max: int = Field(8, ge=1)
    M_max: Optional[float] = Field(None, gt=0)
    U_blk: float = Field(0.95, gt=0, le=1)
    t_idle: float = Field(2.0, gt=0)
    Q_th: int = Field(4, ge=1)
    N_new: int = Field(2, ge=0)
    widths: list[float] = Field(default_factory=lambda: list(DEFAULT_WIDTHS), min_length=1)
    load_time: float = Field(0.05, ge=0)

    @model_validator(mode="after")
    def _check(self):
        validate_widths(self.widths)
        return self


class KnobOverride(_Model):
    B_max: Optional[int] = Field(None, ge=1)
    M_max: Optional[float] = Field(None, gt=0)
    U_blk: Optional[float] = Field(None, gt=0, le=1)
    t_idle: Optional[float] = Field(None, gt=0)
    Q_th: Optional[int] = Field(None, ge=1)
    N_new: Optional[int] = Field(None, ge=0)
    load_time: Optional[float] = Field(None, ge=0)


class WorkloadConfig(_Model):
    rate: float = Field(200.0, gt=0)
    horizon: float = Field(60.0, ge=0)
    width_demand: Optional[list[float]] = None  # None: uniform over the width set
    seed: Optional[int] = None  # None: the master seed
    max_requests: Optional[int] = Field(None, ge=0)


class RewardConfig(_Model):
    preset: Optional[Literal["overfit", "balanced"]] = None
    alpha: Optional[float] = Field(None, ge=0)
    beta: Optional[float] = Field(None, ge=0)
    gamma: Optional[float] = Field(None, ge=0)
    delta: Optional[float] = Field(None, ge=0)
    bonus: Optional[float] = None
    center_prior: Optional[bool] = None

    def weights(self) -> RewardWeights:
        base = REWARD_PRESETS[self.preset] if self.preset else RewardWeights()
        over = {k: v for k, v in self.model_dump(exclude={"preset"}).items() if v is not None}
        return RewardWeights(**{**base.__dict__, **over})


class ExplorationConfig(_Model):
    eps_min: float = Field(0.05, ge=0, le=1)
    eps_max: float = Field(0.3, ge=0, le=1)
    T_dec: float = Field(20000, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.eps_min > self.eps_max:
            raise ValueError("eps_min exceeds eps_max")
        return self


class PPOConfig(_Model):
    clip: float = Field(0.2, gt=0, lt=1)
    c_v: float = Field(0.5, ge=0)
    c_H: float = Field(0.01, ge=0)
    K: int = Field(3, ge=0)
    lr: float = Field(3e-4, gt=0)
    window: int = Field(256, ge=1)
    hidden: int = Field(64, ge=1)
    max_grad_norm: float = Field(0.5, gt=0)
    updates: int = Field(200, ge=0)
    episode_horizon: float = Field(30.0, gt=0)


class EvalConfig(_Model):
    greedy: bool = False
    eps: float = Field(0.0, ge=0, le=1)


class AccuracyConfig(_Model):
    table: Optional[str] = None  # None: the bundled table
    top1_mean: Optional[float] = Field(None, ge=0, le=1)


class SweepConfig(_Model):
    batch_grid: list[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16, 32, 64, 128],
                                  min_length=1)
    think_time: float = Field(0.05, ge=0)
    horizon: float = Field(10.0, gt=0)
    warmup: float = Field(2.0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.warmup >= self.horizon:
            raise ValueError("warmup must be shorter than horizon")
        if any(b < 1 for b in self.batch_grid):
            raise ValueError("batch_grid entries must be >= 1")
        return self


class ExperimentConfig(_Model):
    seed: int = 0
    cluster: ClusterSection = Field(default_factory=ClusterSection)
    knobs: KnobsConfig = Field(default_factory=KnobsConfig)
    server_overrides: dict[int, KnobOverride] = Field(default_factory=dict)
    workload: WorkloadConfig = Field(default_factory=WorkloadConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    exploration: ExplorationConfig = Field(default_factory=ExplorationConfig)
    ppo: PPOConfig = Field(default_factory=PPOConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    accuracy: AccuracyConfig = Field(default_factory=AccuracyConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @model_validator(mode="after")
    def _check(self):
        n = len(self.cluster.devices)
        for i in self.server_overrides:
            if not 0 <= i < n:
                raise ValueError(f"server_overrides: no device with index {i}")
        demand = self.workload.width_demand
        if demand is not None:
            if len(demand) != len(self.knobs.widths):
                raise ValueError("workload.width_demand needs one probability per width")
            if any(p < 0 for p in demand) or abs(sum(demand) - 1.0) > 1e-9:
                raise ValueError("workload.width_demand must sum to 1")
        # the domain constructors enforce the remaining cross-field rules
        self.build_cluster()
        return self

    # -- builders ----------------------------------------------------------

    def server_knobs(self, i: int) -> SchedulerKnobs:
        base = self.knobs.model_dump()
        base["widths"] = tuple(base["widths"])
        over = self.server_overrides.get(i)
        if over is not None:
            base.update({k: v for k, v in over.model_dump().items() if v is not None})
        return SchedulerKnobs(r=self.workload.rate, **base)

    def build_cluster(self) -> ClusterConfig:
        c = self.cluster
        devices = [DeviceSpec(id=i, **d.model_dump()) for i, d in enumerate(c.devices)]
        segments = [SegmentProfile(**s.model_dump()) for s in c.segments]
        knobs = [self.server_knobs(i) for i in range(len(devices))]
        for d, k in zip(devices, knobs):
            m = k.M_max if k.M_max is not None else d.m_max
            if m > d.vram_total:
                raise ValueError(f"server {d.id}: M_max {m:g} exceeds vram_total {d.vram_total:g}")
            if m < max(s.param_base * max(k.widths) ** 2 for s in segments):
                raise ValueError(f"server {d.id}: M_max {m:g} cannot hold the largest instance")
        return ClusterConfig(devices, segments, knobs, groups=tuple(c.groups),
                             router_period=c.router_period,
                             telemetry_period=c.telemetry_period,
                             unloader_period=c.unloader_period)

    @property
    def workload_seed(self) -> int:
        return self.workload.seed if self.workload.seed is not None else self.seed

    def build_workload(self, horizon: Optional[float] = None,
                       seed: Optional[int] = None) -> WorkloadSpec:
        n = len(self.knobs.widths)
        demand = self.workload.width_demand or [1.0 / n] * n
        return WorkloadSpec(rate=self.workload.rate,
                            horizon=self.workload.horizon if horizon is None else horizon,
                            width_demand=tuple(demand),
                            seed=self.workload_seed if seed is None else seed,
                            max_requests=self.workload.max_requests)

    def reward_weights(self) -> RewardWeights:
        return self.reward.weights()

    def exploration_schedule(self) -> ExplorationSchedule:
        return ExplorationSchedule(**self.exploration.model_dump())

    def ppo_hyper(self) -> PPOHyper:
        d = self.ppo.model_dump(exclude={"updates", "episode_horizon"})
        return PPOHyper(**d)

    def accuracy_table(self) -> AccuracyTable:
        t = AccuracyTable.load(self.accuracy.table)
        t.top1_mean_override = self.accuracy.top1_mean
        return t

    # -- serialization -----------------------------------------------------

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)

    def digest(self) -> str:
        canon = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]


def load_config(path: Union[str, Path, None]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    data = yaml.safe_load(Path(path).read_text()) or {}
    return ExperimentConfig.model_validate(data)


def preset_config(name: Optional[str]) -> ExperimentConfig:
    """Default experiment, optionally with a shipped reward preset."""
    if name is None or name == "default":
        return ExperimentConfig()
    if name not in REWARD_PRESETS:
        raise ValueError(f"unknown preset {name!r}")
    return ExperimentConfig(reward=RewardConfig(preset=name),
                            ppo=PPOConfig(lr=1e-3, updates=400))
