"""Factored PPO router.

The policy picks (server, width, group size) from three categorical heads of
a shared MLP. The server head is mixed with a uniform distribution for
exploration, and that mixture is part of the likelihood used in the PPO
ratio. Returns are one-step: each routed block's reward is its own return.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Sequence

import numpy as np

from .accprior import AccuracyTable
from .core import ActionTriple
from .neural import (Adam, PolicyParams, RunningNorm, backward, clip_grad_norm, forward,
                     init_params, sample_categorical, softmax_logprob_entropy)
from .simkernel import BlockOutcome, ClusterConfig, Simulator, WorkloadSpec, named_rng

log = logging.getLogger(__name__)

__all__ = ["ActionTriple", "Transition", "RewardWeights", "ExplorationSchedule", "PPOHyper",
           "epsilon_at", "mixed_server_logprob", "joint_logprob", "select_action",
           "compute_reward", "advantages", "ppo_losses", "update", "random_router",
           "RandomRouter", "PPORouter", "Learner", "TrainingDiverged", "train"]


@dataclass
class RewardWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.01
    delta: float = 1.0
    bonus: float = 0.0
    center_prior: bool = False

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma, self.delta, self.bonus)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("reward weights must be finite")
        if min(self.alpha, self.beta, self.gamma, self.delta) < 0:
            raise ValueError("alpha, beta, gamma, delta must be >= 0")


REWARD_PRESETS = {
    # latency and energy dominate: the policy collapses onto the slimmest width
    "overfit": RewardWeights(alpha=1.0, beta=200.0, gamma=1.0, delta=1.0),
    # accuracy outweighs relaxed latency/energy penalties
    "balanced": RewardWeights(alpha=20.0, beta=0.5, gamma=0.002, delta=0.1),
}


@dataclass
class ExplorationSchedule:
    eps_min: float = 0.05
    eps_max: float = 0.3
    T_dec: float = 20000

    def __post_init__(self):
        if not 0.0 <= self.eps_min <= self.eps_max <= 1.0:
            raise ValueError("require 0 <= eps_min <= eps_max <= 1")
        if self.T_dec <= 0:
            raise ValueError("T_dec must be positive")


@dataclass
class PPOHyper:
    clip: float = 0.2
    c_v: float = 0.5
    c_H: float = 0.01
    K: int = 3
    lr: float = 3e-4
    window: int = 256
    hidden: int = 64
    max_grad_norm: float = 0.5


@dataclass
class Transition:
    state: np.ndarray
    action: ActionTriple
    logprob_old: float
    value_old: float
    reward: Optional[float]
    epsilon_used: float


def epsilon_at(schedule: ExplorationSchedule, t: float) -> float:
    if t < 0:
        raise ValueError("step must be >= 0")
    e = schedule.eps_max + (t / schedule.T_dec) * (schedule.eps_min - schedule.eps_max)
    return max(schedule.eps_min, e)


def mixed_server_logprob(probs_srv: np.ndarray, srv: int, eps: float) -> float:
    n = len(probs_srv)
    return math.log((1.0 - eps) * probs_srv[srv] + eps / n)


def joint_logprob(probs_srv, probs_w, probs_g, action: ActionTriple, eps: float) -> float:
    return (mixed_server_logprob(probs_srv, action.srv, eps)
            + math.log(probs_w[action.w]) + math.log(probs_g[action.g]))


def select_action(params: PolicyParams, state: np.ndarray, eps: float,
                  rng: np.random.Generator, greedy: bool = False):
    """Sample (srv, w, g); returns (action, joint log-prob, value)."""
    ls, lw, lg, v, _ = forward(params, state)
    ps, _, _ = softmax_logprob_entropy(ls)
    pw, _, _ = softmax_logprob_entropy(lw)
    pg, _, _ = softmax_logprob_entropy(lg)
    mixed = (1.0 - eps) * ps + eps / len(ps)
    if greedy:
        action = ActionTriple(int(np.argmax(mixed)), int(np.argmax(pw)), int(np.argmax(pg)))
    else:
        action = ActionTriple(sample_categorical(mixed, rng), sample_categorical(pw, rng),
                              sample_categorical(pg, rng))
    return action, joint_logprob(ps, pw, pg, action, eps), float(v)


def compute_reward(prior: float, latency: float, mean_power: float, utils: Sequence[float],
                   weights: RewardWeights) -> float:
    if latency < 0:
        raise ValueError("latency must be >= 0")
    if any(not 0.0 <= u <= 1.0 for u in utils):
        raise ValueError("utilizations must be fractions in [0, 1]")
    n = len(utils)
    mu = math.fsum(utils) / n
    var = math.fsum((u - mu) ** 2 for u in utils) / n
    energy = mean_power * latency
    return (weights.alpha * prior - weights.beta * latency - weights.gamma * energy
            - weights.delta * var + weights.bonus)


def advantages(rewards: np.ndarray, values: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """One-step advantages, standardized over the batch (raw for a single sample)."""
    a = np.asarray(rewards, dtype=float) - np.asarray(values, dtype=float)
    if a.size < 2:
        return a
    return (a - a.mean()) / (a.std() + eps)


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray  # (B, 3) int: srv, w, g
    logp_old: np.ndarray
    returns: np.ndarray
    adv: np.ndarray
    eps: np.ndarray

    @classmethod
    def from_transitions(cls, ts: Sequence[Transition]) -> "Batch":
        rewards = np.array([t.reward for t in ts], dtype=float)
        values = np.array([t.value_old for t in ts], dtype=float)
        return cls(states=np.stack([t.state for t in ts]),
                   actions=np.array([tuple(t.action) for t in ts], dtype=int),
                   logp_old=np.array([t.logprob_old for t in ts], dtype=float),
                   returns=rewards, adv=advantages(rewards, values),
                   eps=np.array([t.epsilon_used for t in ts], dtype=float))


@dataclass
class Losses:
    clip: float
    value: float
    entropy: float
    total: float
    ratio: np.ndarray


def ppo_losses(params: PolicyParams, batch: Batch, clip: float = 0.2, c_v: float = 0.5,
               c_H: float = 0.01, with_grad: bool = True):
    """Clipped surrogate, value loss, entropy and total loss J (to minimize).

    Returns (Losses, grads or None).
    """
    B = len(batch.states)
    ls, lw, lg, v, tape = forward(params, batch.states)
    ps, lps, Hs = softmax_logprob_entropy(ls)
    pw, lpw, Hw = softmax_logprob_entropy(lw)
    pg, lpg, Hg = softmax_logprob_entropy(lg)
    rows = np.arange(B)
    a_s, a_w, a_g = batch.actions[:, 0], batch.actions[:, 1], batch.actions[:, 2]
    eps = batch.eps
    n_srv = ps.shape[1]
    p_a = ps[rows, a_s]
    q = (1.0 - eps) * p_a + eps / n_srv
    logp = np.log(q) + lpw[rows, a_w] + lpg[rows, a_g]
    ratio = np.exp(logp - batch.logp_old)
    adv = batch.adv
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    l_clip = float(np.mean(np.minimum(surr1, surr2)))
    l_v = 0.5 * float(np.mean((batch.returns - v) ** 2))
    ent = float(np.mean(Hs + Hw + Hg))
    total = -l_clip + c_v * l_v - c_H * ent
    out = Losses(l_clip, l_v, ent, total, ratio)
    if not with_grad:
        return out, None

    # gradient flows through the ratio only where the unclipped term is the min
    d_logp = -np.where(surr1 <= surr2, adv, 0.0) * ratio / B
    d_ls = (d_logp * (1.0 - eps) * p_a / q)[:, None] * (np.eye(n_srv)[a_s] - ps)
    d_lw = d_logp[:, None] * (np.eye(pw.shape[1])[a_w] - pw)
    d_lg = d_logp[:, None] * (np.eye(pg.shape[1])[a_g] - pg)
    # entropy regularizer over the unmixed heads: dH/dl = -p (log p + H)
    k = c_H / B
    d_ls += k * ps * (lps + Hs[:, None])
    d_lw += k * pw * (lpw + Hw[:, None])
    d_lg += k * pg * (lpg + Hg[:, None])
    d_v = c_v * (v - batch.returns) / B
    return out, backward(params, tape, d_ls, d_lw, d_lg, d_v)


def update(params: PolicyParams, optimizer: Adam, batch: Batch, hyper: PPOHyper) -> list[Losses]:
    """K full-batch epochs of clipped-gradient Adam steps on J."""
    trace = []
    backup = params.copy()
    for epoch in range(hyper.K):
        losses, grads = ppo_losses(params, batch, hyper.clip, hyper.c_v, hyper.c_H)
        if not math.isfinite(losses.total):
            params.arrays = backup.arrays
            raise FloatingPointError(
                f"non-finite PPO loss at epoch {epoch}: clip={losses.clip} value={losses.value} "
                f"entropy={losses.entropy}")
        grads, _ = clip_grad_norm(grads, hyper.max_grad_norm)
        optimizer.step(params, grads)
        trace.append(losses)
    return trace


def random_router(state: Any, rng: np.random.Generator, n_servers: int, n_widths: int,
                  n_groups: int) -> ActionTriple:
    """Uniform over every head; ignores the state."""
    return ActionTriple(int(rng.integers(n_servers)), int(rng.integers(n_widths)),
                        int(rng.integers(n_groups)))


class RandomRouter:
    """Baseline: uniform server and group; requests keep their sampled width."""

    overrides_width = False

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def decide(self, state, sim):
        c = sim.cluster
        return random_router(state, self.rng, len(c.devices), len(c.widths), len(c.groups)), None

    def observe(self, token, outcome):
        pass


@dataclass
class UpdateLog:
    update: int
    mean_reward: float
    l_clip: float
    l_v: float
    entropy: float
    epsilon: float
    srv_share: list[float]
    width_share: list[float]


class Learner:
    """Collects transitions as rewards arrive and runs a PPO update per window."""

    def __init__(self, params: PolicyParams, norm: RunningNorm, weights: RewardWeights,
                 schedule: ExplorationSchedule, hyper: PPOHyper):
        self.params = params
        self.norm = norm
        self.weights = weights
        self.schedule = schedule
        self.hyper = hyper
        self.optimizer = Adam(params, lr=hyper.lr)
        self.steps = 0
        self.updates = 0
        self.buffer: list[Transition] = []
        self.curves: list[UpdateLog] = []

    def epsilon(self) -> float:
        return epsilon_at(self.schedule, self.steps)

    def record(self, state, action, logp, value, eps) -> Transition:
        self.steps += 1
        return Transition(state, action, logp, value, None, eps)

    def complete(self, t: Transition, outcome: BlockOutcome) -> None:
        t.reward = compute_reward(outcome.prior, outcome.latency, outcome.mean_power,
                                  outcome.utils, self.weights)
        self.buffer.append(t)
        if len(self.buffer) >= self.hyper.window:
            self._update()

    def _update(self) -> None:
        batch = Batch.from_transitions(self.buffer)
        eps = self.epsilon()
        trace = update(self.params, self.optimizer, batch, self.hyper)
        first = trace[0] if trace else None
        n_s, n_w = self.params.n_servers, self.params.n_widths
        self.curves.append(UpdateLog(
            update=self.updates,
            mean_reward=float(batch.returns.mean()),
            l_clip=first.clip if first else 0.0,
            l_v=first.value if first else 0.0,
            entropy=first.entropy if first else 0.0,
            epsilon=eps,
            srv_share=(np.bincount(batch.actions[:, 0], minlength=n_s) / len(batch.actions)).tolist(),
            width_share=(np.bincount(batch.actions[:, 1], minlength=n_w) / len(batch.actions)).tolist(),
        ))
        self.updates += 1
        self.buffer = []
        if log.isEnabledFor(logging.DEBUG):
            c = self.curves[-1]
            log.debug("update %d reward=%.4f clip=%.4f V=%.4f H=%.3f eps=%.3f srv=%s w=%s",
                      c.update, c.mean_reward, c.l_clip, c.l_v, c.entropy, c.epsilon,
                      np.round(c.srv_share, 2), np.round(c.width_share, 2))


class PPORouter:
    """Routes with a policy; trains it too when given a Learner."""

    overrides_width = True

    def __init__(self, params: PolicyParams, norm: RunningNorm, rng: np.random.Generator,
                 learner: Optional[Learner] = None, eval_eps: float = 0.0, greedy: bool = False):
        self.params = params
        self.norm = norm
        self.rng = rng
        self.learner = learner
        self.eval_eps = eval_eps
        self.greedy = greedy

    def decide(self, state, sim):
        if self.learner is not None:
            self.norm.update(state)
            eps = self.learner.epsilon()
        else:
            eps = self.eval_eps
        x = self.norm(state)
        action, logp, value = select_action(self.params, x, eps, self.rng, self.greedy)
        token = None
        if self.learner is not None:
            token = self.learner.record(x, action, logp, value, eps)
        return action, token

    def observe(self, token, outcome):
        if token is not None:
            self.learner.complete(token, outcome)


@dataclass
class TrainResult:
    params: PolicyParams
    norm: RunningNorm
    curves: list[UpdateLog] = field(default_factory=list)
    episodes: int = 0


class TrainingDiverged(FloatingPointError):
    """Raised when an update produces a non-finite loss.

    ``result`` holds the parameters as they were before the failed update.
    """

    def __init__(self, msg: str, result: "TrainResult"):
        super().__init__(msg)
        self.result = result


def train(cluster: ClusterConfig, workload: WorkloadSpec, weights: RewardWeights,
          schedule: ExplorationSchedule, hyper: PPOHyper, updates: int, seed: int,
          table: Optional[AccuracyTable] = None, callback=None) -> TrainResult:
    """Alternate collection episodes and PPO updates until ``updates`` are done."""
    widths, groups = cluster.widths, cluster.groups
    params = init_params(len(cluster.devices), len(widths), len(groups), hyper.hidden,
                         named_rng(seed, "init"))
    norm = RunningNorm(params.input_dim)
    learner = Learner(params, norm, weights, schedule, hyper)
    policy_rng = named_rng(seed, "policy")
    episode_rng = named_rng(seed, "episodes")
    table = table if table is not None else AccuracyTable.load()
    episodes = 0
    while learner.updates < updates:
        wl = replace(workload, seed=int(episode_rng.integers(2**31)))
        router = PPORouter(params, norm, policy_rng, learner=learner)
        before = learner.steps
        sim = Simulator(cluster, wl, router, table=table, center_prior=weights.center_prior)
        try:
            sim.run(stop=lambda: learner.updates >= updates)
        except FloatingPointError as e:
            norm.frozen = True
            raise TrainingDiverged(f"update {learner.updates}: {e}",
                                   TrainResult(params, norm, learner.curves, episodes)) from e
        episodes += 1
        if learner.steps == before:
            raise RuntimeError("training episode produced no routing decisions")
        if callback is not None:
            callback(learner, episodes)
    norm.frozen = True
    return TrainResult(params, norm, learner.curves, episodes)
