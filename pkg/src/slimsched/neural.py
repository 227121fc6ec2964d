"""Shared-trunk MLP with three categorical heads and a value head.

One tanh hidden layer feeds four linear heads: server logits, width logits,
group logits and a scalar value. Gradients are written out by hand; the
finite-difference tests in the suite check them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

PARAM_NAMES = ("W1", "b1", "Ws", "bs", "Ww", "bw", "Wg", "bg", "Wv", "bv")
HEADS = (("Ws", "bs"), ("Ww", "bw"), ("Wg", "bg"), ("Wv", "bv"))


@dataclass
class PolicyParams:
    n_servers: int
    n_widths: int
    n_groups: int
    hidden: int
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return 2 + 3 * self.n_servers

    def shapes(self) -> dict[str, tuple[int, ...]]:
        D, H = self.input_dim, self.hidden
        return {"W1": (H, D), "b1": (H,),
                "Ws": (self.n_servers, H), "bs": (self.n_servers,),
                "Ww": (self.n_widths, H), "bw": (self.n_widths,),
                "Wg": (self.n_groups, H), "bg": (self.n_groups,),
                "Wv": (1, H), "bv": (1,)}

    def validate(self) -> None:
        for name, shape in self.shapes().items():
            a = self.arrays.get(name)
            if a is None or a.shape != shape:
                raise ValueError(f"parameter {name}: expected shape {shape}, "
                                 f"got {None if a is None else a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"parameter {name} has non-finite entries")

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.n_servers, self.n_widths, self.n_groups, self.hidden,
                            {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int, scale: float = 1.0) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return scale * rng.uniform(-a, a, size=(fan_out, fan_in))


def init_params(n_servers: int, n_widths: int, n_groups: int, hidden: int,
                rng: np.random.Generator) -> PolicyParams:
    p = PolicyParams(n_servers, n_widths, n_groups, hidden)
    D, H = p.input_dim, hidden
    p.arrays = {
        "W1": _glorot(rng, H, D), "b1": np.zeros(H),
        "Ws": _glorot(rng, n_servers, H), "bs": np.zeros(n_servers),
        "Ww": _glorot(rng, n_widths, H), "bw": np.zeros(n_widths),
        "Wg": _glorot(rng, n_groups, H), "bg": np.zeros(n_groups),
        # small value head keeps early value loss from dominating
        "Wv": _glorot(rng, 1, H, scale=0.1), "bv": np.zeros(1),
    }
    return p


@dataclass
class Tape:
    x: np.ndarray
    h: np.ndarray


def forward(params: PolicyParams, x: np.ndarray):
    """Returns (logits_srv, logits_w, logits_g, value, tape).

    ``x`` is one standardized state vector or a (B, D) batch of them.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.input_dim:
        raise ValueError(f"state has length {x.shape[-1]}, expected {params.input_dim}")
    a = params.arrays
    h = np.tanh(x @ a["W1"].T + a["b1"])
    ls = h @ a["Ws"].T + a["bs"]
    lw = h @ a["Ww"].T + a["bw"]
    lg = h @ a["Wg"].T + a["bg"]
    v = (h @ a["Wv"].T + a["bv"])[..., 0]
    return ls, lw, lg, v, Tape(x, h)


def softmax_logprob_entropy(logits: np.ndarray):
    """Softmax over the last axis with max-shift; returns (p, log p, entropy)."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    logz = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    logp = z - logz
    p = np.exp(logp)
    ent = -np.sum(p * logp, axis=-1)
    return p, logp, ent


def sample_categorical(probs: np.ndarray, rng_or_u: Union[np.random.Generator, float]) -> int:
    """Inverse-CDF draw from one uniform."""
    u = rng_or_u.random() if isinstance(rng_or_u, np.random.Generator) else float(rng_or_u)
    cdf = np.cumsum(probs)
    i = int(np.searchsorted(cdf, u, side="right"))
    # guard against cdf[-1] falling a hair below 1
    return min(i, len(probs) - 1)


def backward(params: PolicyParams, tape: Optional[Tape], d_ls: np.ndarray, d_lw: np.ndarray,
             d_lg: np.ndarray, d_v: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given the loss gradient w.r.t. each head output."""
    if tape is None:
        raise RuntimeError("backward called without a recorded forward pass")
    a = params.arrays
    x = np.atleast_2d(tape.x)
    h = np.atleast_2d(tape.h)
    d_ls, d_lw, d_lg = (np.atleast_2d(d) for d in (d_ls, d_lw, d_lg))
    d_v = np.asarray(d_v, dtype=float).reshape(-1, 1)
    g = {}
    dh = np.zeros_like(h)
    for (wn, bn), d in zip(HEADS, (d_ls, d_lw, d_lg, d_v)):
        g[wn] = d.T @ h
        g[bn] = d.sum(axis=0)
        dh += d @ a[wn]
    dz = dh * (1.0 - h * h)
    g["W1"] = dz.T @ x
    g["b1"] = dz.sum(axis=0)
    return g


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float):
    """Scale all gradients so the global L2 norm is at most ``max_norm``.

    Returns (grads, pre-clip norm).
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        s = max_norm / norm
        grads = {k: v * s for k, v in grads.items()}
    return grads, norm


class Adam:
    def __init__(self, params: PolicyParams, lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: PolicyParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m = self.m[k] = b1 * self.m[k] + (1 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params.arrays[k] = params.arrays[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class RunningNorm:
    """Running mean/variance standardizer for state features (Welford)."""

    def __init__(self, dim: int, clip: float = 10.0):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)
        self.clip = clip
        self.frozen = False

    def update(self, x: np.ndarray) -> None:
        if self.frozen:
            return
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)

    @property
    def var(self) -> np.ndarray:
        return self.m2 / self.count if self.count > 1 else np.ones_like(self.mean)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mean) / np.sqrt(self.var + 1e-8)
        return np.clip(z, -self.clip, self.clip)


def save_checkpoint(path: Union[str, Path], params: PolicyParams, norm: RunningNorm,
                    extra: Optional[dict] = None) -> None:
    doc = {
        "format": "slimsched-policy/1",
        "dims": {"n_servers": params.n_servers, "n_widths": params.n_widths,
                 "n_groups": params.n_groups, "hidden": params.hidden},
        "params": {k: {"shape": list(params.arrays[k].shape),
                       "data": params.arrays[k].ravel(order="C").tolist()}
                   for k in PARAM_NAMES},
        "norm": {"count": norm.count, "mean": norm.mean.tolist(), "m2": norm.m2.tolist(),
                 "clip": norm.clip},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path: Union[str, Path]) -> tuple[PolicyParams, RunningNorm, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "slimsched-policy/1":
        raise ValueError(f"{path}: not a policy checkpoint")
    d = doc["dims"]
    p = PolicyParams(d["n_servers"], d["n_widths"], d["n_groups"], d["hidden"])
    for k in PARAM_NAMES:
        ent = doc["params"][k]
        arr = np.array(ent["data"], dtype=float)
        if arr.size != math.prod(ent["shape"]):
            raise ValueError(f"{path}: parameter {k} has {arr.size} values for shape {ent['shape']}")
        p.arrays[k] = arr.reshape(ent["shape"])
    p.validate()
    nd = doc["norm"]
    norm = RunningNorm(p.input_dim, clip=nd["clip"])
    norm.count = nd["count"]
    norm.mean = np.array(nd["mean"], dtype=float)
    norm.m2 = np.array(nd["m2"], dtype=float)
    if norm.mean.shape != (p.input_dim,) or norm.m2.shape != (p.input_dim,):
        raise ValueError(f"{path}: normalization statistics have the wrong length")
    norm.frozen = True
    return p, norm, doc.get("extra", {})
