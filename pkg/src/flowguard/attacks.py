"""Gradient attacks on flow likelihoods and the uniform-noise baseline.

In-distribution attacks push the NLL of genuine samples up; the
out-of-distribution attack pulls the NLL of noise down.  Both are projected
signed-gradient (linf) or normalized-gradient (l2) iterations in an
epsilon-ball around the starting point, optionally clipped to the data range.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .flow import FlowModel, nll
from .numerics import as_generator

NORMS = ("linf", "l2")
DIRECTIONS = ("decrease_likelihood", "increase_likelihood")


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 0.1
    step_size: float | None = None
    iterations: int = 10
    direction: str = "decrease_likelihood"
    clip_min: float | None = None
    clip_max: float | None = None
    random_start: bool = False

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.step_size is not None and self.step_size < 0:
            raise ConfigError("step_size must be >= 0")
        if self.clip_min is not None and self.clip_max is not None and self.clip_min > self.clip_max:
            raise ConfigError("clip_min exceeds clip_max")

    @property
    def step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / max(self.iterations, 1)

    @property
    def sign(self) -> float:
        # +1 ascends NLL
        return 1.0 if self.direction == "decrease_likelihood" else -1.0


@dataclass
class AttackTrace:
    x_adv: np.ndarray
    nll_history: np.ndarray  # mean bits/dim of the iterate at each step, start included
    nll_before: np.ndarray  # per-sample bits/dim
    nll_after: np.ndarray
    linf_max: float
    l2_max: float
    zero_gradient: bool = False

    @property
    def mean_before(self) -> float:
        return float(np.mean(self.nll_before))

    @property
    def mean_after(self) -> float:
        return float(np.mean(self.nll_after))


def nll_and_input_grad(model: FlowModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample NLL (nats) and its gradient with respect to each sample."""
    xt = ad.Tensor(x, requires_grad=True)
    with ad.Tape() as tape:
        per = model.nll_tensor(xt)
        total = per.sum()
    return per.data, ad.backward(tape, total)[xt]


def _project(x, x0, cfg: AttackConfig) -> np.ndarray:
    d = x - x0
    if cfg.norm == "linf":
        d = np.clip(d, -cfg.epsilon, cfg.epsilon)
    else:
        norms = np.linalg.norm(d, axis=1, keepdims=True)
        scale = np.where(norms > cfg.epsilon, cfg.epsilon / np.maximum(norms, 1e-300), 1.0)
        d = d * scale
    out = x0 + d
    if cfg.clip_min is not None or cfg.clip_max is not None:
        out = np.clip(out, cfg.clip_min, cfg.clip_max)
    return out


def _direction(g: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if cfg.norm == "linf":
        return np.sign(g)
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    return np.where(norms > 0, g / np.where(norms > 0, norms, 1.0), 0.0)


def pgd(model: FlowModel, x, cfg: AttackConfig, rng=None) -> AttackTrace:
    """Projected gradient attack returning, per sample, the best iterate seen."""
    x0 = np.atleast_2d(np.asarray(x, dtype=float))
    bits = 1.0 / (model.dim * np.log(2.0))
    cur = x0.copy()
    if cfg.random_start and cfg.epsilon > 0:
        g = as_generator(rng)
        if cfg.norm == "linf":
            cur = cur + g.uniform(-cfg.epsilon, cfg.epsilon, cur.shape)
        else:
            v = g.standard_normal(cur.shape)
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            cur = cur + v * cfg.epsilon * g.random((cur.shape[0], 1))
        cur = _project(cur, x0, cfg)
    obj, grad = nll_and_input_grad(model, cur)
    start_nll = nll(model, x0)[0] if cfg.random_start else obj
    best_x = cur.copy()
    best_obj = cfg.sign * obj
    # the clean point is itself a feasible candidate
    take0 = cfg.sign * start_nll > best_obj
    best_x[take0] = x0[take0]
    best_obj = np.where(take0, cfg.sign * start_nll, best_obj)
    history = [float(np.mean(obj)) * bits]
    zero = False
    for it in range(cfg.iterations):
        if not np.any(grad):
            zero = True
            warnings.warn("attack gradient is zero everywhere; returning the input unchanged", RuntimeWarning)
            break
        cur = _project(cur + cfg.sign * cfg.step * _direction(grad, cfg), x0, cfg)
        obj, grad = nll_and_input_grad(model, cur)
        history.append(float(np.mean(obj)) * bits)
        better = cfg.sign * obj > best_obj
        best_x[better] = cur[better]
        best_obj = np.where(better, cfg.sign * obj, best_obj)
    after = cfg.sign * best_obj
    d = best_x - x0
    return AttackTrace(
        x_adv=best_x,
        nll_history=np.array(history),
        nll_before=start_nll * bits,
        nll_after=after * bits,
        linf_max=float(np.max(np.abs(d))) if d.size else 0.0,
        l2_max=float(np.max(np.linalg.norm(d, axis=1))) if d.size else 0.0,
        zero_gradient=zero,
    )


def fgsm(model: FlowModel, x, cfg: AttackConfig) -> AttackTrace:
    """Single signed-gradient step of ``cfg.step`` (projected and clipped)."""
    if cfg.iterations != 1:
        cfg = replace(cfg, iterations=1)
    return pgd(model, x, cfg)


def uniform_noise_baseline(x, epsilon: float, clip_min=None, clip_max=None, rng=None) -> np.ndarray:
    """``x + u`` with ``u ~ Unif[-eps, eps]`` per coordinate, then clipped."""
    if epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    x = np.asarray(x, dtype=float)
    g = as_generator(rng)
    out = x + g.uniform(-epsilon, epsilon, x.shape)
    if clip_min is not None or clip_max is not None:
        out = np.clip(out, clip_min, clip_max)
    return out


def ood_attack(model: FlowModel, noise, cfg: AttackConfig) -> AttackTrace:
    """Lower the NLL of out-of-distribution points (e.g. uniform noise)."""
    return pgd(model, noise, replace(cfg, direction="increase_likelihood"))
