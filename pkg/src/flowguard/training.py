"""Mini-batch maximum-likelihood training of flows: clean, adversarial
(every batch replaced by its attack) and hybrid (half clean, half attacked)."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, pgd
from .errors import (
    ConfigError,
    InvalidInputError,
    NumericOverflowError,
    TrainingDivergedError,
)
from .flow import FlowModel, nll, to_dict
from .numerics import RngState

MODES = ("clean", "adversarial", "hybrid")
DIVERGENCE_BPD = 1e6


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mode: str = "clean"
    attack: AttackConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.mode != "clean" and self.attack is None:
            raise ConfigError(f"mode {self.mode!r} needs an attack config")
        if self.mode == "hybrid" and self.batch_size < 2:
            raise ConfigError("hybrid mode needs batch_size >= 2")


@dataclass
class TrainReport:
    train_nll: list = field(default_factory=list)  # bits/dim, per epoch
    test_clean_nll: list = field(default_factory=list)
    test_adv_nll: list = field(default_factory=list)
    attack_gain: list = field(default_factory=list)  # min over batches of post- minus pre-attack NLL
    initial_test_nll: float | None = None
    wall_time: float = 0.0
    checkpoint: str | None = None

    def to_dict(self, include_time: bool = True) -> dict:
        d = asdict(self)
        if not include_time:
            d.pop("wall_time")
        return d

    def save(self, path, include_time: bool = True) -> None:
        Path(path).write_text(json.dumps(self.to_dict(include_time), indent=1, sort_keys=True) + "\n")


class Adam:
    def __init__(self, params: list[np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


def _loss_and_grads(model: FlowModel, x: np.ndarray) -> tuple[float, list[np.ndarray]]:
    leaves = [ad.Tensor(a, requires_grad=True) for a in model.parameters()]
    with ad.Tape() as tape:
        loss = model.nll_tensor(x, leaves).mean()
    g = ad.backward(tape, loss)
    return float(loss.data), [g[t] for t in leaves]


def _bpd(model, nats) -> float:
    return float(nats) / (model.dim * math.log(2.0))


def _attack_batch(model, x, attack: AttackConfig) -> tuple[np.ndarray, float]:
    trace = pgd(model, x, attack)
    return trace.x_adv, float(np.min(trace.nll_after - trace.nll_before))


def train(model: FlowModel, data, cfg: TrainConfig, test_data=None, eval_attack: AttackConfig | None = None) -> TrainReport:
    """Train ``model`` in place according to ``cfg.mode``.

    ``test_data`` (optional) is evaluated after every epoch, clean and under
    ``eval_attack`` (defaults to the training attack).
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.shape[0] == 0:
        raise InvalidInputError("training data is empty")
    started = time.perf_counter()
    rng = RngState(cfg.seed).generator()
    report = TrainReport()
    eval_attack = eval_attack or cfg.attack
    if test_data is not None:
        test_data = np.atleast_2d(np.asarray(test_data, dtype=float))
        report.initial_test_nll = float(np.mean(nll(model, test_data)[1])) if model.initialized else None
    if cfg.epochs == 0:
        report.wall_time = time.perf_counter() - started
        return report
    if not model.initialized:
        model.data_init(data[rng.permutation(data.shape[0])[: max(cfg.batch_size, 512)]])
        if test_data is not None:
            report.initial_test_nll = float(np.mean(nll(model, test_data)[1]))
    params = model.parameters()
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    last_good = to_dict(model)
    n = data.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses, gains = [], []
        for start in range(0, n, cfg.batch_size):
            batch = data[order[start:start + cfg.batch_size]]
            if cfg.mode == "adversarial":
                batch, gain = _attack_batch(model, batch, cfg.attack)
                gains.append(gain)
            elif cfg.mode == "hybrid" and batch.shape[0] >= 2:
                half = batch.shape[0] // 2
                attacked, gain = _attack_batch(model, batch[half:], cfg.attack)
                gains.append(gain)
                batch = np.concatenate([batch[:half], attacked], axis=0)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads = _loss_and_grads(model, batch)
            except NumericOverflowError as exc:
                raise TrainingDivergedError(f"training diverged in epoch {epoch}: {exc}", last_good=last_good) from None
            if not math.isfinite(loss) or _bpd(model, loss) > DIVERGENCE_BPD:
                raise TrainingDivergedError(f"training diverged in epoch {epoch} (loss {loss})", last_good=last_good)
            params = opt.step(params, grads)
            model.set_parameters(params)
            params = model.parameters()
            losses.append(loss)
        report.train_nll.append(_bpd(model, np.mean(losses)))
        report.attack_gain.append(min(gains) if gains else None)
        if test_data is not None:
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    clean = nll(model, test_data)[1]
            except NumericOverflowError:
                clean = np.array([np.inf])
            if not np.all(np.isfinite(clean)):
                raise TrainingDivergedError(f"non-finite held-out NLL after epoch {epoch}", last_good=last_good)
            report.test_clean_nll.append(float(np.mean(clean)))
            if eval_attack is not None:
                report.test_adv_nll.append(pgd(model, test_data, eval_attack).mean_after)
        last_good = to_dict(model)
    model.metadata = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "mode": cfg.mode,
        "loss_curve": [repr(v) for v in report.train_nll],
    }
    report.wall_time = time.perf_counter() - started
    return report


def train_clean(model, data, cfg: TrainConfig, **kw) -> TrainReport:
    if cfg.mode != "clean":
        raise ConfigError("train_clean needs mode='clean'")
    return train(model, data, cfg, **kw)


def train_adversarial(model, data, cfg: TrainConfig, **kw) -> TrainReport:
    if cfg.mode != "adversarial":
        raise ConfigError("train_adversarial needs mode='adversarial'")
    return train(model, data, cfg, **kw)


def train_hybrid(model, data, cfg: TrainConfig, **kw) -> TrainReport:
    if cfg.mode != "hybrid":
        raise ConfigError("train_hybrid needs mode='hybrid'")
    return train(model, data, cfg, **kw)
