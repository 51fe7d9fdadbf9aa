"""A minimal normalizing flow on flat vectors.

Layers map data to latents (the inference direction ``z = f^{-1}(x)``) and
report the log-Jacobian of that map, so

    log p(x) = log N(z; 0, I) + logdet.

Sampling runs the layers backwards.  Three layer types are provided:
activation normalization, an LU-parameterized invertible linear map (the flat
analog of an invertible 1x1 convolution) and RealNVP-style affine coupling
with tanh-clamped log-scales.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidInputError, NumericOverflowError, ParseError
from .numerics import as_generator

LOG_2PI = math.log(2.0 * math.pi)
FORMAT_VERSION = 1
DEFAULT_CLAMP = 5.0
DEFAULT_HIDDEN = 64


class Layer:
    kind = "layer"

    def __init__(self, dim: int):
        self.dim = dim
        self.params: dict[str, np.ndarray] = {}

    def forward(self, x: Tensor, p: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def inverse(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def fixed(self) -> dict:
        return {}

    def param_names(self) -> list[str]:
        return sorted(self.params)


class ActNorm(Layer):
    """``y = (x + bias) * exp(log_scale)`` with data-dependent initialization."""

    kind = "actnorm"

    def __init__(self, dim: int, initialized: bool = False):
        super().__init__(dim)
        self.params = {"bias": np.zeros(dim), "log_scale": np.zeros(dim)}
        self.initialized = initialized

    def initialize(self, x: np.ndarray) -> None:
        std = x.std(axis=0)
        std = np.where(std > 1e-6, std, 1.0)
        self.params["bias"] = -x.mean(axis=0)
        self.params["log_scale"] = -np.log(std)
        self.initialized = True

    def forward(self, x, p):
        y = ad.scale_shift(x + p["bias"], p["log_scale"], 0.0)
        return y, p["log_scale"].sum()

    def inverse(self, y):
        return y * np.exp(-self.params["log_scale"]) - self.params["bias"]

    def fixed(self):
        return {"initialized": self.initialized}


class InvLinear(Layer):
    """``y = x W^T`` with ``W = P L (U + diag(sign * exp(log_s)))``.

    P is a fixed permutation, L unit lower triangular, U strictly upper
    triangular; log|det W| is just ``sum(log_s)``.
    """

    kind = "invlinear"

    def __init__(self, dim: int, perm=None, sign=None):
        super().__init__(dim)
        self.perm = np.arange(dim) if perm is None else np.asarray(perm, dtype=int)
        self.sign = np.ones(dim) if sign is None else np.asarray(sign, dtype=float)
        self.params = {"lower": np.zeros((dim, dim)), "upper": np.zeros((dim, dim)), "log_s": np.zeros(dim)}
        self._lmask = np.tril(np.ones((dim, dim)), -1)
        self._umask = np.triu(np.ones((dim, dim)), 1)

    @classmethod
    def random(cls, dim: int, rng) -> "InvLinear":
        g = as_generator(rng)
        q, _ = np.linalg.qr(g.standard_normal((dim, dim)))
        p, lo, up = scipy.linalg.lu(q)
        layer = cls(dim, perm=np.argmax(p, axis=0), sign=np.sign(np.diag(up)))
        layer.params["lower"] = np.tril(lo, -1)
        layer.params["upper"] = np.triu(up, 1)
        layer.params["log_s"] = np.log(np.abs(np.diag(up)))
        return layer

    def perm_matrix(self) -> np.ndarray:
        # column j of P is e_{perm[j]}
        pm = np.zeros((self.dim, self.dim))
        pm[self.perm, np.arange(self.dim)] = 1.0
        return pm

    def weight(self) -> np.ndarray:
        lo = self.params["lower"] * self._lmask + np.eye(self.dim)
        up = self.params["upper"] * self._umask + np.diag(self.sign * np.exp(self.params["log_s"]))
        return self.perm_matrix() @ lo @ up

    def forward(self, x, p):
        eye = np.eye(self.dim)
        lo = p["lower"] * self._lmask + eye
        up = p["upper"] * self._umask + eye * (p["log_s"].exp() * self.sign)
        w = self.perm_matrix() @ lo @ up
        return x @ w.T, p["log_s"].sum()

    def inverse(self, y):
        lo = self.params["lower"] * self._lmask + np.eye(self.dim)
        up = self.params["upper"] * self._umask + np.diag(self.sign * np.exp(self.params["log_s"]))
        rhs = self.perm_matrix().T @ np.atleast_2d(y).T
        tmp = scipy.linalg.solve_triangular(lo, rhs, lower=True, unit_diagonal=True)
        return scipy.linalg.solve_triangular(up, tmp, lower=False).T

    def fixed(self):
        return {"perm": self.perm.tolist(), "sign": self.sign.tolist()}


class Coupling(Layer):
    """Affine coupling: the passive coordinates (``mask == 1``) pass through and
    parameterize a scale and shift of the active ones."""

    kind = "coupling"

    def __init__(self, dim: int, mask, hidden: int = DEFAULT_HIDDEN, clamp: float = DEFAULT_CLAMP, rng=None):
        super().__init__(dim)
        mask = np.asarray(mask, dtype=int)
        if mask.shape != (dim,) or mask.min() == mask.max():
            raise InvalidInputError("coupling mask needs at least one passive and one active coordinate")
        self.mask = mask
        self.hidden = hidden
        self.clamp = clamp
        self.passive = np.flatnonzero(mask == 1)
        self.active = np.flatnonzero(mask == 0)
        g = as_generator(rng)
        k, a = self.passive.size, self.active.size
        for net in ("s", "t"):
            self.params[f"{net}_w1"] = g.normal(0.0, 1.0 / math.sqrt(k), (k, hidden))
            self.params[f"{net}_b1"] = np.zeros(hidden)
            self.params[f"{net}_w2"] = g.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, hidden))
            self.params[f"{net}_b2"] = np.zeros(hidden)
            # zero output layer: the layer starts as the identity
            self.params[f"{net}_w3"] = np.zeros((hidden, a))
            self.params[f"{net}_b3"] = np.zeros(a)

    @staticmethod
    def _mlp(h, p, net):
        h = ad.tanh(h @ p[f"{net}_w1"] + p[f"{net}_b1"])
        h = ad.tanh(h @ p[f"{net}_w2"] + p[f"{net}_b2"])
        return h @ p[f"{net}_w3"] + p[f"{net}_b3"]

    def _st(self, xp, p):
        raw = self._mlp(xp, p, "s")
        s = ad.tanh(raw * (1.0 / self.clamp)) * self.clamp
        return s, self._mlp(xp, p, "t")

    def forward(self, x, p):
        xp = ad.take_cols(x, self.passive)
        xa = ad.take_cols(x, self.active)
        s, t = self._st(xp, p)
        ya = ad.scale_shift(xa, s, t)
        y = ad.merge_cols([xp, ya], [self.passive, self.active], self.dim)
        return y, s.sum(axis=1)

    def inverse(self, y):
        y = np.atleast_2d(y)
        consts = {k: Tensor(v) for k, v in self.params.items()}
        s, t = self._st(Tensor(y[:, self.passive]), consts)
        x = y.copy()
        x[:, self.active] = (y[:, self.active] - t.data) * np.exp(-s.data)
        return x

    def fixed(self):
        return {"mask": self.mask.tolist(), "hidden": self.hidden, "clamp": self.clamp}


@dataclass
class Dequantization:
    enabled: bool = False
    bins: int = 256

    @property
    def offset_bits(self) -> float:
        return math.log2(self.bins) if self.enabled else 0.0


@dataclass
class FlowModel:
    layers: list
    dim: int
    dequant: Dequantization = field(default_factory=Dequantization)
    metadata: dict = field(default_factory=dict)

    # -- parameters --------------------------------------------------------

    def parameter_keys(self) -> list[tuple[int, str]]:
        return [(i, name) for i, layer in enumerate(self.layers) for name in layer.param_names()]

    def parameters(self) -> list[np.ndarray]:
        return [self.layers[i].params[n] for i, n in self.parameter_keys()]

    def set_parameters(self, arrays) -> None:
        for (i, n), a in zip(self.parameter_keys(), arrays):
            self.layers[i].params[n] = np.array(a, dtype=float)

    def copy(self) -> "FlowModel":
        return from_dict(to_dict(self))

    @property
    def initialized(self) -> bool:
        return all(getattr(layer, "initialized", True) for layer in self.layers)

    def data_init(self, x: np.ndarray) -> None:
        """Set any uninitialized activation normalization from a batch."""
        h = self._preprocess(np.atleast_2d(np.asarray(x, dtype=float)), None)
        for layer in self.layers:
            if isinstance(layer, ActNorm) and not layer.initialized:
                layer.initialize(h)
            consts = {k: Tensor(v) for k, v in layer.params.items()}
            h = layer.forward(Tensor(h), consts)[0].data

    # -- density -----------------------------------------------------------

    def _preprocess(self, x, u):
        if not self.dequant.enabled:
            return x
        if u is None:
            u = 0.5
        return (x + u) * (1.0 / self.dequant.bins)

    def forward(self, x, params=None) -> tuple[Tensor, Tensor]:
        """``(z, logdet)`` for a batch; ``params`` are tensors aligned with
        :meth:`parameter_keys` (constants are used when omitted)."""
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise InvalidInputError(f"expected a batch of shape (N, {self.dim}), got {x.shape}")
        lookup = self._param_lookup(params)
        logdet = Tensor(np.zeros(x.shape[0]))
        h = x
        for i, layer in enumerate(self.layers):
            h, ld = layer.forward(h, lookup[i])
            logdet = logdet + ld
            if not (np.all(np.isfinite(h.data)) and np.all(np.isfinite(logdet.data))):
                raise NumericOverflowError(f"non-finite output in layer {i} ({layer.kind})", layer=i)
        return h, logdet

    def _param_lookup(self, params):
        lookup = [dict() for _ in self.layers]
        keys = self.parameter_keys()
        if params is None:
            params = [Tensor(a) for a in self.parameters()]
        for (i, n), t in zip(keys, params):
            lookup[i][n] = t
        return lookup

    def nll_tensor(self, x, params=None, u=None) -> Tensor:
        """Per-sample negative log-likelihood in nats, differentiable in both
        ``x`` and ``params``.  Includes the dequantization offset when enabled."""
        x = ad.as_tensor(x)
        if self.dequant.enabled:
            shift = 0.5 if u is None else u
            x = (x + shift) * (1.0 / self.dequant.bins)
        z, logdet = self.forward(x, params)
        const = 0.5 * self.dim * LOG_2PI
        if self.dequant.enabled:
            const += self.dim * math.log(self.dequant.bins)
        return (z * z).sum(axis=1) * 0.5 + const - logdet

    def inverse(self, z) -> np.ndarray:
        h = np.atleast_2d(np.asarray(z, dtype=float))
        for i, layer in reversed(list(enumerate(self.layers))):
            h = layer.inverse(h)
            if not np.all(np.isfinite(h)):
                raise NumericOverflowError(f"non-finite output in layer {i} ({layer.kind}) during inversion", layer=i)
        return h

    def to_data_units(self, h: np.ndarray) -> np.ndarray:
        """Undo the dequantization scaling (bin centres) for generated points."""
        if not self.dequant.enabled:
            return h
        return h * self.dequant.bins - 0.5


# -- public operations -------------------------------------------------------


def flow_forward(model: FlowModel, x) -> tuple[np.ndarray, np.ndarray]:
    z, logdet = model.forward(np.atleast_2d(np.asarray(x, dtype=float)))
    return z.data, logdet.data


def flow_inverse(model: FlowModel, z) -> np.ndarray:
    return model.inverse(z)


def nll(model: FlowModel, x, rng=None, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample NLL in nats and in bits per dimension.

    For dequantized models ``rng`` draws the uniform noise; without it the bin
    centre is used, which makes evaluation deterministic.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] == 0:
        raise InvalidInputError("empty batch")
    g = as_generator(rng) if (rng is not None and model.dequant.enabled) else None
    out = []
    for start in range(0, x.shape[0], chunk):
        xb = x[start:start + chunk]
        u = g.random(xb.shape) if g is not None else None
        out.append(model.nll_tensor(xb, u=u).data)
    nats = np.concatenate(out)
    return nats, nats / (model.dim * math.log(2.0))


def bits_per_dim(model: FlowModel, x, rng=None) -> float:
    return float(np.mean(nll(model, x, rng)[1]))


def sample_flow(model: FlowModel, count: int, temperature: float, rng) -> np.ndarray:
    if not temperature > 0:
        raise InvalidInputError("temperature must be positive")
    g = as_generator(rng)
    z = temperature * g.standard_normal((count, model.dim))
    return model.to_data_units(model.inverse(z))


def cross_evaluate(generator: FlowModel, evaluator: FlowModel, count: int, temperature: float, rng) -> float:
    """Mean bits/dim the evaluator assigns to the generator's samples."""
    if generator.dim != evaluator.dim:
        raise InvalidInputError("generator and evaluator dimensions differ")
    x = sample_flow(generator, count, temperature, rng)
    return float(np.mean(nll(evaluator, x)[1]))


# -- construction --------------------------------------------------------------


def alternating_mask(dim: int, parity: int) -> np.ndarray:
    return ((np.arange(dim) + parity) % 2 == 0).astype(int)


def build_flow(
    dim: int,
    n_blocks: int = 4,
    hidden: int = DEFAULT_HIDDEN,
    clamp: float = DEFAULT_CLAMP,
    rng=0,
    actnorm: bool = True,
    invlinear: bool = True,
    dequantize: bool = False,
    bins: int = 256,
) -> FlowModel:
    """Stack of ``[actnorm] -> [invlinear] -> coupling`` blocks with
    alternating masks.  Couplings start at the identity."""
    g = as_generator(rng)
    layers: list[Layer] = []
    for b in range(n_blocks):
        if actnorm:
            layers.append(ActNorm(dim))
        if invlinear:
            layers.append(InvLinear.random(dim, g))
        if dim > 1:
            layers.append(Coupling(dim, alternating_mask(dim, b), hidden, clamp, g))
    return FlowModel(layers, dim, Dequantization(dequantize, bins))


def identity_flow(dim: int, n_blocks: int = 2, hidden: int = 8, rng=0) -> FlowModel:
    """A flow whose every layer is exactly the identity map."""
    g = as_generator(rng)
    layers: list[Layer] = []
    for b in range(n_blocks):
        layers.append(ActNorm(dim, initialized=True))
        layers.append(InvLinear(dim))
        if dim > 1:
            layers.append(Coupling(dim, alternating_mask(dim, b), hidden, DEFAULT_CLAMP, g))
    return FlowModel(layers, dim)


def randomize(model: FlowModel, scale: float, rng) -> FlowModel:
    """Copy of ``model`` with every parameter perturbed by N(0, scale^2) noise;
    used to get generic, non-identity test models."""
    g = as_generator(rng)
    out = model.copy()
    out.set_parameters([a + scale * g.standard_normal(a.shape) for a in out.parameters()])
    for layer in out.layers:
        if isinstance(layer, ActNorm):
            layer.initialized = True
    return out


# -- checkpoints -------------------------------------------------------------


def _encode(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [repr(float(v)) for v in a.ravel()]}


def _decode(d: dict) -> np.ndarray:
    return np.array([float(v) for v in d["data"]], dtype=float).reshape(d["shape"])


def to_dict(model: FlowModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "dim": model.dim,
        "layers": [
            {
                "type": layer.kind,
                "fixed": layer.fixed(),
                "params": {k: _encode(v) for k, v in sorted(layer.params.items())},
            }
            for layer in model.layers
        ],
        "dequantization": {"enabled": model.dequant.enabled, "bins": model.dequant.bins},
        "training": model.metadata,
    }


def from_dict(doc: dict) -> FlowModel:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    dim = int(doc["dim"])
    layers: list[Layer] = []
    for spec in doc["layers"]:
        kind, fixed = spec["type"], spec.get("fixed", {})
        if kind == "actnorm":
            layer = ActNorm(dim, initialized=bool(fixed.get("initialized", True)))
        elif kind == "invlinear":
            layer = InvLinear(dim, perm=fixed["perm"], sign=fixed["sign"])
        elif kind == "coupling":
            layer = Coupling(dim, fixed["mask"], int(fixed["hidden"]), float(fixed["clamp"]), rng=0)
        else:
            raise ParseError(f"unknown layer type {kind!r}")
        params = {k: _decode(v) for k, v in spec["params"].items()}
        if set(params) != set(layer.params):
            raise ParseError(f"layer {kind!r} parameter names {sorted(params)} do not match")
        layer.params = params
        layers.append(layer)
    dq = doc.get("dequantization", {})
    return FlowModel(layers, dim, Dequantization(bool(dq.get("enabled", False)), int(dq.get("bins", 256))),
                     dict(doc.get("training", {})))


def save_checkpoint(model: FlowModel, path) -> None:
    Path(path).write_text(json.dumps(to_dict(model), indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> FlowModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"checkpoint is not valid JSON: {exc}") from None
    return from_dict(doc)
