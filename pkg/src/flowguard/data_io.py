"""Synthetic datasets and the CSV dataset format.

CSV layout::

    # flowguard-dataset v1 dim=2 quantized=0 bins=0
    0.5,-1.25
    ...
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InsufficientDataError, ParseError
from .numerics import RngState

GENERATORS = ("gaussian", "gaussian_mixture", "two_rings", "checkerboard", "tiny_grid_images")
HEADER_RE = re.compile(r"^#\s*flowguard-dataset\s+v1\s+dim=(\d+)\s+quantized=([01])\s+bins=(\d+)\s*$")


@dataclass
class Dataset:
    name: str
    samples: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    quantized: bool = False
    bins: int = 0
    bbox: tuple = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.bbox is None:
            if self.quantized:
                self.bbox = (np.zeros(self.dim), np.full(self.dim, self.bins - 1.0))
            else:
                self.bbox = (self.samples.min(axis=0), self.samples.max(axis=0))
        lo, hi = self.bbox
        if np.any(self.samples < lo) or np.any(self.samples > hi):
            raise ParseError(f"dataset {self.name!r} has samples outside its bounding box")
        split = np.concatenate([self.train_idx, self.test_idx])
        if split.size != len(self) or np.unique(split).size != len(self):
            raise ConfigError("train/test split must be disjoint and cover every sample")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def train(self) -> np.ndarray:
        return self.samples[self.train_idx]

    @property
    def test(self) -> np.ndarray:
        return self.samples[self.test_idx]


@dataclass(frozen=True)
class SyntheticSpec:
    generator: str
    n_samples: int = 4000
    seed: int = 0
    params: dict = field(default_factory=dict)
    test_fraction: float = 0.25

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if self.n_samples < 10:
            raise ConfigError("n_samples must be >= 10")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must be in (0, 1)")


def split_indices(n: int, test_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_test = max(1, int(round(test_fraction * n)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _gaussian(spec, g):
    p = spec.params
    dim = int(p.get("dim", len(p["mu"]) if "mu" in p else 2))
    mu = np.asarray(p.get("mu", np.zeros(dim)), dtype=float)
    cov = np.asarray(p.get("cov", np.eye(dim)), dtype=float)
    x = g.multivariate_normal(mu, cov, size=spec.n_samples, method="cholesky")
    sign, logdet = np.linalg.slogdet(cov)
    entropy = 0.5 * (dim * math.log(2.0 * math.pi * math.e) + logdet)
    return x, {"mu": mu.tolist(), "cov": cov.tolist(), "entropy_nats": entropy}


def _mixture(spec, g):
    p = spec.params
    means = np.asarray(p.get("means", [[-4.0, 0.0], [4.0, 0.0]]), dtype=float)
    std = float(p.get("std", 1.0))
    k = means.shape[0]
    weights = np.asarray(p.get("weights", np.full(k, 1.0 / k)), dtype=float)
    comp = g.choice(k, size=spec.n_samples, p=weights / weights.sum())
    x = means[comp] + std * g.standard_normal((spec.n_samples, means.shape[1]))
    return x, {"means": means.tolist(), "std": std, "weights": weights.tolist()}


def _two_rings(spec, g):
    p = spec.params
    radii = p.get("radii", [1.0, 3.0])
    noise = float(p.get("noise", 0.15))
    r = np.asarray(radii, dtype=float)[g.integers(len(radii), size=spec.n_samples)]
    theta = g.uniform(0.0, 2.0 * math.pi, spec.n_samples)
    x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1) + noise * g.standard_normal((spec.n_samples, 2))
    return x, {"radii": list(radii), "noise": noise}


def _checkerboard(spec, g):
    cells = int(spec.params.get("cells", 4))
    size = float(spec.params.get("size", 1.0))
    out = []
    while sum(len(o) for o in out) < spec.n_samples:
        pts = g.uniform(0, cells, (spec.n_samples, 2))
        keep = (np.floor(pts[:, 0]) + np.floor(pts[:, 1])) % 2 == 0
        out.append(pts[keep])
    x = (np.concatenate(out)[: spec.n_samples] - cells / 2.0) * size
    return x, {"cells": cells, "size": size}


def _tiny_grid_images(spec, g):
    side = int(spec.params.get("side", 8))
    bins = int(spec.params.get("bins", 16))
    noise = float(spec.params.get("noise", 0.6))
    n = spec.n_samples
    yy, xx = np.mgrid[0:side, 0:side]
    kinds = g.integers(4, size=n)
    cut = g.integers(1, side, size=n)
    masks = np.empty((n, side, side), dtype=bool)
    masks[kinds == 0] = (xx[None] < cut[kinds == 0, None, None])
    masks[kinds == 1] = (yy[None] < cut[kinds == 1, None, None])
    masks[kinds == 2] = ((xx[None] + yy[None]) % 2 == 0)
    masks[kinds == 3] = ((xx[None] // 2 + yy[None] // 2) % 2 == 0)
    lo = g.integers(0, bins // 2, size=n)[:, None, None]
    hi = g.integers(bins // 2, bins, size=n)[:, None, None]
    img = np.where(masks, hi, lo) + noise * g.standard_normal((n, side, side))
    img = np.clip(np.rint(img), 0, bins - 1)
    return img.reshape(n, side * side), {"side": side, "bins": bins}


_BUILDERS = {
    "gaussian": _gaussian,
    "gaussian_mixture": _mixture,
    "two_rings": _two_rings,
    "checkerboard": _checkerboard,
    "tiny_grid_images": _tiny_grid_images,
}


def generate(spec: SyntheticSpec) -> Dataset:
    g = RngState(spec.seed).generator()
    x, meta = _BUILDERS[spec.generator](spec, g)
    train_idx, test_idx = split_indices(x.shape[0], spec.test_fraction, g)
    quantized = spec.generator == "tiny_grid_images"
    bins = meta.get("bins", 0) if quantized else 0
    return Dataset(spec.generator, x, train_idx, test_idx, quantized, bins, meta=meta)


def save_csv(ds: Dataset, path) -> None:
    lines = [f"# flowguard-dataset v1 dim={ds.dim} quantized={int(ds.quantized)} bins={ds.bins}"]
    lines += [",".join(repr(float(v)) for v in row) for row in ds.samples]
    Path(path).write_text("\n".join(lines) + "\n")


def load_csv(path, test_fraction: float = 0.25, seed: int = 0, name: str | None = None) -> Dataset:
    """Read a dataset file; the train/test split is drawn from ``seed``."""
    text = Path(path).read_text().splitlines()
    if not text:
        raise ParseError("empty file", line=1)
    m = HEADER_RE.match(text[0].strip())
    if not m:
        raise ParseError("missing or malformed header", line=1)
    dim, quantized, bins = int(m.group(1)), m.group(2) == "1", int(m.group(3))
    rows = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != dim:
            raise ParseError(f"expected {dim} fields, got {len(fields)}", line=lineno)
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise ParseError(f"non-numeric field in {line!r}", line=lineno) from None
    if len(rows) < 2:
        raise InsufficientDataError(f"dataset {path} has {len(rows)} samples; need at least 2")
    x = np.array(rows, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ParseError("non-finite values in data section")
    g = RngState(seed).generator()
    train_idx, test_idx = split_indices(x.shape[0], test_fraction, g)
    return Dataset(name or Path(path).stem, x, train_idx, test_idx, quantized, bins)
