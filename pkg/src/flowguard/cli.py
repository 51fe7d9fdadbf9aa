"""Command-line driver: one subcommand per experiment.

Every run reads a JSON config, writes ``report.json`` and ``table.csv`` (plus
``plot.svg`` where a figure makes sense) into ``--out`` and is deterministic
given config and seed.  Exit codes: 1 config error, 2 numeric error, 3 I/O.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__
from .attacks import AttackConfig, fgsm, ood_attack, pgd, uniform_noise_baseline
from .data_io import Dataset, SyntheticSpec, generate, load_csv
from .errors import ConfigError, FlowGuardError
from .flow import build_flow, load_checkpoint, nll, sample_flow, save_checkpoint
from .gaussian import (
    GaussianParams,
    certify_monte_carlo,
    fit_gaussian_mle,
    gaussian_loglik,
    optimal_perturbation,
    robust_steps_bound,
    robust_steps_real,
    tradeoff_curve,
    tradeoff_monte_carlo,
    universal_defense_check,
)
from .numerics import RngState
from .training import TrainConfig, train

log = logging.getLogger("flowguard")


# -- configs -------------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataCfg(_Strict):
    generator: str | None = None
    n_samples: int = 4000
    seed: int | None = None
    params: dict = Field(default_factory=dict)
    test_fraction: float = 0.25
    csv: str | None = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.generator is None) == (self.csv is None):
            raise ValueError("data needs exactly one of 'generator' or 'csv'")
        return self


class GaussModelCfg(_Strict):
    mu: list[float]
    cov: list[list[float]]


class _GaussSource(_Strict):
    seed: int = 0
    data: DataCfg | None = None
    model: GaussModelCfg | None = None

    @model_validator(mode="after")
    def _one_model(self):
        if (self.data is None) == (self.model is None):
            raise ValueError("give exactly one of 'data' (fit by MLE) or 'model' (mu, cov)")
        return self


class GaussAttackCfg(_GaussSource):
    epsilons: list[float] = Field(min_length=1)
    n_points: int = Field(200, ge=1)
    quiver_grid: int = Field(9, ge=2)


class GaussUniversalCfg(_GaussSource):
    epsilons: list[float] = Field(min_length=1)


class GaussTradeoffCfg(_Strict):
    seed: int = 0
    n: int = Field(ge=1)
    sigma2: float = Field(1.0, gt=0)
    epsilon: float = Field(gt=0)
    m_max: int = Field(ge=0)
    mc_samples: int = Field(0, ge=0)


class GaussCertifyCfg(_Strict):
    seed: int = 0
    sigma: float = Field(1.0, gt=0)
    epsilon: float = Field(gt=0)
    delta_tol: float = Field(gt=0)
    gamma: float = Field(gt=0, lt=1)
    n: int = Field(ge=1)
    draws: int = Field(100_000, ge=1)


class AttackCfg(_Strict):
    norm: Literal["linf", "l2"] = "linf"
    epsilon: float = Field(0.1, ge=0)
    step_size: float | None = None
    iterations: int = Field(10, ge=0)
    clip_min: float | None = None
    clip_max: float | None = None
    random_start: bool = False

    def build(self, **over) -> AttackConfig:
        return AttackConfig(**{**self.model_dump(), **over})


class FlowModelCfg(_Strict):
    n_blocks: int = Field(4, ge=1)
    hidden: int = Field(64, ge=1)
    clamp: float = Field(5.0, gt=0)
    actnorm: bool = True
    invlinear: bool = True


class TrainCfg(_Strict):
    epochs: int = Field(50, ge=0)
    batch_size: int = Field(256, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mode: Literal["clean", "adversarial", "hybrid"] = "clean"


class FlowTrainCfg(_Strict):
    seed: int = 0
    data: DataCfg
    model: FlowModelCfg = Field(default_factory=FlowModelCfg)
    train: TrainCfg = Field(default_factory=TrainCfg)
    attack: AttackCfg | None = None
    eval_attack: AttackCfg | None = None


class FlowAttackCfg(_Strict):
    seed: int = 0
    data: DataCfg
    models: dict[str, str] = Field(min_length=1)
    kind: Literal["pgd", "fgsm", "ood"] = "pgd"
    norm: Literal["linf", "l2"] = "linf"
    epsilons: list[float] = Field(min_length=1)
    iterations: list[int] = Field(default_factory=lambda: [10], min_length=1)
    step_size: float | None = None
    clip_min: float | None = None
    clip_max: float | None = None
    noise_samples: int = Field(500, ge=1)


class FlowCrossEvalCfg(_Strict):
    seed: int = 0
    generators: dict[str, str] = Field(min_length=1)
    evaluators: dict[str, str] = Field(min_length=1)
    temperatures: list[float] = Field(default_factory=lambda: [1.0], min_length=1)
    samples: int = Field(5000, ge=2)


# -- output helpers -------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)] + [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(_jsonable(doc), indent=1, sort_keys=True) + "\n")


@contextlib.contextmanager
def _figure(path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "flowguard"
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    try:
        yield fig, ax
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)


@contextlib.contextmanager
def output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".flowguard.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"output directory {out} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


# -- shared loading ---------------------------------------------------------------


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def load_data(cfg: DataCfg, seed: int, base: Path) -> Dataset:
    dseed = seed if cfg.seed is None else cfg.seed
    if cfg.csv is not None:
        return load_csv(_resolve(base, cfg.csv), cfg.test_fraction, dseed)
    return generate(SyntheticSpec(cfg.generator, cfg.n_samples, dseed, cfg.params, cfg.test_fraction))


def _gauss_model(cfg: _GaussSource, base: Path) -> tuple[GaussianParams, Dataset | None]:
    if cfg.model is not None:
        return GaussianParams(cfg.model.mu, cfg.model.cov), None
    ds = load_data(cfg.data, cfg.seed, base)
    return fit_gaussian_mle(ds.train), ds


# -- subcommands --------------------------------------------------------------------


def run_gauss_attack(cfg: GaussAttackCfg, out: Path, base: Path) -> dict:
    p, ds = _gauss_model(cfg, base)
    if any(e <= 0 for e in cfg.epsilons):
        raise ConfigError("epsilons must be positive")
    g = RngState(cfg.seed).generator()
    pts = ds.test[: cfg.n_points] if ds is not None else p.sample(cfg.n_points, g)
    rows = []
    for eps in cfg.epsilons:
        res = [optimal_perturbation(p, x, eps) for x in pts]
        drops = np.array([r.drop for r in res])
        rows.append([eps, float(np.mean([r.loglik_before for r in res])), float(np.mean([r.loglik_after for r in res])),
                     float(drops.mean()), float(drops.min()), float(drops.max()), sum(r.hard_case for r in res)])
        log.info("eps=%g mean drop %.6g nats", eps, drops.mean())
    header = ["epsilon", "mean_loglik_before", "mean_loglik_after", "mean_drop", "min_drop", "max_drop", "hard_cases"]
    write_csv(out / "table.csv", header, rows)
    if p.dim == 2:
        eps = cfg.epsilons[-1]
        sd = np.sqrt(np.diag(p.cov))
        axes = [np.linspace(p.mu[i] - 2.5 * sd[i], p.mu[i] + 2.5 * sd[i], cfg.quiver_grid) for i in range(2)]
        xx, yy = np.meshgrid(*axes)
        grid = np.stack([xx.ravel(), yy.ravel()], axis=1)
        deltas = np.array([optimal_perturbation(p, x, eps).delta for x in grid])
        fine = [np.linspace(a[0], a[-1], 120) for a in axes]
        fx, fy = np.meshgrid(*fine)
        ll = gaussian_loglik(p, np.stack([fx.ravel(), fy.ravel()], axis=1)).reshape(fx.shape)
        with _figure(out / "plot.svg") as (fig, ax):
            ax.contour(fx, fy, ll, levels=8, colors="0.7", linewidths=0.8)
            ax.quiver(grid[:, 0], grid[:, 1], deltas[:, 0], deltas[:, 1], angles="xy", scale_units="xy", scale=1,
                      color="tab:red", width=0.004)
            ax.set_aspect("equal")
            ax.set_title(f"optimal l2 attack, eps={eps:g}")
    return {"model": {"mu": p.mu, "cov": p.cov}, "n_points": len(pts), "columns": header, "rows": rows}


def run_gauss_universal(cfg: GaussUniversalCfg, out: Path, base: Path) -> dict:
    p, _ = _gauss_model(cfg, base)
    rows, checks = [], []
    for eps in cfg.epsilons:
        if eps <= 0:
            raise ConfigError("epsilons must be positive")
        rep = universal_defense_check(p, eps)
        rows.append([eps, *rep.delta.tolist(), rep.sensitivity_clean, rep.sensitivity_retrained, rep.defense_fails])
        checks.append({"epsilon": eps, **rep.to_dict()})
    header = ["epsilon", *[f"delta_{i}" for i in range(p.dim)], "sensitivity_clean", "sensitivity_retrained",
              "defense_fails"]
    write_csv(out / "table.csv", header, rows)
    return {"model": {"mu": p.mu, "cov": p.cov}, "checks": checks}


def run_gauss_tradeoff(cfg: GaussTradeoffCfg, out: Path, base: Path) -> dict:
    p = GaussianParams.spherical(np.zeros(cfg.n), cfg.sigma2)
    pts = tradeoff_curve(p, cfg.epsilon, cfg.m_max)
    header = ["m", "l_nat", "l_nat_drop", "l_adv", "l_sen"]
    rows = [[q.m, q.l_nat, q.l_nat_drop, q.l_adv, q.l_sen] for q in pts]
    doc = {"n": cfg.n, "sigma2": cfg.sigma2, "epsilon": cfg.epsilon}
    if cfg.mc_samples:
        mc = tradeoff_monte_carlo(p, cfg.epsilon, cfg.m_max, cfg.mc_samples, RngState(cfg.seed))
        header += ["mc_l_nat", "mc_l_adv"]
        for row, q in zip(rows, mc):
            row += [q.l_nat, q.l_adv]
        doc["mc_samples"] = cfg.mc_samples
    write_csv(out / "table.csv", header, rows)
    with _figure(out / "plot.svg") as (fig, ax):
        ax.plot([q.l_nat_drop for q in pts], [q.l_sen for q in pts], "o-")
        for q in pts:
            ax.annotate(str(q.m), (q.l_nat_drop, q.l_sen), fontsize=7, xytext=(3, 3), textcoords="offset points")
        ax.set_xlabel("natural log-likelihood drop (nats)")
        ax.set_ylabel("adversarial sensitivity (nats)")
        ax.set_title(f"n={cfg.n}, eps={cfg.epsilon:g}")
    doc.update(columns=header, rows=rows)
    return doc


def run_gauss_certify(cfg: GaussCertifyCfg, out: Path, base: Path) -> dict:
    args = (cfg.sigma, cfg.epsilon, cfg.delta_tol, cfg.gamma, cfg.n)
    m_star = robust_steps_bound(*args)
    rows = []
    streams = RngState(cfg.seed).spawn(m_star + 1)
    for m in range(m_star + 1):
        drops = certify_monte_carlo(cfg.sigma, cfg.epsilon, cfg.delta_tol, cfg.n, m, cfg.draws, streams[m])
        freq = float(np.mean(drops >= cfg.delta_tol))
        rows.append([m, freq, float(drops.mean()), float(drops.max())])
    write_csv(out / "table.csv", ["m", "freq_drop_ge_delta", "mean_drop", "max_drop"], rows)
    return {
        "bound": m_star,
        "bound_real": robust_steps_real(*args),
        "freq_at_bound": rows[-1][1],
        "certified": rows[-1][1] <= cfg.gamma,
        **cfg.model_dump(),
    }


def run_flow_train(cfg: FlowTrainCfg, out: Path, base: Path) -> dict:
    ds = load_data(cfg.data, cfg.seed, base)
    mc = cfg.model
    model = build_flow(ds.dim, mc.n_blocks, mc.hidden, mc.clamp, RngState(cfg.seed).generator(), mc.actnorm,
                       mc.invlinear, dequantize=ds.quantized, bins=ds.bins or 256)
    atk = cfg.attack.build() if cfg.attack is not None else None
    ev = cfg.eval_attack.build() if cfg.eval_attack is not None else atk
    tcfg = TrainConfig(**cfg.train.model_dump(), attack=atk, seed=cfg.seed)
    rep = train(model, ds.train, tcfg, test_data=ds.test, eval_attack=ev)
    rep.checkpoint = "model.json"
    save_checkpoint(model, out / "model.json")
    rows = []
    for e in range(len(rep.train_nll)):
        rows.append([e + 1, rep.train_nll[e], rep.test_clean_nll[e],
                     rep.test_adv_nll[e] if rep.test_adv_nll else None, rep.attack_gain[e]])
    write_csv(out / "table.csv", ["epoch", "train_bpd", "test_clean_bpd", "test_adv_bpd", "min_attack_gain"], rows)
    if rows:
        with _figure(out / "plot.svg") as (fig, ax):
            ep = [r[0] for r in rows]
            ax.plot(ep, rep.train_nll, label="train")
            ax.plot(ep, rep.test_clean_nll, label="test clean")
            if rep.test_adv_nll:
                ax.plot(ep, rep.test_adv_nll, label="test attacked")
            ax.set_xlabel("epoch")
            ax.set_ylabel("bits/dim")
            ax.legend()
    return {"dataset": ds.name, "mode": cfg.train.mode, **rep.to_dict(include_time=False)}


def _load_models(paths: dict[str, str], base: Path) -> dict:
    return {name: load_checkpoint(_resolve(base, p)) for name, p in paths.items()}


def run_flow_attack(cfg: FlowAttackCfg, out: Path, base: Path) -> dict:
    ds = load_data(cfg.data, cfg.seed, base)
    models = _load_models(cfg.models, base)
    for name, m in models.items():
        if m.dim != ds.dim:
            raise ConfigError(f"model {name!r} has dim {m.dim}, data has {ds.dim}")
    x = ds.test
    lo, hi = ds.bbox
    if cfg.kind == "ood":
        x = RngState(cfg.seed).generator().uniform(lo, hi, (cfg.noise_samples, ds.dim))
    header = ["epsilon", "iterations"]
    for name in models:
        header += [f"{name}_clean", f"{name}_attacked"] + ([f"{name}_uniform"] if cfg.kind != "ood" else [])
    rows = []
    for i, eps in enumerate(cfg.epsilons):
        for iters in cfg.iterations:
            row = [eps, iters]
            for name, m in models.items():
                acfg = AttackConfig(cfg.norm, eps, cfg.step_size, iters, clip_min=cfg.clip_min, clip_max=cfg.clip_max)
                if cfg.kind == "fgsm":
                    tr = fgsm(m, x, acfg)
                elif cfg.kind == "ood":
                    tr = ood_attack(m, x, acfg)
                else:
                    tr = pgd(m, x, acfg)
                row += [tr.mean_before, tr.mean_after]
                if cfg.kind != "ood":
                    noisy = uniform_noise_baseline(x, eps, cfg.clip_min, cfg.clip_max, RngState(cfg.seed + i + 1))
                    row.append(float(np.mean(nll(m, noisy)[1])))
            rows.append(row)
            log.info("eps=%g m=%d done", eps, iters)
    write_csv(out / "table.csv", header, rows)
    if len(cfg.epsilons) > 1:
        with _figure(out / "plot.svg") as (fig, ax):
            first = [r for r in rows if r[1] == cfg.iterations[0]]
            for j, col in enumerate(header):
                if col.endswith("_attacked") or col.endswith("_uniform"):
                    ax.plot([r[0] for r in first], [r[j] for r in first], "o-", label=col)
            ax.set_xlabel("epsilon")
            ax.set_ylabel("bits/dim")
            ax.legend(fontsize=7)
    return {"kind": cfg.kind, "norm": cfg.norm, "n_inputs": int(x.shape[0]), "columns": header, "rows": rows}


def run_flow_cross_eval(cfg: FlowCrossEvalCfg, out: Path, base: Path) -> dict:
    gens = _load_models(cfg.generators, base)
    evals = _load_models(cfg.evaluators, base)
    rows = []
    streams = iter(RngState(cfg.seed).spawn(len(gens) * len(cfg.temperatures)))
    for gname, gm in gens.items():
        for t in cfg.temperatures:
            if not t > 0:
                raise ConfigError("temperatures must be positive")
            xs = sample_flow(gm, cfg.samples, t, next(streams))
            for ename, em in evals.items():
                bpd = nll(em, xs)[1]
                rows.append([gname, ename, t, float(bpd.mean()), float(bpd.std(ddof=1) / math.sqrt(len(bpd)))])
    write_csv(out / "table.csv", ["generator", "evaluator", "temperature", "mean_bpd", "stderr_bpd"], rows)
    return {"samples": cfg.samples, "rows": rows}


COMMANDS = {
    "gauss-attack": (GaussAttackCfg, run_gauss_attack, "optimal l2 attacks on a fitted Gaussian, swept over eps"),
    "gauss-universal": (GaussUniversalCfg, run_gauss_universal, "universal perturbation and the retraining check"),
    "gauss-tradeoff": (GaussTradeoffCfg, run_gauss_tradeoff, "natural drop vs sensitivity over adversarial rounds"),
    "gauss-certify": (GaussCertifyCfg, run_gauss_certify, "rounds needed for a high-probability robustness bound"),
    "flow-train": (FlowTrainCfg, run_flow_train, "train a flow (clean, adversarial or hybrid)"),
    "flow-attack": (FlowAttackCfg, run_flow_attack, "attack sweeps over eps and iterations for saved flows"),
    "flow-cross-eval": (FlowCrossEvalCfg, run_flow_cross_eval, "score one flow's samples under another"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flowguard", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"flowguard {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, _, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, type=Path, help="JSON run config")
        sp.add_argument("--out", required=True, type=Path, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--quiet", action="store_true", help="only print errors")
    return ap


def run(command: str, config: Path, out: Path, seed: int | None = None) -> dict:
    cls, fn, _ = COMMANDS[command]
    try:
        raw = json.loads(Path(config).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {config} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        if seed < 0 or seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        raw["seed"] = seed
    try:
        cfg = cls.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid {command} config:\n{exc}") from None
    with output_lock(Path(out)) as od:
        doc = fn(cfg, od, Path(config).resolve().parent)
        doc = {"command": command, "version": __version__, "seed": cfg.seed, "config": cfg.model_dump(), **doc}
        write_json(od / "report.json", doc)
    return doc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    try:
        run(args.command, args.config, args.out, args.seed)
    except FlowGuardError as exc:
        kind = {1: "config", 2: "numeric", 3: "input"}[exc.exit_code]
        log.error("%s error: %s", kind, exc)
        return exc.exit_code
    except OSError as exc:
        log.error("i/o error: %s", exc)
        return 3
    log.info("wrote %s", args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
