"""Batch command line: ``run`` samples a posterior, ``grid`` tabulates a 2-parameter one.

Configuration is a JSON object whose keys are the fields of :class:`RunConfig`.
Values are resolved in increasing priority: preset, config file, command-line
flags.  The fully resolved configuration is stored in ``config.json`` and in
``diagnostics.json``; passing either back through ``--config`` reproduces
``chain.csv`` bit for bit.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diagnostics import solve_report, summarize
from .fem import SolveCounter, build_mesh
from .forward import DEFAULT_BIOT, synthesize_observations, synthetic_truth
from .mapopt import find_map
from .metric import build_fixed
from .posterior import PosteriorTarget
from .prior import build_prior
from .samplers import HMC_KINDS, SAMPLER_KINDS, ChainConfig, run_chain

logger = logging.getLogger(__name__)

# master-seed offsets of the independent random streams
DATA_SEED_OFFSET = 0
RSVD_SEED_OFFSET = 1000
CHAIN_SEED_OFFSET = 2000

FIXED_METRICS = {"fixed_gn": "gauss_newton", "fixed_full": "full_hessian",
                 "fixed_lowrank": "low_rank"}
METRIC_CHOICES = ("auto", "exact") + tuple(FIXED_METRICS)
ACF_MAX_LAG = 100
CHAIN_COLUMNS_FIXED = ("index", "log_posterior", "accepted", "cumulative_solves")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    n_elements: int = 1
    s: float = 0.6
    alpha: float = 1.0
    sigma: float = 0.1
    bi: float = DEFAULT_BIOT
    obs_locations: list | None = None
    obs_count: int | None = None
    sampler: str = "rmhmc"
    step_size: float | None = None
    n_leapfrog: int = 1
    n_samples: int = 5100
    burn_in: int = 100
    metric: str = "auto"
    metric_rank: int = 20
    seed: int = 0
    out: str = "out"
    newton_tol: float = 1e-10
    newton_max_iter: int = 20
    energy_guard: float = 1000.0
    preset: str | None = None

    def validate(self) -> None:
        if not (isinstance(self.n_elements, int) and self.n_elements >= 1):
            raise ConfigError("n_elements must be a positive integer")
        if not self.s > 0.5:
            raise ConfigError("s must exceed 1/2")
        for name in ("alpha", "sigma", "bi"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.obs_locations is None:
            raise ConfigError("no observation locations (set obs_locations or obs_count)")
        if len(self.obs_locations) < 1 or any(not 0.0 <= x <= 1.0 for x in self.obs_locations):
            raise ConfigError("observation locations must be a non-empty list in [0, 1]")
        if self.sampler not in SAMPLER_KINDS:
            raise ConfigError(f"sampler must be one of {SAMPLER_KINDS}")
        if self.step_size is None or not self.step_size > 0:
            raise ConfigError(f"step_size must be positive for sampler {self.sampler!r}")
        if self.n_leapfrog < 1:
            raise ConfigError("n_leapfrog must be at least 1")
        if not 0 <= self.burn_in < self.n_samples:
            raise ConfigError("need 0 <= burn_in < n_samples")
        if self.metric not in METRIC_CHOICES[1:]:
            raise ConfigError(f"metric must be one of {METRIC_CHOICES}")
        fixed = self.metric in FIXED_METRICS
        if self.sampler == "srmhmc" and not fixed:
            raise ConfigError("srmhmc needs a fixed metric (fixed_gn, fixed_full, fixed_lowrank)")
        if self.sampler != "srmhmc" and fixed:
            raise ConfigError(f"{self.sampler} uses the position-dependent metric; set metric 'exact'")
        if self.metric == "fixed_lowrank" and not 1 <= self.metric_rank <= self.n_elements + 1:
            raise ConfigError("metric_rank must lie in [1, N]")


def _hmc_or_mala(mala: float | None, hmc: float, leapfrog: int = 100):
    def pick(sampler: str) -> dict:
        if sampler in HMC_KINDS:
            return {"step_size": hmc, "n_leapfrog": leapfrog}
        return {"step_size": mala, "n_leapfrog": 1}
    return pick


PRESETS = {
    "two-param-A": ({"n_elements": 1, "obs_locations": [1.0], "s": 0.6, "alpha": 0.1,
                     "sigma": 0.1, "sampler": "rmhmc", "n_samples": 5100, "burn_in": 100},
                    _hmc_or_mala(1.0, 0.02)),
    "two-param-B": ({"n_elements": 1, "obs_locations": [1.0], "s": 0.6, "alpha": 1.0,
                     "sigma": 0.01, "sampler": "rmhmc", "n_samples": 5100, "burn_in": 100},
                    _hmc_or_mala(1.0, 0.04)),
    "two-param-C": ({"n_elements": 1, "obs_locations": [1.0], "s": 0.6, "alpha": 0.1,
                     "sigma": 0.01, "sampler": "rmhmc", "n_samples": 5100, "burn_in": 100},
                    _hmc_or_mala(0.7, 0.02)),
    "multi-1025": ({"n_elements": 1024, "obs_count": 64, "s": 0.6, "alpha": 10.0,
                    "sigma": 0.01, "sampler": "srmhmc", "metric": "fixed_lowrank",
                    "metric_rank": 20, "n_samples": 5100, "burn_in": 100},
                   _hmc_or_mala(None, 0.2, 10)),
}

_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def load_config_file(path: str | os.PathLike) -> dict:
    """Read a config object; a ``diagnostics.json`` is accepted via its ``config`` member."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    if "config" in data and "acceptance_rate" in data and isinstance(data["config"], dict):
        data = data["config"]
    return data


def resolve_config(file_values: dict | None = None, preset: str | None = None,
                   overrides: dict | None = None) -> RunConfig:
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    unknown = sorted(set(file_values) - _FIELDS) + sorted(set(overrides) - _FIELDS)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    preset = overrides.get("preset", file_values.get("preset", preset)) if preset is None else preset
    values: dict = {}
    per_sampler = None
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        base, per_sampler = PRESETS[preset]
        values.update(base)
    sampler = overrides.get("sampler", file_values.get("sampler", values.get("sampler", "rmhmc")))
    if per_sampler is not None and sampler in SAMPLER_KINDS:
        values.update(per_sampler(sampler))
        if sampler != values.get("sampler") and "metric" in values:
            # the preset's metric belongs to its default sampler
            del values["metric"]
    values.update(file_values)
    values.update(overrides)
    values["preset"] = preset
    cfg = RunConfig(**values)
    _normalize(cfg)
    cfg.validate()
    return cfg


def _normalize(cfg: RunConfig) -> None:
    if cfg.obs_locations is None and cfg.obs_count is not None:
        if cfg.obs_count < 1:
            raise ConfigError("obs_count must be positive")
        cfg.obs_locations = [j / cfg.obs_count for j in range(cfg.obs_count)]
    if cfg.obs_locations is not None:
        cfg.obs_locations = [float(x) for x in np.atleast_1d(cfg.obs_locations)]
        cfg.obs_count = len(cfg.obs_locations)
    if cfg.metric == "auto":
        cfg.metric = "fixed_gn" if cfg.sampler == "srmhmc" else "exact"
    for name in ("s", "alpha", "sigma", "bi", "newton_tol", "energy_guard"):
        setattr(cfg, name, float(getattr(cfg, name)))
    if cfg.step_size is not None:
        cfg.step_size = float(cfg.step_size)


# -- problem setup -------------------------------------------------------------

@dataclass
class Problem:
    config: RunConfig
    mesh: object
    truth: np.ndarray
    target: PosteriorTarget
    counter: SolveCounter
    u_map: np.ndarray
    metric: object = None
    extras: dict = field(default_factory=dict)


def build_problem(cfg: RunConfig, with_metric: bool = True) -> Problem:
    """Synthetic data, posterior target, MAP point and (for srmhmc) the fixed metric."""
    mesh = build_mesh(cfg.n_elements)
    truth = synthetic_truth(mesh.nodes)
    rng = np.random.default_rng(cfg.seed + DATA_SEED_OFFSET)
    obs = synthesize_observations(mesh, truth, cfg.obs_locations, cfg.sigma, rng, cfg.bi)
    prior = build_prior(mesh, cfg.s, cfg.alpha)
    counter = SolveCounter("map")
    target = PosteriorTarget(mesh, obs, prior, cfg.bi, counter)
    u_map = find_map(target)
    metric = None
    if with_metric and cfg.metric in FIXED_METRICS:
        target.clear_cache()
        target.ws.set_parameter(u_map)
        target.ws.w  # the MAP state belongs to the map phase
        counter.set_phase("metric")
        metric = build_fixed(target.ws, prior, FIXED_METRICS[cfg.metric], rank=cfg.metric_rank,
                             rng=np.random.default_rng(cfg.seed + RSVD_SEED_OFFSET))
    return Problem(cfg, mesh, truth, target, counter, u_map, metric)


def chain_config(cfg: RunConfig, chain_index: int = 0) -> ChainConfig:
    return ChainConfig(cfg.sampler, cfg.step_size, cfg.n_samples, cfg.n_leapfrog, cfg.burn_in,
                       seed=cfg.seed + CHAIN_SEED_OFFSET + chain_index,
                       newton_tol=cfg.newton_tol, newton_max_iter=cfg.newton_max_iter,
                       energy_guard=cfg.energy_guard)


# -- output ----------------------------------------------------------------------

def _fmt(x) -> str:
    return format(float(x), ".17g")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def chain_header(n_params: int) -> list[str]:
    return ["index"] + [f"u{j + 1}" for j in range(n_params)] + list(CHAIN_COLUMNS_FIXED[1:])


def write_chain_csv(path: Path, chain) -> None:
    rows = (
        [str(i)] + [_fmt(v) for v in chain.samples[i]]
        + [_fmt(chain.log_posteriors[i]), str(int(chain.accepted[i])),
           str(int(chain.cumulative_solves[i]))]
        for i in range(chain.samples.shape[0])
    )
    _write_csv(path, chain_header(chain.samples.shape[1]), rows)


def traced_parameters(n: int) -> list[int]:
    """Zero-based indices written to the trace and ACF plot files."""
    return list(range(n)) if n <= 4 else [0, 1, n - 2, n - 1]


def write_outputs(out: Path, problem: Problem, chain) -> dict:
    cfg = problem.config
    out.mkdir(parents=True, exist_ok=True)
    write_chain_csv(out / "chain.csv", chain)
    summary = summarize(chain, ACF_MAX_LAG)
    report = solve_report(chain, problem.counter)
    diag = {
        "acceptance_rate": summary["acceptance_rate"],
        "n_samples": int(chain.samples.shape[0]),
        "n_retained": summary["n_retained"],
        "ess": summary["ess"],
        "iact": summary["iact"],
        "acf": summary["acf"],
        "mean": summary["mean"],
        "std": summary["std"],
        "band_level": summary["band_level"],
        "band_lower": summary["band_lower"],
        "band_upper": summary["band_upper"],
        "map": problem.u_map,
        "solve_report": report,
        "sampler_stats": chain.stats,
        "config": dataclasses.asdict(cfg),
    }
    with open(out / "diagnostics.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(diag), fh, indent=1)
        fh.write("\n")
    with open(out / "config.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(dataclasses.asdict(cfg)), fh, indent=1)
        fh.write("\n")

    plot = out / "plotdata"
    plot.mkdir(exist_ok=True)
    x = problem.mesh.nodes
    _write_csv(plot / "posterior.csv",
               ["x", "mean", "lower", "upper", "truth", "map"],
               ([_fmt(v) for v in row] for row in zip(
                   x, summary["mean"], summary["band_lower"], summary["band_upper"],
                   problem.truth, problem.u_map)))
    idx = traced_parameters(chain.samples.shape[1])
    names = [f"u{j + 1}" for j in idx]
    _write_csv(plot / "trace.csv", ["index"] + names,
               ([str(i)] + [_fmt(v) for v in chain.samples[i, idx]]
                for i in range(chain.samples.shape[0])))
    acf = summary["acf"][idx]
    _write_csv(plot / "acf.csv", ["lag"] + names,
               ([str(lag)] + [_fmt(v) for v in acf[:, lag]] for lag in range(acf.shape[1])))
    return diag


def run_one(cfg: RunConfig, out: Path, chain_index: int = 0) -> dict:
    problem = build_problem(cfg)
    chain = run_chain(chain_config(cfg, chain_index), problem.target, problem.u_map,
                      problem.metric)
    diag = write_outputs(out, problem, chain)
    return {"out": str(out), "acceptance_rate": diag["acceptance_rate"],
            "sampling_solves": diag["solve_report"]["by_phase"]["sampling"]}


def _run_indexed(args: tuple) -> dict:
    cfg, out, i = args
    return run_one(cfg, Path(out), i)


def run(cfg: RunConfig, chains: int = 1) -> list[dict]:
    """Run ``chains`` independent chains; several chains get ``chain_<i>`` subdirectories."""
    out = Path(cfg.out)
    if chains < 1:
        raise ConfigError("--chains must be at least 1")
    if chains == 1:
        return [run_one(cfg, out)]
    jobs = [(cfg, str(out / f"chain_{i}"), i) for i in range(chains)]
    workers = min(chains, os.cpu_count() or 1)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_indexed, jobs))


def posterior_grid(cfg: RunConfig, ranges: tuple[float, float, float, float],
                   resolution: int, out: Path) -> dict:
    """Log posterior on a ``resolution`` x ``resolution`` grid over ``[a,b] x [c,d]``."""
    if cfg.n_elements != 1:
        raise ConfigError("grid needs a 2-parameter problem (n_elements = 1)")
    if resolution < 2:
        raise ConfigError("grid resolution must be at least 2")
    a, b, c, d = ranges
    if not (a < b and c < d):
        raise ConfigError("grid range must satisfy a < b and c < d")
    problem = build_problem(cfg, with_metric=False)
    target = problem.target
    counter = SolveCounter("grid")
    target.counter = target.ws.counter = counter
    target.clear_cache()
    u1 = np.linspace(a, b, resolution)
    u2 = np.linspace(c, d, resolution)
    values = np.empty((resolution, resolution))
    for i, x in enumerate(u1):
        for j, y in enumerate(u2):
            values[i, j] = target.log_density(np.array([x, y]))
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "grid.csv", ["u1", "u2", "log_posterior"],
               ([_fmt(u1[i]), _fmt(u2[j]), _fmt(values[i, j])]
                for i in range(resolution) for j in range(resolution)))
    i, j = np.unravel_index(np.argmax(values), values.shape)
    info = {"grid_max": [u1[i], u2[j]], "map": problem.u_map,
            "cell": [(b - a) / (resolution - 1), (d - c) / (resolution - 1)],
            "solve_report": {"grid": counter.by_phase.get("grid", 0)},
            "config": dataclasses.asdict(cfg)}
    with open(out / "grid.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(info), fh, indent=1)
        fh.write("\n")
    info["values"] = values
    return info


# -- argument parsing -----------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rmhmc-inverse",
                                 description="Riemannian MCMC for a 1D heat-conduction inverse problem")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="sample the posterior and write chain and diagnostics")
    run_p.add_argument("--config", help="JSON configuration (or a previous diagnostics.json)")
    run_p.add_argument("--preset", choices=sorted(PRESETS))
    run_p.add_argument("--sampler", choices=SAMPLER_KINDS)
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--out")
    run_p.add_argument("--chains", type=int, default=1)

    grid_p = sub.add_parser("grid", help="tabulate the log posterior of a 2-parameter problem")
    grid_p.add_argument("--config")
    grid_p.add_argument("--preset", choices=sorted(PRESETS))
    grid_p.add_argument("--range", required=True, help="a,b,c,d: u1 in [a,b], u2 in [c,d]")
    grid_p.add_argument("--res", type=int, required=True)
    grid_p.add_argument("--seed", type=int)
    grid_p.add_argument("--out")
    return ap


def _resolve_from_args(args) -> RunConfig:
    if args.config is None and args.preset is None:
        raise ConfigError("give --config or --preset")
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {"seed": args.seed, "out": args.out,
                 "sampler": getattr(args, "sampler", None)}
    return resolve_config(file_values, args.preset, overrides)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_from_args(args)
        if args.command == "run":
            result = run(cfg, args.chains)
        else:
            try:
                ranges = tuple(float(v) for v in args.range.split(","))
            except ValueError as exc:
                raise ConfigError(f"bad --range {args.range!r}") from exc
            if len(ranges) != 4:
                raise ConfigError("--range needs four numbers a,b,c,d")
            info = posterior_grid(cfg, ranges, args.res, Path(cfg.out))
            result = {"out": cfg.out, "grid_max": info["grid_max"], "map": info["map"]}
    except ConfigError as exc:
        _report_error("config", exc)
        return 2
    except Exception as exc:  # any module failure ends the run with a structured message
        _report_error(type(exc).__name__, exc)
        return 1
    print(json.dumps(_jsonable(result)))
    return 0


def _report_error(kind: str, exc: Exception) -> None:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
