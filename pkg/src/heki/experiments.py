"""Config-driven experiments: method comparisons and limit studies.

Config is JSON.  Every key is optional; missing keys take the defaults of
the elliptic source-recovery experiment::

    {
      "grid": {"n_points": 50, "domain": [0.0, 3.141592653589793]},
      "ensemble_size": 50,
      "n_iters": 15,
      "noise_std": 0.01,
      "hyperprior": {"ell": [10.0, 40.0]},
      "fixed": {"sigma": 1.0, "alpha": 0.8},
      "truth": {"sigma": 1.0, "alpha": 0.8, "ell": 37.0},
      "methods": ["standard", "centred", "noncentred",
                  "noncentred+inflation", "noncentred+localization"],
      "seeds": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
      "inflation_gamma": 0.1,
      "localization_radius": 10.0,
      "fixed_truth_seed": null,
      "out_dir": "results",
      "limits": {"noise_std": 1.0, "ensemble_size": 10, "t_end": 1.0,
                 "h_list": [0.1, 0.05, 0.025, 0.0125], "prior_ell": 25.0,
                 "noise": false, "refine": 64}
    }

Methods may carry a parameter, e.g. ``"noncentred+inflation(0.05)"`` or
``"noncentred+localization(5)"``.
"""

import copy
import csv
import json
import math
import os
import re
import traceback
from dataclasses import dataclass, field

import numpy as np

from heki.dynamics import limit_convergence_study
from heki.eki_core import EnsembleState, RunDiagnostics, run_eki
from heki.forward_problem import InverseProblem, assemble_forward_matrix, generate_data
from heki.gaussian_field import Grid1D, HyperParams, spde_sample, white_noise, whiten_transform
from heki.hierarchical import HierPriorSpec, initial_ensemble, run_hier_eki
from heki.svg import write_chart
from heki.variants import InflationSpec, LocalizationSpec

METHODS = ("standard", "centred", "noncentred", "noncentred+inflation", "noncentred+localization")
_METHOD_RE = re.compile(r"^(?P<base>[a-z+]+)(?:\((?P<arg>[^()]*)\))?$")

# independent rng streams per seed
_TRUTH, _DATA, _INIT, _PERTURB = 0, 1, 2, 3

DEFAULTS = {
    "grid": {"n_points": 50, "domain": [0.0, math.pi]},
    "ensemble_size": 50,
    "n_iters": 15,
    "noise_std": 0.01,
    "hyperprior": {"ell": [10.0, 40.0]},
    "fixed": {"sigma": 1.0, "alpha": 0.8},
    "truth": {"sigma": 1.0, "alpha": 0.8, "ell": 37.0},
    "methods": list(METHODS),
    "seeds": list(range(10)),
    "inflation_gamma": 0.1,
    "localization_radius": 10.0,
    "fixed_truth_seed": None,
    "out_dir": "results",
    "limits": {
        "noise_std": 1.0,
        "ensemble_size": 10,
        "t_end": 1.0,
        "h_list": [0.1, 0.05, 0.025, 0.0125],
        "prior_ell": 25.0,
        "noise": False,
        "refine": 64,
    },
}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field path."""


@dataclass(frozen=True)
class MethodSpec:
    name: str
    base: str
    param: float | None = None

    @property
    def slug(self):
        return re.sub(r"[^A-Za-z0-9+.\-]+", "_", self.name).strip("_")


@dataclass
class LimitsConfig:
    noise_std: float = 1.0
    ensemble_size: int = 10
    t_end: float = 1.0
    h_list: tuple = (0.1, 0.05, 0.025, 0.0125)
    prior_ell: float = 25.0
    noise: bool = False
    refine: int = 64


@dataclass
class ExperimentConfig:
    grid: Grid1D = field(default_factory=Grid1D)
    ensemble_size: int = 50
    n_iters: int = 15
    noise_std: float = 0.01
    prior: HierPriorSpec = field(default_factory=HierPriorSpec)
    truth: HyperParams = field(default_factory=lambda: HyperParams(sigma=1.0, alpha=0.8, ell=37.0))
    methods: tuple = tuple(MethodSpec(m, m) for m in METHODS)
    seeds: tuple = tuple(range(10))
    inflation_gamma: float = 0.1
    localization_radius: float = 10.0
    fixed_truth_seed: int | None = None
    out_dir: str = "results"
    limits: LimitsConfig = field(default_factory=LimitsConfig)


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    if not isinstance(over, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    for key, val in over.items():
        p = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{p}: unknown field")
        if isinstance(base[key], dict) and key != "hyperprior":
            out[key] = _merge(base[key], val, p)
        else:
            out[key] = val
    return out


def _positive(val, path, kind=float):
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {val!r}")
    if kind is int and int(val) != val:
        raise ConfigError(f"{path}: expected an integer, got {val!r}")
    if not val > 0 or not math.isfinite(val):
        raise ConfigError(f"{path}: must be positive, got {val!r}")
    return kind(val)


def parse_method(name, gamma=0.1, radius=10.0):
    m = _METHOD_RE.match(str(name).strip())
    if m is None or m.group("base") not in METHODS:
        raise ConfigError(f"methods: unknown method {name!r}; valid methods are {', '.join(METHODS)}")
    base, arg = m.group("base"), m.group("arg")
    if arg is not None and base not in ("noncentred+inflation", "noncentred+localization"):
        raise ConfigError(f"methods: {base} takes no parameter")
    if base == "noncentred+inflation":
        param = gamma if arg is None else float(arg)
        if param < 0:
            raise ConfigError(f"methods: inflation factor must be >= 0 in {name!r}")
    elif base == "noncentred+localization":
        param = radius if arg is None else float(arg)
        if not param > 0:
            raise ConfigError(f"methods: taper radius must be > 0 in {name!r}")
    else:
        param = None
    return MethodSpec(name=str(name).strip(), base=base, param=param)


def config_from_dict(raw):
    d = _merge(DEFAULTS, raw or {})
    g = d["grid"]
    n_points = _positive(g["n_points"], "grid.n_points", int)
    try:
        lo, hi = (float(v) for v in g["domain"])
    except (TypeError, ValueError):
        raise ConfigError("grid.domain: expected [a, b]") from None
    if not hi > lo:
        raise ConfigError("grid.domain: need a < b")
    grid = Grid1D(n_points=n_points, domain=(lo, hi))

    J = _positive(d["ensemble_size"], "ensemble_size", int)
    if J < 2:
        raise ConfigError("ensemble_size: need at least 2 particles")
    n_iters = _positive(d["n_iters"], "n_iters", int)
    noise_std = _positive(d["noise_std"], "noise_std")

    bounds = {}
    for name, b in d["hyperprior"].items():
        p = f"hyperprior.{name}"
        if name not in ("sigma", "alpha", "ell"):
            raise ConfigError(f"{p}: unknown hyperparameter")
        if not isinstance(b, (list, tuple)) or len(b) != 2:
            raise ConfigError(f"{p}: expected [lo, hi]")
        blo, bhi = _positive(b[0], p + "[0]"), _positive(b[1], p + "[1]")
        if not blo < bhi:
            raise ConfigError(f"{p}: need lo < hi")
        bounds[name] = (blo, bhi)
    if not bounds:
        raise ConfigError("hyperprior: at least one hierarchical parameter is required")
    if "ell" not in bounds:
        raise ConfigError("hyperprior.ell: the lengthscale must be hierarchical")
    fixed_vals = {k: _positive(v, f"fixed.{k}") for k, v in d["fixed"].items()}
    try:
        fixed = HyperParams(ell=float(np.mean(bounds["ell"])), **fixed_vals)
        fixed.beta  # noqa: B018  validates alpha > d/2
        truth = HyperParams(**{k: _positive(v, f"truth.{k}") for k, v in d["truth"].items()})
        truth.beta  # noqa: B018
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"truth/fixed: {exc}") from None
    prior = HierPriorSpec(names=tuple(bounds), bounds=bounds, fixed=fixed)

    gamma = float(d["inflation_gamma"])
    if gamma < 0:
        raise ConfigError("inflation_gamma: must be >= 0")
    radius = _positive(d["localization_radius"], "localization_radius")
    if not isinstance(d["methods"], list) or not d["methods"]:
        raise ConfigError("methods: need a non-empty list")
    methods = tuple(parse_method(m, gamma, radius) for m in d["methods"])
    if len({m.slug for m in methods}) != len(methods):
        raise ConfigError("methods: duplicate entries")
    seeds = d["seeds"]
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds: need a non-empty list")
    for i, s in enumerate(seeds):
        if isinstance(s, bool) or not isinstance(s, int) or s < 0:
            raise ConfigError(f"seeds[{i}]: expected a non-negative integer, got {s!r}")
    fts = d["fixed_truth_seed"]
    if fts is not None and (isinstance(fts, bool) or not isinstance(fts, int) or fts < 0):
        raise ConfigError("fixed_truth_seed: expected a non-negative integer or null")

    lim = d["limits"]
    h_list = lim["h_list"]
    if not isinstance(h_list, list) or not h_list:
        raise ConfigError("limits.h_list: need a non-empty list")
    limits = LimitsConfig(
        noise_std=_positive(lim["noise_std"], "limits.noise_std"),
        ensemble_size=_positive(lim["ensemble_size"], "limits.ensemble_size", int),
        t_end=_positive(lim["t_end"], "limits.t_end"),
        h_list=tuple(_positive(h, f"limits.h_list[{i}]") for i, h in enumerate(h_list)),
        prior_ell=_positive(lim["prior_ell"], "limits.prior_ell"),
        noise=bool(lim["noise"]),
        refine=_positive(lim["refine"], "limits.refine", int),
    )
    return ExperimentConfig(
        grid=grid,
        ensemble_size=J,
        n_iters=n_iters,
        noise_std=noise_std,
        prior=prior,
        truth=truth,
        methods=methods,
        seeds=tuple(seeds),
        inflation_gamma=gamma,
        localization_radius=radius,
        fixed_truth_seed=fts,
        out_dir=str(d["out_dir"]),
        limits=limits,
    )


def parse_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(raw)


def _rng(seed, stream):
    return np.random.default_rng([int(seed), stream])


def build_problem(cfg, seed, noise_std=None):
    """Truth ``T(xi, theta_true)`` and noisy data for one seed."""
    grid = cfg.grid
    op = assemble_forward_matrix(grid)
    truth_seed = seed if cfg.fixed_truth_seed is None else cfg.fixed_truth_seed
    truth = whiten_transform(white_noise(grid, _rng(truth_seed, _TRUTH)), cfg.truth, grid)
    std = cfg.noise_std if noise_std is None else noise_std
    gamma = std**2 * np.eye(op.n_obs)
    data = generate_data(op, truth, gamma, _rng(seed, _DATA))
    return InverseProblem.from_data(op, data, grid)


def run_method(method, problem, cfg, seed):
    """One (method, seed) run; initial draws are shared across methods."""
    J, n = cfg.ensemble_size, cfg.n_iters
    rng = _rng(seed, _PERTURB)
    if method.base == "standard":
        init = initial_ensemble("centred", cfg.prior, cfg.grid, J, _rng(seed, _INIT))
        _, diag = run_eki(problem, EnsembleState(init.field), n, rng=rng)
        return diag
    mode = "centred" if method.base == "centred" else "noncentred"
    init = initial_ensemble(mode, cfg.prior, cfg.grid, J, _rng(seed, _INIT))
    kwargs = {}
    if method.base == "noncentred+inflation":
        kwargs["inflation"] = InflationSpec(gamma=method.param)
    elif method.base == "noncentred+localization":
        kwargs["localization"] = LocalizationSpec(radius=method.param)
    _, diag = run_hier_eki(mode, problem, cfg.prior, J, n, rng, init=init, **kwargs)
    return diag


def _f(v):
    return format(float(v), ".17g")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([r if isinstance(r, (int, str)) else _f(r) for r in row])


DIAG_COLUMNS = ("iteration",) + RunDiagnostics.SERIES


def write_diagnostics(path, diag):
    _write_csv(path, DIAG_COLUMNS, ([row[c] for c in DIAG_COLUMNS] for row in diag.rows()))


def write_reconstruction(path, grid, diag):
    _write_csv(path, ("x", "truth", "reconstruction"), zip(grid.x, diag.truth, diag.reconstruction))


def _json_num(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


@dataclass
class ExperimentResult:
    runs: dict
    failures: list
    summary: dict
    out_dir: str

    @property
    def ok(self):
        return not self.failures


def ell_flattening(ell):
    """True when the last five ell steps shrink strictly in size."""
    if len(ell) < 7 or not np.all(np.isfinite(ell)):
        return None
    steps = np.abs(np.diff(ell[-6:]))
    return bool(np.all(np.diff(steps) < 0))


def summarize(cfg, runs, failures):
    entries = []
    for (slug, seed), diag in sorted(runs.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        ell = np.asarray(diag.ell_mean, dtype=float)
        entries.append(
            {
                "method": slug,
                "seed": seed,
                "rel_error": _json_num(diag.rel_error),
                "ell_initial": _json_num(ell[0]) if ell.size else None,
                "ell_final": _json_num(ell[-1]) if ell.size else None,
                "ell_flattening": ell_flattening(ell) if ell.size else None,
                "phi_final": _json_num(diag.phi_mean[-1]),
                "clamp_events": int(diag.clamp_events),
            }
        )
    per_method = {}
    std = {e["seed"]: e["rel_error"] for e in entries if e["method"] == "standard"}
    for m in cfg.methods:
        errs = [e["rel_error"] for e in entries if e["method"] == m.slug and e["rel_error"] is not None]
        ells = [e["ell_final"] for e in entries if e["method"] == m.slug and e["ell_final"] is not None]
        stats = {
            "n_runs": len(errs),
            "rel_error_mean": _json_num(np.mean(errs)) if errs else None,
            "rel_error_median": _json_num(np.median(errs)) if errs else None,
            "ell_final_mean": _json_num(np.mean(ells)) if ells else None,
        }
        if std and m.base != "standard":
            paired = [
                (e["rel_error"], std[e["seed"]])
                for e in entries
                if e["method"] == m.slug and e["seed"] in std and e["rel_error"] is not None
            ]
            stats["wins_vs_standard"] = sum(a < b for a, b in paired)
            stats["paired_runs"] = len(paired)
        per_method[m.slug] = stats
    return {
        "config": {
            "n_points": cfg.grid.n_points,
            "domain": list(cfg.grid.domain),
            "ensemble_size": cfg.ensemble_size,
            "n_iters": cfg.n_iters,
            "noise_std": cfg.noise_std,
            "hyperprior": {k: list(v) for k, v in cfg.prior.bounds.items()},
            "truth": {"sigma": cfg.truth.sigma, "alpha": cfg.truth.alpha, "ell": cfg.truth.ell},
            "methods": [m.name for m in cfg.methods],
            "seeds": list(cfg.seeds),
            "fixed_truth_seed": cfg.fixed_truth_seed,
        },
        "runs": entries,
        "methods": per_method,
        "failures": failures,
    }


def make_figures(out_dir, cfg, runs):
    seed = cfg.seeds[0]
    recon = []
    truth_drawn = False
    for m in cfg.methods:
        diag = runs.get((m.slug, seed))
        if diag is None:
            continue
        if not truth_drawn:
            recon.append(("truth", cfg.grid.x, diag.truth))
            truth_drawn = True
        recon.append((m.name, cfg.grid.x, diag.reconstruction))
    write_chart(
        os.path.join(out_dir, "fig1.svg"),
        recon,
        title=f"reconstruction (seed {seed})",
        xlabel="x",
        ylabel="u(x)",
        styles={"truth": {"color": "black", "lw": 2.4}},
    )
    curves = []
    for m in cfg.methods:
        if m.base == "standard":
            continue
        diags = [runs[(m.slug, s)] for s in cfg.seeds if (m.slug, s) in runs]
        if not diags:
            continue
        ell = np.mean([d.ell_mean for d in diags], axis=0)
        curves.append((m.name, np.arange(ell.size), ell))
    if curves:
        n = curves[0][1].size
        curves.append(("true ell", np.arange(n), np.full(n, cfg.truth.ell)))
    write_chart(
        os.path.join(out_dir, "fig2.svg"),
        curves,
        title=f"lengthscale learning (mean over {len(cfg.seeds)} seeds)",
        xlabel="iteration",
        ylabel="mean ell (grid cells)",
        markers=True,
        styles={"true ell": {"color": "black", "ls": "--", "marker": ""}},
    )


def run_experiment(cfg, out_dir=None, seed_count=None, write=True):
    """Run every (method, seed) pair and write CSV, JSON and SVG outputs.

    A failing run is recorded with its method and seed and does not stop
    the others; check ``result.ok``.
    """
    out_dir = out_dir or cfg.out_dir
    seeds = cfg.seeds if seed_count is None else tuple(range(int(seed_count)))
    if not seeds:
        raise ConfigError("seed_count: need at least one seed")
    cfg = copy.copy(cfg)
    cfg.seeds = tuple(seeds)
    if write:
        os.makedirs(out_dir, exist_ok=True)
    runs, failures = {}, []
    for seed in seeds:
        problem = build_problem(cfg, seed)
        for m in cfg.methods:
            try:
                diag = run_method(m, problem, cfg, seed)
            except Exception as exc:  # reported per run, others continue
                failures.append(
                    {
                        "method": m.name,
                        "seed": seed,
                        "error": f"{type(exc).__name__}: {exc}",
                        "traceback": traceback.format_exc(limit=3),
                    }
                )
                continue
            runs[(m.slug, seed)] = diag
            if write:
                write_diagnostics(os.path.join(out_dir, f"{m.slug}_{seed}_diag.csv"), diag)
                write_reconstruction(os.path.join(out_dir, f"{m.slug}_{seed}_recon.csv"), cfg.grid, diag)
    summary = summarize(cfg, runs, failures)
    if write:
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if runs:
            make_figures(out_dir, cfg, runs)
    return ExperimentResult(runs=runs, failures=failures, summary=summary, out_dir=out_dir)


def limits_setup(cfg, seed=None):
    """Problem and initial ensemble for the discrete-to-continuum study."""
    lim = cfg.limits
    seed = cfg.seeds[0] if seed is None else seed
    problem = build_problem(cfg, seed, noise_std=lim.noise_std)
    theta0 = cfg.truth.replace(ell=lim.prior_ell)
    u0 = spde_sample(theta0, cfg.grid, _rng(seed, _INIT), lim.ensemble_size)
    return problem, u0


def run_limit_study(cfg, h_list=None, out_dir=None, seed=None):
    """Write ``convergence.csv``, ``convergence.json`` and ``convergence.svg``."""
    lim = cfg.limits
    h_list = tuple(lim.h_list if h_list is None else h_list)
    out_dir = out_dir or cfg.out_dir
    problem, u0 = limits_setup(cfg, seed)
    rng = _rng(cfg.seeds[0] if seed is None else seed, _PERTURB) if lim.noise else None
    res = limit_convergence_study(problem, u0, h_list, lim.t_end, noise=lim.noise, rng=rng, refine=lim.refine)
    os.makedirs(out_dir, exist_ok=True)
    _write_csv(os.path.join(out_dir, "convergence.csv"), ("h", "error"), zip(res.h_list, res.errors))
    report = {
        "h_list": [float(h) for h in res.h_list],
        "errors": [float(e) for e in res.errors],
        "order": res.order,
        "strictly_decreasing": res.strictly_decreasing if len(res.errors) > 1 else None,
        "dt_ref": res.dt_ref,
        "t_end": res.t_end,
        "noise": lim.noise,
        "ensemble_size": lim.ensemble_size,
        "noise_std": lim.noise_std,
    }
    with open(os.path.join(out_dir, "convergence.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    series = [("max particle error", res.h_list, res.errors)]
    if res.order is not None:
        c = np.exp(np.mean(np.log(res.errors) - res.order * np.log(res.h_list)))
        series.append((f"fit, slope {res.order:.3f}", res.h_list, c * res.h_list**res.order))
    title = "discrete EKI vs limit flow" + ("" if res.order is None else f" (order {res.order:.3f})")
    write_chart(
        os.path.join(out_dir, "convergence.svg"),
        series,
        title=title,
        xlabel="h",
        ylabel="error at t_end",
        logx=True,
        logy=True,
        markers=True,
    )
    return res, report
