"""The experiment kinds: each expands a config into cells and evaluates one cell.

A cell is a plain dict (picklable), evaluated by :func:`run_cell` with a random
stream derived from ``(seed, kind, cell key)``, so cells can run in any order
or process and still give identical metrics. Replica loops inside a cell use a
further stream per replica index, so raising ``reps`` keeps earlier replicas.
"""

from __future__ import annotations

import math
from dataclasses import asdict

import numpy as np

from .. import curves, engine, gw, spine, walks
from .._rng import derive_rng
from ..laws import NoBoundaryNormalizationError, boundary_residuals, law_from_descriptor, \
    normalize_to_boundary, sigma2_of
from ..profiles import BarrierProfile
from .config import ExperimentConfig

DESCRIPTIONS = {
    "boundary_check": "solve the boundary normalization of a law and report moment residuals",
    "many_to_one": "exact tree vs spine expectations of lineage functionals",
    "mogulskii_rate": "corridor confinement probabilities (DP and MC) against the rate constant",
    "curve_solve": "critical curve from x above a constant lower curve vs the closed form",
    "lambda": "survival threshold of the critical curve for lower curves c + slope t",
    "killed_brw": "survival of the walk killed below n^(1/3) c up to generation n",
    "selection_fixed": "keep floor(exp(a n^(1/3))) rightmost particles; front and floor",
    "selection_profile": "keep floor(exp(n^(1/3) h(k/n))) rightmost particles; front",
    "consistent_displacement": "max over lineages of the lineage minimum, over n",
    "survival_scaling": "survival below the line -eps j with eps = theta n^(-2/3)",
    "gw_tail": "Galton-Watson left tail P(Z_n <= z m^n) against the bound shape",
    "coupling_property": "domination order under rank-coupled selection with capA <= capB",
}


def _law(cfg: ExperimentConfig, normalize: bool = True):
    desc = dict(cfg.law)
    desc.setdefault("normalize", normalize)
    return law_from_descriptor(desc)


def _rng(seed, cfg, *labels):
    return derive_rng(seed, cfg.kind, *labels)


# --------------------------------------------------------------------------
# cells


def cells(cfg: ExperimentConfig) -> list[dict]:
    """The list of cells for every seed, in a fixed order."""
    out = []
    p = cfg.params
    for seed in cfg.seeds:
        if cfg.kind == "boundary_check":
            out.append({"seed": seed})
        elif cfg.kind == "curve_solve":
            out.append({"seed": seed})
        elif cfg.kind == "lambda":
            for c in p["c"]:
                for s2 in p["sigma2"]:
                    out.append({"seed": seed, "c": float(c), "sigma2": float(s2)})
        elif cfg.kind == "many_to_one":
            out.extend({"seed": seed, "n": n} for n in cfg.n)
        elif cfg.kind == "mogulskii_rate":
            methods = ["dp", "mc"] if p["method"] == "both" else [p["method"]]
            out.extend({"seed": seed, "n": n, "method": m} for n in cfg.n for m in methods)
        elif cfg.kind == "gw_tail":
            out.extend({"seed": seed, "n": n} for n in cfg.n)
        else:
            out.extend({"seed": seed, "n": n} for n in cfg.n)
    return out


def run_cell(cfg: ExperimentConfig, cell: dict) -> dict:
    return _RUNNERS[cfg.kind](cfg, cell)


# --------------------------------------------------------------------------
# runners


def _boundary_check(cfg, cell):
    law = _law(cfg, normalize=False)
    try:
        form = normalize_to_boundary(law)
    except NoBoundaryNormalizationError as exc:
        return {"normalizable": False, "diagnostic": str(exc)}
    normed = law.affine(form.theta_star, -form.kappa_star)
    res = boundary_residuals(normed)
    vals = [r if isinstance(r, float) else r.value for r in res]
    return {"normalizable": True, "theta_star": form.theta_star, "kappa_star": form.kappa_star,
            "sigma2": form.sigma2, "residual_mass": vals[0], "residual_mean": vals[1],
            "residual_max": max(abs(vals[0]), abs(vals[1])), "exact": form.exact}


def _many_to_one(cfg, cell):
    law = _law(cfg)
    names = list(spine.PATH_FUNCTIONALS) if cfg.params["functionals"] == "all" \
        else list(cfg.params["functionals"])
    unknown = set(names) - set(spine.PATH_FUNCTIONALS)
    if unknown:
        raise ValueError(f"unknown functionals {sorted(unknown)}")
    n = cell["n"]
    fns = {k: spine.PATH_FUNCTIONALS[k] for k in names}
    if cfg.params["mode"] == "exact":
        if n > cfg.params["max_depth"]:
            raise spine.EnumerationTooLargeError(f"n={n} above max_depth")
        res = spine.many_to_one_exact_batch(law, n, fns)
        return {"tree": {k: r.tree_side for k, r in res.items()},
                "spine": {k: r.spine_side for k, r in res.items()},
                "max_difference": max(r.difference for r in res.values())}
    rng = _rng(cell["seed"], cfg, n)
    sl = spine.SpineLaw(law, rng=rng)
    out = {}
    for k, fn in fns.items():
        est = spine.many_to_one_expectation(law, n, fn, mode="mc", reps=cfg.reps, rng=rng,
                                            spine=sl).estimate
        out[k] = {"value": est.value, "stderr": est.stderr}
    return {"spine_mc": out}


def _mogulskii_rate(cfg, cell):
    p = cfg.params
    step = walks.StepLaw.pm1() if p["step"] == "pm1" else walks.StepLaw.gaussian()
    prof = BarrierProfile.constant(float(p["lower"]), float(p["upper"]))
    rng = _rng(cell["seed"], cfg, cell["n"], cell["method"])
    row = walks.rate_convergence_report(step, prof, [cell["n"]], step.variance,
                                        method=cell["method"], reps=cfg.reps, rng=rng)[0]
    return {**asdict(row), "reference": row.target_constant}


def _curve_solve(cfg, cell):
    p = cfg.params
    c, x, s2 = float(p["c"]), float(p["x"]), float(p["sigma2"])
    cur = curves.solve_g(x, c, s2)
    k = 3 * curves.rate_constant(s2)
    t = cur.t[:-1] if cur.touched else cur.t
    closed = c + np.cbrt((x - c) ** 3 - k * t)
    return {"t_max": cur.t_max, "touched": cur.touched,
            "closed_form_error": float(np.max(np.abs(cur(t) - closed))),
            "residual": curves.curve_residual(cur),
            "t": cur.t.tolist(), "g": cur.values.tolist()}


def _lambda(cfg, cell):
    c, s2, slope = cell["c"], cell["sigma2"], float(cfg.params["slope"])
    f = c if slope == 0 else (lambda t: c + slope * t)
    res = curves.compute_lambda(f, s2)
    ref = c + curves.cubic_constant(s2) if slope == 0 else None
    return {"lambda": res.value, "bracket": list(res.bracket), "reference": ref}


def _killed_brw(cfg, cell):
    law = _law(cfg)
    n, c = cell["n"], float(cfg.params["c"])
    rng = _rng(cell["seed"], cfg, n)
    est = engine.survival_probability(engine.KillingBoundary(c, n), law, n, cfg.reps, rng,
                                      cap=cfg.cap)
    s2 = sigma2_of(law)
    lam = c + curves.cubic_constant(s2)
    return {"survival": est.to_dict(),
            "scaled_log": math.log(est.value) / n ** (1 / 3) if est.hits else None,
            "lambda": lam, "start_above_lambda": 0.0 > lam}


def _front_stats(runs, n):
    s = n ** (1 / 3)
    mx = np.array([r.final.max_pos for r in runs if r.final.count], dtype=float) / s
    mn = np.array([r.final.min_pos for r in runs if r.final.count], dtype=float) / s
    out = {}
    for key, v in (("max_scaled", mx), ("min_scaled", mn)):
        out[key] = float(v.mean()) if v.size else None
        out[key + "_stderr"] = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else None
    out["extinct"] = len(runs) - int(mx.size)
    return out


def _selection_fixed(cfg, cell):
    law = _law(cfg)
    n, a = cell["n"], float(cfg.params["a"])
    m = int(math.floor(math.exp(a * n ** (1 / 3))))
    runs = [engine.run(engine.TopCount(m), law, n, _rng(cell["seed"], cfg, n, r), cap=cfg.cap,
                       seed_token=[cell["seed"], r]) for r in range(cfg.reps)]
    ref = engine.selection_constant_fixed(a, sigma2_of(law))
    return {"cap": m, **_front_stats(runs, n), "reference_max": ref["max"],
            "reference_min": ref["min"]}


def _selection_profile(cfg, cell):
    law = _law(cfg)
    n = cell["n"]
    h0, slope = float(cfg.params["h"]), float(cfg.params["h_slope"])
    h = h0 if slope == 0 else (lambda t: h0 + slope * t)
    reg = engine.Profile(h, n)
    runs = [engine.run(reg, law, n, _rng(cell["seed"], cfg, n, r), cap=cfg.cap,
                       seed_token=[cell["seed"], r]) for r in range(cfg.reps)]
    s2 = sigma2_of(law)
    pair = curves.selection_curves(h, s2)
    ref = float(pair.g(1.0))
    return {"founders": reg.founders(), **_front_stats(runs, n), "reference_max": ref}


def _consistent(cfg, cell):
    law = _law(cfg)
    n = cell["n"]
    vals = []
    for r in range(cfg.reps):
        tree_seed = int(_rng(cell["seed"], cfg, n, r).integers(0, 2**63))
        vals.append(engine.consistent_min_displacement(
            law, n, tree_seed=tree_seed, bar_step=float(cfg.params["bar_step"]), cap=cfg.cap))
    v = np.array(vals) / max(n, 1) ** (1 / 3)
    return {"median_scaled": float(np.median(v)), "mean_scaled": float(v.mean()),
            "values_scaled": v.tolist(),
            "reference": -curves.cubic_constant(sigma2_of(law))}


def _survival_scaling(cfg, cell):
    law = _law(cfg)
    n = cell["n"]
    eps = float(cfg.params["theta"]) * n ** (-2 / 3)
    rng = _rng(cell["seed"], cfg, n)
    hits = engine.survival_count(engine.SlopedLine(eps), law, n, cfg.reps, rng, cap=cfg.cap)
    row = engine.scaling_row(eps, n, hits, cfg.reps, sigma2_of(law))
    d = asdict(row)
    d["reference"] = -math.pi * math.sqrt(sigma2_of(law)) / math.sqrt(2)
    return d


def _gw_tail(cfg, cell):
    p = cfg.params
    law = gw.OffspringLaw({int(k): float(v) for k, v in p["pmf"].items()})
    n = cell["n"]
    rng = _rng(cell["seed"], cfg, n)
    rows = gw.tail_experiment(law, [float(z) for z in p["z"]], [n], cfg.reps, rng, float(p["C"]))
    return {"rows": [asdict(r) for r in rows], "case": gw.tail_case(law),
            "exponent": gw.tail_exponent(law)}


def _coupling(cfg, cell):
    law = _law(cfg)
    n = cell["n"]
    violations = 0
    instances = []
    for r in range(cfg.reps):
        rng = _rng(cell["seed"], cfg, n, r)
        cap_b = int(rng.integers(1, int(cfg.params["max_cap"]) + 1))
        cap_a = int(rng.integers(1, cap_b + 1))
        cr = engine.coupled_run(engine.TopCount(cap_a), engine.TopCount(cap_b), law, n, rng,
                                cap=cfg.cap)
        violations += cr.violations
        instances.append([cap_a, cap_b, cr.violations])
    return {"violations": violations, "instances": instances}


_RUNNERS = {
    "boundary_check": _boundary_check,
    "many_to_one": _many_to_one,
    "mogulskii_rate": _mogulskii_rate,
    "curve_solve": _curve_solve,
    "lambda": _lambda,
    "killed_brw": _killed_brw,
    "selection_fixed": _selection_fixed,
    "selection_profile": _selection_profile,
    "consistent_displacement": _consistent,
    "survival_scaling": _survival_scaling,
    "gw_tail": _gw_tail,
    "coupling_property": _coupling,
}


# --------------------------------------------------------------------------
# summaries and plot series


def summary_row(kind: str, cell: dict, metrics: dict) -> dict:
    """Flat scalar view of a cell for the CSV summary."""
    row = dict(cell)
    for k, v in metrics.items():
        if isinstance(v, (int, float, str, bool)) or v is None:
            row[k] = v
        elif isinstance(v, dict) and all(isinstance(x, (int, float, type(None))) for x in v.values()):
            row.update({f"{k}.{kk}": vv for kk, vv in v.items()})
    return row


def plot_points(kind: str, cell: dict, metrics: dict) -> list[dict]:
    """Tidy ``(x, y, series, ci_lo, ci_hi)`` rows for one record, reference series included."""
    pts = []

    def add(x, y, series, lo=None, hi=None):
        pts.append({"x": x, "y": y, "series": series, "ci_lo": lo, "ci_hi": hi})

    n = cell.get("n")
    if kind == "survival_scaling":
        add(metrics["eps"], metrics["eps_half_log_rho"], "eps_half_log_rho",
            _finite(math.sqrt(metrics["eps"]) * _log(metrics["ci_low"])),
            _finite(math.sqrt(metrics["eps"]) * _log(metrics["ci_high"])))
        add(metrics["eps"], metrics["reference"], "reference")
    elif kind == "consistent_displacement":
        add(n, metrics["median_scaled"], "median_scaled")
        add(n, metrics["reference"], "reference")
    elif kind == "mogulskii_rate":
        add(n, metrics["scaled_log"], f"scaled_log_{cell['method']}")
        add(n, metrics["reference"], "reference")
    elif kind in ("selection_fixed", "selection_profile"):
        se = metrics.get("max_scaled_stderr")
        y = metrics["max_scaled"]
        add(n, y, "max_scaled", None if se is None or y is None else y - 1.96 * se,
            None if se is None or y is None else y + 1.96 * se)
        add(n, metrics["reference_max"], "reference")
    elif kind == "killed_brw":
        s = metrics["survival"]
        add(n, s["value"], "survival", s["ci_low"], s["ci_high"])
    elif kind == "gw_tail":
        for r in metrics["rows"]:
            add(r["z"], r["empirical"], f"empirical_n{r['n']}", r["ci_low"], r["ci_high"])
            add(r["z"], r["bound"], "bound")
    elif kind == "lambda":
        add(cell["c"], metrics["lambda"], f"lambda_sigma2_{cell['sigma2']}")
        if metrics["reference"] is not None:
            add(cell["c"], metrics["reference"], "reference")
    elif kind == "curve_solve":
        for t, g in zip(metrics["t"], metrics["g"]):
            add(t, g, "g")
    elif kind == "many_to_one" and "tree" in metrics:
        for k in metrics["tree"]:
            add(n, metrics["tree"][k] - metrics["spine"][k], f"difference_{k}")
    elif kind == "coupling_property":
        add(n, metrics["violations"], "violations")
    elif kind == "boundary_check" and metrics.get("normalizable"):
        add(0, metrics["theta_star"], "theta_star")
    return pts


def _log(x):
    return math.log(x) if x > 0 else -math.inf


def _finite(x):
    return x if math.isfinite(x) else None
