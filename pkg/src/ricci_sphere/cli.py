"""Batch front end: configure runs, execute tau sweeps, emit energy traces,
snapshots, and verification reports.

Verbs:
    ricci-sphere run      --config PATH [--seed N] [--out DIR] [--jobs N]
    ricci-sphere verify   --config PATH [--seed N] [--out DIR]
    ricci-sphere snapshot PATH

Exit codes: 0 success, 2 configuration / file-format errors, 3 solver
failures, 4 violated monotonicity or inequality properties.

The configuration file is a flat key = value text file ('#' starts a
comment); unknown keys are errors.  The volume scale c fixes the total area
V = 2 / c (the default c = 1/(2 pi) gives the unit sphere, V = 4 pi).  All
computations happen at the canonical area 4 pi; areas and curvatures are
rescaled on output and the scale factor is recorded in the manifest.
"""

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import functionals as fn
from . import gauge
from . import geometry as geo
from . import iteration as it
from . import spectral as sp
from .errors import MalformedSnapshot, MonotonicityViolation, RicciSphereError
from .spectral import FOUR_PI, Field

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_MONOTONE = 4

DEFAULT_C = 1.0 / (2.0 * np.pi)


class ConfigError(Exception):
    """A malformed configuration file or option set."""


# -- configuration ----------------------------------------------------------

def _parse_bool(s):
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_tau_list(s):
    taus = []
    for tok in s.split(","):
        t = float(tok)
        if not (0.0 < t <= 1.0):
            raise ConfigError(f"tau entry {t} outside (0, 1]")
        taus.append(t)
    if not taus:
        raise ConfigError("empty tau list")
    return taus


RUN_SCHEMA = {
    "l_max": (int, 32),
    "c": (float, DEFAULT_C),
    "tau": (_parse_tau_list, [1.0]),
    "initial": (str, "round"),
    "max_steps": (int, 100),
    "stop_tol": (float, 1e-9),
    "newton_tol": (float, 1e-11),
    "newton_max": (int, 30),
    "formulation": (str, "conformal"),
    "gauge_every": (int, 1),
    "snapshot_every": (int, 0),
    "check_step_inequality": (_parse_bool, True),
    "check_sandwich": (_parse_bool, True),
    "out": (str, "runs"),
    "seed": (int, 0),
}

VERIFY_SCHEMA = {
    "l_max": (int, 16),
    "trials": (int, 1000),
    "seed": (int, 0),
    "out": (str, "runs"),
    "check_holder": (_parse_bool, True),
    "check_jensen": (_parse_bool, True),
    "check_am": (_parse_bool, True),
    "check_sandwich": (_parse_bool, True),
    "check_ding_monotone": (_parse_bool, True),
    "fault_ding_sign": (_parse_bool, False),
}


def read_config(path, schema):
    """Parse a flat key = value file against a schema; unknown keys error."""
    try:
        with open(path) as fh:
            raw = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = {k: default for k, (_, default) in schema.items()}
    for i, line in enumerate(raw, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{i}: expected 'key = value'")
        key, val = (s.strip() for s in body.split("=", 1))
        if key not in schema:
            raise ConfigError(f"{path}:{i}: unknown key {key!r}")
        conv = schema[key][0]
        try:
            cfg[key] = conv(val)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{path}:{i}: bad value for {key!r}: {exc}") from exc
    return cfg


# -- initial-data presets ---------------------------------------------------

def _parse_preset(spec):
    """'name' or 'name(k=v, ...)' -> (name, {k: float})."""
    spec = spec.strip()
    if "(" not in spec:
        return spec, {}
    if not spec.endswith(")"):
        raise ConfigError(f"malformed preset {spec!r}")
    name, args = spec[:-1].split("(", 1)
    kwargs = {}
    for tok in filter(None, (t.strip() for t in args.split(","))):
        if "=" not in tok:
            raise ConfigError(f"preset argument {tok!r} is not k=v")
        k, v = (s.strip() for s in tok.split("=", 1))
        kwargs[k] = float(v)
    return name.strip(), kwargs


def initial_metric(spec, grid, default_seed=0):
    """Build the initial metric (canonical area 4 pi) from a preset spec.

    Presets: round | ellipsoid(s=0.3) | two_mode(a=0.4, b=0.5)
    | bumpy(eps=0.4, seed=7) | snapshot:PATH
    """
    if spec.startswith("snapshot:"):
        path = spec[len("snapshot:"):].strip()
        m = geo.load_metric(path, grid)
        return geo.ConformalMetric(grid, m.u, V=FOUR_PI)
    name, kw = _parse_preset(spec)
    if name == "round":
        return geo.round_metric(FOUR_PI, grid)
    if name == "ellipsoid":
        s = kw.pop("s", 0.3)
        u = Field.harmonic(grid, 2, 0, s)
    elif name == "two_mode":
        a = kw.pop("a", 0.4)
        b = kw.pop("b", 0.5)
        u = Field.harmonic(grid, 2, 0, a) + Field.harmonic(grid, 3, 1, a * b)
    elif name == "bumpy":
        eps = kw.pop("eps", 0.4)
        seed = int(kw.pop("seed", default_seed))
        rng = np.random.default_rng(seed)
        coeffs = np.zeros(grid.n_coeffs)
        for l in range(2, min(7, grid.L_max + 1)):
            for m in range(-l, l + 1):
                coeffs[sp.coeff_index(l, m)] = rng.standard_normal() / l**2
        u = Field.from_coeffs(grid, coeffs)
        top = u.sup()
        if top > 0:
            u = u * (eps / top)
    else:
        raise ConfigError(f"unknown preset {name!r}")
    if kw:
        raise ConfigError(f"unknown preset arguments {sorted(kw)} for {name!r}")
    return geo.ConformalMetric(grid, u)


# -- run verb ---------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _json_dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True,
                  default=lambda o: o.item())   # numpy scalars
        fh.write("\n")


def _execute_run(cfg, tau, run_dir):
    """One iteration run; writes artifacts into run_dir, returns the report."""
    import os
    os.makedirs(run_dir, exist_ok=True)

    grid = sp.make_grid(cfg["l_max"])
    m0 = initial_metric(cfg["initial"], grid, default_seed=cfg["seed"])
    v_target = 2.0 / cfg["c"]
    # curvature scales inversely with area when the class is rescaled
    curv_scale = FOUR_PI / v_target

    icfg = it.IterationConfig(
        tau=tau, max_steps=cfg["max_steps"], stop_tol=cfg["stop_tol"],
        newton_tol=cfg["newton_tol"], newton_max=cfg["newton_max"],
        formulation=cfg["formulation"], gauge_every=cfg["gauge_every"])

    geo.save_snapshot(f"{run_dir}/initial.snap", m0.u.coeffs, grid.L_max,
                      v_target, "u")
    t0 = time.perf_counter()
    states = it.run(m0, icfg)
    elapsed = time.perf_counter() - t0

    with open(f"{run_dir}/energies.csv", "w") as fh:
        fh.write(",".join(fn.CSV_COLUMNS) + "\n")
        for s in states:
            fh.write(s.energies.to_csv_row() + "\n")

    every = cfg["snapshot_every"]
    for s in states:
        if every > 0 and s.k % every == 0:
            geo.save_snapshot(f"{run_dir}/step_{s.k:04d}.snap",
                              s.metric.u.coeffs, grid.L_max, v_target, "u")
    final = states[-1]
    geo.save_snapshot(f"{run_dir}/final.snap", final.metric.u.coeffs,
                      grid.L_max, v_target, "u")
    geo.save_snapshot(f"{run_dir}/balanced_final.snap",
                      final.balanced.u.coeffs, grid.L_max, v_target, "u")

    incr = float(np.max(np.abs(
        final.balanced.u.fine_values()
        - states[-2].balanced.u.fine_values()))) if len(states) > 1 else 0.0
    reason = "cauchy" if incr < icfg.stop_tol else "max_steps"

    curv_dev = curv_scale * float(np.max(np.abs(
        geo.scalar_curvature_values(final.balanced) - 2.0)))

    step_slacks, sandwich, dings = [], [], [s.energies.Ding for s in states]
    for prev, nxt in zip(states, states[1:]):
        if cfg["check_step_inequality"]:
            step_slacks.append(it.verify_step_inequality(prev, nxt).slack)
    if cfg["check_sandwich"]:
        sandwich = [s.energies.Mabuchi - s.energies.f_mean - s.energies.Ding
                    for s in states]
    d_incr = [b - a for a, b in zip(dings, dings[1:])]

    report = {
        "tau": tau,
        "steps": len(states) - 1,
        "termination_reason": reason,
        "elapsed_seconds": elapsed,
        "volume": v_target,
        "scale_c": cfg["c"],
        "final_curvature_dev": curv_dev,
        "final_equality_gap": abs(sandwich[-1]) if sandwich else None,
        "min_sandwich_slack": min(sandwich) if sandwich else None,
        "min_step_inequality_slack": min(step_slacks) if step_slacks else None,
        "ding_monotone": bool(max(d_incr, default=0.0) <= it.DING_SLACK),
        "max_ding_increase": max(d_incr, default=0.0),
        "gauge_maps": [s.gauge.as_params8() for s in states],
    }
    _json_dump(report, f"{run_dir}/report.json")
    return report


def _run_entry(args):
    cfg, tau, run_dir = args
    return _execute_run(cfg, tau, run_dir)


def _tau_tag(tau):
    return format(tau, "g").replace(".", "p")


def cmd_run(cfg, config_path, jobs):
    import os
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    taus = cfg["tau"]
    jobs = max(1, min(jobs, len(taus)))
    work = [(cfg, tau, f"{out}/run_tau{_tau_tag(tau)}") for tau in taus]

    if jobs == 1:
        reports = [_run_entry(w) for w in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_run_entry, work))

    cross = []
    if len(taus) > 1:
        grid = sp.make_grid(cfg["l_max"])
        base = geo.round_metric(FOUR_PI, grid)
        limits = {}
        for tau, (_, _, run_dir) in zip(taus, work):
            coeffs, L, _, _ = geo.load_snapshot(f"{run_dir}/balanced_final.snap")
            m = geo.ConformalMetric(grid, Field.from_coeffs(grid, coeffs),
                                    V=FOUR_PI, normalize=False)
            limits[tau] = geo.psi_from_u(m, base)
        for i, ta in enumerate(taus):
            for tb in taus[i + 1:]:
                cross.append({"tau_a": ta, "tau_b": tb,
                              "d1_proxy": fn.d1_proxy(limits[ta], limits[tb])})

    manifest = {
        "config_file": str(config_path),
        "config_sha256": _sha256(config_path) if config_path else None,
        "config": {k: v for k, v in cfg.items()},
        "runs": [{"tau": tau, "dir": run_dir,
                  "energies_sha256": _sha256(f"{run_dir}/energies.csv"),
                  "final_snapshot_sha256": _sha256(f"{run_dir}/final.snap")}
                 for tau, (_, _, run_dir) in zip(taus, work)],
        "cross_tau_d1": cross,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    _json_dump(manifest, f"{out}/manifest.json")

    code = EXIT_OK
    for rep in reports:
        line = (f"tau={rep['tau']:g}: {rep['steps']} steps "
                f"({rep['termination_reason']}), "
                f"curvature dev {rep['final_curvature_dev']:.3e}")
        print(line)
        if not rep["ding_monotone"]:
            code = EXIT_MONOTONE
        slack = rep["min_step_inequality_slack"]
        if slack is not None and slack < -it.DING_SLACK:
            code = EXIT_MONOTONE
    for entry in cross:
        print(f"cross-tau d1 ({entry['tau_a']:g} vs {entry['tau_b']:g}): "
              f"{entry['d1_proxy']:.3e}")
    return code


# -- verify verb ------------------------------------------------------------

def _random_bandlimited(rng, grid, l_lo=1, l_hi=None):
    l_hi = grid.L_max if l_hi is None else l_hi
    coeffs = np.zeros(grid.n_coeffs)
    for l in range(l_lo, l_hi + 1):
        for m in range(-l, l + 1):
            coeffs[sp.coeff_index(l, m)] = rng.standard_normal() / (1 + l)**2
    return Field.from_coeffs(grid, coeffs)


def _random_unit_sup(rng, grid):
    f = _random_bandlimited(rng, grid, l_lo=0, l_hi=min(8, grid.L_max))
    top = f.sup()
    return f * (rng.uniform(0.1, 1.0) / top) if top > 0 else f


def _random_potential(rng, grid, base):
    """Admissible random potential: shrink until the density has margin."""
    psi = _random_bandlimited(rng, grid, l_lo=1, l_hi=min(8, grid.L_max))
    for _ in range(60):
        p = geo.KahlerPotential(psi, base, check_positivity=False)
        if float(np.min(p.relative_density())) > 0.05:
            return p
        psi = psi * 0.7
    return geo.KahlerPotential(Field.zeros(grid), base, check_positivity=False)


def _holder_slack(rng, grid, base):
    """Relative slack of the interpolation bound
    ((1/V) int e^{f-g})^{1/tau} ((1/V) int e^{f-h})^{1-1/tau}
        <= (1/V) int e^{f - g/tau - (1-1/tau) h}."""
    f = _random_unit_sup(rng, grid)
    g = _random_unit_sup(rng, grid)
    h = _random_unit_sup(rng, grid)
    tau = rng.uniform(1e-3, 1.0)
    fv, gv, hv = f.fine_values(), g.fine_values(), h.fine_values()

    def mean_exp(vals):
        return base.integrate(np.exp(vals)) / base.V

    lhs = mean_exp(fv - gv) ** (1.0 / tau) \
        * mean_exp(fv - hv) ** (1.0 - 1.0 / tau)
    rhs = mean_exp(fv - gv / tau - (1.0 - 1.0 / tau) * hv)
    return (rhs - lhs) / max(abs(lhs), abs(rhs))


def _am_estimate_slacks(rng, grid, base):
    """Both bounds in
    (1/V) int (u - v) dA_u <= AM(u) - AM(v) <= (1/V) int (u - v) dA_v."""
    pu = _random_potential(rng, grid, base)
    pv = _random_potential(rng, grid, base)
    diff = pu.psi.fine_values() - pv.psi.fine_values()
    lower = base.integrate(diff * pu.relative_density()) / base.V
    upper = base.integrate(diff * pv.relative_density()) / base.V
    gap = pu.am() - pv.am()
    return gap - lower, upper - gap


def cmd_verify(cfg, config_path):
    import os
    grid = sp.make_grid(cfg["l_max"])
    base = geo.round_metric(FOUR_PI, grid)
    rng = np.random.default_rng(cfg["seed"])
    trials = cfg["trials"]

    checks = {}

    if cfg["check_holder"]:
        worst = min(_holder_slack(rng, grid, base) for _ in range(trials))
        checks["holder"] = {"trials": trials, "worst_slack": worst,
                            "tolerance": 1e-10, "pass": worst >= -1e-10}
    if cfg["check_jensen"]:
        worst = min(fn.entropy(_random_potential(rng, grid, base))
                    for _ in range(trials))
        checks["jensen"] = {"trials": trials, "worst_slack": worst,
                            "tolerance": 1e-12, "pass": worst >= -1e-12}
    if cfg["check_am"]:
        worst = np.inf
        for _ in range(trials):
            lo, hi = _am_estimate_slacks(rng, grid, base)
            worst = min(worst, lo, hi)
        checks["am_estimates"] = {"trials": trials, "worst_slack": worst,
                                  "tolerance": 1e-10, "pass": worst >= -1e-10}
    if cfg["check_sandwich"]:
        worst = np.inf
        for _ in range(trials):
            p = _random_potential(rng, grid, base)
            slack = fn.mabuchi(p) - fn.ding(p)
            worst = min(worst, slack)
        checks["sandwich"] = {"trials": trials, "worst_slack": worst,
                              "tolerance": 1e-9, "pass": worst >= -1e-9}
    if cfg["check_ding_monotone"]:
        # short descent run; the fault hook flips the recorded Ding sign,
        # which must be caught as a monotonicity failure
        sign = -1.0 if cfg["fault_ding_sign"] else 1.0
        m0 = initial_metric("ellipsoid(s=0.3)", grid)
        icfg = it.IterationConfig(tau=1.0, max_steps=8, stop_tol=1e-15,
                                  check_monotonicity=False)
        dings = [sign * s.energies.Ding for s in it.run(m0, icfg)]
        worst = -max((b - a for a, b in zip(dings, dings[1:])), default=0.0)
        checks["ding_monotone"] = {
            "trials": len(dings) - 1, "worst_slack": worst,
            "tolerance": 1e-9, "pass": worst >= -1e-9}

    report = {"l_max": cfg["l_max"], "seed": cfg["seed"], "checks": checks}
    os.makedirs(cfg["out"], exist_ok=True)
    _json_dump(report, f"{cfg['out']}/verify_report.json")

    ok = True
    for name, c in checks.items():
        status = "pass" if c["pass"] else "FAIL"
        print(f"{name}: {c['trials']} trials, worst slack "
              f"{c['worst_slack']:.3e} [{status}]")
        ok = ok and c["pass"]
    return EXIT_OK if ok else EXIT_MONOTONE


# -- snapshot verb ----------------------------------------------------------

def cmd_snapshot(path):
    coeffs, L_max, V, role = geo.load_snapshot(path)
    print(f"snapshot: l_max={L_max} v={V:.12g} role={role}")
    grid = sp.make_grid(L_max)
    scale = FOUR_PI / V
    if role == "u":
        m = geo.ConformalMetric(grid, Field.from_coeffs(grid, coeffs),
                                V=FOUR_PI, normalize=False)
        p = geo.psi_from_u(m, geo.round_metric(FOUR_PI, grid))
    elif role == "psi":
        base = geo.round_metric(FOUR_PI, grid)
        p = geo.KahlerPotential(Field.from_coeffs(grid, coeffs * scale), base)
        m = geo.u_from_psi(p)
    else:
        raise MalformedSnapshot(f"unknown role {role!r}", line=4)
    print(f"gauss-bonnet defect: {m.gauss_bonnet_defect():.3e}")
    print(f"AM = {p.am():.12g}")
    print(f"Ding = {fn.ding(p):.12g}")
    print(f"Mabuchi = {fn.mabuchi(p):.12g}")
    print(f"entropy = {fn.entropy(p):.12g}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def _build_parser():
    ap = argparse.ArgumentParser(
        prog="ricci-sphere",
        description="Spectral time-tau Ricci iteration on the two-sphere.")
    sub = ap.add_subparsers(dest="verb", required=True)

    run_p = sub.add_parser("run", help="execute an iteration run / tau sweep")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--out", default=None)
    run_p.add_argument("--jobs", type=int, default=1)

    ver_p = sub.add_parser("verify", help="randomized inequality suite")
    ver_p.add_argument("--config", required=True)
    ver_p.add_argument("--seed", type=int, default=None)
    ver_p.add_argument("--out", default=None)

    snap_p = sub.add_parser("snapshot", help="inspect a snapshot file")
    snap_p.add_argument("path")
    return ap


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if args.verb == "snapshot":
            return cmd_snapshot(args.path)
        schema = RUN_SCHEMA if args.verb == "run" else VERIFY_SCHEMA
        cfg = read_config(args.config, schema)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["out"] = args.out
        if args.verb == "run":
            return cmd_run(cfg, args.config, args.jobs)
        return cmd_verify(cfg, args.config)
    except (ConfigError, MalformedSnapshot, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MonotonicityViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MONOTONE
    except (RicciSphereError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
