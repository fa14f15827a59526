"""Command-line drivers: simulate, sweep, epsbar, check, plot.

Exit codes: 0 ok, 1 counterexample found, 2 configuration error,
3 diverged run, 4 constant estimation failed, 5 no smooth certificate.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .composite import (CertificateError, EpsilonCertificate, EstimationError, epsilon_bar,
                        estimate_constants)
from .core import ContractViolation, DomainError
from .sim import DivergedError, SimConfig, simulate, sweep, theorem_check
from .svg import Series, ramp, render_svg
from .systems import BUNDLES, qp_reference

log = logging.getLogger("spsafe")

EXIT_OK, EXIT_COUNTEREXAMPLE, EXIT_CONFIG, EXIT_DIVERGED, EXIT_ESTIMATION, EXIT_UNSUPPORTED = (
    0, 1, 2, 3, 4, 5)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    system: str
    params: dict = field(default_factory=dict)
    epsilon: Optional[float] = None
    eps_min: Optional[float] = None
    eps_max: Optional[float] = None
    count: Optional[int] = None
    dt: float = 1e-3
    t_f: float = 10.0
    seed: int = 0
    nu: float = 0.5
    grid: int = 100
    inflation: float = 1.1
    n_ic: int = 50
    n_eps: int = 20
    max_steps: int = 20_000
    force_epsilon: Optional[float] = None
    certificate: Optional[str] = None
    out: Optional[str] = None

    def __post_init__(self):
        if self.system not in BUNDLES:
            raise ConfigError(f"system: expected one of {sorted(BUNDLES)}, got {self.system!r}")
        param_cls = BUNDLES[self.system][0]
        names = {f.name for f in dataclasses.fields(param_cls)}
        unknown = set(self.params) - names
        if unknown:
            raise ConfigError(f"params: unknown keys {sorted(unknown)} for {self.system}")
        try:
            self.parameters()
        except (DomainError, TypeError, ValueError) as exc:
            raise ConfigError(f"params: {exc}") from exc
        checks = [("dt", self.dt > 0), ("t_f", self.t_f > self.dt),
                  ("nu", 0 < self.nu < 1), ("grid", self.grid >= 2),
                  ("inflation", self.inflation >= 1), ("n_ic", self.n_ic >= 0),
                  ("n_eps", self.n_eps >= 1), ("max_steps", self.max_steps >= 1)]
        for name, val in (("epsilon", self.epsilon), ("eps_min", self.eps_min),
                          ("eps_max", self.eps_max), ("force_epsilon", self.force_epsilon)):
            if val is not None:
                checks.append((name, val > 0))
        if self.count is not None:
            checks.append(("count", self.count >= 2))
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"{name}: invalid value {getattr(self, name)!r}")

    def parameters(self):
        cls = BUNDLES[self.system][0]
        return cls(**{k: _tupled(v) for k, v in self.params.items()})

    def bundle(self):
        return BUNDLES[self.system][1](self.parameters())

    def sim_config(self, record_every: int = 10) -> SimConfig:
        return SimConfig(self.dt, self.t_f, record_every)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "system" not in d:
            raise ConfigError("system: required field missing")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _tupled(v):
    if isinstance(v, list):
        return tuple(_tupled(a) for a in v)
    return v


def content_hash(obj) -> str:
    """Git blob hash of the canonical JSON encoding of ``obj``."""
    data = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _echo(cfg: RunConfig) -> dict:
    d = cfg.to_dict()
    params = dataclasses.asdict(cfg.parameters())
    return {"config": d, "effective_params": params, "input_hash": content_hash(d),
            "version": __version__}


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o).__name__)


def csv_header(bundle) -> list:
    s = bundle.system
    return (["t"] + [f"x{i + 1}" for i in range(s.n_slow)] + [f"z{i + 1}" for i in range(s.n_fast)]
            + [f"u{i + 1}" for i in range(s.n_input)] + ["h", "V"])


def write_csv(path, bundle, traj):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(csv_header(bundle))
        for k in range(len(traj.times)):
            row = [traj.times[k], *traj.xs[k], *traj.zs[k], *traj.us[k],
                   traj.h_vals[k], traj.V_vals[k]]
            w.writerow([repr(float(v)) for v in row])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


# ---- commands ---------------------------------------------------------------

def _integrator(cfg, record_every=10):
    return {"method": "rk4", "dt": cfg.dt, "t_f": cfg.t_f, "dt_eff_rule": "min(dt, eps/50)",
            "record_every": record_every}


def cmd_simulate(cfg: RunConfig) -> int:
    if cfg.epsilon is None:
        raise ConfigError("epsilon: required for simulate")
    bundle = cfg.bundle()
    out = cfg.out or "trajectory.csv"
    code = EXIT_OK
    try:
        traj = simulate(bundle, cfg.epsilon, cfg.sim_config())
    except DivergedError as exc:
        traj, code = exc.trajectory, EXIT_DIVERGED
        log.error("%s", exc)
    write_csv(out, bundle, traj)
    summary = dict(traj.summary(), diverged=code == EXIT_DIVERGED,
                   integrator=_integrator(cfg), **_echo(cfg))
    _write_json(os.path.splitext(out)[0] + ".json", summary)
    vt = summary["violation_time"]
    print(f"{bundle.name} eps={cfg.epsilon:g}: min_h={traj.min_h:.6g}"
          + (f", violation at t={vt:.4g}" if vt is not None else ", safe"))
    return code


def cmd_sweep(cfg: RunConfig) -> int:
    bundle = cfg.bundle()
    lo, hi, n = bundle.sweep_range
    lo = cfg.eps_min if cfg.eps_min is not None else lo
    hi = cfg.eps_max if cfg.eps_max is not None else hi
    n = cfg.count if cfg.count is not None else n
    if not lo < hi:
        raise ConfigError("eps_min must be below eps_max")
    outdir = cfg.out or f"sweep_{bundle.name}"
    os.makedirs(outdir, exist_ok=True)
    rep = sweep(bundle, lo, hi, n, cfg.sim_config(), keep_trajectories=True)
    series = []
    for k, run in enumerate(rep.runs):
        if run.trajectory is not None:
            write_csv(os.path.join(outdir, f"run_{k:03d}.csv"), bundle, run.trajectory)
            series.append(Series(f"eps={run.eps:.4g}", run.trajectory.times,
                                 run.trajectory.h_vals, "solid" if run.safe else "dashdot",
                                 ramp(k, len(rep.runs))))
    if bundle.name == "primal_dual":
        t, xs, _ = qp_reference(bundle.params, cfg.t_f, cfg.dt)
        series.append(Series("CBF-QP", t, xs[:, 0], "dashed", "#000000"))
    if series:
        render_svg(series, os.path.join(outdir, "h_vs_t.svg"), title=f"{bundle.name}: h(t)",
                   xlabel="t [s]", ylabel="h")
    render_svg([Series("min h", rep.eps_values, [r.min_h for r in rep.runs])],
               os.path.join(outdir, "minh_vs_eps.svg"), title=f"{bundle.name}: min h",
               xlabel="eps", ylabel="min h")
    report = dict(rep.to_dict(), integrator=_integrator(cfg), **_echo(cfg))
    _write_json(os.path.join(outdir, "report.json"), report)
    for r in rep.runs:
        print(f"eps={r.eps:.6g} min_h={r.min_h:.6g} {'safe' if r.safe else 'UNSAFE'}")
    print(f"empirical threshold: {rep.empirical_threshold}; monotone: {rep.monotone}")
    return EXIT_OK


def _estimate(cfg: RunConfig, bundle) -> EpsilonCertificate:
    if bundle.certificate is None:
        raise CertificateError(f"{bundle.name}: no smooth certificate available "
                               "(the primal-dual flow is nonsmooth)")
    s = bundle.system
    consts = estimate_constants(s, bundle.controller, bundle.barrier, s.x_box, cfg.grid,
                                cfg.inflation, bundle.certificate, bundle.pointwise_bounds)
    return epsilon_bar(consts, bundle.certificate, bundle.barrier.eta, cfg.nu)


def cmd_epsbar(cfg: RunConfig) -> int:
    bundle = cfg.bundle()
    ec = _estimate(cfg, bundle)
    out = cfg.out or f"epsbar_{bundle.name}.json"
    _write_json(out, dict(ec.to_dict(), grid=cfg.grid, inflation=cfg.inflation, **_echo(cfg)))
    print(f"{bundle.name}: eps_bar={ec.eps_bar:.6g} (eps1={ec.eps1:.6g}, eps2={ec.eps2:.6g})")
    return EXIT_OK


def load_certificate(path) -> EpsilonCertificate:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return EpsilonCertificate.from_dict(d)
    except (OSError, json.JSONDecodeError, ContractViolation, ValueError) as exc:
        raise ConfigError(f"certificate {path}: {exc}") from exc


def cmd_check(cfg: RunConfig) -> int:
    bundle = cfg.bundle()
    if bundle.certificate is None:
        raise CertificateError(f"{bundle.name}: no smooth certificate available")
    ec = load_certificate(cfg.certificate) if cfg.certificate else _estimate(cfg, bundle)
    config = SimConfig(cfg.dt, cfg.t_f, 1, cfg.max_steps)
    rep = theorem_check(bundle, ec, cfg.n_ic, config, cfg.seed, cfg.n_eps, cfg.force_epsilon)
    out = cfg.out or f"check_{bundle.name}.json"
    _write_json(out, dict(rep.to_dict(), integrator=_integrator(cfg, 1), **_echo(cfg)))
    print(f"{bundle.name}: {'PASS' if rep.passed else 'FAIL'} over {rep.n_runs} runs, "
          f"{len(rep.counterexamples)} counterexamples"
          + (" (out of certificate, informational)" if rep.out_of_certificate else ""))
    if rep.out_of_certificate:
        return EXIT_OK
    return EXIT_OK if rep.passed else EXIT_COUNTEREXAMPLE


def cmd_plot(args) -> int:
    src = args.input
    if not src or not os.path.isdir(src):
        raise ConfigError("plot: --input must name a sweep output directory")
    try:
        with open(os.path.join(src, "report.json"), encoding="utf-8") as fh:
            report = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"plot: cannot read report: {exc}") from exc
    runs = report["runs"]
    series = []
    for k, run in enumerate(runs):
        path = os.path.join(src, f"run_{k:03d}.csv")
        if not os.path.exists(path):
            continue
        header, data = read_csv(path)
        safe = run["error"] is None and run["min_h"] is not None and run["min_h"] >= 0
        series.append(Series(f"eps={run['eps']:.4g}", data[:, 0], data[:, header.index("h")],
                             "solid" if safe else "dashdot", ramp(k, len(runs))))
    out = args.out or os.path.join(src, "plot.svg")
    render_svg(series, out, title="h(t)", xlabel="t [s]", ylabel="h")
    print(out)
    return EXIT_OK


# ---- argument handling ------------------------------------------------------

FLAG_FIELDS = {"system": "system", "epsilon": "epsilon", "eps_min": "eps_min",
               "eps_max": "eps_max", "count": "count", "dt": "dt", "tf": "t_f",
               "nu": "nu", "grid": "grid", "seed": "seed", "out": "out",
               "inflation": "inflation", "n_ic": "n_ic", "n_eps": "n_eps",
               "max_steps": "max_steps", "force_epsilon": "force_epsilon",
               "certificate": "certificate"}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spsafe", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("simulate", "sweep", "epsbar", "check"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--system", choices=sorted(BUNDLES))
        p.add_argument("--epsilon", type=float)
        p.add_argument("--eps-min", dest="eps_min", type=float)
        p.add_argument("--eps-max", dest="eps_max", type=float)
        p.add_argument("--count", type=int)
        p.add_argument("--dt", type=float)
        p.add_argument("--tf", type=float)
        p.add_argument("--nu", type=float)
        p.add_argument("--grid", type=int)
        p.add_argument("--inflation", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--n-ic", dest="n_ic", type=int)
        p.add_argument("--n-eps", dest="n_eps", type=int)
        p.add_argument("--max-steps", dest="max_steps", type=int)
        p.add_argument("--force-epsilon", dest="force_epsilon", type=float)
        p.add_argument("--certificate")
        p.add_argument("--i0-offset", dest="i0_offset", type=float, nargs=2,
                       help="arm: initial current offset from the fast equilibrium")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=JSON", help="override a system parameter")
        p.add_argument("--out")
        p.add_argument("-v", "--verbose", action="store_true")
    p = sub.add_parser("plot")
    p.add_argument("--input", required=True, help="sweep output directory")
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def config_from_args(args) -> RunConfig:
    d = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: line {exc.lineno}: {exc.msg}") from exc
        except OSError as exc:
            raise ConfigError(str(exc)) from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
    for flag, key in FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    params = dict(d.get("params", {}))
    for item in args.overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            params[key] = json.loads(raw)
        except json.JSONDecodeError:
            params[key] = raw
    if args.i0_offset is not None:
        params["i0_offset"] = list(args.i0_offset)
    if params:
        d["params"] = params
    return RunConfig.from_dict(d)


COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "epsbar": cmd_epsbar,
            "check": cmd_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot":
            return cmd_plot(args)
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CertificateError as exc:
        print(f"unsupported: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except EstimationError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (DomainError, ContractViolation) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
