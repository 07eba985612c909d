"""Command-line driver: parameter validation, scheme runs, verification suites and analysis.

Configuration precedence is defaults, then the ``--config`` JSON file, then
``CIFORGE_*`` environment variables, then command-line flags.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import scheme as S
from . import singular
from .fields import Grid, ResolutionError, VectorField, holder_norm, save_field
from .params import SchemeParams, dimension_bounds, infimum_closed_form, infimum_scan, validate

log = logging.getLogger("ciforge")

PRESETS = ("shear/shear", "shear/zero", "taylor-green/zero")
MODES = ("structure-only", "strict")
GRIDS = (32, 64, 128)
DESK_PARAMS = {"beta": 0.05, "b": 1.5, "gamma": 0.15, "alpha": 1e-4, "a": 2.0, "T": 3.4, "M": None}

EXIT_OK, EXIT_INVALID, EXIT_GUARD, EXIT_RED = 0, 2, 3, 4


@dataclass
class RunConfig:
    params: dict = field(default_factory=lambda: dict(DESK_PARAMS))
    n: int = 32
    steps: int = 1
    preset: str = "shear/zero"
    mode: str = "structure-only"
    out: str = "run"
    seed: int = 0
    metrics_samples: int = 129

    def check(self):
        if self.steps < 0 or self.steps > 3:
            raise ValueError(f"steps must lie in 0..3, got {self.steps}")
        if self.n not in GRIDS:
            raise ValueError(f"n must be one of {GRIDS}, got {self.n}")
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.metrics_samples < 64:
            raise ValueError("metrics_samples must be at least 64")
        SchemeParams.from_dict(self.params)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("out")
        return d


def load_config(path: Optional[str] = None, env: Optional[dict] = None, **overrides) -> RunConfig:
    """Merge defaults, a JSON file, ``CIFORGE_*`` variables and explicit overrides."""
    cfg = RunConfig()
    data = {}
    if path:
        with open(path) as fh:
            data = json.load(fh)
    env = os.environ if env is None else env
    for key, val in env.items():
        if not key.startswith("CIFORGE_"):
            continue
        name = key[len("CIFORGE_"):].lower()
        if name.startswith("param_"):
            data.setdefault("params", {})[name[6:]] = None if val.lower() == "none" else float(val)
        else:
            data[name] = val
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    params = dict(cfg.params)
    params.update(data.pop("params", {}))
    cfg.params = params
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    for k, v in data.items():
        if k not in types:
            raise KeyError(f"unknown config key {k!r}")
        cfg.__dict__[k] = int(v) if types[k] == "int" else str(v)
    cfg.check()
    return cfg


# Initial data ------------------------------------------------------------------------


def preset_field(name: str, n: int) -> VectorField:
    """Steady Euler flows: a shear, the 2.5D Taylor-Green eigenflow, or rest."""
    g = Grid(n)
    x, y, _ = g.coords()
    tp = 2 * np.pi
    if name == "shear":
        return VectorField(g, np.stack([np.sin(tp * y), 0 * y, 0 * y]))
    if name == "taylor-green":
        return VectorField(g, np.stack([-np.cos(tp * x) * np.sin(tp * y), np.sin(tp * x) * np.cos(tp * y), 0 * x]))
    if name == "zero":
        return VectorField.zeros(g)
    raise ValueError(f"unknown initial flow {name!r}")


# Artifacts -----------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def metric_times(T: float, count: int) -> np.ndarray:
    return np.linspace(0.0, T, count)


def write_metrics(path: str, pair: S.EulerReynoldsPair, times) -> list:
    rows = []
    for t in times:
        t = float(t)
        v = pair.velocity(t)
        rows.append((t, v.energy(), pair.stress(t).sup(), holder_norm(v, 1)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "e_v", "R_C0", "v_C1"])
        for r in rows:
            w.writerow([repr(float(x)) for x in r])
    return rows


def dump_fields(directory: str, pair: S.EulerReynoldsPair, badset: S.BadSet) -> list:
    """Velocity and stress at a good time, the middle of the first bad interval and ``T/2``."""
    good = badset.good()[0]
    times = [0.5 * (good[0] + good[1]), 0.5 * sum(badset.intervals[0]) if badset.intervals else pair.T, pair.T / 2]
    names = []
    for k, t in enumerate(times):
        for label, f in (("v", pair.velocity(t)), ("R", pair.stress(t))):
            name = f"{label}_{k}"
            save_field(f, os.path.join(directory, "fields"), name)
            names.append({"name": name, "t": t})
    return names


def verify_times(pair: S.EulerReynoldsPair, mtimes) -> list:
    """Every fourth metrics time plus two points in each stress-support interval."""
    ts = [float(t) for t in mtimes[::4]]
    for a, b in pair.stress_support():
        ts += [a + (b - a) / 3, a + 2 * (b - a) / 3]
    return sorted(ts)


def emit_level(run_dir: str, cfg: RunConfig, pair, badset, history, extra: dict) -> dict:
    d = os.path.join(run_dir, f"step_{pair.q}")
    os.makedirs(d, exist_ok=True)
    write_json(os.path.join(d, "badset.json"), badset.to_dict())
    mt = metric_times(pair.T, cfg.metrics_samples)
    rep = S.verify_inductive(pair, badset, history=history, times=verify_times(pair, mt))
    rows = write_metrics(os.path.join(d, "metrics.csv"), pair, mt)
    out = rep.to_dict()
    out.update(extra)
    out["fields"] = dump_fields(d, pair, badset)
    out["energy_range"] = [min(r[1] for r in rows), max(r[1] for r in rows)]
    write_json(os.path.join(d, "inductive_report.json"), out)
    return out


def _structural(extra: dict) -> dict:
    """Pass flags of the exact identities from the glue and perturbation checks."""
    flags = {}
    g = extra.get("glue_checks")
    if g:
        flags["partition_of_unity"] = g["partition_error"] <= S.PARTITION_TOL
        flags["glue_support"] = bool(g["support_in_I"] and g["leak"] == 0.0)
        flags["glue_good_set_identity"] = bool(g["good_set_identical"])
        flags["glue_near_good_zero"] = bool(g["near_good_zero"])
    p = extra.get("perturb_checks")
    if p and p.get("n_times", 0) > 0:
        flags["div_w"] = p["div_w"] <= 1e-10
        flags["w_support"] = bool(p["support_in_real_bad"] and p["zero_off_support"])
        flags["phase_invariance"] = p["phase_residual"] <= 1e-6
        flags["oscillation_cancellation"] = p["osc_two_scale"] <= p["osc_tolerance"]
    elif p:
        flags["w_support"] = bool(p["support_in_real_bad"] and p["zero_off_support"])
    return flags


def run_scheme(cfg: RunConfig, run_dir: str) -> dict:
    """Full pipeline; raises on guard faults."""
    from .mikado import build_family, geometric_constants

    os.makedirs(run_dir, exist_ok=True)
    P = SchemeParams.from_dict(cfg.params)
    family = build_family()
    consts = geometric_constants(family, seed=cfg.seed)
    if P.M is None:
        P = dataclasses.replace(P, M=consts["M"])
    a_name, b_name = cfg.preset.split("/")
    v1, v2 = preset_field(a_name, cfg.n), preset_field(b_name, cfg.n)
    T_in = S.initial_horizon(v1, v2, P)
    pair, B, rep0 = S.make_initial_pair(S.steady_slab(v1, T_in), S.steady_slab(v2, T_in), P)
    resolved = cfg.to_dict()
    resolved["params"] = pair.params.to_dict()
    write_json(os.path.join(run_dir, "config.json"), {**resolved, "T_in": T_in, "mikado": consts})
    summary = {"levels": [], "structural": {}, "mode": cfg.mode, "preset": cfg.preset}
    level0 = emit_level(run_dir, cfg, pair, B, [], {"initial": rep0})
    summary["levels"].append({"q": 0, "structural_passed": level0["structural_passed"]})
    history = []
    for _ in range(cfg.steps):
        log.info("step q=%d: gluing", pair.q)
        glued, nb, grep = S.glue(pair, B, cfg.mode)
        gchk = S.glue_checks(glued, B, nb, residual_times=S.glue_residual_times(glued, 1), residual_h=1e-4)
        log.info("step q=%d: perturbing", pair.q)
        new, prep = S.perturb(glued, nb, family, cfg.mode)
        pts = [float(np.mean(x)) for x in glued.I_intervals()[:2]] if not glued.degenerate else []
        pchk = S.perturb_checks(new, pts, M=P.M, residual_h=1e-4)
        pchk["n_times"] = len(pts)
        history.append((pair, B))
        extra = {"glue": grep, "glue_checks": gchk, "perturb": prep, "perturb_checks": pchk}
        flags = _structural(extra)
        extra["structural_flags"] = flags
        lv = emit_level(run_dir, cfg, new, nb, list(history), extra)
        summary["levels"].append({"q": new.q, "structural_passed": lv["structural_passed"] and all(flags.values()),
                                  "degenerate": grep["degenerate"]})
        pair, B = new, nb
    summary["dimension"] = singular.analyze_run(run_dir, beta=P.beta)
    summary["passed"] = all(lv["structural_passed"] for lv in summary["levels"])
    write_json(os.path.join(run_dir, "summary.json"), summary)
    return summary


# Verification suites ----------------------------------------------------------------------


def _suite_operators(rng) -> list:
    from .calculus import biot_savart, curl, div, inverse_divergence, laplacian, solve_pressure
    from .fields import SymTensorField

    rows = []
    for n in (32, 64):
        g = Grid(n)
        worst = {"div R f = f": 0.0, "curl B v = v": 0.0, "pressure residual": 0.0}
        for _ in range(10):
            f = VectorField(g, _band(n, 3, 5, rng))
            worst["div R f = f"] = max(worst["div R f = f"], _rel(div(inverse_divergence(f)).data, f.data))
            v = curl(VectorField(g, _band(n, 3, 5, rng)))
            worst["curl B v = v"] = max(worst["curl B v = v"], _rel(curl(biot_savart(v)).data, v.data))
            R = SymTensorField(g, _band(n, 6, 5, rng))
            p = solve_pressure(v, R)
            dd = div(div(v.outer() - R))
            worst["pressure residual"] = max(worst["pressure residual"], _rel(laplacian(p).data, -dd.data))
        rows += [(f"{k} (n={n})", val, 1e-10) for k, val in worst.items()]
    return rows


def _suite_mikado(rng) -> list:
    from .mikado import build_family, sample_ball

    fam = build_family()
    rows = []
    worst_mean, worst_mom = 0.0, 0.0
    for R in sample_ball(rng, 10, 0.5 * fam.nbhd_radius):
        fd = fam.fourier_data(R)
        worst_mom = max(worst_mom, float(np.abs(fam.second_moment(R, 128) - R).max()))
        worst_mean = max(worst_mean, float(np.abs(fam.field(R, 32).mean()).max()))
        res = fd.orthogonality_residuals()
        rows.append(("A_k.k = C_k.k = 0", max(res.values()), 1e-10))
    rows = [max(rows, key=lambda r: r[1])]
    rows += [("mean W = 0", worst_mean, 1e-12), ("mean W(x)W = R", worst_mom, 1e-6)]
    return rows


def _suite_euler(rng) -> list:
    from .euler import EulerState, cfl_limit, divergence_sup, step

    rows = []
    for name in ("shear", "taylor-green"):
        v = preset_field(name, 32)
        st = EulerState(v, 0.0)
        for _ in range(20):
            st = step(st, cfl_limit(v))
        rows.append((f"steady {name} preserved", float(np.abs(st.v.data - v.data).max()), 1e-6))
    from .calculus import curl

    w = curl(VectorField(Grid(32), _band(32, 3, 3, rng)))
    w = w * (0.1 / w.sup())
    st = EulerState(w, 0.0)
    e0 = w.energy()
    for _ in range(20):
        st = step(st, 0.5 * cfl_limit(w))
    rows.append(("energy drift", abs(st.v.energy() - e0), 1e-8))
    rows.append(("div v", divergence_sup(st.v), 1e-10))
    return rows


def _suite_scheme(rng) -> list:
    cut = S.glue_cutoffs(1.0, 8, 0.09, 0.06)
    ts = np.linspace(1.0, 1.72, 2001)
    part = max(abs(cut.total(float(t)) - 1.0) for t in ts)
    pc = S.perturb_cutoffs(cut.intervals, 0.06, 0.09)
    sup = [pc.support(i) for i in range(len(pc))]
    overlap = max(max(0.0, x[1] - y[0]) for x, y in zip(sup, sup[1:]))
    return [("glue partition of unity", part, 1e-12), ("perturbation cutoffs disjoint", overlap, 0.0)]


def _suite_singular(rng) -> list:
    seq = singular.IntervalFamilySequence(singular.cantor_levels(8))
    d = singular.box_dimension(seq, levels=range(1, 9))["dimension"]
    rows = [("Cantor box dimension", abs(d - math.log(2) / math.log(3)), 0.02)]
    inf = infimum_scan(0.2)
    rows.append(("infimum scan vs closed form", abs(inf["value"] - infimum_closed_form(0.2)), 1e-3))
    return rows


SUITES = {"operators": _suite_operators, "mikado": _suite_mikado, "euler": _suite_euler,
          "scheme": _suite_scheme, "singular": _suite_singular}


def _band(n, ncomp, K, rng):
    m = np.fft.fftfreq(n, 1.0 / n)
    m1, m2, m3 = np.meshgrid(m, m, m, indexing="ij")
    keep = np.maximum(np.maximum(abs(m1), abs(m2)), abs(m3)) <= K
    keep[0, 0, 0] = False
    c = (rng.standard_normal((ncomp, n, n, n)) + 1j * rng.standard_normal((ncomp, n, n, n))) * keep
    return np.real(np.fft.ifftn(c, axes=(1, 2, 3)))


def _rel(a, b) -> float:
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def run_suites(names, seed: int, stream=None) -> bool:
    stream = stream or sys.stdout
    ok = True
    rng = np.random.default_rng(seed)
    for name in names:
        for label, val, tol in SUITES[name](rng):
            good = val <= tol
            ok &= good
            print(f"{'PASS' if good else 'FAIL'}  {name:10s} {label:40s} {val:.3e} <= {tol:.1e}", file=stream)
    return ok


# Plot data ---------------------------------------------------------------------------------


def plot_data(run_dir: str) -> list:
    run = singular.load_run(run_dir)
    written = []
    with open(os.path.join(run_dir, "plot_energy.csv"), "w", newline="") as fe, \
            open(os.path.join(run_dir, "plot_norms.csv"), "w", newline="") as fn:
        we, wn = csv.writer(fe), csv.writer(fn)
        we.writerow(["step", "t", "e_v"])
        wn.writerow(["step", "t", "R_C0", "v_C1"])
        for q, d in enumerate(run["steps"]):
            with open(os.path.join(d, "metrics.csv"), newline="") as fh:
                for r in csv.DictReader(fh):
                    we.writerow([q, r["t"], r["e_v"]])
                    wn.writerow([q, r["t"], r["R_C0"], r["v_C1"]])
    written += ["plot_energy.csv", "plot_norms.csv"]
    with open(os.path.join(run_dir, "plot_badsets.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "start", "end"])
        for b in run["badsets"]:
            for a, c in b["intervals"]:
                w.writerow([b["q"], repr(float(a)), repr(float(c))])
    written.append("plot_badsets.csv")
    return written


# Entry point --------------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ciforge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("validate-params", help="check the parameter inequalities")
    common(sp)
    sp.add_argument("--horizon", type=int, default=3)
    sp.add_argument("--a0", action="store_true", help="bisect the a-floor thresholds")

    sp = sub.add_parser("run", help="run the iteration and write artifacts")
    common(sp)
    sp.add_argument("--preset", choices=PRESETS)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--n", type=int, choices=GRIDS)
    sp.add_argument("--mode", choices=MODES)

    sp = sub.add_parser("verify", help="run property suites")
    common(sp)
    sp.add_argument("suites", nargs="*", help=f"any of all, {', '.join(SUITES)} (default all)")

    for name, text in (("analyze", "dimension and energy analysis of a run"), ("plot-data", "CSV plot data of a run")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.add_argument("run_dir")

    sp = sub.add_parser("dims", help="closed-form dimension quantities")
    common(sp)
    sp.add_argument("--beta-pp", type=float, help="beta'' (defaults to the config beta)")
    sp.add_argument("--scan", action="store_true", help="also run the numerical infimum scan")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, out=args.out, seed=args.seed,
                          **{k: getattr(args, k, None) for k in ("preset", "steps", "n", "mode")})
    except (KeyError, ValueError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    P = SchemeParams.from_dict(cfg.params)

    if args.command == "validate-params":
        rep = validate(P, horizon=args.horizon, with_a0=args.a0)
        print(rep.to_json())
        return EXIT_OK if rep.passed else EXIT_INVALID

    if args.command == "run":
        rep = validate(P)
        if not rep.passed:
            print(rep.to_json())
            print(f"invalid parameters: {rep.failures()}", file=sys.stderr)
            return EXIT_INVALID
        try:
            summary = run_scheme(cfg, cfg.out)
        except (S.GuardError, S.PositivityError, ResolutionError) as exc:
            os.makedirs(cfg.out, exist_ok=True)
            write_json(os.path.join(cfg.out, "fault.json"), {"type": type(exc).__name__, "message": str(exc)})
            print(f"guard fault ({type(exc).__name__}): {exc}", file=sys.stderr)
            return EXIT_GUARD
        except Exception as exc:
            from .euler import BlowUpError, CFLError, FlowMapHypothesisError, HorizonError

            if isinstance(exc, (BlowUpError, CFLError, FlowMapHypothesisError, HorizonError)):
                os.makedirs(cfg.out, exist_ok=True)
                write_json(os.path.join(cfg.out, "fault.json"), {"type": type(exc).__name__, "message": str(exc)})
                print(f"guard fault ({type(exc).__name__}): {exc}", file=sys.stderr)
                return EXIT_GUARD
            raise
        for lv in summary["levels"]:
            print(f"step {lv['q']}: structural {'green' if lv['structural_passed'] else 'RED'}")
        return EXIT_OK if summary["passed"] else EXIT_RED

    if args.command == "verify":
        names = list(SUITES) if not args.suites or "all" in args.suites else args.suites
        unknown = sorted(set(names) - set(SUITES))
        if unknown:
            print(f"unknown suites: {unknown}", file=sys.stderr)
            return EXIT_INVALID
        return EXIT_OK if run_suites(names, cfg.seed) else EXIT_RED

    if args.command == "analyze":
        rep = singular.analyze_run(args.run_dir, beta=P.beta)
        print(json.dumps(_jsonable(rep), indent=2, sort_keys=True))
        return EXIT_OK

    if args.command == "plot-data":
        for name in plot_data(args.run_dir):
            print(os.path.join(args.run_dir, name))
        return EXIT_OK

    if args.command == "dims":
        be = args.beta_pp if args.beta_pp is not None else P.beta
        out = {"beta_pp": be, "bounds": dimension_bounds(be, P.b, P.gamma, P.alpha),
               "infimum_closed_form": infimum_closed_form(be)}
        if args.scan:
            out["infimum_scan"] = infimum_scan(be)
        text = json.dumps(_jsonable(out), indent=2, sort_keys=True)
        print(text)
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            with open(os.path.join(args.out, "dims.json"), "w") as fh:
                fh.write(text + "\n")
        return EXIT_OK
    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
