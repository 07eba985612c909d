"""Geometry of the nested bad sets and analysis of energy profiles.

Box-counting dimension of interval families, the Hölder energy-increase
harness, energy regularity fits and good-set flatness, plus the run-directory
analysis that writes ``dimension_report.json`` and plot data.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .params import SchemeParams, prelimit_box_dimension, tau, theta

NEST_SLACK = 1e-12


class NestingError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


def _merge(intervals) -> list:
    out = []
    for a, b in sorted((float(a), float(b)) for a, b in intervals):
        if b < a:
            raise ValueError(f"interval ({a}, {b}) has negative length")
        if out and a <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], b))
        else:
            out.append((a, b))
    return out


@dataclass
class IntervalFamilySequence:
    """Closed intervals per level, nested from one level to the next.

    ``scales`` optionally fixes the covering scale of each level (for scheme
    runs, ``5 tau_q``).
    """

    levels: list
    scales: Optional[list] = None
    params: Optional[dict] = None

    def __post_init__(self):
        self.levels = [_merge(lv) for lv in self.levels]
        if self.scales is not None and len(self.scales) != len(self.levels):
            raise ValueError("one scale per level is required")
        for q, (outer, inner) in enumerate(zip(self.levels, self.levels[1:])):
            span = max((b for _, b in outer), default=0.0) - min((a for a, _ in outer), default=0.0)
            slack = NEST_SLACK * max(span, 1.0)
            for a, b in inner:
                if not any(c - slack <= a and b <= d + slack for c, d in outer):
                    raise NestingError(f"non-nested input: level {q + 1} interval ({a}, {b}) leaves level {q}")

    def __len__(self):
        return len(self.levels)

    def measures(self) -> list:
        return [float(sum(b - a for a, b in lv)) for lv in self.levels]

    @classmethod
    def from_badsets(cls, badsets: Sequence[dict], params: Optional[dict] = None) -> "IntervalFamilySequence":
        """From ``BadSet.to_dict`` records; scales are ``5 tau_q``."""
        badsets = sorted(badsets, key=lambda d: d["q"])
        return cls([d["intervals"] for d in badsets], [5 * d["tau"] for d in badsets], params)


def cantor_levels(depth: int, lo: float = 0.0, hi: float = 1.0) -> list:
    """Middle-thirds construction: level ``k`` has ``2^k`` intervals of length ``3^-k``."""
    levels = [[(lo, hi)]]
    for _ in range(depth):
        nxt = []
        for a, b in levels[-1]:
            d = (b - a) / 3
            nxt += [(a, a + d), (b - d, b)]
        levels.append(nxt)
    return levels


def covering_count(intervals, r: float) -> int:
    """Boxes of length ``r`` needed to cover each component separately."""
    return int(sum(max(1, math.ceil((b - a) / r - 1e-9)) for a, b in intervals))


def box_dimension(seq: IntervalFamilySequence, levels: Optional[Sequence[int]] = None) -> dict:
    """Regression of ``log N_q`` on ``log(1/r_q)`` over the levels.

    Scale ``r_q`` is ``seq.scales[q]`` when given, else the shortest component
    at level ``q``. If those shortest lengths do not strictly decrease, the
    scales fall back to ``r_0 2^-q`` so that a fixed set still refines.

    Returns
    -------
    dict
        ``dimension``, per-level ``counts`` and ``scales``, the scale rule,
        and the finite-``q`` pre-limit quotient when run parameters are known.
    """
    if len(seq) < 2:
        raise ValueError("box dimension needs at least 2 levels")
    idx = list(range(len(seq))) if levels is None else list(levels)
    rule = "given"
    if seq.scales is not None:
        r = [float(seq.scales[q]) for q in idx]
    else:
        r = [min(b - a for a, b in seq.levels[q]) for q in idx]
        rule = "shortest"
        if any(y >= x for x, y in zip(r, r[1:])) or min(r) <= 0:
            r = [max(b - a for a, b in seq.levels[idx[0]]) * 2.0 ** -k for k in range(len(idx))]
            rule = "dyadic"
    counts = [covering_count(seq.levels[q], rq) for q, rq in zip(idx, r)]
    x = -np.log(r)
    y = np.log(counts)
    slope = float(np.polyfit(x, y, 1)[0])
    out = {"dimension": slope, "levels": idx, "counts": counts, "scales": r, "scale_rule": rule,
           "measures": [seq.measures()[q] for q in idx]}
    if seq.params is not None:
        p = SchemeParams.from_dict(seq.params)
        out["prelimit"] = {q: prelimit_box_dimension(p, q) for q in idx if q >= 1}
        m = seq.measures()
        prod = [m[0]]
        for q in range(1, len(seq)):
            prod.append(prod[-1] * 10 * float(tau(p, q)) / float(theta(p, q)))
        out["measure_product_bound"] = prod
        out["measure_ratio"] = [mq / pq if pq > 0 else math.inf for mq, pq in zip(m, prod)]
    return out


# Energy profiles ---------------------------------------------------------------------


@dataclass
class EnergyProfile:
    """``e(t) = 1/2 int |v|^2`` sampled at increasing times."""

    times: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise ValueError("times and values must be 1-D of equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must increase strictly")
        if np.any(self.values < 0):
            raise ValueError("energy must be nonnegative")

    def __len__(self):
        return len(self.times)

    @classmethod
    def from_metrics(cls, path: str) -> "EnergyProfile":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([float(r["t"]) for r in rows], [float(r["e_v"]) for r in rows], {"source": path})


def holder_seminorm_1d(times, values, theta_exp: float) -> float:
    """Discrete ``[e]_theta = max |e(t) - e(s)| / |t - s|^theta`` over all sample pairs."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    best = 0.0
    for i in range(len(t) - 1):
        d = np.abs(v[i + 1:] - v[i]) / (t[i + 1:] - t[i]) ** theta_exp
        best = max(best, float(d.max()))
    return best


def _in_closed(intervals, t: float) -> bool:
    return any(a <= t <= b for a, b in intervals)


def holder_increase_bound(e: EnergyProfile, cover, theta_exp: float, tol: float = 1e-12) -> dict:
    """Energy change against ``[e]_theta sum r_i^theta`` for a cover of the variation set.

    ``r_i`` are the interval lengths.

    Raises
    ------
    PreconditionError
        If ``e`` changes between consecutive samples that are both off the cover.
    """
    if not 0 < theta_exp < 1:
        raise ValueError("theta must lie in (0, 1)")
    cover = _merge(cover)
    off = np.array([not _in_closed(cover, float(t)) for t in e.times])
    jumps = np.abs(np.diff(e.values))
    both = off[:-1] & off[1:]
    scale = max(float(np.abs(e.values).max()), 1.0)
    if np.any(jumps[both] > tol * scale):
        k = int(np.argmax(np.where(both, jumps, -1)))
        raise PreconditionError(
            f"energy varies off the cover: |de| = {jumps[k]:.3e} on [{e.times[k]:.6g}, {e.times[k + 1]:.6g}]")
    C = holder_seminorm_1d(e.times, e.values, theta_exp)
    sum_r = float(sum((b - a) ** theta_exp for a, b in cover))
    lhs = float(np.abs(e.values - e.values[0]).max())
    rhs = C * sum_r
    return {"lhs": lhs, "rhs": rhs, "C": C, "sum_r_theta": sum_r, "pass": lhs <= rhs * (1 + 1e-2)}


FIT_CEILING = 2.0


def energy_regularity_fit(e: EnergyProfile, beta: float, min_samples: int = 64) -> dict:
    """Log-log fit of ``sup_{|t-s|=h} |e(t) - e(s)|`` against ``h`` on dyadic lags.

    A profile flat to rounding has no measurable slope and is reported as
    at or above the fit ceiling.
    """
    if len(e) < min_samples:
        raise ValueError(f"energy fit needs at least {min_samples} samples, got {len(e)}")
    dt = np.diff(e.times)
    if np.max(np.abs(dt - dt.mean())) > 1e-9 * dt.mean():
        raise ValueError("energy fit needs uniformly spaced samples")
    target = 2 * beta / (1 - beta)
    lags = [k for k in (2 ** j for j in range(20)) if k <= len(e) // 4]
    osc = np.array([np.abs(e.values[k:] - e.values[:-k]).max() for k in lags])
    h = np.array(lags) * dt.mean()
    floor = 1e-13 * max(float(np.abs(e.values).max()), 1e-300)
    if np.all(osc <= floor):
        return {"exponent": None, "status": ">= fit ceiling", "ceiling": FIT_CEILING, "target": target,
                "lags": h.tolist(), "oscillation": osc.tolist()}
    keep = osc > floor
    slope = float(np.polyfit(np.log(h[keep]), np.log(osc[keep]), 1)[0])
    return {"exponent": slope, "status": "fitted", "ceiling": FIT_CEILING, "target": target,
            "lags": h.tolist(), "oscillation": osc.tolist()}


def good_set_flatness(e: EnergyProfile, good) -> float:
    """Max centred ``|de/dt|`` at samples whose neighbours lie in the same good interval."""
    good = _merge(good)
    t, v = e.times, e.values
    best = 0.0
    for i in range(1, len(t) - 1):
        for a, b in good:
            if a <= t[i - 1] and t[i + 1] <= b:
                best = max(best, abs(v[i + 1] - v[i - 1]) / (t[i + 1] - t[i - 1]))
                break
    return float(best)


# Run-directory analysis ----------------------------------------------------------------------


def _step_dirs(run_dir: str) -> list:
    out = []
    for name in os.listdir(run_dir):
        if name.startswith("step_") and name[5:].isdigit():
            out.append((int(name[5:]), os.path.join(run_dir, name)))
    return [p for _, p in sorted(out)]


def load_run(run_dir: str) -> dict:
    """Bad sets per level, the final metrics profile and the run config, if present."""
    steps = _step_dirs(run_dir)
    if not steps:
        raise FileNotFoundError(f"no step_q directories in {run_dir}")
    badsets = []
    for d in steps:
        with open(os.path.join(d, "badset.json")) as fh:
            badsets.append(json.load(fh))
    cfg = None
    cpath = os.path.join(run_dir, "config.json")
    if os.path.exists(cpath):
        with open(cpath) as fh:
            cfg = json.load(fh)
    metrics = os.path.join(steps[-1], "metrics.csv")
    return {"badsets": badsets, "config": cfg, "metrics": metrics if os.path.exists(metrics) else None,
            "steps": steps}


def analyze_run(run_dir: str, beta: Optional[float] = None) -> dict:
    """Write ``dimension_report.json`` and ``dimension_levels.csv`` for a run."""
    run = load_run(run_dir)
    params = run["config"]["params"] if run["config"] else None
    seq = IntervalFamilySequence.from_badsets(run["badsets"], params)
    report = {"levels": len(seq), "measures": seq.measures()}
    if len(seq) >= 2:
        report["box_dimension"] = box_dimension(seq)
    else:
        report["box_dimension"] = None
    if run["metrics"]:
        e = EnergyProfile.from_metrics(run["metrics"])
        b = beta if beta is not None else (params["beta"] if params else 1.0 / 3.0)
        report["energy_fit"] = energy_regularity_fit(e, b) if len(e) >= 64 else None
        good = [tuple(x) for x in run["badsets"][-1]["good"]]
        report["good_set_flatness"] = good_set_flatness(e, good)
    with open(os.path.join(run_dir, "dimension_report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    with open(os.path.join(run_dir, "dimension_levels.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "count", "scale"])
        if report["box_dimension"]:
            bd = report["box_dimension"]
            for q, c, r in zip(bd["levels"], bd["counts"], bd["scales"]):
                w.writerow([q, c, repr(float(r))])
    return report
