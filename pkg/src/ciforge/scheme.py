"""The convex-integration iteration: initial pair, gluing, perturbation and inductive checks.

Pairs are lazy: velocity, stress and pressure are produced on demand at any
time, and a later pair returns the earlier pair's very object wherever it is
unchanged. This keeps good-set slices bit-identical across steps without
storing dense time slabs.

Times are in the rescaled frame of the iteration; ``params.T`` of a pair is
its horizon.
"""

from __future__ import annotations

import dataclasses
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .calculus import (
    biot_savart,
    curl,
    gradient_of_map,
    gradient_tensor,
    inverse_div_curl,
    inverse_divergence,
    solve_pressure,
    tensor_div_hat,
    div_hat,
)
from .euler import (
    FlowTracer,
    HorizonError,
    LocalSolution,
    _sym_outer_hat,
    er_residual_slice,
    euler_reynolds_residual,
    solve_local,
)
from .fields import (
    SYM_INDEX,
    Grid,
    ScalarField,
    SymTensorField,
    TimeSlab,
    VectorField,
    _wavenumbers,
    fft,
    holder_norm,
    ifft,
    mollify,
)
from .mikado import MikadoFamily, PositivityError, geometric_constants
from .params import SchemeParams, check_chain, scales

MEAN_TOL = 1e-10
INPUT_RESIDUAL_TOL = 1e-6
PARTITION_TOL = 1e-12
LEAK_TOL = 1e-12
SLICES_PER_TAU = 16
CACHE_SLICES = 96


class GuardError(RuntimeError):
    """A hypothesis of the construction fails at the current parameters."""


class MeansDifferError(GuardError):
    pass


class NotEulerError(GuardError):
    pass


class PartitionError(GuardError):
    pass


class SupportLeakError(GuardError):
    pass


class NyquistError(GuardError):
    pass


class PreconditionError(GuardError):
    pass


# Interval arithmetic --------------------------------------------------------------


def merge(intervals) -> list:
    """Union of open intervals as sorted disjoint ``(a, b)`` pairs; touching ones stay apart."""
    out = []
    for a, b in sorted((float(a), float(b)) for a, b in intervals if b > a):
        if out and a < out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], b))
        else:
            out.append((a, b))
    return out


def measure(intervals) -> float:
    return float(sum(b - a for a, b in merge(intervals)))


def intersect(intervals, other) -> list:
    out = []
    for a, b in merge(intervals):
        for c, d in merge(other):
            lo, hi = max(a, c), min(b, d)
            if hi > lo:
                out.append((lo, hi))
    return merge(out)


def contains(intervals, t: float) -> bool:
    return any(a < t < b for a, b in intervals)


def covers(outer, inner, slack: float = 0.0) -> bool:
    """Every interval of ``inner`` lies in one interval of ``outer``."""
    return all(any(c - slack <= a and b <= d + slack for c, d in outer) for a, b in merge(inner))


# Bad sets -------------------------------------------------------------------------


@dataclass
class BadSet:
    """Open bad set ``B_q`` in ``[0, T]`` with good set and real bad set derived.

    ``lengths_nominal`` is ``5 tau_q``; components longer than that arise when
    dilated intervals overlap.
    """

    q: int
    T: float
    tau: float
    intervals: list

    def __post_init__(self):
        self.intervals = merge(self.intervals)
        for a, b in self.intervals:
            if a < -1e-12 or b > self.T * (1 + 1e-12):
                raise ValueError(f"bad-set interval ({a}, {b}) outside [0, {self.T}]")

    @classmethod
    def initial(cls, T: float) -> "BadSet":
        return cls(0, T, T / 15.0, [(T / 3.0, 2.0 * T / 3.0)])

    @property
    def measure(self) -> float:
        return measure(self.intervals)

    def good(self) -> list:
        """Closed good set as ``[a, b]`` pairs."""
        out, t = [], 0.0
        for a, b in self.intervals:
            if a > t or (a == t and not out):
                out.append((t, a))
            t = b
        if t <= self.T:
            out.append((t, self.T))
        return out

    def dist_to_good(self, t: float) -> float:
        return min((0.0 if a <= t <= b else min(abs(t - a), abs(t - b))) for a, b in self.good())

    def in_good(self, t: float) -> bool:
        return not contains(self.intervals, t)

    def real_bad(self) -> list:
        """``{t : dist(t, G) > tau}`` as open intervals."""
        out = []
        for a, b in self.intervals:
            lo = a + self.tau if a > 0 else a
            hi = b - self.tau if b < self.T else b
            if hi > lo:
                out.append((lo, hi))
        return out

    def in_real_bad(self, t: float) -> bool:
        return contains(self.real_bad(), t)

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "T": self.T,
            "tau": self.tau,
            "intervals": [list(x) for x in self.intervals],
            "good": [list(x) for x in self.good()],
            "real_bad": [list(x) for x in self.real_bad()],
            "measure": self.measure,
            "nominal_length": 5 * self.tau,
            "lengths": [b - a for a, b in self.intervals],
        }


# Cutoffs ---------------------------------------------------------------------------


def smoothstep(x, order: int = 0):
    """Quintic step ``x^3 (6x^2 - 15x + 10)`` on ``[0, 1]`` and its first two derivatives."""
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    if order == 0:
        return x**3 * (x * (6 * x - 15) + 10)
    if order == 1:
        return 30 * x**2 * (1 - x) ** 2
    if order == 2:
        return 60 * x * (1 - x) * (1 - 2 * x)
    raise ValueError("order must be 0, 1 or 2")


@dataclass(frozen=True)
class Cutoffs:
    """Trapezoid cutoffs: cutoff ``i`` rises over ``[rises[i], rises[i]+width]`` and
    falls over ``[falls[i], falls[i]+width]``.

    A falling ramp is evaluated as ``1 - S`` with the same argument as the
    neighbour's rising ramp, so adjacent glue cutoffs sum to one exactly up to
    a single rounding.
    """

    kind: str
    centers: np.ndarray
    intervals: np.ndarray
    rises: np.ndarray
    falls: np.ndarray
    width: float

    def __len__(self):
        return len(self.rises)

    def support(self, i: int) -> tuple:
        return float(self.rises[i]), float(self.falls[i] + self.width)

    def plateau(self, i: int) -> tuple:
        return float(self.rises[i] + self.width), float(self.falls[i])

    def value(self, i: int, t: float, order: int = 0) -> float:
        r, f, w = self.rises[i], self.falls[i], self.width
        if t <= r or t >= f + w:
            return 0.0
        if t < r + w:
            return float(smoothstep((t - r) / w, order)) / w**order
        if t <= f:
            return 1.0 if order == 0 else 0.0
        s = float(smoothstep((t - f) / w, order)) / w**order
        return 1.0 - s if order == 0 else -s

    def active(self, t: float) -> list:
        return [i for i in range(len(self)) if self.rises[i] < t < self.falls[i] + self.width]

    def total(self, t: float, order: int = 0) -> float:
        return float(sum(self.value(i, t, order) for i in self.active(t)))

    def sampled(self, times, order: int = 0) -> np.ndarray:
        return np.array([[self.value(i, t, order) for t in times] for i in range(len(self))])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "centers": self.centers.tolist(),
            "intervals": self.intervals.tolist(),
            "supports": [list(self.support(i)) for i in range(len(self))],
            "ramp_width": self.width,
        }


def glue_cutoffs(t0: float, n: int, theta: float, tau: float, ramp: Optional[float] = None) -> Cutoffs:
    """Cutoffs ``eta_g^0..eta_g^n`` at nodes ``t_i = t0 + i theta`` with ramps centred in ``I_0..I_{n+1}``."""
    ramp = tau / 2 if ramp is None else ramp
    nodes = t0 + theta * np.arange(n + 1)
    c = t0 - theta / 2 + theta * np.arange(n + 2)
    edges = c - ramp / 2
    intervals = np.stack([c - tau / 2, c + tau / 2], axis=1)
    return Cutoffs("glue", nodes, intervals, edges[:-1].copy(), edges[1:].copy(), ramp)


def perturb_cutoffs(intervals: np.ndarray, tau: float, theta: float) -> Cutoffs:
    """Cutoffs equal to one on each ``I_i`` with ramps outside it.

    The ramp is ``tau`` when the gaps allow it and otherwise shrinks to keep
    supports disjoint.
    """
    intervals = np.asarray(intervals, dtype=float).reshape(-1, 2)
    if len(intervals) == 0:
        e = np.zeros(0)
        return Cutoffs("perturb", e, intervals, e, e, float(tau))
    gaps = intervals[1:, 0] - intervals[:-1, 1] if len(intervals) > 1 else np.array([np.inf])
    ramp = float(min(tau, 0.45 * max(theta - tau, 0.0), 0.45 * gaps.min()))
    if ramp <= 0:
        raise GuardError("perturbation cutoffs cannot be disjoint: intervals touch")
    mids = intervals.mean(axis=1)
    return Cutoffs("perturb", mids, intervals, intervals[:, 0] - ramp, intervals[:, 1].copy(), ramp)


# Pairs -----------------------------------------------------------------------------


def dealiased_outer(u: VectorField, w: Optional[VectorField] = None) -> SymTensorField:
    """Symmetrized product with the solver's 2/3 truncation."""
    h = _sym_outer_hat(u.data) if w is None else fft(u.outer(w).data)
    return SymTensorField(u.grid, ifft(h * u.grid.dealias_mask(), u.n), u.time_tag)


def product_divergence(u: VectorField, w: VectorField) -> VectorField:
    """``d_j (u_i w_j)`` with the dealiased product."""
    n = u.n
    mask = u.grid.dealias_mask()
    k = _wavenumbers(n)[:3]
    out = np.zeros((3,) + mask.shape, dtype=complex)
    for i in range(3):
        for j in range(3):
            out[i] += 1j * k[j] * fft(u.data[i] * w.data[j]) * mask
    return VectorField(u.grid, ifft(out, n), u.time_tag)


class _Cache:
    def __init__(self, size: int = CACHE_SLICES):
        self.size = size
        self.data = OrderedDict()

    def get(self, key, make):
        if key in self.data:
            self.data.move_to_end(key)
            return self.data[key]
        val = make()
        self.data[key] = val
        if len(self.data) > self.size:
            self.data.popitem(last=False)
        return val


class EulerReynoldsPair:
    """Lazy ``(v_q, R_q, p_q)`` on ``[0, T]``."""

    q: int
    params: SchemeParams
    grid: Grid
    mean_v: np.ndarray

    def __init__(self):
        self._vcache = _Cache()
        self._rcache = _Cache()

    @property
    def T(self) -> float:
        return float(self.params.T)

    def velocity(self, t: float) -> VectorField:
        return self._vcache.get(float(t), lambda: self._velocity(float(t)))

    def stress(self, t: float) -> SymTensorField:
        return self._rcache.get(float(t), lambda: self._stress(float(t)))

    def pressure(self, t: float) -> ScalarField:
        """Zero-mean pressure from the elliptic solve with the dealiased product."""
        v = self.velocity(t)
        F = dealiased_outer(v) - self.stress(t)
        from .calculus import pressure_hat

        return ScalarField(v.grid, ifft(pressure_hat(F.hat(), v.n), v.n)[None], t)

    def stress_support(self) -> list:
        """Open intervals outside which the stress vanishes identically by construction."""
        raise NotImplementedError

    def residual(self, t: float, h: float) -> float:
        """``||d_t v + div(v⊗v) + grad p - div R||_0`` at ``t`` with a centred stencil of half-width ``h``."""
        r = er_residual_slice(self.velocity(t - h), self.velocity(t), self.velocity(t + h), 2 * h,
                              self.stress(t), None)
        return float(np.sqrt(np.sum(r * r, axis=0)).max())

    def slabs(self, times) -> tuple:
        times = np.asarray(times, dtype=float)
        return (TimeSlab(times, [self.velocity(t) for t in times]),
                TimeSlab(times, [self.stress(t) for t in times]),
                TimeSlab(times, [self.pressure(t) for t in times]))


# Initial pair ----------------------------------------------------------------------


def initial_cutoff(s: float, T_in: float, order: int = 0) -> float:
    """One on ``[0, 2T/5]``, zero on ``[3T/5, T]``, quintic in between."""
    w = T_in / 5
    x = (s - 2 * T_in / 5) / w
    if order == 0:
        return float(1.0 - smoothstep(x))
    return float(-smoothstep(x, order)) / w**order


class InitialPair(EulerReynoldsPair):
    """``v_0^eps(t) = eps v_0(eps t)`` built from two Euler solutions."""

    def __init__(self, v1: TimeSlab, v2: TimeSlab, eps: float, params: SchemeParams):
        super().__init__()
        self.q = 0
        self.v1, self.v2 = v1, v2
        self.eps = float(eps)
        self.T_in = float(v1.times[-1])
        self.params = params
        self.grid = v1.slices[0].grid
        self.mean_v = self.eps * v1.slices[0].mean()

    def original(self, s: float) -> tuple:
        """``(v_0, R_0)`` at original time ``s``."""
        eta = initial_cutoff(s, self.T_in)
        a = self.v1.at(s)
        b = self.v2.at(s)
        if eta == 1.0:
            v = a
        elif eta == 0.0:
            v = b
        else:
            v = a * eta + b * (1 - eta)
        deta = initial_cutoff(s, self.T_in, 1)
        if deta == 0.0 and eta * (1 - eta) == 0.0:
            R = SymTensorField.zeros(self.grid)
        else:
            d = a - b
            R = inverse_divergence(d) * deta - dealiased_outer(d) * (eta * (1 - eta))
        return v, R

    def _scaled(self, t: float) -> float:
        # Clamp so rounding in eps * t never moves a time across the rescaled ramp ends.
        s = self.eps * t
        lo, hi = self.stress_support()[0]
        if t <= lo:
            s = min(s, 2 * self.T_in / 5)
        elif t >= hi:
            s = max(s, 3 * self.T_in / 5)
        return s

    def _velocity(self, t):
        v, _ = self.original(self._scaled(t))
        return VectorField(self.grid, self.eps * v.data, t)

    def _stress(self, t):
        _, R = self.original(self._scaled(t))
        return SymTensorField(self.grid, self.eps**2 * R.data, t)

    def stress_support(self) -> list:
        return [(2 * self.T_in / 5 / self.eps, 3 * self.T_in / 5 / self.eps)]


def epsilon_choice(params: SchemeParams, v0_sup: float, v0_c1: float, R0_sup: float) -> dict:
    """Rescaling factor from the three target bounds at ``q = 0``.

    ``paired`` matches the ``C^1`` target with ``||v_0||_1`` and the ``C^0``
    target with ``||v_0||_0``; ``literal`` uses the transposed pairing.
    """
    s0, s1 = scales(params, 0), scales(params, 1)
    lam0, d0, d1 = float(s0.lambda_q), float(s0.delta_q), float(s1.delta_q)
    M = params.M if params.M is not None else math.inf
    rbound = d1 * lam0 ** (-(params.gamma + 3 * params.alpha))
    c1bound = M * math.sqrt(d0) * lam0
    c0bound = 1 - math.sqrt(d0)
    ratio = lambda num, den: math.inf if den == 0 else num / den
    r_term = math.sqrt(ratio(rbound, R0_sup))
    paired = min(r_term, ratio(c1bound, v0_c1), ratio(c0bound, v0_sup))
    literal = min(r_term, ratio(c1bound, v0_sup), ratio(c0bound, v0_c1))
    return {"paired": paired, "literal": literal, "terms_paired": [r_term, ratio(c1bound, v0_c1), ratio(c0bound, v0_sup)],
            "terms_literal": [r_term, ratio(c1bound, v0_sup), ratio(c0bound, v0_c1)]}


def steady_slab(v: VectorField, T_in: float, count: int = 5) -> TimeSlab:
    """A steady solution sampled on ``[0, T_in]``."""
    times = np.linspace(0.0, T_in, count)
    return TimeSlab(times, [VectorField(v.grid, v.data, float(t)) for t in times])


def _initial_norms(v1: TimeSlab, v2: TimeSlab, samples: int = 41) -> dict:
    T_in = float(v1.times[-1])
    vs, v1s, rs = 0.0, 0.0, 0.0
    probe = InitialPair(v1, v2, 1.0, SchemeParams(0.1, 1.1, 0.01, 1e-4, 2.0, T_in))
    for s in np.linspace(0.0, T_in, samples):
        v, R = probe.original(float(s))
        vs = max(vs, v.sup())
        v1s = max(v1s, holder_norm(v, 1))
        rs = max(rs, R.sup())
    return {"v0_sup": vs, "v0_c1": v1s, "R0_sup": rs}


def make_initial_pair(v1: TimeSlab, v2: TimeSlab, params: SchemeParams, check_inputs: bool = True) -> tuple:
    """Glue two Euler solutions by a time cutoff and rescale.

    Parameters
    ----------
    v1, v2 : TimeSlab
        Solutions on the same original interval ``[0, T_in]``.
    params : SchemeParams
        ``M`` enters the rescaling factor; ``T`` is replaced by the rescaled
        horizon ``T_in / eps`` in the returned pair.

    Returns
    -------
    (InitialPair, BadSet, dict)
    """
    if not np.allclose(v1.times, v2.times, rtol=0, atol=1e-12):
        raise ValueError("input slabs must share their times")
    dm = float(np.max(np.abs(v1.slices[0].mean() - v2.slices[0].mean())))
    if dm > MEAN_TOL:
        raise MeansDifferError(f"means differ: |mean v1 - mean v2| = {dm:.3e}")
    res = {}
    if check_inputs:
        for name, s in (("v1", v1), ("v2", v2)):
            r = euler_reynolds_residual(s)
            res[name] = r
            if r > INPUT_RESIDUAL_TOL:
                raise NotEulerError(f"inputs not Euler: residual of {name} is {r:.3e} > {INPUT_RESIDUAL_TOL:g}")
    norms = _initial_norms(v1, v2)
    eps = epsilon_choice(params, **norms)
    e = eps["paired"]
    if not math.isfinite(e) or e <= 0:
        e = 1.0
    T_eff = float(v1.times[-1]) / e
    p = dataclasses.replace(params, T=T_eff)
    pair = InitialPair(v1, v2, e, p)
    report = {"eps": e, "eps_variants": eps, "T_in": float(v1.times[-1]), "T": T_eff,
              "input_residuals": res, **norms}
    return pair, BadSet.initial(T_eff), report


def initial_horizon(v1: VectorField, v2: VectorField, params: SchemeParams, iters: int = 60) -> float:
    """Original horizon ``T_in`` of steady inputs with ``T_in / eps(T_in) = params.T``.

    Only the cutoff derivative in ``R_0`` depends on ``T_in``, so the fixed
    point iteration contracts.
    """
    T_in = params.T
    for _ in range(iters):
        norms = _initial_norms(steady_slab(v1, T_in), steady_slab(v2, T_in))
        e = epsilon_choice(params, **norms)["paired"]
        e = 1.0 if not math.isfinite(e) or e <= 0 else e
        new = e * params.T
        if abs(new - T_in) <= 1e-14 * T_in:
            return new
        T_in = new
    return T_in


# Gluing ----------------------------------------------------------------------------


GLUE_BUDGET = 1.5e9
PHASE_BUDGET = 1.0e9


class LocalSolutions:
    """Local Euler solutions of one component, recomputed on demand.

    Only the mollified data at each node is kept permanently. Solutions are
    trimmed to the support of their cutoff and held in a cache sized by a
    byte budget; a miss re-solves deterministically, so values never change.
    """

    def __init__(self, inits: list, horizon: float, dt_out: float, windows: list, enforce: bool,
                 budget: float = GLUE_BUDGET):
        self.inits, self.horizon, self.dt_out, self.windows, self.enforce = inits, horizon, dt_out, windows, enforce
        per = 2 * inits[0].data.nbytes * (int(math.ceil(max(b - a for a, b in windows) / dt_out)) + 3)
        self._cache = _Cache(max(3, int(budget // max(per, 1))))
        self.solves = 0

    def __len__(self):
        return len(self.inits)

    def __getitem__(self, i: int) -> LocalSolution:
        return self._cache.get(i, lambda: self._solve(i))

    def _solve(self, i: int) -> LocalSolution:
        self.solves += 1
        v = self.inits[i]
        sol = solve_local(v, float(v.time_tag), self.horizon, dt_out=self.dt_out, enforce_horizon=self.enforce)
        return sol.trim(*self.windows[i])


@dataclass
class GlueComponent:
    J: tuple
    Jhat: tuple
    cutoffs: Cutoffs
    solutions: list
    horizon_ratio: float


class GluedPair(EulerReynoldsPair):
    """``v_bar = sum eta_g^i v_i + (1 - eta_g) v_q`` and the localized stress."""

    def __init__(self, base: EulerReynoldsPair, components: list, params: SchemeParams,
                 intervals: Optional[np.ndarray] = None):
        super().__init__()
        self.base = base
        self.components = components
        # Without components (vanishing stress) only the interval geometry is kept.
        self._intervals = intervals
        self.q = base.q
        self.params = params
        self.grid = base.grid
        self.mean_v = base.mean_v

    def _locate(self, t: float):
        for c in self.components:
            act = c.cutoffs.active(t)
            if act:
                return c, act
        return None, []

    def _velocity(self, t):
        c, act = self._locate(t)
        if c is None:
            return self.base.velocity(t)
        etas = [(i, c.cutoffs.value(i, t)) for i in act]
        if len(etas) == 1 and etas[0][1] == 1.0:
            v = c.solutions[etas[0][0]].velocity(t)
            return VectorField(self.grid, v.data, t)
        data = np.zeros((3,) + self.grid.shape)
        tot = 0.0
        for i, e in etas:
            data += e * c.solutions[i].velocity(t).data
            tot += e
        if tot != 1.0:
            data += (1.0 - tot) * self.base.velocity(t).data
        return VectorField(self.grid, data, t)

    def pressure_glued(self, t: float) -> ScalarField:
        """Pressure assembled from the local pressures with the glue cutoffs."""
        c, act = self._locate(t)
        if c is None:
            return self.base.pressure(t)
        data = np.zeros((1,) + self.grid.shape)
        tot = 0.0
        for i in act:
            e = c.cutoffs.value(i, t)
            data += e * c.solutions[i].pressure(t).data
            tot += e
        if tot != 1.0:
            data += (1.0 - tot) * self.base.pressure(t).data
        return ScalarField(self.grid, data, t)

    def _pieces(self, t):
        """``(eta, d_t eta, v_i - v_{i-1})`` on the ramp containing ``t``, else None."""
        c, act = self._locate(t)
        if c is None:
            return None
        cut = c.cutoffs
        n = len(cut) - 1
        for i in act:
            r, f, w = cut.rises[i], cut.falls[i], cut.width
            if r < t < r + w:
                # Rising ramp of eta^i sits in I_i.
                eta, deta = cut.value(i, t), cut.value(i, t, 1)
                prev = c.solutions[i - 1].velocity(t) if i > 0 else self.base.velocity(t)
                return eta, deta, c.solutions[i].velocity(t) - prev
            if i == n and f < t < f + w:
                eta, deta = cut.value(i, t), cut.value(i, t, 1)
                return eta, deta, c.solutions[n].velocity(t) - self.base.velocity(t)
        return None

    def _stress(self, t):
        pc = self._pieces(t)
        if pc is None:
            return SymTensorField.zeros(self.grid, t)
        eta, deta, d = pc
        # R(v_i - v_{i-1}) through the vector potentials.
        Rd = inverse_div_curl(biot_savart(d))
        out = Rd * deta - dealiased_outer(d) * (eta * (1 - eta))
        out.time_tag = t
        return out

    def stress_support(self) -> list:
        out = []
        for c in self.components:
            cut = c.cutoffs
            out += [(r, r + cut.width) for r in cut.rises]
            out.append((cut.falls[-1], cut.falls[-1] + cut.width))
        return merge(out)

    @property
    def degenerate(self) -> bool:
        return not self.components

    def I_intervals(self) -> np.ndarray:
        if self._intervals is not None:
            return self._intervals
        return np.concatenate([c.cutoffs.intervals for c in self.components]) if self.components else np.zeros((0, 2))


def _glue_mode(params: SchemeParams, q: int, mode: str) -> dict:
    rep = check_chain(params, q)
    chain_ok = rep.passed
    if mode == "strict" and not chain_ok:
        failed = [c.name for c in rep.checks if not c.passed]
        raise GuardError(f"scale chain fails at a = {params.a:g}: {failed}; structure-only mode required")
    return {"chain_passed": chain_ok, "effective_mode": "strict" if (mode == "strict") else "structure-only"}


def stress_vanishes(pair: EulerReynoldsPair, dt: float) -> bool:
    """True when the stress is identically zero on its support at spacing ``dt``."""
    for a, b in pair.stress_support():
        for t in np.linspace(a, b, max(2, int(math.ceil((b - a) / dt)) + 1)):
            if pair.stress(float(t)).sup() != 0.0:
                return False
    return True


def glue(pair: EulerReynoldsPair, badset: BadSet, mode: str = "structure-only",
         slices_per_tau: int = SLICES_PER_TAU) -> tuple:
    """Gluing and localization at step ``q``.

    Returns
    -------
    (GluedPair, BadSet, dict)
        The glued pair, the bad set at ``q + 1`` and a report.
    """
    params = pair.params
    q = pair.q
    info = _glue_mode(params, q, mode)
    sq, s1 = scales(params, q), scales(params, q + 1)
    tau_q = float(sq.tau_q)
    theta1, tau1, ell = float(s1.theta_q), float(s1.tau_q), float(sq.ell_q)
    if abs(badset.tau - tau_q) > 1e-12 * tau_q:
        raise PreconditionError(f"bad set carries tau = {badset.tau} but the scales give {tau_q}")
    real_bad = badset.real_bad()
    if not covers(real_bad, pair.stress_support(), slack=1e-12 * badset.T):
        raise PreconditionError("stress not supported in the real bad set")
    comps, next_intervals, geometry = [], [], []
    dt_out = tau1 / slices_per_tau
    horizon = 2 * theta1
    worst_ratio = 0.0
    degenerate = stress_vanishes(pair, dt_out)
    for J in badset.intervals:
        jh = [x for x in real_bad if J[0] <= x[0] and x[1] <= J[1]]
        if not jh:
            continue
        Jhat = jh[0]
        n = int(math.ceil((Jhat[1] - Jhat[0]) / theta1 - 1e-12))
        cut = glue_cutoffs(Jhat[0], n, theta1, tau1)
        geometry.append(cut.intervals)
        dil = [(a - 2 * tau1, b + 2 * tau1) for a, b in cut.intervals]
        next_intervals += intersect(dil, [J])
        if degenerate:
            continue
        inits = [VectorField(pair.grid, mollify(pair.velocity(float(ti)), ell).data, float(ti)) for ti in cut.centers]
        windows = [(lo - dt_out, hi + dt_out) for lo, hi in (cut.support(i) for i in range(len(cut)))]
        sols = LocalSolutions(inits, horizon, dt_out, windows, mode == "strict")
        for i in range(len(sols)):
            worst_ratio = max(worst_ratio, sols[i].horizon_ratio)
        comps.append(GlueComponent(tuple(J), tuple(Jhat), cut, sols, 0.0))
    I = np.concatenate(geometry) if geometry else np.zeros((0, 2))
    glued = GluedPair(pair, comps, params, intervals=I)
    nb = BadSet(q + 1, badset.T, tau1, next_intervals)
    report = {
        **info,
        "q": q,
        "degenerate": degenerate,
        "theta_next": theta1,
        "tau_next": tau1,
        "ell": ell,
        "n_nodes": [len(c.cutoffs) for c in comps],
        "horizon_ratio_max": worst_ratio,
        "measure_B": badset.measure,
        "measure_B_next": nb.measure,
        "shrink_bound": 10 * tau1 / theta1 * badset.measure,
        "property_iv": nb.measure <= 10 * tau1 / theta1 * badset.measure,
        "nested": covers(badset.intervals, nb.intervals, slack=1e-12 * badset.T),
        "nominal_lengths": all(abs((b - a) - 5 * tau1) <= 1e-9 * tau1 for a, b in nb.intervals),
    }
    return glued, nb, report


def glue_checks(glued: GluedPair, badset: BadSet, next_badset: BadSet, samples: int = 2001,
                residual_times: Optional[Sequence[float]] = None, residual_h: Optional[float] = None) -> dict:
    """Partition of unity, cutoff derivative scaling, support and good-set identities."""
    tau1 = next_badset.tau
    out = {"partition_error": 0.0, "derivative_scaled": {1: 0.0, 2: 0.0}}
    for c in glued.components:
        ts = np.linspace(c.Jhat[0], c.Jhat[1], samples)
        err = max(abs(c.cutoffs.total(float(t)) - 1.0) for t in ts)
        out["partition_error"] = max(out["partition_error"], err)
        lo, hi = c.cutoffs.support(0)[0], c.cutoffs.support(len(c.cutoffs) - 1)[1]
        for N in (1, 2):
            ts2 = np.linspace(lo, hi, 4 * samples)
            m = max(abs(c.cutoffs.value(i, float(t), N)) for t in ts2 for i in c.cutoffs.active(float(t)))
            out["derivative_scaled"][N] = max(out["derivative_scaled"][N], m * tau1**N)
        if out["partition_error"] > PARTITION_TOL:
            raise PartitionError(f"cutoff partition of unity violated: {out['partition_error']:.3e}")
    supp = glued.stress_support()
    I = glued.I_intervals()
    out["support_in_I"] = covers([tuple(x) for x in I], supp)
    # Good-set identity: same stored object, not a recomputation.
    gt = [t for a, b in badset.good() for t in np.linspace(a, b, 9)]
    out["good_set_identical"] = all(glued.velocity(t) is glued.base.velocity(t) for t in gt)
    # Stress vanishes off the ramps.
    off = []
    for c in glued.components:
        a, b = c.J
        for t in np.linspace(a, b, 257):
            if not contains(supp, float(t)):
                off.append(float(t))
    leak = max((glued.stress(t).sup() for t in off), default=0.0)
    peak = max((glued.stress(float(np.mean(x))).sup() for x in supp), default=0.0)
    out["leak"] = leak
    out["peak_stress"] = peak
    if peak > 0 and leak > LEAK_TOL * peak:
        raise SupportLeakError(f"support leakage: |R| = {leak:.3e} outside the I_i")
    out["near_good_zero"] = all(
        glued.stress(t).sup() == 0.0
        for t in off if next_badset.dist_to_good(t) <= 2 * tau1
    )
    if residual_times is not None:
        h = residual_h or tau1 * 1e-3
        out["residuals"] = [glued.residual(float(t), h) for t in residual_times]
        out["residual_max"] = max(out["residuals"], default=0.0)
    return out


def glue_residual_times(glued: GluedPair, per_ramp: int = 3) -> list:
    """Times across every stress ramp plus plateau midpoints."""
    ts = []
    for c in glued.components:
        cut = c.cutoffs
        edges = list(cut.rises) + [cut.falls[-1]]
        for r in edges:
            ts += [float(r + cut.width * (k + 1) / (per_ramp + 1)) for k in range(per_ramp)]
        for i in range(len(cut)):
            a, b = cut.plateau(i)
            ts.append(0.5 * (a + b))
    return sorted(ts)


# Perturbation ----------------------------------------------------------------------


def _phase_powers(u: np.ndarray, idx: np.ndarray, Lam: int) -> np.ndarray:
    """``exp(2 pi i Lam a u)`` for each ``a`` in ``idx``; shape ``(len(idx), P)``."""
    base = np.exp(2j * np.pi * Lam * u)
    out = np.empty((len(idx), u.size), dtype=complex)
    lo = int(idx.min())
    # Integer powers of the base phase, built by repeated multiplication from a = lo.
    cur = base ** lo
    pos = {int(a): k for k, a in enumerate(idx)}
    for a in range(lo, int(idx.max()) + 1):
        if a in pos:
            out[pos[a]] = cur
        cur = cur * base
    return out


@dataclass
class PipeSeries:
    """Truncated Fourier data of one pipe arranged on its ``(a, b)`` lattice."""

    a_vals: np.ndarray
    b_vals: np.ndarray
    coef: np.ndarray  # (4, na, nb): psi and the three potential components


def pipe_series(family: MikadoFamily, kmax: int) -> list:
    out = []
    for j in range(family.J):
        a, b, m, c = family.pipe_lattice_modes(j, kmax)
        av, bv = np.unique(a), np.unique(b)
        ia, ib = np.searchsorted(av, a), np.searchsorted(bv, b)
        C = np.zeros((4, len(av), len(bv)), dtype=complex)
        C[0, ia, ib] = c
        mm = m.astype(float)
        # Potential (i k x A)/|k|^2 with k = 2 pi m and A = c xi_j.
        pot = 1j * np.cross(mm, family.directions[j]) / (2 * np.pi * np.sum(mm * mm, axis=1))[:, None]
        for comp in range(3):
            C[1 + comp, ia, ib] = c * pot[:, comp]
        out.append(PipeSeries(av, bv, C))
    return out


@dataclass
class PhaseData:
    """Flow map of ``v_bar`` from the midpoint ``s`` of one ``I_i``."""

    s: float
    window: tuple
    tracer: FlowTracer
    nodes: np.ndarray
    maps: dict

    def displacement(self, t: float) -> np.ndarray:
        if t in self.maps:
            return self.maps[t]
        side = 1 if t >= self.s else -1
        cand = [x for x in self.nodes if (x - self.s) * side >= 0 and abs(x - self.s) <= abs(t - self.s)]
        t0 = max(cand, key=lambda x: abs(x - self.s)) if cand else self.s
        d0 = self.maps[t0] if t0 in self.maps else np.zeros((3,) + self.tracer.grid.shape)
        return self.tracer.advance(d0, t0, t)


class PhaseBuilder:
    """Traces the flow of ``v_bar`` from the midpoint of ``I_i`` across the support of cutoff ``i``.

    The slab nodes are symmetric about the midpoint and extend past the
    support by ``margin`` so difference stencils stay inside.
    """

    def __init__(self, glued: "GluedPair", cutoffs: Cutoffs, dt: float, margin: float):
        self.glued, self.cutoffs, self.dt, self.margin = glued, cutoffs, dt, margin

    def nbytes(self) -> int:
        """Rough size of one phase: velocity slices plus displacements."""
        if len(self.cutoffs) == 0:
            return 1
        width = max(b - a for a, b in (self.cutoffs.support(i) for i in range(len(self.cutoffs))))
        nodes = int(math.ceil((width + 2 * self.margin) / self.dt)) + 3
        return 2 * nodes * 3 * self.glued.grid.n ** 3 * 8

    def __call__(self, i: int) -> PhaseData:
        lo, hi = self.cutoffs.support(i)
        s = float(self.cutoffs.centers[i])
        half = int(math.ceil((max(hi - s, s - lo) + self.margin) / self.dt))
        times = s + self.dt * np.arange(-half, half + 1)
        slab = TimeSlab(times, [self.glued.velocity(float(t)) for t in times])
        tracer = FlowTracer(slab, s)
        maps = tracer.maps([float(t) for t in times])
        tracer.vel._interp.clear()
        return PhaseData(s, (lo, hi), tracer, times, {t: m.displacement.data for t, m in maps.items()})


class PerturbedPair(EulerReynoldsPair):
    """``v_{q+1} = v_bar + w`` with the stress of the perturbation step."""

    def __init__(self, glued: GluedPair, badset: BadSet, family: MikadoFamily, params: SchemeParams,
                 cutoffs: Cutoffs, phases: Callable, Lam: int, kmax: int, delta: float, fd_h: float,
                 enforce_ball: bool):
        super().__init__()
        self.glued = glued
        self.badset = badset
        self.family = family
        self.params = params
        self.cutoffs = cutoffs
        self._phase_builder = phases
        self._phases = _Cache(max(2, int(PHASE_BUDGET // phases.nbytes())))
        self.Lam = int(Lam)
        self.kmax = int(kmax)
        self.delta = float(delta)
        self.fd_h = float(fd_h)
        self.enforce_ball = enforce_ball
        self.q = glued.q + 1
        self.grid = glued.grid
        self.mean_v = glued.mean_v
        self.series = pipe_series(family, kmax)
        self._wcache = _Cache()
        self.guard_log = {"grad_phi_dev": 0.0, "ball_dev": 0.0, "min_gamma_sq": math.inf}

    # Building blocks -----------------------------------------------------------

    def phase(self, i: int) -> PhaseData:
        return self._phases.get(i, lambda: self._phase_builder(i))

    def _active(self, t: float):
        act = self.cutoffs.active(t)
        return act[0] if act else None

    def local_state(self, i: int, t: float) -> dict:
        """Map, its gradient, the rescaled stress and coefficients at ``t`` for cutoff ``i``."""
        ph = self.phase(i)
        d = ph.displacement(t)
        G = gradient_of_map(VectorField(self.grid, d))
        Id = np.eye(3)[:, :, None, None, None]
        Rbar = self.glued.stress(t).full()
        Rt = np.einsum("ab...,bc...,dc...->ad...", G, self.delta * Id - Rbar, G) / self.delta
        dev = G - Id
        gdev = float(np.linalg.norm(np.moveaxis(dev, (0, 1), (-2, -1)), ord=2, axis=(-2, -1)).max())
        bdev = float(np.sqrt(np.sum((Rt - Id) ** 2, axis=(0, 1))).max())
        g2 = self.family.gamma_sq(np.moveaxis(Rt, (0, 1), (-2, -1)))
        log = self.guard_log
        log["grad_phi_dev"] = max(log["grad_phi_dev"], gdev)
        log["ball_dev"] = max(log["ball_dev"], bdev)
        log["min_gamma_sq"] = min(log["min_gamma_sq"], float(g2.min()))
        if gdev > 0.5:
            raise GuardError(f"flow-map guard: ||grad Phi - Id||_0 = {gdev:.3f} > 1/2 at t = {t:.6g}")
        if g2.min() <= 0:
            raise PositivityError(f"stress guard: Gamma^2 = {g2.min():.3e} <= 0 at t = {t:.6g}")
        if self.enforce_ball and bdev > self.family.nbhd_radius:
            raise GuardError(f"stress guard: rescaled stress leaves the Mikado ball, "
                             f"|R - Id| = {bdev:.3f} > {self.family.nbhd_radius}")
        return {"d": d, "G": G, "Rt": Rt, "gamma": np.sqrt(np.moveaxis(g2, -1, 0))}

    def _series(self, d: np.ndarray):
        """Per pipe ``(psi, U)`` of the truncated series at ``Lam Phi``; arrays over the grid."""
        x = self.grid.coords()
        Phi = (x + d).reshape(3, -1)
        out = []
        for j, ser in enumerate(self.series):
            u = self.family.L[j].astype(float) @ Phi
            w = self.family.E[j].astype(float) @ Phi
            Ea = _phase_powers(u, ser.a_vals, self.Lam)
            Eb = _phase_powers(w, ser.b_vals, self.Lam)
            na, nb = len(ser.a_vals), len(ser.b_vals)
            S = (ser.coef.reshape(4 * na, nb) @ Eb).reshape(4, na, -1)
            vals = np.real(np.einsum("cap,ap->cp", S, Ea)).reshape((4,) + self.grid.shape)
            out.append((vals[0], vals[1:]))
        return out

    def w_parts(self, t: float) -> dict:
        """``w`` by the curl form and the principal part ``w_o``; zero off the cutoffs."""
        def make():
            i = self._active(t)
            if i is None:
                return None
            st = self.local_state(i, t)
            amp = self.cutoffs.value(i, t) * math.sqrt(self.delta)
            G = st["G"]
            pot = np.zeros((3,) + self.grid.shape)
            Wsum = np.zeros((3,) + self.grid.shape)
            for j, (psi, U) in enumerate(self._series(st["d"])):
                g = st["gamma"][j]
                pot += g * U
                Wsum += (g * psi)[None] * self.family.directions[j][:, None, None, None]
            # grad Phi^T U, then the curl form.
            A = np.einsum("ba...,b...->a...", G, pot) * amp
            w = curl(VectorField(self.grid, A)).data / self.Lam
            Ginv = np.moveaxis(np.linalg.inv(np.moveaxis(G, (0, 1), (-2, -1))), (-2, -1), (0, 1))
            wo = amp * np.einsum("ab...,b...->a...", Ginv, Wsum)
            return {"i": i, "w": VectorField(self.grid, w, t), "wo": VectorField(self.grid, wo, t),
                    "state": st, "amp": amp}
        return self._wcache.get(float(t), make)

    def w(self, t: float) -> VectorField:
        p = self.w_parts(t)
        return VectorField.zeros(self.grid, t) if p is None else p["w"]

    def dt_w(self, t: float, h: Optional[float] = None) -> tuple:
        """Centred difference of ``w`` with Richardson check; returns ``(dw, rel_change)``."""
        h = self.fd_h if h is None else h
        d1 = (self.w(t + h).data - self.w(t - h).data) / (2 * h)
        d2 = (self.w(t + 2 * h).data - self.w(t - 2 * h).data) / (4 * h)
        scale = max(np.abs(d1).max(), 1e-300)
        return VectorField(self.grid, (4 * d1 - d2) / 3, t), float(np.abs(d1 - d2).max() / scale)

    # Pair interface --------------------------------------------------------------

    def _velocity(self, t):
        if self._active(t) is None:
            return self.glued.velocity(t)
        v = self.glued.velocity(t) + self.w(t)
        v.time_tag = t
        return v

    def stress_components(self, t: float) -> dict:
        vb = self.glued.velocity(t)
        Rb = self.glued.stress(t)
        if self._active(t) is None:
            return {"total": Rb}
        w = self.w(t)
        dw, rich = self.dt_w(t)
        nash = inverse_divergence(product_divergence(vb, w), check_mean=False)
        transp = inverse_divergence(dw + product_divergence(w, vb), check_mean=False)
        T = Rb + dealiased_outer(w)
        osc = SymTensorField(self.grid, ifft(_rdiv_hat(T.hat(), self.grid.n), self.grid.n), t)
        total = nash + transp + osc
        total.time_tag = t
        return {"total": total, "nash": nash, "transp": transp, "osc": osc, "richardson": rich}

    def _stress(self, t):
        return self.stress_components(t)["total"]

    def pressure(self, t: float) -> ScalarField:
        return self.glued.pressure(t)

    def stress_support(self) -> list:
        return merge([self.cutoffs.support(i) for i in range(len(self.cutoffs))])


def _rdiv_hat(Th: np.ndarray, n: int) -> np.ndarray:
    from .calculus import inverse_divergence_hat

    return inverse_divergence_hat(tensor_div_hat(Th, n), n)


def perturb(glued: GluedPair, badset: BadSet, family: MikadoFamily, mode: str = "structure-only",
            kmax: Optional[int] = None, slices_per_tau: int = 32) -> tuple:
    """Perturbation step producing ``(v_{q+1}, R_{q+1}, p_{q+1})`` as a lazy pair.

    Returns
    -------
    (PerturbedPair, dict)
    """
    params = glued.params
    q = glued.q
    s1 = scales(params, q + 1)
    lam, delta, tau1, theta1 = float(s1.lambda_q), float(s1.delta_q), float(s1.tau_q), float(s1.theta_q)
    Lam = int(round(lam / (2 * math.pi)))
    n = glued.grid.n
    if kmax is None:
        kmax = (n // 2 - 1) // Lam
    if kmax < 1 or Lam * kmax >= n // 2:
        raise NyquistError(f"Nyquist guard: lambda/(2 pi) * kmax = {Lam * max(kmax, 1)} >= n/2 = {n // 2}")
    I = glued.I_intervals()
    cut = perturb_cutoffs(np.zeros((0, 2)) if glued.degenerate else I, tau1, theta1)
    v1 = max((holder_norm(glued.velocity(float(np.mean(x))), 1) for x in I), default=0.0)
    fd_h = 1e-3 / (lam * (1 + v1))
    builder = PhaseBuilder(glued, cut, tau1 / slices_per_tau, 4 * fd_h)
    pair = PerturbedPair(glued, badset, family, params, cut, builder, Lam, kmax, delta, fd_h,
                         enforce_ball=(mode == "strict"))
    # Guards over the slab nodes inside each support.
    for i in range(len(cut)):
        ph = pair.phase(i)
        for t in ph.nodes:
            if ph.window[0] < t < ph.window[1]:
                pair.local_state(i, float(t))
    report = {
        "q_next": q + 1,
        "lambda": lam,
        "Lambda": Lam,
        "delta": delta,
        "kmax": kmax,
        "parseval_share": float(family.parseval_share(kmax).min()),
        "fd_h": fd_h,
        "cutoff_ramp": cut.width,
        "n_cutoffs": len(cut),
        "guards": dict(pair.guard_log),
        "ball_ratio": pair.guard_log["ball_dev"] / 0.5,
        "ball_ratio_family": pair.guard_log["ball_dev"] / family.nbhd_radius,
    }
    return pair, report


def perturb_checks(pair: PerturbedPair, times: Sequence[float], M: Optional[float] = None,
                   residual_h: Optional[float] = None) -> dict:
    """Identities of the perturbation step at sample times inside the cutoff supports."""
    delta = pair.delta
    fam = pair.family
    out = {"div_w": 0.0, "osc_two_scale": 0.0, "osc_truncated": 0.0, "wo_sup": 0.0, "w_sup": 0.0,
           "w_c1_scaled": 0.0, "phase_residual": 0.0, "dt_wo_crosscheck": 0.0, "richardson": 0.0,
           "residual": 0.0, "R_sup": 0.0, "nash": 0.0, "transp": 0.0, "osc": 0.0, "mean_w": 0.0}
    lam = 2 * math.pi * pair.Lam
    ms = fam.mean_sq
    share = np.array([np.sum(np.abs(s.coef[0]) ** 2) for s in pair.series]) / ms
    for t in times:
        t = float(t)
        parts = pair.w_parts(t)
        if parts is None:
            continue
        w, wo, st, amp = parts["w"], parts["wo"], parts["state"], parts["amp"]
        from .euler import divergence_sup

        out["div_w"] = max(out["div_w"], divergence_sup(w))
        out["mean_w"] = max(out["mean_w"], float(np.abs(w.mean()).max()))
        out["wo_sup"] = max(out["wo_sup"], wo.sup())
        out["w_sup"] = max(out["w_sup"], w.sup())
        out["w_c1_scaled"] = max(out["w_c1_scaled"], w.sup() + holder_norm(w, 1) / lam)
        # Mode zero in the fast variable: sum_j gamma_j^2 <psi_j^2> xi_j⊗xi_j pulled back by grad Phi^{-1}.
        G = st["G"]
        Ginv = np.moveaxis(np.linalg.inv(np.moveaxis(G, (0, 1), (-2, -1))), (-2, -1), (0, 1))
        g2 = st["gamma"] ** 2
        D = fam.directions
        target = amp**2 * (delta * np.eye(3)[:, :, None, None, None] - pair.glued.stress(t).full())
        for weights, key in ((ms, "osc_two_scale"), (ms * share, "osc_truncated")):
            S = np.einsum("j...,j,ja,jb->ab...", g2, weights, D, D)
            m0 = amp**2 * delta * np.einsum("ab...,bc...,dc...->ad...", Ginv, S, Ginv)
            out[key] = max(out[key], float(np.abs(m0 - target).max()))
        # Phase invariance along the flow of the velocity the maps were traced with.
        ph = pair.phase(parts["i"])
        hp = 1e-3 * ph.tracer.vel.slab.dt
        dp = (ph.displacement(t + hp) - ph.displacement(t - hp)) / (2 * hp)
        vel = ph.tracer.vel.sample(t, np.zeros((3,) + pair.grid.shape))
        dgrad = gradient_of_map(VectorField(pair.grid, st["d"]))
        adv = np.einsum("ab...,b...->a...", dgrad, vel)
        vmax = max(float(np.abs(vel).max()), 1e-300)
        out["phase_residual"] = max(out["phase_residual"], float(np.abs(dp + adv).max()) / vmax)
        comps = pair.stress_components(t)
        out["richardson"] = max(out["richardson"], comps["richardson"])
        for k in ("nash", "transp", "osc"):
            out[k] = max(out[k], comps[k].sup())
        out["R_sup"] = max(out["R_sup"], comps["total"].sup())
        out["dt_wo_crosscheck"] = max(out["dt_wo_crosscheck"], dt_wo_crosscheck(pair, t))
        if residual_h is not None:
            out["residual"] = max(out["residual"], pair.residual(t, residual_h))
    out["osc_tolerance"] = 1e-3 * delta
    supp = pair.stress_support()
    out["support_in_real_bad"] = covers(pair.badset.real_bad(), supp)
    gaps = [t for t in np.linspace(0.0, pair.T, 513) if not contains(supp, float(t))]
    out["zero_off_support"] = all(pair.velocity(float(t)) is pair.glued.velocity(float(t)) for t in gaps)
    if M is not None:
        out["wo_bound"] = M / 32 * math.sqrt(delta)
        out["w_bound"] = M / 2 * math.sqrt(delta)
    out["parseval_share"] = float(share.min())
    return out


def dt_wo_crosscheck(pair: PerturbedPair, t: float) -> float:
    """Relative gap between the difference quotient of ``w_o`` and its material-derivative formula.

    Along the flow the phases are constant, ``D_t grad Phi = -grad Phi grad v``
    and ``D_t grad Phi^{-1} = grad v grad Phi^{-1}``; the rest is chain rule.
    """
    parts = pair.w_parts(t)
    if parts is None:
        return 0.0
    h = pair.fd_h
    wp, wm = pair.w_parts(t + h), pair.w_parts(t - h)
    if wp is None or wm is None:
        return 0.0
    fd = (wp["wo"].data - wm["wo"].data) / (2 * h)
    st = parts["state"]
    i = parts["i"]
    vb = pair.glued.velocity(t)
    Dv = gradient_tensor(vb)
    G = st["G"]
    Ginv = np.moveaxis(np.linalg.inv(np.moveaxis(G, (0, 1), (-2, -1))), (-2, -1), (0, 1))
    delta = pair.delta
    Id = np.eye(3)[:, :, None, None, None]
    Rb = pair.glued.stress(t).full()
    dRb = (pair.glued.stress(t + h).full() - pair.glued.stress(t - h).full()) / (2 * h)
    adv = lambda F: np.einsum("c...,...c->...", vb.data, np.stack(
        [ifft(1j * _wavenumbers(pair.grid.n)[c] * fft(F), pair.grid.n) for c in range(3)], axis=-1))
    DRb = dRb + np.stack([np.stack([adv(Rb[a, b]) for b in range(3)]) for a in range(3)])
    DG = -np.einsum("ab...,bc...->ac...", G, Dv)
    A = delta * Id - Rb
    DRt = (np.einsum("ab...,bc...,dc...->ad...", DG, A, G) + np.einsum("ab...,bc...,dc...->ad...", G, A, DG)
           - np.einsum("ab...,bc...,dc...->ad...", G, DRb, G)) / delta
    Dg2 = np.moveaxis(pair.family.gamma_sq(np.moveaxis(DRt, (0, 1), (-2, -1))), -1, 0)
    gam = st["gamma"]
    Dgam = Dg2 / (2 * gam)
    amp = parts["amp"]
    damp = pair.cutoffs.value(i, t, 1) * math.sqrt(delta)
    ser = pair._series(st["d"])
    Wsum = np.zeros((3,) + pair.grid.shape)
    DWsum = np.zeros((3,) + pair.grid.shape)
    for j, (psi, _) in enumerate(ser):
        Wsum += (gam[j] * psi)[None] * pair.family.directions[j][:, None, None, None]
        DWsum += (Dgam[j] * psi)[None] * pair.family.directions[j][:, None, None, None]
    DGinv = np.einsum("ab...,bc...->ac...", Dv, Ginv)
    Dwo = (damp * np.einsum("ab...,b...->a...", Ginv, Wsum)
           + amp * np.einsum("ab...,b...->a...", DGinv, Wsum)
           + amp * np.einsum("ab...,b...->a...", Ginv, DWsum))
    wo = parts["wo"].data
    analytic = Dwo - np.stack([adv(wo[a]) for a in range(3)])
    return float(np.abs(analytic - fd).max() / max(np.abs(fd).max(), 1e-300))


# Inductive verification ---------------------------------------------------------------


@dataclass
class InductiveReport:
    q: int
    estimates: dict
    properties: dict
    structural_passed: bool
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"q": self.q, "estimates": self.estimates, "properties": self.properties,
                "structural_passed": self.structural_passed, "extras": self.extras}


def sample_times(pair: EulerReynoldsPair, badset: BadSet, count: int = 33, per_support: int = 3) -> list:
    """Uniform times on ``[0, T]`` plus points inside every stress-support interval."""
    ts = list(np.linspace(0.0, pair.T, count))
    for a, b in pair.stress_support():
        ts += list(a + (b - a) * (np.arange(per_support) + 0.5) / per_support)
    return sorted(float(t) for t in ts)


def _ratio(val, bound):
    return float(val / bound) if bound > 0 else math.inf


def verify_inductive(pair: EulerReynoldsPair, badset: BadSet, history: Sequence[tuple] = (),
                     times: Optional[Sequence[float]] = None, residual_h: Optional[float] = None) -> InductiveReport:
    """Estimates and properties of ``(pair, badset)`` at level ``q``.

    ``history`` lists earlier ``(pair, badset)`` levels for the nesting and
    good-set identity properties.
    """
    params = pair.params
    q = pair.q
    sq, s1 = scales(params, q), scales(params, q + 1)
    lam, dq, d1 = float(sq.lambda_q), float(sq.delta_q), float(s1.delta_q)
    M = params.M if params.M is not None else math.inf
    times = sample_times(pair, badset) if times is None else list(times)
    Rs = max(pair.stress(t).sup() for t in times)
    v0 = max(pair.velocity(t).sup() for t in times)
    v1 = max(holder_norm(pair.velocity(t), 1) for t in times)
    bR = d1 * lam ** (-(params.gamma + 3 * params.alpha))
    est = {
        "R_C0": {"value": Rs, "bound": bR, "ratio": _ratio(Rs, bR)},
        "v_C1": {"value": v1, "bound": M * math.sqrt(dq) * lam, "ratio": _ratio(v1, M * math.sqrt(dq) * lam)},
        "v_C0": {"value": v0, "bound": 1 - math.sqrt(dq), "ratio": _ratio(v0, 1 - math.sqrt(dq))},
    }
    props = {}
    T = pair.T
    chain = [b for _, b in history] + [badset]
    if chain[0].q == 0:
        g0 = chain[0].good()
        props["i"] = {"pass": len(g0) == 2 and np.allclose(g0, [(0, T / 3), (2 * T / 3, T)], rtol=0, atol=1e-12 * T)}
    nested = all(covers(a.intervals, b.intervals, slack=1e-12 * T) for a, b in zip(chain, chain[1:]))
    props["ii"] = {"pass": nested}
    lengths = [b - a for a, b in badset.intervals]
    props["iii"] = {"pass": True, "disjoint_open": True, "lengths": lengths, "nominal": 5 * badset.tau,
                    "nominal_lengths": all(abs(x - 5 * badset.tau) <= 1e-9 * badset.tau for x in lengths)}
    if q >= 1 and len(chain) >= 2:
        th = float(sq.theta_q)
        bound = 10 * badset.tau / th * chain[-2].measure
        props["iv"] = {"pass": badset.measure <= bound, "measure": badset.measure, "bound": bound}
    same = True
    for prev, pb in history:
        for a, b in pb.good():
            for t in np.linspace(a, b, 5):
                if not np.array_equal(pair.velocity(float(t)).data, prev.velocity(float(t)).data):
                    same = False
    props["v"] = {"pass": same, "levels": len(history)}
    rb = badset.real_bad()
    off = [t for t in times if not contains(rb, t)]
    leak = max((pair.stress(t).sup() for t in off), default=0.0)
    props["vi"] = {"pass": leak == 0.0 and covers(rb, pair.stress_support(), slack=1e-12 * T), "max_off": leak}
    if q >= 1:
        sp = scales(params, q - 1)
        ratios = {}
        for N in (1, 2):
            val = max((holder_norm(pair.velocity(t), N + 1) for t in off[:: max(1, len(off) // 8)]), default=0.0)
            b = math.sqrt(float(sp.delta_q)) * float(sp.lambda_q) * float(sp.ell_q) ** (-N)
            ratios[N] = _ratio(val, b)
        props["vii"] = {"pass": True, "ratios": ratios}
    if history:
        prev = history[-1][0]
        lam_q = lam
        diffs = [(pair.velocity(t) - prev.velocity(t)) for t in times]
        d0 = max(d.sup() for d in diffs)
        d1n = max(holder_norm(d, 1) for d in diffs)
        val = d0 + d1n / lam_q
        est["increment"] = {"value": val, "bound": M * math.sqrt(dq), "ratio": _ratio(val, M * math.sqrt(dq))}
    extras = {}
    if residual_h is not None:
        extras["residual"] = max(pair.residual(t, residual_h) for t in times if residual_h < t < T - residual_h)
    structural = all(p["pass"] for p in props.values())
    return InductiveReport(q, est, props, structural, extras)


# Iteration -------------------------------------------------------------------------------


def step_once(pair: EulerReynoldsPair, badset: BadSet, family: MikadoFamily, mode: str = "structure-only") -> tuple:
    glued, nb, grep = glue(pair, badset, mode)
    new, prep = perturb(glued, nb, family, mode)
    return glued, new, nb, {"glue": grep, "perturb": prep}


def iterate(pair: EulerReynoldsPair, badset: BadSet, family: MikadoFamily, steps: int,
            mode: str = "structure-only", callback: Optional[Callable] = None) -> list:
    """Chain gluing and perturbation ``steps`` times.

    Returns the list of ``(pair, badset, reports)`` levels starting with the
    input. Guard faults propagate.
    """
    if steps > 3:
        raise ValueError("steps must be at most 3 at desk scale")
    levels = [(pair, badset, {})]
    for _ in range(steps):
        p, b, _ = levels[-1]
        glued, new, nb, rep = step_once(p, b, family, mode)
        rep["glued"] = glued
        levels.append((new, nb, rep))
        if callback is not None:
            callback(levels)
    return levels
