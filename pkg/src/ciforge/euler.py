"""Pseudo-spectral Euler solver, local solutions, flow maps and transport.

The solver advances Leray-projected Fourier coefficients with classical RK4
and a 2/3 dealiasing mask on the quadratic term. Flow maps are traced along
characteristics; off-grid velocity samples use a Taylor expansion of the
trigonometric interpolant about each node, which is exact to round-off for
the small per-step displacements used here.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from .calculus import (
    div_hat,
    gradient_of_map,
    leray_hat,
    pressure_hat,
    tensor_div_hat,
)
from .fields import (
    SYM_INDEX,
    Field,
    Grid,
    ScalarField,
    SymTensorField,
    TimeSlab,
    VectorField,
    _wavenumbers,
    fft,
    holder_norm,
    holder_seminorm,
    ifft,
    multi_indices,
)

CFL = 0.5
BLOWUP_FACTOR = 1e3


class CFLError(RuntimeError):
    """Time step exceeds the CFL limit."""


class BlowUpError(RuntimeError):
    """Velocity gradient grew beyond the guard factor within a slab."""


class HorizonError(RuntimeError):
    """Local-solve horizon exceeds the short-time existence proxy."""


class FlowMapHypothesisError(RuntimeError):
    """``|t - s| ||v||_1 > 1`` for a requested flow map."""


@dataclass
class EulerState:
    v: VectorField
    t: float
    p: Optional[ScalarField] = None


# Right-hand side -------------------------------------------------------------


def _sym_outer_hat(v: np.ndarray) -> np.ndarray:
    d = np.empty((6,) + v.shape[1:])
    for c, (i, j) in enumerate(SYM_INDEX):
        d[c] = v[i] * v[j]
    return fft(d)


def rhs_hat(vh: np.ndarray, n: int, mask: np.ndarray) -> np.ndarray:
    """``-P div(v⊗v)`` with the quadratic term dealiased."""
    v = ifft(vh, n)
    F = _sym_outer_hat(v) * mask
    return -leray_hat(tensor_div_hat(F, n), n)


def grad_sup(vh: np.ndarray, n: int) -> float:
    """``max_{i,j} sup |d_j v_i|`` (the discrete ``[v]_1`` on components)."""
    k = _wavenumbers(n)[:3]
    best = 0.0
    for i in range(3):
        for j in range(3):
            best = max(best, float(np.abs(ifft(1j * k[j] * vh[i], n)).max()))
    return best


def cfl_limit(v: VectorField, cfl: float = CFL) -> float:
    vmax = v.sup()
    return math.inf if vmax == 0 else cfl * v.grid.spacing / vmax


def step(
    state: EulerState,
    dt: float,
    cfl: float = CFL,
    reference_grad: Optional[float] = None,
) -> EulerState:
    """One RK4 step of the projected spectral Euler equations.

    Parameters
    ----------
    state : EulerState
    dt : float
        Signed step; negative values integrate backward in time.
    cfl : float
        CFL number; ``|dt| <= cfl * spacing / ||v||_0`` is enforced.
    reference_grad : float, optional
        ``[v]_1`` at the start of the slab; the blow-up guard fires if the
        new gradient exceeds ``BLOWUP_FACTOR`` times this value.
    """
    v = state.v
    n = v.n
    lim = cfl_limit(v, cfl)
    if abs(dt) > lim * (1 + 1e-12):
        raise CFLError(f"|dt|={abs(dt):.3e} exceeds CFL limit {lim:.3e}")
    mask = v.grid.dealias_mask()
    vh = v.hat()
    k1 = rhs_hat(vh, n, mask)
    k2 = rhs_hat(vh + 0.5 * dt * k1, n, mask)
    k3 = rhs_hat(vh + 0.5 * dt * k2, n, mask)
    k4 = rhs_hat(vh + dt * k3, n, mask)
    new = vh + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    new[:, 0, 0, 0] = vh[:, 0, 0, 0]
    out = EulerState(VectorField(v.grid, ifft(new, n), state.t + dt), state.t + dt)
    if reference_grad is not None and reference_grad > 0:
        g = grad_sup(new, n)
        if g > BLOWUP_FACTOR * reference_grad:
            raise BlowUpError(
                f"short-time existence guard: [v]_1 grew to {g:.3e} > {BLOWUP_FACTOR:g} x initial {reference_grad:.3e}"
            )
    return out


def pressure_of(v: VectorField) -> ScalarField:
    return ScalarField(v.grid, ifft(pressure_hat(_sym_outer_hat(v.data), v.n), v.n)[None], v.time_tag)


# Local solutions ---------------------------------------------------------------


@dataclass
class LocalSolution:
    """Exact local solution sampled on a uniform slab with cubic Hermite interpolation in time."""

    t0: float
    slab: TimeSlab
    rhs: list
    growth: dict
    horizon_ratio: float
    diagnostics: dict = field(default_factory=dict)

    def velocity(self, t: float) -> VectorField:
        times = self.slab.times
        if t < times[0] - 1e-12 or t > times[-1] + 1e-12:
            raise ValueError(f"time {t} outside local solution [{times[0]}, {times[-1]}]")
        h = self.slab.dt
        s = (t - times[0]) / h
        i = int(min(max(math.floor(s), 0), len(times) - 2))
        u = s - i
        if u <= 0.0:
            return self.slab.slices[i]
        if u >= 1.0:
            return self.slab.slices[i + 1]
        a, b = self.slab.slices[i].data, self.slab.slices[i + 1].data
        da, db = self.rhs[i], self.rhs[i + 1]
        h00 = 2 * u**3 - 3 * u**2 + 1
        h10 = u**3 - 2 * u**2 + u
        h01 = -2 * u**3 + 3 * u**2
        h11 = u**3 - u**2
        data = h00 * a + h10 * h * da + h01 * b + h11 * h * db
        return VectorField(self.slab.slices[0].grid, data, t)

    def pressure(self, t: float) -> ScalarField:
        p = pressure_of(self.velocity(t))
        p.time_tag = t
        return p

    def trim(self, lo: float, hi: float) -> "LocalSolution":
        """Keep the stored slices whose cells meet ``[lo, hi]``; values are unchanged."""
        times = self.slab.times
        i0 = max(0, int(np.searchsorted(times, lo, side="right")) - 1)
        i1 = min(len(times), int(np.searchsorted(times, hi, side="left")) + 1)
        i1 = max(i1, i0 + 2)
        return LocalSolution(self.t0, TimeSlab(times[i0:i1], self.slab.slices[i0:i1]), self.rhs[i0:i1],
                             self.growth, self.horizon_ratio, self.diagnostics)

    @property
    def nbytes(self) -> int:
        return sum(s.data.nbytes for s in self.slab.slices) + sum(r.nbytes for r in self.rhs)


def solve_local(
    v0: VectorField,
    t0: float,
    horizon: float,
    dt_out: Optional[float] = None,
    alpha: float = 0.5,
    enforce_horizon: bool = True,
    cfl: float = CFL,
) -> LocalSolution:
    """Solve Euler from ``v0`` at ``t0`` on ``[t0 - horizon, t0 + horizon]``.

    Parameters
    ----------
    dt_out : float, optional
        Spacing of stored slices; defaults to ``horizon / 8``.
    enforce_horizon : bool
        Raise :class:`HorizonError` if ``horizon > 0.1 / ||v0||_{1+alpha}``.
        When False the ratio is only recorded.
    """
    g = v0.grid
    norm1a = holder_norm(v0, 1 + alpha)
    limit = math.inf if norm1a == 0 else 0.1 / norm1a
    ratio = horizon / limit if limit < math.inf else 0.0
    if enforce_horizon and ratio > 1:
        raise HorizonError(
            f"short-time existence proxy: horizon {horizon:.4g} > 0.1/||v0||_(1+α) = {limit:.4g}"
        )
    if dt_out is None:
        dt_out = horizon / 8 if horizon > 0 else 1.0
    n_side = max(1, int(math.ceil(horizon / dt_out - 1e-9)))
    dt_out = horizon / n_side if horizon > 0 else dt_out
    mask = g.dealias_mask()
    ref_grad = grad_sup(v0.hat(), g.n)
    base = [holder_norm(v0, N + alpha) for N in (1, 2)]
    v0 = VectorField(g, v0.data, t0)
    fwd, bwd = [v0], []
    for sign, store in ((1.0, fwd), (-1.0, bwd)):
        state = EulerState(v0, t0)
        for _ in range(n_side):
            if horizon == 0:
                break
            lim = cfl_limit(state.v, cfl)
            nsub = max(1, int(math.ceil(dt_out / lim - 1e-12))) if lim < math.inf else 1
            for _ in range(nsub):
                state = step(state, sign * dt_out / nsub, cfl, ref_grad)
            store.append(state.v)
    slices = list(reversed(bwd)) + fwd
    times = t0 + dt_out * np.arange(-len(bwd), len(fwd))
    for s, t in zip(slices, times):
        s.time_tag = float(t)
    rhs = [ifft(rhs_hat(s.hat(), g.n, mask), g.n) for s in slices]
    growth = {}
    for N, b in zip((1, 2), base):
        vals = [holder_norm(s, N + alpha) for s in (slices[0], slices[len(bwd)], slices[-1])]
        growth[N] = max(vals) / b if b > 0 else (0.0 if max(vals) == 0 else math.inf)
    return LocalSolution(t0, TimeSlab(times, slices), rhs, growth, ratio)


def solve_many(jobs: Sequence[dict], max_workers: int = 1) -> list:
    """Run independent :func:`solve_local` calls, optionally in a thread pool.

    Results are returned in job order regardless of completion order.
    """
    if max_workers <= 1:
        return [solve_local(**j) for j in jobs]
    with ThreadPoolExecutor(max_workers=max_workers) as ex:
        return list(ex.map(lambda j: solve_local(**j), jobs))


# Off-grid evaluation -------------------------------------------------------------


def trig_eval_exact(f: Field, points: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Evaluate the trigonometric interpolant of ``f`` at ``points`` (shape ``(3, P)``).

    Direct separable sum; Nyquist modes are dropped. Intended for tests at
    small ``n``.
    """
    n = f.n
    ch = np.fft.fftn(f.data, axes=(1, 2, 3)) / n**3
    m = np.fft.fftfreq(n, 1.0 / n)
    keep = np.abs(m) < n // 2
    ch = ch[:, keep][:, :, keep][:, :, :, keep]
    m = m[keep]
    P = points.shape[1]
    out = np.empty((f.NCOMP, P))
    for s in range(0, P, chunk):
        x = points[:, s : s + chunk]
        e = [np.exp(2j * np.pi * np.outer(x[a], m)) for a in range(3)]
        t = np.einsum("cabz,pz->cpab", ch, e[2])
        t = np.einsum("cpab,pb->cpa", t, e[1])
        out[:, s : s + chunk] = np.einsum("cpa,pa->cp", t, e[0]).real
    return out


def _bandwidth(hat: np.ndarray, n: int, rtol: float = 1e-12) -> float:
    """``2 pi max |m|_1`` over coefficients above ``rtol`` times the largest one."""
    a = np.abs(hat).max(axis=0)
    top = a.max()
    if top == 0:
        return 0.0
    m = _l1_modes(n)
    return 2 * np.pi * float(m[a > rtol * top].max())


@lru_cache(maxsize=8)
def _l1_modes(n):
    m1 = np.abs(np.fft.fftfreq(n, 1.0 / n))[:, None, None]
    m3 = np.abs(np.fft.rfftfreq(n, 1.0 / n))[None, None, :]
    return m1 + m1.reshape(1, n, 1) + m3


def _l1_spectrum(hat: np.ndarray, n: int) -> tuple:
    """Coefficient mass aggregated by ``|m|_1`` (rfft half-space counted twice)."""
    a = np.abs(hat).sum(axis=0)
    w = np.full(a.shape[-1], 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    a = a * w
    kap = _l1_modes(n).astype(int)
    kap = np.broadcast_to(kap, a.shape)
    amp = np.bincount(kap.ravel(), weights=a.ravel())
    return np.arange(len(amp), dtype=float), amp


class TaylorInterpolator:
    """Evaluate ``f(x_node + delta(x_node))`` by a Taylor series of the trig interpolant.

    The truncation order is picked from the spectral bandwidth ``K`` and the
    largest displacement so that ``(K d)^(P+1) / (P+1)! <= tol``.
    """

    MAX_ORDER = 12

    def __init__(self, f: Field, tol: float = 1e-14):
        self.f = f
        self.hat = f.hat()
        self.K = _bandwidth(self.hat, f.n)
        self.tol = tol
        self.kappa, self.amp = _l1_spectrum(self.hat, f.n)
        self.total = float(self.amp.sum())
        self._derivs = {(0, 0, 0): f.data}
        self._stacks = {}

    def order_for(self, dmax: float) -> int:
        """Smallest order whose remainder bound over the spectrum is below ``tol``.

        Mode ``m`` contributes at most ``|c_m| min(2, x^(P+1) e^x / (P+1)!)``
        with ``x = 2 pi |m|_1 dmax``.
        """
        if dmax == 0 or self.total == 0:
            return 0
        x = self.kappa * (2 * np.pi * dmax)
        term = np.ones_like(x)
        ex = np.exp(np.minimum(x, 50.0))
        for P in range(self.MAX_ORDER + 1):
            term = term * x / (P + 1)
            bound = float(np.sum(self.amp * np.minimum(2.0, term * ex)))
            if bound <= self.tol * self.total:
                return P
        raise ValueError(
            f"displacement {dmax:.3e} too large for Taylor interpolation (bound {bound:.2e} at order {self.MAX_ORDER})"
        )

    def _stack(self, P: int) -> tuple:
        """Derivative arrays and inverse multi-factorials for all orders ``<= P``."""
        if P not in self._stacks:
            k = _wavenumbers(self.f.n)[:3]
            idx = [o for p in range(P + 1) for o in multi_indices(p)]
            arrs = np.empty((len(idx),) + self.f.data.shape)
            coef = np.empty(len(idx))
            for t, o in enumerate(idx):
                if o not in self._derivs:
                    mult = (1j * k[0]) ** o[0] * (1j * k[1]) ** o[1] * (1j * k[2]) ** o[2]
                    self._derivs[o] = ifft(self.hat * mult, self.f.n)
                arrs[t] = self._derivs[o]
                coef[t] = 1.0 / (math.factorial(o[0]) * math.factorial(o[1]) * math.factorial(o[2]))
            self._stacks[P] = (idx, arrs, coef)
        return self._stacks[P]

    def __call__(self, delta: np.ndarray) -> np.ndarray:
        dmax = float(np.abs(delta).max()) * math.sqrt(3)
        P = self.order_for(dmax)
        if P == 0:
            return self.f.data.copy()
        idx, arrs, coef = self._stack(P)
        pw = np.empty((3, P + 1) + delta.shape[1:])
        pw[:, 0] = 1.0
        for p in range(1, P + 1):
            pw[:, p] = pw[:, p - 1] * delta
        W = np.empty((len(idx),) + delta.shape[1:])
        for t, o in enumerate(idx):
            np.multiply(pw[0, o[0]], pw[1, o[1]], out=W[t])
            W[t] *= pw[2, o[2]] * coef[t]
        return np.einsum("tc...,t...->c...", arrs, W, optimize=True)


# Flow maps -------------------------------------------------------------------------


@dataclass
class FlowMap:
    """``Phi(., t)`` solving ``(d_t + v.grad) Phi = 0`` with ``Phi(x, s) = x``."""

    base_time: float
    time: float
    displacement: VectorField

    @property
    def direction(self) -> str:
        return "forward" if self.time >= self.base_time else "backward"

    def gradient(self) -> np.ndarray:
        return gradient_of_map(self.displacement)

    def full(self) -> np.ndarray:
        return self.displacement.grid.coords() + self.displacement.data


class VelocityHistory:
    """Velocity linear in time between the slices of a slab, with cached interpolators."""

    def __init__(self, slab: TimeSlab):
        self.slab = slab
        self._interp = {}
        self._norm1 = {}

    MAX_INTERPOLATORS = 4

    def interpolator(self, i: int) -> TaylorInterpolator:
        # Derivative stacks are large; tracing is monotone in time so a few suffice.
        if i not in self._interp:
            if len(self._interp) >= self.MAX_INTERPOLATORS:
                self._interp.pop(next(iter(self._interp)))
            self._interp[i] = TaylorInterpolator(self.slab.slices[i])
        return self._interp[i]

    def norm1(self, i: int) -> float:
        if i not in self._norm1:
            self._norm1[i] = holder_norm(self.slab.slices[i], 1)
        return self._norm1[i]

    def bracket(self, t: float) -> tuple:
        times = self.slab.times
        if len(times) == 1:
            return 0, 0, 0.0
        s = (t - times[0]) / self.slab.dt
        i = int(min(max(math.floor(s + 1e-12), 0), len(times) - 2))
        return i, i + 1, min(max(s - i, 0.0), 1.0)

    def sample(self, t: float, delta: np.ndarray) -> np.ndarray:
        i, j, w = self.bracket(t)
        if w <= 1e-14:
            return self.interpolator(i)(delta)
        if w >= 1 - 1e-14:
            return self.interpolator(j)(delta)
        return (1 - w) * self.interpolator(i)(delta) + w * self.interpolator(j)(delta)

    def max_norm1(self, t0: float, t1: float) -> float:
        lo, hi = min(t0, t1), max(t0, t1)
        i0 = self.bracket(lo)[0]
        i1 = self.bracket(hi)[1]
        return max(self.norm1(i) for i in range(i0, i1 + 1))


def _foot_point(vel: VelocityHistory, t_new: float, h: float, shape) -> np.ndarray:
    """Displacement ``X - x`` of the characteristic ending at ``(x, t_new)``, traced to ``t_new - h``."""
    z = np.zeros(shape)
    k1 = vel.sample(t_new, z)
    k2 = vel.sample(t_new - 0.5 * h, -0.5 * h * k1)
    k3 = vel.sample(t_new - 0.5 * h, -0.5 * h * k2)
    k4 = vel.sample(t_new - h, -h * k3)
    return -(h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


class FlowTracer:
    """Incremental characteristic tracing of ``Phi`` from its base time.

    Maps at requested times are produced by composing per-step maps:
    ``Phi(t_new) = Phi(t_old) o X`` where ``X`` is the RK4 foot point.
    """

    def __init__(self, v_slab: TimeSlab, base_time: float, max_step: Optional[float] = None,
                 check_hypothesis: bool = True):
        self.vel = VelocityHistory(v_slab)
        self.s = float(base_time)
        t0, t1 = v_slab.interval()
        if not (t0 - 1e-12 <= self.s <= t1 + 1e-12):
            raise ValueError("base time outside velocity slab")
        self.max_step = max_step or (v_slab.dt if len(v_slab) > 1 else math.inf)
        # Keep K |v| h small so the Taylor interpolant converges fast.
        kv = max(_bandwidth(s.hat(), s.n) * s.sup() for s in v_slab.slices)
        if kv > 0:
            self.max_step = min(self.max_step, 0.1 / (math.sqrt(3) * kv))
        self.grid = v_slab.slices[0].grid
        self.check_hypothesis = check_hypothesis

    def hypothesis_ratio(self, t: float) -> float:
        return abs(t - self.s) * self.vel.max_norm1(self.s, t)

    def _check(self, t: float):
        t0, t1 = self.vel.slab.interval()
        if t < t0 - 1e-12 or t > t1 + 1e-12:
            raise ValueError(f"time {t} outside velocity slab [{t0}, {t1}]")
        if self.check_hypothesis:
            r = self.hypothesis_ratio(t)
            if r > 1:
                raise FlowMapHypothesisError(f"transport-estimate hypothesis violated: |t-s| ||v||_1 = {r:.3g} > 1")

    def advance(self, disp: np.ndarray, t_from: float, t_to: float) -> np.ndarray:
        """Propagate displacement ``disp`` of ``Phi(., t_from)`` to ``t_to`` (same side of ``s``).

        Steps are aligned with slab nodes so each RK4 step sees a velocity
        that is linear in time.
        """
        if t_to == t_from:
            return disp
        times = self.vel.slab.times
        lo, hi = min(t_from, t_to), max(t_from, t_to)
        inner = [float(x) for x in times if lo + 1e-13 < x < hi - 1e-13]
        marks = [t_from] + (inner if t_to > t_from else inner[::-1]) + [t_to]
        d = disp
        for a, b in zip(marks, marks[1:]):
            nsteps = max(1, int(math.ceil(abs(b - a) / self.max_step - 1e-9)))
            h = (b - a) / nsteps
            for k in range(nsteps):
                t_new = a + (k + 1) * h
                x = _foot_point(self.vel, t_new, h, d.shape)
                if np.any(d):
                    d = x + TaylorInterpolator(VectorField(self.grid, d))(x)
                else:
                    d = x
        return d

    def maps(self, times: Sequence[float]) -> dict:
        """Flow maps at ``times`` keyed by time; computed outward from ``s``."""
        out = {}
        for side in (1, -1):
            ts = sorted((t for t in times if (t - self.s) * side > 0), key=lambda t: abs(t - self.s))
            d = np.zeros((3,) + self.grid.shape)
            tc = self.s
            for t in ts:
                self._check(t)
                d = self.advance(d, tc, t)
                tc = t
                out[t] = FlowMap(self.s, t, VectorField(self.grid, d.copy(), t))
        for t in times:
            if t == self.s:
                out[t] = FlowMap(self.s, t, VectorField.zeros(self.grid, t))
        return out


def flow_map(v_slab: TimeSlab, s: float, t: float, check_hypothesis: bool = True) -> FlowMap:
    """``Phi(., t)`` with ``Phi(., s) = id`` for the velocity slab (linear in time)."""
    return FlowTracer(v_slab, s, check_hypothesis=check_hypothesis).maps([t])[t]


def forward_flux(v_slab: TimeSlab, s: float, t: float, nsteps: int = 64) -> np.ndarray:
    """Lagrangian positions ``X(x, t)`` with ``X(x, s) = x``, by RK4 with exact trig evaluation."""
    vel = v_slab
    g = vel.slices[0].grid
    X = g.coords().reshape(3, -1)

    def v_at(tt, pts):
        hist = VelocityHistory(vel)
        i, j, w = hist.bracket(tt)
        a = trig_eval_exact(vel.slices[i], pts % 1.0)
        if w <= 0:
            return a
        return (1 - w) * a + w * trig_eval_exact(vel.slices[j], pts % 1.0)

    h = (t - s) / nsteps
    tt = s
    for _ in range(nsteps):
        k1 = v_at(tt, X)
        k2 = v_at(tt + h / 2, X + h / 2 * k1)
        k3 = v_at(tt + h / 2, X + h / 2 * k2)
        k4 = v_at(tt + h, X + h * k3)
        X = X + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        tt += h
    return X.reshape((3,) + g.shape)


# Transport -------------------------------------------------------------------------


def transport_probe(
    f0: Field,
    g: Optional[Callable[[float], Field]],
    v_slab: TimeSlab,
    t0: float,
    t: float,
    alpha: float = 0.5,
) -> dict:
    """Solve ``d_t f + v.grad f = g`` along characteristics from ``f(t0) = f0``.

    ``g`` is a callable returning the forcing at a time, or None.

    Returns
    -------
    dict
        ``field``: the solution at ``t``; ``ratio``: ``||f(t)||_alpha`` over
        ``||f0||_alpha + int ||g||_alpha``; ``grad_phi_ratio``:
        ``||grad Phi - Id||_0 / (|t - t0| [v]_1)``.
    """
    tracer = FlowTracer(v_slab, t0)
    tracer._check(t)
    span = t - t0
    nsteps = max(1, int(math.ceil(abs(span) / tracer.max_step - 1e-9))) if span else 0
    h = span / nsteps if nsteps else 0.0
    f = f0.data.copy()
    d = np.zeros((3,) + f0.grid.shape)
    tc = t0
    gint = 0.0
    for _ in range(nsteps):
        t_new = tc + h
        x = _foot_point(tracer.vel, t_new, h, d.shape)
        f = TaylorInterpolator(f0._new(f))(x)
        d = x + (TaylorInterpolator(VectorField(f0.grid, d))(x) if np.any(d) else 0.0)
        if g is not None:
            g_old = g(tc)
            g_new = g(t_new)
            f += 0.5 * h * (TaylorInterpolator(g_old)(x) + g_new.data)
            gint += 0.5 * abs(h) * (holder_norm(g_old, alpha) + holder_norm(g_new, alpha))
        tc = t_new
    ft = f0._new(f)
    ft.time_tag = t
    denom = holder_norm(f0, alpha) + gint
    G = gradient_of_map(VectorField(f0.grid, d))
    dev = G - np.eye(3)[:, :, None, None, None]
    devn = float(np.linalg.norm(np.moveaxis(dev, (0, 1), (-2, -1)), ord=2, axis=(-2, -1)).max())
    v1 = max(holder_seminorm(s, 1) for s in v_slab.slices)
    return {
        "field": ft,
        "norm": holder_norm(ft, alpha),
        "ratio": holder_norm(ft, alpha) / denom if denom > 0 else 0.0,
        "grad_phi_dev": devn,
        "grad_phi_ratio": devn / (abs(span) * v1) if span and v1 > 0 else 0.0,
    }


# Residuals -------------------------------------------------------------------------


def er_residual_slice(v_prev: VectorField, v: VectorField, v_next: VectorField, dt2: float,
                      R: Optional[SymTensorField], p: Optional[ScalarField], dealias: bool = True) -> np.ndarray:
    """Pointwise ``d_t v + div(v⊗v) + grad p - div R`` with centered ``d_t`` over ``dt2``.

    With ``dealias`` the quadratic term uses the 2/3-truncated product of the solver.
    """
    n = v.n
    F = _sym_outer_hat(v.data)
    if dealias:
        F = F * v.grid.dealias_mask()
    if R is not None:
        F = F - R.hat()
    if p is None:
        ph = pressure_hat(F, n)
    else:
        ph = p.hat()[0]
    k = _wavenumbers(n)[:3]
    space = tensor_div_hat(F, n) + np.stack([1j * k[a] * ph for a in range(3)])
    return (v_next.data - v_prev.data) / dt2 + ifft(space, n)


def euler_reynolds_residual(
    v_slab: TimeSlab,
    R_slab: Optional[TimeSlab] = None,
    p_slab: Optional[TimeSlab] = None,
    return_all: bool = False,
    dealias: bool = True,
):
    """``max_t || d_t v + div(v⊗v) + grad p - div R ||_0`` over interior slices.

    Missing ``R`` means zero stress; missing ``p`` means the pressure from the
    elliptic solve.
    """
    if len(v_slab) < 3:
        raise ValueError("residual needs at least three slices")
    vals = []
    for i in range(1, len(v_slab) - 1):
        R = R_slab.slices[i] if R_slab is not None else None
        p = p_slab.slices[i] if p_slab is not None else None
        r = er_residual_slice(
            v_slab.slices[i - 1], v_slab.slices[i], v_slab.slices[i + 1],
            v_slab.times[i + 1] - v_slab.times[i - 1], R, p, dealias,
        )
        vals.append(float(np.sqrt(np.sum(r * r, axis=0)).max()))
    return (max(vals), vals) if return_all else max(vals)


def divergence_sup(v: VectorField) -> float:
    return float(np.abs(ifft(div_hat(v.hat(), v.n), v.n)).max())
