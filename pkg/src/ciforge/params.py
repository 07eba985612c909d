"""Scheme parameters, derived per-step scales and admissibility inequalities.

All scale arithmetic is carried out in mpmath so that ``a**(b**q)`` stays
representable for the astronomically large ``a`` the asymptotic argument
needs. Reports keep both exact formula strings and evaluated reals.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional
from fractions import Fraction

import mpmath as mp

# Largest decimal exponent of a**(b**q) accepted before raising.
MAX_DECIMAL_EXPONENT = 10**7


class ParameterOverflowError(OverflowError):
    """Raised when ``a**(b**q)`` exceeds the supported extended range."""


class DomainError(ValueError):
    """Raised when an argument lies outside its admissible domain."""


@dataclass(frozen=True)
class SchemeParams:
    """The parameter quintuple plus horizon and geometric constant.

    Parameters
    ----------
    beta : float
        Hölder exponent, ``0 < beta < 1/3``.
    b : float
        Super-exponential base, ``1 < b < (1 - beta) / (2 beta)``.
    gamma : float
        Localization exponent.
    alpha : float
        Small slack exponent.
    a : float
        Base frequency parameter, ``a >= 2``.
    T : float
        Time horizon.
    M : float, optional
        Geometric constant supplied by the Mikado family.
    """

    beta: float
    b: float
    gamma: float
    alpha: float
    a: float
    T: float = 1.0
    M: Optional[float] = None

    @classmethod
    def from_dict(cls, d: dict) -> "SchemeParams":
        keys = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - keys
        if unknown:
            raise KeyError(f"unknown parameter keys: {sorted(unknown)}")
        return cls(**{k: (None if d[k] is None else float(d[k])) for k in d})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def gamma_max(beta: float, b: float) -> float:
    """Upper bound ``(b-1)(1-beta-2 beta b)/(b+1)`` of the admissible gamma range."""
    return (b - 1.0) * (1.0 - beta - 2.0 * beta * b) / (b + 1.0)


@dataclass
class Check:
    """One inequality ``lhs < rhs`` (or ``<=``) with its slack ``rhs - lhs``."""

    name: str
    lhs: float
    rhs: float
    strict: bool = True
    kind: str = "invariant"
    a0: Optional[float] = None

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def passed(self) -> bool:
        return self.lhs < self.rhs if self.strict else self.lhs <= self.rhs

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "slack": self.slack,
            "pass": self.passed,
            "kind": self.kind,
        }
        if self.a0 is not None:
            d["a0"] = self.a0
        return d


@dataclass
class ValidationReport:
    """Invariant checks plus a-dependent floor checks.

    ``passed`` covers only the parameter invariants. The a-floor checks
    (``kind == "a-floor"``) are expected to fail at desk-scale ``a`` and are
    reported with the bisected threshold ``a0`` at which they start to hold.
    """

    params: SchemeParams
    checks: list = field(default_factory=list)

    @property
    def invariants(self) -> list:
        return [c for c in self.checks if c.kind == "invariant"]

    @property
    def a_floor(self) -> list:
        return [c for c in self.checks if c.kind == "a-floor"]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.invariants)

    @property
    def a_floor_passed(self) -> bool:
        return all(c.passed for c in self.a_floor)

    def by_name(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self) -> list:
        return [c.name for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "passed": self.passed,
            "a_floor_passed": self.a_floor_passed,
            "checks": [c.to_dict() for c in self.checks],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass(frozen=True)
class QScales:
    """Derived scales at step ``q`` as mpmath reals plus their defining formulas."""

    q: int
    lambda_q: mp.mpf
    delta_q: mp.mpf
    theta_q: Optional[mp.mpf]
    tau_q: mp.mpf
    ell_q: mp.mpf
    formulas: dict

    def as_floats(self) -> dict:
        f = lambda x: None if x is None else float(x)
        return {
            "q": self.q,
            "lambda": f(self.lambda_q),
            "delta": f(self.delta_q),
            "theta": f(self.theta_q),
            "tau": f(self.tau_q),
            "ell": f(self.ell_q),
        }


FORMULAS = {
    "lambda": "2*pi*ceil(a**(b**q))",
    "delta": "lambda_q**(-2*beta)",
    "theta": "1/(delta_{q-1}**(1/2) * lambda_{q-1}**(1+3*alpha))",
    "tau": "lambda_{q-1}**(-gamma) * theta_q  (tau_0 = T/15)",
    "ell": "delta_{q+1}**(1/2) / (delta_q**(1/2) * lambda_q**(1+gamma/2+3*alpha/2))",
}


def _frequency_integer(a: float, b: float, q: int) -> mp.mpf:
    """Return ``ceil(a**(b**q))`` with precision sized to the exponent."""
    if q < 0:
        raise DomainError("q must be >= 0")
    log10_val = float(b) ** q * math.log10(float(a))
    if log10_val > MAX_DECIMAL_EXPONENT:
        raise ParameterOverflowError(
            f"a**(b**q) has about 10**{log10_val:.3g} decimal digits; "
            f"limit is {MAX_DECIMAL_EXPONENT}"
        )
    dps = int(min(log10_val, 2000)) + 30
    with mp.workdps(dps):
        val = mp.ceil(mp.power(mp.mpf(a), mp.power(mp.mpf(b), q)))
    return val


def lam(params: SchemeParams, q: int) -> mp.mpf:
    """Frequency ``lambda_q = 2 pi ceil(a**(b**q))``."""
    return 2 * mp.pi * _frequency_integer(params.a, params.b, q)


def delta(params: SchemeParams, q: int) -> mp.mpf:
    """Amplitude ``delta_q = lambda_q**(-2 beta)``."""
    return lam(params, q) ** (-2 * mp.mpf(params.beta))


def theta(params: SchemeParams, q: int) -> mp.mpf:
    """Slab length ``theta_q`` for ``q >= 1``."""
    if q < 1:
        raise DomainError("theta_q is defined for q >= 1")
    lp = lam(params, q - 1)
    dp = delta(params, q - 1)
    return 1 / (mp.sqrt(dp) * lp ** (1 + 3 * mp.mpf(params.alpha)))


def tau(params: SchemeParams, q: int) -> mp.mpf:
    """Stress-support length ``tau_q`` (``tau_0 = T/15``)."""
    if q == 0:
        return mp.mpf(params.T) / 15
    return lam(params, q - 1) ** (-mp.mpf(params.gamma)) * theta(params, q)


def ell(params: SchemeParams, q: int) -> mp.mpf:
    """Mollification length ``ell_q``."""
    g, al = mp.mpf(params.gamma), mp.mpf(params.alpha)
    return mp.sqrt(delta(params, q + 1)) / (
        mp.sqrt(delta(params, q)) * lam(params, q) ** (1 + g / 2 + 3 * al / 2)
    )


def scales(params: SchemeParams, q: int) -> QScales:
    """Derived scales at step ``q``.

    Examples
    --------
    >>> p = SchemeParams(beta=0.25, b=2, gamma=0.01, alpha=1e-4, a=3, T=15)
    >>> float(scales(p, 0).tau_q)
    1.0
    """
    if q < 0:
        raise DomainError("q must be >= 0")
    return QScales(
        q=q,
        lambda_q=lam(params, q),
        delta_q=delta(params, q),
        theta_q=theta(params, q) if q >= 1 else None,
        tau_q=tau(params, q),
        ell_q=ell(params, q),
        formulas=dict(FORMULAS),
    )


def _closing_lhs_rhs(beta, b, gamma, alpha):
    lhs = -beta * b - beta + 1 + gamma - b + 5 * alpha * b
    rhs = -2 * beta * b**2 - gamma * b - 3 * alpha * b
    return lhs, rhs


def _a_floor_checks(params: SchemeParams, horizon: int) -> list:
    out = []
    g = params.gamma
    out.append(
        Check(
            "10π·a^(-γ)<1",
            float(10 * mp.pi * mp.mpf(params.a) ** (-g)),
            1.0,
            kind="a-floor",
        )
    )
    for q in range(horizon + 1):
        out.append(
            Check(
                f"2θ_{q + 1}<τ_{q} (q={q})",
                float(2 * theta(params, q + 1)),
                float(tau(params, q)),
                kind="a-floor",
            )
        )
    return out


def validate(params: SchemeParams, horizon: int = 0, with_a0: bool = False) -> ValidationReport:
    """Check every admissibility inequality and the a-floor conditions.

    Parameters
    ----------
    params : SchemeParams
    horizon : int
        Largest ``q`` for which ``2 theta_{q+1} < tau_q`` is reported.
    with_a0 : bool
        Attach a bisected threshold ``a0`` to each a-floor check.

    Returns
    -------
    ValidationReport
        Never raises for bad parameters; failures show up in the report.
    """
    be, b, g, al = params.beta, params.b, params.gamma, params.alpha
    checks = [
        Check("β>0", 0.0, be),
        Check("β<1/3", be, 1.0 / 3.0),
        Check("b>1", 1.0, b),
    ]
    b_hi = (1 - be) / (2 * be) if be > 0 else math.inf
    checks.append(Check("b<(1-β)/(2β)", b, b_hi))
    checks.append(Check("γ>0", 0.0, g))
    checks.append(Check("γ<(b-1)(1-β-2βb)/(b+1)", g, gamma_max(be, b)))
    checks.append(Check("α>0", 0.0, al))
    lhs, rhs = _closing_lhs_rhs(be, b, g, al)
    checks.append(Check("-βb-β+1+γ-b+5αb<-2βb²-γb-3αb", lhs, rhs))
    checks.append(Check("6αb≤(b-1)(1-β)", 6 * al * b, (b - 1) * (1 - be), strict=False))
    checks.append(Check("a≥2", 2.0, params.a, strict=False))
    invariants_ok = all(c.passed for c in checks)
    if invariants_ok:
        floor = _a_floor_checks(params, horizon)
        if with_a0:
            for c in floor:
                c.a0 = a_threshold(params, _floor_predicate(c.name))
        checks.extend(floor)
    return ValidationReport(params=params, checks=checks)


def _floor_predicate(name: str) -> Callable[[SchemeParams], bool]:
    def pred(p: SchemeParams) -> bool:
        for c in _a_floor_checks(p, _horizon_of(name)):
            if c.name == name:
                return c.passed
        raise KeyError(name)

    return pred


def _horizon_of(name: str) -> int:
    if "(q=" in name:
        return int(name.split("(q=")[1].rstrip(")"))
    return 0


@dataclass
class ChainReport:
    """Scale-chain inequalities at step ``q``."""

    q: int
    params: SchemeParams
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def by_name(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "passed": self.passed,
            "checks": [c.to_dict() for c in self.checks],
        }


CHAIN_NAMES = (
    "5τ_{q+1}<θ_{q+1}",
    "2θ_{q+1}<τ_q",
    "λ_q^(-3/2)<ℓ_q",
    "ℓ_q<λ_q^(-1)",
    "ℓ_q^(-1)<λ_{q+1}",
    "δ_{q+1}^(1/2)δ_q^(1/2)λ_q^(1+γ)λ_{q+1}^(5α-1)≤δ_{q+2}λ_{q+1}^(-γ-3α)",
)


def _chain_checks(params: SchemeParams, q: int) -> list:
    g, al = mp.mpf(params.gamma), mp.mpf(params.alpha)
    lq, lq1 = lam(params, q), lam(params, q + 1)
    dq, dq1, dq2 = delta(params, q), delta(params, q + 1), delta(params, q + 2)
    th1, ta1, taq = theta(params, q + 1), tau(params, q + 1), tau(params, q)
    eq = ell(params, q)
    # The closing inequality compares tiny numbers; compare logarithms.
    lhs21 = mp.log(mp.sqrt(dq1) * mp.sqrt(dq)) + (1 + g) * mp.log(lq) + (5 * al - 1) * mp.log(lq1)
    rhs21 = mp.log(dq2) - (g + 3 * al) * mp.log(lq1)
    vals = [
        (5 * ta1, th1, True),
        (2 * th1, taq, True),
        (lq ** mp.mpf(-1.5), eq, True),
        (eq, 1 / lq, True),
        (1 / eq, lq1, True),
        (lhs21, rhs21, False),
    ]
    return [
        Check(name, float(lhs), float(rhs), strict=strict, kind="chain")
        for name, (lhs, rhs, strict) in zip(CHAIN_NAMES, vals)
    ]


def check_chain(params: SchemeParams, q: int, with_a0: bool = False) -> ChainReport:
    """Evaluate the scale-chain inequalities at step ``q``.

    The closing inequality is reported in logarithmic form (``log lhs`` and
    ``log rhs``) because both sides underflow double precision quickly.
    """
    if q < 0:
        raise DomainError("q must be >= 0")
    checks = _chain_checks(params, q)
    if with_a0:
        for c in checks:
            name = c.name
            c.a0 = a_threshold(
                params,
                lambda p, name=name: next(x for x in _chain_checks(p, q) if x.name == name).passed,
            )
    return ChainReport(q=q, params=params, checks=checks)


def a_threshold(
    params: SchemeParams,
    predicate: Callable[[SchemeParams], bool],
    log10_a_max: float = 400.0,
    iters: int = 60,
) -> Optional[float]:
    """Bisect in ``log a`` for the smallest ``a`` where ``predicate`` holds.

    Returns ``2.0`` if the predicate already holds at ``a = 2`` and ``None``
    if it fails up to ``a = 10**log10_a_max`` (treated as "fails for all a").
    The predicate is assumed eventually monotone in ``a``.
    """
    at = lambda la: predicate(dataclasses.replace(params, a=10.0**la))
    lo = math.log10(2.0)
    if at(lo):
        return 2.0
    hi = lo
    step = 1.0
    while True:
        hi = min(hi + step, log10_a_max)
        try:
            ok = at(hi)
        except (ParameterOverflowError, OverflowError):
            return None
        if ok:
            break
        if hi >= log10_a_max:
            return None
        lo = hi
        step *= 2.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if at(mid):
            hi = mid
        else:
            lo = mid
    return 10.0**hi


def chain_a0(params: SchemeParams, q: int = 0) -> Optional[float]:
    """Smallest ``a`` (bisection) at which every chain inequality at ``q`` holds."""
    return a_threshold(params, lambda p: check_chain(p, q).passed)


def dimension_bounds(beta_pp: float, b: float, gamma: float, alpha: float) -> dict:
    """Closed-form dimension quantities.

    Returns
    -------
    dict
        ``box_dim_bound``: ``1 - gamma b / ((b-1)(1-beta+3 alpha+gamma))``;
        ``lower_bound``: ``2 beta/(1-beta)``;
        ``theorem_bound``: ``1/2 + beta/(1-beta)``, all at ``beta = beta_pp``.
        ``Fraction`` inputs are evaluated exactly.
    """
    if not (0 < beta_pp <= Fraction(1, 3) or beta_pp == 1.0 / 3.0):
        raise DomainError(f"β″ = {beta_pp} outside (0, 1/3)")
    be = beta_pp
    lower = 2 * be / (1 - be)
    theorem = 0.5 + 0.5 * lower
    if b > 1:
        box = 1 - gamma * b / ((b - 1) * (1 - be + 3 * alpha + gamma))
    else:
        box = math.nan
    return {"box_dim_bound": box, "lower_bound": lower, "theorem_bound": theorem}


def infimum_closed_form(beta_pp: float) -> float:
    """Limit of the box bound as ``alpha -> 0``, ``gamma -> gamma_max``, ``b -> 1``."""
    return 0.5 + beta_pp / (1 - beta_pp)


def infimum_scan(
    beta_pp: float,
    n_b: int = 400,
    n_gamma: int = 40,
    n_alpha: int = 8,
    refine: int = 6,
) -> dict:
    """Numerically minimize the box bound over the admissible region.

    The region is ``1 < b < (1-beta)/(2 beta)``, ``0 < gamma < gamma_max(b)``
    and ``0 < alpha`` with the closing inequality and ``6 alpha b <= (b-1)(1-beta)``.
    The scan is log-spaced in ``b - 1`` and refined around the best cell.

    Returns
    -------
    dict
        ``value``, the minimizing ``b``, ``gamma``, ``alpha``, and the closed form.
    """
    import numpy as np

    if not (0.0 < beta_pp < 1.0 / 3.0):
        raise DomainError(f"β″ = {beta_pp} outside (0, 1/3)")
    be = beta_pp
    b_hi = (1 - be) / (2 * be)
    log_lo, log_hi = -12.0, math.log10(b_hi - 1) - 1e-9
    u = np.linspace(0.05, 1.0 - 1e-9, n_gamma)[None, :, None]
    w = np.geomspace(1e-6, 1.0 - 1e-9, n_alpha)[None, None, :]
    best = (math.inf, None, None, None)
    for _ in range(refine):
        bb = (1.0 + 10.0 ** np.linspace(log_lo, log_hi, n_b))[:, None, None]
        gmax = gamma_max(be, bb)
        g = u * gmax
        # The closing inequality reads (b+1)(gamma_max - gamma) > 8 alpha b.
        amax = np.minimum((bb + 1) * (gmax - g) / (8 * bb), (bb - 1) * (1 - be) / (6 * bb))
        al = w * amax
        val = 1 - g * bb / ((bb - 1) * (1 - be + 3 * al + g))
        val = np.where((gmax > 0) & (amax > 0), val, np.inf)
        i, j, k = np.unravel_index(np.argmin(val), val.shape)
        if val[i, j, k] < best[0]:
            best = (val[i, j, k], bb[i, 0, 0], g[i, j, 0], al[i, j, k])
        lb = math.log10(best[1] - 1)
        width = (log_hi - log_lo) / 8
        log_lo = max(-14.0, lb - width)
        log_hi = min(math.log10(b_hi - 1) - 1e-9, lb + width)
    val, bb, g, al = best
    return {
        "value": float(val),
        "b": float(bb),
        "gamma": float(g),
        "alpha": float(al),
        "closed_form": infimum_closed_form(be),
    }


def prelimit_count(params: SchemeParams, q: int) -> mp.mpf:
    """Covering count ``(40 pi)^q T a^(-gamma (b^q-1)/(b-1)) (5 tau_q)^(-1)``."""
    b, g = mp.mpf(params.b), mp.mpf(params.gamma)
    return (
        (40 * mp.pi) ** q
        * mp.mpf(params.T)
        * mp.mpf(params.a) ** (-g * (b**q - 1) / (b - 1))
        / (5 * tau(params, q))
    )


def prelimit_box_dimension(params: SchemeParams, q: int) -> float:
    """Finite-``q`` box-dimension quotient ``log N_q / -log(5 tau_q)``."""
    n = prelimit_count(params, q)
    return float(mp.log(n) / -mp.log(5 * tau(params, q)))
