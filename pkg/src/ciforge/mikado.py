"""Mikado flows: stationary pipe flows whose second moment is a prescribed matrix.

Each pipe ``j`` is a periodic tube around a family of lines parallel to the
rational direction ``xi_j``. Its profile depends only on the two integer
forms ``u = l_j . x`` and ``w = e_j . x`` with ``l_j, e_j`` orthogonal to
``xi_j``, so every pipe is constant along its axis and divergence free.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import ndimage

from .fields import SYM_INDEX, Grid, VectorField

_S = 1.0 / math.sqrt(2.0)

DIRECTIONS_INT = np.array([(1, 1, 0), (1, -1, 0), (1, 0, 1), (1, 0, -1), (0, 1, 1), (0, 1, -1)])
L_FORMS = np.array([(1, -1, 0), (1, 1, 0), (1, 0, -1), (1, 0, 1), (0, 1, -1), (0, 1, 1)])
E_FORMS = np.array([(0, 0, 1), (0, 0, 1), (0, 1, 0), (0, 1, 0), (1, 0, 0), (1, 0, 0)])
# Tube centres in the (u, w) torus, in units of 1/8.
CENTERS_EIGHTHS = np.array([(6, 7), (3, 2), (3, 2), (5, 6), (7, 0), (5, 2)])

PROFILE_POWER = 8
DEFAULT_RADIUS = 0.065
DEFAULT_NBHD_RADIUS = 0.4
SPECTRUM_N = 512
SPLINE_ORDER = 5


class TubeIntersectionError(ValueError):
    """Raised when two pipe supports overlap."""


class PositivityError(ValueError):
    """Raised when some ``Gamma_j^2`` is not positive on the neighbourhood."""

    def __init__(self, msg, R=None):
        super().__init__(msg)
        self.R = R


class ZeroModeError(ValueError):
    """Raised for the ``k = 0`` potential."""


def sym6(A: np.ndarray) -> np.ndarray:
    """Six independent components of symmetric ``(..., 3, 3)`` matrices."""
    return np.stack([A[..., i, j] for i, j in SYM_INDEX], axis=-1)


def unsym6(v: np.ndarray) -> np.ndarray:
    out = np.empty(v.shape[:-1] + (3, 3), dtype=v.dtype)
    for c, (i, j) in enumerate(SYM_INDEX):
        out[..., i, j] = v[..., c]
        out[..., j, i] = v[..., c]
    return out


def frobenius_basis() -> np.ndarray:
    """Orthonormal basis of ``Sym(3)`` for the Frobenius inner product, shape ``(6, 3, 3)``."""
    B = np.zeros((6, 3, 3))
    for c, (i, j) in enumerate(SYM_INDEX):
        if i == j:
            B[c, i, i] = 1.0
        else:
            B[c, i, j] = B[c, j, i] = _S
    return B


def sample_ball(rng: np.random.Generator, count: int, radius: float, center=None) -> np.ndarray:
    """Uniform samples from the closed Frobenius ball in ``Sym(3)``."""
    center = np.eye(3) if center is None else np.asarray(center)
    z = rng.standard_normal((count, 6))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    z *= radius * rng.random(count)[:, None] ** (1.0 / 6.0)
    return center + np.einsum("sc,cij->sij", z, frobenius_basis())


def _periodic(x):
    return x - np.round(x)


def line_separation(centers, L=L_FORMS, E=E_FORMS, D=DIRECTIONS_INT) -> float:
    """Minimum distance between axes of distinct pipes over all periodic translates.

    Pipe ``j`` axes are the lines ``P_j + s xi_j + Z^3`` with
    ``P_j = u_j l_j / |l_j|^2 + w_j e_j``. For skew directions the distance
    between translates is ``dist((P_j - P_i).c, g Z) / |c|`` with
    ``c = xi_i x xi_j`` integral and ``g = gcd(c)``.
    """
    centers = np.asarray(centers, dtype=float)
    P = [centers[j, 0] * L[j] / (L[j] @ L[j]) + centers[j, 1] * E[j] for j in range(len(D))]
    best = math.inf
    for i in range(len(D)):
        for j in range(i + 1, len(D)):
            c = np.cross(D[i], D[j])
            if not np.any(c):
                raise ValueError("parallel pipe directions")
            g = math.gcd(*(int(abs(x)) for x in c))
            v = float((P[j] - P[i]) @ c)
            best = min(best, abs(v - g * round(v / g)) / float(np.linalg.norm(c)))
    return best


def profile_norm_constant(radius: float, power: int = PROFILE_POWER) -> float:
    """``c`` with ``c^2 * integral of (w/r)^2 (1 - rho^2/r^2)^(2p) = 1`` in closed form.

    With ``rho^2 = u^2/2 + w^2`` the tube integral equals
    ``sqrt(2) pi r^2 / (2 (2p+1) (2p+2))``.
    """
    integral = math.sqrt(2.0) * math.pi * radius**2 / (2 * (2 * power + 1) * (2 * power + 2))
    return 1.0 / math.sqrt(integral)


@dataclass(frozen=True)
class MikadoFourier:
    """Fourier data of ``W(R, .)`` and ``W⊗W(R, .)`` on retained modes.

    ``W`` modes are indexed per pipe: ``W = sum a A exp(i k.xi)``. ``C``
    holds the nonzero modes of ``W⊗W - R`` in 6-component form.
    """

    R: np.ndarray
    kmax: int
    modes: np.ndarray
    pipe: np.ndarray
    a: np.ndarray
    A: np.ndarray
    c_modes: np.ndarray
    C: np.ndarray
    mode0: np.ndarray

    @property
    def k(self) -> np.ndarray:
        return 2 * np.pi * self.modes

    def orthogonality_residuals(self) -> dict:
        Ak = np.abs(np.einsum("mc,mc->m", self.A, self.k)).max(initial=0.0)
        kc = 2 * np.pi * self.c_modes
        Cf = unsym6(self.C)
        Ck = np.abs(np.einsum("mij,mj->mi", Cf, kc)).max(initial=0.0)
        scale = np.abs(self.C).max(initial=1.0) * 2 * np.pi * max(self.kmax, 1)
        return {"A_dot_k": float(Ak), "C_k": float(Ck / scale), "A_unit": float(np.abs(np.linalg.norm(self.A, axis=1) - 1).max(initial=0.0))}

    def resynthesize(self, x: np.ndarray) -> np.ndarray:
        """Truncated sum evaluated at points ``x`` of shape ``(P, 3)``; returns ``(P, 3)``."""
        x = np.atleast_2d(x)
        out = np.zeros((x.shape[0], 3))
        for s in range(0, len(self.a), 2048):
            ph = np.exp(1j * (x @ self.k[s:s + 2048].T))
            out += np.real(ph @ (self.a[s:s + 2048, None] * self.A[s:s + 2048]))
        return out


class MikadoFamily:
    """Six-pipe Mikado family on the Frobenius ball of radius ``nbhd_radius`` about ``Id``."""

    def __init__(
        self,
        tube_radius: float = DEFAULT_RADIUS,
        kmax: int = 10,
        nbhd_radius: float = DEFAULT_NBHD_RADIUS,
        centers=None,
        power: int = PROFILE_POWER,
    ):
        self.direction_int = DIRECTIONS_INT.copy()
        self.directions = DIRECTIONS_INT / np.linalg.norm(DIRECTIONS_INT, axis=1, keepdims=True)
        self.L = L_FORMS.copy()
        self.E = E_FORMS.copy()
        self.centers = (CENTERS_EIGHTHS / 8.0) if centers is None else np.asarray(centers, dtype=float)
        self.radius = float(tube_radius)
        self.kmax = int(kmax)
        self.nbhd_radius = float(nbhd_radius)
        self.power = int(power)
        self.norm_const = profile_norm_constant(self.radius, self.power)
        self.separation = line_separation(self.centers, self.L, self.E, self.direction_int)
        M = np.stack([sym6(np.outer(x, x)) for x in self.directions], axis=1)
        self._moment_inv = np.linalg.inv(M)
        self._l2 = np.array([float(l @ l) for l in self.L])

    @property
    def J(self) -> int:
        return len(self.directions)

    # Coefficients -------------------------------------------------------

    def gamma_sq(self, R) -> np.ndarray:
        """Linear solve of ``sum_j Gamma_j^2 xi_j⊗xi_j = R``; shape ``(..., 6)``."""
        return sym6(np.asarray(R, dtype=float)) @ self._moment_inv.T

    def gamma(self, R, check: bool = True) -> np.ndarray:
        g2 = self.gamma_sq(R)
        if check and np.any(g2 <= 0):
            raise PositivityError("Gamma positivity fails on the neighbourhood", R=np.asarray(R))
        return np.sqrt(np.maximum(g2, 0.0))

    def positivity_margin(self, radius: Optional[float] = None) -> dict:
        """Exact minimum of ``Gamma_j^2`` over the closed Frobenius ball.

        Each ``Gamma_j^2`` is a linear functional, so its minimum is
        ``Gamma_j^2(Id) - radius * |functional|_F`` attained at an explicit ``R``.
        """
        radius = self.nbhd_radius if radius is None else radius
        B = frobenius_basis()
        coords = np.einsum("jc,bc->jb", self._moment_inv, sym6(B))
        norms = np.linalg.norm(coords, axis=1)
        at_id = self.gamma_sq(np.eye(3))
        mins = at_id - radius * norms
        j = int(np.argmin(mins))
        worst = np.eye(3) - radius * np.einsum("b,bij->ij", coords[j] / norms[j], B)
        return {"min_gamma_sq": float(mins[j]), "pipe": j, "R": worst, "per_pipe": mins, "max_radius": float(np.min(at_id / norms))}

    def positivity_scan(self, count: int = 10_000, seed: int = 0, radius: Optional[float] = None) -> dict:
        radius = self.nbhd_radius if radius is None else radius
        Rs = sample_ball(np.random.default_rng(seed), count, radius)
        g2 = self.gamma_sq(Rs)
        i, j = np.unravel_index(np.argmin(g2), g2.shape)
        return {"min_gamma_sq": float(g2[i, j]), "R": Rs[i], "pipe": int(j)}

    # Profiles -------------------------------------------------------------

    def pipe_coordinates(self, j: int, x: np.ndarray) -> tuple:
        """Periodic offsets ``(du, dw)`` of points ``x`` (leading axis 3) from pipe ``j``."""
        x = np.asarray(x, dtype=float)
        u = np.tensordot(self.L[j].astype(float), x, axes=(0, 0))
        w = np.tensordot(self.E[j].astype(float), x, axes=(0, 0))
        return _periodic(u - self.centers[j, 0]), _periodic(w - self.centers[j, 1])

    def profile_uw(self, j: int, du: np.ndarray, dw: np.ndarray) -> np.ndarray:
        """``psi_j`` as a function of the offsets; odd in ``dw`` and compactly supported."""
        r = self.radius
        s2 = (du * du / self._l2[j] + dw * dw) / (r * r)
        inside = np.clip(1.0 - s2, 0.0, None)
        return self.norm_const * (dw / r) * inside**self.power

    def psi(self, j: int, x: np.ndarray) -> np.ndarray:
        return self.profile_uw(j, *self.pipe_coordinates(j, x))

    def psi_grid(self, n: int) -> np.ndarray:
        """All pipe profiles on the ``n**3`` grid, shape ``(J, n, n, n)``."""
        return np.stack([self.psi(j, Grid(n).coords()) for j in range(self.J)])

    def psi_lattice(self, j: int, n: int) -> np.ndarray:
        """``psi_j`` sampled on the ``n x n`` lattice of ``(u, w)``."""
        t = np.arange(n) / n
        du = _periodic(t[:, None] - self.centers[j, 0])
        dw = _periodic(t[None, :] - self.centers[j, 1])
        return self.profile_uw(j, du, dw)

    def lattice_moments(self, n: int) -> dict:
        """Grid means of ``psi_j`` and ``psi_j^2`` on the ``n**3`` grid.

        ``x -> (l_j.x, e_j.x)`` maps the ``n**3`` grid onto the ``n x n``
        lattice with equal fibres (the form pair is unimodular), so these
        two-dimensional means equal the three-dimensional grid means.
        """
        vals = [self.psi_lattice(j, n) for j in range(self.J)]
        return {"mean": np.array([v.mean() for v in vals]), "mean_sq": np.array([(v * v).mean() for v in vals])}

    # Evaluation -------------------------------------------------------------

    def evaluate(self, R, x: np.ndarray) -> np.ndarray:
        """``W(R, x)`` for points with leading axis 3."""
        G = self.gamma(R)
        out = np.zeros(np.shape(x))
        for j in range(self.J):
            out += (G[j] * self.psi(j, x))[None] * self.directions[j].reshape((3,) + (1,) * (np.ndim(x) - 1))
        return out

    def field(self, R, n: int) -> VectorField:
        g = Grid(n)
        return VectorField(g, self.evaluate(R, g.coords()), name="mikado")

    def second_moment(self, R, n: int) -> np.ndarray:
        """Grid mean of ``W⊗W`` using pipe disjointness and the lattice reduction."""
        g2 = self.gamma_sq(R)
        ms = self.lattice_moments(n)["mean_sq"]
        return np.einsum("j,j,ja,jb->ab", g2, ms, self.directions, self.directions)

    def disjointness_defect(self, n: int) -> float:
        """``max sum_{i != j} |psi_i psi_j|`` on the ``n**3`` grid."""
        P = np.abs(self.psi_grid(n))
        s = P.sum(axis=0)
        return float(np.max(s * s - (P * P).sum(axis=0)))

    # Spectra ----------------------------------------------------------------

    @cached_property
    def _spectra(self) -> list:
        n = SPECTRUM_N
        return [np.fft.fft2(self.psi_lattice(j, n)) / n**2 for j in range(self.J)]

    @cached_property
    def _sq_spectra(self) -> list:
        n = SPECTRUM_N
        return [np.fft.fft2(self.psi_lattice(j, n) ** 2) / n**2 for j in range(self.J)]

    def _pipe_modes(self, j: int, kmax: int, squared: bool = False) -> tuple:
        n = SPECTRUM_N
        f = np.fft.fftfreq(n, 1.0 / n).astype(int)
        a, b = np.meshgrid(f, f, indexing="ij")
        m = a[..., None] * self.L[j] + b[..., None] * self.E[j]
        keep = (np.abs(m).max(axis=-1) <= kmax) & ((a != 0) | (b != 0))
        spec = (self._sq_spectra if squared else self._spectra)[j]
        return m[keep], spec[keep]

    def pipe_lattice_modes(self, j: int, kmax: int) -> tuple:
        """Lattice indices ``(a, b)``, modes ``m = a l_j + b e_j`` and coefficients of ``psi_j``.

        Only nonzero modes with ``max|m_i| <= kmax`` are kept, so
        ``psi_j(x) ~ sum c exp(2 pi i (a l_j.x + b e_j.x))``.
        """
        n = SPECTRUM_N
        f = np.fft.fftfreq(n, 1.0 / n).astype(int)
        a, b = np.meshgrid(f, f, indexing="ij")
        m = a[..., None] * self.L[j] + b[..., None] * self.E[j]
        keep = (np.abs(m).max(axis=-1) <= kmax) & ((a != 0) | (b != 0)) & (np.abs(self._spectra[j]) > 0)
        return a[keep], b[keep], m[keep], self._spectra[j][keep]

    @cached_property
    def mean_sq(self) -> np.ndarray:
        """``<psi_j^2>`` over the fast variable (lattice quadrature at the spectrum resolution)."""
        return np.array([s[0, 0].real for s in self._sq_spectra])

    def parseval_share(self, kmax: int) -> np.ndarray:
        """Fraction of ``<psi_j^2>`` carried by the modes kept at ``kmax``."""
        return np.array([np.sum(np.abs(self.pipe_lattice_modes(j, kmax)[3]) ** 2) for j in range(self.J)]) / self.mean_sq

    def fourier_data(self, R, kmax: Optional[int] = None) -> MikadoFourier:
        """Per-pipe Fourier data of ``W(R, .)`` and nonzero modes of ``W⊗W(R, .)``.

        ``kmax`` bounds ``max|m_i|`` with physical wavevector ``k = 2 pi m``.
        """
        kmax = self.kmax if kmax is None else int(kmax)
        if kmax >= SPECTRUM_N // 2:
            raise ValueError(f"kmax must be below {SPECTRUM_N // 2}")
        R = np.asarray(R, dtype=float)
        G = self.gamma(R)
        g2 = G * G
        modes, pipes, amps, dirs = [], [], [], []
        cm, cc = [], []
        for j in range(self.J):
            m, c = self._pipe_modes(j, kmax)
            nz = np.abs(c) > 0
            m, c = m[nz], c[nz]
            modes.append(m)
            pipes.append(np.full(len(m), j))
            amps.append(G[j] * np.abs(c))
            dirs.append((c / np.abs(c))[:, None] * self.directions[j][None, :])
            m2, c2 = self._pipe_modes(j, kmax, squared=True)
            cm.append(m2)
            cc.append((g2[j] * c2)[:, None] * sym6(np.outer(self.directions[j], self.directions[j]))[None, :])
        c_modes = np.concatenate(cm)
        C = np.concatenate(cc)
        # Pipes sharing a wavevector add their contributions.
        uniq, inv = np.unique(c_modes, axis=0, return_inverse=True)
        Cu = np.zeros((len(uniq), 6), dtype=complex)
        np.add.at(Cu, inv.ravel(), C)
        mode0 = np.einsum("j,j,ja,jb->ab", g2, [s[0, 0].real for s in self._sq_spectra], self.directions, self.directions)
        return MikadoFourier(
            R=R, kmax=kmax, modes=np.concatenate(modes), pipe=np.concatenate(pipes),
            a=np.concatenate(amps), A=np.concatenate(dirs), c_modes=uniq, C=Cu, mode0=mode0,
        )

    def decay_fit(self, R=None, shell_range=(40, 200)) -> dict:
        """Log-log slope of the shell envelope ``max |a_k|`` against ``|k|``."""
        R = np.eye(3) if R is None else R
        fd = self.fourier_data(R, kmax=SPECTRUM_N // 2 - 1)
        kn = np.linalg.norm(fd.modes, axis=1)
        lo, hi = shell_range
        edges = np.geomspace(lo, hi, 16)
        xs, ys = [], []
        for e0, e1 in zip(edges[:-1], edges[1:]):
            sel = (kn >= e0) & (kn < e1)
            if np.any(sel):
                xs.append(math.log(2 * math.pi * math.sqrt(e0 * e1)))
                ys.append(math.log(fd.a[sel].max()))
        slope = np.polyfit(xs, ys, 1)[0]
        return {"exponent": float(-slope), "log_k": xs, "log_a": ys}

    # Potentials -------------------------------------------------------------

    @cached_property
    def _potential_splines(self) -> list:
        """Spline coefficients of ``V_j(u, w)`` with ``curl V_j(l.x, e.x) = psi_j xi_j``."""
        n = SPECTRUM_N
        f = np.fft.fftfreq(n, 1.0 / n)
        a, b = np.meshgrid(f, f, indexing="ij")
        out = []
        for j in range(self.J):
            m = a[..., None] * self.L[j] + b[..., None] * self.E[j]
            k = 2 * np.pi * m
            kk = np.einsum("...c,...c->...", k, k)
            kk[0, 0] = 1.0
            spec = self._spectra[j].copy()
            spec[0, 0] = 0.0
            Vh = 1j * np.cross(k, self.directions[j]) * (spec / kk)[..., None]
            V = np.real(np.fft.ifft2(Vh * n * n, axes=(0, 1)))
            out.append([ndimage.spline_filter(V[..., c], order=SPLINE_ORDER, mode="grid-wrap") for c in range(3)])
        return out

    def potential(self, R, x: np.ndarray) -> np.ndarray:
        """``U(R, x)`` with ``curl U = W(R, .)``; points have leading axis 3."""
        G = self.gamma(R)
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        n = SPECTRUM_N
        for j in range(self.J):
            u = np.mod(np.tensordot(self.L[j].astype(float), x, axes=(0, 0)), 1.0) * n
            w = np.mod(np.tensordot(self.E[j].astype(float), x, axes=(0, 0)), 1.0) * n
            pts = np.stack([u.ravel(), w.ravel()])
            for c in range(3):
                vals = ndimage.map_coordinates(self._potential_splines[j][c], pts, order=SPLINE_ORDER, mode="grid-wrap", prefilter=False)
                out[c] += G[j] * vals.reshape(u.shape)
        return out

    # Serialization ------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "directions": self.direction_int.tolist(),
            "l_forms": self.L.tolist(),
            "e_forms": self.E.tolist(),
            "centers": self.centers.tolist(),
            "radius": self.radius,
            "profile": {"kind": "(w/r)(1-s^2)^p", "power": self.power, "norm_const": self.norm_const},
            "kmax": self.kmax,
            "nbhd_radius": self.nbhd_radius,
            "separation": self.separation,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MikadoFamily":
        return build_family(
            tube_radius=d["radius"], kmax=d["kmax"], nbhd_radius=d["nbhd_radius"],
            centers=d["centers"], power=d["profile"]["power"],
        )


def default_kmax(n: int) -> int:
    """Grid Nyquist over three."""
    return max(1, (n // 2) // 3)


def build_family(
    n_directions: int = 6,
    tube_radius: float = DEFAULT_RADIUS,
    kmax: int = 10,
    nbhd_radius: float = DEFAULT_NBHD_RADIUS,
    centers=None,
    power: int = PROFILE_POWER,
) -> MikadoFamily:
    """Build and check the six-pipe family.

    Raises ``TubeIntersectionError`` if axes are closer than two radii and
    ``PositivityError`` (with the minimizing ``R``) if some ``Gamma_j^2`` fails
    to be positive on the ball.
    """
    if n_directions != 6:
        raise ValueError("only the six-direction family is implemented")
    fam = MikadoFamily(tube_radius, kmax, nbhd_radius, centers, power)
    if fam.separation <= 2 * fam.radius:
        raise TubeIntersectionError(f"tubes intersect: axis separation {fam.separation:.5f} <= 2r = {2 * fam.radius:.5f}")
    pm = fam.positivity_margin()
    if pm["min_gamma_sq"] <= 0:
        raise PositivityError(f"Gamma positivity fails on the neighbourhood: min Gamma^2 = {pm['min_gamma_sq']:.3e}", R=pm["R"])
    return fam


def potential_form(k, A) -> np.ndarray:
    """``(i k x A) / |k|^2``, whose mode has curl ``A exp(i k.x)`` when ``A.k = 0``."""
    k = np.asarray(k, dtype=float)
    kk = float(k @ k)
    if kk == 0.0:
        raise ZeroModeError("potential undefined for k = 0")
    return 1j * np.cross(k, np.asarray(A, dtype=complex)) / kk


def lattice_sum_inv4(kmax: int) -> float:
    """``sum_{0 < max|m_i| <= kmax} |2 pi m|^{-4}``."""
    r = np.arange(-kmax, kmax + 1, dtype=float)
    m2 = r[:, None, None] ** 2 + r[None, :, None] ** 2 + r[None, None, :] ** 2
    m2[kmax, kmax, kmax] = np.inf
    return float(np.sum(m2**-2.0)) / (2 * math.pi) ** 4


def lattice_tail_inv4(kmax: int) -> float:
    """Bound on ``sum_{max|m_i| > kmax} |2 pi m|^{-4}``.

    The shell ``max|m_i| = s`` has ``24 s^2 + 2`` points with ``|m| >= s``,
    so the tail is at most ``int_K^inf (24/s^2 + 2/s^4) ds``.
    """
    K = float(kmax)
    return (24.0 / K + 2.0 / (3.0 * K**3)) / (2 * math.pi) ** 4


def geometric_constants(family: MikadoFamily, kmax: Optional[int] = None, samples: int = 64, seed: int = 0) -> dict:
    """``C_bar = max |a_k(R)| |k|^5`` and ``M = 64 C_bar sum_{0<|k|<=kmax} |k|^-4`` plus a tail bound.

    ``C_bar`` maximizes over ``Id``, ``samples`` random ``R`` in the ball and every
    mode resolved by the pipe spectra, so it does not depend on ``kmax``; the
    truncation only enters the lattice sum.
    """
    kmax = family.kmax if kmax is None else int(kmax)
    Rs = np.concatenate([np.eye(3)[None], sample_ball(np.random.default_rng(seed), samples, family.nbhd_radius)])
    fd = family.fourier_data(np.eye(3), SPECTRUM_N // 2 - 1)
    k5 = np.linalg.norm(fd.k, axis=1) ** 5
    base = fd.a / family.gamma(np.eye(3))[fd.pipe]
    G = family.gamma(Rs)
    env = np.array([np.max(base[fd.pipe == j] * k5[fd.pipe == j]) for j in range(family.J)])
    C_bar = float(np.max(G * env[None, :]))
    s = lattice_sum_inv4(kmax)
    tail = 64.0 * C_bar * lattice_tail_inv4(kmax)
    return {"C_bar": C_bar, "M": 64.0 * C_bar * s, "sum_inv4": s, "tail_bound": tail, "kmax": kmax, "samples": len(Rs)}
