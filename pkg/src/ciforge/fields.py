"""Periodic fields on the unit 3-torus with spectral calculus and Hölder estimators.

Coefficients follow ``f(x) = sum_m c_m exp(2 pi i m.x)``: forward transforms
are normalized so ``c_0`` is the mean. Physical wavenumbers are ``2 pi m``.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
import scipy.fft as sfft

FFT_WORKERS = int(os.environ.get("CIFORGE_FFT_WORKERS", "1"))

# Component ordering of symmetric tensors.
SYM_INDEX = ((0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (0, 2))
SYM_OF = {}
for _c, (_i, _j) in enumerate(SYM_INDEX):
    SYM_OF[(_i, _j)] = _c
    SYM_OF[(_j, _i)] = _c


class ResolutionError(ValueError):
    """Raised when a requested length scale is not resolved by the grid."""


@dataclass(frozen=True)
class Grid:
    """Uniform ``n**3`` grid on ``[0, 1)**3``."""

    n: int
    dealias_fraction: float = 2.0 / 3.0

    def __post_init__(self):
        if self.n < 16 or self.n & (self.n - 1):
            raise ValueError(f"grid size must be a power of two >= 16, got {self.n}")

    @property
    def spacing(self) -> float:
        return 1.0 / self.n

    @property
    def shape(self) -> tuple:
        return (self.n, self.n, self.n)

    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(3, n, n, n)``."""
        x = np.arange(self.n) / self.n
        return np.array(np.meshgrid(x, x, x, indexing="ij"))

    def modes(self) -> tuple:
        """Integer wavevector components on the rfft layout."""
        return _modes(self.n)

    def wavenumbers(self) -> tuple:
        """``2 pi m`` with Nyquist entries zeroed, on the rfft layout."""
        return _wavenumbers(self.n)

    def dealias_mask(self) -> np.ndarray:
        return _dealias_mask(self.n, self.dealias_fraction)


@lru_cache(maxsize=8)
def _modes(n):
    m = np.fft.fftfreq(n, 1.0 / n)
    m3 = np.fft.rfftfreq(n, 1.0 / n)
    return (m[:, None, None], m[None, :, None], m3[None, None, :])


@lru_cache(maxsize=8)
def _wavenumbers(n):
    out = []
    for m in _modes(n):
        k = 2 * np.pi * m.copy()
        k[np.abs(m) == n // 2] = 0.0
        out.append(k)
    k2 = out[0] ** 2 + out[1] ** 2 + out[2] ** 2
    return out[0], out[1], out[2], k2


@lru_cache(maxsize=8)
def _dealias_mask(n, frac):
    cut = frac * n / 2
    m1, m2, m3 = _modes(n)
    return (np.abs(m1) < cut) & (np.abs(m2) < cut) & (np.abs(m3) < cut)


def fft(a: np.ndarray) -> np.ndarray:
    """Forward transform over the last three axes (coefficients, mean at 0)."""
    return sfft.rfftn(a, axes=(-3, -2, -1), norm="forward", workers=FFT_WORKERS)


def ifft(ah: np.ndarray, n: int) -> np.ndarray:
    return sfft.irfftn(ah, s=(n, n, n), axes=(-3, -2, -1), norm="forward", workers=FFT_WORKERS)


class Field:
    """Base class: ``data`` has shape ``(ncomp, n, n, n)``."""

    NCOMP = 0

    def __init__(self, grid: Grid, data: np.ndarray, time_tag: Optional[float] = None, name: str = ""):
        data = np.asarray(data, dtype=np.float64)
        if data.shape == grid.shape and self.NCOMP == 1:
            data = data[None]
        if data.shape != (self.NCOMP,) + grid.shape:
            raise ValueError(f"{type(self).__name__} expects shape {(self.NCOMP,) + grid.shape}, got {data.shape}")
        self.grid = grid
        self.data = data
        self.time_tag = time_tag
        self.name = name

    @classmethod
    def zeros(cls, grid: Grid, time_tag=None, name=""):
        return cls(grid, np.zeros((cls.NCOMP,) + grid.shape), time_tag, name)

    def _new(self, data):
        return type(self)(self.grid, data, self.time_tag, self.name)

    def copy(self):
        return self._new(self.data.copy())

    def __add__(self, other):
        return self._new(self.data + _data(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self._new(self.data - _data(other))

    def __rsub__(self, other):
        return self._new(_data(other) - self.data)

    def __neg__(self):
        return self._new(-self.data)

    def __mul__(self, other):
        if isinstance(other, ScalarField):
            return self._new(self.data * other.data)
        return self._new(self.data * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._new(self.data / other)

    @property
    def n(self) -> int:
        return self.grid.n

    def mean(self) -> np.ndarray:
        return self.data.mean(axis=(1, 2, 3))

    def pointwise_norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.data**2, axis=0))

    def sup(self) -> float:
        return float(self.pointwise_norm().max())

    def hat(self) -> np.ndarray:
        return fft(self.data)

    @classmethod
    def from_hat(cls, grid: Grid, hat: np.ndarray, time_tag=None, name=""):
        return cls(grid, ifft(hat, grid.n), time_tag, name)

    def is_mean_zero(self, rtol: float = 1e-12) -> bool:
        return float(np.max(np.abs(self.mean()))) <= rtol * max(self.sup(), 1e-300)

    def array_equal(self, other) -> bool:
        return np.array_equal(self.data, other.data)


def _data(x):
    return x.data if isinstance(x, Field) else x


class ScalarField(Field):
    NCOMP = 1

    @property
    def values(self) -> np.ndarray:
        return self.data[0]


class VectorField(Field):
    NCOMP = 3

    def dot(self, other: "VectorField") -> ScalarField:
        return ScalarField(self.grid, np.sum(self.data * other.data, axis=0), self.time_tag)

    def outer(self, other: Optional["VectorField"] = None) -> "SymTensorField":
        """Symmetrized ``(u⊗w + w⊗u)/2``; equals ``u⊗u`` when ``other`` is None."""
        u = self.data
        w = u if other is None else other.data
        d = np.empty((6,) + self.grid.shape)
        for c, (i, j) in enumerate(SYM_INDEX):
            d[c] = u[i] * w[j] if other is None else 0.5 * (u[i] * w[j] + u[j] * w[i])
        return SymTensorField(self.grid, d, self.time_tag)

    def energy(self) -> float:
        """``1/2 mean |v|^2`` (the torus has unit volume)."""
        return 0.5 * float(np.mean(np.sum(self.data**2, axis=0)))


class SymTensorField(Field):
    """Symmetric 3x3 tensor field storing the components (11,22,33,12,23,13)."""

    NCOMP = 6

    def full(self) -> np.ndarray:
        """Dense ``(3, 3, n, n, n)`` view (copy)."""
        out = np.empty((3, 3) + self.grid.shape)
        for i in range(3):
            for j in range(3):
                out[i, j] = self.data[SYM_OF[(i, j)]]
        return out

    @classmethod
    def from_full(cls, grid: Grid, full: np.ndarray, time_tag=None, name=""):
        d = np.empty((6,) + grid.shape)
        for c, (i, j) in enumerate(SYM_INDEX):
            d[c] = full[i, j] if i == j else 0.5 * (full[i, j] + full[j, i])
        return cls(grid, d, time_tag, name)

    @classmethod
    def identity(cls, grid: Grid, scale: float = 1.0, time_tag=None):
        d = np.zeros((6,) + grid.shape)
        d[:3] = scale
        return cls(grid, d, time_tag)

    def pointwise_norm(self) -> np.ndarray:
        """Frobenius norm; off-diagonal entries count twice."""
        d = self.data
        return np.sqrt(np.sum(d[:3] ** 2, axis=0) + 2 * np.sum(d[3:] ** 2, axis=0))

    def trace(self) -> ScalarField:
        return ScalarField(self.grid, self.data[:3].sum(axis=0), self.time_tag)


@dataclass
class TimeSlab:
    """Fields sampled at strictly increasing, uniformly spaced times."""

    times: np.ndarray
    slices: list

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if len(self.times) != len(self.slices):
            raise ValueError("times and slices differ in length")
        if len(self.times) > 1:
            dt = np.diff(self.times)
            if np.any(dt <= 0):
                raise ValueError("slab times must be strictly increasing")
            if np.max(np.abs(dt - dt.mean())) > 1e-9 * max(abs(dt.mean()), 1e-300):
                raise ValueError("slab spacing must be uniform")

    def __len__(self):
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def interval(self) -> tuple:
        return float(self.times[0]), float(self.times[-1])

    def at(self, t: float) -> Field:
        """Linear interpolation in time between neighbouring slices."""
        t0, t1 = self.interval()
        if t < t0 - 1e-12 * max(1, abs(t0)) or t > t1 + 1e-12 * max(1, abs(t1)):
            raise ValueError(f"time {t} outside slab [{t0}, {t1}]")
        if len(self.times) == 1:
            return self.slices[0]
        s = (t - t0) / self.dt
        i = int(min(max(math.floor(s), 0), len(self.times) - 2))
        w = s - i
        if w <= 0.0:
            return self.slices[i]
        if w >= 1.0:
            return self.slices[i + 1]
        a, b = self.slices[i], self.slices[i + 1]
        return a._new((1 - w) * a.data + w * b.data)


# Spectral derivatives -----------------------------------------------------


def derivative_hat(hat: np.ndarray, n: int, orders: Sequence[int]) -> np.ndarray:
    """Apply ``d1^o1 d2^o2 d3^o3`` to coefficients (Nyquist modes dropped)."""
    k1, k2, k3, _ = _wavenumbers(n)
    mult = (1j * k1) ** orders[0] * (1j * k2) ** orders[1] * (1j * k3) ** orders[2]
    return hat * mult


def derivative(f: Field, orders: Sequence[int]) -> Field:
    return f._new(ifft(derivative_hat(f.hat(), f.n, orders), f.n))


def multi_indices(order: int) -> list:
    return [o for o in itertools.product(range(order + 1), repeat=3) if sum(o) == order]


# Hölder estimator -----------------------------------------------------------


def _displacements(n: int) -> list:
    """Deterministic displacement sample: axis and diagonal directions at dyadic lengths."""
    dirs = [
        (1, 0, 0), (0, 1, 0), (0, 0, 1),
        (1, 1, 0), (1, -1, 0), (0, 1, 1), (0, 1, -1), (1, 0, 1), (1, 0, -1),
        (1, 1, 1), (1, 1, -1), (1, -1, 1), (-1, 1, 1),
    ]
    out = []
    s = 1
    while True:
        for d in dirs:
            h = s * np.array(d)
            length = np.linalg.norm(h) / n
            if length <= 0.25 + 1e-12:
                out.append((tuple(int(x) for x in h), length))
        s *= 2
        if s / n > 0.25:
            break
    return out


def seminorm_alpha(data: np.ndarray, n: int, alpha: float, pointwise=None) -> float:
    """``max_h max_x |f(x+h)-f(x)| / |h|^alpha`` over the displacement sample.

    ``data`` has a leading component axis; ``pointwise`` maps component
    differences to a pointwise norm (Euclidean by default).
    """
    if pointwise is None:
        pointwise = lambda d: np.sqrt(np.sum(d * d, axis=0))
    best = 0.0
    for h, length in _displacements(n):
        diff = np.roll(data, shift=(-h[0], -h[1], -h[2]), axis=(1, 2, 3)) - data
        val = float(pointwise(diff).max()) / length**alpha
        best = max(best, val)
    return best


def _pointwise_for(f: Field):
    if isinstance(f, SymTensorField):
        return lambda d: np.sqrt(np.sum(d[:3] ** 2, axis=0) + 2 * np.sum(d[3:] ** 2, axis=0))
    return None


def holder_seminorm(f: Field, s: float) -> float:
    """``[f]_s``: integer ``s`` gives the max derivative sup norm of order ``s``."""
    m = int(math.floor(s + 1e-12))
    al = s - m
    pw = _pointwise_for(f) or (lambda d: np.sqrt(np.sum(d * d, axis=0)))
    hat = f.hat()
    best = 0.0
    for o in multi_indices(m):
        d = ifft(derivative_hat(hat, f.n, o), f.n) if m > 0 else f.data
        if al <= 1e-12:
            val = float(pw(d).max())
        else:
            val = seminorm_alpha(d, f.n, al, pw)
        best = max(best, val)
    return best


def holder_norm(f: Field, s: float) -> float:
    """Discrete ``||f||_s = sum_{j<=m} [f]_j + [f]_{m+alpha}``.

    The seminorm is sampled over dyadic displacements, so the result is a
    lower bound of the continuum norm.
    """
    m = int(math.floor(s + 1e-12))
    al = s - m
    total = sum(holder_seminorm(f, j) for j in range(m + 1))
    if al > 1e-12:
        total += holder_seminorm(f, s)
    return total


# Mollification ---------------------------------------------------------------


def bump(r: np.ndarray) -> np.ndarray:
    """Unnormalized ``exp(-1/(1-r^2))`` on ``r < 1``, zero elsewhere."""
    out = np.zeros_like(r, dtype=np.float64)
    inside = r < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


@lru_cache(maxsize=32)
def _kernel_hat(n: int, ell: float) -> np.ndarray:
    x = np.arange(n) / n
    x = np.where(x >= 0.5, x - 1.0, x)
    r = np.sqrt(x[:, None, None] ** 2 + x[None, :, None] ** 2 + x[None, None, :] ** 2) / ell
    k = bump(r)
    k /= k.sum()
    return sfft.rfftn(k, workers=FFT_WORKERS)


def mollify(f: Field, ell: float) -> Field:
    """Convolve with the radial bump kernel of radius ``ell`` (unit discrete mass)."""
    if not 0 < ell < 0.25:
        raise ValueError(f"mollification length must lie in (0, 1/4), got {ell}")
    if ell < 2 * f.grid.spacing:
        raise ResolutionError(f"mollifier unresolved: ell={ell:.4g} < 2*spacing={2 * f.grid.spacing:.4g}")
    kh = _kernel_hat(f.n, float(ell))
    out = sfft.irfftn(
        sfft.rfftn(f.data, axes=(1, 2, 3), workers=FFT_WORKERS) * kh,
        s=f.grid.shape,
        axes=(1, 2, 3),
        workers=FFT_WORKERS,
    )
    return f._new(out)


def cet_commutator(f: ScalarField, g: ScalarField, ell: float) -> float:
    """``|| f_l g_l - (f g)_l ||_0``."""
    fl, gl = mollify(f, ell), mollify(g, ell)
    fg = ScalarField(f.grid, f.data * g.data)
    return float(np.max(np.abs(fl.data * gl.data - mollify(fg, ell).data)))


# Dumps -----------------------------------------------------------------------


def save_field(f: Field, directory: str, name: Optional[str] = None) -> tuple:
    """Write ``<name>.json`` and ``<name>.f64`` (little-endian, component-major, k fastest)."""
    name = name or f.name
    if not name:
        raise ValueError("field name required for dumping")
    os.makedirs(directory, exist_ok=True)
    header = {
        "name": name,
        "n": f.n,
        "components": f.NCOMP,
        "kind": type(f).__name__,
        "time_tag": f.time_tag,
        "dtype": "<f8",
        "layout": "component,i,j,k (k fastest)",
    }
    hp = os.path.join(directory, name + ".json")
    dp = os.path.join(directory, name + ".f64")
    with open(hp, "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
    np.ascontiguousarray(f.data, dtype="<f8").tofile(dp)
    return hp, dp


def load_field(directory: str, name: str) -> Field:
    with open(os.path.join(directory, name + ".json")) as fh:
        header = json.load(fh)
    cls = {"ScalarField": ScalarField, "VectorField": VectorField, "SymTensorField": SymTensorField}[header["kind"]]
    n = header["n"]
    data = np.fromfile(os.path.join(directory, name + ".f64"), dtype="<f8")
    data = data.reshape((header["components"], n, n, n))
    return cls(Grid(n), data, header["time_tag"], name)
