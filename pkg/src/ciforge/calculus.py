"""Nonlocal operators as Fourier multipliers on the unit torus.

Every inverse operator zeroes the ``m = 0`` mode and the Nyquist wavenumbers,
matching the mean-zero convention of the scheme.
"""

from __future__ import annotations

import numpy as np

from .fields import (
    SYM_INDEX,
    Field,
    ScalarField,
    SymTensorField,
    VectorField,
    _wavenumbers,
    fft,
    holder_norm,
    ifft,
)


class MeanError(ValueError):
    """Raised when an operator needing mean-zero input receives a nonzero mean."""


class DegenerateMapError(ValueError):
    """Raised when a phase map has a (near) singular gradient."""


def _inv_k2(n):
    k1, k2, k3, kk = _wavenumbers(n)
    inv = np.zeros_like(kk)
    nz = kk > 0
    inv[nz] = 1.0 / kk[nz]
    return k1, k2, k3, inv


def _require_mean_zero(f: Field, rtol: float = 1e-10):
    m = np.max(np.abs(f.mean()))
    if m > rtol * max(f.sup(), 1e-300):
        raise MeanError(f"nonzero mean: |mean| = {m:.3e}")


# Differential operators ---------------------------------------------------


def grad_hat(fh, n):
    k1, k2, k3, _ = _wavenumbers(n)
    return np.stack([1j * k1 * fh, 1j * k2 * fh, 1j * k3 * fh])


def div_hat(vh, n):
    k1, k2, k3, _ = _wavenumbers(n)
    return 1j * (k1 * vh[0] + k2 * vh[1] + k3 * vh[2])


def curl_hat(vh, n):
    k1, k2, k3, _ = _wavenumbers(n)
    return 1j * np.stack([
        k2 * vh[2] - k3 * vh[1],
        k3 * vh[0] - k1 * vh[2],
        k1 * vh[1] - k2 * vh[0],
    ])


def tensor_div_hat(th, n):
    """Row divergence ``(div T)_i = d_j T_ij`` of a symmetric tensor in 6-component form."""
    k = _wavenumbers(n)[:3]
    out = np.zeros((3,) + th.shape[1:], dtype=complex)
    for c, (i, j) in enumerate(SYM_INDEX):
        out[i] += 1j * k[j] * th[c]
        if i != j:
            out[j] += 1j * k[i] * th[c]
    return out


def grad(f: ScalarField) -> VectorField:
    return VectorField(f.grid, ifft(grad_hat(f.hat()[0], f.n), f.n), f.time_tag)


def div(v: Field) -> Field:
    if isinstance(v, SymTensorField):
        return VectorField(v.grid, ifft(tensor_div_hat(v.hat(), v.n), v.n), v.time_tag)
    return ScalarField(v.grid, ifft(div_hat(v.hat(), v.n), v.n), v.time_tag)


def curl(v: VectorField) -> VectorField:
    return VectorField(v.grid, ifft(curl_hat(v.hat(), v.n), v.n), v.time_tag)


def laplacian(f: Field) -> Field:
    kk = _wavenumbers(f.n)[3]
    return f._new(ifft(-kk * f.hat(), f.n))


def gradient_tensor(v: VectorField) -> np.ndarray:
    """``G[i, j] = d_j v_i`` with shape ``(3, 3, n, n, n)``."""
    k = _wavenumbers(v.n)[:3]
    vh = v.hat()
    return np.stack([np.stack([ifft(1j * k[j] * vh[i], v.n) for j in range(3)]) for i in range(3)])


def gradient_of_map(displacement: VectorField) -> np.ndarray:
    """``grad Phi = Id + grad d`` for ``Phi(x) = x + d(x)``, shape ``(3, 3, n, n, n)``."""
    G = gradient_tensor(displacement)
    for i in range(3):
        G[i, i] += 1.0
    return G


def advect(b: VectorField, f: Field) -> Field:
    """``(b . grad) f`` applied componentwise."""
    k = _wavenumbers(f.n)[:3]
    fh = f.hat()
    out = np.zeros_like(f.data)
    for j in range(3):
        out += b.data[j] * ifft(1j * k[j] * fh, f.n)
    return f._new(out)


# Inverse operators ----------------------------------------------------------


def inverse_divergence_hat(fh, n):
    """Six-component symbol of the symmetric inverse divergence applied to ``fh``."""
    k1, k2, k3, inv = _inv_k2(n)
    k = (k1, k2, k3)
    kf = k1 * fh[0] + k2 * fh[1] + k3 * fh[2]
    out = np.empty((6,) + fh.shape[1:], dtype=complex)
    for c, (i, j) in enumerate(SYM_INDEX):
        term = 0.5j * k[i] * k[j] * kf * inv * inv
        term = term - 1j * (k[i] * fh[j] + k[j] * fh[i]) * inv
        if i == j:
            term = term + 0.5j * kf * inv
        out[c] = term
    return out


def inverse_divergence(f: VectorField, check_mean: bool = True) -> SymTensorField:
    """Symmetric tensor ``R f`` with ``div(R f) = f`` for mean-zero ``f``."""
    if check_mean:
        _require_mean_zero(f)
    return SymTensorField(f.grid, ifft(inverse_divergence_hat(f.hat(), f.n), f.n), f.time_tag)


def biot_savart_hat(vh, n):
    _, _, _, inv = _inv_k2(n)
    return curl_hat(vh, n) * inv


def biot_savart(v: VectorField, check_mean: bool = True) -> VectorField:
    """``(-Laplacian)^{-1} curl v``; ``curl`` of the result recovers div-free ``v``."""
    if check_mean:
        _require_mean_zero(v)
    return VectorField(v.grid, ifft(biot_savart_hat(v.hat(), v.n), v.n), v.time_tag)


def leray_hat(vh, n):
    k1, k2, k3, inv = _inv_k2(n)
    kv = (k1 * vh[0] + k2 * vh[1] + k3 * vh[2]) * inv
    return np.stack([vh[0] - k1 * kv, vh[1] - k2 * kv, vh[2] - k3 * kv])


def leray_project(v: VectorField) -> VectorField:
    return VectorField(v.grid, ifft(leray_hat(v.hat(), v.n), v.n), v.time_tag)


def pressure_hat(th, n):
    """Mean-zero ``p`` solving ``-Laplacian p = div div F`` for the 6-component ``F``."""
    k = _wavenumbers(n)[:3]
    _, _, _, inv = _inv_k2(n)
    dd = np.zeros(th.shape[1:], dtype=complex)
    for c, (i, j) in enumerate(SYM_INDEX):
        mult = -k[i] * k[j] * (1 if i == j else 2)
        dd += mult * th[c]
    return dd * inv


def solve_pressure(v: VectorField, R: SymTensorField | None = None) -> ScalarField:
    """Pressure from ``-Laplacian p = div div (v⊗v - R)``."""
    F = v.outer()
    if R is not None:
        F = F - R
    return ScalarField(v.grid, ifft(pressure_hat(F.hat(), v.n), v.n)[None], v.time_tag)


def inverse_div_of_div(T: SymTensorField) -> SymTensorField:
    """``R div T``; for mean-zero divergence this is the symmetric part reaching ``div T``."""
    return SymTensorField(T.grid, ifft(inverse_divergence_hat(tensor_div_hat(T.hat(), T.n), T.n), T.n), T.time_tag)


def inverse_div_curl(z: VectorField) -> SymTensorField:
    """``R curl z``."""
    return SymTensorField(z.grid, ifft(inverse_divergence_hat(curl_hat(z.hat(), z.n), z.n), z.n), z.time_tag)


# Probes ----------------------------------------------------------------------


def stationary_phase_probe(
    a: ScalarField,
    phi: VectorField,
    k,
    lam: float,
    alpha: float = 0.5,
    direction=(0.0, 1.0, 0.0),
) -> float:
    """``|| R(a e^{i lam k.Phi} e_d) ||_alpha`` on the real part.

    ``phi`` is the displacement ``Phi - x``; ``lam`` must be a multiple of
    ``2 pi`` and ``k`` integer so the phase is periodic.
    """
    g = a.grid
    J = gradient_of_map(phi)
    det = np.linalg.det(np.moveaxis(J, (0, 1), (-2, -1)))
    if np.min(np.abs(det)) < 1e-8:
        raise DegenerateMapError("phase map gradient is degenerate on the grid")
    kk = np.asarray(k, dtype=float)
    phase = lam * np.tensordot(kk, g.coords() + phi.data, axes=(0, 0))
    s = a.values * np.cos(phase)
    d = np.asarray(direction, dtype=float)
    f = VectorField(g, d[:, None, None, None] * s[None])
    f = f - f.mean()[:, None, None, None]
    return holder_norm(inverse_divergence(f, check_mean=False), alpha)


def cz_commutator_probe(b: VectorField, f: Field, alpha: float = 0.5) -> dict:
    """``|| [R curl, b.grad] f ||_alpha`` with the reference product ``||b||_{1+a} ||f||_a``."""
    if isinstance(f, ScalarField):
        f = VectorField(f.grid, np.concatenate([f.data, np.zeros((2,) + f.grid.shape)]))
    bf = advect(b, f)
    first = inverse_div_curl(bf)
    second = advect(b, inverse_div_curl(f))
    comm = first - second
    value = holder_norm(comm, alpha)
    ref = holder_norm(b, 1 + alpha) * holder_norm(f, alpha)
    return {"value": value, "reference": ref, "ratio": value / ref if ref > 0 else 0.0}
