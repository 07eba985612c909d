import time
from functools import lru_cache

import numpy as np
import scipy.fft


def band_limited(n, ncomp, K, rng, decay=1.0):
    """Random real mean-zero field with modes ``max|m_i| <= K`` and ``1/(1+|m|^2)^decay`` amplitudes."""
    m = np.fft.fftfreq(n, 1.0 / n)
    m1, m2, m3 = np.meshgrid(m, m, m, indexing="ij")
    keep = (np.maximum(np.maximum(abs(m1), abs(m2)), abs(m3)) <= K)
    keep[0, 0, 0] = False
    amp = keep / (1.0 + m1**2 + m2**2 + m3**2) ** decay
    c = (rng.standard_normal((ncomp, n, n, n)) + 1j * rng.standard_normal((ncomp, n, n, n))) * amp
    return np.real(np.fft.ifftn(c, axes=(1, 2, 3))) * n**3 / max(1, K) ** 3


def band_limited_block(n, ncomp, K, rng):
    """Random real mean-zero field with modes ``max|m_i| <= K``, sampled on the mode block only."""
    idx = np.r_[0 : K + 1, n - K : n]
    c = np.zeros((ncomp, n, n, n // 2 + 1), dtype=complex)
    blk = rng.standard_normal((ncomp, 2 * K + 1, 2 * K + 1, K + 1, 2)) @ np.array([1.0, 1j])
    c[np.ix_(range(ncomp), idx, idx, range(K + 1))] = blk
    c[:, 0, 0, 0] = 0.0
    return scipy.fft.irfftn(c, s=(n, n, n), axes=(1, 2, 3))


def shear_field(n, amp=1.0):
    from ciforge.fields import Grid, VectorField

    g = Grid(n)
    y = g.coords()[1]
    return VectorField(g, np.stack([amp * np.sin(2 * np.pi * y), 0 * y, 0 * y]))


DESK = dict(beta=0.05, b=1.5, gamma=0.15, alpha=1e-4, a=2.0, T=3.4)


@lru_cache(maxsize=1)
def desk_shear_zero():
    """One structure-only step on the shear/zero desk case at n = 32, shared across test modules."""
    import dataclasses

    from ciforge import scheme as S
    from ciforge.fields import VectorField
    from ciforge.mikado import build_family, geometric_constants
    from ciforge.params import SchemeParams

    fam = build_family()
    P = SchemeParams(**DESK)
    P = dataclasses.replace(P, M=geometric_constants(fam)["M"])
    sh = shear_field(32)
    z = VectorField.zeros(sh.grid)
    T_in = S.initial_horizon(sh, z, P)
    pair, B0, rep0 = S.make_initial_pair(S.steady_slab(sh, T_in), S.steady_slab(z, T_in), P)
    t0 = time.perf_counter()
    gl, B1, grep = S.glue(pair, B0)
    t1 = time.perf_counter()
    pp, prep = S.perturb(gl, B1, fam)
    seconds = {"glue": t1 - t0, "perturb": time.perf_counter() - t1}
    return dict(P=P, fam=fam, pair=pair, B0=B0, rep0=rep0, gl=gl, B1=B1, grep=grep, pp=pp, prep=prep, seconds=seconds)


ACCEPTANCE = {}


def record(k, passed, detail):
    """Store and print the one-line verdict of acceptance criterion ``k``."""
    line = f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[k] = line
    print(line)
    return passed
