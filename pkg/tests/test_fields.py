import math

import numpy as np
import pytest

from ciforge.fields import (
    Grid,
    ResolutionError,
    ScalarField,
    SymTensorField,
    TimeSlab,
    VectorField,
    cet_commutator,
    derivative,
    fft,
    holder_norm,
    holder_seminorm,
    ifft,
    load_field,
    mollify,
    save_field,
)
from ciforge.calculus import curl, div, grad

from helpers import band_limited


def sin_x1(n, freq=1):
    g = Grid(n)
    return ScalarField(g, np.sin(2 * np.pi * freq * g.coords()[0]))


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid(8)
    with pytest.raises(ValueError):
        Grid(24)
    assert Grid(16).spacing == 1 / 16


def test_round_trip_random():
    a = np.random.default_rng(0).standard_normal((3, 32, 32, 32))
    assert np.abs(ifft(fft(a), 32) - a).max() <= 1e-13 * np.abs(a).max()


def test_transform_constant():
    h = fft(np.full((16, 16, 16), 2.5))
    assert h[0, 0, 0] == pytest.approx(2.5)
    h[0, 0, 0] = 0
    assert np.abs(h).max() < 1e-15


def test_transform_sine_hand_coefficients():
    n = 16
    h = fft(sin_x1(n).values)
    # sin t = (e^{it} - e^{-it}) / 2i
    assert h[1, 0, 0] == pytest.approx(-0.5j, abs=1e-15)
    assert h[n - 1, 0, 0] == pytest.approx(0.5j, abs=1e-15)
    h[1, 0, 0] = h[n - 1, 0, 0] = 0
    assert np.abs(h).max() < 1e-15


def test_grad_of_sine():
    f = sin_x1(16)
    x = f.grid.coords()[0]
    g = grad(f)
    assert np.abs(g.data[0] - 2 * np.pi * np.cos(2 * np.pi * x)).max() < 1e-12
    assert np.abs(g.data[1:]).max() < 1e-13


def test_div_curl_and_curl_grad_vanish():
    rng = np.random.default_rng(1)
    g = Grid(16)
    A = VectorField(g, band_limited(16, 3, 3, rng))
    assert div(curl(A)).sup() <= 1e-12 * max(1, A.sup())
    f = ScalarField(g, band_limited(16, 1, 3, rng))
    assert curl(grad(f)).sup() <= 1e-12 * max(1, f.sup())


def test_spectral_derivative_against_fourth_order_fd():
    # Central 4th-order FD converges to the spectral derivative at slope 4.
    errs = []
    for n in (16, 32, 64):
        f = sin_x1(n, freq=2)
        d = derivative(f, (1, 0, 0)).values
        v = f.values
        h = 1 / n
        fd = (-np.roll(v, -2, 0) + 8 * np.roll(v, -1, 0) - 8 * np.roll(v, 1, 0) + np.roll(v, 2, 0)) / (12 * h)
        errs.append(np.abs(fd - d).max())
    slopes = np.diff(np.log(errs)) / np.log(0.5)
    assert np.all(np.abs(slopes - 4) < 0.2)


def test_sym_tensor_structure():
    g = Grid(16)
    T = SymTensorField.identity(g, 2.0)
    F = T.full()
    assert np.array_equal(F, np.swapaxes(F, 0, 1))
    assert np.allclose(T.trace().values, 6.0)
    assert T.data.shape[0] == 6


def test_mean_zero_flag():
    f = sin_x1(16)
    assert f.is_mean_zero()
    assert not (f + 1e-6).is_mean_zero()


def test_holder_constant():
    f = ScalarField(Grid(16), np.full((16, 16, 16), -3.0))
    assert holder_norm(f, 0) == 3.0
    for s in (0.5, 1, 1.5, 2.5):
        assert holder_seminorm(f, s) < 1e-12


def test_holder_sine_sup():
    assert holder_norm(sin_x1(16), 0) == pytest.approx(1.0, abs=1e-15)


def test_holder_seminorm_near_lipschitz_limit():
    f = sin_x1(64)
    al = 0.999
    val = holder_seminorm(f, al)
    assert val == pytest.approx((2 * np.pi) ** al, rel=0.02)


def test_holder_estimator_is_lower_bound_of_brute_force():
    # Brute force over all 1D pairs on a fine grid.
    al = 0.5
    x = np.arange(512) / 512
    s = np.sin(2 * np.pi * x)
    d = np.abs(x[:, None] - x[None, :])
    d = np.minimum(d, 1 - d)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.abs(s[:, None] - s[None, :]) / d**al
    brute = np.nanmax(np.where(d > 0, q, 0))
    est = holder_seminorm(sin_x1(32), al)
    assert est <= brute * (1 + 1e-12)
    assert est >= 0.8 * brute


def test_product_and_interpolation_inequalities():
    rng = np.random.default_rng(7)
    g = Grid(16)
    r, s = 1.5, 0.5
    worst_prod, worst_interp = 0.0, 0.0
    for _ in range(50):
        f = ScalarField(g, band_limited(16, 1, 2, rng))
        h = ScalarField(g, band_limited(16, 1, 2, rng))
        fh = ScalarField(g, f.values * h.values)
        lhs = holder_seminorm(fh, r)
        rhs = holder_seminorm(f, r) * h.sup() + f.sup() * holder_seminorm(h, r)
        worst_prod = max(worst_prod, lhs / rhs)
        inter = f.sup() ** (1 - s / r) * holder_seminorm(f, r) ** (s / r)
        worst_interp = max(worst_interp, holder_seminorm(f, s) / inter)
    assert worst_prod <= 2
    assert worst_interp <= 2


def test_mollify_constant_and_mean():
    g = Grid(32)
    c = ScalarField(g, np.full(g.shape, 1.7))
    assert np.abs(mollify(c, 0.1).values - 1.7).max() < 1e-13
    f = ScalarField(g, band_limited(32, 1, 3, np.random.default_rng(2)) + 0.3)
    assert abs(mollify(f, 0.1).mean()[0] - f.mean()[0]) < 1e-13


def test_mollify_unresolved_fault():
    with pytest.raises(ResolutionError):
        mollify(sin_x1(16), 0.1)


def test_mollify_positive_and_linear():
    g = Grid(32)
    rng = np.random.default_rng(3)
    a = ScalarField(g, rng.random(g.shape))
    b = ScalarField(g, rng.random(g.shape))
    assert mollify(a, 0.1).values.min() >= -1e-14
    lhs = mollify(a * 2.0 + b, 0.1).values
    rhs = 2 * mollify(a, 0.1).values + mollify(b, 0.1).values
    assert np.abs(lhs - rhs).max() < 1e-13


def _slope(ells, vals):
    return np.polyfit(np.log(ells), np.log(vals), 1)[0]


def test_mollification_rate_slope_two():
    f = sin_x1(64)
    ells = [1 / 8, 1 / 16, 1 / 32]
    errs = [np.abs(mollify(f, l).values - f.values).max() for l in ells]
    assert abs(_slope(ells, errs) - 2.0) <= 0.1


def test_cet_commutator():
    g = Grid(64)
    f = sin_x1(64)
    one = ScalarField(g, np.ones(g.shape))
    assert cet_commutator(f, one, 0.1) < 1e-13
    ells = [1 / 8, 1 / 16, 1 / 32]
    vals = [cet_commutator(f, f, l) for l in ells]
    assert abs(_slope(ells, vals) - 2.0) <= 0.1
    C = max(v / (l**2 * holder_norm(f, 1) ** 2) for v, l in zip(vals, ells))
    assert 0 < C < 10


def test_time_slab():
    g = Grid(16)
    s = TimeSlab([0.0, 0.5, 1.0], [ScalarField(g, np.full(g.shape, float(i))) for i in range(3)])
    assert s.dt == 0.5
    assert s.at(0.25).values[0, 0, 0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        TimeSlab([0.0, 0.5, 0.7], s.slices)
    with pytest.raises(ValueError):
        TimeSlab([0.0, 0.0, 1.0], s.slices)
    with pytest.raises(ValueError):
        s.at(1.5)


def test_dump_round_trip(tmp_path):
    import json

    g = Grid(16)
    T = SymTensorField(g, np.random.default_rng(4).standard_normal((6,) + g.shape), time_tag=0.25, name="R")
    hp, dp = save_field(T, str(tmp_path))
    header = json.loads(open(hp).read())
    assert header["n"] == 16 and header["components"] == 6 and header["time_tag"] == 0.25
    raw = np.fromfile(dp, dtype="<f8")
    # k fastest: element (c=0, i=0, j=0, k=1) is the second stored value.
    assert raw[1] == T.data[0, 0, 0, 1]
    back = load_field(str(tmp_path), "R")
    assert isinstance(back, SymTensorField) and back.array_equal(T)
