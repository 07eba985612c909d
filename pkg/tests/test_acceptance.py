"""Acceptance criteria 1-9, each at its stated tolerance and runtime budget."""

import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from ciforge import scheme as S
from ciforge import singular as G
from ciforge.calculus import (
    biot_savart,
    curl,
    div,
    inverse_divergence,
    laplacian,
    solve_pressure,
    stationary_phase_probe,
)
from ciforge.euler import EulerState, cfl_limit, divergence_sup, flow_map, step
from ciforge.fields import (
    Grid,
    ScalarField,
    SymTensorField,
    TimeSlab,
    VectorField,
    cet_commutator,
    holder_seminorm,
    mollify,
)
from ciforge.mikado import build_family, geometric_constants, sample_ball
from ciforge.params import dimension_bounds, infimum_closed_form, infimum_scan, scales

from helpers import band_limited, band_limited_block, desk_shear_zero, record, shear_field

pytestmark = pytest.mark.slow


def rel(a, b):
    return float(np.abs(a - b).max() / np.abs(b).max())


def test_criterion_1_operator_identities():
    start = time.perf_counter()
    worst = {"div R f": 0.0, "curl B v": 0.0, "pressure": 0.0}
    for n in (32, 64):
        rng = np.random.default_rng(100 + n)
        g = Grid(n)
        for _ in range(100):
            f = VectorField(g, band_limited_block(n, 3, 6, rng))
            worst["div R f"] = max(worst["div R f"], rel(div(inverse_divergence(f)).data, f.data))
            v = curl(VectorField(g, band_limited_block(n, 3, 6, rng)))
            worst["curl B v"] = max(worst["curl B v"], rel(curl(biot_savart(v)).data, v.data))
            R = SymTensorField(g, band_limited_block(n, 6, 6, rng))
            dd = div(div(v.outer() - R))
            worst["pressure"] = max(worst["pressure"], rel(laplacian(solve_pressure(v, R)).data, -dd.data))
    secs = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-10 and secs < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record(1, ok, f"operators: {detail} (tol 1e-10); {secs:.0f} s (< 60 s)")


def test_criterion_2_mikado_suite():
    start = time.perf_counter()
    fam = build_family()
    rng = np.random.default_rng(0)
    Rs = sample_ball(rng, 50, 0.5)
    g2 = fam.gamma_sq(Rs)
    positive = np.all(g2 > 0, axis=1)
    ms = fam.lattice_moments(128)
    P64 = fam.psi_grid(64)
    g = Grid(64)
    worst = {"mean": 0.0, "moment": 0.0, "div_outer": 0.0, "orth": 0.0}
    for R in Rs[positive]:
        Gm = fam.gamma(R)
        mean = np.einsum("j,j,ja->a", Gm, ms["mean"], fam.directions)
        worst["mean"] = max(worst["mean"], float(np.abs(mean).max()))
        worst["moment"] = max(worst["moment"], float(np.abs(fam.second_moment(R, 128) - R).max()))
        W = VectorField(g, np.einsum("j,ja,jxyz->axyz", Gm, fam.directions, P64))
        worst["div_outer"] = max(worst["div_outer"], div(W.outer()).sup())
        worst["orth"] = max(worst["orth"], max(fam.fourier_data(R).orthogonality_residuals().values()))
    gc, gc2 = geometric_constants(fam, kmax=10), geometric_constants(fam, kmax=20)
    m_drift = abs(gc2["M"] - gc["M"])
    secs = time.perf_counter() - start
    tols = {"mean": 1e-12, "moment": 1e-6, "div_outer": 1e-8, "orth": 1e-10}
    ok = (positive.all() and all(worst[k] <= tols[k] for k in tols)
          and m_drift < gc["tail_bound"] and secs < 120)
    margin = fam.positivity_margin(0.5)
    detail = (f"{int(positive.sum())}/50 R in B_1/2(Id) admit Gamma > 0 "
              f"(exact min Gamma^2 on the ball {margin['min_gamma_sq']:.3f}, positivity radius {margin['max_radius']:.4f}); "
              + ", ".join(f"{k} {worst[k]:.1e}" for k in tols)
              + f"; M drift {m_drift:.2e} < tail {gc['tail_bound']:.2e}; {secs:.0f} s")
    assert record(2, ok, detail)


def _flow(n, K, amp, seed):
    v = curl(VectorField(Grid(n), band_limited(n, 3, K, np.random.default_rng(seed))))
    return v * (amp / v.sup())


def test_criterion_3_euler_solver():
    start = time.perf_counter()
    g = Grid(64)
    x, y = g.coords()[:2]
    tp = 2 * np.pi
    steady = {
        "shear": shear_field(64),
        "eigenflow": VectorField(g, np.stack([-np.cos(tp * x) * np.sin(tp * y), np.sin(tp * x) * np.cos(tp * y), 0 * x])),
    }
    dev = {}
    for name, v in steady.items():
        st = EulerState(v, 0.0)
        for _ in range(100):
            st = step(st, cfl_limit(v))
        dev[name] = float(np.abs(st.v.data - v.data).max())
    w = _flow(64, 3, 0.2, 7)
    st = EulerState(w, 0.0)
    for _ in range(100):
        st = step(st, 0.5 * cfl_limit(w))
    drift = abs(st.v.energy() - w.energy())
    const = 0.0
    for seed in range(10):
        v = _flow(16, 2, 0.3, 10 + seed)
        t = 0.1
        slab = TimeSlab(np.linspace(0.0, t, 3), [v] * 3)
        d = flow_map(slab, 0.0, t).gradient() - np.eye(3)[:, :, None, None, None]
        dn = np.linalg.norm(np.moveaxis(d, (0, 1), (-2, -1)), ord=2, axis=(-2, -1)).max()
        const = max(const, dn / (t * holder_seminorm(v, 1)))
    secs = time.perf_counter() - start
    ok = max(dev.values()) <= 1e-6 and drift <= 1e-8 and divergence_sup(st.v) <= 1e-10 and const <= 2 and secs < 300
    detail = (f"shear dev {dev['shear']:.1e}, eigenflow dev {dev['eigenflow']:.1e} (tol 1e-6, n=64, 100 steps); "
              f"energy drift {drift:.1e} (tol 1e-8); flow-map constant {const:.3f} (<= 2); {secs:.0f} s")
    assert record(3, ok, detail)


@pytest.fixture(scope="module")
def desk():
    return desk_shear_zero()


def test_criterion_4_gluing_step(desk):
    gl, pair, B0, B1, P = desk["gl"], desk["pair"], desk["B0"], desk["B1"], desk["P"]
    start = time.perf_counter()
    s1 = scales(P, 1)
    exact = all(np.array_equal(gl.velocity(float(t)).data, pair.velocity(float(t)).data)
                for a, b in B0.good() for t in np.linspace(a, b, 7))
    chk = S.glue_checks(gl, B0, B1, residual_times=S.glue_residual_times(gl, 1), residual_h=1e-4)
    bound = 10 * float(s1.tau_q) / float(s1.theta_q) * B0.measure
    delta1 = float(s1.delta_q)
    secs = desk["seconds"]["glue"] + time.perf_counter() - start
    ok = (exact and chk["support_in_I"] and chk["leak"] == 0.0 and chk["partition_error"] <= 1e-12
          and B1.measure <= bound and chk["residual_max"] <= 1e-3 * delta1 and secs < 600)
    detail = (f"good-set bit-exact {exact}; support in union I_i {chk['support_in_I']} (leak {chk['leak']:.0e}); "
              f"partition {chk['partition_error']:.1e}; |B1| {B1.measure:.4f} <= {bound:.4f}; "
              f"ER residual {chk['residual_max']:.1e} <= {1e-3 * delta1:.1e}; {secs:.0f} s")
    assert record(4, ok, detail)


def test_criterion_5_perturbation_step(desk):
    pp, gl, P = desk["pp"], desk["gl"], desk["P"]
    start = time.perf_counter()
    ts = [float(np.mean(x)) for x in gl.I_intervals()[1:3]]
    lo, hi = pp.cutoffs.support(1)
    ts.append(lo + 0.03 * (hi - lo))
    c = S.perturb_checks(pp, ts, M=P.M, residual_h=1e-4)
    guard = desk["prep"]["guards"]["grad_phi_dev"] <= 0.5
    secs = desk["seconds"]["perturb"] + time.perf_counter() - start
    ok = (c["div_w"] <= 1e-10 and c["support_in_real_bad"] and c["zero_off_support"]
          and (not guard or c["wo_sup"] <= c["wo_bound"]) and c["osc_two_scale"] <= c["osc_tolerance"]
          and c["phase_residual"] <= 1e-6 and secs < 900)
    detail = (f"div w {c['div_w']:.1e}; supp w in eroded bad set {c['support_in_real_bad'] and c['zero_off_support']}; "
              f"|w_o| {c['wo_sup']:.2e} <= {c['wo_bound']:.2e} (grad-phi guard {guard}); "
              f"oscillation {c['osc_two_scale']:.1e} <= {c['osc_tolerance']:.1e}; "
              f"phase FD/analytic {c['phase_residual']:.1e}; {secs:.0f} s")
    assert record(5, ok, detail)


def _slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def test_criterion_6_scaling_laws():
    start = time.perf_counter()
    g = Grid(64)
    f = ScalarField(g, np.sin(2 * np.pi * g.coords()[0]))
    ells = [1 / 8, 1 / 16, 1 / 32]
    cet = _slope(ells, [cet_commutator(f, f, l) for l in ells])
    moll = _slope(ells, [np.abs(mollify(f, l).values - f.values).max() for l in ells])
    Ns = np.array([2, 4, 8, 16, 20])
    one = ScalarField(g, np.ones(g.shape))
    alpha = 0.5
    sp = _slope(2 * np.pi * Ns, [stationary_phase_probe(one, VectorField.zeros(g), (1, 0, 0), 2 * np.pi * N, alpha) for N in Ns])
    secs = time.perf_counter() - start
    ok = abs(cet - 2) <= 0.1 and abs(moll - 2) <= 0.1 and abs(sp + (1 - alpha)) <= 0.15 and secs < 300
    detail = f"CET slope {cet:.3f}; mollification slope {moll:.3f}; stationary phase slope {sp:.3f} (target {-(1 - alpha)}); {secs:.0f} s"
    assert record(6, ok, detail)


def test_criterion_7_dimension_machinery():
    start = time.perf_counter()
    d = G.box_dimension(G.IntervalFamilySequence(G.cantor_levels(8)), levels=range(1, 9))["dimension"]
    betas = np.linspace(0.02, 0.32, 10)
    scan = max(abs(infimum_scan(float(b))["value"] - (0.5 + 0.5 * 2 * b / (1 - b))) for b in betas)
    closed = max(abs(infimum_closed_form(float(b)) - (0.5 + 0.5 * 2 * b / (1 - b))) for b in betas)
    third = dimension_bounds(Fraction(1, 3), Fraction(11, 10), Fraction(0), Fraction(0))
    exact = third["lower_bound"] == 1 and third["theorem_bound"] == 1
    secs = time.perf_counter() - start
    ok = abs(d - 0.6309) <= 0.02 and scan <= 1e-3 and closed <= 1e-12 and exact and secs < 60
    detail = (f"Cantor dimension {d:.4f}; infimum scan error {scan:.1e} over 10 beta (tol 1e-3); "
              f"boundary values at 1/3 exact {exact}; {secs:.0f} s")
    assert record(7, ok, detail)


def _cantor_function(digits):
    out = []
    for i in range(3**digits + 1):
        if i == 3**digits:
            out.append(1.0)
            continue
        val, w = 0.0, 0.5
        for k in range(digits):
            dgt = (i // 3 ** (digits - 1 - k)) % 3
            if dgt == 1:
                val += w
                break
            val += w * (dgt == 2)
            w /= 2
        out.append(val)
    return np.array(out)


def test_criterion_8_increase_lemma_harness():
    start = time.perf_counter()
    theta = math.log(2) / math.log(3)
    e = G.EnergyProfile(np.linspace(0, 1, 3**7 + 1), _cantor_function(7))
    levels = G.cantor_levels(6)
    passes = [G.holder_increase_bound(e, levels[k], theta)["pass"] for k in range(1, 7)]
    t = np.linspace(0, 1, 101)
    try:
        G.holder_increase_bound(G.EnergyProfile(t, np.where(t < 0.8, 1.0, 1.5)), [(0.2, 0.3)], 0.5)
        faulted = False
    except G.PreconditionError:
        faulted = True
    secs = time.perf_counter() - start
    ok = all(passes) and faulted and secs < 60
    assert record(8, ok, f"Cantor profile passes levels 1-6: {passes}; off-cover variation faults {faulted}; {secs:.0f} s")


def _json_files(root):
    return sorted(p.relative_to(root) for p in root.rglob("*.json"))


def test_criterion_9_determinism(cli_runs):
    (a, pa), (b, pb) = cli_runs
    files = _json_files(a)
    same = pa.returncode == pb.returncode == 0 and files == _json_files(b) and len(files) > 0
    differing = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    csv_same = all((a / f).read_bytes() == (b / f).read_bytes() for f in sorted(p.relative_to(a) for p in a.rglob("*.csv")))
    ok = same and not differing
    detail = (f"{len(files)} JSON reports compared across two processes; differing {differing}; "
              f"CSV identical {csv_same}; exit codes {pa.returncode}, {pb.returncode}")
    assert record(9, ok, detail)
