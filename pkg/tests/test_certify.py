import numpy as np
import pytest

from barsim.certify import (
    BarrierCertificate,
    CertifyError,
    check_bac,
    halton,
    load_certificate,
    lyap_sublevel_bac,
    save_certificate,
)
from barsim.model import load_text
from barsim.poly import Polynomial

ONE_D_BAND = """
states x
inputs u
params eta = 0.1
dynamics
  dx/dt = u
admissible
  x in [-2, 2]
controls
  u in [-1, 1]
unsafe when 1 - x^2 < 0
init
  x in [-0.5, 0.5]
"""


def one_d_system():
    return load_text(ONE_D_BAND, name="one_d_band")


def band_cert(gamma=1.0):
    # h = 1 - x^2
    return BarrierCertificate(h=Polynomial.constant(1.0) - Polynomial.var("x") ** 2, gamma=gamma)


class TestCheckBac:
    def test_certified_stable_loop(self):
        sys = one_d_system()
        report = check_bac(sys, band_cert(), closed_loop=lambda x: (-x,),
                           closed_loop_polys=(-Polynomial.var("x"),), budget=20000)
        # dh/dt + h = 2x^2 + 1 - x^2 = x^2 + 1 >= 1 everywhere
        assert report.certified
        assert report.interval_margin is not None
        assert report.interval_margin[0] >= 0
        assert report.clause_margins["(iii)"] >= 1.0 - 1e-9

    def test_falsified_unstable_loop(self):
        sys = one_d_system()
        report = check_bac(sys, band_cert(), closed_loop=lambda x: (x,),
                           closed_loop_polys=(Polynomial.var("x"),), budget=20000)
        # dh/dt + h = -2x^2 + 1 - x^2 = 1 - 3x^2 < 0 for |x| > 0.577
        assert report.verdict == "falsified"
        assert report.violated_clause.startswith("(iii)")
        x = report.counterexample[0]
        assert 1 - 3 * x * x < 0
        assert report.counterexample_value < 0

    def test_constant_negative_h_falsified_clause_i(self):
        sys = one_d_system()
        report = check_bac(sys, BarrierCertificate(h=Polynomial.constant(-1.0)),
                           closed_loop=lambda x: (-x,), budget=1000)
        assert report.verdict == "falsified"
        assert report.violated_clause.startswith("(i)")

    def test_zero_budget_rejected(self):
        with pytest.raises(CertifyError):
            check_bac(one_d_system(), band_cert(), closed_loop=lambda x: (-x,), budget=0)

    def test_falsification_completeness_at_scale(self):
        # sign-flipped derivative clause never certifies at budget >= 1e5
        sys = one_d_system()
        report = check_bac(sys, band_cert(), closed_loop=lambda x: (x,),
                           closed_loop_polys=(Polynomial.var("x"),), budget=100000)
        assert report.verdict == "falsified"

    def test_margin_monotone_in_depth(self):
        sys = one_d_system()
        prev_lo = -np.inf
        for depth in (0, 2, 4, 8):
            report = check_bac(sys, band_cert(), closed_loop=lambda x: (-x,),
                               closed_loop_polys=(-Polynomial.var("x"),), budget=2000, depth=depth)
            lo, hi = report.interval_margin
            assert lo >= prev_lo - 1e-15
            prev_lo = lo

    def test_gamma_must_be_positive(self):
        with pytest.raises(CertifyError):
            BarrierCertificate(h=Polynomial.var("x"), gamma=0.0)


TWO_D_HALF = """
states x y
inputs u
params eta = 0.1
dynamics
  dx/dt = -x + u
  dy/dt = -y
admissible
  x in [-2, 2]
  y in [-2, 2]
controls
  u in [-1, 1]
unsafe when 1 - x < 0
init
  x in [-0.5, 0.5]
  y in [-0.5, 0.5]
"""


class TestLyapSublevel:
    def test_one_d_closed_form(self):
        # V = x^2, unsafe |x| > 2 -> c = 4, h = 4 - x^2
        text = ONE_D_BAND.replace("unsafe when 1 - x^2 < 0", "unsafe when 4 - x^2 < 0").replace(
            "x in [-2, 2]", "x in [-3, 3]")
        sys = load_text(text)
        V = Polynomial.var("x") ** 2
        bac = lyap_sublevel_bac(V, sys, depth=14)
        c = bac.h.eval_map({"x": 0.0})
        assert c == pytest.approx(4.0, abs=2e-2)
        assert c <= 4.0  # certified from below
        assert bac.h == Polynomial.constant(c) - V

    def test_two_d_lagrange(self):
        # V = x^2 + y^2, unsafe {x > 1} -> c = 1 at (1, 0)
        sys = load_text(TWO_D_HALF)
        V = Polynomial.var("x") ** 2 + Polynomial.var("y") ** 2
        bac = lyap_sublevel_bac(V, sys, depth=16)
        c = bac.h.eval_map({"x": 0.0, "y": 0.0})
        assert c == pytest.approx(1.0, abs=5e-2)
        assert c <= 1.0

    def test_degenerate_boundary_through_origin(self):
        # unsafe set touches the V = 0 point -> c <= 0 -> error
        text = ONE_D_BAND.replace("unsafe when 1 - x^2 < 0", "unsafe when 0 - x^2 < 0")
        sys = load_text(text)
        with pytest.raises(CertifyError, match="not positive"):
            lyap_sublevel_bac(Polynomial.var("x") ** 2, sys, depth=10)

    def test_unreachable_boundary(self):
        # unsafe region entirely outside the admissible box
        text = ONE_D_BAND.replace("unsafe when 1 - x^2 < 0", "unsafe when 25 - x^2 < 0")
        sys = load_text(text)
        with pytest.raises(CertifyError, match="unreachable"):
            lyap_sublevel_bac(Polynomial.var("x") ** 2, sys, depth=10)

    def test_clause_ii_holds_on_unsafe_samples(self):
        sys = load_text(TWO_D_HALF)
        V = Polynomial.var("x") ** 2 + Polynomial.var("y") ** 2
        bac = lyap_sublevel_bac(V, sys, depth=16)
        rng = np.random.default_rng(9)
        pts = rng.uniform([1.0000001, -2], [2, 2], size=(2000, 2))
        h_fn = bac.h.evaluator(("x", "y"))
        assert (np.asarray(h_fn(*pts.T)) < 0).all()


class TestHalton:
    def test_deterministic(self):
        assert np.array_equal(halton(3, 100), halton(3, 100))

    def test_range_and_spread(self):
        pts = halton(2, 1000)
        assert pts.min() >= 0 and pts.max() < 1
        assert abs(pts[:, 0].mean() - 0.5) < 0.02


class TestCertificateFiles:
    def test_roundtrip(self, tmp_path):
        bac = band_cert(gamma=2.0)
        path = tmp_path / "cert.json"
        save_certificate(bac, path)
        again = load_certificate(path)
        assert again.h == bac.h and again.gamma == bac.gamma
