import hashlib
import math

import numpy as np
import pytest

from barsim.certify import BarrierCertificate
from barsim.model import builtin, default_bac, load_text
from barsim.poly import Polynomial
from barsim.switchgen import (
    ALL,
    DeriveError,
    SwitchingArtifact,
    artifact_text,
    derive_artifact,
    lambda_bound,
    load_artifact,
    mu_bounds,
    restricted_region,
    save_artifact,
    taylor_chain,
)

from test_certify import ONE_D_BAND, band_cert, one_d_system


def one_d_artifact(n=1, m=3, strategy="per-action", h=None, gamma=1.0):
    sys = one_d_system()
    sys.baseline = (-Polynomial.var("x"),)
    bc = BarrierCertificate(h=h if h is not None else band_cert().h, gamma=gamma)
    return derive_artifact(sys, bc, n=n, m=m, strategy=strategy, skip_check=True), sys


class TestTaylorChain:
    def test_linear_h(self):
        sys = one_d_system()
        bc = BarrierCertificate(h=Polynomial.var("x"))
        chain = taylor_chain(bc, sys, 1)
        assert chain == [Polynomial.var("x"), Polynomial.var("u"), Polynomial.zero()]

    def test_band_h(self):
        sys = one_d_system()
        chain = taylor_chain(band_cert(), sys, 1)
        x, u = Polynomial.var("x"), Polynomial.var("u")
        assert chain[0] == 1 - x**2
        assert chain[1] == -2.0 * x * u
        assert chain[2] == -2.0 * u * u

    def test_zero_field(self):
        sys = load_text(ONE_D_BAND.replace("dx/dt = u", "dx/dt = 0"))
        chain = taylor_chain(band_cert(), sys, 1)
        assert chain[1].is_zero and chain[2].is_zero

    def test_order_validation(self):
        with pytest.raises(DeriveError):
            taylor_chain(band_cert(), one_d_system(), 0)


class TestLambda:
    def test_zero_remainder(self):
        art, _ = one_d_artifact(h=Polynomial.var("x"))
        for u in (-1.0, 0.0, 0.5, 1.0):
            assert lambda_bound(art, (u,)) == 0.0
        assert art.lambda_global == 0.0

    def test_quadratic_h_constant_field(self):
        # h = x^2, dx/dt = 1, n = 1: h2 = 2, eta = 0.1 -> lambda = |2|/2! * 0.01 = 0.01
        text = ONE_D_BAND.replace("dx/dt = u", "dx/dt = 1")
        sys = load_text(text)
        bc = BarrierCertificate(h=Polynomial.var("x") ** 2)
        art = derive_artifact(sys, bc, n=1, skip_check=True)
        assert lambda_bound(art, (0.0,)) == pytest.approx(0.01, rel=1e-12)

    def test_band_h_per_action(self):
        # h = 1 - x^2, dx/dt = u, n = 1: h2 = -2u^2; at u = 1, lambda = 0.01
        art, _ = one_d_artifact()
        assert lambda_bound(art, (1.0,)) == pytest.approx(0.01, rel=1e-12)
        assert lambda_bound(art, (0.5,)) == pytest.approx(0.0025, rel=1e-12)
        # global = sup over u in [-1, 1]
        assert art.lambda_global == pytest.approx(0.01, rel=1e-9)

    def test_action_outside_control_set(self):
        art, _ = one_d_artifact()
        with pytest.raises(DeriveError, match="outside"):
            lambda_bound(art, (2.0,))


class TestMu:
    def test_linear_decay_field(self):
        # dx/dt = -x over A = [-1, 1], eta = 0.1 -> mu_dec = mu_inc = 0.1
        text = """
states x
inputs u
params eta = 0.1
dynamics
  dx/dt = -x + 0*u
admissible
  x in [-1, 1]
controls
  u in [-1, 1]
unsafe when 1 - x^2 < 0
"""
        sys = load_text(text)
        art = derive_artifact(sys, band_cert(), n=1, skip_check=True)
        dec, inc = mu_bounds(art, (0.0,))
        assert dec[0] == pytest.approx(0.1, rel=1e-12)
        assert inc[0] == pytest.approx(0.1, rel=1e-12)

    def test_fixed_positive_action(self):
        # dx/dt = u with u = 2 fixed, eta = 0.1 -> mu_dec = 0, mu_inc = 0.2
        text = ONE_D_BAND.replace("u in [-1, 1]", "u in [-3, 3]")
        sys = load_text(text)
        art = derive_artifact(sys, band_cert(), n=1, skip_check=True)
        dec, inc = mu_bounds(art, (2.0,))
        assert dec[0] == 0.0
        assert inc[0] == pytest.approx(0.2, rel=1e-12)

    def test_zero_field(self):
        sys = load_text(ONE_D_BAND.replace("dx/dt = u", "dx/dt = 0"))
        art = derive_artifact(sys, band_cert(), n=1, skip_check=True)
        dec, inc = mu_bounds(art, ALL)
        assert dec == (0.0,) and inc == (0.0,)


class TestRestrictedRegion:
    def _artifact_with_mu(self, mu):
        art, _ = one_d_artifact()
        return SwitchingArtifact(
            states=art.states, inputs=art.inputs, h=art.h, gamma=art.gamma,
            lie=art.lie, n=art.n, eta=art.eta, m=3, strategy=art.strategy,
            lambda_global=art.lambda_global, mu_dec_global=(mu,), mu_inc_global=(mu,),
            admissible=art.admissible.__class__.of({"x": (-1.0, 1.0)}),
            control=art.control, unsafe=art.unsafe, model_hash=art.model_hash,
        )

    def test_hand_values(self):
        art = self._artifact_with_mu(0.1)
        r1 = restricted_region(art, ALL, 1)
        assert r1.lo == pytest.approx((-0.9,)) and r1.hi == pytest.approx((0.9,))
        r3 = restricted_region(art, ALL, 3)
        assert r3.lo == pytest.approx((-0.7,)) and r3.hi == pytest.approx((0.7,))

    def test_collapse_is_empty(self):
        art = self._artifact_with_mu(0.6)
        assert restricted_region(art, ALL, 3) is None


class TestDerive:
    def test_worked_artifact(self):
        art, _ = one_d_artifact(h=Polynomial.var("x") * -1.0 + 1.0)  # h = 1 - x
        assert art.lie[1] == -Polynomial.var("u")
        assert art.lie[2].is_zero
        assert art.lambda_global == 0.0

    def test_serialize_roundtrip(self, tmp_path):
        art, _ = one_d_artifact()
        path = tmp_path / "artifact.json"
        save_artifact(art, path)
        again = load_artifact(path)
        assert again == art

    def test_refusal_when_region_collapses(self):
        # eta so large that one period can cross the admissible box
        text = ONE_D_BAND.replace("eta = 0.1", "eta = 5.0")
        sys = load_text(text)
        with pytest.raises(DeriveError, match="too fast"):
            derive_artifact(sys, band_cert(), n=1, skip_check=True)

    def test_falsified_certificate_refused(self):
        sys = load_text(ONE_D_BAND)
        sys.baseline = (Polynomial.var("x"),)  # destabilizing loop
        with pytest.raises(DeriveError, match="failed validation"):
            derive_artifact(sys, band_cert(), n=1)
        # forced derivation proceeds with a warning
        with pytest.warns(UserWarning, match="forced"):
            derive_artifact(sys, band_cert(), n=1, force=True)

    def test_byte_determinism(self, tmp_path):
        a1, _ = one_d_artifact(n=2, strategy="global")
        a2, _ = one_d_artifact(n=2, strategy="global")
        t1, t2 = artifact_text(a1), artifact_text(a2)
        assert t1 == t2
        assert hashlib.sha256(t1.encode()).hexdigest() == hashlib.sha256(t2.encode()).hexdigest()

    def test_m1_artifact_derives_with_check(self):
        sys = builtin("M1")
        art = derive_artifact(sys, default_bac(sys), n=4, m=3)
        assert art.lambda_global == 0.0  # h is quadratic along dv/dt = u: chain truncates
        assert art.restricted(ALL, 1) is not None
        assert art.model_hash == sys.model_hash()


class TestSoundness:
    def _propagate(self, sys, x, u, substeps=64):
        import numpy as np

        fn = sys.field_fn()
        h = sys.eta / substeps
        x = np.asarray(x, float)
        for _ in range(substeps):
            k1 = np.asarray(fn(*x, *u))
            k2 = np.asarray(fn(*(x + 0.5 * h * k1), *u))
            k3 = np.asarray(fn(*(x + 0.5 * h * k2), *u))
            k4 = np.asarray(fn(*(x + h * k3), *u))
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return x

    @pytest.mark.parametrize("n", [1, 2])
    def test_lambda_sound_on_one_d(self, n):
        art, sys = one_d_artifact(n=n)
        rng = np.random.default_rng(21)
        h_fn = art.h_fn()
        hhat = art.hhat_fn()
        for _ in range(2000):
            u = (float(rng.uniform(-1, 1)),)
            region = art.restricted(u, 1)
            if region is None:
                continue
            x = (float(rng.uniform(region.lo[0], region.hi[0])),)
            x_next = self._propagate(sys, x, u)
            bound = hhat(*x, *u) - art.lambda_for(u)
            assert h_fn(*x_next) >= bound - 1e-12

    def test_mu_sound_on_one_d(self):
        art, sys = one_d_artifact()
        rng = np.random.default_rng(22)
        fn = sys.field_fn()
        for _ in range(2000):
            u = (float(rng.uniform(-1, 1)),)
            region = art.restricted(u, 1)
            x = np.array([rng.uniform(region.lo[0], region.hi[0])])
            h_step = sys.eta / 32
            for _ in range(32):
                k1 = np.asarray(fn(*x, *u))
                k2 = np.asarray(fn(*(x + 0.5 * h_step * k1), *u))
                k3 = np.asarray(fn(*(x + 0.5 * h_step * k2), *u))
                k4 = np.asarray(fn(*(x + h_step * k3), *u))
                x = x + (h_step / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
                assert sys.admissible.contains(x)

    def test_per_action_dominated_by_global(self):
        art, _ = one_d_artifact(strategy="per-action")
        rng = np.random.default_rng(23)
        for _ in range(200):
            u = (float(rng.uniform(-1, 1)),)
            assert art.lambda_for(u) <= art.lambda_global + 1e-15
            dec, inc = art.mu_for(u)
            dec_g, inc_g = art.mu_for(ALL)
            assert all(a <= b + 1e-15 for a, b in zip(dec, dec_g))
            assert all(a <= b + 1e-15 for a, b in zip(inc, inc_g))

    def test_region_nesting_invariant(self):
        art, _ = one_d_artifact()
        rng = np.random.default_rng(24)
        arm = art.rsc_region()
        for _ in range(100):
            u = (float(rng.uniform(-1, 1)),)
            ar = art.restricted(u, 1)
            # A_{r,m} subset of A_r(u) subset of A
            assert ar.lo[0] >= art.admissible.lo[0] and ar.hi[0] <= art.admissible.hi[0]
            assert arm.lo[0] >= ar.lo[0] - 1e-15 and arm.hi[0] <= ar.hi[0] + 1e-15
