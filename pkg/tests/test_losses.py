"""Loss-term oracles: analytic fixtures plus finite-difference gradient checks.

Every gradient is validated against central finite differences at random
non-degenerate points (inputs are resampled when a residual sits within the
FD step of an |.| kink, where the subgradient convention would spoil the
comparison).
"""

import numpy as np
import pytest

from geoemerge.errors import ContractViolation, EmptySupportError
from geoemerge.geometry import DepthMap, Intrinsics, Pose
from geoemerge.losses import (
    GeometryLossInputs,
    ce_proxy_loss,
    composite_loss,
    cross_view_loss,
    geometry_loss,
    global_loss,
    gradcheck,
)

KINK_TOL = 1e-3
# The geometry loss is piecewise linear in depth, so central differences are
# exact for any step clear of the |.| kinks; a generous step drowns fp noise
# at exact-zero gradient coordinates. Sigma gets a small step instead (the
# log term is curved) plus a guard against near-stationary sigma pixels.
DEPTH_FD_EPS = 1e-3
DEPTH_KINK_GAP = 2e-2
SIGMA_FD_EPS = 1e-5


def _depth(values, valid=None):
    values = np.asarray(values, dtype=np.float64)
    if valid is None:
        valid = np.ones(values.shape, dtype=bool)
    return DepthMap(values, valid)


def _random_geom_inputs(rng, shape=(5, 4), alpha=0.5, min_gap=DEPTH_KINK_GAP):
    """Random inputs with residuals away from |.| kinks and sigma away from
    its stationary point alpha/m (where grad_sigma crosses zero)."""
    while True:
        gt = rng.uniform(1.0, 5.0, size=shape)
        e = rng.uniform(min_gap * 4, 0.8, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        pred = gt + e
        sigma = rng.uniform(0.2, 3.0, size=shape)
        dex = e[:, 1:] - e[:, :-1]
        dey = e[1:, :] - e[:-1, :]
        if min(np.abs(dex).min(), np.abs(dey).min(), np.abs(e).min()) <= min_gap:
            continue
        m = np.abs(e)
        m[:, :-1] += np.abs(dex)
        m[:-1, :] += np.abs(dey)
        if np.abs(m - alpha / sigma).min() <= 0.05:
            continue
        return GeometryLossInputs(_depth(pred), sigma, _depth(gt), alpha)


class TestGeometryLoss:
    def test_perfect_prediction_unit_sigma_is_zero(self):
        gt = _depth(np.full((4, 4), 2.0))
        inp = GeometryLossInputs(_depth(np.full((4, 4), 2.0)), np.ones((4, 4)), gt, 0.5)
        value, gd, gs = geometry_loss(inp)
        assert value == 0.0

    def test_scalar_fixture(self):
        # 1x1 raster: no gradient term; e=1, sigma=2, alpha=0.5:
        # l = 2*1 - 0.5*ln 2 = 1.6534264097...
        inp = GeometryLossInputs(_depth([[2.0]]), np.array([[2.0]]), _depth([[1.0]]), 0.5)
        value, _, _ = geometry_loss(inp)
        assert value == pytest.approx(2.0 - 0.5 * np.log(2.0), abs=1e-12)

    def test_sigma_stationarity(self):
        # grad_sigma vanishes at sigma = alpha / m; 1x1 raster with e = m.
        rng = np.random.default_rng(0)
        for _ in range(200):
            alpha = rng.uniform(0.01, 10.0)
            m = rng.uniform(0.01, 100.0)
            sigma_star = alpha / m
            inp = GeometryLossInputs(_depth([[1.0 + m]]), np.array([[sigma_star]]),
                                     _depth([[1.0]]), alpha)
            _, _, gs = geometry_loss(inp)
            assert abs(gs[0, 0]) <= 1e-10

    def test_empty_support_raises(self):
        gt = DepthMap(np.ones((3, 3)), np.zeros((3, 3), dtype=bool))
        inp = GeometryLossInputs(_depth(np.ones((3, 3))), np.ones((3, 3)), gt)
        with pytest.raises(EmptySupportError):
            geometry_loss(inp)

    def test_nonpositive_sigma_raises(self):
        inp = GeometryLossInputs(_depth([[2.0]]), np.array([[0.0]]), _depth([[1.0]]), 0.5)
        with pytest.raises(ContractViolation):
            geometry_loss(inp)

    def test_invalid_pixels_do_not_matter(self):
        rng = np.random.default_rng(1)
        valid = rng.random((6, 6)) > 0.4
        valid[0, 0] = True
        gt_vals = rng.uniform(1, 4, size=(6, 6))
        pred = rng.uniform(1, 4, size=(6, 6))
        sigma = rng.uniform(0.5, 2.0, size=(6, 6))
        base = geometry_loss(GeometryLossInputs(
            _depth(pred), sigma, DepthMap(np.where(valid, gt_vals, 1.0), valid)))
        pred2 = pred.copy()
        sigma2 = sigma.copy()
        pred2[~valid] = 99.0
        sigma2[~valid] = 1e-9
        messed = geometry_loss(GeometryLossInputs(
            _depth(pred2), sigma2, DepthMap(np.where(valid, gt_vals, 1.0), valid)))
        assert base[0] == messed[0]
        np.testing.assert_array_equal(base[1][valid], messed[1][valid])

    def test_gradcheck_depth_and_sigma(self):
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(100):
            inp = _random_geom_inputs(rng)
            shape = inp.gt_depth.shape

            def f_depth(x, inp=inp, shape=shape):
                v, gd, _ = geometry_loss(GeometryLossInputs(
                    _depth(x.reshape(shape)), inp.pred_sigma, inp.gt_depth, inp.alpha))
                return v, gd.reshape(x.shape)

            def f_sigma(x, inp=inp, shape=shape):
                v, _, gs = geometry_loss(GeometryLossInputs(
                    inp.pred_depth, x.reshape(shape), inp.gt_depth, inp.alpha))
                return v, gs.reshape(x.shape)

            worst = max(worst, gradcheck(f_depth, inp.pred_depth.values.copy(),
                                         eps=DEPTH_FD_EPS))
            worst = max(worst, gradcheck(f_sigma, inp.pred_sigma.copy(),
                                         eps=SIGMA_FD_EPS))
        assert worst <= 1e-4

    def test_partial_validity_gradcheck(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            inp = _random_geom_inputs(rng, shape=(5, 5))
            valid = rng.random((5, 5)) > 0.3
            if not valid.any():
                continue
            gt = DepthMap(inp.gt_depth.values, valid)

            def f(x, inp=inp, gt=gt):
                v, gd, _ = geometry_loss(GeometryLossInputs(
                    _depth(x.reshape(5, 5)), inp.pred_sigma, gt, inp.alpha))
                return v, gd.reshape(x.shape)

            assert gradcheck(f, inp.pred_depth.values.copy(), eps=DEPTH_FD_EPS) <= 1e-4


def _k(w=8, h=8):
    return Intrinsics(10.0, 10.0, w / 2, h / 2, w, h)


class TestCrossViewLoss:
    def test_identity_zero(self):
        k = _k()
        d = _depth(np.full((8, 8), 2.0))
        res = cross_view_loss(d, d, Pose.identity(), k)
        assert res.value == 0.0 and not res.empty_overlap

    def test_constant_offset(self):
        k = _k()
        base = np.full((8, 8), 2.0)
        c = 0.75
        res = cross_view_loss(_depth(base + c), _depth(base), Pose.identity(), k)
        assert res.value == pytest.approx(c, abs=1e-12)

    def test_disjoint_frusta_empty_flag(self):
        k = _k()
        res = cross_view_loss(_depth(np.full((8, 8), 2.0)), _depth(np.full((8, 8), 2.0)),
                              Pose(np.eye(3), np.array([1e6, 0.0, 0.0])), k)
        assert res.value == 0.0
        assert res.empty_overlap
        assert not res.grad_depth_t.any() and not res.grad_depth_src.any()

    def test_swap_symmetry_on_plane(self):
        # occlusion-free fronto plane: swapping frames and inverting the pose
        # changes only rasterization, so values agree within 2%
        k = Intrinsics(51.2, 51.2, 32.0, 32.0, 64, 64)
        rng = np.random.default_rng(4)
        d_a = _depth(np.full((64, 64), 3.0) + 0.05 * rng.random((64, 64)))
        d_b = _depth(np.full((64, 64), 2.8) + 0.05 * rng.random((64, 64)))
        rel_ab = Pose(np.eye(3), np.array([0.15, 0.05, -0.2]))
        fwd = cross_view_loss(d_a, d_b, rel_ab, k)
        bwd = cross_view_loss(d_b, d_a, rel_ab.inverse(), k)
        assert fwd.value > 0
        assert abs(fwd.value - bwd.value) <= 0.02 * max(fwd.value, bwd.value)

    def _random_case(self, rng):
        """Non-degenerate random pair: no splat near a rasterization boundary,
        no near-tied z-buffer entries, no residual near the L1 kink."""
        from geoemerge.geometry import pixel_ray_grid, warp_depth_detailed
        k = _k()
        while True:
            src = _depth(rng.uniform(1.5, 3.0, size=(8, 8)))
            tgt = _depth(rng.uniform(1.5, 3.0, size=(8, 8)))
            angle = rng.uniform(-0.05, 0.05)
            c, s = np.cos(angle), np.sin(angle)
            rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            rel = Pose(rot, rng.uniform(-0.1, 0.1, size=3))
            rx, ry = pixel_ray_grid(k)
            d = src.values
            cam = np.stack([rx * d, ry * d, d], -1)
            t_pts = cam @ rel.rotation.T + rel.translation
            tz = t_pts[..., 2]
            uu = k.fx * t_pts[..., 0] / tz + k.cx
            vv = k.fy * t_pts[..., 1] / tz + k.cy
            fu = np.abs((uu + 0.5) - np.floor(uu + 0.5) - 0.5)
            fv = np.abs((vv + 0.5) - np.floor(vv + 0.5) - 0.5)
            if fu.min() < 5e-3 or fv.min() < 5e-3:
                continue
            warped_z, mask, src_idx, _ = warp_depth_detailed(src, rel, k)
            if not mask.any():
                continue
            # competing splats per cell must be separated in z
            iu = np.floor(uu + 0.5).astype(int)
            iv = np.floor(vv + 0.5).astype(int)
            inb = (iu >= 0) & (iu < 8) & (iv >= 0) & (iv < 8) & (tz > 1e-6)
            cells = {}
            tie = False
            for (a, b, z) in zip(iv[inb], iu[inb], tz[inb]):
                cells.setdefault((a, b), []).append(z)
            for zs in cells.values():
                zs = sorted(zs)
                if len(zs) > 1 and zs[1] - zs[0] < 5e-3:
                    tie = True
            if tie:
                continue
            resid = tgt.values - warped_z
            if np.abs(resid[mask]).min() < KINK_TOL:
                continue
            return tgt, src, rel, k

    def test_gradcheck_both_sides(self):
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(100):
            tgt, src, rel, k = self._random_case(rng)

            def f_t(x, src=src, rel=rel, k=k):
                r = cross_view_loss(_depth(x.reshape(8, 8)), src, rel, k)
                return r.value, r.grad_depth_t.reshape(x.shape)

            def f_s(x, tgt=tgt, rel=rel, k=k):
                r = cross_view_loss(tgt, _depth(x.reshape(8, 8)), rel, k)
                return r.value, r.grad_depth_src.reshape(x.shape)

            worst = max(worst, gradcheck(f_t, tgt.values.copy(), eps=1e-7))
            worst = max(worst, gradcheck(f_s, src.values.copy(), eps=1e-7))
        assert worst <= 1e-4


class TestGlobalLoss:
    def test_fixture_values(self):
        fa = np.array([1.0, 2.0, -1.0])
        assert global_loss(fa, fa)[0] == pytest.approx(0.0, abs=1e-12)
        assert global_loss(fa, -fa)[0] == pytest.approx(2.0, abs=1e-12)
        perp = np.array([2.0, -1.0, 0.0])
        assert global_loss(fa, perp)[0] == pytest.approx(1.0, abs=1e-12)

    def test_zero_norm_raises(self):
        with pytest.raises(ContractViolation):
            global_loss(np.zeros(3), np.ones(3))
        with pytest.raises(ContractViolation):
            global_loss(np.ones(3), np.zeros(3))

    def test_scale_invariance(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            fa = rng.normal(size=16)
            fb = rng.normal(size=16)
            c, d = rng.uniform(0.1, 10.0, size=2)
            v1, _ = global_loss(fa, fb)
            v2, _ = global_loss(c * fa, d * fb)
            assert abs(v1 - v2) <= 1e-12

    def test_gradcheck(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(100):
            fa = rng.normal(size=12)
            fa /= np.linalg.norm(fa)
            fb = rng.normal(size=12)
            fb /= np.linalg.norm(fb)

            def f(x, fa=fa):
                return global_loss(fa, x)

            worst = max(worst, gradcheck(f, fb, eps=1e-6))
        assert worst <= 1e-6


class TestCeProxyLoss:
    def test_uniform_logits(self):
        value, _ = ce_proxy_loss(np.zeros((5, 4)), np.array([0, 1, 2, 3, 0]))
        assert value == pytest.approx(np.log(4.0), abs=1e-12)

    def test_saturated_softmax(self):
        logits = np.zeros((3, 4))
        labels = np.array([2, 0, 3])
        logits[np.arange(3), labels] = 30.0
        value, _ = ce_proxy_loss(logits, labels)
        assert value < 1e-9

    def test_grad_rows_sum_to_zero(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(7, 5))
        labels = rng.integers(0, 5, size=7)
        _, grad = ce_proxy_loss(logits, labels)
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)

    def test_ignore_sentinel(self):
        logits = np.zeros((4, 3))
        labels = np.array([0, -1, 2, -1])
        value, grad = ce_proxy_loss(logits, labels)
        assert value == pytest.approx(np.log(3.0), abs=1e-12)
        assert not grad[1].any() and not grad[3].any()

    def test_all_ignored_raises(self):
        with pytest.raises(EmptySupportError):
            ce_proxy_loss(np.zeros((2, 3)), np.array([-1, -1]))

    def test_out_of_range_label_raises(self):
        with pytest.raises(ContractViolation):
            ce_proxy_loss(np.zeros((2, 3)), np.array([0, 3]))

    def test_gradcheck(self):
        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(100):
            logits = rng.normal(size=(6, 4))
            labels = rng.integers(0, 4, size=6)

            def f(x, labels=labels):
                v, g = ce_proxy_loss(x.reshape(6, 4), labels)
                return v, g.reshape(x.shape)

            worst = max(worst, gradcheck(f, logits.reshape(-1), eps=1e-6))
        assert worst <= 1e-6


class TestCompositeLoss:
    def _parts(self, values):
        return {name: (v, {"x": np.full(3, v)}) for name, v in values.items()}

    def test_all_zero(self):
        parts = self._parts({"ce": 0.0, "geometry": 0.0, "cross_view": 0.0, "global": 0.0})
        rep = composite_loss(parts, ["ce", "geometry", "cross_view", "global"])
        assert rep.total == 0.0

    def test_ce_only_matches_term(self):
        parts = self._parts({"ce": 0.731})
        rep = composite_loss(parts, ["ce"])
        assert rep.total == 0.731
        assert set(rep.terms) == {"ce"}
        assert set(rep.grads) == {"ce"}

    def test_arithmetic_sum(self):
        parts = self._parts({"ce": 1.0, "geometry": 0.5, "cross_view": 0.25, "global": 0.25})
        rep = composite_loss(parts, ["ce", "geometry", "cross_view", "global"])
        assert rep.total == 2.0

    def test_total_is_exact_sum_of_terms(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            vals = {n: float(rng.normal()) for n in ("ce", "geometry", "global")}
            rep = composite_loss(self._parts(vals), ["ce", "geometry", "global"])
            assert rep.total == vals["ce"] + vals["geometry"] + vals["global"]

    def test_ce_required(self):
        with pytest.raises(ContractViolation):
            composite_loss(self._parts({"geometry": 1.0}), ["geometry"])

    def test_disabled_terms_absent(self):
        parts = self._parts({"ce": 1.0, "geometry": 2.0})
        rep = composite_loss(parts, ["ce"])
        assert "geometry" not in rep.terms and "geometry" not in rep.grads


class TestGradcheckHarness:
    def test_quadratic_is_machine_exact(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            x = rng.normal(size=10)

            def f(x):
                return 0.5 * float(x @ x), x

            # central FD is exact on quadratics; a large step leaves rounding
            # noise only
            assert gradcheck(f, x, eps=1e-3) <= 1e-9

    def test_eps_range_enforced(self):
        with pytest.raises(ContractViolation):
            gradcheck(lambda x: (0.0, x), np.zeros(2), eps=0.5)
