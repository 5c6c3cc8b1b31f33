"""Finite-difference gradient suite over every loss and the full network.

Each check draws random non-degenerate points (inputs are resampled when a
residual sits within the FD step of an |.| kink or sigma sits at its
stationary point) and compares analytic gradients against central
differences. The losses are piecewise linear in depth, so the depth checks
use a generous step (exact up to rounding); sigma and the network use small
steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import DepthMap, Intrinsics, Pose, pixel_ray_grid, warp_depth_detailed
from .losses import (
    GeometryLossInputs,
    ce_proxy_loss,
    cross_view_loss,
    geometry_loss,
    global_loss,
    gradcheck,
)
from .net import (
    Model,
    ModelConfig,
    get_flat_params,
    set_flat_params,
)

DEPTH_FD_EPS = 1e-3
DEPTH_KINK_GAP = 2e-2
SIGMA_FD_EPS = 1e-5
CROSS_VIEW_FD_EPS = 1e-7
TOLERANCE = 1e-4


@dataclass
class GradcheckResult:
    name: str
    max_rel_err: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _depth(values, valid=None):
    values = np.asarray(values, dtype=np.float64)
    if valid is None:
        valid = np.ones(values.shape, dtype=bool)
    return DepthMap(values, valid)


def random_geometry_inputs(rng, shape=(5, 4), alpha=0.5, min_gap=DEPTH_KINK_GAP):
    """Non-degenerate draws: residuals clear of kinks, sigma clear of its
    stationary point alpha/m."""
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


def check_geometry_loss(n_points: int, seed: int) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_points):
        inp = random_geometry_inputs(rng)
        shape = inp.gt_depth.shape

        def f_depth(x, inp=inp, shape=shape):
            v, gd, _ = geometry_loss(GeometryLossInputs(
                _depth(x.reshape(shape)), inp.pred_sigma, inp.gt_depth, inp.alpha))
            return v, gd.reshape(x.shape)

        def f_sigma(x, inp=inp, shape=shape):
            v, _, gs = geometry_loss(GeometryLossInputs(
                inp.pred_depth, x.reshape(shape), inp.gt_depth, inp.alpha))
            return v, gs.reshape(x.shape)

        worst = max(worst, gradcheck(f_depth, inp.pred_depth.values.copy(), DEPTH_FD_EPS))
        worst = max(worst, gradcheck(f_sigma, inp.pred_sigma.copy(), SIGMA_FD_EPS))
    return GradcheckResult("geometry_loss", worst)


def random_cross_view_case(rng, size=8, kink_gap=1e-3):
    """Rasterization-stable draw: no splat near a pixel-rounding boundary,
    no near-tied z-buffer entries, no residual at the L1 kink."""
    k = Intrinsics(10.0, 10.0, size / 2, size / 2, size, size)
    while True:
        src = _depth(rng.uniform(1.5, 3.0, size=(size, size)))
        tgt = _depth(rng.uniform(1.5, 3.0, size=(size, size)))
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
        warped_z, mask, _, _ = warp_depth_detailed(src, rel, k)
        if not mask.any():
            continue
        iu = np.floor(uu + 0.5).astype(int)
        iv = np.floor(vv + 0.5).astype(int)
        inb = (iu >= 0) & (iu < size) & (iv >= 0) & (iv < size) & (tz > 1e-6)
        cells = {}
        for (a, b, z) in zip(iv[inb], iu[inb], tz[inb]):
            cells.setdefault((a, b), []).append(z)
        if any(len(zs) > 1 and sorted(zs)[1] - sorted(zs)[0] < 5e-3
               for zs in cells.values()):
            continue
        resid = tgt.values - warped_z
        if np.abs(resid[mask]).min() < kink_gap:
            continue
        return tgt, src, rel, k


def check_cross_view_loss(n_points: int, seed: int) -> GradcheckResult:
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for _ in range(n_points):
        tgt, src, rel, k = random_cross_view_case(rng)
        size = tgt.shape[0]

        def f_t(x, src=src, rel=rel, k=k, size=size):
            r = cross_view_loss(_depth(x.reshape(size, size)), src, rel, k)
            return r.value, r.grad_depth_t.reshape(x.shape)

        def f_s(x, tgt=tgt, rel=rel, k=k, size=size):
            r = cross_view_loss(tgt, _depth(x.reshape(size, size)), rel, k)
            return r.value, r.grad_depth_src.reshape(x.shape)

        worst = max(worst, gradcheck(f_t, tgt.values.copy(), CROSS_VIEW_FD_EPS))
        worst = max(worst, gradcheck(f_s, src.values.copy(), CROSS_VIEW_FD_EPS))
    return GradcheckResult("cross_view_loss", worst)


def check_global_loss(n_points: int, seed: int) -> GradcheckResult:
    rng = np.random.default_rng(seed + 2)
    worst = 0.0
    for _ in range(n_points):
        fa = rng.normal(size=12)
        fa /= np.linalg.norm(fa)
        fb = rng.normal(size=12)
        fb /= np.linalg.norm(fb)

        def f(x, fa=fa):
            return global_loss(fa, x)

        worst = max(worst, gradcheck(f, fb, eps=1e-6))
    return GradcheckResult("global_loss", worst)


def check_ce_loss(n_points: int, seed: int) -> GradcheckResult:
    rng = np.random.default_rng(seed + 3)
    worst = 0.0
    for _ in range(n_points):
        logits = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=6)

        def f(x, labels=labels):
            v, g = ce_proxy_loss(x.reshape(6, 4), labels)
            return v, g.reshape(x.shape)

        worst = max(worst, gradcheck(f, logits.reshape(-1), eps=1e-6))
    return GradcheckResult("ce_proxy_loss", worst)


MICRO = ModelConfig(height=16, width=16, patch=8, channels=8, validator_hidden=4,
                    n_classes=4, global_dim=6, seed=0)


def composite_loss_and_grads(model, rgb_frames, gt_depths, labels_per_frame, fa,
                             alpha=0.3):
    """ce + geometry + global on a frame list with full manual backprop;
    returns (value, flat parameter gradient)."""
    from .net import (
        encoder_backward,
        encoder_forward_cached,
        heads_backward,
        heads_forward_cached,
        validator_backward,
        validator_forward_cached,
    )
    grads = model.zero_grads()
    token_list = []
    caches = []
    for rgb in rgb_frames:
        tokens, cache = encoder_forward_cached(model, rgb)
        token_list.append(tokens)
        caches.append(cache)
    (logits_list, fb), head_cache = heads_forward_cached(model, token_list)

    value = 0.0
    n_frames = len(rgb_frames)
    d_logits_list = []
    for logits, labels in zip(logits_list, labels_per_frame):
        v, g = ce_proxy_loss(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1))
        value += v / n_frames
        d_logits_list.append(g.reshape(logits.shape) / n_frames)

    d_tokens = [np.zeros_like(t) for t in token_list]
    for i, tokens in enumerate(token_list):
        out, vcache = validator_forward_cached(model, tokens)
        v, gd, gs = geometry_loss(GeometryLossInputs(out.depth, out.sigma,
                                                     gt_depths[i], alpha))
        value += v / n_frames
        d_tokens[i] += validator_backward(model, vcache, gd / n_frames,
                                          gs / n_frames, grads)

    gv, gfb = global_loss(fa, fb)
    value += gv
    dts = heads_backward(model, head_cache, d_logits_list, gfb, grads)
    for i in range(n_frames):
        d_tokens[i] += dts[i]
        encoder_backward(model, caches[i], d_tokens[i], grads)
    flat = np.concatenate([grads[n].reshape(-1) for n in model.param_names])
    return value, flat


def check_end_to_end(n_points: int, seed: int) -> GradcheckResult:
    """Composite loss through every network parameter on a 16x16 two-frame
    micro-scene; each point redraws inputs and the parameter vector."""
    rng = np.random.default_rng(seed + 4)
    model = Model(MICRO)
    theta0 = get_flat_params(model)
    worst = 0.0
    eps = 1e-5
    for _ in range(n_points):
        rgb_frames = [rng.random((16, 16, 3)) for _ in range(2)]
        gt_depths = [DepthMap(rng.uniform(1.0, 3.0, size=(16, 16)),
                              np.ones((16, 16), dtype=bool)) for _ in range(2)]
        labels = [rng.integers(0, MICRO.n_classes, size=(2, 2)) for _ in range(2)]
        fa = rng.normal(size=MICRO.global_dim)
        theta = theta0 + 0.05 * rng.normal(size=theta0.size)

        def f(vec):
            set_flat_params(model, vec)
            return composite_loss_and_grads(model, rgb_frames, gt_depths, labels, fa)

        _, analytic = f(theta)
        for i in range(theta.size):
            h = eps * max(1.0, abs(theta[i]))
            tp = theta.copy()
            tp[i] += h
            vp, _ = f(tp)
            tm = theta.copy()
            tm[i] -= h
            vm, _ = f(tm)
            numeric = (vp - vm) / (2 * h)
            denom = max(abs(numeric), abs(analytic[i]), 1e-8)
            worst = max(worst, abs(numeric - analytic[i]) / denom)
    set_flat_params(model, theta0)
    return GradcheckResult("composite_end_to_end", worst)


def run_gradcheck_suite(n_points: int = 100, seed: int = 0,
                        end_to_end_points: int = 2):
    """The full suite. The per-loss checks run n_points random draws each;
    the end-to-end check walks every parameter coordinate at
    end_to_end_points draws (2 * n_params forwards per draw)."""
    return [
        check_geometry_loss(n_points, seed),
        check_cross_view_loss(n_points, seed),
        check_global_loss(n_points, seed),
        check_ce_loss(n_points, seed),
        check_end_to_end(end_to_end_points, seed),
    ]
