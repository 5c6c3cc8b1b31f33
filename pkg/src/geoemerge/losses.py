"""Training objectives with values and exact analytic gradients.

Terms:
  - geometry: per-pixel sigma-weighted L1 depth fidelity + sigma-weighted L1
    forward-difference gradient consistency - alpha * log sigma, averaged
    over valid ground-truth pixels
  - cross_view: L1 between a frame's depth and a neighbor's depth warped in
    through the known relative pose (straight-through on rasterization)
  - global: cosine distance between a frozen teacher descriptor and the
    encoder's projected descriptor (gradient only on the latter)
  - ce: token-level softmax cross-entropy on semantic labels

The composite objective is the unweighted sum of the enabled terms; the ce
term is always required. The subgradient of |.| at 0 is taken as 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, EmptySupportError
from .geometry import DepthMap, Intrinsics, Pose, warp_depth_detailed

TERM_ORDER = ("ce", "geometry", "cross_view", "global")
DEFAULT_ALPHA = 0.2
IGNORE_LABEL = -1


@dataclass
class GeometryLossInputs:
    pred_depth: DepthMap
    pred_sigma: np.ndarray   # (H, W), strictly positive where read
    gt_depth: DepthMap
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        self.pred_sigma = np.asarray(self.pred_sigma, dtype=np.float64)
        if self.pred_depth.shape != self.gt_depth.shape or \
                self.pred_sigma.shape != self.gt_depth.shape:
            raise ContractViolation("geometry loss rasters are not congruent")
        if not self.alpha > 0:
            raise ContractViolation(f"alpha must be positive, got {self.alpha}")


def geometry_loss(inp: GeometryLossInputs):
    """Uncertainty-weighted depth loss (value, grad_depth, grad_sigma).

    Per valid gt pixel p:
        l_p = sigma_p |e_p| + sigma_p (|dx e_p| + |dy e_p|) - alpha log sigma_p
    with e = pred - gt and forward differences defined only where both
    stencil pixels are valid; the value is the mean over valid pixels. The
    gradients are exact for this discretization, including the adjoint of
    the forward-difference stencil.
    """
    omega = inp.gt_depth.valid & inp.pred_depth.valid
    n = int(omega.sum())
    if n == 0:
        raise EmptySupportError("geometry loss has no valid ground-truth pixels")
    sigma = inp.pred_sigma
    if np.any(sigma[omega] <= 0):
        raise ContractViolation("pred_sigma must be strictly positive on valid pixels")

    e = inp.pred_depth.values - inp.gt_depth.values
    h, w = e.shape
    alpha = inp.alpha

    # Forward-difference stencils valid where both pixels are in omega.
    vx = np.zeros((h, w), dtype=bool)
    vy = np.zeros((h, w), dtype=bool)
    vx[:, :-1] = omega[:, :-1] & omega[:, 1:]
    vy[:-1, :] = omega[:-1, :] & omega[1:, :]
    dex = np.zeros((h, w))
    dey = np.zeros((h, w))
    dex[:, :-1] = e[:, 1:] - e[:, :-1]
    dey[:-1, :] = e[1:, :] - e[:-1, :]
    dex[~vx] = 0.0
    dey[~vy] = 0.0

    abs_e = np.where(omega, np.abs(e), 0.0)
    value = float((sigma * abs_e).sum()
                  + (sigma * (np.abs(dex) + np.abs(dey))).sum()
                  - alpha * np.where(omega, np.log(np.where(omega, sigma, 1.0)), 0.0).sum()) / n

    sgn_e = np.where(omega, np.sign(e), 0.0)
    sgn_dx = np.sign(dex)
    sgn_dy = np.sign(dey)

    grad_depth = sigma * sgn_e
    # adjoint of dx e_p = e_{p+x} - e_p, weighted by sigma_p sign(dx e_p)
    wx = sigma * sgn_dx
    wy = sigma * sgn_dy
    grad_depth[:, :-1] -= wx[:, :-1]
    grad_depth[:, 1:] += wx[:, :-1]
    grad_depth[:-1, :] -= wy[:-1, :]
    grad_depth[1:, :] += wy[:-1, :]
    grad_depth /= n

    m = abs_e + np.abs(dex) + np.abs(dey)
    grad_sigma = np.where(omega, m - alpha / np.where(omega, sigma, 1.0), 0.0) / n
    return value, grad_depth, grad_sigma


@dataclass
class CrossViewResult:
    value: float
    grad_depth_t: np.ndarray
    grad_depth_src: np.ndarray
    empty_overlap: bool
    n_overlap: int


def cross_view_loss(depth_t: DepthMap, depth_src: DepthMap, rel: Pose,
                    k: Intrinsics) -> CrossViewResult:
    """Depth consistency between frame t and a neighbor warped into it.

    depth_src is splatted through rel (src cam -> t cam); the value is the
    mean L1 difference over the splat mask intersected with depth_t's valid
    mask. An empty overlap yields value 0 with empty_overlap set (the caller
    is expected to log it). Gradients with respect to depth_src flow only
    through the splatted z value; the splat's target cell and the mask are
    treated as constant (straight-through on rasterization).
    """
    if depth_t.shape != k.shape:
        raise ContractViolation(f"depth raster {depth_t.shape} does not match intrinsics {k.shape}")
    warped_z, mask, src_idx, dz_dd = warp_depth_detailed(depth_src, rel, k)
    omega = mask & depth_t.valid
    n = int(omega.sum())
    h, w = depth_t.shape
    if n == 0:
        zero = np.zeros((h, w))
        return CrossViewResult(0.0, zero, zero.copy(), True, 0)

    diff = depth_t.values - warped_z
    value = float(np.abs(diff[omega]).sum()) / n
    sgn = np.where(omega, np.sign(diff), 0.0)
    grad_t = sgn / n

    grad_src = np.zeros(h * w)
    idx = src_idx[omega]
    np.add.at(grad_src, idx, -sgn[omega] * dz_dd.reshape(-1)[idx] / n)
    return CrossViewResult(value, grad_t, grad_src.reshape(h, w), False, n)


def global_loss(fa: np.ndarray, fb: np.ndarray):
    """Cosine distance 1 - cos(fa, fb); fa is frozen so only grad_fb returns."""
    fa = np.asarray(fa, dtype=np.float64)
    fb = np.asarray(fb, dtype=np.float64)
    na = np.linalg.norm(fa)
    nb = np.linalg.norm(fb)
    if na == 0 or nb == 0:
        raise ContractViolation("global loss requires non-zero descriptors")
    dot = float(fa @ fb)
    value = 1.0 - dot / (na * nb)
    grad_fb = -(fa / (na * nb) - dot * fb / (na * nb ** 3))
    return value, grad_fb


def ce_proxy_loss(logits: np.ndarray, labels: np.ndarray,
                  ignore_label: int = IGNORE_LABEL):
    """Mean token-level softmax cross-entropy with exact gradient.

    logits is (N, K) with K >= 2; labels in [0, K) or the ignore sentinel.
    The gradient is (softmax - onehot) / n_kept on kept rows, zero elsewhere.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ContractViolation(f"logits must be (N, K>=2), got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ContractViolation("labels shape does not match logits")
    keep = labels != ignore_label
    n = int(keep.sum())
    if n == 0:
        raise EmptySupportError("all tokens carry the ignore label")
    kept_labels = labels[keep].astype(np.int64)
    if np.any(kept_labels < 0) or np.any(kept_labels >= logits.shape[1]):
        raise ContractViolation("labels out of range")

    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    softmax = expd / expd.sum(axis=1, keepdims=True)
    logp = shifted - np.log(expd.sum(axis=1, keepdims=True))
    rows = np.nonzero(keep)[0]
    value = float(-logp[rows, kept_labels].sum()) / n

    grad = np.zeros_like(logits)
    grad[rows] = softmax[rows]
    grad[rows, kept_labels] -= 1.0
    grad /= n
    return value, grad


@dataclass
class LossReport:
    """Per-term scalars and gradients for the composite objective."""

    terms: dict  # enabled term name -> value
    total: float
    grads: dict  # enabled term name -> {input name -> gradient array}
    flags: dict = field(default_factory=dict)


def composite_loss(parts: dict, toggles) -> LossReport:
    """Unweighted sum of the enabled loss terms.

    parts maps term names to (value, grads_dict[, flags_dict]); toggles is
    the set of enabled terms and must contain "ce". Disabled terms are not
    read at all: their values and gradients are absent from the report.
    """
    enabled = set(toggles)
    if "ce" not in enabled:
        raise ContractViolation("the ce term must be enabled")
    unknown = enabled - set(TERM_ORDER)
    if unknown:
        raise ContractViolation(f"unknown loss terms: {sorted(unknown)}")
    missing = enabled - set(parts)
    if missing:
        raise ContractViolation(f"enabled terms without inputs: {sorted(missing)}")

    terms = {}
    grads = {}
    flags = {}
    total = 0.0
    for name in TERM_ORDER:
        if name not in enabled:
            continue
        part = parts[name]
        value, grad_dict = part[0], part[1]
        terms[name] = float(value)
        grads[name] = grad_dict
        if len(part) > 2 and part[2]:
            flags[name] = part[2]
        total += float(value)
    return LossReport(terms, total, grads, flags)


def gradcheck(fn, point: np.ndarray, eps: float = 1e-6) -> float:
    """Max relative error between fn's analytic gradient and central FD.

    fn(point) must return (value, grad) with grad shaped like point; the
    relative error denominator is max(|analytic|, |numeric|, 1e-8). The step
    per coordinate is eps * max(1, |x_i|).
    """
    if not (0 < eps <= 1e-2):
        raise ContractViolation(f"eps must be in (0, 1e-2], got {eps}")
    point = np.asarray(point, dtype=np.float64)
    _, grad = fn(point)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != point.shape:
        raise ContractViolation("gradient shape does not match point shape")
    flat = point.reshape(-1).copy()
    worst = 0.0
    for i in range(flat.size):
        h = eps * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        vp, _ = fn(flat.reshape(point.shape))
        flat[i] = orig - h
        vm, _ = fn(flat.reshape(point.shape))
        flat[i] = orig
        numeric = (vp - vm) / (2.0 * h)
        analytic = grad.reshape(-1)[i]
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
