"""3D evaluation protocols: grounding IoU metrics, multi-target F1,
feature-correspondence recall binned by viewpoint change, surface-normal
angular metrics, and closed-form linear probes on frozen features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractViolation, EmptySupportError
from .geometry import (
    NormalMap,
    backproject,
    covisibility_mask,
    relative_pose,
)

DEFAULT_ANGLE_BINS = ((0.0, 30.0), (30.0, 60.0), (60.0, 90.0), (90.0, 120.0))
CORRESPONDENCE_THRESHOLD_M = 0.02
RIDGE_LAMBDA = 1e-3
NORMAL_ACC_THRESHOLDS = (11.25, 22.5, 30.0)


@dataclass(frozen=True)
class Box3D:
    mn: tuple
    mx: tuple

    def __post_init__(self):
        mn = np.asarray(self.mn, dtype=np.float64)
        mx = np.asarray(self.mx, dtype=np.float64)
        if mn.shape != (3,) or mx.shape != (3,):
            raise ContractViolation("Box3D corners must be 3-vectors")
        if not np.all(mn < mx):
            raise ContractViolation(f"box min corner must precede max corner: {mn} vs {mx}")
        object.__setattr__(self, "mn", tuple(float(x) for x in mn))
        object.__setattr__(self, "mx", tuple(float(x) for x in mx))

    @property
    def volume(self) -> float:
        return float(np.prod(np.asarray(self.mx) - np.asarray(self.mn)))


@dataclass
class GroundingCase:
    case_id: str
    pred: list        # list[Box3D]
    gt: list          # list[Box3D]
    kind: str = ""    # "zt" | "st" | "mt", derived from gt count if empty

    def __post_init__(self):
        derived = {0: "zt", 1: "st"}.get(len(self.gt), "mt")
        if not self.kind:
            self.kind = derived
        elif self.kind != derived:
            raise ContractViolation(
                f"case kind '{self.kind}' inconsistent with {len(self.gt)} ground-truth boxes")


def iou3d(a: Box3D, b: Box3D) -> float:
    """Intersection over union of axis-aligned boxes; 0 when disjoint."""
    lo = np.maximum(np.asarray(a.mn), np.asarray(b.mn))
    hi = np.minimum(np.asarray(a.mx), np.asarray(b.mx))
    if np.any(hi <= lo):
        return 0.0
    inter = float(np.prod(hi - lo))
    union = a.volume + b.volume - inter
    return inter / union


def grounding_accuracy(cases, tau: float) -> float:
    """Acc@tau over single-target cases, each with exactly one prediction."""
    if not cases:
        raise EmptySupportError("no grounding cases")
    hits = 0
    for case in cases:
        if case.kind != "st" or len(case.pred) != 1:
            raise ContractViolation(
                f"case {case.case_id}: accuracy needs single-target cases with one "
                f"predicted box (got {len(case.gt)} gt / {len(case.pred)} pred)")
        hits += iou3d(case.pred[0], case.gt[0]) >= tau
    return hits / len(cases)


def _match_case(pred, gt, tau: float):
    """Maximum-cardinality matching among (pred, gt) pairs with IoU >= tau.

    Weights 1 + IoU on qualifying pairs make the assignment prefer more
    matches first, higher IoU second. Returns (tp, fp, fn).
    """
    if not pred and not gt:
        return 0, 0, 0
    if not pred or not gt:
        return 0, len(pred), len(gt)
    iou = np.array([[iou3d(p, g) for g in gt] for p in pred])
    weight = np.where(iou >= tau, 1.0 + iou, 0.0)
    rows, cols = linear_sum_assignment(weight, maximize=True)
    tp = int(sum(iou[r, c] >= tau for r, c in zip(rows, cols)))
    return tp, len(pred) - tp, len(gt) - tp


def multi_target_f1(cases, tau: float) -> float:
    """Per-case F1 under optimal matching, averaged over cases.

    Zero-target cases with an empty prediction count as F1 = 1 (the
    correct-rejection convention of the multi-target grounding lineage).
    """
    if not cases:
        raise EmptySupportError("no grounding cases")
    scores = []
    for case in cases:
        tp, fp, fn = _match_case(case.pred, case.gt, tau)
        if tp == 0 and fp == 0 and fn == 0:
            scores.append(1.0)  # zero-target, empty prediction
        else:
            scores.append(2.0 * tp / (2.0 * tp + fp + fn))
    return float(np.mean(scores))


@dataclass
class NormalMetrics:
    rmse_deg: float
    acc_11: float
    acc_22: float
    acc_30: float

    @property
    def macc(self) -> float:
        return (self.acc_11 + self.acc_22 + self.acc_30) / 3.0

    def as_dict(self) -> dict:
        return {"rmse_deg": self.rmse_deg, "acc@11.25": self.acc_11,
                "acc@22.5": self.acc_22, "acc@30": self.acc_30, "macc": self.macc}


def normal_metrics(pred: NormalMap, gt: NormalMap) -> NormalMetrics:
    """Angular RMSE (degrees) plus threshold accuracies at 11.25/22.5/30."""
    both = pred.valid & gt.valid
    if not both.any():
        raise EmptySupportError("normal maps share no valid pixels")
    dots = np.clip(np.sum(pred.normals[both] * gt.normals[both], axis=-1), -1.0, 1.0)
    theta = np.degrees(np.arccos(dots))
    rmse = float(np.sqrt(np.mean(theta ** 2)))
    accs = [float(np.mean(theta <= t)) for t in NORMAL_ACC_THRESHOLDS]
    return NormalMetrics(rmse, *accs)


# ---------------------------------------------------------------------------
# feature correspondence
# ---------------------------------------------------------------------------

def token_centers(height: int, width: int, patch: int):
    """Integer pixel coordinates of token centers ((r, c) token -> pixel)."""
    vs = np.arange(height // patch) * patch + patch // 2
    us = np.arange(width // patch) * patch + patch // 2
    return vs, us


def relative_rotation_deg(pose_a, pose_b) -> float:
    rel = relative_pose(pose_a, pose_b)
    return float(np.degrees(np.arccos(np.clip((np.trace(rel.rotation) - 1.0) / 2.0, -1.0, 1.0))))


@dataclass
class PairCorrespondence:
    """Per-query match errors for one (frame a, frame b) pair."""

    angle_deg: float
    errors_m: np.ndarray      # 3D distance per co-visible query
    n_queries: int


def correspondence_errors(tokens_a: np.ndarray, tokens_b: np.ndarray,
                          frame_a, frame_b, patch: int = 8) -> PairCorrespondence:
    """Match each co-visible query token of frame a into frame b by cosine
    similarity; the error is the 3D distance between the matched token
    center (lifted with frame b's gt depth) and the query's gt 3D point."""
    k_a, pose_a = frame_a.camera
    k_b, pose_b = frame_b.camera
    ht, wt = tokens_a.shape[:2]
    vs, us = token_centers(k_a.height, k_a.width, patch)

    covis = covisibility_mask(frame_a.depth, frame_a.camera, frame_b.depth, frame_b.camera)
    q_valid = covis[np.ix_(vs, us)] & frame_a.depth.valid[np.ix_(vs, us)]

    # lift frame b's token centers with its gt depth
    vsb, usb = token_centers(k_b.height, k_b.width, patch)
    b_depth_ok = frame_b.depth.valid[np.ix_(vsb, usb)]
    pm_b = backproject(frame_b.depth, k_b, pose_b)
    b_points = pm_b.points[np.ix_(vsb, usb)].reshape(-1, 3)

    pm_a = backproject(frame_a.depth, k_a, pose_a)
    q_points = pm_a.points[np.ix_(vs, us)].reshape(-1, 3)

    fa = tokens_a.reshape(ht * wt, -1)
    fb = tokens_b.reshape(ht * wt, -1)
    norm_a = np.linalg.norm(fa, axis=1)
    norm_b = np.linalg.norm(fb, axis=1)
    sim = (fa @ fb.T) / np.maximum(np.outer(norm_a, norm_b), 1e-12)
    sim[:, ~b_depth_ok.reshape(-1)] = -np.inf

    angle = relative_rotation_deg(pose_a, pose_b)
    keep = q_valid.reshape(-1)
    if not b_depth_ok.any() or not keep.any():
        return PairCorrespondence(angle, np.zeros(0), 0)
    best = np.argmax(sim[keep], axis=1)
    errors = np.linalg.norm(b_points[best] - q_points[keep], axis=1)
    return PairCorrespondence(angle, errors, int(keep.sum()))


def correspondence_recall(pairs, threshold_m: float = CORRESPONDENCE_THRESHOLD_M,
                          angle_bins=DEFAULT_ANGLE_BINS) -> dict:
    """Recall at the 3D error threshold, bucketed by relative rotation angle.

    pairs is an iterable of PairCorrespondence. Bins without co-visible
    queries are reported as None (empty), never as zero.
    """
    out = {}
    for lo, hi in angle_bins:
        errs = [p.errors_m for p in pairs if lo <= p.angle_deg < hi and p.n_queries > 0]
        if not errs:
            out[(lo, hi)] = None
            continue
        errors = np.concatenate(errs)
        out[(lo, hi)] = float(np.mean(errors <= threshold_m))
    return out


def recall_curve(pairs, thresholds) -> list:
    """(threshold, overall recall) rows across all pairs, for CSV export."""
    errors = np.concatenate([p.errors_m for p in pairs if p.n_queries > 0]) \
        if any(p.n_queries > 0 for p in pairs) else np.zeros(0)
    rows = []
    for t in thresholds:
        recall = float(np.mean(errors <= t)) if errors.size else float("nan")
        rows.append((float(t), recall))
    return rows


# ---------------------------------------------------------------------------
# linear probes on frozen features
# ---------------------------------------------------------------------------

@dataclass
class ProbeResult:
    task: str                   # "depth" | "normals"
    rmse: float                 # meters for depth, degrees for normals
    normal: NormalMetrics | None
    coefficients: np.ndarray    # (C + 1, T) ridge solution incl. intercept
    predictions: np.ndarray     # (N_test, T)


def ridge_fit(features: np.ndarray, targets: np.ndarray,
              lam: float = RIDGE_LAMBDA) -> np.ndarray:
    """Closed-form ridge with intercept column; lam > 0 keeps the system
    full rank by construction."""
    x = np.concatenate([features, np.ones((features.shape[0], 1))], axis=1)
    t = targets if targets.ndim == 2 else targets[:, None]
    a = x.T @ x + lam * np.eye(x.shape[1])
    return np.linalg.solve(a, x.T @ t)


def ridge_predict(coefficients: np.ndarray, features: np.ndarray) -> np.ndarray:
    x = np.concatenate([features, np.ones((features.shape[0], 1))], axis=1)
    return x @ coefficients


def linear_probe(train_features: np.ndarray, train_targets: np.ndarray,
                 test_features: np.ndarray, test_targets: np.ndarray,
                 task: str, lam: float = RIDGE_LAMBDA) -> ProbeResult:
    """Fit a per-token linear map from frozen features to geometric targets
    and evaluate on a scene-disjoint test split.

    Depth: targets are per-token mean depths, scored by RMSE in meters.
    Normals: targets are per-token mean normals; predictions are
    renormalized and scored with the angular metrics.
    """
    if task not in ("depth", "normals"):
        raise ContractViolation(f"unknown probe task {task!r}")
    coef = ridge_fit(train_features, train_targets, lam)
    pred = ridge_predict(coef, test_features)
    if task == "depth":
        rmse = float(np.sqrt(np.mean((pred[:, 0] - test_targets.reshape(-1)) ** 2)))
        return ProbeResult("depth", rmse, None, coef, pred)
    norms = np.linalg.norm(pred, axis=1, keepdims=True)
    unit = pred / np.maximum(norms, 1e-12)
    n = unit.shape[0]
    pm = NormalMap(unit.reshape(n, 1, 3), np.ones((n, 1), dtype=bool))
    gm = NormalMap(test_targets.reshape(n, 1, 3), np.ones((n, 1), dtype=bool))
    nm = normal_metrics(pm, gm)
    return ProbeResult("normals", nm.rmse_deg, nm, coef, unit)


def token_depth_targets(frame, patch: int = 8):
    """Per-token mean gt depth over the patch's valid pixels; tokens with no
    valid pixel are flagged out."""
    vals = frame.depth.values
    valid = frame.depth.valid
    h, w = vals.shape
    ht, wt = h // patch, w // patch
    v = vals.reshape(ht, patch, wt, patch).transpose(0, 2, 1, 3).reshape(ht, wt, -1)
    m = valid.reshape(ht, patch, wt, patch).transpose(0, 2, 1, 3).reshape(ht, wt, -1)
    count = m.sum(-1)
    mean = np.where(m, v, 0.0).sum(-1) / np.maximum(count, 1)
    return mean, count > 0


def token_normal_targets(frame, patch: int = 8):
    """Per-token mean gt normal (camera frame), renormalized."""
    nm = frame.normals
    h, w = nm.valid.shape
    ht, wt = h // patch, w // patch
    n = nm.normals.reshape(ht, patch, wt, patch, 3).transpose(0, 2, 1, 3, 4)
    n = n.reshape(ht, wt, -1, 3)
    m = nm.valid.reshape(ht, patch, wt, patch).transpose(0, 2, 1, 3).reshape(ht, wt, -1)
    count = m.sum(-1)
    mean = np.where(m[..., None], n, 0.0).sum(-2) / np.maximum(count, 1)[..., None]
    norm = np.linalg.norm(mean, axis=-1)
    ok = (count > 0) & (norm > 1e-6)
    unit = np.where(ok[..., None], mean / np.maximum(norm, 1e-12)[..., None], 0.0)
    return unit, ok


def token_semantic_targets(frame, patch: int = 8):
    """Per-token majority semantic label (ties resolve to the smallest id)."""
    labels = frame.labels
    h, w = labels.shape
    ht, wt = h // patch, w // patch
    grid = labels.reshape(ht, patch, wt, patch).transpose(0, 2, 1, 3).reshape(ht, wt, -1)
    out = np.empty((ht, wt), dtype=np.int64)
    for i in range(ht):
        for j in range(wt):
            out[i, j] = np.bincount(grid[i, j]).argmax()
    return out
