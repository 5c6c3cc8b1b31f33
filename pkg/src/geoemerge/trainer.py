"""Seeded end-to-end experiments: training with privileged geometric losses,
ablation arms, the remove-3D-inputs dependency contrast, and the
attach/detach inference benchmark.

Every run is a pure function of (config, seed, dataset bytes): sampling,
initialization, gradient reduction order, and reporting are all fixed, so
repeated runs produce byte-identical logs and checkpoints. Wall-clock goes
to a sidecar file, never into the canonical log.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .dataset import Dataset, load_dataset
from .errors import ContractViolation, TrainingAborted
from .geometry import backproject, relative_pose
from .injection import pool_coordinates, positional_code
from .losses import (
    GeometryLossInputs,
    ce_proxy_loss,
    composite_loss,
    cross_view_loss,
    geometry_loss,
    global_loss,
)
from .metrics import (
    Box3D,
    GroundingCase,
    correspondence_errors,
    correspondence_recall,
    linear_probe,
    multi_target_f1,
    recall_curve,
    ridge_predict,
    token_centers,
    token_depth_targets,
    token_normal_targets,
    token_semantic_targets,
)
from .net import (
    Adam,
    Model,
    ModelConfig,
    TrainingNanError,
    calibrate_depth_head,
    encoder_backward,
    encoder_forward_cached,
    heads_backward,
    heads_forward_cached,
    load_checkpoint,
    save_checkpoint,
    teacher_descriptor,
    validator_backward,
    validator_forward_cached,
)
from .scenegen import N_CLASSES, generate_scene, render_scene

ABLATION_ARMS = (
    ("none", frozenset(), "scratch"),
    ("global", frozenset({"global"}), "scratch"),
    ("geometry", frozenset({"geometry"}), "scratch"),
    ("geometry+cross_view", frozenset({"geometry", "cross_view"}), "scratch"),
    ("global+geometry", frozenset({"global", "geometry"}), "scratch"),
    ("full", frozenset({"global", "geometry", "cross_view"}), "scratch"),
    ("full_warmstart", frozenset({"global", "geometry", "cross_view"}), "warmstart"),
)

# grounding table column order mirrors the grounding-metric layout
GROUNDING_COLUMNS = ("acc@0.25", "acc@0.5", "f1@0.25", "f1@0.5")
METRIC_COLUMNS = ("depth_rmse", "normal_macc") + GROUNDING_COLUMNS


@dataclass
class RunConfig:
    dataset: str
    out_dir: str
    use_global: bool = True
    use_geometry: bool = True
    use_cross_view: bool = True
    validator_init: str = "scratch"        # "scratch" | "warmstart"
    alpha: float = 0.2
    seeds: tuple = (0, 1, 2)
    steps: int = 2000
    batch: int = 4                          # frames per step; pairs = batch // 2
    neighbor_window: int = 2
    lr: float = 1e-3
    channels: int = 64
    validator_hidden: int = 40
    global_dim: int = 32
    patch: int = 8
    teacher_seed: int = 1234
    injection_arm: bool = False             # explicit-injection baseline (Eq.-1 analogue)
    warmstart_steps: int = 2000
    warmstart_scenes: int = 4
    # Cross-view consistency joins once the depth anchor is established.
    # Activating it from step 0 lets its mean-over-overlap subgradients
    # (unit-magnitude over a few hundred pixels) overpower the sigma-weighted
    # fidelity term and drag both views to a consistent-but-wrong surface.
    cross_view_start_frac: float = 0.9

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.steps < 1:
            raise ContractViolation("steps must be >= 1")
        if not self.seeds:
            raise ContractViolation("seeds must be non-empty")
        if self.neighbor_window < 1:
            raise ContractViolation("neighbor window k must be >= 1")
        if self.validator_init not in ("scratch", "warmstart"):
            raise ContractViolation(f"unknown validator init {self.validator_init!r}")

    @property
    def toggles(self) -> frozenset:
        out = set()
        if self.use_global:
            out.add("global")
        if self.use_geometry:
            out.add("geometry")
        if self.use_cross_view:
            out.add("cross_view")
        return frozenset(out)

    def to_file(self, path):
        Path(path).write_text(json.dumps(asdict(self), sort_keys=True, indent=1) + "\n")

    @staticmethod
    def from_file(path) -> "RunConfig":
        obj = json.loads(Path(path).read_text())
        obj["seeds"] = tuple(obj.get("seeds", (0,)))
        return RunConfig(**obj)


@dataclass
class RunLog:
    seed: int
    config: dict
    steps: list                    # per-step {"ce": ..., "total": ...}
    empty_overlap_steps: int
    checkpoint: str
    probe_metrics: dict
    kernel_backend: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":")) + "\n"


def _canonical(obj):
    """Round-trip through JSON so reports hold plain floats/lists."""
    return json.loads(json.dumps(obj))


@dataclass
class _Scene:
    """Pre-extracted per-scene training material."""

    record: object
    frames: list
    token_labels: list          # per frame (Ht, Wt) int
    teacher: np.ndarray | None
    injection_codes: list | None   # per frame (Ht, Wt, C) phi of pooled gt


def _prepare_scenes(ds: Dataset, split, cfg: RunConfig, need_teacher: bool,
                    need_injection: bool):
    scenes = []
    for record in ds.scenes(split):
        frames = ds.load_frames(record)
        token_labels = [token_semantic_targets(f, cfg.patch) for f in frames]
        teacher = None
        if need_teacher:
            teacher = teacher_descriptor(frames, record.scene.room_min,
                                         record.scene.room_max,
                                         cfg.teacher_seed, cfg.global_dim)
        codes = None
        if need_injection:
            codes = [_injection_code(f, cfg) for f in frames]
        scenes.append(_Scene(record, frames, token_labels, teacher, codes))
    return scenes


def _injection_code(frame, cfg: RunConfig) -> np.ndarray:
    k, pose = frame.camera
    pm = backproject(frame.depth, k, pose)
    pooled = pool_coordinates(pm, cfg.patch)
    code = positional_code(pooled.mean, cfg.channels)
    return np.where(pooled.valid[..., None], code, 0.0)


def _model_config(ds: Dataset, cfg: RunConfig, seed: int) -> ModelConfig:
    return ModelConfig(height=ds.height, width=ds.width, patch=cfg.patch,
                       channels=cfg.channels, validator_hidden=cfg.validator_hidden,
                       n_classes=N_CLASSES, global_dim=cfg.global_dim, seed=seed)


def _warmstart_validator(model: Model, ds: Dataset, cfg: RunConfig, seed: int):
    """Pre-train the validator alone (encoder frozen at init) on a scene set
    disjoint from the dataset, geometry loss only."""
    frames = []
    for i in range(cfg.warmstart_scenes):
        scene = generate_scene(900_000 + ds.seed * 100 + i, ds.config)
        frames.extend(render_scene(scene, len(ds.records[0].frames), ds.width, ds.height))
    # encoder is frozen: tokens per frame are constants of the pretraining
    tokens = [encoder_forward_cached(model, f.rgb)[0] for f in frames]
    opt = Adam(lr=cfg.lr)
    val_names = [n for n in model.param_names if n.startswith("val_")]
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(20,)))
    for step in range(cfg.warmstart_steps):
        opt.lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * step / cfg.warmstart_steps))
        i = int(rng.integers(len(frames)))
        out, cache = validator_forward_cached(model, tokens[i])
        value, g_depth, g_sigma = geometry_loss(GeometryLossInputs(
            out.depth, out.sigma, frames[i].depth, cfg.alpha))
        grads = {n: np.zeros_like(model.params[n]) for n in val_names}
        validator_backward(model, cache, g_depth, g_sigma, grads)
        # non-validator grads stay exactly zero, so Adam leaves those params
        # untouched (the encoder is frozen by construction)
        step_grads = model.zero_grads()
        for n in val_names:
            step_grads[n] = grads[n]
        opt.step(model, step_grads)


def _forward_pair(model: Model, cfg: RunConfig, scene: _Scene, t: int, t2: int,
                  toggles: frozenset):
    """One training pair: losses, parameter grads, and the loss report."""
    frames = [scene.frames[t], scene.frames[t2]]
    grads = model.zero_grads()
    token_list = []
    enc_caches = []
    for f in frames:
        tokens, cache = encoder_forward_cached(model, f.rgb)
        token_list.append(tokens)
        enc_caches.append(cache)
    if cfg.injection_arm:
        head_inputs = [tok + code for tok, code in
                       zip(token_list, (scene.injection_codes[t], scene.injection_codes[t2]))]
    else:
        head_inputs = token_list
    (logits_list, fb), head_cache = heads_forward_cached(model, head_inputs)

    parts = {}
    k = frames[0].camera[0]

    all_logits = np.concatenate([l.reshape(-1, l.shape[-1]) for l in logits_list])
    all_labels = np.concatenate([scene.token_labels[t].reshape(-1),
                                 scene.token_labels[t2].reshape(-1)])
    ce_value, ce_grad = ce_proxy_loss(all_logits, all_labels)
    parts["ce"] = (ce_value, {"logits": ce_grad})

    need_validator = "geometry" in toggles or "cross_view" in toggles
    d_depth = [None, None]
    d_sigma = [None, None]
    val_out = [None, None]
    val_cache = [None, None]
    if need_validator:
        for i in range(2):
            val_out[i], val_cache[i] = validator_forward_cached(model, token_list[i])
            d_depth[i] = np.zeros(val_out[i].depth.values.shape)
            d_sigma[i] = np.zeros(val_out[i].sigma.shape)

    if "geometry" in toggles:
        value = 0.0
        for i, f in enumerate(frames):
            v, gd, gs = geometry_loss(GeometryLossInputs(
                val_out[i].depth, val_out[i].sigma, f.depth, cfg.alpha))
            value += v / 2.0
            d_depth[i] += gd / 2.0
            d_sigma[i] += gs / 2.0
        parts["geometry"] = (value, {})

    empty_overlap = False
    if "cross_view" in toggles:
        if scene.frames[t].scene_seed != scene.frames[t2].scene_seed:
            raise ContractViolation("cross-view pair must come from one scene")
        rel = relative_pose(frames[1].camera[1], frames[0].camera[1])
        res = cross_view_loss(val_out[0].depth, val_out[1].depth, rel, k)
        d_depth[0] += res.grad_depth_t
        d_depth[1] += res.grad_depth_src
        empty_overlap = res.empty_overlap
        parts["cross_view"] = (res.value, {}, {"empty_overlap": res.empty_overlap})

    if "global" in toggles:
        g_value, g_fb = global_loss(scene.teacher, fb)
        parts["global"] = (g_value, {})
    else:
        g_fb = None

    report = composite_loss(parts, {"ce"} | set(toggles))

    # backward in fixed order: ce, validator losses, global, then encoder
    d_logits_list = [ce_grad[:logits_list[0].reshape(-1, ce_grad.shape[-1]).shape[0]],
                     ce_grad[logits_list[0].reshape(-1, ce_grad.shape[-1]).shape[0]:]]
    d_logits_list = [g.reshape(l.shape) for g, l in zip(d_logits_list, logits_list)]
    d_tokens = heads_backward(model, head_cache, d_logits_list, g_fb, grads)
    # injection offset is additive with zero parameters: gradients pass through
    if need_validator:
        for i in range(2):
            d_tokens[i] = d_tokens[i] + validator_backward(
                model, val_cache[i], d_depth[i], d_sigma[i], grads)
    for i in range(2):
        encoder_backward(model, enc_caches[i], d_tokens[i], grads)
    return report, grads, empty_overlap


def train_run(cfg: RunConfig, seed: int, ds: Dataset | None = None) -> RunLog:
    """Train one seed to completion, save the checkpoint, probe it, and
    write the canonical run log plus a wall-clock sidecar."""
    t_start = time.perf_counter()
    if ds is None:
        ds = load_dataset(cfg.dataset)
    toggles = cfg.toggles
    need_teacher = "global" in toggles
    scenes = _prepare_scenes(ds, "train", cfg, need_teacher, cfg.injection_arm)
    n_frames = len(scenes[0].frames)

    model = Model(_model_config(ds, cfg, seed))
    mean_depth = float(np.mean([f.depth.values[f.depth.valid].mean()
                                for sc in scenes for f in sc.frames]))
    calibrate_depth_head(model, mean_depth)
    if cfg.validator_init == "warmstart":
        _warmstart_validator(model, ds, cfg, seed)
    opt = Adam(lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(10,)))

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / f"seed{seed}.ckpt"

    n_pairs = max(1, cfg.batch // 2)
    step_rows = []
    empty_overlap_steps = 0
    cv_start = int(cfg.cross_view_start_frac * cfg.steps)
    for step in range(cfg.steps):
        # cosine decay of the learning rate down to zero over the run
        opt.lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * step / cfg.steps))
        step_toggles = toggles
        if "cross_view" in toggles and step < cv_start:
            step_toggles = toggles - {"cross_view"}
        agg_grads = None
        row = {}
        for _ in range(n_pairs):
            scene = scenes[int(rng.integers(len(scenes)))]
            t = int(rng.integers(n_frames))
            neighbors = [u for u in range(max(0, t - cfg.neighbor_window),
                                          min(n_frames, t + cfg.neighbor_window + 1))
                         if u != t]
            t2 = neighbors[int(rng.integers(len(neighbors)))]
            try:
                report, grads, empty_overlap = _forward_pair(
                    model, cfg, scene, t, t2, step_toggles)
            except TrainingNanError as exc:
                save_checkpoint(model, ckpt_path)
                raise TrainingAborted(
                    f"non-finite loss at step {step}: {exc}", str(ckpt_path))
            if not np.isfinite(report.total):
                save_checkpoint(model, ckpt_path)
                bad = [n for n, v in report.terms.items() if not np.isfinite(v)]
                raise TrainingAborted(
                    f"non-finite loss term(s) {bad} at step {step}", str(ckpt_path))
            if empty_overlap:
                empty_overlap_steps += 1
            if agg_grads is None:
                agg_grads = grads
                row = dict(report.terms)
                row["total"] = report.total
            else:
                for name in model.param_names:
                    agg_grads[name] += grads[name]
                for name, v in report.terms.items():
                    row[name] += v
                row["total"] += report.total
        if n_pairs > 1:
            for name in model.param_names:
                agg_grads[name] /= n_pairs
            row = {k: v / n_pairs for k, v in row.items()}
        try:
            opt.step(model, agg_grads)
        except TrainingNanError as exc:
            save_checkpoint(model, ckpt_path)
            raise TrainingAborted(f"non-finite gradient at step {step}: {exc}",
                                  str(ckpt_path))
        step_rows.append({k: float(v) for k, v in sorted(row.items())})

    save_checkpoint(model, ckpt_path)
    probe = evaluate_model(model, ds, cfg)
    from .kernels import backend_name
    log = RunLog(seed=seed, config=_canonical(asdict(cfg)), steps=step_rows,
                 empty_overlap_steps=empty_overlap_steps,
                 checkpoint=ckpt_path.name, probe_metrics=_canonical(probe),
                 kernel_backend=backend_name())
    (out_dir / f"seed{seed}.runlog.json").write_text(log.to_json())
    (out_dir / f"seed{seed}.timing.txt").write_text(
        f"wall_clock_seconds {time.perf_counter() - t_start:.3f}\n")
    return log


def train(cfg: RunConfig, ds: Dataset | None = None) -> list:
    if ds is None:
        ds = load_dataset(cfg.dataset)
    return [train_run(cfg, seed, ds) for seed in cfg.seeds]


# ---------------------------------------------------------------------------
# frozen-feature evaluation protocol
# ---------------------------------------------------------------------------

def _frame_features(model: Model, frame, cfg: RunConfig, scene: _Scene | None,
                    frame_idx: int, supply_coords: bool):
    tokens, _ = encoder_forward_cached(model, frame.rgb)
    if cfg.injection_arm:
        if supply_coords:
            tokens = tokens + scene.injection_codes[frame_idx]
        # withheld coordinates enter as zeros: tokens stay as-is
    return tokens


def _token_footprint(depth: np.ndarray, k, patch: int) -> np.ndarray:
    return patch * depth / (2.0 * k.fx)


def evaluate_model(model: Model, ds: Dataset, cfg: RunConfig,
                   supply_coords: bool = True,
                   thresholds=(0.25, 0.5)) -> dict:
    """Full frozen-feature protocol: linear probes fit on the train split,
    depth/normal probe metrics + correspondence recall + label-conditioned
    grounding on the test split."""
    need_inj = cfg.injection_arm
    train_scenes = _prepare_scenes(ds, "train", cfg, False, need_inj)
    test_scenes = _prepare_scenes(ds, "test", cfg, False, need_inj)

    def collect(scenes):
        feats, depth_t, depth_ok, norm_t, norm_ok = [], [], [], [], []
        token_grids = []
        for sc in scenes:
            grids = []
            for fi, frame in enumerate(sc.frames):
                tok = _frame_features(model, frame, cfg, sc, fi, supply_coords)
                grids.append(tok)
                c = tok.shape[-1]
                feats.append(tok.reshape(-1, c))
                dt, dok = token_depth_targets(frame, cfg.patch)
                nt, nok = token_normal_targets(frame, cfg.patch)
                depth_t.append(dt.reshape(-1))
                depth_ok.append(dok.reshape(-1))
                norm_t.append(nt.reshape(-1, 3))
                norm_ok.append(nok.reshape(-1))
            token_grids.append(grids)
        return (np.concatenate(feats), np.concatenate(depth_t),
                np.concatenate(depth_ok), np.concatenate(norm_t),
                np.concatenate(norm_ok), token_grids)

    tr_f, tr_d, tr_dok, tr_n, tr_nok, _ = collect(train_scenes)
    te_f, te_d, te_dok, te_n, te_nok, te_grids = collect(test_scenes)

    depth_res = linear_probe(tr_f[tr_dok], tr_d[tr_dok], te_f[te_dok], te_d[te_dok],
                             "depth")
    normal_res = linear_probe(tr_f[tr_nok], tr_n[tr_nok], te_f[te_nok], te_n[te_nok],
                              "normals")

    pairs = []
    for sc, grids in zip(test_scenes, te_grids):
        n = len(sc.frames)
        for i in range(n):
            for j in range(n):
                if i != j:
                    pairs.append(correspondence_errors(
                        grids[i], grids[j], sc.frames[i], sc.frames[j], cfg.patch))
    recall_bins = correspondence_recall(pairs)
    curve = recall_curve(pairs, np.round(np.arange(0.005, 0.2001, 0.005), 4))

    cases = _grounding_cases(model, ds, cfg, test_scenes, te_grids, depth_res.coefficients)
    metrics = {
        "depth_rmse": depth_res.rmse,
        "normal_rmse": normal_res.normal.rmse_deg,
        "normal_macc": normal_res.normal.macc,
        "recall@2cm": {f"[{lo:g},{hi:g})": r for (lo, hi), r in recall_bins.items()},
        "recall_curve": curve,
        "n_grounding_cases": len(cases),
    }
    st_cases = [c for c in cases if c.kind == "st"]
    for tau in thresholds:
        hits = sum(1 for c in st_cases
                   if len(c.pred) == 1 and _iou_hit(c, tau))
        metrics[f"acc@{tau:g}"] = hits / len(st_cases) if st_cases else float("nan")
        metrics[f"f1@{tau:g}"] = multi_target_f1(cases, tau) if cases else float("nan")
    return metrics


def _iou_hit(case: GroundingCase, tau: float) -> bool:
    from .metrics import iou3d
    return iou3d(case.pred[0], case.gt[0]) >= tau


def _grounding_cases(model: Model, ds: Dataset, cfg: RunConfig, test_scenes,
                     token_grids, depth_coefficients) -> list:
    """Label-conditioned grounding: tokens whose semantic argmax equals the
    queried class are lifted with probe-predicted depth and wrapped in an
    axis-aligned box (inflated by the token footprint). Empty prediction
    lists are legal (and correct for zero-target cases)."""
    cases = []
    for sc, grids in zip(test_scenes, token_grids):
        scene = sc.record.scene
        gt_by_label = {}
        for box, lab in zip(scene.boxes, scene.box_labels):
            gt_by_label.setdefault(int(lab), []).append(Box3D(tuple(box[:3]), tuple(box[3:])))
        if scene.sphere is not None:
            c, r = scene.sphere[:3], scene.sphere[3]
            gt_by_label.setdefault(5, []).append(Box3D(tuple(c - r), tuple(c + r)))

        # predicted points per label across all frames of the scene
        points_by_label = {lab: [] for lab in range(1, N_CLASSES)}
        pads_by_label = {lab: [] for lab in range(1, N_CLASSES)}
        for fi, frame in enumerate(sc.frames):
            tok = grids[fi]
            c = tok.shape[-1]
            logits, _ = heads_forward_cached(model, [tok])[0]
            pred_label = np.argmax(logits[0], axis=-1)
            pred_depth = ridge_predict(depth_coefficients, tok.reshape(-1, c))[:, 0]
            pred_depth = np.maximum(pred_depth, 1e-3).reshape(tok.shape[:2])
            k, pose = frame.camera
            vs, us = token_centers(k.height, k.width, cfg.patch)
            ray_u = (us - k.cx) / k.fx
            ray_v = (vs - k.cy) / k.fy
            cam = np.stack([np.broadcast_to(ray_u, pred_depth.shape) * pred_depth,
                            np.broadcast_to(ray_v[:, None], pred_depth.shape) * pred_depth,
                            pred_depth], axis=-1)
            world = cam @ pose.rotation.T + pose.translation
            pad = _token_footprint(pred_depth, k, cfg.patch)
            for lab in range(1, N_CLASSES):
                sel = pred_label == lab
                if sel.any():
                    points_by_label[lab].append(world[sel])
                    pads_by_label[lab].append(pad[sel])

        for lab in range(1, N_CLASSES):
            gt_boxes = gt_by_label.get(lab, [])
            preds = []
            if points_by_label[lab]:
                pts = np.concatenate(points_by_label[lab])
                pad = np.concatenate(pads_by_label[lab])[:, None]
                mn = (pts - pad).min(axis=0)
                mx = (pts + pad).max(axis=0)
                preds = [Box3D(tuple(mn), tuple(mx))]
            cases.append(GroundingCase(f"{sc.record.scene_id}:label{lab}", preds, gt_boxes))
    return cases


# ---------------------------------------------------------------------------
# ablation sweep
# ---------------------------------------------------------------------------

def ablate(cfg: RunConfig, ds: Dataset | None = None) -> dict:
    """Run every ablation arm over all seeds; emit per-arm mean/std of each
    probe metric plus the recall bins."""
    if ds is None:
        ds = load_dataset(cfg.dataset)
    table = {"arms": {}, "columns": list(METRIC_COLUMNS)}
    for arm_name, toggles, init in ABLATION_ARMS:
        arm_cfg = replace(
            cfg,
            use_global="global" in toggles,
            use_geometry="geometry" in toggles,
            use_cross_view="cross_view" in toggles,
            validator_init=init,
            out_dir=str(Path(cfg.out_dir) / arm_name),
        )
        logs = train(arm_cfg, ds)
        per_seed = [log.probe_metrics for log in logs]
        row = {"seeds": list(arm_cfg.seeds), "per_seed": per_seed}
        for col in METRIC_COLUMNS:
            vals = np.array([m[col] for m in per_seed], dtype=np.float64)
            row[col] = {"mean": float(vals.mean()), "std": float(vals.std())}
        table["arms"][arm_name] = row
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(table, sort_keys=True, indent=1) + "\n")
    (out / "ablation.csv").write_text(_ablation_csv(table))
    return table


def _ablation_csv(table: dict) -> str:
    cols = table["columns"]
    lines = ["arm," + ",".join(f"{c}_mean,{c}_std" for c in cols)]
    for arm_name, row in table["arms"].items():
        cells = [arm_name]
        for c in cols:
            cells.append(repr(row[c]["mean"]))
            cells.append(repr(row[c]["std"]))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# dependency contrast (remove-3D-inputs analogue)
# ---------------------------------------------------------------------------

def dependency_probe(ckpt_injection, ckpt_igep, dataset_path, cfg: RunConfig) -> dict:
    """Evaluate both arms with and without test-time coordinates.

    The injection arm consumed pooled gt coordinates during training, so
    withholding them (zeros) degrades it; the emergence arm has no
    coordinate input path, so its delta is exactly zero."""
    ds = load_dataset(dataset_path)
    inj_model = load_checkpoint(ckpt_injection)
    igep_model = load_checkpoint(ckpt_igep)
    inj_cfg = replace(cfg, injection_arm=True)
    igep_cfg = replace(cfg, injection_arm=False)

    rows = {}
    inj_with = evaluate_model(inj_model, ds, inj_cfg, supply_coords=True)
    inj_without = evaluate_model(inj_model, ds, inj_cfg, supply_coords=False)
    igep_with = evaluate_model(igep_model, ds, igep_cfg, supply_coords=True)
    igep_without = evaluate_model(igep_model, ds, igep_cfg, supply_coords=False)
    for name, with_m, without_m in (("injection", inj_with, inj_without),
                                    ("emergence", igep_with, igep_without)):
        rows[name] = {
            "with_coords": {"acc@0.25": with_m["acc@0.25"], "f1@0.25": with_m["f1@0.25"]},
            "without_coords": {"acc@0.25": without_m["acc@0.25"],
                               "f1@0.25": without_m["f1@0.25"]},
            "acc_delta": with_m["acc@0.25"] - without_m["acc@0.25"],
        }
    return _canonical(rows)


# ---------------------------------------------------------------------------
# attach/detach inference benchmark
# ---------------------------------------------------------------------------

def bench_inference(ckpt_path, n_frames: int = 100, repeats: int = 5,
                    scene_seed: int = 77) -> dict:
    """Median time of the encoder+heads forward with the validator detached
    vs attached, plus the detachment contracts (bit-identical outputs, zero
    validator ops on the detached path)."""
    attached = load_checkpoint(ckpt_path)
    if not attached.with_validator:
        raise ContractViolation("benchmark needs a checkpoint with a validator")
    detached = load_checkpoint(ckpt_path, with_validator=False)
    cfg = attached.cfg
    scene = generate_scene(scene_seed)
    rendered = render_scene(scene, 8, cfg.width, cfg.height)
    frames = [rendered[i % len(rendered)].rgb for i in range(n_frames)]

    def run(model, use_validator):
        outs = []
        for rgb in frames:
            tokens, _ = encoder_forward_cached(model, rgb)
            heads_forward_cached(model, [tokens])
            if use_validator:
                validator_forward_cached(model, tokens)
            outs.append(tokens)
        return outs

    detached.validator_op_count = 0
    times_att, times_det = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out_att = run(attached, True)
        times_att.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        out_det = run(detached, False)
        times_det.append(time.perf_counter() - t0)

    identical = all(np.array_equal(a, d) for a, d in zip(out_att, out_det))
    report = {
        "n_frames": n_frames,
        "repeats": repeats,
        "outputs_bit_identical": bool(identical),
        "detached_validator_ops": int(detached.validator_op_count),
        "attached_validator_ops": int(attached.validator_op_count),
        "median_attached_s": float(np.median(times_att)),
        "median_detached_s": float(np.median(times_det)),
        "detached_faster": bool(np.median(times_det) < np.median(times_att)),
    }
    report["contracts_hold"] = bool(identical and detached.validator_op_count == 0
                                    and report["detached_faster"])
    return report
