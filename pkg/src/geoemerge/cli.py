"""Command-line interface.

Subcommands: gen, train, ablate, probe, eval, gradcheck, bench,
analyze-loss, export-features. Shared flags: --config <file>, --seed <u64>,
--out <dir>. Exit code 0 only when every asserted contract holds.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import generate_dataset, load_dataset
from .errors import ContractViolation, EmptySupportError, GenerationError
from .injection import information_loss_report
from .scenegen import SceneConfig, standard_benchmark_config


def _add_shared(parser):
    parser.add_argument("--config", type=str, default=None, help="run config file (JSON)")
    parser.add_argument("--seed", type=int, default=None, help="seed override")
    parser.add_argument("--out", type=str, default=None, help="output directory override")


def _load_run_config(args, require=True):
    from .trainer import RunConfig
    if args.config:
        cfg = RunConfig.from_file(args.config)
    elif require:
        raise ContractViolation("--config is required for this command")
    else:
        return None
    if args.seed is not None:
        cfg.seeds = (int(args.seed),)
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def cmd_gen(args) -> int:
    preset = standard_benchmark_config() if args.preset == "standard" else SceneConfig()
    if args.depth_noise > 0:
        from dataclasses import replace
        preset = replace(preset, depth_noise_std=args.depth_noise)
    seed = args.seed if args.seed is not None else 0
    out = args.out or "dataset"
    ds = generate_dataset(out, seed=seed, n_scenes=args.scenes, n_test=args.test_scenes,
                          n_frames=args.frames, width=args.size, height=args.size,
                          config=preset)
    print(f"wrote {len(ds.records)} scenes ({args.test_scenes} test) to {out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import train
    cfg = _load_run_config(args)
    logs = train(cfg)
    for log in logs:
        m = log.probe_metrics
        print(f"seed {log.seed}: final total {log.steps[-1]['total']:.6f}  "
              f"depth_rmse {m['depth_rmse']:.4f}  normal_macc {m['normal_macc']:.4f}  "
              f"acc@0.25 {m['acc@0.25']:.3f}")
    return 0


def cmd_ablate(args) -> int:
    from .trainer import METRIC_COLUMNS, ablate
    cfg = _load_run_config(args)
    table = ablate(cfg)
    header = "arm".ljust(22) + "  ".join(c.ljust(18) for c in METRIC_COLUMNS)
    print(header)
    for arm, row in table["arms"].items():
        cells = "  ".join(f"{row[c]['mean']:.4f}±{row[c]['std']:.4f}".ljust(18)
                          for c in METRIC_COLUMNS)
        print(arm.ljust(22) + cells)
    print(f"table written to {Path(cfg.out_dir) / 'ablation.json'}")
    return 0


def cmd_probe(args) -> int:
    from .net import load_checkpoint
    from .trainer import RunConfig, evaluate_model
    cfg = _load_run_config(args, require=False) or RunConfig(
        dataset=args.data, out_dir=args.out or ".")
    cfg.dataset = args.data or cfg.dataset
    ds = load_dataset(cfg.dataset)
    model = load_checkpoint(args.ckpt)
    metrics = evaluate_model(model, ds, cfg)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "probe_metrics.json").write_text(
        json.dumps(metrics, sort_keys=True, indent=1) + "\n")
    with open(out / "recall_curve.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold_m", "recall"])
        writer.writerows(metrics["recall_curve"])
    for key in ("depth_rmse", "normal_rmse", "normal_macc", "acc@0.25", "acc@0.5",
                "f1@0.25", "f1@0.5"):
        print(f"{key}: {metrics[key]}")
    print(f"recall@2cm per bin: {metrics['recall@2cm']}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import Box3D, GroundingCase, grounding_accuracy, multi_target_f1
    ds = load_dataset(args.data)
    pred = json.loads(Path(args.pred).read_text())
    gt_by_case = {}
    for rec in ds.records:
        scene = rec.scene
        by_label = {}
        for box, lab in zip(scene.boxes, scene.box_labels):
            by_label.setdefault(int(lab), []).append(Box3D(tuple(box[:3]), tuple(box[3:])))
        if scene.sphere is not None:
            c, r = scene.sphere[:3], scene.sphere[3]
            by_label.setdefault(5, []).append(Box3D(tuple(c - r), tuple(c + r)))
        for lab in range(1, 6):
            gt_by_case[f"{rec.scene_id}:label{lab}"] = by_label.get(lab, [])
    cases = []
    for case_id, boxes in pred["cases"].items():
        if case_id not in gt_by_case:
            raise ContractViolation(f"unknown case id {case_id!r}")
        pred_boxes = [Box3D(tuple(b[0]), tuple(b[1])) for b in boxes]
        cases.append(GroundingCase(case_id, pred_boxes, gt_by_case[case_id]))
    report = {"n_cases": len(cases)}
    st = [c for c in cases if c.kind == "st" and len(c.pred) == 1]
    for tau in (0.25, 0.5):
        report[f"f1@{tau:g}"] = multi_target_f1(cases, tau)
        report[f"acc@{tau:g}"] = grounding_accuracy(st, tau) if st else float("nan")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    with open(out / "eval_metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        for k, v in sorted(report.items()):
            writer.writerow([k, v])
    for k, v in sorted(report.items()):
        print(f"{k}: {v}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_gradcheck_suite
    results = run_gradcheck_suite(n_points=args.points, seed=args.seed or 0)
    width = max(len(r.name) for r in results)
    ok = True
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name.ljust(width)}  max_rel_err {r.max_rel_err:.3e}  "
              f"(tol {r.tolerance:g})  {status}")
        ok &= r.passed
    print("gradcheck suite:", "pass" if ok else "FAIL")
    return 0 if ok else 1


def cmd_bench(args) -> int:
    from .trainer import bench_inference
    report = bench_inference(args.ckpt, n_frames=args.frames, repeats=args.repeats)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        contract = {k: v for k, v in report.items() if not k.startswith("median")}
        (out / "bench_report.json").write_text(
            json.dumps(contract, sort_keys=True, indent=1) + "\n")
        (out / "bench_timing.txt").write_text(
            f"median_attached_s {report['median_attached_s']:.6f}\n"
            f"median_detached_s {report['median_detached_s']:.6f}\n")
    for k, v in report.items():
        print(f"{k}: {v}")
    return 0 if report["contracts_hold"] else 1


def cmd_analyze_loss(args) -> int:
    ds = load_dataset(args.data)
    out = Path(args.out or "analyze_loss")
    out.mkdir(parents=True, exist_ok=True)
    records = []
    spread_rows = []
    for rec in ds.records:
        for idx, frame in enumerate(ds.load_frames(rec)):
            rep = information_loss_report(frame, patch=args.patch, voxel_size=args.voxel_size)
            row = {"scene": rec.scene_id, "frame": idx}
            row.update(rep.to_record())
            records.append(row)
            ht, wt = rep.patch_spreads.shape
            for i in range(ht):
                for j in range(wt):
                    if rep.patch_valid[i, j]:
                        spread_rows.append((rec.scene_id, idx, i, j,
                                            repr(float(rep.patch_spreads[i, j]))))
    (out / "information_loss.json").write_text(
        json.dumps(records, sort_keys=True, indent=1) + "\n")
    with open(out / "patch_spreads.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scene", "frame", "token_row", "token_col", "spread_m"])
        writer.writerows(spread_rows)
    n_bad = sum(1 for r in records if r["n_patches_spread_exceeds"] > 0)
    print(f"analyzed {len(records)} frames; {n_bad} carry patches with spread > "
          f"{args.voxel_size} m; report in {out}")
    return 0


def cmd_export_features(args) -> int:
    from .net import encoder_forward_cached, load_checkpoint
    model = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    out = Path(args.out or "features")
    out.mkdir(parents=True, exist_ok=True)
    for rec in ds.records:
        for idx, frame in enumerate(ds.load_frames(rec)):
            tokens, _ = encoder_forward_cached(model, frame.rgb)
            stem = out / f"{rec.scene_id}_frame{idx:03d}"
            if args.format in ("csv", "both"):
                with open(stem.with_suffix(".csv"), "w", newline="") as f:
                    writer = csv.writer(f)
                    ht, wt, c = tokens.shape
                    writer.writerow(["token_row", "token_col"] + [f"c{k}" for k in range(c)])
                    for i in range(ht):
                        for j in range(wt):
                            writer.writerow([i, j] + [repr(float(x)) for x in tokens[i, j]])
            if args.format in ("raw", "both"):
                stem.with_suffix(".raw").write_bytes(
                    np.ascontiguousarray(tokens, dtype="<f4").tobytes())
    print(f"exported features for {len(ds.records)} scenes to {out}")
    return 0


def cmd_dependency(args) -> int:
    from .trainer import RunConfig, dependency_probe
    cfg = _load_run_config(args, require=False) or RunConfig(
        dataset=args.data, out_dir=args.out or ".")
    cfg.dataset = args.data or cfg.dataset
    report = dependency_probe(args.injection_ckpt, args.igep_ckpt, cfg.dataset, cfg)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "dependency_report.json").write_text(
        json.dumps(report, sort_keys=True, indent=1) + "\n")
    for arm, row in report.items():
        print(f"{arm}: with {row['with_coords']['acc@0.25']:.3f} "
              f"without {row['without_coords']['acc@0.25']:.3f} "
              f"delta {row['acc_delta']:+.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geoemerge",
                                     description="emergent 3D awareness at desk scale")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_shared(p)
    p.add_argument("--scenes", type=int, default=25)
    p.add_argument("--test-scenes", type=int, default=5)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--preset", choices=("standard", "default"), default="standard")
    p.add_argument("--depth-noise", type=float, default=0.0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one run per configured seed")
    _add_shared(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run every ablation arm over all seeds")
    _add_shared(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("probe", help="linear-probe a frozen checkpoint")
    _add_shared(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="score a predictions file against a dataset")
    _add_shared(p)
    p.add_argument("--pred", required=True, help="JSON: {'cases': {id: [[mn, mx], ...]}}")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_shared(p)
    p.add_argument("--points", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="attached vs detached inference benchmark")
    _add_shared(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze-loss", help="double-information-loss report")
    _add_shared(p)
    p.add_argument("--data", required=True)
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--voxel-size", type=float, default=0.1)
    p.set_defaults(func=cmd_analyze_loss)

    p = sub.add_parser("export-features", help="dump frozen token grids")
    _add_shared(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=("csv", "raw", "both"), default="csv")
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("dependency", help="with/without-coordinates contrast")
    _add_shared(p)
    p.add_argument("--injection-ckpt", required=True)
    p.add_argument("--igep-ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_dependency)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContractViolation, EmptySupportError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
