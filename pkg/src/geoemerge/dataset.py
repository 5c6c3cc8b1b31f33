"""Dataset directory format: manifest + per-frame raw rasters.

Layout:
    <root>/manifest.json      seeds, config, units, splits, scene records
    <root>/scene_NNNN/
        frame_FFF.rgb.raw     uint8 triplets, row-major
        frame_FFF.depth.raw   little-endian float32, row-major (0 = invalid)
        frame_FFF.normals.raw little-endian float32 xyz triplets, row-major
        frame_FFF.labels.raw  little-endian uint16 ids, row-major
        frame_FFF.cam.txt     "fx fy cx cy" line + 3 rows of the camera-to-
                              world 3x4 matrix, row-major

Every byte is a pure function of (seed, config): renders are float64 and
quantization (uint8 rgb, float32 depth/normals) is deterministic.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .geometry import DepthMap, Intrinsics, NormalMap, Pose
from .scenegen import Frame, Scene, SceneConfig, generate_scene, render_scene

MANIFEST_NAME = "manifest.json"


@dataclass
class SceneRecord:
    scene_id: str
    seed: int
    split: str                  # "train" | "test"
    directory: str
    frames: list
    scene: Scene


@dataclass
class Dataset:
    root: Path
    width: int
    height: int
    seed: int
    config: SceneConfig
    records: list

    def scenes(self, split: str | None = None):
        return [r for r in self.records if split is None or r.split == split]

    def load_frames(self, record: SceneRecord) -> list:
        return [read_frame(self.root / record.directory, i, self.width, self.height)
                for i in range(len(record.frames))]


def _scene_to_json(scene: Scene) -> dict:
    return {
        "room_min": scene.room_min.tolist(),
        "room_max": scene.room_max.tolist(),
        "boxes": scene.boxes.tolist(),
        "box_labels": scene.box_labels.tolist(),
        "sphere": None if scene.sphere is None else scene.sphere.tolist(),
        "light_dir": scene.light_dir.tolist(),
        "seed": scene.seed,
    }


def _scene_from_json(obj: dict) -> Scene:
    return Scene(
        np.asarray(obj["room_min"]), np.asarray(obj["room_max"]),
        np.asarray(obj["boxes"]).reshape(-1, 6), np.asarray(obj["box_labels"], dtype=np.int64),
        None if obj["sphere"] is None else np.asarray(obj["sphere"]),
        np.asarray(obj["light_dir"]), int(obj["seed"]))


def write_frame(directory: Path, frame: Frame, index: int):
    directory.mkdir(parents=True, exist_ok=True)
    stem = directory / f"frame_{index:03d}"
    rgb8 = np.clip(np.floor(frame.rgb * 255.0 + 0.5), 0, 255).astype(np.uint8)
    (stem.with_suffix(".rgb.raw")).write_bytes(rgb8.tobytes())
    depth32 = np.where(frame.depth.valid, frame.depth.values, 0.0).astype("<f4")
    (stem.with_suffix(".depth.raw")).write_bytes(depth32.tobytes())
    normals32 = np.where(frame.normals.valid[..., None], frame.normals.normals, 0.0).astype("<f4")
    (stem.with_suffix(".normals.raw")).write_bytes(normals32.tobytes())
    labels16 = frame.labels.astype("<u2")
    (stem.with_suffix(".labels.raw")).write_bytes(labels16.tobytes())
    k, pose = frame.camera
    mat = np.concatenate([pose.rotation, pose.translation[:, None]], axis=1)
    lines = [f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r}"]
    for row in mat:
        lines.append(" ".join(repr(float(x)) for x in row))
    (stem.with_suffix(".cam.txt")).write_text("\n".join(lines) + "\n")


def read_frame(directory: Path, index: int, width: int, height: int) -> Frame:
    stem = Path(directory) / f"frame_{index:03d}"
    rgb = np.frombuffer((stem.with_suffix(".rgb.raw")).read_bytes(), dtype=np.uint8)
    rgb = rgb.reshape(height, width, 3).astype(np.float64) / 255.0
    depth32 = np.frombuffer((stem.with_suffix(".depth.raw")).read_bytes(), dtype="<f4")
    depth_vals = depth32.reshape(height, width).astype(np.float64)
    valid = depth_vals > 0
    normals32 = np.frombuffer((stem.with_suffix(".normals.raw")).read_bytes(), dtype="<f4")
    normals = normals32.reshape(height, width, 3).astype(np.float64)
    n = np.linalg.norm(normals, axis=-1)
    nvalid = n > 0.5
    normals[nvalid] /= n[nvalid][:, None]
    labels = np.frombuffer((stem.with_suffix(".labels.raw")).read_bytes(), dtype="<u2")
    labels = labels.reshape(height, width).astype(np.int64)
    cam_lines = (stem.with_suffix(".cam.txt")).read_text().strip().splitlines()
    fx, fy, cx, cy = (float(x) for x in cam_lines[0].split())
    mat = np.array([[float(x) for x in line.split()] for line in cam_lines[1:4]])
    k = Intrinsics(fx, fy, cx, cy, width, height)
    pose = Pose(mat[:, :3], mat[:, 3])
    return Frame(rgb, DepthMap(np.where(valid, depth_vals, 0.0), valid),
                 NormalMap(normals, nvalid), labels, (k, pose), frame_index=index)


def generate_dataset(out_dir, seed: int, n_scenes: int, n_test: int,
                     n_frames: int = 8, width: int = 64, height: int = 64,
                     config: SceneConfig = SceneConfig()) -> Dataset:
    """Generate and write a dataset: scene i uses seed (seed + i); the last
    n_test scenes form the test split."""
    if n_test >= n_scenes:
        raise ContractViolation("need at least one training scene")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    manifest_scenes = []
    for i in range(n_scenes):
        scene_seed = seed + i
        scene = generate_scene(scene_seed, config)
        frames = render_scene(scene, n_frames, width, height,
                              noise_std=config.depth_noise_std)
        directory = f"scene_{i:04d}"
        for j, frame in enumerate(frames):
            write_frame(out / directory, frame, j)
        split = "test" if i >= n_scenes - n_test else "train"
        frame_names = [f"frame_{j:03d}" for j in range(n_frames)]
        records.append(SceneRecord(directory, scene_seed, split, directory,
                                   frame_names, scene))
        manifest_scenes.append({
            "scene_id": directory,
            "seed": scene_seed,
            "split": split,
            "directory": directory,
            "frames": frame_names,
            "scene": _scene_to_json(scene),
        })
    manifest = {
        "units": "meters",
        "seed": seed,
        "width": width,
        "height": height,
        "n_frames": n_frames,
        "config": asdict(config),
        "scenes": manifest_scenes,
    }
    (out / MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return Dataset(out, width, height, seed, config, records)


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / MANIFEST_NAME).read_text())
    config_fields = {k: tuple(v) if isinstance(v, list) else v
                     for k, v in manifest["config"].items()}
    config = SceneConfig(**config_fields)
    records = [SceneRecord(s["scene_id"], s["seed"], s["split"], s["directory"],
                           s["frames"], _scene_from_json(s["scene"]))
               for s in manifest["scenes"]]
    return Dataset(root, manifest["width"], manifest["height"], manifest["seed"],
                   config, records)
