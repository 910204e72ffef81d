"""On-disk dataset layout: frames, cameras, masks, validation poses.

    out_dir/
      manifest.json            scene hash, frame count, resolution, times, bbox
      cameras.json             intrinsics + 3x4 camera-to-world poses, row-major
      frames/frame_%04d.ppm    training images (8-bit sRGB)
      masks_dyn/%04d.pgm       ground-truth dynamic-object masks
      masks_shadow/%04d.pgm    ground-truth shadow masks
      val/cameras.json         background-only validation poses
      val/bg_%04d.ppm          unshadowed static background renders
      val/masks_ground/%04d.pgm  pixels whose first static hit is ground
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .cameras import Camera
from .images import read_mask, read_ppm, write_mask, write_ppm
from .scenes import (SyntheticScene, frame_times, ground_region_mask,
                     ground_truth_masks, render_ground_truth,
                     training_cameras, validation_cameras)

FORMAT_VERSION = 1


def _cameras_to_json(cameras: list[Camera]) -> dict:
    c0 = cameras[0]
    return {
        "width": c0.width, "height": c0.height,
        "fx": c0.fx, "fy": c0.fy, "cx": c0.cx, "cy": c0.cy,
        "poses": [cam.pose.ravel().tolist() for cam in cameras],
    }


def _cameras_from_json(doc: dict) -> list[Camera]:
    return [
        Camera(
            fx=doc["fx"], fy=doc["fy"], cx=doc["cx"], cy=doc["cy"],
            width=doc["width"], height=doc["height"],
            pose=np.asarray(pose, dtype=np.float64).reshape(3, 4),
        )
        for pose in doc["poses"]
    ]


def scene_hash(scene: SyntheticScene) -> str:
    blob = json.dumps(scene.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Dataset:
    """In-memory view of a generated dataset; images are linear floats."""

    manifest: dict
    cameras: list[Camera]
    times: np.ndarray
    images: np.ndarray          # (F, H, W, 3) linear
    masks_dyn: np.ndarray       # (F, H, W) bool
    masks_shadow: np.ndarray
    val_cameras: list[Camera]
    val_images: np.ndarray
    val_ground_masks: np.ndarray

    @property
    def n_frames(self) -> int:
        return len(self.cameras)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[1]  # (W, H)

    @property
    def bbox(self) -> np.ndarray:
        return np.asarray(self.manifest["bbox"], dtype=np.float64)

    @property
    def t_near(self) -> float:
        return float(self.manifest["t_near"])

    @property
    def t_far(self) -> float:
        return float(self.manifest["t_far"])


def generate_dataset(scene: SyntheticScene, out_dir, seed: int,
                     preset: str | None = None, n_samples: int = 256) -> Dataset:
    """Render and write a full dataset; deterministic for a given seed."""
    out_dir = str(out_dir)
    for sub in ("frames", "masks_dyn", "masks_shadow", "val", "val/masks_ground"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    cams = training_cameras(scene, seed)
    times = frame_times(scene.n_frames)
    val_cams = validation_cameras(scene)

    for i, (cam, tau) in enumerate(zip(cams, times)):
        image = render_ground_truth(scene, cam, float(tau), "full", n_samples)
        write_ppm(os.path.join(out_dir, f"frames/frame_{i:04d}.ppm"), image)
        dyn, shadow = ground_truth_masks(scene, cam, float(tau))
        write_mask(os.path.join(out_dir, f"masks_dyn/{i:04d}.pgm"), dyn)
        write_mask(os.path.join(out_dir, f"masks_shadow/{i:04d}.pgm"), shadow)

    for i, cam in enumerate(val_cams):
        image = render_ground_truth(scene, cam, 0.0, "background_only", n_samples)
        write_ppm(os.path.join(out_dir, f"val/bg_{i:04d}.ppm"), image)
        write_mask(os.path.join(out_dir, f"val/masks_ground/{i:04d}.pgm"),
                   ground_region_mask(scene, cam))

    with open(os.path.join(out_dir, "cameras.json"), "w") as f:
        doc = _cameras_to_json(cams)
        doc["times"] = times.tolist()
        json.dump(doc, f, indent=1, sort_keys=True)
    with open(os.path.join(out_dir, "val", "cameras.json"), "w") as f:
        json.dump(_cameras_to_json(val_cams), f, indent=1, sort_keys=True)

    manifest = {
        "format_version": FORMAT_VERSION,
        "preset": preset or scene.name,
        "seed": seed,
        "scene_hash": scene_hash(scene),
        "scene": scene.to_dict(),
        "frame_count": scene.n_frames,
        "val_count": scene.n_val,
        "resolution": [scene.resolution, scene.resolution],
        "times": times.tolist(),
        "bbox": [list(scene.bbox[0]), list(scene.bbox[1])],
        "t_near": scene.t_near,
        "t_far": scene.t_far,
        "gt_samples": n_samples,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return load_dataset(out_dir)


def load_dataset(path) -> Dataset:
    path = str(path)
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    with open(os.path.join(path, "cameras.json")) as f:
        cam_doc = json.load(f)
    cameras = _cameras_from_json(cam_doc)
    times = np.asarray(cam_doc["times"], dtype=np.float64)
    if np.any(np.diff(times) <= 0) and len(times) > 1:
        raise ValueError("frame times must be strictly increasing")

    n = len(cameras)
    images = np.stack([read_ppm(os.path.join(path, f"frames/frame_{i:04d}.ppm")) for i in range(n)])
    masks_dyn = np.stack([read_mask(os.path.join(path, f"masks_dyn/{i:04d}.pgm")) for i in range(n)])
    masks_shadow = np.stack([read_mask(os.path.join(path, f"masks_shadow/{i:04d}.pgm")) for i in range(n)])

    with open(os.path.join(path, "val", "cameras.json")) as f:
        val_cameras = _cameras_from_json(json.load(f))
    n_val = len(val_cameras)
    val_images = np.stack([read_ppm(os.path.join(path, f"val/bg_{i:04d}.ppm")) for i in range(n_val)])
    val_ground = np.stack(
        [read_mask(os.path.join(path, f"val/masks_ground/{i:04d}.pgm")) for i in range(n_val)]
    )
    return Dataset(
        manifest=manifest, cameras=cameras, times=times, images=images,
        masks_dyn=masks_dyn, masks_shadow=masks_shadow,
        val_cameras=val_cameras, val_images=val_images, val_ground_masks=val_ground,
    )
