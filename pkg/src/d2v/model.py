"""The trained scene: static + dynamic (+ optional shadow) fields.

A checkpoint is a directory holding one binary file per field plus a small
meta.json with the ray bounds needed to render.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cameras import Camera, camera_rays
from .fields import DynamicField, ShadowField, StaticField, load_field
from .renderer import midpoint_t, render_rays, static_surface_t

RENDER_MODES = ("composite", "static", "dynamic_white", "alpha", "depth", "rho")


@dataclass
class SceneModel:
    static: StaticField
    dynamic: DynamicField
    shadow: Optional[ShadowField]
    t_near: float
    t_far: float

    @property
    def fields(self):
        fs = [("static", self.static), ("dynamic", self.dynamic)]
        if self.shadow is not None:
            fs.append(("shadow", self.shadow))
        return fs

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        for name, field in self.fields:
            field.save(os.path.join(out_dir, f"{name}.d2vf"))
        meta = {
            "t_near": self.t_near,
            "t_far": self.t_far,
            "has_shadow": self.shadow is not None,
        }
        with open(os.path.join(out_dir, "meta.json"), "w") as f:
            json.dump(meta, f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "SceneModel":
        with open(os.path.join(path, "meta.json")) as f:
            meta = json.load(f)
        static = load_field(os.path.join(path, "static.d2vf"))
        dynamic = load_field(os.path.join(path, "dynamic.d2vf"))
        shadow = None
        if meta.get("has_shadow"):
            shadow = load_field(os.path.join(path, "shadow.d2vf"))
        return cls(static=static, dynamic=dynamic, shadow=shadow,
                   t_near=meta["t_near"], t_far=meta["t_far"])

    def render_image(self, camera: Camera, tau: float, n_samples: int = 256,
                     chunk: int = 2048, shadow_enabled: bool = True) -> dict:
        """Render every output mode with deterministic midpoint samples.

        Returns a dict with composite / static / dynamic_white (H, W, 3)
        and alpha / depth / rho (H, W). `shadow_enabled=False` forces
        rho to zero in the composite, for ablation renders.
        """
        origins, dirs = camera_rays(camera, self.t_near, self.t_far)
        n_rays = origins.shape[0]
        t = midpoint_t(self.t_near, self.t_far, n_samples)
        shadow = self.shadow if shadow_enabled else None

        buf = {
            "composite": np.empty((n_rays, 3)),
            "static": np.empty((n_rays, 3)),
            "dynamic_white": np.empty((n_rays, 3)),
            "alpha": np.empty(n_rays),
            "depth": np.empty(n_rays),
            "rho": np.zeros(n_rays),
        }
        for lo in range(0, n_rays, chunk):
            hi = min(lo + chunk, n_rays)
            r = hi - lo
            out, _ = render_rays(
                self.static, self.dynamic, shadow,
                origins[lo:hi], dirs[lo:hi], self.t_near, self.t_far,
                np.full(r, tau), np.broadcast_to(t, (r, n_samples)),
            )
            buf["composite"][lo:hi] = out.color
            buf["static"][lo:hi] = out.static_color
            buf["dynamic_white"][lo:hi] = out.dynamic_color
            buf["alpha"][lo:hi] = out.dynamic_alpha
            buf["depth"][lo:hi] = out.depth
            if self.shadow is not None:
                t_surf, has_surf = static_surface_t(out.sigma_s, out.delta, out.t)
                pts = origins[lo:hi] + t_surf[:, None] * dirs[lo:hi]
                rho, _ = self.shadow.evaluate_batch(pts, np.full(r, tau))
                buf["rho"][lo:hi] = np.where(has_surf, rho, 0.0)

        h, w = camera.height, camera.width
        return {
            "composite": buf["composite"].reshape(h, w, 3),
            "static": buf["static"].reshape(h, w, 3),
            "dynamic_white": buf["dynamic_white"].reshape(h, w, 3),
            "alpha": buf["alpha"].reshape(h, w),
            "depth": buf["depth"].reshape(h, w),
            "rho": buf["rho"].reshape(h, w),
        }

    def surface_rho(self, camera: Camera, tau: float, n_samples: int = 256,
                    chunk: int = 4096):
        """(rho at first static surface, surface-exists mask), both (H, W).

        rho is zero where the model has no shadow field or no surface.
        """
        origins, dirs = camera_rays(camera, self.t_near, self.t_far)
        n_rays = origins.shape[0]
        t = midpoint_t(self.t_near, self.t_far, n_samples)
        step = (self.t_far - self.t_near) / n_samples
        rho_out = np.zeros(n_rays)
        has = np.zeros(n_rays, dtype=bool)
        for lo in range(0, n_rays, chunk):
            hi = min(lo + chunk, n_rays)
            r = hi - lo
            pts = (origins[lo:hi, None, :] + t[None, :, None] * dirs[lo:hi, None, :]).reshape(-1, 3)
            sigma, _, _ = self.static.evaluate_batch(pts)
            delta = np.full((r, n_samples), step)
            t_surf, has_surf = static_surface_t(
                sigma.reshape(r, n_samples), delta, np.broadcast_to(t, (r, n_samples))
            )
            has[lo:hi] = has_surf
            if self.shadow is not None:
                surf_pts = origins[lo:hi] + t_surf[:, None] * dirs[lo:hi]
                rho, _ = self.shadow.evaluate_batch(surf_pts, np.full(r, tau))
                rho_out[lo:hi] = np.where(has_surf, rho, 0.0)
        shape = (camera.height, camera.width)
        return rho_out.reshape(shape), has.reshape(shape)


def build_model(bbox, n_frames: int, t_near: float, t_far: float,
                static_res: int = 32, dynamic_res: int = 16,
                shadow_res: int = 16, time_slices: int | None = None,
                use_shadow: bool = False) -> SceneModel:
    """Fresh zero-initialized model sized for a dataset."""
    slices = n_frames if time_slices is None else time_slices
    static = StaticField(bbox, (static_res,) * 3)
    dynamic = DynamicField(bbox, (dynamic_res,) * 3, time_slices=slices)
    shadow = ShadowField(bbox, (shadow_res,) * 3, time_slices=slices) if use_shadow else None
    return SceneModel(static=static, dynamic=dynamic, shadow=shadow,
                      t_near=t_near, t_far=t_far)
