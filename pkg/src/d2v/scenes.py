"""Procedural synthetic scenes with analytic ground truth.

A scene is a set of density primitives (constant interior density with a
smooth falloff shell so it stays representable by trilinear grids), a set
of movers with parametric trajectories, and a directional light whose
occlusion by movers produces a multiplicative darkening of static
radiance. Ground-truth images are rendered with the exact same quadrature
as the trainable model, so a converged model can match the targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.interpolate import CubicSpline

from .cameras import Camera, camera_rays, look_at_pose, orbit_position
from .renderer import composite_forward, midpoint_t

DEFAULT_DENSITY = 40.0
DEFAULT_SHELL = 0.15


def smoothstep01(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


@dataclass
class Trajectory:
    """center(tau) = base + amplitude * sin(2 pi freq tau + phase) + poly terms."""

    base: tuple = (0.0, 0.0, 0.0)
    amplitude: tuple = (0.0, 0.0, 0.0)
    frequency: float = 1.0
    phase: tuple = (0.0, 0.0, 0.0)
    poly: tuple = ()  # coefficients for tau^1, tau^2, ... each a 3-vector

    def center(self, tau):
        tau = np.asarray(tau, dtype=np.float64)[..., None]
        c = np.asarray(self.base) + np.asarray(self.amplitude) * np.sin(
            2.0 * math.pi * self.frequency * tau + np.asarray(self.phase)
        )
        for k, coef in enumerate(self.poly, start=1):
            c = c + np.asarray(coef) * tau ** k
        return c


@dataclass
class Sphere:
    center: tuple
    radius: float
    albedo: tuple
    density: float = DEFAULT_DENSITY
    shell: float = DEFAULT_SHELL
    is_ground: bool = False
    kind: str = "sphere"

    def sdf(self, points, center=None, radius=None):
        c = np.asarray(self.center) if center is None else center
        r = self.radius if radius is None else radius
        return np.linalg.norm(points - c, axis=-1) - r


@dataclass
class Box:
    center: tuple
    half_extents: tuple
    albedo: tuple
    density: float = DEFAULT_DENSITY
    shell: float = DEFAULT_SHELL
    is_ground: bool = False
    kind: str = "box"

    def sdf(self, points, center=None, radius=None):
        c = np.asarray(self.center) if center is None else center
        q = np.abs(points - c) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside


@dataclass
class GroundPlane:
    height: float
    albedo: tuple
    density: float = DEFAULT_DENSITY
    shell: float = DEFAULT_SHELL
    is_ground: bool = True
    kind: str = "ground"

    def sdf(self, points, center=None, radius=None):
        return points[..., 2] - self.height


@dataclass
class Mover:
    """A dynamic primitive: a shape driven along a trajectory.

    `radius_amp` adds a sinusoidal radius modulation (non-rigid motion);
    a zero-density mover is an invisible light blocker, which is how the
    shadow-only scenes present a moving shadow with no visible cause.
    """

    shape: Sphere | Box
    trajectory: Trajectory
    radius_amp: float = 0.0
    radius_freq: float = 1.0
    occludes_light: bool = True

    def radius(self, tau):
        base = getattr(self.shape, "radius", 0.0)
        if self.radius_amp == 0.0:
            return np.broadcast_to(base, np.shape(tau)).astype(np.float64)
        return base + self.radius_amp * np.sin(
            2.0 * math.pi * self.radius_freq * np.asarray(tau, dtype=np.float64)
        )

    def sdf(self, points, taus):
        centers = self.trajectory.center(taus)
        if self.shape.kind == "sphere":
            return self.shape.sdf(points, center=centers, radius=self.radius(taus))
        return self.shape.sdf(points, center=centers)


@dataclass
class OrbitSpec:
    azimuth: tuple = (2.0, 2.0 + math.pi / 4.0)
    altitude: tuple = (1.0, 1.2)
    radius: float = 2.3
    look_at: tuple = (0.0, 0.0, -0.15)
    keyframes: int = 10


@dataclass
class SyntheticScene:
    name: str
    static_primitives: list
    movers: list
    bbox: tuple = ((-1.25, -1.25, -1.25), (1.25, 1.25, 1.25))
    light_direction: tuple = (0.3, -0.25, -1.0)  # incoming, toward the scene
    shadow_darkening: float = 0.0
    penumbra: float = 0.1
    orbit: OrbitSpec = dc_field(default_factory=OrbitSpec)
    t_near: float = 0.8
    t_far: float = 4.2
    n_frames: int = 30
    resolution: int = 64
    n_val: int = 8

    def __post_init__(self):
        light = np.asarray(self.light_direction, dtype=np.float64)
        self.light_direction = tuple(light / np.linalg.norm(light))

    # -- analytic fields --------------------------------------------------
    def _density_color(self, points, prims, taus=None):
        p = points.shape[0]
        sigma = np.zeros(p)
        weighted = np.zeros((p, 3))
        for prim in prims:
            if isinstance(prim, Mover):
                if prim.shape.density <= 0.0:
                    continue
                sdf = prim.sdf(points, taus)
                dens = prim.shape.density * smoothstep01(-sdf / prim.shape.shell)
                albedo = np.asarray(prim.shape.albedo)
            else:
                sdf = prim.sdf(points)
                dens = prim.density * smoothstep01(-sdf / prim.shell)
                albedo = np.asarray(prim.albedo)
            sigma += dens
            weighted += dens[:, None] * albedo
        color = np.where(sigma[:, None] > 0.0, weighted / np.maximum(sigma, 1e-300)[:, None], 0.0)
        return sigma, color

    def shadow_factor(self, points, taus):
        """s in [0,1]: 1 unshadowed, 1 - darkening in full shadow."""
        p = np.atleast_2d(points).shape[0]
        if self.shadow_darkening <= 0.0:
            return np.ones(p)
        toward_light = -np.asarray(self.light_direction)
        occ = np.zeros(p)
        taus = np.broadcast_to(np.asarray(taus, dtype=np.float64), (p,))
        for mover in self.movers:
            if not mover.occludes_light:
                continue
            centers = mover.trajectory.center(taus)
            rel = centers - points
            along = rel @ toward_light
            if mover.shape.kind == "sphere":
                d = np.sqrt(np.maximum(np.sum(rel * rel, axis=-1) - along ** 2, 0.0))
                radius = mover.radius(taus)
                if self.penumbra > 0.0:
                    o = smoothstep01((radius + self.penumbra - d) / self.penumbra)
                else:
                    o = (d < radius).astype(np.float64)
            else:
                lo = centers - np.asarray(mover.shape.half_extents)
                hi = centers + np.asarray(mover.shape.half_extents)
                inv = 1.0 / np.where(np.abs(toward_light) < 1e-12, 1e-12, toward_light)
                t1 = (lo - points) * inv
                t2 = (hi - points) * inv
                t_in = np.max(np.minimum(t1, t2), axis=-1)
                t_out = np.min(np.maximum(t1, t2), axis=-1)
                o = ((t_in <= t_out) & (t_out > 0.0)).astype(np.float64)
            occ = np.maximum(occ, np.where(along > 0.0, o, 0.0))
        return 1.0 - self.shadow_darkening * occ

    def eval_fields(self, points, taus):
        """(sigma_s, color_s, sigma_d, color_d, shadow factor) at points."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        sigma_s, color_s = self._density_color(points, self.static_primitives)
        sigma_d, color_d = self._density_color(points, self.movers, taus)
        s = self.shadow_factor(points, taus)
        return sigma_s, color_s, sigma_d, color_d, s

    # -- serialization for hashing/manifest -------------------------------
    def to_dict(self):
        def prim(p):
            d = {"kind": p.kind, "albedo": list(p.albedo), "density": p.density,
                 "shell": p.shell, "is_ground": p.is_ground}
            if p.kind == "sphere":
                d.update(center=list(p.center), radius=p.radius)
            elif p.kind == "box":
                d.update(center=list(p.center), half_extents=list(p.half_extents))
            else:
                d.update(height=p.height)
            return d

        def mover(m):
            return {
                "shape": prim(m.shape),
                "trajectory": {
                    "base": list(m.trajectory.base),
                    "amplitude": list(m.trajectory.amplitude),
                    "frequency": m.trajectory.frequency,
                    "phase": list(m.trajectory.phase),
                    "poly": [list(c) for c in m.trajectory.poly],
                },
                "radius_amp": m.radius_amp,
                "radius_freq": m.radius_freq,
                "occludes_light": m.occludes_light,
            }

        return {
            "name": self.name,
            "static_primitives": [prim(p) for p in self.static_primitives],
            "movers": [mover(m) for m in self.movers],
            "bbox": [list(self.bbox[0]), list(self.bbox[1])],
            "light_direction": list(self.light_direction),
            "shadow_darkening": self.shadow_darkening,
            "penumbra": self.penumbra,
            "orbit": {
                "azimuth": list(self.orbit.azimuth),
                "altitude": list(self.orbit.altitude),
                "radius": self.orbit.radius,
                "look_at": list(self.orbit.look_at),
                "keyframes": self.orbit.keyframes,
            },
            "t_near": self.t_near,
            "t_far": self.t_far,
            "n_frames": self.n_frames,
            "resolution": self.resolution,
            "n_val": self.n_val,
        }


# ---------------------------------------------------------------------------
# ground-truth rendering and masks
# ---------------------------------------------------------------------------

def render_ground_truth(scene: SyntheticScene, camera: Camera, tau: float,
                        mode: str = "full", n_samples: int = 256,
                        chunk: int = 4096) -> np.ndarray:
    """Render the analytic scene with the model's quadrature.

    mode "background_only" drops movers and shadows, leaving the static
    primitives exactly as a perfectly decoupled model would render them.
    """
    if mode not in ("full", "background_only"):
        raise ValueError(f"unknown mode {mode!r}")
    origins, dirs = camera_rays(camera, scene.t_near, scene.t_far)
    n_rays = origins.shape[0]
    t = midpoint_t(scene.t_near, scene.t_far, n_samples)
    image = np.empty((n_rays, 3))
    for lo in range(0, n_rays, chunk):
        hi = min(lo + chunk, n_rays)
        r = hi - lo
        pts = (origins[lo:hi, None, :] + t[None, :, None] * dirs[lo:hi, None, :]).reshape(-1, 3)
        sigma_s, color_s, sigma_d, color_d, s = scene.eval_fields(pts, tau)
        if mode == "background_only":
            sigma_d = np.zeros_like(sigma_d)
            rho = np.zeros_like(s)
        else:
            rho = 1.0 - s
        out = composite_forward(
            np.broadcast_to(t, (r, n_samples)),
            np.full(r, scene.t_near), np.full(r, scene.t_far),
            sigma_s.reshape(r, n_samples), color_s.reshape(r, n_samples, 3),
            sigma_d.reshape(r, n_samples), color_d.reshape(r, n_samples, 3),
            rho.reshape(r, n_samples),
        )
        image[lo:hi] = out.color
    return image.reshape(camera.height, camera.width, 3)


def _ray_entry_t(origins, dirs, mover: Mover, tau: float):
    """Smallest positive t where rays enter the mover's support; inf if none."""
    center = mover.trajectory.center(tau)
    if mover.shape.kind == "sphere":
        radius = float(mover.radius(tau))
        rel = origins - center
        b = np.sum(rel * dirs, axis=-1)
        c = np.sum(rel * rel, axis=-1) - radius * radius
        disc = b * b - c
        hit = disc >= 0.0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        entry = np.where(t0 > 0.0, t0, np.where(t1 > 0.0, 0.0, np.inf))
        return np.where(hit, entry, np.inf)
    lo = center - np.asarray(mover.shape.half_extents)
    hi = center + np.asarray(mover.shape.half_extents)
    inv = 1.0 / np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t1 = (lo - origins) * inv
    t2 = (hi - origins) * inv
    t_in = np.max(np.minimum(t1, t2), axis=-1)
    t_out = np.min(np.maximum(t1, t2), axis=-1)
    ok = (t_in <= t_out) & (t_out > 0.0)
    return np.where(ok, np.maximum(t_in, 0.0), np.inf)


def _static_march(scene: SyntheticScene, origins, dirs, n_march: int):
    """Static density on a dense t grid; returns (t grid, cumulative optical depth)."""
    t = midpoint_t(scene.t_near, scene.t_far, n_march)
    step = (scene.t_far - scene.t_near) / n_march
    n_rays = origins.shape[0]
    pts = (origins[:, None, :] + t[None, :, None] * dirs[:, None, :]).reshape(-1, 3)
    sigma_s, _ = scene._density_color(pts, scene.static_primitives)
    depth = np.cumsum(sigma_s.reshape(n_rays, n_march) * step, axis=1)
    return t, depth


def ground_truth_masks(scene: SyntheticScene, camera: Camera, tau: float,
                       n_march: int = 512):
    """(dynamic mask, shadow mask) for one frame.

    Dynamic: the ray enters a visible mover before static opacity exceeds
    0.5. Shadow: the first static surface point (opacity crossing 0.5) is
    darkened by a mover.
    """
    origins, dirs = camera_rays(camera, scene.t_near, scene.t_far)
    t_grid, depth = _static_march(scene, origins, dirs, n_march)

    t_dyn = np.full(origins.shape[0], np.inf)
    for mover in scene.movers:
        if mover.shape.density <= 0.0:
            continue
        t_dyn = np.minimum(t_dyn, _ray_entry_t(origins, dirs, mover, tau))
    idx = np.searchsorted(t_grid, np.clip(t_dyn, scene.t_near, scene.t_far))
    depth_before = np.where(idx > 0, depth[np.arange(depth.shape[0]), np.maximum(idx - 1, 0)], 0.0)
    opacity_before = 1.0 - np.exp(-depth_before)
    dyn_mask = np.isfinite(t_dyn) & (opacity_before < 0.5)

    shadow_mask = np.zeros(origins.shape[0], dtype=bool)
    if scene.shadow_darkening > 0.0:
        surf_t, has_surface = _first_surface(t_grid, depth)
        pts = origins + surf_t[:, None] * dirs
        s = scene.shadow_factor(pts, tau)
        shadow_mask = has_surface & (s < 1.0 - 1e-6)

    shape = (camera.height, camera.width)
    return dyn_mask.reshape(shape), shadow_mask.reshape(shape)


def _first_surface(t_grid, depth):
    opacity = 1.0 - np.exp(-depth)
    hit = opacity >= 0.5
    has = np.any(hit, axis=1)
    first = np.argmax(hit, axis=1)
    return t_grid[first], has


def ground_region_mask(scene: SyntheticScene, camera: Camera,
                       n_march: int = 512) -> np.ndarray:
    """Pixels whose first static surface belongs to a ground primitive."""
    origins, dirs = camera_rays(camera, scene.t_near, scene.t_far)
    t_grid, depth = _static_march(scene, origins, dirs, n_march)
    surf_t, has = _first_surface(t_grid, depth)
    pts = origins + surf_t[:, None] * dirs
    best = np.zeros(pts.shape[0])
    best_is_ground = np.zeros(pts.shape[0], dtype=bool)
    for prim in scene.static_primitives:
        dens = prim.density * smoothstep01(-prim.sdf(pts) / prim.shell)
        better = dens > best
        best = np.where(better, dens, best)
        best_is_ground = np.where(better, prim.is_ground, best_is_ground)
    mask = has & best_is_ground
    return mask.reshape(camera.height, camera.width)


# ---------------------------------------------------------------------------
# camera paths
# ---------------------------------------------------------------------------

def scene_intrinsics(scene: SyntheticScene):
    res = scene.resolution
    focal = 1.1 * res
    return dict(fx=focal, fy=focal, cx=res / 2.0, cy=res / 2.0, width=res, height=res)


def training_cameras(scene: SyntheticScene, seed: int) -> list[Camera]:
    """Smooth orbit through randomly sampled azimuth/altitude keyframes."""
    rng = np.random.default_rng(seed)
    spec = scene.orbit
    n_key = spec.keyframes
    az_k = rng.uniform(spec.azimuth[0], spec.azimuth[1], n_key)
    alt_k = rng.uniform(spec.altitude[0], spec.altitude[1], n_key)
    knots = np.linspace(0.0, 1.0, n_key)
    s = np.linspace(0.0, 1.0, scene.n_frames)
    az = CubicSpline(knots, az_k, bc_type="natural")(s)
    alt = CubicSpline(knots, alt_k, bc_type="natural")(s)
    intr = scene_intrinsics(scene)
    cams = []
    for a, b in zip(az, alt):
        pos = orbit_position(spec.look_at, spec.radius, a, b)
        cams.append(Camera(pose=look_at_pose(pos, spec.look_at), **intr))
    return cams


def validation_cameras(scene: SyntheticScene) -> list[Camera]:
    """Evenly spaced azimuths over the training range at mid altitude."""
    spec = scene.orbit
    az = np.linspace(spec.azimuth[0], spec.azimuth[1], scene.n_val)
    alt = 0.5 * (spec.altitude[0] + spec.altitude[1])
    intr = scene_intrinsics(scene)
    cams = []
    for a in az:
        pos = orbit_position(spec.look_at, spec.radius, a, alt)
        cams.append(Camera(pose=look_at_pose(pos, spec.look_at), **intr))
    return cams


def frame_times(n_frames: int) -> np.ndarray:
    if n_frames == 1:
        return np.zeros(1)
    return np.arange(n_frames) / (n_frames - 1.0)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def _ground():
    return GroundPlane(height=-0.5, albedo=(0.55, 0.52, 0.46), shell=0.12)


def _static_set():
    return [
        _ground(),
        Box(center=(-0.45, -0.28, -0.26), half_extents=(0.26, 0.2, 0.24),
            albedo=(0.72, 0.18, 0.12), shell=0.1),
        Sphere(center=(0.2, 0.45, -0.27), radius=0.23,
               albedo=(0.15, 0.3, 0.75), shell=0.1),
    ]


def _circle_mover(radius=0.3, albedo=(0.9, 0.75, 0.15), z=-0.1, orbit_r=0.55,
                  sweep=0.375, phase0=0.8, density=DEFAULT_DENSITY):
    traj = Trajectory(
        base=(0.0, 0.0, z),
        amplitude=(orbit_r, orbit_r, 0.0),
        frequency=sweep,
        phase=(math.pi / 2.0 + phase0, phase0, 0.0),
    )
    shape = Sphere(center=(0.0, 0.0, z), radius=radius, albedo=albedo,
                   density=density, shell=0.1)
    return Mover(shape=shape, trajectory=traj)


def scene_preset(name: str, n_frames: int = 30, resolution: int = 64,
                 n_val: int = 8) -> SyntheticScene:
    common = dict(n_frames=n_frames, resolution=resolution, n_val=n_val)
    if name == "mover":
        return SyntheticScene(
            name=name, static_primitives=_static_set(),
            movers=[_circle_mover()], shadow_darkening=0.0, **common,
        )
    if name == "mover_shadow":
        return SyntheticScene(
            name=name, static_primitives=_static_set(),
            movers=[_circle_mover(z=0.0)],
            light_direction=(0.8, -0.55, -1.0), shadow_darkening=0.6,
            penumbra=0.1, **common,
        )
    if name == "two_movers":
        second = Mover(
            shape=Sphere(center=(0.0, 0.0, 0.25), radius=0.24,
                         albedo=(0.1, 0.75, 0.78), shell=0.1),
            trajectory=Trajectory(base=(0.1, -0.1, 0.25),
                                  amplitude=(0.45, -0.3, 0.08), frequency=0.5),
            radius_amp=0.06,
        )
        return SyntheticScene(
            name=name, static_primitives=_static_set(),
            movers=[_circle_mover(radius=0.27), second],
            shadow_darkening=0.0, **common,
        )
    if name == "shadow_only":
        blocker = Mover(
            shape=Sphere(center=(0.0, 0.05, 0.6), radius=0.42,
                         albedo=(0.0, 0.0, 0.0), density=0.0, shell=0.1),
            trajectory=Trajectory(base=(0.0, 0.05, 0.6),
                                  amplitude=(0.75, 0.2, 0.0), frequency=0.5,
                                  phase=(-math.pi / 2.0, 0.0, 0.0)),
        )
        statics = [
            _ground(),
            Box(center=(0.35, -0.3, -0.3), half_extents=(0.22, 0.22, 0.2),
                albedo=(0.2, 0.62, 0.25), shell=0.1),
        ]
        return SyntheticScene(
            name=name, static_primitives=statics, movers=[blocker],
            light_direction=(0.15, -0.1, -1.0), shadow_darkening=0.65,
            penumbra=0.12, **common,
        )
    raise KeyError(name)


SCENE_PRESETS = ("mover", "mover_shadow", "two_movers", "shadow_only")
