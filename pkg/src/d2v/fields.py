"""Trainable density/color/shadow fields on dense trilinear grids.

Each field stores a flat float64 parameter vector viewed as a lattice of
raw values over an axis-aligned bounding box. Evaluation trilinearly
interpolates the 8 surrounding nodes (x2 adjacent time slices for the
time-conditioned fields) and applies activations:

    density       softplus(raw - 3)    (near-zero at zero init)
    color         sigmoid(raw)
    shadow ratio  sigmoid(raw - 3)     (starts at ~0.047)

Points outside the bounding box evaluate to exactly zero density / black
color / zero shadow and receive no gradient. Gradients are exact: the
backward pass chains activation derivatives and scatters through the same
interpolation weights.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

MAGIC = b"D2VF"
FORMAT_VERSION = 1
ROLE_STATIC = 0
ROLE_DYNAMIC = 1
ROLE_SHADOW = 2

DENSITY_SHIFT = 3.0
SHADOW_SHIFT = 3.0


@dataclass
class FieldOutput:
    sigma: float
    color: np.ndarray


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class _InterpCache:
    """Everything backward needs: node ids, weights, raw values.

    Rows are compressed to in-bbox points; `inside` maps them back to the
    caller's point order (outside points have exact zeros and no gradient).
    """

    idx: np.ndarray      # (P_in, K) flat node indices
    weights: np.ndarray  # (P_in, K)
    raw: np.ndarray      # (P_in, C) interpolated raw parameters
    inside: np.ndarray   # (P,) bool
    n_points: int


_CORNER_OFFSETS = np.array(
    [[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)], dtype=np.int64
)


class _GridField:
    """Shared lattice storage + interpolation for all three field roles."""

    role: int = -1
    channels: int = 1

    def __init__(self, bbox, resolution, time_slices: int | None = None):
        self.bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
        if np.any(self.bbox[1] <= self.bbox[0]):
            raise ValueError("bbox max must exceed bbox min on every axis")
        self.resolution = tuple(int(r) for r in resolution)
        if len(self.resolution) != 3 or min(self.resolution) < 2:
            raise ValueError("resolution must be three values >= 2")
        self.time_slices = None if time_slices is None else int(time_slices)
        if self.time_slices is not None and self.time_slices < 1:
            raise ValueError("need at least one time slice")
        n_nodes = int(np.prod(self.resolution)) * (self.time_slices or 1)
        self.params = np.zeros(n_nodes * self.channels, dtype=np.float64)
        self.grad = np.zeros_like(self.params)

    @property
    def n_params(self) -> int:
        return self.params.size

    def zero_grad(self) -> None:
        self.grad[:] = 0.0

    def new_grad_buffer(self) -> np.ndarray:
        return np.zeros_like(self.params)

    def grid_view(self) -> np.ndarray:
        shape = ((self.time_slices,) if self.time_slices else ()) + self.resolution + (self.channels,)
        return self.params.reshape(shape)

    # -- interpolation ---------------------------------------------------
    def _weights(self, points: np.ndarray, taus: np.ndarray | None):
        """Corner node ids and trilinear(-in-time) weights, inside points only."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        p = points.shape[0]
        inside = np.all((points >= self.bbox[0]) & (points <= self.bbox[1]), axis=1)
        pts = points[inside]
        nx, ny, nz = self.resolution
        res = np.array(self.resolution, dtype=np.float64)
        span = self.bbox[1] - self.bbox[0]
        g = (pts - self.bbox[0]) / span * (res - 1.0)

        i0 = np.clip(np.floor(g).astype(np.int64), 0, np.array([nx, ny, nz]) - 2)
        f = g - i0
        wx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=1)
        wy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=1)
        wz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=1)
        # (P, 2, 2, 2) -> (P, 8); corner order (dx, dy, dz) C-style
        w8 = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)
        off = _CORNER_OFFSETS
        ix = i0[:, None, 0] + off[None, :, 0]
        iy = i0[:, None, 1] + off[None, :, 1]
        iz = i0[:, None, 2] + off[None, :, 2]
        idx8 = (ix * ny + iy) * nz + iz  # (P, 8)

        if self.time_slices is None:
            idx, weights = idx8, w8
        else:
            t_count = self.time_slices
            if taus is None:
                raise ValueError("time-conditioned field requires tau")
            taus = np.broadcast_to(np.asarray(taus, dtype=np.float64), (p,))
            if np.any((taus < 0.0) | (taus > 1.0)):
                warnings.warn("tau outside [0, 1]; clamping", stacklevel=3)
                taus = np.clip(taus, 0.0, 1.0)
            v = taus[inside] * (t_count - 1)
            # snap to a slice when within float noise so per-frame training
            # touches exactly one slice
            v_round = np.round(v)
            v = np.where(np.abs(v - v_round) < 1e-9, v_round, v)
            s0 = np.clip(np.floor(v).astype(np.int64), 0, max(t_count - 2, 0))
            tf = v - s0
            stride = nx * ny * nz
            if not np.any(tf > 0.0):
                idx = idx8 + (s0 * stride)[:, None]
                weights = w8
            else:
                s1 = np.minimum(s0 + 1, t_count - 1)
                idx = np.concatenate(
                    [idx8 + (s0 * stride)[:, None], idx8 + (s1 * stride)[:, None]], axis=1
                )
                weights = np.concatenate(
                    [w8 * (1.0 - tf)[:, None], w8 * tf[:, None]], axis=1
                )
        return idx, weights, inside

    def _interp(self, points: np.ndarray, taus: np.ndarray | None) -> _InterpCache:
        idx, weights, inside = self._weights(points, taus)
        nodes = self.params.reshape(-1, self.channels)
        raw = np.einsum("pk,pkc->pc", weights, nodes[idx])
        return _InterpCache(idx=idx, weights=weights, raw=raw, inside=inside,
                            n_points=inside.shape[0])

    def density_batch(self, points, taus=None) -> np.ndarray:
        """Activated density only; the coarse sampling pass needs no colors."""
        idx, weights, inside = self._weights(points, taus)
        col = np.ascontiguousarray(self.params.reshape(-1, self.channels)[:, 0])
        raw0 = np.einsum("pk,pk->p", weights, col[idx])
        sigma = np.zeros(inside.shape[0])
        sigma[inside] = softplus(raw0 - DENSITY_SHIFT)
        return sigma

    def _scatter(self, cache: _InterpCache, d_raw: np.ndarray, out: np.ndarray) -> None:
        # per-channel bincount over node ids avoids a (P*K*C) index temp
        flat = cache.idx.ravel()
        view = out.reshape(-1, self.channels)
        for c in range(self.channels):
            contrib = cache.weights * d_raw[:, c : c + 1]
            view[:, c] += np.bincount(
                flat, weights=contrib.ravel(), minlength=view.shape[0]
            )

    # -- serialization ---------------------------------------------------
    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", FORMAT_VERSION, self.role))
            f.write(struct.pack("<6d", *self.bbox.ravel()))
            dims = self.resolution if self.time_slices is None else (self.time_slices,) + self.resolution
            f.write(struct.pack(f"<{len(dims)}I", *dims))
            f.write(struct.pack("<Q", self.params.size))
            f.write(self.params.astype("<f8").tobytes())


class StaticField(_GridField):
    """Time-independent density + color field."""

    role = ROLE_STATIC
    channels = 4

    def __init__(self, bbox, resolution, view_dependent: bool = False):
        if view_dependent:
            raise NotImplementedError("directional color basis is not implemented")
        self.view_dependent = False
        super().__init__(bbox, resolution, time_slices=None)

    def evaluate_batch(self, points):
        cache = self._interp(points, None)
        sigma = np.zeros(cache.n_points)
        color = np.zeros((cache.n_points, 3))
        sigma[cache.inside] = softplus(cache.raw[:, 0] - DENSITY_SHIFT)
        color[cache.inside] = expit(cache.raw[:, 1:4])
        return sigma, color, cache

    def backward_batch(self, cache, d_sigma, d_color, out=None):
        d_raw = np.empty_like(cache.raw)
        d_raw[:, 0] = d_sigma[cache.inside] * expit(cache.raw[:, 0] - DENSITY_SHIFT)
        c = expit(cache.raw[:, 1:4])
        d_raw[:, 1:4] = d_color[cache.inside] * c * (1.0 - c)
        self._scatter(cache, d_raw, self.grad if out is None else out)

    def evaluate(self, x, d=None) -> FieldOutput:
        if d is not None and abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("view direction must be unit length")
        sigma, color, _ = self.evaluate_batch(np.asarray(x)[None, :])
        return FieldOutput(sigma=float(sigma[0]), color=color[0])

    def accumulate_gradient(self, x, d_sigma: float, d_color) -> None:
        """Add one point's loss gradient to the parameter gradient buffer."""
        _, _, cache = self.evaluate_batch(np.asarray(x)[None, :])
        self.backward_batch(cache, np.asarray([d_sigma]), np.asarray(d_color)[None, :])


class DynamicField(_GridField):
    """Time-conditioned density + color field; linear interpolation in tau."""

    role = ROLE_DYNAMIC
    channels = 4

    def __init__(self, bbox, resolution, time_slices: int):
        super().__init__(bbox, resolution, time_slices=time_slices)

    def evaluate_batch(self, points, taus):
        cache = self._interp(points, taus)
        sigma = np.zeros(cache.n_points)
        color = np.zeros((cache.n_points, 3))
        sigma[cache.inside] = softplus(cache.raw[:, 0] - DENSITY_SHIFT)
        color[cache.inside] = expit(cache.raw[:, 1:4])
        return sigma, color, cache

    backward_batch = StaticField.backward_batch

    def evaluate(self, x, tau: float, d=None) -> FieldOutput:
        sigma, color, _ = self.evaluate_batch(np.asarray(x)[None, :], np.asarray([tau]))
        return FieldOutput(sigma=float(sigma[0]), color=color[0])

    def accumulate_gradient(self, x, tau, d_sigma: float, d_color) -> None:
        _, _, cache = self.evaluate_batch(np.asarray(x)[None, :], np.asarray([tau]))
        self.backward_batch(cache, np.asarray([d_sigma]), np.asarray(d_color)[None, :])


class ShadowField(_GridField):
    """Scalar shadow-ratio field rho(x, tau) in [0, 1]."""

    role = ROLE_SHADOW
    channels = 1

    def __init__(self, bbox, resolution, time_slices: int):
        super().__init__(bbox, resolution, time_slices=time_slices)

    def evaluate_batch(self, points, taus):
        cache = self._interp(points, taus)
        rho = np.zeros(cache.n_points)
        rho[cache.inside] = expit(cache.raw[:, 0] - SHADOW_SHIFT)
        return rho, cache

    def backward_batch(self, cache, d_rho, out=None):
        r = expit(cache.raw[:, 0] - SHADOW_SHIFT)
        d_raw = (d_rho[cache.inside] * r * (1.0 - r))[:, None]
        self._scatter(cache, d_raw, self.grad if out is None else out)

    def evaluate(self, x, tau: float) -> float:
        rho, _ = self.evaluate_batch(np.asarray(x)[None, :], np.asarray([tau]))
        return float(rho[0])

    def accumulate_gradient(self, x, tau, d_rho: float) -> None:
        _, cache = self.evaluate_batch(np.asarray(x)[None, :], np.asarray([tau]))
        self.backward_batch(cache, np.asarray([d_rho]))


_ROLE_TO_CLS = {ROLE_STATIC: StaticField, ROLE_DYNAMIC: DynamicField, ROLE_SHADOW: ShadowField}


def load_field(path):
    """Load any field saved by `_GridField.save`; dispatches on the role tag."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, role = struct.unpack("<II", f.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        bbox = np.array(struct.unpack("<6d", f.read(48))).reshape(2, 3)
        if role == ROLE_STATIC:
            dims = struct.unpack("<3I", f.read(12))
            field = StaticField(bbox, dims)
        elif role in (ROLE_DYNAMIC, ROLE_SHADOW):
            dims = struct.unpack("<4I", f.read(16))
            field = _ROLE_TO_CLS[role](bbox, dims[1:], time_slices=dims[0])
        else:
            raise ValueError(f"unknown field role {role}")
        (count,) = struct.unpack("<Q", f.read(8))
        if count != field.params.size:
            raise ValueError("parameter count does not match grid dimensions")
        data = np.frombuffer(f.read(count * 8), dtype="<f8")
        field.params[:] = data
    return field
