"""Ray sampling and the composite volume-rendering quadrature.

The discretization is analytic-alpha: for ordered samples t_i with
interval widths delta_i (the last interval ends at t_far),

    alpha_i = 1 - exp(-(sigma_s_i + sigma_d_i) * delta_i)
    T_i     = prod_{j<i} (1 - alpha_j)
    mix_i   = ((1 - rho_i) sigma_s_i c_s_i + sigma_d_i c_d_i) / sigma_tot_i
    color   = sum_i T_i alpha_i mix_i

which is exact for piecewise-constant media. Decoupled static-only and
dynamic-only renders reuse the same samples; the dynamic-only render is
composited over a white background. `composite_backward` provides the
exact adjoint used for training.

All array functions accept either a single ray (shape (N,)) or a batch
(R, N); reductions run over the trailing sample axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

EPS_SIGMA = 1e-9      # guard for the 0/0 color mix and density ratio
EPS_PDF_FLOOR = 1e-5  # keeps the importance distribution strictly positive


@dataclass
class SampleRecord:
    t: float
    delta: float
    sigma_s: float
    sigma_d: float
    color_s: np.ndarray
    color_d: np.ndarray
    rho: float
    w: float
    transmittance: float
    weight_total: float
    weight_static: float
    weight_dynamic: float


@dataclass
class RenderOutput:
    """Composite render plus everything the losses need, per sample.

    Arrays are shaped (N,) / (N, 3) for a single ray or (R, N) / (R, N, 3)
    for a batch; `color` and friends drop the sample axis.
    """

    color: np.ndarray
    static_color: np.ndarray
    dynamic_color: np.ndarray
    dynamic_alpha: np.ndarray
    depth: np.ndarray
    trans_final: np.ndarray
    t: np.ndarray
    delta: np.ndarray
    sigma_s: np.ndarray
    sigma_d: np.ndarray
    color_s: np.ndarray
    color_d: np.ndarray
    rho: np.ndarray
    w: np.ndarray
    transmittance: np.ndarray
    weight_total: np.ndarray
    weight_static: np.ndarray
    weight_dynamic: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray

    @property
    def samples(self) -> list[SampleRecord]:
        if self.t.ndim != 1:
            raise ValueError("per-sample records only available for single-ray outputs")
        return [
            SampleRecord(
                t=float(self.t[i]),
                delta=float(self.delta[i]),
                sigma_s=float(self.sigma_s[i]),
                sigma_d=float(self.sigma_d[i]),
                color_s=self.color_s[i],
                color_d=self.color_d[i],
                rho=float(self.rho[i]),
                w=float(self.w[i]),
                transmittance=float(self.transmittance[i]),
                weight_total=float(self.weight_total[i]),
                weight_static=float(self.weight_static[i]),
                weight_dynamic=float(self.weight_dynamic[i]),
            )
            for i in range(self.t.shape[0])
        ]


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def stratified_t(t_near, t_far, n: int, u: np.ndarray) -> np.ndarray:
    """One jittered sample per stratum; u in [0,1) with shape (..., n)."""
    t_near = np.asarray(t_near, dtype=np.float64)[..., None]
    t_far = np.asarray(t_far, dtype=np.float64)[..., None]
    step = (t_far - t_near) / n
    return t_near + (np.arange(n) + u) * step


def stratified_samples(ray, n: int, rng) -> np.ndarray:
    """Ordered stratified t-values for one ray; rng needs .random(size)."""
    if n < 1:
        raise ValueError("need at least one sample")
    return stratified_t(ray.t_near, ray.t_far, n, rng.random((n,)))[0]


def importance_t(t_vals, deltas, weights, n_fine: int, u: np.ndarray,
                 t_near=None, t_far=None) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant weight histogram.

    Bin i spans [t_i, t_i + delta_i]; mass is weight_i + a small floor.
    Rays whose weights are all zero fall back to uniform stratified
    sampling over [t_near, t_far].
    """
    t_vals = np.atleast_2d(np.asarray(t_vals, dtype=np.float64))
    deltas = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    r, n = t_vals.shape

    edges = np.concatenate([t_vals, (t_vals[:, -1] + deltas[:, -1])[:, None]], axis=1)
    mass = weights + EPS_PDF_FLOOR
    cdf = np.concatenate([np.zeros((r, 1)), np.cumsum(mass, axis=1)], axis=1)
    cdf /= cdf[:, -1:]

    # One global searchsorted: offset each row by 2*row so rows stay sorted.
    row_off = 2.0 * np.arange(r)[:, None]
    idx = np.searchsorted((cdf + row_off).ravel(), (u + row_off).ravel(), side="right")
    bins = np.clip(idx.reshape(r, n_fine) - np.arange(r)[:, None] * (n + 1) - 1, 0, n - 1)

    take = np.take_along_axis
    c_lo = take(cdf, bins, axis=1)
    c_hi = take(cdf, bins + 1, axis=1)
    e_lo = take(edges, bins, axis=1)
    e_hi = take(edges, bins + 1, axis=1)
    frac = (u - c_lo) / np.maximum(c_hi - c_lo, 1e-300)
    fine = e_lo + frac * (e_hi - e_lo)

    dead = np.sum(weights, axis=1) <= 0.0
    if np.any(dead):
        lo = t_vals[:, 0] if t_near is None else np.broadcast_to(t_near, (r,))
        hi = edges[:, -1] if t_far is None else np.broadcast_to(t_far, (r,))
        # u is stratified over [0,1); recover the per-stratum jitter
        jitter = u * n_fine - np.arange(n_fine)
        uniform = stratified_t(lo, hi, n_fine, jitter)
        fine = np.where(dead[:, None], uniform, fine)
    return fine


def importance_samples(coarse: list[SampleRecord], n_fine: int, rng) -> np.ndarray:
    """Ordered fine t-values for one ray given its coarse sample records."""
    t_vals = np.array([s.t for s in coarse])
    deltas = np.array([s.delta for s in coarse])
    weights = np.array([s.weight_total for s in coarse])
    u = (np.arange(n_fine) + rng.random((n_fine,))) / n_fine
    return importance_t(t_vals, deltas, weights, n_fine, u[None, :])[0]


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

def density_weights(t, t_far, sigma_tot):
    """(delta, T_i * alpha_i) from total density alone; no colors needed."""
    delta = np.concatenate(
        [np.diff(t, axis=-1), (np.asarray(t_far)[..., None] - t[..., -1:])], axis=-1
    )
    tau_seg = sigma_tot * delta
    alpha = -np.expm1(-tau_seg)
    trans = np.exp(-_exclusive_cumsum(tau_seg))
    return delta, trans * alpha


def _exclusive_cumsum(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    out[..., 1:] = np.cumsum(x, axis=-1)[..., :-1]
    return out


def _suffix_sum_exclusive(x: np.ndarray) -> np.ndarray:
    inclusive = np.flip(np.cumsum(np.flip(x, axis=-1), axis=-1), axis=-1)
    return inclusive - x


def composite_forward(t, t_near, t_far, sigma_s, color_s, sigma_d, color_d,
                      rho=None) -> RenderOutput:
    """Evaluate the composite quadrature from per-sample field outputs."""
    t = np.asarray(t, dtype=np.float64)
    if t.shape[-1] == 0:
        raise ValueError("need at least one sample")
    if np.any(np.diff(t, axis=-1) <= 0.0):
        raise ValueError("t values must be strictly increasing")
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    if rho is None:
        rho = np.zeros_like(t)

    delta = np.concatenate(
        [np.diff(t, axis=-1), (t_far[..., None] - t[..., -1:])], axis=-1
    )
    sigma_tot = sigma_s + sigma_d
    tau_seg = sigma_tot * delta
    alpha = -np.expm1(-tau_seg)
    trans = np.exp(-_exclusive_cumsum(tau_seg))
    trans_final = np.exp(-np.sum(tau_seg, axis=-1))
    weight_total = trans * alpha

    safe = sigma_tot > EPS_SIGMA
    inv_tot = np.where(safe, 1.0 / np.where(safe, sigma_tot, 1.0), 0.0)
    frac_s = sigma_s * inv_tot
    frac_d = sigma_d * inv_tot
    mix = ((1.0 - rho)[..., None] * sigma_s[..., None] * color_s
           + sigma_d[..., None] * color_d) * inv_tot[..., None]

    color = np.sum(weight_total[..., None] * mix, axis=-2)
    weight_static = weight_total * frac_s
    weight_dynamic = weight_total * frac_d
    dynamic_alpha = np.sum(weight_dynamic, axis=-1)
    depth = np.sum(weight_total * t, axis=-1)

    # decoupled renders over the same samples
    alpha_s = -np.expm1(-sigma_s * delta)
    trans_s = np.exp(-_exclusive_cumsum(sigma_s * delta))
    static_color = np.sum((trans_s * alpha_s)[..., None] * color_s, axis=-2)
    alpha_d = -np.expm1(-sigma_d * delta)
    trans_d = np.exp(-_exclusive_cumsum(sigma_d * delta))
    trans_d_final = np.exp(-np.sum(sigma_d * delta, axis=-1))
    dynamic_color = (np.sum((trans_d * alpha_d)[..., None] * color_d, axis=-2)
                     + trans_d_final[..., None])

    return RenderOutput(
        color=color,
        static_color=static_color,
        dynamic_color=dynamic_color,
        dynamic_alpha=dynamic_alpha,
        depth=depth,
        trans_final=trans_final,
        t=t,
        delta=delta,
        sigma_s=np.asarray(sigma_s, dtype=np.float64),
        sigma_d=np.asarray(sigma_d, dtype=np.float64),
        color_s=np.asarray(color_s, dtype=np.float64),
        color_d=np.asarray(color_d, dtype=np.float64),
        rho=np.asarray(rho, dtype=np.float64),
        w=frac_d,
        transmittance=trans,
        weight_total=weight_total,
        weight_static=weight_static,
        weight_dynamic=weight_dynamic,
        t_near=t_near,
        t_far=t_far,
    )


@dataclass
class SampleGrads:
    d_sigma_s: np.ndarray
    d_color_s: np.ndarray
    d_sigma_d: np.ndarray
    d_color_d: np.ndarray
    d_rho: np.ndarray


def composite_backward(out: RenderOutput, d_color, d_w=None,
                       d_sigma_s_direct=None, d_rho_direct=None) -> SampleGrads:
    """Adjoint of `composite_forward` with respect to the field outputs.

    `d_color` is the upstream gradient on the composite color; `d_w`,
    `d_sigma_s_direct` and `d_rho_direct` are optional per-sample upstream
    gradients from the regularizers. Sample positions are treated as
    constants.
    """
    d_color = np.asarray(d_color, dtype=np.float64)
    sigma_tot = out.sigma_s + out.sigma_d
    safe = sigma_tot > EPS_SIGMA
    inv_tot = np.where(safe, 1.0 / np.where(safe, sigma_tot, 1.0), 0.0)
    mix = ((1.0 - out.rho)[..., None] * out.sigma_s[..., None] * out.color_s
           + out.sigma_d[..., None] * out.color_d) * inv_tot[..., None]

    weight = out.weight_total
    alpha = -np.expm1(-sigma_tot * out.delta)
    q = np.sum(d_color[..., None, :] * mix, axis=-1)          # G . mix_i
    suffix = _suffix_sum_exclusive(weight * q)                 # sum_{j>i} A_j q_j
    d_sigma_tot = out.delta * (out.transmittance * (1.0 - alpha) * q - suffix)

    g_cs = np.sum(d_color[..., None, :] * out.color_s, axis=-1)
    g_cd = np.sum(d_color[..., None, :] * out.color_d, axis=-1)
    d_sigma_s = d_sigma_tot + weight * inv_tot * ((1.0 - out.rho) * g_cs - q)
    d_sigma_d = d_sigma_tot + weight * inv_tot * (g_cd - q)
    d_color_s = (weight * (1.0 - out.rho) * out.sigma_s * inv_tot)[..., None] * d_color[..., None, :]
    d_color_d = (weight * out.sigma_d * inv_tot)[..., None] * d_color[..., None, :]
    d_rho = -weight * out.sigma_s * inv_tot * g_cs

    if d_w is not None:
        inv_sq = inv_tot * inv_tot
        d_sigma_d = d_sigma_d + d_w * out.sigma_s * inv_sq
        d_sigma_s = d_sigma_s - d_w * out.sigma_d * inv_sq
    if d_sigma_s_direct is not None:
        d_sigma_s = d_sigma_s + d_sigma_s_direct
    if d_rho_direct is not None:
        d_rho = d_rho + d_rho_direct
    return SampleGrads(d_sigma_s, d_color_s, d_sigma_d, d_color_d, d_rho)


# ---------------------------------------------------------------------------
# field-backed rendering
# ---------------------------------------------------------------------------

@dataclass
class RenderCaches:
    static: object
    dynamic: object
    shadow: Optional[object]
    shape: tuple


def render_rays(static_field, dynamic_field, shadow_field, origins, dirs,
                t_near, t_far, taus, t_vals, want_cache: bool = False):
    """Render a batch of rays at given t values; returns (output, caches)."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    t_vals = np.atleast_2d(t_vals)
    r, n = t_vals.shape
    pts = (origins[:, None, :] + t_vals[:, :, None] * dirs[:, None, :]).reshape(-1, 3)
    taus_pt = np.repeat(np.broadcast_to(taus, (r,)), n)

    sigma_s, color_s, cache_s = static_field.evaluate_batch(pts)
    sigma_d, color_d, cache_d = dynamic_field.evaluate_batch(pts, taus_pt)
    if shadow_field is not None:
        rho, cache_r = shadow_field.evaluate_batch(pts, taus_pt)
    else:
        rho, cache_r = np.zeros(r * n), None

    out = composite_forward(
        t_vals,
        np.broadcast_to(t_near, (r,)),
        np.broadcast_to(t_far, (r,)),
        sigma_s.reshape(r, n),
        color_s.reshape(r, n, 3),
        sigma_d.reshape(r, n),
        color_d.reshape(r, n, 3),
        rho.reshape(r, n),
    )
    caches = RenderCaches(cache_s, cache_d, cache_r, (r, n)) if want_cache else None
    return out, caches


def backprop_to_fields(static_field, dynamic_field, shadow_field,
                       caches: RenderCaches, grads: SampleGrads,
                       out_static=None, out_dynamic=None, out_shadow=None) -> None:
    """Scatter per-sample gradients into the fields' parameter gradients."""
    static_field.backward_batch(
        caches.static, grads.d_sigma_s.ravel(), grads.d_color_s.reshape(-1, 3), out=out_static
    )
    dynamic_field.backward_batch(
        caches.dynamic, grads.d_sigma_d.ravel(), grads.d_color_d.reshape(-1, 3), out=out_dynamic
    )
    if shadow_field is not None and caches.shadow is not None:
        shadow_field.backward_batch(caches.shadow, grads.d_rho.ravel(), out=out_shadow)


def render_composite(static_field, dynamic_field, shadow_field, ray, tau: float,
                     t_values) -> RenderOutput:
    """Render one ray; the per-ray entry point behind the batched path."""
    t_values = np.asarray(t_values, dtype=np.float64)
    if np.any((t_values < ray.t_near) | (t_values > ray.t_far)):
        raise ValueError("t values must lie within [t_near, t_far]")
    out, _ = render_rays(
        static_field, dynamic_field, shadow_field,
        ray.origin, ray.direction, ray.t_near, ray.t_far,
        np.array([tau]), t_values[None, :],
    )
    return RenderOutput(**{
        k: (v[0] if isinstance(v, np.ndarray) and v.ndim > 0 else v)
        for k, v in vars(out).items()
    })


def midpoint_t(t_near: float, t_far: float, n: int) -> np.ndarray:
    """Deterministic stratum midpoints; used for evaluation renders."""
    step = (t_far - t_near) / n
    return t_near + (np.arange(n) + 0.5) * step


def static_surface_t(sigma_s, delta, t, threshold: float = 0.5):
    """First t where accumulated static-only opacity crosses `threshold`.

    Returns (t_surf, has_surface); rays that never reach the threshold get
    has_surface == False.
    """
    opacity = 1.0 - np.exp(-np.cumsum(sigma_s * delta, axis=-1))
    hit = opacity >= threshold
    has_surface = np.any(hit, axis=-1)
    first = np.argmax(hit, axis=-1)
    t_surf = np.take_along_axis(t, first[..., None], axis=-1)[..., 0]
    return np.where(has_surface, t_surf, 0.0), has_surface
