"""Optimization loop: ray batches, forward/backward, Adam, schedules.

Sample positions are data: importance-sampled t values are treated as
constants by the backward pass. All randomness is counter-based on
(seed, ray id), so single-threaded runs are bit-reproducible and the
worker-pool path reduces per-chunk gradients in a fixed order.
"""

from __future__ import annotations

import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field, replace
from typing import Optional

import numpy as np

from .cameras import Ray, pixel_directions
from .losses import (LOG_COLUMNS, LossWeights, Schedule, total_loss,
                     total_loss_with_grads)
from .model import SceneModel, build_model
from .renderer import (composite_backward, backprop_to_fields, density_weights,
                       importance_t, render_rays, stratified_t)
from .rng import STREAM_BATCH, STREAM_IMPORTANCE, STREAM_STRATIFIED, uniforms


class NumericalError(RuntimeError):
    """Raised when the loss or parameters stop being finite."""

    def __init__(self, message: str, details: dict | None = None):
        super().__init__(message)
        self.details = details or {}


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 256
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    samples_coarse: int = 32
    samples_fine: int = 32
    seed: int = 0
    skew: float = 2.0
    lambda_s: Schedule = dc_field(default_factory=lambda: Schedule(1e-5, 1.0, "exponential"))
    lambda_r: Schedule = dc_field(default_factory=lambda: Schedule(1e-5))
    lambda_sigma_s: Schedule = dc_field(default_factory=lambda: Schedule(1e-4))
    lambda_rho: Schedule = dc_field(default_factory=lambda: Schedule(0.0))
    shadow_reg_mode: str = "squared"
    use_shadow: bool = False
    static_res: int = 32
    dynamic_res: int = 16
    shadow_res: int = 16
    time_slices: Optional[int] = None
    checkpoint_interval: int = 1000
    log_interval: int = 100
    threads: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    preset: str = ""

    def __post_init__(self):
        if not (self.lr_start >= self.lr_end > 0):
            raise ValueError("require lr_start >= lr_end > 0")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be >= 1")
        if self.samples_coarse < 1 or self.samples_fine < 0:
            raise ValueError("bad sample counts")
        if self.skew < 1.0:
            raise ValueError("skew must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def progress(self, iteration: int) -> float:
        return iteration / max(self.iterations - 1, 1)

    def learning_rate(self, iteration: int) -> float:
        return self.lr_start * (self.lr_end / self.lr_start) ** self.progress(iteration)

    def loss_weights(self, iteration: int) -> LossWeights:
        p = self.progress(iteration)
        return LossWeights(
            lambda_s=self.lambda_s.value(p),
            lambda_r=self.lambda_r.value(p),
            lambda_sigma_s=self.lambda_sigma_s.value(p),
            lambda_rho=self.lambda_rho.value(p) if self.use_shadow else 0.0,
            skew=self.skew,
            shadow_reg_mode=self.shadow_reg_mode,
        )


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    scratch: np.ndarray
    step: int = 0

    @classmethod
    def for_params(cls, params: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(params), v=np.zeros_like(params),
                   scratch=np.empty_like(params))


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """In-place Adam: params -= lr * m_hat / (sqrt(v_hat) + eps)."""
    state.step += 1
    s = state.scratch
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    np.multiply(grad, grad, out=s)
    s *= 1.0 - beta2
    state.v += s
    np.sqrt(state.v, out=s)
    s *= 1.0 / np.sqrt(1.0 - beta2 ** state.step)
    s += eps
    np.divide(state.m, s, out=s)
    s *= lr / (1.0 - beta1 ** state.step)
    params -= s


# ---------------------------------------------------------------------------
# ray batches
# ---------------------------------------------------------------------------

@dataclass
class RayBatch:
    origins: np.ndarray   # (R, 3)
    dirs: np.ndarray      # (R, 3)
    targets: np.ndarray   # (R, 3) linear colors
    taus: np.ndarray      # (R,)
    ray_ids: np.ndarray   # (R,) global ids driving the per-ray RNG
    frames: np.ndarray
    pys: np.ndarray
    pxs: np.ndarray


class RayCache:
    """Precomputed per-pixel ray directions for every training frame."""

    def __init__(self, dataset):
        self.dataset = dataset
        w, h = dataset.resolution
        self.width, self.height = w, h
        dirs = []
        origins = []
        for cam in dataset.cameras:
            ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
            dirs.append(pixel_directions(cam, xs.ravel(), ys.ravel()))
            origins.append(cam.origin)
        self.dirs = np.stack(dirs)          # (F, H*W, 3)
        self.origins = np.stack(origins)    # (F, 3)

    def gather(self, frames, pix):
        return self.origins[frames], self.dirs[frames, pix]


def _draw_pixels(dataset, batch_size: int, rng):
    """Uniform (frame, pixel) pairs using rng.random."""
    w, h = dataset.resolution
    total = dataset.n_frames * h * w
    u = np.asarray(rng.random((batch_size,)))
    flat = np.minimum((u * total).astype(np.int64), total - 1)
    frames, pix = np.divmod(flat, h * w)
    pys, pxs = np.divmod(pix, w)
    return frames, pix, pys, pxs


def sample_ray_batch(dataset, batch_size: int, rng) -> list[tuple[Ray, np.ndarray, float]]:
    """Uniform rays over (frame, pixel); returns (Ray, target color, tau) triples."""
    frames, pix, pys, pxs = _draw_pixels(dataset, batch_size, rng)
    out = []
    for f, py, px in zip(frames, pys, pxs):
        cam = dataset.cameras[f]
        d = pixel_directions(cam, np.array(px + 0.5), np.array(py + 0.5))
        ray = Ray(cam.origin.copy(), d, dataset.t_near, dataset.t_far)
        out.append((ray, dataset.images[f, py, px], float(dataset.times[f])))
    return out


class _BatchRng:
    """rng.random adapter over the counter RNG, keyed by iteration."""

    def __init__(self, seed: int, iteration: int, batch_size: int):
        self._seed = seed
        self._base = iteration * batch_size

    def random(self, size):
        n = int(np.prod(size))
        ids = self._base + np.arange(n, dtype=np.uint64)
        return uniforms(self._seed, STREAM_BATCH, ids, 1)[:, 0].reshape(size)


def assemble_batch(dataset, cache: RayCache, cfg: TrainConfig, iteration: int) -> RayBatch:
    rng = _BatchRng(cfg.seed, iteration, cfg.batch_size)
    frames, pix, pys, pxs = _draw_pixels(dataset, cfg.batch_size, rng)
    origins, dirs = cache.gather(frames, pix)
    return RayBatch(
        origins=origins,
        dirs=dirs,
        targets=dataset.images[frames, pys, pxs],
        taus=dataset.times[frames],
        ray_ids=(np.uint64(iteration) * np.uint64(cfg.batch_size)
                 + np.arange(cfg.batch_size, dtype=np.uint64)),
        frames=frames, pys=pys, pxs=pxs,
    )


# ---------------------------------------------------------------------------
# one optimization step
# ---------------------------------------------------------------------------

def _strictly_increasing(t: np.ndarray) -> np.ndarray:
    """Nudge duplicate sorted t values apart (collisions are ~never)."""
    if np.all(np.diff(t, axis=-1) > 0.0):
        return t
    bump = np.arange(t.shape[-1]) * 1e-12
    return np.maximum.accumulate(t + bump, axis=-1)


def sample_fine_t(model: SceneModel, cfg: TrainConfig, origins, dirs, taus,
                  ray_ids) -> np.ndarray:
    """Coarse stratified pass + inverse-CDF refinement; returns merged t.

    The coarse pass only needs rendering weights, so it evaluates field
    densities without colors.
    """
    u_coarse = uniforms(cfg.seed, STREAM_STRATIFIED, ray_ids, cfg.samples_coarse)
    t_coarse = stratified_t(model.t_near, model.t_far, cfg.samples_coarse, u_coarse)
    if cfg.samples_fine == 0:
        return t_coarse
    r, n = t_coarse.shape
    pts = (origins[:, None, :] + t_coarse[:, :, None] * dirs[:, None, :]).reshape(-1, 3)
    taus_pt = np.repeat(taus, n)
    sigma = model.static.density_batch(pts) + model.dynamic.density_batch(pts, taus_pt)
    delta, weights = density_weights(t_coarse, model.t_far, sigma.reshape(r, n))
    jitter = uniforms(cfg.seed, STREAM_IMPORTANCE, ray_ids, cfg.samples_fine)
    u = (np.arange(cfg.samples_fine) + jitter) / cfg.samples_fine
    t_fine = importance_t(t_coarse, delta, weights, cfg.samples_fine, u,
                          model.t_near, model.t_far)
    merged = np.sort(np.concatenate([t_coarse, t_fine], axis=1), axis=1)
    return _strictly_increasing(merged)


def _chunk_forward_backward(model, cfg, weights, batch, sl, bufs):
    """Forward + loss + backward for one slice of the batch.

    Gradients are scattered into `bufs` (dict name -> array); returns the
    per-term loss sums over the chunk's rays.
    """
    origins = batch.origins[sl]
    dirs = batch.dirs[sl]
    taus = batch.taus[sl]
    ray_ids = batch.ray_ids[sl]
    t_vals = sample_fine_t(model, cfg, origins, dirs, taus, ray_ids)
    out, caches = render_rays(
        model.static, model.dynamic, model.shadow, origins, dirs,
        model.t_near, model.t_far, taus, t_vals, want_cache=True,
    )
    total, terms, lg = total_loss_with_grads(
        out, batch.targets[sl], weights, batch_denominator=cfg.batch_size
    )
    sg = composite_backward(out, lg.d_color, lg.d_w, lg.d_sigma_s, lg.d_rho)
    backprop_to_fields(
        model.static, model.dynamic, model.shadow, caches, sg,
        out_static=bufs["static"], out_dynamic=bufs["dynamic"],
        out_shadow=bufs.get("shadow"),
    )
    n = origins.shape[0]
    return {k: v * n for k, v in terms.items()}


def train_step(model: SceneModel, batch: RayBatch, cfg: TrainConfig,
               opt: dict[str, AdamState], iteration: int) -> dict:
    """One forward/backward/Adam update; returns the loss breakdown."""
    weights = cfg.loss_weights(iteration)
    n = batch.origins.shape[0]

    for _, field in model.fields:
        field.zero_grad()

    if cfg.threads <= 1:
        # fast path: scatter straight into the fields' own gradient buffers
        bufs = {name: field.grad for name, field in model.fields}
        sums = [_chunk_forward_backward(model, cfg, weights, batch, slice(0, n), bufs)]
    else:
        size = (n + cfg.threads - 1) // cfg.threads
        slices = [slice(lo, min(lo + size, n)) for lo in range(0, n, size)]
        buf_sets = [
            {name: field.new_grad_buffer() for name, field in model.fields}
            for _ in slices
        ]
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            futures = [
                pool.submit(_chunk_forward_backward, model, cfg, weights, batch, sl, bufs)
                for sl, bufs in zip(slices, buf_sets)
            ]
            sums = [f.result() for f in futures]
        for name, field in model.fields:
            for bufs in buf_sets:  # fixed reduction order
                field.grad += bufs[name]

    terms = {k: sum(s[k] for s in sums) / n for k in sums[0]}
    if not np.isfinite(terms["total"]):
        raise NumericalError(
            f"non-finite loss at iteration {iteration}",
            details=_diagnose_batch(model, cfg, batch),
        )

    lr = cfg.learning_rate(iteration)
    for name, field in model.fields:
        adam_step(field.params, field.grad, opt[name], lr,
                  cfg.beta1, cfg.beta2, cfg.adam_eps)
    terms["lr"] = lr
    terms["weights"] = weights
    return terms


def _diagnose_batch(model, cfg, batch) -> dict:
    """Identify which rays produce non-finite colors, for the error dump."""
    bad = []
    try:
        t_vals = sample_fine_t(model, cfg, batch.origins, batch.dirs,
                               batch.taus, batch.ray_ids)
        out, _ = render_rays(model.static, model.dynamic, model.shadow,
                             batch.origins, batch.dirs, model.t_near,
                             model.t_far, batch.taus, t_vals)
        rows = np.flatnonzero(~np.all(np.isfinite(out.color), axis=1))
        for r in rows[:8]:
            bad.append({
                "frame": int(batch.frames[r]),
                "pixel": [int(batch.pxs[r]), int(batch.pys[r])],
                "tau": float(batch.taus[r]),
            })
    except Exception:
        pass
    return {"offending_rays": bad}


def make_opt_states(model: SceneModel) -> dict[str, AdamState]:
    return {name: AdamState.for_params(field.params) for name, field in model.fields}


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def build_model_for_dataset(dataset, cfg: TrainConfig) -> SceneModel:
    return build_model(
        dataset.bbox, dataset.n_frames, dataset.t_near, dataset.t_far,
        static_res=cfg.static_res, dynamic_res=cfg.dynamic_res,
        shadow_res=cfg.shadow_res, time_slices=cfg.time_slices,
        use_shadow=cfg.use_shadow,
    )


def train(model: SceneModel, dataset, cfg: TrainConfig, out_dir=None,
          quiet: bool = False) -> list[dict]:
    """Run the full optimization; returns the logged history rows."""
    cache = RayCache(dataset)
    opt = make_opt_states(model)
    history = []
    writer = None
    csv_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_file = open(os.path.join(out_dir, "log.csv"), "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(LOG_COLUMNS)

    try:
        for it in range(cfg.iterations):
            batch = assemble_batch(dataset, cache, cfg, it)
            terms = train_step(model, batch, cfg, opt, it)

            last = it == cfg.iterations - 1
            if it % cfg.log_interval == 0 or last:
                row = _log_row(it, terms)
                history.append(row)
                if writer is not None:
                    writer.writerow([row[c] for c in LOG_COLUMNS])
                    csv_file.flush()
            if not quiet and (it % 100 == 0 or last):
                print(
                    f"iter {it:6d}  total {terms['total']:.5f}  "
                    f"photo {terms['photometric']:.5f}  lr {terms['lr']:.2e}",
                    file=sys.stderr,
                )
            if out_dir is not None and cfg.checkpoint_interval > 0 and not last \
                    and it > 0 and it % cfg.checkpoint_interval == 0:
                model.save(os.path.join(out_dir, f"checkpoint_{it:06d}"))
            if it % cfg.log_interval == 0:
                for _, field in model.fields:
                    if not np.all(np.isfinite(field.params)):
                        raise NumericalError(f"non-finite parameters at iteration {it}")
    finally:
        if csv_file is not None:
            csv_file.close()

    if out_dir is not None:
        model.save(os.path.join(out_dir, "checkpoint_final"))
    return history


def _log_row(iteration: int, terms: dict) -> dict:
    w = terms["weights"]
    return {
        "iteration": iteration,
        "loss_photometric": terms["photometric"],
        "loss_skewed_entropy": terms["skewed_entropy"],
        "loss_ray_reg": terms["ray_reg"],
        "loss_static_reg": terms["static_reg"],
        "loss_shadow_reg": terms["shadow_reg"],
        "loss_total": terms["total"],
        "lambda_s": w.lambda_s,
        "lambda_r": w.lambda_r,
        "lambda_sigma_s": w.lambda_sigma_s,
        "lambda_rho": w.lambda_rho,
        "lr": terms["lr"],
    }


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_difference(loss_fn, params: np.ndarray, index: int, h: float) -> float:
    """Central difference of loss_fn after perturbing one parameter."""
    old = params[index]
    params[index] = old + h
    up = loss_fn()
    params[index] = old - h
    down = loss_fn()
    params[index] = old
    return (up - down) / (2.0 * h)


@dataclass
class GradCheckReport:
    passed: bool
    blocks: dict
    failures: list

    def summary(self) -> str:
        lines = []
        for name, info in self.blocks.items():
            lines.append(
                f"{name:8s} checked {info['n_checked']:4d}  "
                f"max rel err {info['max_rel_err']:.3e}  "
                f"failed {info['n_failed']}"
            )
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def random_scene_model(seed: int = 0, res: int = 8, slices: int = 3,
                       use_shadow: bool = True) -> SceneModel:
    """Small random-parameter model for gradient checking."""
    rng = np.random.default_rng(seed)
    bbox = [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]
    model = build_model(bbox, n_frames=slices, t_near=0.5, t_far=4.0,
                        static_res=res, dynamic_res=res, shadow_res=res,
                        time_slices=slices, use_shadow=use_shadow)
    for _, field in model.fields:
        field.params[:] = rng.normal(0.0, 0.8, field.params.shape)
    return model


def random_check_batch(model: SceneModel, n_rays: int = 4, seed: int = 1):
    """Random rays aimed at the box plus random targets/taus."""
    rng = np.random.default_rng(seed)
    origins = rng.normal(0.0, 0.3, (n_rays, 3)) + np.array([0.0, 0.0, 2.5])
    dirs = np.array([0.0, 0.0, -1.0]) + rng.normal(0.0, 0.25, (n_rays, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    targets = rng.uniform(0.0, 1.0, (n_rays, 3))
    taus = rng.uniform(0.0, 1.0, n_rays)
    return origins, dirs, targets, taus


def gradient_check(model: SceneModel, weights: LossWeights, n_rays: int = 4,
                   n_samples: int = 16, n_probes: int = 200, h: float = 1e-4,
                   tolerance: float = 1e-3, abs_floor: float = 1e-6,
                   seed: int = 1, corrupt: bool = False) -> GradCheckReport:
    """Compare analytic total-loss gradients against central differences.

    Probes a random parameter subset of each field. t values are frozen so
    both sides differentiate the same function.
    """
    rng = np.random.default_rng(seed + 7)
    origins, dirs, targets, taus = random_check_batch(model, n_rays, seed)
    jitter = rng.random((n_rays, n_samples))
    t_vals = stratified_t(model.t_near, model.t_far, n_samples, jitter)

    def loss_value() -> float:
        out, _ = render_rays(model.static, model.dynamic, model.shadow,
                             origins, dirs, model.t_near, model.t_far, taus, t_vals)
        return float(total_loss(out, targets, weights)[0])

    out, caches = render_rays(model.static, model.dynamic, model.shadow,
                              origins, dirs, model.t_near, model.t_far,
                              taus, t_vals, want_cache=True)
    _, _, lg = total_loss_with_grads(out, targets, weights)
    sg = composite_backward(out, lg.d_color, lg.d_w, lg.d_sigma_s, lg.d_rho)
    for _, field in model.fields:
        field.zero_grad()
    backprop_to_fields(model.static, model.dynamic, model.shadow, caches, sg)

    analytic = {name: field.grad.copy() for name, field in model.fields}
    if corrupt:
        target = np.argmax(np.abs(analytic["static"]))
        analytic["static"][target] *= 2.0

    blocks = {}
    failures = []
    names = [name for name, _ in model.fields]
    per_block = max(n_probes // len(names), 1)
    for name, field in model.fields:
        touched = np.flatnonzero(np.abs(analytic[name]) > 0)
        want = min(per_block, field.n_params)
        if touched.size >= want:
            probes = rng.choice(touched, size=want, replace=False)
        else:
            extra = rng.choice(field.n_params, size=want - touched.size, replace=False)
            probes = np.concatenate([touched, extra])
        if corrupt and name == "static":
            probes[0] = np.argmax(np.abs(analytic["static"]))
        max_rel = 0.0
        n_failed = 0
        for p in probes:
            fd = finite_difference(loss_value, field.params, int(p), h)
            an = analytic[name][p]
            scale = max(abs(fd), abs(an))
            if scale <= abs_floor:
                continue
            rel = abs(fd - an) / scale
            max_rel = max(max_rel, rel)
            if rel > tolerance:
                n_failed += 1
                failures.append({"field": name, "index": int(p),
                                 "analytic": float(an), "fd": float(fd),
                                 "rel_err": float(rel)})
        blocks[name] = {"n_checked": int(probes.size), "max_rel_err": max_rel,
                        "n_failed": n_failed}
    return GradCheckReport(passed=not failures, blocks=blocks, failures=failures)
