"""Training loop for the decomposed color/density hash-grid field.

The two embedding grids are independent: the density table may be larger
than the color table, and each has its own update frequency. On iterations
where a branch's schedule does not fire, that branch still runs forward
(its features are needed for rendering) but its table update and the
corresponding write-intent stream are skipped. Grid entries and MLP weights
are updated with plain SGD; the per-address accumulation is purely additive
so merged updates commute in exact arithmetic.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field
from fractions import Fraction

import numpy as np

from . import field_grid, mlp, renderer
from .errors import TrainingDiverged
from .field_grid import EmbeddingTable, HashConfig
from .mlp import MlpParams


@dataclass
class DecomposedFieldConfig:
    density_table: HashConfig
    color_table: HashConfig
    density_update_freq: Fraction = Fraction(1)
    color_update_freq: Fraction = Fraction(1)
    # Plain SGD on per-ray-mean gradients: grid features carry tiny per-entry
    # gradients (each entry is touched by few of the batch's samples), so the
    # table rate sits orders of magnitude above the MLP rate. Higher rates
    # converge faster but oscillate more at convergence.
    learning_rate: float = 5000.0
    mlp_learning_rate: float = 0.3
    iterations: int = 500
    batch_size: int = 1024
    samples_per_ray: int = 64
    background: tuple = (0.0, 0.0, 0.0)
    init_scale: float = 1e-4
    dtype: type = np.float32

    def __post_init__(self):
        self.density_update_freq = Fraction(self.density_update_freq).limit_denominator(10**6)
        self.color_update_freq = Fraction(self.color_update_freq).limit_denominator(10**6)
        for name, f in (("density", self.density_update_freq),
                        ("color", self.color_update_freq)):
            if not 0 < f <= 1:
                raise ValueError(f"{name} update frequency must be in (0, 1], got {f}")

    def validate_decomposition(self, allow_inverted: bool = False):
        """The density branch must not be smaller or slower than the color branch."""
        if self.density_table.table_size < self.color_table.table_size:
            if not allow_inverted:
                raise ValueError(
                    "density table smaller than color table; pass allow_inverted to "
                    "override (color features are the less sensitive branch)")
        if self.density_update_freq < self.color_update_freq:
            if not allow_inverted:
                raise ValueError(
                    "density updated less often than color; pass allow_inverted to "
                    "override (color features are the less sensitive branch)")


def desk_config(**overrides) -> DecomposedFieldConfig:
    """Scaled-down decomposed defaults: density 2^14, color 2^12, F_C = 1/2."""
    kwargs = dict(
        density_table=HashConfig(table_size=2**14, levels=4, resolution=16),
        color_table=HashConfig(table_size=2**12, levels=4, resolution=16),
        density_update_freq=Fraction(1),
        color_update_freq=Fraction(1, 2),
    )
    kwargs.update(overrides)
    return DecomposedFieldConfig(**kwargs)


def baseline_config(config: DecomposedFieldConfig) -> DecomposedFieldConfig:
    """The undecomposed reference: equal table sizes, every-iteration updates."""
    return DecomposedFieldConfig(
        density_table=config.density_table,
        color_table=HashConfig(**{**config.color_table.to_dict(),
                                  "table_size": config.density_table.table_size}),
        density_update_freq=Fraction(1),
        color_update_freq=Fraction(1),
        learning_rate=config.learning_rate,
        mlp_learning_rate=config.mlp_learning_rate,
        iterations=config.iterations,
        batch_size=config.batch_size,
        samples_per_ray=config.samples_per_ray,
        background=config.background,
        init_scale=config.init_scale,
        dtype=config.dtype,
    )


@dataclass
class DecomposedField:
    density: EmbeddingTable
    color: EmbeddingTable
    params: MlpParams

    @property
    def embedding_dim(self):
        return self.color.config.embedding_dim + self.density.config.embedding_dim


@dataclass
class TrainReport:
    losses: list = dc_field(default_factory=list)
    train_psnr: list = dc_field(default_factory=list)
    test_psnr: list = dc_field(default_factory=list)  # (iteration, psnr) pairs
    density_updates: int = 0
    color_updates: int = 0
    wall_time: float = 0.0

    def to_csv(self) -> str:
        lines = ["iteration,loss,psnr"]
        for i, (loss, p) in enumerate(zip(self.losses, self.train_psnr)):
            lines.append(f"{i},{loss!r},{p!r}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        final_test = self.test_psnr[-1][1] if self.test_psnr else float("nan")
        return (
            f"iterations: {len(self.losses)}\n"
            f"final loss: {self.losses[-1] if self.losses else float('nan')!r}\n"
            f"final train psnr: {self.train_psnr[-1] if self.train_psnr else float('nan')!r}\n"
            f"final test psnr: {final_test!r}\n"
            f"density updates: {self.density_updates}\n"
            f"color updates: {self.color_updates}\n"
            f"wall time: {self.wall_time:.2f}s\n"
        )


def apply_schedule(iteration: int, freq) -> bool:
    """True when the branch fires at this iteration.

    Floor-difference schedule: over any aligned window the firing count is
    exact, and skipped iterations are evenly spaced. F = 1 always fires.
    """
    f = Fraction(freq).limit_denominator(10**6)
    if not 0 < f <= 1:
        raise ValueError(f"update frequency must be in (0, 1], got {freq}")
    return (iteration + 1) * f // 1 > iteration * f // 1


def sgd_update_table(table: EmbeddingTable, contributions, learning_rate: float):
    """theta <- theta - lr * g, scattering per-address contributions additively.

    Contributions to the same address are pre-summed (bincount) before the
    single subtraction, matching the merged-update semantics: in exact
    arithmetic the result is order independent.
    """
    size = table.config.table_size
    for level, (addrs, grads) in enumerate(contributions):
        if not np.all(np.isfinite(grads)):
            raise TrainingDiverged("non-finite table gradient")
        for f in range(grads.shape[1]):
            acc = np.bincount(addrs, weights=grads[:, f], minlength=size)
            table.entries[level][:, f] -= (learning_rate * acc).astype(
                table.entries.dtype)


def sgd_update_params(params: MlpParams, grads, learning_rate: float):
    for p, g in zip(params.arrays(), grads.arrays()):
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged("non-finite parameter gradient")
        p -= (learning_rate * g).astype(p.dtype)


def psnr(predicted: np.ndarray, reference: np.ndarray) -> float:
    """-10 log10(MSE) for [0,1]-range images; +inf for identical inputs."""
    predicted = np.asarray(predicted)
    reference = np.asarray(reference)
    if predicted.shape != reference.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {reference.shape}")
    mse = float(np.mean((predicted - reference) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(-10.0 * np.log10(mse))


def _query_field(field_model: DecomposedField, points, dirs, sink=None, point_ids=None,
                 cube_cache=None):
    """(sigma, color, caches) for in-domain points (n, 3).

    Both branches share one lattice geometry (same levels/resolutions), so the
    cube weights are computed once and only the hashing differs per table.
    """
    c_cfg, d_cfg = field_model.color.config, field_model.density.config
    geometry = field_grid.compute_cube_geometry(points, c_cfg, check=False)
    color_cubes = field_grid.geometry_addresses(geometry, c_cfg)
    if (d_cfg.levels, d_cfg.resolution, d_cfg.growth_factor) == (
            c_cfg.levels, c_cfg.resolution, c_cfg.growth_factor):
        density_cubes = field_grid.geometry_addresses(geometry, d_cfg)
    else:
        density_cubes = field_grid.geometry_addresses(
            field_grid.compute_cube_geometry(points, d_cfg, check=False), d_cfg)
    if cube_cache is not None:
        cube_cache["color"] = color_cubes
        cube_cache["density"] = density_cubes
    if sink is not None:
        sink.set_context(branch="color")
    color_emb = field_grid.interpolate(points, field_model.color, sink=sink,
                                       point_ids=point_ids, cubes=color_cubes)
    if sink is not None:
        sink.set_context(branch="density")
    density_emb = field_grid.interpolate(points, field_model.density, sink=sink,
                                         point_ids=point_ids, cubes=density_cubes)
    emb = np.concatenate([color_emb, density_emb], axis=1)
    sigma, color, cache = mlp.mlp_forward(field_model.params, emb, dirs, check=False)
    return sigma, color, cache


def render_rays(field_model: DecomposedField, origins, dirs, near, far, n_samples,
                t=None, background=None, sink=None, dtype=np.float32):
    """Forward pass for a ray batch. Returns predicted colors plus the pieces
    the backward pass needs. Sample points outside [0,1]^3 contribute nothing."""
    n_rays = origins.shape[0]
    if t is None:
        t = renderer.sample_along_ray(near, far, n_samples, n_rays=n_rays)
    t = t.astype(dtype)
    pts = (origins[:, None, :] + t[:, :, None] * dirs[:, None, :]).astype(dtype)
    flat_pts = pts.reshape(-1, 3)
    inside = np.all((flat_pts >= 0.0) & (flat_pts <= 1.0), axis=1)
    sigma = np.zeros(flat_pts.shape[0], dtype=dtype)
    color = np.zeros((flat_pts.shape[0], 3), dtype=dtype)
    cache = None
    cube_cache = {}
    if np.any(inside):
        dirs_per_pt = np.repeat(dirs.astype(dtype), t.shape[1], axis=0)[inside]
        point_ids = np.arange(int(inside.sum()), dtype=np.uint32)
        s_in, c_in, cache = _query_field(field_model, flat_pts[inside], dirs_per_pt,
                                         sink=sink, point_ids=point_ids,
                                         cube_cache=cube_cache)
        sigma[inside] = s_in
        color[inside] = c_in
    sigma = sigma.reshape(n_rays, -1)
    color = color.reshape(n_rays, -1, 3)
    pred, comp_cache = renderer.composite(sigma, color, t, far, background=background)
    return pred, t, inside, flat_pts, cube_cache, cache, comp_cache


def render_image(field_model: DecomposedField, camera, pose, near, far,
                 n_samples=64, background=None, chunk=4096):
    """Deterministic full-image render (midpoint sampling)."""
    px, py = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    origins, dirs = renderer.pixel_to_ray(camera, pose, px.ravel(), py.ravel())
    out = np.empty((origins.shape[0], 3))
    for lo in range(0, origins.shape[0], chunk):
        hi = min(lo + chunk, origins.shape[0])
        pred, *_ = render_rays(field_model, origins[lo:hi], dirs[lo:hi], near, far,
                               n_samples, background=background,
                               dtype=field_model.params.w1.dtype)
        out[lo:hi] = pred
    return out.reshape(camera.height, camera.width, 3)


def eval_test_psnr(field_model: DecomposedField, scene, n_samples=64, background=None):
    """Mean full-render PSNR over the scene's views."""
    vals = []
    for pose, image in scene.views:
        img = render_image(field_model, scene.camera, pose, scene.near, scene.far,
                           n_samples=n_samples, background=background)
        vals.append(psnr(np.clip(img, 0.0, 1.0), image))
    return float(np.mean(vals))


def trace_header(config: DecomposedFieldConfig) -> dict:
    """Table geometry and MLP dims the accelerator model reads back."""
    in_dim = (config.density_table.embedding_dim + config.color_table.embedding_dim
              + 6 * mlp.N_FREQUENCIES)
    return {
        "density": config.density_table.to_dict(),
        "color": config.color_table.to_dict(),
        # The 4-channel head splits into a 1-channel density head and a
        # 3-channel color head; the narrow heads map to the adder-tree unit.
        "mlp_dims": [[in_dim, 64], [64, 64], [64, 1], [64, 3]],
    }


def init_field(config: DecomposedFieldConfig, seed: int) -> DecomposedField:
    rng = np.random.default_rng(seed)
    density = EmbeddingTable.random(config.density_table, rng, config.init_scale,
                                    dtype=config.dtype)
    color = EmbeddingTable.random(config.color_table, rng, config.init_scale,
                                  dtype=config.dtype)
    embed_dim = (config.density_table.embedding_dim + config.color_table.embedding_dim)
    params = MlpParams.create(embed_dim, seed=seed, dtype=config.dtype)
    return DecomposedField(density, color, params)


def train(scene, config: DecomposedFieldConfig, trace_sink=None, seed: int = 0,
          eval_every: int = 0, progress=None):
    """Run the full decomposed training loop.

    Returns (TrainReport, DecomposedField). The per-iteration schedule gates
    only the table updates and their write streams; gradients are normalized
    by the ray count so the step size is batch-size independent.
    """
    scene.validate()
    rng = np.random.default_rng(seed)
    field_model = init_field(config, seed)
    if trace_sink is not None:
        trace_sink.header.update(trace_header(config))
    report = TrainReport()
    bg = np.asarray(config.background, dtype=np.float64)
    t0 = time.perf_counter()
    for it in range(config.iterations):
        if trace_sink is not None:
            trace_sink.set_context(iteration=it, phase="forward")
        batch = renderer.sample_pixels(scene, config.batch_size, rng)
        rays = renderer.rays_for_batch(scene, batch)
        t = renderer.sample_along_ray(scene.near, scene.far, config.samples_per_ray,
                                      rng=rng, stratified=True,
                                      n_rays=config.batch_size)
        pred, t, inside, flat_pts, cube_cache, mlp_cache, comp_cache = render_rays(
            field_model, rays.origins, rays.directions, scene.near, scene.far,
            config.samples_per_ray, t=t, background=bg, sink=trace_sink,
            dtype=config.dtype)
        loss = renderer.reconstruction_loss(pred, rays.gt_colors)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss diverged at iteration {it}: {loss}")
        report.losses.append(loss)
        report.train_psnr.append(psnr(pred, rays.gt_colors))

        d_pred = (2.0 * (pred - rays.gt_colors) / config.batch_size).astype(config.dtype)
        dsigma, dcolor = renderer.composite_backward(comp_cache, d_pred)
        density_fires = apply_schedule(it, config.density_update_freq)
        color_fires = apply_schedule(it, config.color_update_freq)
        if mlp_cache is not None:
            ds_in = dsigma.reshape(-1)[inside]
            dc_in = dcolor.reshape(-1, 3)[inside]
            grads, demb = mlp.mlp_backward(field_model.params, mlp_cache, ds_in, dc_in)
            c_dim = config.color_table.embedding_dim
            pts_in = flat_pts[inside]
            point_ids = np.arange(pts_in.shape[0], dtype=np.uint32)
            if trace_sink is not None:
                trace_sink.set_context(phase="backward")
            if color_fires:
                if trace_sink is not None:
                    trace_sink.set_context(branch="color")
                contribs = field_grid.interpolate_backward(
                    pts_in, demb[:, :c_dim], field_model.color, sink=trace_sink,
                    point_ids=point_ids, cubes=cube_cache.get("color"))
                sgd_update_table(field_model.color, contribs, config.learning_rate)
            if density_fires:
                if trace_sink is not None:
                    trace_sink.set_context(branch="density")
                contribs = field_grid.interpolate_backward(
                    pts_in, demb[:, c_dim:], field_model.density, sink=trace_sink,
                    point_ids=point_ids, cubes=cube_cache.get("density"))
                sgd_update_table(field_model.density, contribs, config.learning_rate)
            sgd_update_params(field_model.params, grads, config.mlp_learning_rate)
        report.density_updates += int(density_fires)
        report.color_updates += int(color_fires)
        if eval_every and (it + 1) % eval_every == 0:
            report.test_psnr.append((it, eval_test_psnr(field_model, scene,
                                                        config.samples_per_ray, bg)))
        if progress and (it + 1) % progress == 0:
            print(f"iter {it + 1}: loss {loss:.4f} psnr {report.train_psnr[-1]:.2f}")
    report.test_psnr.append((config.iterations - 1,
                             eval_test_psnr(field_model, scene,
                                            config.samples_per_ray, bg)))
    report.wall_time = time.perf_counter() - t0
    return report, field_model


def save_checkpoint(path, field_model: DecomposedField):
    """Container: density table section, color table section, MLP section."""
    with open(path, "wb") as fh:
        field_grid.save_table(fh, field_model.density)
        field_grid.save_table(fh, field_model.color)
        mlp.save_mlp(fh, field_model.params)


def load_checkpoint(path, density_extra: dict | None = None,
                    color_extra: dict | None = None) -> DecomposedField:
    with open(path, "rb") as fh:
        density = field_grid.load_table(fh, density_extra)
        color = field_grid.load_table(fh, color_extra)
        params = mlp.load_mlp(fh)
    return DecomposedField(density, color, params)
