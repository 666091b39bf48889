"""Score distillation: denoiser priors, PAAS, the reconstruction objective and the Adam loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from . import InvalidArgument, UnsupportedOperation
from . import rng as rngmod
from .imaging import Image, Mask
from .render import CameraPose, DensityGrid, RenderOutput, default_pose, render

LUMA = np.array([0.299, 0.587, 0.114])
KINDS = ("analytic-gaussian", "analytic-mixture", "external-table")


@dataclass(frozen=True)
class DenoiserSpec:
    """A denoiser ``D(x; sigma)`` over flat data vectors.

    Analytic kinds describe a Gaussian mixture prior with diagonal covariances:
    ``means`` (K, d), ``variances`` (K, d) and ``weights`` (K,).  The
    ``external-table`` kind wraps a caller-supplied ``fn(x, sigma) -> x_hat``
    and cannot be evaluated in closed form.

    ``view_table`` makes the prior viewpoint-conditioned: a mapping from azimuth
    in degrees to the spec used for views nearest that azimuth.
    """

    kind: str
    means: np.ndarray | None = None
    variances: np.ndarray | None = None
    weights: np.ndarray | None = None
    fn: Callable | None = field(default=None, compare=False)
    genus: str | None = None
    view_table: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown denoiser kind {self.kind!r}")
        if self.view_table is not None:
            return
        if self.kind == "external-table":
            if self.fn is None:
                raise InvalidArgument("external-table denoiser needs fn")
            return
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k, d = means.shape
        var = np.asarray(self.variances, dtype=np.float64)
        var = np.broadcast_to(var.reshape(k, -1) if var.ndim else var, (k, d)).astype(np.float64)
        weights = np.ones(k) / k if self.weights is None else np.asarray(self.weights, dtype=np.float64).reshape(k)
        if np.any(var <= 0):
            raise InvalidArgument("mixture variances must be positive")
        if np.any(weights <= 0) or not math.isclose(weights.sum(), 1.0, rel_tol=1e-9):
            raise InvalidArgument("mixture weights must be positive and sum to 1")
        if self.kind == "analytic-gaussian" and k != 1:
            raise InvalidArgument("analytic-gaussian takes exactly one component")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def gaussian(cls, mean, std, genus=None) -> "DenoiserSpec":
        """Isotropic Gaussian prior N(mean, std^2 I)."""
        mean = np.asarray(mean, dtype=np.float64).reshape(1, -1)
        return cls("analytic-gaussian", mean, np.full(mean.shape, float(std) ** 2), np.ones(1), genus=genus)

    @classmethod
    def mixture(cls, means, stds, weights=None, genus=None) -> "DenoiserSpec":
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        stds = np.asarray(stds, dtype=np.float64)
        var = np.broadcast_to((stds ** 2).reshape(means.shape[0], -1) if stds.ndim else stds ** 2, means.shape)
        return cls("analytic-mixture", means, var, weights, genus=genus)

    @property
    def analytic(self) -> bool:
        return self.kind != "external-table"

    @property
    def dim(self) -> int | None:
        return None if self.means is None else self.means.shape[1]

    def for_view(self, pose: CameraPose) -> "DenoiserSpec":
        """Resolve viewpoint conditioning; specs without a view table return themselves."""
        if self.view_table is None:
            return self
        keys = np.array(sorted(self.view_table))
        diff = np.abs((keys - pose.azimuth + 180.0) % 360.0 - 180.0)
        return self.view_table[keys[int(np.argmin(diff))]]


def _component_posteriors(spec: DenoiserSpec, x: np.ndarray, sigma: float):
    """Responsibilities (n, K) and per-component posterior means (n, K, d) for rows of x."""
    tot = spec.variances + sigma ** 2                         # (K, d)
    diff = x[:, None, :] - spec.means[None]                   # (n, K, d)
    logn = -0.5 * np.sum(diff ** 2 / tot + np.log(2 * np.pi * tot), axis=2)
    logr = np.log(spec.weights) + logn
    resp = np.exp(logr - logsumexp(logr, axis=1, keepdims=True))
    post = (spec.variances * x[:, None, :] + sigma ** 2 * spec.means[None]) / tot
    return resp, post


def analytic_denoise(spec: DenoiserSpec, x, sigma: float) -> np.ndarray:
    """Posterior mean E[x0 | x0 + sigma*n = x] under the spec's Gaussian-mixture prior.

    ``x`` may be a single vector (d,) or a batch (n, d).
    """
    if not spec.analytic or spec.view_table is not None:
        raise UnsupportedOperation(f"{spec.kind} denoiser has no closed form")
    if not sigma > 0:
        raise InvalidArgument("sigma must be > 0")
    x = np.asarray(x, dtype=np.float64)
    batch = x.reshape(-1, spec.dim)
    resp, post = _component_posteriors(spec, batch, sigma)
    return np.einsum("nk,nkd->nd", resp, post).reshape(x.shape)


def denoise(spec: DenoiserSpec, x, sigma: float) -> np.ndarray:
    if spec.kind == "external-table":
        return np.asarray(spec.fn(np.asarray(x, dtype=np.float64), sigma), dtype=np.float64)
    return analytic_denoise(spec, x, sigma)


def score(spec: DenoiserSpec, x, sigma: float) -> np.ndarray:
    """Denoiser score estimate ``(D(x; sigma) - x) / sigma^2``."""
    if not sigma > 0:
        raise InvalidArgument("sigma must be > 0")
    x = np.asarray(x, dtype=np.float64)
    return (denoise(spec, x, sigma) - x) / sigma ** 2


def paas_samples(spec: DenoiserSpec, x, sigma: float, n_samples: int, seed: int,
                 chunk: int = 4096) -> np.ndarray:
    """Per-sample perturb-and-score terms, shape (n_samples,) + x.shape."""
    if n_samples < 1:
        raise InvalidArgument("n_samples must be >= 1")
    if not sigma > 0:
        raise InvalidArgument("sigma must be > 0")
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    gen = rngmod.stream(seed, "paas")
    out = np.empty((n_samples, flat.size))
    per = max(1, chunk * 64 // max(flat.size, 1))
    for start in range(0, n_samples, per):
        m = min(per, n_samples - start)
        noisy = flat[None, :] + sigma * gen.standard_normal((m, flat.size))
        d = np.stack([denoise(spec, row, sigma) for row in noisy]) if spec.kind == "external-table" \
            else denoise(spec, noisy, sigma)
        out[start:start + m] = (d - flat[None, :]) / sigma ** 2
    return out.reshape((n_samples,) + x.shape)


def paas(spec: DenoiserSpec, x, sigma: float, n_samples: int = 1, seed: int = 0) -> np.ndarray:
    """Monte-Carlo perturb-and-average score: mean over n ~ N(0, I) of (D(x + sigma n) - x) / sigma^2."""
    return paas_samples(spec, x, sigma, n_samples, seed).mean(axis=0)


def smoothed_log_density(spec: DenoiserSpec, x, sigma: float) -> float:
    """log p_sigma(x) for the mixture prior convolved with N(0, sigma^2 I)."""
    if not spec.analytic:
        raise UnsupportedOperation("external denoisers have no density")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    tot = spec.variances + sigma ** 2
    logn = -0.5 * np.sum((x - spec.means) ** 2 / tot + np.log(2 * np.pi * tot), axis=1)
    return float(logsumexp(np.log(spec.weights) + logn))


# -- losses -----------------------------------------------------------------------

def loss_rec(img: Image, mask: Mask, out: RenderOutput, lambda_rgb: float = 5.0,
             lambda_mask: float = 20.0) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Masked colour error plus silhouette error, with gradients on grid parameters.

    ``lambda_rgb * ||M(I) * (I - T)||^2 + lambda_mask * ||M(I) - M(T)||^2``
    """
    value, g_rgb, g_mask = loss_rec_image(img, mask, out.rgb, out.mask, lambda_rgb, lambda_mask)
    return value, out.backward(g_rgb, g_mask)


def loss_rec_image(img: Image, mask: Mask, rgb: Image, opacity: Mask, lambda_rgb: float,
                   lambda_mask: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Image-space part of :func:`loss_rec`: value and gradients w.r.t. rendered rgb and opacity."""
    if (img.height, img.width) != (mask.height, mask.width) or \
            (img.height, img.width) != (rgb.height, rgb.width) or opacity.values.shape != mask.values.shape:
        raise InvalidArgument("image, mask and render dimensions must match")
    m = mask.values[:, :, None]
    # a grayscale target is compared with the render's luma
    pred = rgb.gray().pixels if img.channels == 1 else rgb.rgb()
    r_rgb = m * (img.pixels - pred)
    r_mask = mask.values - opacity.values
    value = lambda_rgb * float(np.sum(r_rgb ** 2)) + lambda_mask * float(np.sum(r_mask ** 2))
    g_rgb = -2.0 * lambda_rgb * m * r_rgb
    if img.channels == 1:
        g_rgb = g_rgb * LUMA
    g_mask = -2.0 * lambda_mask * r_mask
    return value, g_rgb, g_mask


def loss_prior_grad(spec: DenoiserSpec, grid: DensityGrid, pose: CameraPose, sigma: float,
                    n_samples: int = 1, seed: int = 0, steps: int = 128,
                    return_render: bool = False):
    """Gradient of ``-log P(render(grid, pose))`` on grid parameters via PAAS.

    The image-space gradient is ``-PAAS(x, sigma)``; it is pulled back through
    the renderer's Jacobian.  The spec is resolved for ``pose`` first, so a
    view-conditioned prior sees the relative viewpoint.
    """
    out = render(grid, pose, steps)
    x = out.rgb.pixels.reshape(-1)
    s = spec.for_view(pose)
    if s.dim is not None and s.dim != x.size:
        raise InvalidArgument(f"prior dimension {s.dim} does not match render size {x.size}")
    g_img = -paas(s, x, sigma, n_samples, seed).reshape(out.rgb.pixels.shape)
    grads = out.backward(g_img, None)
    return (grads, out) if return_render else grads


# -- optimisation -------------------------------------------------------------------

def noise_schedule(lo: float = 0.02, hi: float = 1.0, levels: int = 50) -> np.ndarray:
    """Descending geometric sigma schedule."""
    if not (0 < lo < hi) or levels < 1:
        raise InvalidArgument("schedule needs 0 < lo < hi and levels >= 1")
    return np.geomspace(hi, lo, levels)


@dataclass
class ReconConfig:
    lambda_rgb: float = 5.0
    lambda_mask: float = 20.0
    alpha: float = 1.0
    beta: float = 8.0
    lr: float = 0.001
    iterations: int = 2000
    paas_samples: int = 1
    rng_seed: int = 0
    azimuth_range: tuple[float, float] = (0.0, 360.0)
    elevation_range: tuple[float, float] = (-10.0, 45.0)
    sigma_min: float = 0.02
    sigma_max: float = 1.0
    sigma_levels: int = 50
    resolution: tuple[int, int, int] = (64, 64, 64)
    extent: tuple[tuple[float, float, float], tuple[float, float, float]] = ((-1.0, -1.0, 0.0), (1.0, 1.0, 2.0))
    init_density: float = 0.5
    steps: int = 128
    prior_image_size: tuple[int, int] = (32, 32)
    fov: float = 40.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 100

    def validate(self) -> None:
        for name in ("lambda_rgb", "lambda_mask", "alpha", "beta", "lr"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name} must be >= 0")
        if self.iterations < 1:
            raise InvalidArgument("iterations must be >= 1")
        if self.paas_samples < 1:
            raise InvalidArgument("paas_samples must be >= 1")
        if self.steps < 2:
            raise InvalidArgument("steps must be >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(map(list, v)) if k == "extent" else list(v) if isinstance(v, tuple) else v)
                for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ReconConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown reconstruction config fields: {sorted(unknown)}")
        kw = dict(d)
        for k in ("azimuth_range", "elevation_range", "resolution", "prior_image_size"):
            if k in kw:
                kw[k] = tuple(kw[k])
        if "extent" in kw:
            kw["extent"] = tuple(tuple(e) for e in kw["extent"])
        return cls(**kw)


class Adam:
    """Adam without weight decay over a list of numpy arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class ReconstructionError(RuntimeError):
    """Optimisation produced a non-finite loss or gradient."""

    def __init__(self, iteration: int, terms: dict):
        self.iteration = iteration
        self.terms = terms
        super().__init__(f"non-finite objective at iteration {iteration}: {terms}")


def sample_prior_view(gen: np.random.Generator, cfg: ReconConfig, radius: float) -> CameraPose:
    az = gen.uniform(*cfg.azimuth_range) % 360.0
    el = gen.uniform(*cfg.elevation_range)
    return CameraPose(az, el, radius, cfg.fov, tuple(cfg.prior_image_size))


def reconstruct(img: Image, mask: Mask, genus: str | None, spec2d: DenoiserSpec | None,
                spec3d: DenoiserSpec | None, cfg: ReconConfig, init: DensityGrid | None = None,
                history: list | None = None) -> DensityGrid:
    """Fit a density grid to one segmented image with Adam.

    Each iteration takes the reconstruction gradient at the reference (front)
    view and, when ``alpha``/``beta`` are non-zero, one PAAS prior gradient
    for each prior at a freshly sampled viewpoint and noise level.  Every
    ``cfg.log_every`` iterations a dict of loss terms is appended to
    ``history`` if given.
    """
    cfg.validate()
    if (img.height, img.width) != (mask.height, mask.width):
        raise InvalidArgument("image and mask must have matching dimensions")
    if cfg.alpha > 0 and spec2d is None:
        raise InvalidArgument("alpha > 0 requires a 2D prior")
    if cfg.beta > 0 and spec3d is None:
        raise InvalidArgument("beta > 0 requires a 3D prior")
    if spec2d is not None and genus is not None and spec2d.genus not in (None, genus):
        raise InvalidArgument(f"2D prior is conditioned on {spec2d.genus!r}, not {genus!r}")

    grid = init.copy() if init is not None else DensityGrid.full(
        cfg.resolution, cfg.extent, cfg.init_density)
    ref_pose = default_pose(grid, (img.width, img.height), fov=cfg.fov)
    views = rngmod.stream(cfg.rng_seed, "distill.views")
    sigmas = rngmod.stream(cfg.rng_seed, "distill.sigmas")
    noise = rngmod.stream(cfg.rng_seed, "distill.paas")
    schedule = noise_schedule(cfg.sigma_min, cfg.sigma_max, cfg.sigma_levels)
    opt = Adam([grid.density_param, grid.albedo_param], cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    for it in range(cfg.iterations):
        out = render(grid, ref_pose, cfg.steps)
        l_rec, (gp, gq) = loss_rec(img, mask, out, cfg.lambda_rgb, cfg.lambda_mask)
        terms = {"rec": l_rec}
        for name, weight, spec in (("prior2d", cfg.alpha, spec2d), ("prior3d", cfg.beta, spec3d)):
            if weight <= 0:
                continue
            pose = sample_prior_view(views, cfg, ref_pose.radius)
            sigma = float(sigmas.choice(schedule))
            seed = int(noise.integers(2 ** 31))
            (pp, pq), pout = loss_prior_grad(spec, grid, pose, sigma, cfg.paas_samples, seed,
                                             cfg.steps, return_render=True)
            gp = gp + weight * pp
            gq = gq + weight * pq
            s = spec.for_view(pose)
            if s.analytic:
                terms[name] = -smoothed_log_density(s, pout.rgb.pixels, sigma)
        if not (all(math.isfinite(v) for v in terms.values()) and np.all(np.isfinite(gp))
                and np.all(np.isfinite(gq))):
            raise ReconstructionError(it, terms)
        if history is not None and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            history.append({"iteration": it, **terms})
        opt.step([gp, gq])
    return grid
