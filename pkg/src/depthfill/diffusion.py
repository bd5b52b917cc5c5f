"""Forward noising, deterministic-capable reverse sampling, and schedules.

Index convention: tables have one row per chain step t in [0, T-1] and
alpha_bar follows the products alpha_bar[t] = prod_{s<=t} (1 - beta[s]).
A reverse transition targeting t_prev = 0 means "fully denoised", i.e.
the target uses alpha_bar == 1 exactly, so a step with a perfect noise
prediction lands on the clean signal instead of keeping the first step's
residual noise.  sample() walks a floor(linspace) grid from T-1 down to
0 and consumes randomness only for the initial latent when eta == 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .data import DepthMap
from .errors import ConfigError, NumericError, UsageError
from .rng import stream
from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule tables, one entry per chain step.

    sigmas holds the adjacent-step (t -> t-1) posterior std at eta = 1;
    the general value for any jump and eta comes from ``sigma``.  With
    eta = 0 every reverse step is deterministic.
    """

    t_train: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def alpha_bar_target(self, t_prev: int) -> float:
        """alpha_bar for a reverse-step target; t_prev == 0 is the clean state."""
        return 1.0 if t_prev == 0 else float(self.alpha_bars[t_prev])

    def sigma(self, t: int, t_prev: int, eta: float) -> float:
        ab_t = float(self.alpha_bars[t])
        ab_p = self.alpha_bar_target(t_prev)
        return eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p)


def build_schedule(t_train: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear beta ramp; alpha_bar by cumulative product."""
    if t_train < 1:
        raise ConfigError(f"t_train must be >= 1, got {t_train}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, t_train)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    # adjacent-step DDIM posterior std at eta = 1; step 0 targets the clean state
    sigmas = np.zeros(t_train)
    if t_train > 1:
        sigmas[1:] = np.sqrt((1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:])) * np.sqrt(betas[1:])
    return NoiseSchedule(t_train=t_train, betas=betas, alphas=alphas,
                         alpha_bars=alpha_bars, sigmas=sigmas)


def schedule_to_text(sched: NoiseSchedule) -> str:
    return json.dumps({
        "t_train": sched.t_train,
        "betas": sched.betas.tolist(),
        "alpha_bars": sched.alpha_bars.tolist(),
    })


def schedule_from_text(text: str) -> NoiseSchedule:
    try:
        obj = json.loads(text)
        t_train = int(obj["t_train"])
        betas = np.asarray(obj["betas"], dtype=np.float64)
        alpha_bars_in = np.asarray(obj["alpha_bars"], dtype=np.float64)
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"bad schedule text: {e}") from None
    if betas.shape != (t_train,):
        raise ConfigError("schedule text: betas length != t_train")
    sched = build_schedule(t_train, float(betas[0]), float(betas[-1]))
    if not np.allclose(sched.betas, betas, rtol=0, atol=1e-12):
        raise ConfigError("schedule text: betas are not a linear ramp")
    if not np.allclose(sched.alpha_bars, alpha_bars_in, rtol=1e-12, atol=0):
        raise ConfigError("schedule text: alpha_bars inconsistent with betas")
    return sched


@dataclass
class DiffusionState:
    """A latent together with its chain position."""
    z: np.ndarray
    t: int


# -- depth <-> latent normalization -------------------------------------------


def normalize_depth(meters: np.ndarray, d_max: float) -> np.ndarray:
    """Map [0, d_max] meters onto the [-1, 1] latent range."""
    if d_max <= 0:
        raise ConfigError(f"d_max must be positive, got {d_max}")
    return 2.0 * (np.asarray(meters, dtype=np.float64) / d_max) - 1.0

def denormalize_depth(z: np.ndarray, d_max: float) -> np.ndarray:
    if d_max <= 0:
        raise ConfigError(f"d_max must be positive, got {d_max}")
    return (np.asarray(z, dtype=np.float64) + 1.0) * (0.5 * d_max)


# -- forward and reverse steps ------------------------------------------------


def forward_diffuse(z0, t: int, eps, sched: NoiseSchedule):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; exact affine, no RNG.

    Works on arrays and Tensors alike since it is a scalar-coefficient
    combination.
    """
    if not 0 <= t < sched.t_train:
        raise UsageError(f"forward_diffuse: t={t} outside [0, {sched.t_train})")
    z0_shape = z0.shape
    if z0_shape != eps.shape:
        raise UsageError(f"forward_diffuse: z0 {z0_shape} vs eps {eps.shape}")
    ab = float(sched.alpha_bars[t])
    return z0 * np.sqrt(ab) + eps * np.sqrt(1.0 - ab)


def posterior_mean(z_t, eps_pred, t: int, sched: NoiseSchedule):
    """Reverse-chain mean from a noise prediction:
    (z_t - beta_t / sqrt(1-abar_t) * eps) / sqrt(alpha_t)."""
    if not 0 <= t < sched.t_train:
        raise UsageError(f"posterior_mean: t={t} outside [0, {sched.t_train})")
    beta = float(sched.betas[t])
    ab = float(sched.alpha_bars[t])
    alpha = float(sched.alphas[t])
    return (z_t + eps_pred * (-beta / np.sqrt(1.0 - ab))) * (1.0 / np.sqrt(alpha))


def ddim_step(z_t, eps_pred, t: int, t_prev: int, sched: NoiseSchedule,
              eta: float = 0.0, rng: np.random.Generator | None = None,
              clip_range: tuple[float, float] | None = None):
    """One reverse jump t -> t_prev.

    Reconstructs z0_hat from the noise prediction, then re-noises to the
    target step.  eta = 0 draws nothing; eta > 0 needs an explicit rng.
    ``clip_range`` bounds the reconstructed z0_hat before re-noising; pass
    the latent range when it is known a priori (imperfect predictors get a
    1/sqrt(alpha_bar) error amplification at high t otherwise, and the
    chain drifts out of the trained distribution).  A z0 already inside
    the range is untouched, so exact-recovery algebra is preserved.
    """
    if not 0 <= t < sched.t_train:
        raise UsageError(f"ddim_step: t={t} outside [0, {sched.t_train})")
    if not 0 <= t_prev < t:
        raise UsageError(f"ddim_step: need 0 <= t_prev < t, got t_prev={t_prev}, t={t}")
    if eta < 0:
        raise UsageError(f"ddim_step: eta must be >= 0, got {eta}")
    ab_t = float(sched.alpha_bars[t])
    ab_p = sched.alpha_bar_target(t_prev)
    z0_hat = (z_t + eps_pred * (-np.sqrt(1.0 - ab_t))) * (1.0 / np.sqrt(ab_t))
    if clip_range is not None:
        lo, hi = clip_range
        if not lo < hi:
            raise UsageError(f"ddim_step: bad clip_range {clip_range}")
        if isinstance(z0_hat, Tensor):
            raise UsageError("ddim_step: clip_range supports array latents only")
        z0_hat = np.clip(z0_hat, lo, hi)
    sig = sched.sigma(t, t_prev, eta)
    out = z0_hat * np.sqrt(ab_p) + eps_pred * np.sqrt(max(1.0 - ab_p - sig * sig, 0.0))
    if sig > 0.0:
        if rng is None:
            raise UsageError("ddim_step: eta > 0 requires an rng")
        out = out + sig * rng.standard_normal(np.shape(out.data if isinstance(out, Tensor) else out))
    return out


def diffusion_loss(eps_pred: Tensor, eps_true) -> Tensor:
    """Mean squared error between predicted and true noise."""
    target = eps_true if isinstance(eps_true, Tensor) else Tensor(eps_true)
    if eps_pred.shape != target.shape:
        raise UsageError(f"diffusion_loss: {eps_pred.shape} vs {target.shape}")
    diff = eps_pred - target
    return (diff * diff).mean()


# -- sampling -----------------------------------------------------------------


def step_grid(t_train: int, steps: int) -> list[int]:
    """Evenly spaced step indices, descending, always touching T-1 and 0."""
    if steps < 1:
        raise UsageError(f"steps must be >= 1, got {steps}")
    pts = np.floor(np.linspace(0, t_train - 1, steps)).astype(np.int64)
    grid = sorted(set(pts.tolist()) | {0, t_train - 1}, reverse=True)
    return grid


def sample_latent(predict, shape: tuple[int, ...], steps: int, seed: int,
                  sched: NoiseSchedule, eta: float = 0.0,
                  clip_range: tuple[float, float] | None = None) -> np.ndarray:
    """Run the reverse chain from seeded gaussian noise; returns the final z.

    ``predict(z_t, t) -> eps_hat`` is evaluated once per grid transition.
    Fully deterministic for a given (seed, weights) when eta == 0.
    """
    z = stream(seed, "sample", "init").standard_normal(shape)
    grid = step_grid(sched.t_train, steps)
    with T.no_grad():
        for t, t_prev in zip(grid[:-1], grid[1:]):
            eps_hat = predict(Tensor(z), t)
            eps = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
            if eps.shape != z.shape:
                raise UsageError(f"sample: predictor returned {eps.shape}, expected {z.shape}")
            rng = stream(seed, "sample", "step", t) if eta > 0.0 else None
            z = ddim_step(z, eps, t, t_prev, sched, eta=eta, rng=rng,
                          clip_range=clip_range)
    if not np.all(np.isfinite(z)):
        raise NumericError("sample: non-finite latent")
    return z


def sample(denoiser, cond: Tensor, steps: int, seed: int, sched: NoiseSchedule,
           d_max: float, eta: float = 0.0) -> DepthMap:
    """Generate a dense depth map conditioned on guidance features."""
    if cond.ndim != 3:
        raise UsageError(f"sample: cond must be [C,H,W], got {cond.shape}")
    h, w = cond.shape[1], cond.shape[2]
    predict = denoiser.predict_noise if hasattr(denoiser, "predict_noise") else denoiser

    def step_fn(z_t: Tensor, t: int) -> Tensor:
        return predict(z_t, t, cond)

    # The normalized-depth latent lives in [-1, 1] by construction, so the
    # chain may bound every intermediate z0_hat to that range.
    z = sample_latent(step_fn, (1, 1, h, w), steps, seed, sched, eta=eta,
                      clip_range=(-1.0, 1.0))
    meters = np.clip(denormalize_depth(z[0, 0], d_max), 0.0, d_max)
    return DepthMap.dense(meters)
