"""EDM training objective, noise schedules, and the stochastic churn sampler.

Velocity fields are treated as flat (N, 2) arrays throughout; all geometry
awareness lives in the denoiser closures passed in.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import denoiser as dn
from . import numcore as nc

CLIP_NORM = 5.0


@dataclass
class DiffusionConfig:
    sigma_data: float
    rho: float = 7.0
    sigma_min: float = 0.02
    sigma_max_train: float = 88.0
    sigma_max_sample: float = 80.0
    n_steps: int = 20
    s_churn: float = 2.5
    s_min: float = 0.75
    s_max: float = math.inf
    s_noise: float = 1.05

    def __post_init__(self):
        if not self.sigma_data > 0.0:
            raise ValueError("sigma_data must be positive")
        if not 0.0 < self.sigma_min < min(self.sigma_max_train, self.sigma_max_sample):
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @classmethod
    def from_sigma_data(cls, sigma_data: float, **overrides) -> "DiffusionConfig":
        """Noise bounds scaled to the data scale relative to the 0.5 reference."""
        k = sigma_data / 0.5
        base = dict(sigma_min=0.02 * k, sigma_max_train=88.0 * k,
                    sigma_max_sample=80.0 * k)
        base.update(overrides)
        return cls(sigma_data=sigma_data, **base)


def lambda_weight(sigma: float, sigma_data: float) -> float:
    """Loss weight (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2."""
    if not sigma > 0.0 or not sigma_data > 0.0:
        raise ValueError("sigma and sigma_data must be positive")
    return (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data) ** 2


def _power_interp(t, lo: float, hi: float, rho: float):
    a = hi ** (1.0 / rho)
    b = lo ** (1.0 / rho)
    v = (a + t * (b - a)) ** rho
    # the x**(1/rho)**rho round trip drifts by a ulp; pin the ends so the
    # ladder starts and stops at the configured levels exactly
    return np.where(t <= 0.0, hi, np.where(t >= 1.0, lo, v))


def sampler_sigma_schedule(n: int, cfg: DiffusionConfig) -> np.ndarray:
    """N+1 levels: power-law from sigma_max_sample to sigma_min, then 0."""
    if n < 1:
        raise ValueError("need n >= 1")
    if n == 1:
        return np.array([cfg.sigma_max_sample, 0.0])
    t = np.arange(n) / (n - 1)
    levels = _power_interp(t, cfg.sigma_min, cfg.sigma_max_sample, cfg.rho)
    return np.concatenate([levels, [0.0]])


def sample_train_sigma(u: float, cfg: DiffusionConfig) -> float:
    """Training noise level at quantile u, from sigma_max_train down to sigma_min."""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u must lie in [0, 1], got {u}")
    return float(_power_interp(u, cfg.sigma_min, cfg.sigma_max_train, cfg.rho))


def edm_loss(x0: np.ndarray, noise: np.ndarray, sigma: float, denoise_fn,
             cfg: DiffusionConfig) -> nc.Tensor:
    """lambda(sigma) * mean((D(x0 + sigma*noise, sigma) - x0)^2)."""
    x0 = np.asarray(x0, dtype=np.float64)
    d = denoise_fn(x0 + sigma * np.asarray(noise), sigma)
    err = nc.sub(d, x0.astype(d.data.dtype))
    loss = nc.scale(nc.mean_all(nc.square(err)),
                    lambda_weight(sigma, cfg.sigma_data))
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite training loss at sigma={sigma}")
    return loss


def _denoised(denoise_fn, x, sigma) -> np.ndarray:
    d = denoise_fn(x, sigma)
    return np.asarray(getattr(d, "data", d), dtype=np.float64)


def sample(denoise_fn, shape, cfg: DiffusionConfig, seed: int,
           n_steps: int | None = None) -> np.ndarray:
    """Stochastic churn sampler with Heun correction.

    Integrates dx/dsigma = (x - D(x, sigma)) / sigma from sigma_max to 0;
    the last level is taken as a plain Euler step, which lands exactly on
    the denoiser output.
    """
    n = cfg.n_steps if n_steps is None else int(n_steps)
    sigmas = sampler_sigma_schedule(n, cfg)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape) * sigmas[0]
    gamma_cap = min(cfg.s_churn / n, math.sqrt(2.0) - 1.0)
    for i in range(n):
        s, s_next = float(sigmas[i]), float(sigmas[i + 1])
        gamma = gamma_cap if cfg.s_min <= s <= cfg.s_max else 0.0
        s_hat = s * (1.0 + gamma)
        if gamma > 0.0:
            bump = math.sqrt(s_hat * s_hat - s * s) * cfg.s_noise
            x = x + bump * rng.standard_normal(shape)
        d = _denoised(denoise_fn, x, s_hat)
        slope = (x - d) / s_hat
        if s_next == 0.0:
            x = d
        else:
            x_e = x + (s_next - s_hat) * slope
            d2 = _denoised(denoise_fn, x_e, s_next)
            slope2 = (x_e - d2) / s_next
            x = x + (s_next - s_hat) * 0.5 * (slope + slope2)
        if not np.isfinite(x).all():
            raise FloatingPointError(f"non-finite sampler state after step {i}")
    return x


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainItem:
    """One (graph, angle) training datum with its static denoiser inputs."""
    pack: dn.GraphPack
    inputs: dn.AngleInputs
    x0: np.ndarray  # scaled target field, (N, 2)


@dataclass
class TrainResult:
    trace: list = field(default_factory=list)  # (step, loss, sigma_mean, lr)
    aborted_at: int | None = None


def train(items, store: nc.ParamStore, dconfig: dn.DenoiserConfig,
          cfg: DiffusionConfig, steps: int, *, base_lr: float = 1e-3,
          lr_floor: float = 1e-5, batch_size: int = 2, seed: int = 0,
          trace_every: int = 10, checkpoint_every: int = 0,
          on_checkpoint=None) -> TrainResult:
    """AdamW loop over random (item, sigma, noise) draws.

    Divergence (non-finite or > 1e6 batch loss) aborts: the current params
    are the last good state and are handed to `on_checkpoint` before raising.
    `on_checkpoint(state_dict, step, tag)` tags are 'periodic', 'abort', 'final'.
    """
    if not items:
        raise ValueError("need at least one training item")
    rng = np.random.default_rng(seed)
    opt = nc.AdamW(store)
    result = TrainResult()

    def abort(step):
        # params have not been touched by the failing step yet
        result.aborted_at = step
        if on_checkpoint is not None:
            on_checkpoint(store.state_dict(), step, "abort")
        raise FloatingPointError(f"training diverged at step {step}")

    for step in range(int(steps)):
        lr = nc.cosine_lr(step, steps, base_lr, lr_floor)
        store.zero_grad()
        losses = []
        sigma_sum = 0.0
        for _ in range(batch_size):
            item = items[int(rng.integers(len(items)))]
            sigma = sample_train_sigma(float(rng.uniform()), cfg)
            noise = rng.standard_normal(item.x0.shape)
            fn = lambda x, s: dn.denoise_field(
                item.pack, item.inputs, store, dconfig, cfg.sigma_data, x, s)
            try:
                loss = edm_loss(item.x0, noise, sigma, fn, cfg)
            except FloatingPointError:
                loss = None
            if loss is None or loss.data > 1e6:
                abort(step)
            nc.backward(nc.scale(loss, 1.0 / batch_size))
            losses.append(float(loss.data))
            sigma_sum += sigma
        norm = store.clip_global_norm(CLIP_NORM)
        if not math.isfinite(norm):
            abort(step)
        opt.step(lr)
        if step % trace_every == 0:
            result.trace.append((step, float(np.mean(losses)),
                                 sigma_sum / batch_size, lr))
        if checkpoint_every and on_checkpoint is not None \
                and (step + 1) % checkpoint_every == 0 and step + 1 < steps:
            on_checkpoint(store.state_dict(), step + 1, "periodic")
    if on_checkpoint is not None and steps > 0:
        on_checkpoint(store.state_dict(), int(steps), "final")
    return result


def save_trace(path, trace):
    with open(path, "w") as f:
        f.write("step,loss,sigma_mean,lr\n")
        for step, loss, sigma_mean, lr in trace:
            f.write(f"{step},{float(loss)!r},{float(sigma_mean)!r},"
                    f"{float(lr)!r}\n")
