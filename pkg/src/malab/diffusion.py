"""Noise schedule, forward corruption, training loop, and sampler.

The forward process is z_t = x + sigma(t) * eps with the linear schedule
sigma(t) = t on [0, sigma_max]. Sampling runs the probability-flow ODE with
first-order (Euler) steps on the discretization t_i = sigma_max * (1 - i/T).

A planar Gaussian mixture doubles as the synthetic task and as an analytic
verification oracle: its posterior mean E[x | z_t] is closed-form, which
yields an exact noise predictor the sampler can be checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .dit import DiTWeights, forward_batch


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear sigma(t) = t schedule discretized into `steps` intervals."""

    sigma_max: float = 3.0
    steps: int = 40

    def __post_init__(self):
        if self.sigma_max <= 0:
            raise ValueError("sigma_max must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def sigma(self, t: float) -> float:
        if t < 0 or t > self.sigma_max:
            raise ValueError(f"t={t} outside [0, {self.sigma_max}]")
        return float(t)

    def times(self) -> np.ndarray:
        """t_i = sigma_max * (1 - i/T) for i = 0..T; t_0 = sigma_max, t_T = 0."""
        i = np.arange(self.steps + 1)
        return self.sigma_max * (1.0 - i / self.steps)


def forward_noise(x, t: float, eps):
    """Corrupt x to z_t = x + sigma(t) * eps. Accepts tensors or arrays."""
    xt = nx._as_tensor(x)
    et = nx._as_tensor(eps)
    if xt.shape != et.shape:
        raise nx.ShapeMismatchError(f"forward_noise: {xt.shape} vs {et.shape}")
    if t < 0:
        raise ValueError(f"forward_noise: negative t={t}")
    out = nx.add(xt, nx.mul(et, Tensor(np.float64(t))))
    return out if isinstance(x, Tensor) else out.array


@dataclass(frozen=True)
class GMMSpec:
    """Planar Gaussian mixture: isotropic components with a shared scale."""

    means: np.ndarray          # (K, 2)
    scale: float               # shared component std
    weights: np.ndarray        # (K,), sums to 1

    def __post_init__(self):
        object.__setattr__(self, "means", np.asarray(self.means, dtype=np.float64))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        if self.means.ndim != 2 or self.means.shape[1] != 2:
            raise ValueError("means must be (K, 2)")
        if self.scale < 0:
            raise ValueError("scale must be nonnegative")
        if self.weights.shape != (self.means.shape[0],):
            raise ValueError("weights must match component count")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 within 1e-12")

    @property
    def num_components(self) -> int:
        return self.means.shape[0]

    def component(self, i: int) -> "GMMSpec":
        """Single-component restriction (conditional-class oracle)."""
        return GMMSpec(self.means[i:i + 1].copy(), self.scale, np.array([1.0]))

    def sample(self, rng: np.random.Generator, n: int
               ) -> tuple[np.ndarray, np.ndarray]:
        """Draw n points; returns (points (n, 2), component ids (n,))."""
        comp = rng.choice(self.num_components, size=n, p=self.weights)
        pts = self.means[comp] + self.scale * rng.standard_normal((n, 2))
        return pts, comp


def default_mixture(components: int = 8, scale: float = 0.05) -> GMMSpec:
    """Equal-weight components with means on the unit circle."""
    ang = 2.0 * math.pi * np.arange(components) / components
    means = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return GMMSpec(means, scale, np.full(components, 1.0 / components))


def gmm_posterior_mean(z, t: float, gmm: GMMSpec) -> np.ndarray:
    """Analytic E[x | z_t = z] for x ~ gmm, z = x + sigma(t) * eps.

    Responsibilities are proportional to w_i * N(z; mu_i, (s^2 + t^2) I);
    each component contributes mu_i + s^2/(s^2 + t^2) * (z - mu_i).
    Vectorized over leading axes of z (points live on the last axis).
    """
    if t <= 0:
        raise ValueError(f"gmm_posterior_mean: t must be positive, got {t}")
    z = np.asarray(z, dtype=np.float64)
    pts = z.reshape(-1, 2)
    var = gmm.scale ** 2 + t ** 2
    diff = pts[:, None, :] - gmm.means[None, :, :]           # (n, K, 2)
    logp = np.log(gmm.weights)[None, :] - (diff * diff).sum(-1) / (2.0 * var)
    logp -= logp.max(axis=1, keepdims=True)
    resp = np.exp(logp)
    resp /= resp.sum(axis=1, keepdims=True)
    shrink = gmm.scale ** 2 / var
    cond = gmm.means[None, :, :] + shrink * diff              # (n, K, 2)
    return (resp[:, :, None] * cond).sum(axis=1).reshape(z.shape)


def gmm_noise_oracle(gmm: GMMSpec):
    """Exact noise predictor eps_hat = (z - E[x|z]) / sigma(t), batched like
    the model denoisers: (B, tokens, 2) in, (B, tokens, 2) out, per token."""

    def denoise(z: np.ndarray, t: float, c: int) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return (z - gmm_posterior_mean(z, t, gmm)) / t

    return denoise


def euler_sample(denoiser, schedule: NoiseSchedule, c: int, seed: int,
                 count: int, shape: tuple[int, int]) -> np.ndarray:
    """Deterministic probability-flow sampling.

    Starts at z ~ N(0, sigma_max^2) and for each step computes
    x_hat = z - sigma(t_i) * eps_hat(z, t_i, c), then
    z <- x_hat + sigma(t_{i+1}) * (z - x_hat) / sigma(t_i).
    Returns (count, tokens, data_dim).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    ts = schedule.times()
    z = schedule.sigma_max * rng.standard_normal((count,) + tuple(shape))
    for i in range(schedule.steps):
        eps = np.asarray(denoiser(z, float(ts[i]), c), dtype=np.float64)
        if eps.shape != z.shape:
            raise nx.ShapeMismatchError(
                f"denoiser returned {eps.shape}, expected {z.shape}")
        x_hat = z - ts[i] * eps
        z = x_hat + ts[i + 1] * (z - x_hat) / ts[i]
    return z


# ---------------------------------------------------------------------------
# training


class Adam:
    """First/second-moment adaptive updates, applied in place."""

    def __init__(self, params: list[Tensor], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros(p.shape) for p in params]
        self._v = [np.zeros(p.shape) for p in params]

    def step(self, grads: dict[Tensor, Tensor]):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = grads[p].array
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.array -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def sample_task_batch(gmm: GMMSpec, config, rng: np.random.Generator,
                      batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Class-conditional batch: class c picks the mixture component, and the
    sample's tokens are i.i.d. draws from that component.

    Returns x (B, tokens, 2) and class ids (B,). Class ids coincide with
    component indices; the null id is never drawn here.
    """
    comp = rng.choice(gmm.num_components, size=batch_size, p=gmm.weights)
    x = gmm.means[comp][:, None, :] + gmm.scale * rng.standard_normal(
        (batch_size, config.tokens, 2))
    return x, comp.astype(np.intp)


def training_step(weights: DiTWeights, batch: tuple[np.ndarray, np.ndarray],
                  rng: np.random.Generator, schedule: NoiseSchedule,
                  optimizer: Adam, cond_drop_prob: float = 0.1,
                  _forward=None) -> float:
    """One denoising step: corrupt the batch, predict the injected noise,
    take the mean-squared-error gradient step.

    Each sample gets its own t ~ U(0, sigma_max] and fresh Gaussian noise;
    with probability `cond_drop_prob` a sample's condition is replaced by
    the null id so the unconditional branch gets trained too.
    """
    x, c = batch
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.intp)
    if x.shape[0] == 0:
        raise ValueError("training_step: empty batch")
    B = x.shape[0]
    null_id = weights.config.null_class_id

    ts = schedule.sigma_max * (1.0 - rng.random(B))       # uniform over (0, sigma_max]
    eps = rng.standard_normal(x.shape)
    drop = rng.random(B) < cond_drop_prob
    cs = np.where(drop, null_id, c)
    z = x + ts[:, None, None] * eps

    if _forward is None:
        pred, _ = forward_batch(weights, z, ts, cs)
    else:
        pred = _forward(z, ts, cs)
    diff = nx.sub(pred, Tensor(eps))
    loss = nx.mean_all(nx.mul(diff, diff))

    params = weights.parameters()
    grads = nx.grad_of(loss, params)
    optimizer.step(grads)
    return loss.item()


def train(weights: DiTWeights, gmm: GMMSpec, schedule: NoiseSchedule,
          steps: int, batch_size: int = 32, lr: float = 3e-4,
          seed: int = 0, cond_drop_prob: float = 0.1,
          log_every: int = 0) -> list[float]:
    """Full training run; returns the per-step loss history."""
    rng = np.random.default_rng(seed)
    optimizer = Adam(weights.parameters(), lr=lr)
    losses = []
    for step in range(steps):
        batch = sample_task_batch(gmm, weights.config, rng, batch_size)
        loss = training_step(weights, batch, rng, schedule, optimizer,
                             cond_drop_prob=cond_drop_prob)
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            recent = sum(losses[-log_every:]) / log_every
            print(f"step {step + 1:>6}/{steps}  loss {recent:.5f}")
    return losses
