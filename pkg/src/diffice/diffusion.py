"""DDPM noise schedules, closed-form forward/reverse maths, the U-Net denoiser and its training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)

BETA_START = 1e-4
BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """A (possibly re-spaced) DDPM schedule indexed by 1-based step ``t``.

    ``timesteps[t-1]`` is the training-schedule step that index ``t`` stands for;
    it is what the denoiser is conditioned on.
    """

    T_train: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    timesteps: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def sampling_steps(self) -> np.ndarray:
        return self.timesteps

    @property
    def alpha_bar_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bar[:-1]])

    @property
    def posterior_variance(self) -> np.ndarray:
        return self.beta * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")
        return t

    def ab(self, t: int) -> float:
        return float(self.alpha_bar[self.check_t(t) - 1])

    def b(self, t: int) -> float:
        return float(self.beta[self.check_t(t) - 1])

    def sigma2(self, t: int) -> float:
        return float(self.posterior_variance[self.check_t(t) - 1])

    def model_t(self, t: int) -> int:
        return int(self.timesteps[self.check_t(t) - 1])


def build_schedule(T_train: int = 1000, kind: str = "linear", beta_start: float = BETA_START,
                   beta_end: float = BETA_END) -> NoiseSchedule:
    if T_train < 2:
        raise ValueError(f"T_train must be >= 2, got {T_train}")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    beta = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    return NoiseSchedule(T_train, beta, np.cumprod(1.0 - beta), np.arange(1, T_train + 1))


def respace(schedule: NoiseSchedule, T_sample: int) -> NoiseSchedule:
    """Keep ``T_sample`` evenly spread steps (always including the last) and re-derive beta."""
    T_src = schedule.T
    if not 1 <= T_sample <= T_src:
        raise ValueError(f"T_sample must be in 1..{T_src}, got {T_sample}")
    idx = np.array([(i * T_src + T_sample - 1) // T_sample for i in range(1, T_sample + 1)])
    alpha_bar = schedule.alpha_bar[idx - 1].copy()
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta = 1.0 - alpha_bar / prev
    return NoiseSchedule(schedule.T_train, beta, alpha_bar, schedule.timesteps[idx - 1].copy())


def _check_same_shape(op: str, a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise T.ShapeError(f"{op}: shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_sample(x0, t: int, epsilon, schedule: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _check_same_shape("forward_sample", x0, epsilon)
    ab = schedule.ab(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * epsilon


def one_step_denoise(x_t, t: int, eps_hat, schedule: NoiseSchedule):
    """Invert the forward kernel for x0 given a noise estimate. Works on arrays and Tensors."""
    _check_same_shape("one_step_denoise", x_t, eps_hat)
    ab = schedule.ab(t)
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) * (1.0 / math.sqrt(ab))


def predict_mu(x_t, t: int, eps_hat, schedule: NoiseSchedule, beta: float | None = None):
    _check_same_shape("predict_mu", x_t, eps_hat)
    ab = schedule.ab(t)
    b = schedule.b(t) if beta is None else beta
    return (x_t - (b / math.sqrt(1.0 - ab)) * eps_hat) * (1.0 / math.sqrt(1.0 - b))


def posterior_mean_from_x0(x_t, t: int, x0_hat, schedule: NoiseSchedule):
    """Mean of q(x_{t-1} | x_t, x0) written in terms of the clean estimate."""
    ab = schedule.ab(t)
    ab_prev = float(schedule.alpha_bar_prev[schedule.check_t(t) - 1])
    b = schedule.b(t)
    c0 = math.sqrt(ab_prev) * b / (1.0 - ab)
    ct = math.sqrt(1.0 - b) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * x0_hat + ct * x_t


# -- noise sources ------------------------------------------------------------
def draw_normal(rng, shape, dtype=np.float32) -> np.ndarray:
    """Standard normal draws; a sequence of generators draws one batch element each."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape, dtype=dtype)
    rngs = list(rng)
    if len(rngs) != shape[0]:
        raise ValueError(f"need one generator per batch element ({shape[0]}), got {len(rngs)}")
    return np.stack([g.standard_normal(shape[1:], dtype=dtype) for g in rngs])


def sample_step(mean: np.ndarray, t: int, schedule: NoiseSchedule, rng) -> np.ndarray:
    """Draw x_{t-1} ~ N(mean, Sigma_t); the final step (t=1) is noise-free."""
    if t == 1:
        return mean
    z = draw_normal(rng, mean.shape, mean.dtype)
    return mean + math.sqrt(schedule.sigma2(t)) * z


def predict_eps(model, x_t: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    with no_grad():
        return model(Tensor(x_t), schedule.model_t(t)).data


def reverse_step(x_t: np.ndarray, t: int, model, schedule: NoiseSchedule, rng,
                 eps_hat: np.ndarray | None = None) -> np.ndarray:
    schedule.check_t(t)
    eps = predict_eps(model, x_t, t, schedule) if eps_hat is None else eps_hat
    return sample_step(predict_mu(x_t, t, eps, schedule), t, schedule, rng)


def sample(model, schedule: NoiseSchedule, shape, rng, x_T: np.ndarray | None = None) -> np.ndarray:
    """Unguided ancestral sampling from pure noise; clamps only the final output."""
    x = draw_normal(rng, shape) if x_T is None else x_T
    for t in range(schedule.T, 0, -1):
        x = reverse_step(x, t, model, schedule, rng)
    return np.clip(x, -1.0, 1.0)


# -- denoiser -----------------------------------------------------------------
def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


class UNetDenoiser(nn.Module):
    """Three-level U-Net predicting noise; the timestep enters as a per-stage channel bias."""

    def __init__(self, rng: np.random.Generator, widths: Sequence[int] = (16, 32, 32), emb_dim: int = 32,
                 dtype=np.float32):
        c1, c2, c3 = widths
        self.widths = tuple(widths)
        self.emb_dim = emb_dim
        self.temb = nn.Linear(emb_dim, 2 * emb_dim, rng, dtype=dtype)
        self.temb_proj = [nn.Linear(2 * emb_dim, c, rng, gain=0.5, dtype=dtype) for c in (c1, c2, c3, c2, c1)]
        self.inc = nn.Conv2d(1, c1, 3, rng, dtype=dtype)
        self.down1 = nn.Conv2d(c1, c1, 3, rng, dtype=dtype)
        self.down2a = nn.Conv2d(c1, c2, 3, rng, dtype=dtype)
        self.down2b = nn.Conv2d(c2, c2, 3, rng, dtype=dtype)
        self.mid_a = nn.Conv2d(c2, c3, 3, rng, dtype=dtype)
        self.mid_b = nn.Conv2d(c3, c3, 3, rng, dtype=dtype)
        self.up2a = nn.Conv2d(c3 + c2, c2, 3, rng, dtype=dtype)
        self.up2b = nn.Conv2d(c2, c2, 3, rng, dtype=dtype)
        self.up1 = nn.Conv2d(c2 + c1, c1, 3, rng, dtype=dtype)
        self.out = nn.Conv2d(c1, 1, 3, rng, gain=0.1, dtype=dtype)

    def descriptor(self) -> dict:
        return {"arch": "unet3", "widths": list(self.widths), "emb_dim": self.emb_dim}

    def __call__(self, x: Tensor, t) -> Tensor:
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        emb = Tensor(timestep_embedding(t, self.emb_dim).astype(x.dtype))
        e = T.relu(self.temb(emb))

        def bias(i):
            c = self.temb_proj[i].weight.shape[1]
            return T.reshape(self.temb_proj[i](e), (n, 1, 1, c))

        h0 = T.relu(self.inc(x))
        h1 = T.relu(self.down1(h0) + bias(0))
        h = T.avg_pool2d(h1)
        h = T.relu(self.down2a(h) + bias(1))
        h2 = T.relu(self.down2b(h))
        h = T.avg_pool2d(h2)
        h = T.relu(self.mid_a(h) + bias(2))
        h = T.relu(self.mid_b(h))
        h = T.concat([T.upsample_nearest(h), h2], axis=-1)
        h = T.relu(self.up2a(h) + bias(3))
        h = T.relu(self.up2b(h))
        h = T.concat([T.upsample_nearest(h), h1], axis=-1)
        h = T.relu(self.up1(h) + bias(4))
        return self.out(h)


@dataclass
class DenoiserHyper:
    iterations: int = 4000
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.0
    warmup: int = 100
    widths: tuple[int, int, int] = (16, 32, 32)
    emb_dim: int = 32
    init_seed: int = 0


@dataclass
class TrainResult:
    model: nn.Module
    losses: list[float] = field(default_factory=list)


def lr_at(step: int, hyper) -> float:
    """Linear warmup then cosine decay to 10% of the peak rate."""
    if hyper.warmup and step < hyper.warmup:
        return hyper.lr * (step + 1) / hyper.warmup
    span = max(1, hyper.iterations - hyper.warmup)
    frac = min(1.0, (step - hyper.warmup) / span)
    return hyper.lr * (0.1 + 0.9 * 0.5 * (1.0 + np.cos(np.pi * frac)))


def _as_nhwc(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    return images[..., None] if images.ndim == 3 else images


def train_denoiser(images: np.ndarray, schedule: NoiseSchedule, hyper: DenoiserHyper,
                   rng: np.random.Generator, progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Fit eps_theta by mean-squared error on uniformly drawn training steps."""
    data = _as_nhwc(images)
    if len(data) == 0:
        raise ValueError("train_denoiser: empty dataset")
    model = UNetDenoiser(np.random.default_rng(hyper.init_seed), hyper.widths, hyper.emb_dim)
    opt = nn.Adam(model.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    losses: list[float] = []
    for it in range(hyper.iterations):
        idx = rng.integers(0, len(data), size=hyper.batch_size)
        x0 = data[idx]
        t = rng.integers(1, schedule.T + 1, size=hyper.batch_size)
        eps = rng.standard_normal(x0.shape, dtype=np.float32)
        ab = schedule.alpha_bar[t - 1].astype(np.float32)[:, None, None, None]
        x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
        try:
            pred = model(Tensor(x_t), schedule.timesteps[t - 1])
            loss = T.mean(T.square(pred - Tensor(eps)))
        except NonFiniteError as exc:
            raise NonFiniteError(f"train_denoiser diverged at iteration {it}: {exc}") from None
        if not np.isfinite(loss.item()):
            raise NonFiniteError(f"train_denoiser diverged at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step(lr_at(it, hyper))
        losses.append(loss.item())
        if progress is not None:
            progress(it, losses[-1])
    return TrainResult(model, losses)


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return v
    w = max(1, min(window, len(v)))
    return np.convolve(v, np.ones(w) / w, mode="valid")
