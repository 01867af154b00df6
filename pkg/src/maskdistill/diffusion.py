"""Absorbing-state (masking) diffusion: schedule, corruption, posterior, sampler."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DenoiseFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Character inventory with MASK at the last index."""

    symbols: tuple[str, ...]
    token_to_string: dict = field(init=False, repr=False, compare=False)
    string_to_token: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")
        t2s = dict(enumerate(self.symbols))
        t2s[len(self.symbols)] = "[MASK]"
        object.__setattr__(self, "token_to_string", t2s)
        object.__setattr__(self, "string_to_token", {s: i for i, s in enumerate(self.symbols)})

    @property
    def size(self) -> int:
        return len(self.symbols) + 1

    @property
    def mask_index(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.string_to_token[c] for c in text], dtype=np.int64)

    def decode(self, tokens, mask_char: str = "_") -> str:
        m = self.mask_index
        return "".join(mask_char if t == m else self.symbols[t] for t in np.asarray(tokens).tolist())


@dataclass(frozen=True)
class NoiseSchedule:
    """Monotone map from time to keep-probability ``alpha``.

    ``log-linear``: alpha = 1 - (1 - eps) t (the MDLM convention).
    ``linear``: alpha = 1 - t. Both are clamped to [eps, 1 - eps] for t > 0;
    alpha(0) is exactly 1 so that the last sampling step unmasks everything.
    """

    kind: str = "log-linear"
    eps_clip: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("linear", "log-linear"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def _slope(self) -> float:
        return 1.0 if self.kind == "linear" else 1.0 - self.eps_clip

    def alpha(self, t):
        t = np.asarray(t, dtype=np.float64)
        _check_time(t)
        a = np.clip(1.0 - self._slope() * t, self.eps_clip, 1.0 - self.eps_clip)
        return np.where(t <= 0.0, 1.0, a)

    def alpha_prime(self, t):
        t = np.asarray(t, dtype=np.float64)
        _check_time(t)
        return np.full_like(t, -self._slope())


def _check_time(t: np.ndarray) -> None:
    if np.any(t < 0.0) or np.any(t > 1.0) or np.any(~np.isfinite(t)):
        raise DomainError("time must lie in [0, 1]")


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator; ``seed`` may be an int or SeedSequence."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(bg) for bg in [rng.bit_generator.jumped(i + 1) for i in range(n)]]


def corrupt(x: np.ndarray, t, schedule: NoiseSchedule, rng: np.random.Generator,
            mask_index: int) -> np.ndarray:
    """Forward kernel: keep each token with prob alpha_t, otherwise MASK.

    ``x`` is (..., L); ``t`` broadcasts against the leading axes.
    """
    x = np.asarray(x)
    if np.any(x == mask_index):
        raise DomainError("clean sequence already contains MASK")
    alpha = np.asarray(schedule.alpha(t), dtype=np.float64)
    alpha = alpha.reshape(alpha.shape + (1,) * (x.ndim - alpha.ndim))
    keep = rng.random(x.shape) < alpha
    return np.where(keep, x, mask_index)


def posterior_probs(z_t, x_pred: np.ndarray, s, t, schedule: NoiseSchedule,
                    mask_index: int) -> np.ndarray:
    """Reverse posterior Q(z_s | z_t, x = x_pred), vectorised over positions.

    ``z_t`` has shape (...,), ``x_pred`` shape (..., K) with zero MASK mass.
    Returns (..., K) distributions.
    """
    z_t = np.asarray(z_t)
    x_pred = np.asarray(x_pred, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(s >= t):
        raise DomainError("posterior needs s < t")
    a_s = np.asarray(schedule.alpha(s))
    a_t = np.asarray(schedule.alpha(t))
    if np.any(a_t >= 1.0):
        raise DomainError("alpha_t = 1 leaves the masked posterior undefined")
    a_s = a_s.reshape(a_s.shape + (1,) * (z_t.ndim - a_s.ndim))
    a_t = a_t.reshape(a_t.shape + (1,) * (z_t.ndim - a_t.ndim))
    k = x_pred.shape[-1]
    p_mask = (1.0 - a_s) / (1.0 - a_t)
    w_tok = (a_s - a_t) / (1.0 - a_t)
    out = w_tok[..., None] * x_pred
    out[..., mask_index] = p_mask
    carry = z_t != mask_index
    if np.any(carry):
        onehot = np.eye(k)[np.where(carry, z_t, 0)]
        out = np.where(carry[..., None], onehot, out)
    return out


def sample_categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw along the last axis using supplied uniforms ``u``.

    Entries with zero mass are never selected, even under rounding.
    """
    cdf = np.cumsum(probs, axis=-1)
    target = u * cdf[..., -1]
    idx = (target[..., None] >= cdf).sum(axis=-1)
    # u = 1 would run past the end; fall back to the last index with mass
    last = probs.shape[-1] - 1 - np.argmax(probs[..., ::-1] > 0, axis=-1)
    return np.minimum(idx, last)


def ancestral_step(z_t: np.ndarray, x_pred: np.ndarray, s, t, schedule: NoiseSchedule,
                   rng: np.random.Generator, mask_index: int) -> np.ndarray:
    """One reverse step z_t -> z_s; unmasked positions are copied verbatim."""
    u = rng.random(z_t.shape)
    return _step_with_uniforms(z_t, x_pred, s, t, schedule, u, mask_index)


def _step_with_uniforms(z_t, x_pred, s, t, schedule, u, mask_index):
    probs = posterior_probs(z_t, x_pred, s, t, schedule, mask_index)
    drawn = sample_categorical(probs, u)
    return np.where(z_t == mask_index, drawn, z_t)


def nelbo_weight(t, schedule: NoiseSchedule):
    """alpha'(t) / (1 - alpha(t)); nonpositive."""
    a = np.asarray(schedule.alpha(t))
    if np.any(a >= 1.0):
        raise DomainError("nelbo weight undefined where alpha_t = 1")
    return np.asarray(schedule.alpha_prime(t)) / (1.0 - a)


def time_grid(n_steps: int) -> np.ndarray:
    """Uniform knots 1 = t_N > ... > t_0 = 0."""
    if n_steps < 1:
        raise ValueError("need at least one step")
    return np.linspace(1.0, 0.0, n_steps + 1)


def ancestral_sample(denoise: DenoiseFn, batch: int, length: int, n_steps: int,
                     schedule: NoiseSchedule, rng: np.random.Generator, mask_index: int,
                     trace: list | None = None) -> np.ndarray:
    """Plain ancestral sampling from all-MASK.

    ``denoise(z, t)`` maps (B, L) tokens and (B,) times to (B, L, K) clean-token
    distributions. When ``trace`` is a list, (t, s, z_t, z_s) tuples are appended.
    """
    z = np.full((batch, length), mask_index, dtype=np.int64)
    grid = time_grid(n_steps)
    for t, s in zip(grid[:-1], grid[1:]):
        probs = denoise(z, np.full(batch, t))
        z_next = ancestral_step(z, probs, s, t, schedule, rng, mask_index)
        if trace is not None:
            trace.append((t, s, z, z_next))
        z = z_next
    return z
