"""Reward-guided ancestral sampling.

Early steps tilt the student's clean-token logits along the gradient of the
discriminator reward with respect to a relaxed one-hot input. Late steps draw
M candidate transitions and keep one with probability softmax(reward).
With h = 0 and M = 1 this is exactly plain ancestral sampling.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .diffusion import NoiseSchedule, posterior_probs, sample_categorical, time_grid
from .distill import masked_mean
from .models import apply_carry_over


@dataclass(frozen=True)
class SamplerConfig:
    nfe: int = 8
    split: float = 0.5
    h_max: float = 30.0
    candidates: int = 4
    temperature: float = 1.0
    # -1 steers towards teacher-like states (low log q_student / q_teacher)
    guidance_sign: float = -1.0
    seed: int = 0

    def __post_init__(self):
        if self.nfe < 1:
            raise ValueError("nfe must be at least 1")
        if not 0.0 <= self.split <= 1.0:
            raise ValueError("split must lie in [0, 1]")
        if self.h_max < 0 or self.candidates < 1 or self.temperature <= 0:
            raise ValueError("invalid sampler config")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def tilt_steps(self) -> int:
        return math.ceil(self.split * self.nfe)

    def h_schedule(self) -> np.ndarray:
        """Per-step tilt strength: linear ramp 0 -> h_max over the tilt phase, then 0."""
        h = np.zeros(self.nfe)
        n = self.tilt_steps
        if n:
            h[:n] = np.linspace(0.0, self.h_max, n) if n > 1 else 0.0
        return h


def relaxed_reward(disc, x_relaxed, t, masked: np.ndarray) -> T.Tensor:
    """Per-sequence mean log-odds over ``masked`` positions for a (B, L, K) relaxed input."""
    x_relaxed = x_relaxed if isinstance(x_relaxed, T.Tensor) else T.Tensor(x_relaxed)
    b = x_relaxed.shape[0]
    lg = disc.logits(x_relaxed, np.broadcast_to(t, (b,)))
    w = masked.astype(np.float64)
    return T.tsum(lg * (w / np.maximum(w.sum(-1, keepdims=True), 1.0)), axis=-1)


def reward_gradient(disc, z: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
    """(reward (B,), d reward / d one-hot input (B, L, K)); zero gradient if nothing is masked."""
    z = np.asarray(z)
    k = disc.config.vocab_size
    onehot = T.Tensor(np.eye(k)[z], requires_grad=True)
    masked = z == disc.config.mask_index
    r = relaxed_reward(disc, onehot, t, masked)
    T.tsum(r).backward()
    grad = onehot.grad if onehot.grad is not None else np.zeros(onehot.shape)
    for p in disc.params.values():
        p.grad = None
    return r.data, grad


def tilted_denoise(student, disc, z: np.ndarray, t, h: float, sign: float = -1.0) -> np.ndarray:
    """softmax(student logits + h * sign * grad R) over real tokens at masked positions."""
    if h == 0:
        return student.denoise(z, t)
    z = np.asarray(z)
    k = student.config.vocab_size
    tt = np.broadcast_to(t, (z.shape[0],))
    with T.no_grad():
        lp = student.log_probs(z, tt).data
    _, grad = reward_gradient(disc, z, tt)
    logits = lp + h * sign * grad[..., : k - 1]
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    probs = np.zeros(z.shape + (k,))
    probs[..., : k - 1] = e / e.sum(axis=-1, keepdims=True)
    return apply_carry_over(probs, z, k - 1)


def candidate_rewards(disc, cands: np.ndarray, t: float) -> np.ndarray:
    """(M, B) rewards. Masked-position average; at the terminal knot (no MASK left)
    the clean sequence is scored over all positions; otherwise unmasked candidates get 0."""
    mcount, b, length = cands.shape
    flat = cands.reshape(mcount * b, length)
    with T.no_grad():
        lg = disc.logits(flat, np.full(mcount * b, t)).data
    masked = flat == disc.config.mask_index
    r = masked_mean(lg, masked)
    if t <= 0.0:
        r = np.where(np.isnan(r), lg.mean(axis=-1), r)
    return np.nan_to_num(r, nan=0.0).reshape(mcount, b)


def rerank_select(cands: np.ndarray, disc, t: float, rng: np.random.Generator,
                  temperature: float = 1.0, sign: float = -1.0) -> tuple[np.ndarray, np.ndarray]:
    """Pick one of M candidates per sequence with probability softmax(sign * R / temperature).

    Returns (selected (B, L), chosen index (B,)). M = 1 consumes no randomness.
    """
    cands = np.asarray(cands)
    if cands.shape[0] == 1:
        return cands[0], np.zeros(cands.shape[1], dtype=np.int64)
    scores = sign * candidate_rewards(disc, cands, t) / temperature  # (M, B)
    return select_by_scores(cands, scores, rng)


def select_by_scores(cands: np.ndarray, scores: np.ndarray, rng: np.random.Generator):
    p = np.exp(scores - scores.max(axis=0, keepdims=True))
    p /= p.sum(axis=0, keepdims=True)
    idx = sample_categorical(p.T, rng.random(cands.shape[1]))
    return cands[idx, np.arange(cands.shape[1])], idx


def rgas_sample(student, disc, cfg: SamplerConfig, schedule: NoiseSchedule,
                rng: np.random.Generator, batch: int, trace: list | None = None) -> np.ndarray:
    m = student.config.mask_index
    z = np.full((batch, student.config.length), m, dtype=np.int64)
    grid = time_grid(cfg.nfe)
    hs = cfg.h_schedule()
    for n in range(cfg.nfe):
        t, s = grid[n], grid[n + 1]
        tilt_phase = n < cfg.tilt_steps
        if tilt_phase:
            probs = tilted_denoise(student, disc, z, t, hs[n], cfg.guidance_sign)
            mcount = 1
        else:
            probs = student.denoise(z, t)
            mcount = cfg.candidates
        post = posterior_probs(z, probs, s, t, schedule, m)
        u = rng.random((mcount,) + z.shape)
        cands = np.where(z == m, sample_categorical(post[None], u), z)
        z_next, chosen = rerank_select(cands, disc, s, rng, cfg.temperature, cfg.guidance_sign)
        if trace is not None:
            trace.append({"step": n, "t": float(t), "s": float(s), "h": float(hs[n]) if tilt_phase else 0.0,
                          "candidates": mcount, "masked": int((z_next == m).sum()),
                          "chosen": chosen.tolist()})
        z = z_next
    return z
