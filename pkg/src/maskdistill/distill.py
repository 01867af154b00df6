"""Distilling a many-step teacher into a few-step student.

Alternates a discriminator update (student vs teacher samples, both corrupted
to a shared time) with a score-function update of the student that uses the
discriminator log-odds as a reward.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .diffusion import (NoiseSchedule, ancestral_sample, corrupt, make_rng, posterior_probs,
                        sample_categorical, time_grid)
from .models import DenoiserModel, DiscriminatorConfig, DiscriminatorModel, init_student_from_teacher
from .teacher import TrainingAborted, clip_grad_norm

log = logging.getLogger(__name__)

RewardFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DistillConfig:
    group_size: int = 8
    iterations: int = 2000
    student_lr: float = 1e-4
    disc_lr: float = 1e-4
    pi_family: str = "uniform"  # uniform | beta
    pi_a: float = 2.0
    pi_b: float = 5.0
    importance_weight: bool = True
    omega_mode: str = "constant"  # constant | correction
    coupled_time: bool = True
    decompose: bool = True
    advantage: str = "group"  # group (standardize), rloo, raw
    kl_weight: float = 0.05
    entropy_weight: float = 0.0005
    norm_eps: float = 1e-8
    rollout_steps: int = 4
    teacher_steps: int = 32
    teacher_pool: int = 2048
    pool_seed: int = 0  # teacher pool stream, independent of the run seed so runs can share it
    disc_init: str = "teacher"  # teacher | scratch
    disc_loss_positions: str = "all"  # all | masked
    disc_steps: int = 1
    # discriminator-only updates against the initial student before alternating
    disc_warmup: int = 0
    schedule: str = "log-linear"
    t_min: float = 1e-3
    student_betas: tuple = (0.9, 0.999)
    disc_betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    lr_decay: str = "linear"
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group size must be at least 2")
        if self.kl_weight < 0 or self.entropy_weight < 0:
            raise ValueError("regularizer weights must be nonnegative")
        if self.pi_family not in ("uniform", "beta"):
            raise ValueError(f"unknown pi family {self.pi_family!r}")
        if self.pi_family == "beta" and (self.pi_a <= 0 or self.pi_b <= 0):
            raise ValueError("Beta parameters must be positive")
        if self.omega_mode not in ("constant", "correction"):
            raise ValueError(f"unknown omega mode {self.omega_mode!r}")
        if self.advantage not in ("group", "rloo", "raw"):
            raise ValueError(f"unknown advantage mode {self.advantage!r}")
        if self.rollout_steps < 1:
            raise ValueError("rollout needs at least one step")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- time weights

def sample_pi(cfg: DistillConfig, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw n times from pi and return (t, density at t), t kept inside [t_min, 1 - t_min]."""
    if cfg.pi_family == "uniform":
        t = rng.random(n)
    else:
        t = rng.beta(cfg.pi_a, cfg.pi_b, n)
    t = np.clip(t, cfg.t_min, 1.0 - cfg.t_min)
    return t, pi_density(t, cfg)


def pi_density(t, cfg: DistillConfig) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if cfg.pi_family == "uniform":
        return np.ones_like(t)
    a, b = cfg.pi_a, cfg.pi_b
    log_beta = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    return np.exp((a - 1) * np.log(t) + (b - 1) * np.log1p(-t) - log_beta)


def omega_weight(t, schedule: NoiseSchedule, mode: str = "constant") -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if mode == "constant":
        return np.ones_like(t)
    return -schedule.alpha_prime(t) / (1.0 - schedule.alpha(t) + 1e-8)


# ------------------------------------------------------------------- rewards

@dataclass
class RewardGroup:
    t: np.ndarray
    rewards: np.ndarray
    masked: np.ndarray
    mu: float = 0.0
    sigma: float = 0.0
    normalized: np.ndarray = field(default_factory=lambda: np.zeros(0))


def log_odds(p: np.ndarray) -> np.ndarray:
    return np.log(p) - np.log1p(-p)


def estimate_reward(disc: DiscriminatorModel, z_t: np.ndarray, t) -> np.ndarray:
    """Mean discriminator log-odds over masked positions; NaN where nothing is masked."""
    z_t = np.asarray(z_t)
    with T.no_grad():
        lg = disc.logits(z_t, np.broadcast_to(t, (z_t.shape[0],))).data
    return masked_mean(lg, z_t == disc.config.mask_index)


def masked_mean(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    m = mask.sum(axis=-1)
    total = np.where(mask, values, 0.0).sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(m > 0, total / np.maximum(m, 1), np.nan)


def normalize_rewards(rewards: np.ndarray, eps: float = 1e-8) -> tuple[np.ndarray, float, float]:
    """(R - mean) / (population std + eps)."""
    r = np.asarray(rewards, dtype=np.float64)
    # centre relative to the first entry so a constant batch gives exact zeros,
    # then once more to remove the rounding left in the mean
    d = r - r[0]
    shift = d.mean()
    d = d - shift
    d = d - d.mean()
    sigma = float(np.sqrt(np.mean(d * d)))
    return d / (sigma + eps), float(r[0] + shift), sigma


def advantages(rewards: np.ndarray, mode: str, eps: float = 1e-8) -> tuple[np.ndarray, float, float]:
    r = np.asarray(rewards, dtype=np.float64)
    if mode == "group":
        return normalize_rewards(r, eps)
    mu, sigma = float(r.mean()), float(r.std())
    if mode == "rloo":
        g = len(r)
        return (r - mu) * g / (g - 1), mu, sigma
    return r.copy(), mu, sigma


def make_group(t, rewards, masked, mode: str = "group", eps: float = 1e-8) -> RewardGroup:
    norm, mu, sigma = advantages(rewards, mode, eps)
    return RewardGroup(np.asarray(t), np.asarray(rewards), np.asarray(masked), mu, sigma, norm)


# ------------------------------------------------------------------- rollouts

@dataclass
class Rollout:
    """Per-step record of a batched ancestral rollout.

    ``states[k]`` is the state entering step k at time ``t[k]``; ``nxt[k]`` the
    state at ``s[k]``. ``prefix[k]`` flags steps taken before the split knot.
    """

    x: np.ndarray
    states: np.ndarray  # (S, B, L)
    nxt: np.ndarray  # (S, B, L)
    t: np.ndarray  # (S, B)
    s: np.ndarray  # (S, B)
    prefix: np.ndarray  # (S, B) bool
    split: np.ndarray  # (B,)
    mask_index: int = -1

    @property
    def committed(self) -> np.ndarray:
        m = self.mask_index
        return (self.states == m) & (self.nxt != m)


def rollout_grid(n_steps: int, split: np.ndarray | None, batch: int) -> np.ndarray:
    """(B, S+1) descending time knots; the split time, if given, is inserted per row."""
    base = time_grid(n_steps)
    if split is None:
        return np.tile(base, (batch, 1))
    split = np.asarray(split, dtype=np.float64)
    rows = []
    for tau in split:
        if np.any(np.isclose(base, tau, rtol=0, atol=1e-12)):
            tau = tau + 1e-9
        rows.append(np.sort(np.append(base, tau))[::-1])
    return np.stack(rows)


def student_rollout(student, batch: int, n_steps: int, schedule: NoiseSchedule,
                    rng: np.random.Generator, split: np.ndarray | None = None) -> Rollout:
    """Ancestral rollout from all-MASK with per-sequence grids (h = 0, one candidate)."""
    m = student.config.mask_index
    length = student.config.length
    grid = rollout_grid(n_steps, split, batch)
    z = np.full((batch, length), m, dtype=np.int64)
    states, nxt, ts, ss = [], [], [], []
    for k in range(grid.shape[1] - 1):
        t, s = grid[:, k], grid[:, k + 1]
        probs = student.denoise(z, t)
        u = rng.random(z.shape)
        drawn = sample_categorical(posterior_probs(z, probs, s, t, schedule, m), u)
        z_next = np.where(z == m, drawn, z)
        states.append(z)
        nxt.append(z_next)
        ts.append(t)
        ss.append(s)
        z = z_next
    t_arr = np.stack(ts)
    split_arr = np.zeros(batch) if split is None else np.asarray(split, dtype=np.float64)
    prefix = t_arr > split_arr[None, :] + 1e-12 if split is not None else np.zeros_like(t_arr, bool)
    return Rollout(z, np.stack(states), np.stack(nxt), t_arr, np.stack(ss), prefix,
                   split_arr, mask_index=m)


def path_scores(student, roll: Rollout) -> tuple[T.Tensor, T.Tensor, np.ndarray, np.ndarray]:
    """Log-probability of the tokens committed along the rollout, per sequence.

    Returns (path log-prob (B,), stacked log-probs (S*B, L, K-1), stacked states,
    prefix share (B,) for logging). One forward pass with gradient over all states.
    """
    S, B, L = roll.states.shape
    Z = roll.states.reshape(S * B, L)
    tt = roll.t.reshape(S * B)
    lp = student.log_probs(Z, tt)
    target = np.where(roll.committed, roll.nxt, 0).reshape(S * B, L)
    picked = T.take_last(lp, target) * roll.committed.reshape(S * B, L).astype(np.float64)
    per_step = T.tsum(picked, axis=-1).reshape(S, B)
    total = T.tsum(per_step, axis=0)
    prefix = (per_step.data * roll.prefix).sum(axis=0)
    return total, lp, Z, prefix


def forward_kl_and_entropy(lp_student: T.Tensor, teacher, Z: np.ndarray, tt: np.ndarray,
                           mask_index: int) -> tuple[T.Tensor, T.Tensor]:
    """Mean over masked positions of KL(teacher || student) and of student entropy."""
    masked = (Z == mask_index).astype(np.float64)
    n = max(masked.sum(), 1.0)
    with T.no_grad():
        lp_t = teacher.log_probs(Z, tt).data
    p_t = np.exp(lp_t)
    kl_pos = (p_t * lp_t).sum(-1) - T.tsum(lp_student * p_t, axis=-1)
    p_s = T.exp(lp_student)
    ent_pos = -T.tsum(p_s * lp_student, axis=-1)
    return T.tsum(kl_pos * masked) / n, T.tsum(ent_pos * masked) / n


def surrogate_loss(scores: T.Tensor, coef: np.ndarray) -> T.Tensor:
    """mean_i coef_i * score_i with coef treated as a constant."""
    return T.tsum(scores * coef) / len(coef)


# -------------------------------------------------------------- discriminator

def discriminator_loss(disc: DiscriminatorModel, z_student: np.ndarray, z_teacher: np.ndarray,
                       t: np.ndarray, positions: str = "all", update_norm: bool = True) -> T.Tensor:
    """-(1/G) sum_i [avg log D(z_i) + avg log(1 - D(z'_i))]; equals 2 ln 2 at D = 1/2."""
    g = len(z_student)
    z = np.concatenate([z_student, z_teacher])
    tt = np.concatenate([t, t])
    lg = disc.logits(z, tt, update_norm=update_norm)
    y = np.concatenate([np.ones((g, z.shape[1])), np.zeros((g, z.shape[1]))])
    per_pos = T.bce_with_logits(lg, y)
    if positions == "masked":
        w = (z == disc.config.mask_index).astype(np.float64)
    else:
        w = np.ones(z.shape)
    w = w / np.maximum(w.sum(axis=1, keepdims=True), 1.0)
    return T.tsum(per_pos * w) / g


def discriminator_step(disc, opt: T.AdamW, z_student, z_teacher, t, positions: str = "all",
                       lr: float | None = None, grad_clip: float = 0.0) -> float:
    opt.zero_grad()
    loss = discriminator_loss(disc, z_student, z_teacher, t, positions)
    val = loss.item()
    if not np.isfinite(val):
        raise TrainingAborted("non-finite discriminator loss", {"t": np.asarray(t).tolist()})
    loss.backward()
    if grad_clip:
        clip_grad_norm(opt.params, grad_clip)
    opt.step(lr=lr)
    return val


# ---------------------------------------------------------------- teacher data

class TeacherPool:
    """Fixed pool of teacher samples drawn once at many NFEs, then resampled."""

    def __init__(self, samples: np.ndarray):
        self.samples = np.asarray(samples)

    @classmethod
    def generate(cls, teacher, size: int, n_steps: int, schedule: NoiseSchedule,
                 rng: np.random.Generator, chunk: int = 256) -> "TeacherPool":
        out = []
        for a in range(0, size, chunk):
            b = min(chunk, size - a)
            out.append(ancestral_sample(teacher.denoise, b, teacher.config.length, n_steps,
                                        schedule, rng, teacher.config.mask_index))
        return cls(np.concatenate(out))

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.samples[rng.integers(0, len(self.samples), n)]


# --------------------------------------------------------------------- trainer

def build_discriminator(teacher: DenoiserModel, mode: str = "teacher", seed: int = 0) -> DiscriminatorModel:
    c = teacher.config
    dc = DiscriminatorConfig(c.vocab_size, c.length, c.d_model, c.n_layers, c.n_heads,
                             c.mlp_ratio, c.init_std, c.time_embedding)
    disc = DiscriminatorModel(dc, seed=seed)
    if mode == "teacher":
        disc.init_backbone_from(teacher)
    return disc


class DistillTrainer:
    """Holds student, discriminator, frozen teacher and both optimizers."""

    def __init__(self, cfg: DistillConfig, teacher, pool: TeacherPool | None = None,
                 student=None, disc=None, reward_fn: RewardFn | None = None):
        self.cfg = cfg
        self.schedule = NoiseSchedule(cfg.schedule)
        self.teacher = teacher.clone().freeze()
        self.student = student if student is not None else init_student_from_teacher(teacher)
        self.disc = disc if disc is not None else build_discriminator(teacher, cfg.disc_init, cfg.seed + 1)
        self.rng = make_rng([cfg.seed, 11])
        self.pool_rng = make_rng([cfg.seed, 12])
        if pool is None:
            pool = TeacherPool.generate(self.teacher, cfg.teacher_pool, cfg.teacher_steps,
                                        self.schedule, make_rng([cfg.pool_seed, 13]))
        self.pool = pool
        self.reward_fn = reward_fn or (lambda z, t: estimate_reward(self.disc, z, t))
        self.s_opt = T.AdamW(self.student.parameters(), lr=cfg.student_lr, betas=cfg.student_betas,
                             weight_decay=cfg.weight_decay)
        self.d_opt = T.AdamW(self.disc.parameters(), lr=cfg.disc_lr, betas=cfg.disc_betas,
                             weight_decay=cfg.weight_decay)
        self.iteration = 0

    def _lr(self, base: float) -> float:
        if self.cfg.lr_decay == "linear":
            return base * (1.0 - self.iteration / max(self.cfg.iterations, 1))
        return base

    def warmup_discriminator(self, metrics=None) -> list[float]:
        """Fit the discriminator to the frozen initial student for ``disc_warmup`` steps.

        Every step draws fresh student rollouts; a fixed bank gets memorized.
        """
        cfg = self.cfg
        if cfg.disc_warmup <= 0:
            return []
        rng = make_rng([cfg.seed, 14])
        m = self.student.config.mask_index
        losses = []
        for i in range(cfg.disc_warmup):
            t, _ = sample_pi(cfg, rng, cfg.group_size)
            x = student_rollout(self.student, cfg.group_size, cfg.rollout_steps, self.schedule, rng).x
            z = corrupt(x, t, self.schedule, rng, m)
            z_teacher = corrupt(self.pool.draw(cfg.group_size, rng), t, self.schedule, rng, m)
            loss = discriminator_step(self.disc, self.d_opt, z, z_teacher, t, cfg.disc_loss_positions,
                                      cfg.disc_lr, cfg.grad_clip)
            losses.append(loss)
            if metrics is not None:
                metrics.write({"warmup": i, "disc_loss": loss})
        return losses

    def draw_times(self) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        """(reward time t_i, its weight omega/pi, split knot)."""
        cfg = self.cfg
        t, dens = sample_pi(cfg, self.rng, cfg.group_size)
        w = omega_weight(t, self.schedule, cfg.omega_mode)
        if cfg.importance_weight:
            w = w / dens
        if not cfg.decompose:
            split = None
        elif cfg.coupled_time:
            split = t
        else:
            split, _ = sample_pi(cfg, self.rng, cfg.group_size)
        return t, w, split

    def step(self) -> dict:
        cfg = self.cfg
        m = self.student.config.mask_index
        t, w, split = self.draw_times()
        roll = student_rollout(self.student, cfg.group_size, cfg.rollout_steps, self.schedule,
                               self.rng, split)
        x = roll.x
        x_teacher = self.pool.draw(cfg.group_size, self.pool_rng)
        z = corrupt(x, t, self.schedule, self.rng, m)
        z_teacher = corrupt(x_teacher, t, self.schedule, self.rng, m)

        d_loss = 0.0
        for _ in range(cfg.disc_steps):
            d_loss = discriminator_step(self.disc, self.d_opt, z, z_teacher, t,
                                        cfg.disc_loss_positions, self._lr(cfg.disc_lr), cfg.grad_clip)

        rewards = self.reward_fn(z, t)
        info = self.student_step(roll, t, w, z, rewards)
        info.update({"iter": self.iteration, "disc_loss": d_loss})
        self.iteration += 1
        return info

    def student_step(self, roll: Rollout, t, w, z, rewards) -> dict:
        cfg = self.cfg
        m = self.student.config.mask_index
        keep = np.isfinite(rewards)
        if keep.sum() < len(rewards):
            log.debug("dropping %d group entries with no masked position", int((~keep).sum()))
        group = make_group(t[keep], rewards[keep], (z[keep] == m).sum(-1), cfg.advantage, cfg.norm_eps)
        coef = np.zeros(len(rewards))
        if keep.sum() >= 2:
            coef[keep] = w[keep] * group.normalized
        self.s_opt.zero_grad()
        scores, lp, Z, prefix = path_scores(self.student, roll)
        pg = surrogate_loss(scores, coef)
        kl, ent = forward_kl_and_entropy(lp, self.teacher, Z, roll.t.reshape(-1), m)
        obj = pg + kl * cfg.kl_weight - ent * cfg.entropy_weight
        val = obj.item()
        if not np.isfinite(val):
            raise TrainingAborted("non-finite student objective",
                                  {"t": t.tolist(), "rewards": rewards.tolist(), "x": roll.x.tolist()})
        obj.backward()
        if cfg.grad_clip:
            clip_grad_norm(self.s_opt.params, cfg.grad_clip)
        self.s_opt.step(lr=self._lr(cfg.student_lr))
        return {
            "mean_reward": group.mu if keep.any() else None,
            "reward_std": group.sigma if keep.any() else None,
            "student_obj": val,
            "kl_reg": kl.item(),
            "entropy_bonus": ent.item(),
            "prefix_score": float(prefix.mean()),
            "path_score": float(scores.data.mean()),
        }


def distill(cfg: DistillConfig, teacher, metrics=None, out_dir=None, pool: TeacherPool | None = None,
            log_every: int = 100):
    """Run the alternating loop; returns (student, disc, records).

    Checkpoints are flushed to ``out_dir`` at the end, and also on abort.
    """
    from .checkpoint import save_checkpoint

    trainer = DistillTrainer(cfg, teacher, pool)
    warm = trainer.warmup_discriminator(metrics)
    if warm:
        log.info("discriminator warm-up: loss %.4f -> %.4f", np.mean(warm[:50]), np.mean(warm[-50:]))
    records = []

    def flush(tag: str):
        if out_dir is None:
            return
        out = Path(out_dir)
        save_checkpoint(trainer.student, out / f"student{tag}.npz", {"iteration": trainer.iteration})
        save_checkpoint(trainer.disc, out / f"disc{tag}.npz", {"iteration": trainer.iteration})

    try:
        for _ in range(cfg.iterations):
            rec = trainer.step()
            records.append(rec)
            if metrics is not None:
                metrics.write(rec)
            if log_every and (trainer.iteration % log_every == 0):
                log.info("distill iter %d disc %.4f reward %.4f kl %.4f", trainer.iteration,
                         rec["disc_loss"], rec["mean_reward"] or 0.0, rec["kl_reg"])
    except TrainingAborted:
        flush(".partial")
        raise
    flush("")
    return trainer.student, trainer.disc, records
