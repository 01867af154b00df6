"""Teacher pretraining by minimizing the continuous-time masked-diffusion bound."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .diffusion import NoiseSchedule, corrupt, make_rng, nelbo_weight
from .models import DenoiserModel, ModelConfig

log = logging.getLogger(__name__)

T_MIN = 1e-6  # keeps 1/(1 - alpha) finite when a low-discrepancy draw lands on 0


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TeacherConfig:
    lr: float = 1e-3
    warmup: int = 200
    batch_size: int = 32
    steps: int = 5000
    schedule: str = "log-linear"
    eval_interval: int = 500
    seed: int = 0
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.95)
    grad_clip: float = 1.0
    lr_decay: str = "cosine"
    val_size: int = 256
    val_grid: int = 32

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.steps < 0 or self.eval_interval <= 0:
            raise ValueError("teacher config values must be positive")
        if not 0 <= self.warmup <= max(self.steps, 0) and self.steps > 0:
            raise ValueError("warmup must not exceed total steps")

    def to_dict(self) -> dict:
        return asdict(self)


def stratified_times(n: int, rng: np.random.Generator) -> np.ndarray:
    """t_i = (i + u) / n with one shared uniform u."""
    u = rng.random()
    return np.maximum((np.arange(n) + u) / n, T_MIN)


def masked_log_likelihood(model, z: np.ndarray, x: np.ndarray, t: np.ndarray,
                          log_floor: float | None = None, clamped: list | None = None) -> T.Tensor:
    """Per-sequence sum over masked positions of log p(x^l | z, t); shape (B,).

    With ``log_floor`` the log-probabilities are clamped from below (no gradient
    below the floor) and the number of clamped masked entries is appended to ``clamped``.
    """
    lp = T.take_last(model.log_probs(z, t), x)
    masked = (z == model.config.mask_index).astype(np.float64)
    if log_floor is not None:
        if clamped is not None:
            clamped.append(int(((lp.data < log_floor) & (masked > 0)).sum()))
        lp = T.clip(lp, log_floor, 0.0)
    return T.tsum(lp * masked, axis=-1)


def nelbo_loss(model, x_batch: np.ndarray, schedule: NoiseSchedule,
               rng: np.random.Generator, t: np.ndarray | None = None) -> T.Tensor:
    """Batch mean of -w(t) * sum_{masked} -log p; nonnegative since w(t) <= 0."""
    x_batch = np.asarray(x_batch)
    if t is None:
        t = stratified_times(len(x_batch), rng)
    z = corrupt(x_batch, t, schedule, rng, model.config.mask_index)
    w = nelbo_weight(t, schedule)
    ll = masked_log_likelihood(model, z, x_batch, t)
    return T.mean(ll * w)


def nelbo_bound(model, x: np.ndarray, schedule: NoiseSchedule, grid: int = 32,
                seed: int = 1234, batch_size: int = 256, log_floor: float | None = None,
                clamped: list | None = None) -> np.ndarray:
    """Per-sequence bound (nats) by a fixed midpoint rule in t with seeded masks.

    The masks depend only on ``seed`` and the sequence positions, so two models
    scored on the same ``x`` see identical corruptions.
    """
    x = np.asarray(x)
    ts = (np.arange(grid) + 0.5) / grid
    w = nelbo_weight(ts, schedule)
    u = make_rng(seed).random((grid,) + x.shape)
    alpha = schedule.alpha(ts)
    out = np.zeros(len(x))
    m = model.config.mask_index
    with T.no_grad():
        for j, t in enumerate(ts):
            z_all = np.where(u[j] < alpha[j], x, m)
            for a in range(0, len(x), batch_size):
                xb, zb = x[a:a + batch_size], z_all[a:a + batch_size]
                ll = masked_log_likelihood(model, zb, xb, np.full(len(xb), t), log_floor, clamped).data
                out[a:a + batch_size] += w[j] * ll / grid
    return out


def validation_nelbo(model, val: np.ndarray, schedule: NoiseSchedule, grid: int = 32) -> float:
    """Mean bound per token on the validation set."""
    return float(nelbo_bound(model, val, schedule, grid).mean() / val.shape[1])


def lr_at(step: int, cfg: TeacherConfig) -> float:
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    if cfg.lr_decay == "constant":
        return cfg.lr
    span = max(cfg.steps - cfg.warmup, 1)
    prog = min((step - cfg.warmup) / span, 1.0)
    if cfg.lr_decay == "linear":
        return cfg.lr * (1.0 - prog)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * prog))


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        perm = rng.permutation(n)
        for a in range(0, n - batch_size + 1, batch_size):
            yield perm[a:a + batch_size]
        if n < batch_size:
            yield rng.integers(0, n, batch_size)


def train_teacher(cfg: TeacherConfig, train: np.ndarray, val: np.ndarray,
                  model_config: ModelConfig, metrics=None, model: DenoiserModel | None = None):
    """Returns (model, records). ``metrics`` is an optional MetricsWriter."""
    schedule = NoiseSchedule(cfg.schedule)
    data_rng, noise_rng = make_rng([cfg.seed, 1]), make_rng([cfg.seed, 2])
    if model is None:
        model = DenoiserModel(model_config, seed=cfg.seed)
    val = np.asarray(val)[: cfg.val_size]
    params = model.parameters()
    opt = T.AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    records = []

    def emit(rec):
        records.append(rec)
        if metrics is not None:
            metrics.write(rec)

    emit({"step": 0, "loss": None, "val_nelbo": validation_nelbo(model, val, schedule, cfg.val_grid)})
    batches = _batches(len(train), cfg.batch_size, data_rng)
    running = []
    for step in range(1, cfg.steps + 1):
        idx = next(batches)
        xb = train[idx]
        opt.zero_grad()
        loss = nelbo_loss(model, xb, schedule, noise_rng)
        lv = loss.item()
        if not np.isfinite(lv):
            raise TrainingAborted(f"non-finite loss at step {step}",
                                  {"step": step, "loss": lv, "batch": xb.tolist(),
                                   "params": {k: p.data.copy() for k, p in model.params.items()}})
        loss.backward()
        clip_grad_norm(params, cfg.grad_clip)
        opt.step(lr=lr_at(step - 1, cfg))
        running.append(lv)
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            vn = validation_nelbo(model, val, schedule, cfg.val_grid)
            emit({"step": step, "loss": float(np.mean(running)) / train.shape[1], "val_nelbo": vn})
            log.info("teacher step %d loss/token %.4f val_nelbo %.4f", step,
                     np.mean(running) / train.shape[1], vn)
            running = []
    return model, records
