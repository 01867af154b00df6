"""Brute-force ground truth on tiny instances (all K^L partially masked states).

States are indexed in base K with position 0 as the least significant digit,
matching ``TabularDenoiser.state_index``.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from . import tensor as T
from .diffusion import NoiseSchedule, make_rng, posterior_probs, time_grid

STATE_CAP = 10 ** 4


class StateExplosion(ValueError):
    pass


def enumerate_states(k: int, length: int) -> np.ndarray:
    """(K^L, L) array; row i spells i in base K, position 0 least significant."""
    n = k ** length
    if n > STATE_CAP:
        raise StateExplosion(f"{k}^{length} = {n} states exceeds the cap of {STATE_CAP}")
    idx = np.arange(n)
    return np.stack([(idx // k ** l) % k for l in range(length)], axis=1)


def state_index(z: np.ndarray, k: int) -> np.ndarray:
    z = np.asarray(z)
    return (z * k ** np.arange(z.shape[-1])).sum(axis=-1)


def transition_matrix(model, z_states: np.ndarray, t: float, s: float,
                      schedule: NoiseSchedule) -> np.ndarray:
    """P[i, j] = probability that one reverse step maps state i to state j."""
    k = model.config.vocab_size
    probs = model.denoise(z_states, np.full(len(z_states), t))
    post = posterior_probs(z_states, probs, s, t, schedule, k - 1)  # (N, L, K)
    n, length = z_states.shape
    P = np.ones((n, n))
    for l in range(length):
        P *= post[:, l, :][:, z_states[:, l]]
    return P


def exact_generator_marginal(model, n_steps: int | None, schedule: NoiseSchedule,
                             grid: np.ndarray | None = None) -> np.ndarray:
    """Exact output law of the ancestral sampler, as a vector over all K^L states."""
    k, length = model.config.vocab_size, model.config.length
    states = enumerate_states(k, length)
    grid = time_grid(n_steps) if grid is None else np.asarray(grid, dtype=np.float64)
    p = np.zeros(len(states))
    p[state_index(np.full(length, k - 1), k)] = 1.0
    for t, s in zip(grid[:-1], grid[1:]):
        p = p @ transition_matrix(model, states, t, s, schedule)
    return p


def corruption_matrix(k: int, length: int, alpha: float) -> np.ndarray:
    """Q[i, j] = probability that clean-or-partial state i corrupts to state j."""
    states = enumerate_states(k, length)
    m = k - 1
    Q = np.ones((len(states), len(states)))
    for l in range(length):
        a, b = states[:, l][:, None], states[:, l][None, :]
        keep = np.where(a == b, alpha, 0.0)
        to_mask = np.where((b == m) & (a != m), 1.0 - alpha, 0.0)
        # a MASK in the source stays MASK with probability one
        Q *= np.where(a == m, (b == m).astype(float), keep + to_mask)
    return Q


def exact_corrupted_marginal(gen_marginal: np.ndarray, t: float, schedule: NoiseSchedule,
                             k: int, length: int) -> np.ndarray:
    alpha = float(schedule.alpha(t))
    return np.asarray(gen_marginal) @ corruption_matrix(k, length, alpha)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    p, q = np.asarray(p), np.asarray(q)
    support = p > 0
    if np.any(q[support] <= 0):
        return float("inf")
    return float((p[support] * (np.log(p[support]) - np.log(q[support]))).sum())


def midpoint_grid(n: int = 64) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def _omega(omega, t: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    if callable(omega):
        return np.asarray(omega(t), dtype=np.float64)
    if omega in (None, "constant"):
        return np.ones_like(t)
    if omega == "correction":
        return -schedule.alpha_prime(t) / (1.0 - schedule.alpha(t) + 1e-8)
    return np.full_like(t, float(omega))


def exact_ikl(student, teacher, schedule: NoiseSchedule, student_steps: int,
              teacher_steps: int | None = None, omega="constant", times=None) -> float:
    """Midpoint-rule integral over t of omega(t) KL(q_student(t) || q_teacher(t))."""
    times = midpoint_grid(64) if times is None else np.asarray(times)
    k, length = student.config.vocab_size, student.config.length
    p_s = exact_generator_marginal(student, student_steps, schedule)
    p_t = exact_generator_marginal(teacher, teacher_steps or student_steps, schedule)
    w = _omega(omega, times, schedule)
    total = 0.0
    for wi, t in zip(w, times):
        total += wi * kl_divergence(exact_corrupted_marginal(p_s, t, schedule, k, length),
                                    exact_corrupted_marginal(p_t, t, schedule, k, length))
    return total / len(times)


def exact_optimal_discriminator(q_student: np.ndarray, q_teacher: np.ndarray) -> np.ndarray:
    """q_s / (q_s + q_t); NaN where both vanish."""
    q_s, q_t = np.asarray(q_student, float), np.asarray(q_teacher, float)
    tot = q_s + q_t
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tot > 0, q_s / np.where(tot > 0, tot, 1.0), np.nan)


def exact_log_ratio(q_student: np.ndarray, q_teacher: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(q_student) - np.log(q_teacher)


def exact_student_gradient(student, teacher, schedule: NoiseSchedule, student_steps: int,
                           teacher_steps: int | None = None, omega="constant", times=None,
                           h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of ``exact_ikl`` over every trainable student entry."""
    grads = {}

    def f():
        return exact_ikl(student, teacher, schedule, student_steps, teacher_steps, omega, times)

    for p in student.parameters():
        g = np.zeros_like(p.data)
        flat, gflat = p.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads[p.name] = g
    return grads


class ExactReward:
    """log q_student(z, t) - log q_teacher(z, t) looked up from exact marginals.

    ``times`` is the finite set of corruption times that may be queried.
    """

    def __init__(self, student, teacher, schedule: NoiseSchedule, student_steps: int,
                 times: np.ndarray, teacher_steps: int | None = None):
        self.k = student.config.vocab_size
        length = student.config.length
        p_s = exact_generator_marginal(student, student_steps, schedule)
        p_t = exact_generator_marginal(teacher, teacher_steps or student_steps, schedule)
        self.times = np.asarray(times, dtype=np.float64)
        self.table = np.stack([
            exact_log_ratio(exact_corrupted_marginal(p_s, t, schedule, self.k, length),
                            exact_corrupted_marginal(p_t, t, schedule, self.k, length))
            for t in self.times])

    def __call__(self, z: np.ndarray, t: np.ndarray) -> np.ndarray:
        j = np.abs(self.times[None, :] - np.asarray(t)[:, None]).argmin(axis=1)
        return self.table[j, state_index(z, self.k)]


def mc_policy_gradient(student, teacher, schedule: NoiseSchedule, student_steps: int,
                       n_groups: int, group_size: int = 8, seed: int = 0, omega="constant",
                       times=None, teacher_steps: int | None = None, advantage: str = "rloo",
                       chunk_groups: int = 5000) -> dict[str, np.ndarray]:
    """Average of the score-function surrogate gradient with the exact reward.

    Uses the same rollout, advantage and surrogate code as the trainer. Times are
    drawn uniformly from ``times`` so the estimate targets the same quadrature as
    ``exact_ikl``.
    """
    from .diffusion import corrupt
    from .distill import advantages, path_scores, student_rollout, surrogate_loss

    times = midpoint_grid(64) if times is None else np.asarray(times)
    reward = ExactReward(student, teacher, schedule, student_steps, times, teacher_steps)
    rng = make_rng(seed)
    m = student.config.mask_index
    params = student.parameters()
    acc = {p.name: np.zeros_like(p.data) for p in params}
    done = 0
    while done < n_groups:
        g = min(chunk_groups, n_groups - done)
        b = g * group_size
        t = times[rng.integers(0, len(times), b)]
        w = _omega(omega, t, schedule)
        roll = student_rollout(student, b, student_steps, schedule, rng)
        z = corrupt(roll.x, t, schedule, rng, m)
        r = reward(z, t)
        adv = np.concatenate([advantages(r[i:i + group_size], advantage)[0]
                              for i in range(0, b, group_size)])
        T.zero_grad(params)
        scores = path_scores(student, roll)[0]
        # surrogate_loss averages over the chunk; weight chunks by their size
        surrogate_loss(scores, w * adv).backward()
        for p in params:
            acc[p.name] += p.grad * g
        done += g
    return {k: v / n_groups for k, v in acc.items()}


def path_probabilities(model, n_steps: int, schedule: NoiseSchedule) -> dict[tuple, float]:
    """Probability of every full state trajectory of the n-step sampler."""
    k, length = model.config.vocab_size, model.config.length
    states = enumerate_states(k, length)
    grid = time_grid(n_steps)
    mats = [transition_matrix(model, states, t, s, schedule) for t, s in zip(grid[:-1], grid[1:])]
    start = int(state_index(np.full(length, k - 1), k))
    out = {}
    for path in itertools.product(range(len(states)), repeat=n_steps):
        p, cur = 1.0, start
        for mat, nxt in zip(mats, path):
            p *= mat[cur, nxt]
            cur = nxt
            if p == 0.0:
                break
        if p > 0:
            out[path] = p
    return out


def direct_ikl(student, teacher, schedule: NoiseSchedule, student_steps: int,
               teacher_steps: int | None = None, times=None) -> float:
    """Second implementation of the constant-weight integral by explicit loops
    over clean sequences and masking patterns."""
    times = midpoint_grid(64) if times is None else np.asarray(times)
    k, length = student.config.vocab_size, student.config.length
    m = k - 1
    p_s = exact_generator_marginal(student, student_steps, schedule)
    p_t = exact_generator_marginal(teacher, teacher_steps or student_steps, schedule)
    states = enumerate_states(k, length)
    clean = [i for i, s in enumerate(states) if m not in s]
    total = 0.0
    for t in times:
        a = float(schedule.alpha(t))
        q_s: dict[tuple, float] = {}
        q_t: dict[tuple, float] = {}
        for i in clean:
            x = states[i]
            for pattern in itertools.product((0, 1), repeat=length):
                z = tuple(m if hide else int(v) for v, hide in zip(x, pattern))
                w = a ** (length - sum(pattern)) * (1 - a) ** sum(pattern)
                q_s[z] = q_s.get(z, 0.0) + p_s[i] * w
                q_t[z] = q_t.get(z, 0.0) + p_t[i] * w
        total += sum(v * math.log(v / q_t[z]) for z, v in q_s.items() if v > 0)
    return total / len(times)


def fit_discriminator(disc, q_student: np.ndarray, q_teacher: np.ndarray, t: float,
                      steps: int = 2000, batch: int = 512, lr: float = 3e-3, seed: int = 0):
    """Train ``disc`` on states drawn from two exact marginals at a fixed time."""
    from .distill import discriminator_loss

    k, length = disc.config.vocab_size, disc.config.length
    states = enumerate_states(k, length)
    rng = make_rng(seed)
    opt = T.AdamW(disc.parameters(), lr=lr, betas=(0.9, 0.999))
    tt = np.full(batch, t)
    for i in range(steps):
        zs = states[rng.choice(len(states), batch, p=q_student / q_student.sum())]
        zt = states[rng.choice(len(states), batch, p=q_teacher / q_teacher.sum())]
        opt.zero_grad()
        discriminator_loss(disc, zs, zt, tt).backward()
        opt.step(lr=lr * (1.0 - i / steps))
    return disc


def disc_state_probabilities(disc, t: float) -> np.ndarray:
    """Per-state D, averaging log-odds over positions; shape (K^L,)."""
    states = enumerate_states(disc.config.vocab_size, disc.config.length)
    with T.no_grad():
        lg = disc.logits(states, np.full(len(states), t)).data
    return 1.0 / (1.0 + np.exp(-lg.mean(axis=1)))


def tabular_pair(seed: int = 0, k: int = 3, length: int = 2, scale: float = 1.0):
    from .models import ModelConfig, TabularDenoiser

    cfg = ModelConfig(k, length)
    return TabularDenoiser(cfg, seed=seed, scale=scale), TabularDenoiser(cfg, seed=seed + 100, scale=scale)


def run_check(case: str, seed: int = 0) -> tuple[bool, dict]:
    """Self-contained verification used by the ``oracle-check`` command."""
    from .diffusion import make_rng as _rng
    from .distill import student_rollout

    schedule = NoiseSchedule()
    student, teacher = tabular_pair(seed)
    k, length = 3, 2
    if case == "marginal":
        p = exact_generator_marginal(student, 2, schedule)
        n = 10 ** 5
        x = student_rollout(student, n, 2, schedule, _rng(seed)).x
        freq = np.bincount(state_index(x, k), minlength=k ** length) / n
        bound = 3 * np.sqrt(p * (1 - p) / n) + 1e-12
        dev = np.abs(freq - p)
        return bool(abs(p.sum() - 1) < 1e-12 and np.all(dev <= bound)), {
            "sum": float(p.sum()), "max_dev_over_bound": float((dev / bound).max())}
    if case == "ikl":
        a = exact_ikl(student, teacher, schedule, 2)
        b = direct_ikl(student, teacher, schedule, 2)
        same = exact_ikl(student, student, schedule, 2)
        return bool(abs(a - b) < 1e-10 and a >= 0 and abs(same) < 1e-14), {
            "ikl": a, "direct": b, "self": same}
    if case == "discriminator":
        from .models import DiscriminatorConfig, DiscriminatorModel

        t = 0.5
        q_s = exact_corrupted_marginal(exact_generator_marginal(student, 2, schedule), t, schedule, k, length)
        q_t = exact_corrupted_marginal(exact_generator_marginal(teacher, 2, schedule), t, schedule, k, length)
        disc = DiscriminatorModel(DiscriminatorConfig(k, length, d_model=16, n_layers=1, n_heads=2), seed=seed)
        fit_discriminator(disc, q_s, q_t, t, seed=seed)
        d_star = exact_optimal_discriminator(q_s, q_t)
        dev = float(np.nanmax(np.abs(disc_state_probabilities(disc, t) - d_star)))
        swap = exact_optimal_discriminator(q_t, q_s)
        anti = float(np.nanmax(np.abs(log_odds_of(d_star) + log_odds_of(swap))))
        return bool(dev < 0.05 and anti < 1e-12), {"max_deviation": dev, "antisymmetry": anti}
    if case == "gradient":
        exact = exact_student_gradient(student, teacher, schedule, 2)["table"]
        mc = mc_policy_gradient(student, teacher, schedule, 2, 10 ** 5, seed=seed + 1)["table"]
        big = np.abs(exact) > 1e-3
        rel = np.abs(mc - exact)[big] / np.abs(exact)[big]
        return bool(rel.max() < 0.05), {"coords": int(big.sum()), "max_rel_err": float(rel.max())}
    raise ValueError(f"unknown case {case!r}")


def log_odds_of(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(p) - np.log1p(-p)
