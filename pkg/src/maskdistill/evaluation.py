"""Sample-quality metrics: bound-based generative perplexity and token entropy."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .diffusion import NoiseSchedule, ancestral_sample, make_rng
from .rgas import SamplerConfig, rgas_sample
from .teacher import nelbo_bound

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
MODES = ("as", "rgas")


@dataclass(frozen=True)
class EvalConfig:
    nfe_list: tuple = (4, 8, 16, 32)
    num_samples: int = 128
    teacher_nfe: tuple = (4, 8, 16, 32)
    score_grid: int = 32
    score_seed: int = 1234
    entropy_mode: str = "empirical"  # empirical | predictive
    schedule: str = "log-linear"
    chunk: int = 128
    seed: int = 0

    def __post_init__(self):
        if any(int(n) < 1 for n in self.nfe_list):
            raise ValueError("NFE list entries must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def generative_perplexity(samples: np.ndarray, evaluator, schedule: NoiseSchedule | None = None,
                          grid: int = 32, seed: int = 1234) -> float:
    """exp(mean per-token bound) of fully unmasked samples under a frozen evaluator."""
    samples = np.asarray(samples)
    if np.any(samples == evaluator.config.mask_index):
        raise ValueError("samples still contain MASK")
    clamped: list[int] = []
    bound = nelbo_bound(evaluator, samples, schedule or NoiseSchedule(), grid, seed,
                        log_floor=math.log(PROB_FLOOR), clamped=clamped)
    if sum(clamped):
        log.warning("clamped %d evaluator probabilities at %g", sum(clamped), PROB_FLOOR)
    return float(np.exp(bound.mean() / samples.shape[1]))


def token_entropy(samples: np.ndarray) -> float:
    """Empirical token entropy (nats) of each sample, averaged over samples."""
    samples = np.atleast_2d(np.asarray(samples))
    out = []
    for row in samples:
        c = np.unique(row, return_counts=True)[1]
        p = c / c.sum()
        out.append(float(-(p * np.log(p)).sum()))
    return float(np.mean(out))


def predictive_entropy(samples: np.ndarray, evaluator, t: float = 0.5, seed: int = 0) -> float:
    """Mean entropy of the evaluator's clean-token predictions at masked positions
    after corrupting each sample to time ``t``; the per-position reading of entropy."""
    samples = np.asarray(samples)
    m = evaluator.config.mask_index
    rng = make_rng(seed)
    z = np.where(rng.random(samples.shape) < 1.0 - t, samples, m)
    with T.no_grad():
        lp = evaluator.log_probs(z, np.full(len(z), t)).data
    ent = -(np.exp(lp) * lp).sum(-1)
    masked = z == m
    return float(ent[masked].mean()) if masked.any() else 0.0


def generate(model, n: int, nfe: int, mode: str, rng: np.random.Generator, disc=None,
             sampler: SamplerConfig | None = None, schedule: NoiseSchedule | None = None,
             chunk: int = 128) -> np.ndarray:
    schedule = schedule or NoiseSchedule()
    out = []
    for a in range(0, n, chunk):
        b = min(chunk, n - a)
        if mode == "as":
            out.append(ancestral_sample(model.denoise, b, model.config.length, nfe, schedule, rng,
                                        model.config.mask_index))
        elif mode == "rgas":
            if disc is None:
                raise ValueError("guided sampling needs a discriminator")
            cfg = SamplerConfig(**{**(sampler.to_dict() if sampler else {}), "nfe": nfe})
            out.append(rgas_sample(model, disc, cfg, schedule, rng, b))
        else:
            raise ValueError(f"unknown sampling mode {mode!r}")
    return np.concatenate(out)


def _cell_rng(seed: int, nfe: int, mode: str):
    # student and teacher share streams at equal NFE, so their comparison is paired
    return make_rng([seed, nfe, MODES.index(mode)])


def evaluate(student, disc, teacher, evaluator, cfg: EvalConfig, sampler: SamplerConfig | None = None,
             metrics=None) -> list[dict]:
    """Perplexity and entropy over the NFE x {AS, RGAS} grid for the student, plus
    plain ancestral baselines for the teacher when one is given."""
    schedule = NoiseSchedule(cfg.schedule)
    records = []

    def cell(name, model, nfe, mode):
        samples = generate(model, cfg.num_samples, nfe, mode, _cell_rng(cfg.seed, nfe, mode),
                           disc, sampler, schedule, cfg.chunk)
        rec = {"model": name, "mode": mode, "nfe": int(nfe),
               "ppl": generative_perplexity(samples, evaluator, schedule, cfg.score_grid, cfg.score_seed)}
        if cfg.entropy_mode == "predictive":
            rec["entropy"] = predictive_entropy(samples, evaluator, seed=cfg.score_seed)
        else:
            rec["entropy"] = token_entropy(samples)
        records.append(rec)
        if metrics is not None:
            metrics.write(rec)
        log.info("%s %s nfe=%d ppl=%.3f entropy=%.4f", name, mode, nfe, rec["ppl"], rec["entropy"])
        return samples

    if student is not None:
        for nfe in cfg.nfe_list:
            for mode in MODES:
                if mode == "rgas" and disc is None:
                    continue
                cell("student", student, int(nfe), mode)
    if teacher is not None:
        for nfe in cfg.teacher_nfe:
            cell("teacher", teacher, int(nfe), "as")
    return records


def lookup(records: list[dict], model: str, mode: str, nfe: int, key: str = "ppl") -> float:
    for r in records:
        if r["model"] == model and r["mode"] == mode and r["nfe"] == nfe:
            return r[key]
    raise KeyError((model, mode, nfe))
