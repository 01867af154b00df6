import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maskdistill import tensor as T
from maskdistill.diffusion import NoiseSchedule, make_rng
from maskdistill.models import DenoiserModel, ModelConfig
from maskdistill.teacher import (TeacherConfig, clip_grad_norm, lr_at, nelbo_bound, nelbo_loss,
                                 stratified_times, train_teacher, validation_nelbo)


def uniform_model(k=6, length=8):
    m = DenoiserModel(ModelConfig(k, length, d_model=8, n_layers=1, n_heads=2), seed=0)
    m.params["out.w"].data[:] = 0.0
    return m


def uniform_bound(k, length, eps=1e-4):
    # -w(t) = 1 / t and E[#masked] = L (1 - eps) t under the log-linear schedule
    return length * (1 - eps) * math.log(k - 1)


def test_nelbo_loss_of_uniform_predictor():
    m = uniform_model()
    x = np.random.default_rng(0).integers(0, 5, (64, 8))
    sch = NoiseSchedule()
    vals = [nelbo_loss(m, x, sch, make_rng(i)).item() for i in range(40)]
    se = np.std(vals) / np.sqrt(len(vals))
    assert abs(np.mean(vals) - uniform_bound(6, 8)) < 4 * se + 1e-9
    assert min(vals) > 0


def test_nelbo_bound_of_uniform_predictor():
    m = uniform_model()
    x = np.random.default_rng(1).integers(0, 5, (2000, 8))
    b = nelbo_bound(m, x, NoiseSchedule(), grid=32, seed=3)
    se = b.std() / np.sqrt(len(b))
    assert abs(b.mean() - uniform_bound(6, 8)) < 4 * se


def test_nelbo_bound_reuses_masks_across_models():
    x = np.random.default_rng(2).integers(0, 5, (16, 8))
    a = DenoiserModel(ModelConfig(6, 8, d_model=8, n_layers=1, n_heads=2), seed=1)
    np.testing.assert_array_equal(nelbo_bound(a, x, NoiseSchedule(), 8, seed=5),
                                  nelbo_bound(a, x, NoiseSchedule(), 8, seed=5, batch_size=3))


def test_nelbo_loss_gradcheck():
    m = DenoiserModel(ModelConfig(7, 5, d_model=8, n_layers=1, n_heads=2, init_std=0.3), seed=1)
    x = np.random.default_rng(0).integers(0, 6, (3, 5))
    f = lambda: nelbo_loss(m, x, NoiseSchedule(), make_rng(5))
    assert T.gradcheck(f, [m.params["out.w"], m.params["tok_emb"]]) < 1e-4


@given(st.integers(1, 64), st.integers(0, 2 ** 31 - 1))
def test_stratified_times_cover_strata(n, seed):
    t = stratified_times(n, make_rng(seed))
    assert np.all((t > 0) & (t <= 1))
    np.testing.assert_array_equal(np.floor(t * n - 1e-12).clip(0), np.arange(n))


def test_lr_schedule_shape():
    cfg = TeacherConfig(lr=1.0, warmup=10, steps=110)
    assert lr_at(0, cfg) == pytest.approx(0.1)
    assert lr_at(9, cfg) == pytest.approx(1.0)
    assert lr_at(10, cfg) == pytest.approx(1.0)
    assert lr_at(60, cfg) == pytest.approx(0.5)
    assert lr_at(110, cfg) == pytest.approx(0.0, abs=1e-12)


def test_clip_grad_norm():
    p = T.Parameter(np.zeros(2))
    p.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.linalg.norm(p.grad), 1.0)


def _toy_corpus(n=256, length=8):
    # period-3 sequences with a random phase: easy for a denoiser to learn
    rng = np.random.default_rng(0)
    base = np.array([0, 1, 2] * 10)
    return np.stack([base[o:o + length] for o in rng.integers(0, 3, n)])


def test_teacher_training_reduces_validation_bound():
    data = _toy_corpus()
    cfg = TeacherConfig(lr=3e-3, warmup=10, steps=150, eval_interval=150, batch_size=16, val_size=32,
                        val_grid=8, seed=0)
    mc = ModelConfig(4, 8, d_model=16, n_layers=1, n_heads=2)
    model, rec = train_teacher(cfg, data[:200], data[200:], mc)
    assert rec[0]["step"] == 0 and rec[-1]["step"] == 150
    assert rec[-1]["val_nelbo"] < 0.7 * rec[0]["val_nelbo"]
    _, rec2 = train_teacher(cfg, data[:200], data[200:], mc)
    assert rec == rec2


def test_validation_nelbo_is_per_token():
    m = uniform_model()
    x = np.random.default_rng(1).integers(0, 5, (500, 8))
    v = validation_nelbo(m, x, NoiseSchedule())
    assert v == pytest.approx(uniform_bound(6, 8) / 8, rel=0.05)
