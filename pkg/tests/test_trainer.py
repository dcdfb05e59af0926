import math
from collections import Counter

import numpy as np
import pytest

from domainsmooth.data import FeatureSet, SynthConfig, generate_synthetic
from domainsmooth.model import encode_checkpoint, init_params
from domainsmooth.numkit import NumericError, make_rng
from domainsmooth.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    config_metadata,
    lr_at,
    sample_batch,
    train,
)

SMALL = dict(hidden=8, d_emb=8, proj_hidden=8, n_teacher=4, batch_size=8)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic(SynthConfig(n_categories=4, dim=6, samples_per_category=6, seed=3))


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.epochs, cfg.lr_initial, cfg.lr_final) == (96, 10, 1e-4, 1e-7)
    assert (cfg.tau, cfg.k) == (0.07, 10)
    assert (cfg.lambda1, cfg.lambda2, cfg.lambda3) == (0.1, 1.0, 1.0)
    assert cfg.grad_clip == 0.0


@pytest.mark.parametrize("bad", [dict(batch_size=7), dict(lr_final=1.0), dict(epochs=-1), dict(tau=0.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_ablation_flags_zero_weights():
    w = TrainConfig(use_cmcm=False, use_ml=False).weights
    assert (w.lambda1, w.lambda2, w.lambda3) == (0.0, 0.0, 1.0)


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(cfg, 0, 100) == 1e-4
    assert lr_at(cfg, 100, 100) == 1e-7
    assert lr_at(cfg, 50, 100) == pytest.approx(math.sqrt(1e-4 * 1e-7), rel=1e-12)
    seq = [lr_at(cfg, s, 37) for s in range(38)]
    assert all(a >= b for a, b in zip(seq, seq[1:]))
    with pytest.raises(ValueError):
        lr_at(cfg, 5, 4)


def test_adam_first_step_scalar():
    p = init_params(make_rng(0), 1, 1, 1, hidden=1, d_emb=1, proj_hidden=1, proj_dim=1)
    p = p.map(np.ones_like)
    g = p.map(np.ones_like)
    new, st = adam_step(p, g, AdamState.zeros(p), 0.1)
    assert new.enc_w1[0, 0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8), abs=1e-15)
    assert st.step == 1


def test_adam_zero_grads_identity():
    p = init_params(make_rng(1), 3, 2, 2, hidden=2, d_emb=2, proj_hidden=2)
    st = AdamState.zeros(p)
    new, st2 = adam_step(p, p.zeros_like(), st, 0.5)
    assert new.equals(p)
    assert all(not a.any() for a in st2.m.arrays() + st2.v.arrays())
    # also from a state with nonzero second moments and zero first moments
    st3 = AdamState(p.zeros_like(), p.map(np.ones_like), 4)
    assert adam_step(p, p.zeros_like(), st3, 0.5)[0].equals(p)


def test_adam_deterministic_and_pure():
    p = init_params(make_rng(2), 3, 2, 2, hidden=2, d_emb=2, proj_hidden=2)
    g = p.map(lambda a: a * 0.5 + 0.1)
    st = AdamState.zeros(p)
    a = adam_step(p, g, st, 0.01)
    b = adam_step(p, g, st, 0.01)
    assert a[0].equals(b[0]) and st.step == 0


def test_adam_rejects_non_finite():
    p = init_params(make_rng(3), 2, 2, 2, hidden=2, d_emb=2, proj_hidden=2)
    g = p.zeros_like()
    g.cls_b[0] = np.nan
    with pytest.raises(NumericError):
        adam_step(p, g, AdamState.zeros(p), 0.1)


def test_sample_batch_pairing():
    img = FeatureSet(np.eye(4), [0, 0, 1, 1], "image")
    ske = FeatureSet(np.eye(4), [0, 1, 1, 0], "sketch")
    sb = sample_batch(img, ske, make_rng(0), 4)
    assert len(sb.img_idx) == 2 and len(sb.ske_idx) == 2
    assert Counter(img.labels[sb.img_idx]) == Counter(ske.labels[sb.ske_idx])
    sb2 = sample_batch(img, ske, make_rng(0), 4)
    np.testing.assert_array_equal(sb.img_idx, sb2.img_idx)
    np.testing.assert_array_equal(sb.ske_idx, sb2.ske_idx)


def test_sample_batch_coverage():
    img, ske = generate_synthetic(SynthConfig(n_categories=5, dim=2, samples_per_category=20))
    rng = make_rng(1)
    seen_i, seen_s = set(), set()
    for _ in range(10_000):
        sb = sample_batch(img, ske, rng, 2)
        seen_i.update(sb.img_idx.tolist())
        seen_s.update(sb.ske_idx.tolist())
    assert len(seen_i) == 100 and len(seen_s) == 100


def test_sample_batch_errors():
    img = FeatureSet(np.eye(3), [0, 1, 2], "image")
    with pytest.raises(ValueError):
        sample_batch(img, FeatureSet(np.eye(3), [0, 1, 1], "sketch"), make_rng(0), 4)
    one = FeatureSet(np.eye(2), [0, 0], "image")
    with pytest.raises(ValueError):
        sample_batch(one, FeatureSet(np.eye(2), [0, 0], "sketch"), make_rng(0), 4)


def test_zero_epochs(tiny_data):
    img, ske = tiny_data
    res = train(TrainConfig(epochs=0, **SMALL), img, ske)
    assert res.log.rows == [] and res.bank.categories() == []
    ref = init_params(make_rng(0).spawn(3)[0], 6, 4, 4, hidden=8, d_emb=8, proj_hidden=8)
    assert res.params.equals(ref)


def test_training_deterministic(tiny_data):
    img, ske = tiny_data
    cfg = TrainConfig(epochs=2, seed=5, **SMALL)
    a, b = train(cfg, img, ske), train(cfg, img, ske)
    assert encode_checkpoint(a.params) == encode_checkpoint(b.params)
    assert a.log.to_csv() == b.log.to_csv()
    assert a.bank.to_csv() == b.bank.to_csv()


def test_baseline_logs_only_dl(tiny_data):
    img, ske = tiny_data
    res = train(TrainConfig(epochs=1, use_cmcm=False, use_ml=False, **SMALL), img, ske)
    assert not res.log.column("cmcm").any() and not res.log.column("ml").any()
    np.testing.assert_array_equal(res.log.column("total"), res.log.column("cls") + res.log.column("ask"))
    assert res.bank.categories() == []


def test_full_run_fills_bank(tiny_data):
    img, ske = tiny_data
    res = train(TrainConfig(epochs=2, k=3, **SMALL), img, ske)
    assert res.bank.categories() == [0, 1, 2, 3]
    assert all(res.bank.size(c) <= 3 for c in range(4))
    assert (res.log.column("cmcm") > 0).all()
    assert (res.log.column("ml") <= 0).all()


def test_metadata_records_config():
    meta = config_metadata(TrainConfig())
    assert meta["train.tau"] == "0.07" and meta["train.k"] == "10"
    assert meta["adam.beta2"] == "0.999"
    assert "ml=mean" in meta["loss.reduction"]


@pytest.mark.parametrize("seed", range(5))
def test_separable_baseline_reduces_cls(seed):
    rng = make_rng(seed)
    n = 40
    y = np.repeat([0, 1], n)
    centres = np.array([[1.0] * 4, [-1.0] * 4])
    img = FeatureSet(centres[y] + 0.2 * rng.standard_normal((2 * n, 4)), y, "image")
    ske = FeatureSet(centres[y] + 0.4 * rng.standard_normal((2 * n, 4)), y, "sketch")
    # a faster schedule than the default so 10 tiny epochs can make progress
    cfg = TrainConfig(epochs=10, use_cmcm=False, use_ml=False, seed=seed, lr_initial=1e-2, lr_final=1e-3,
                      **{**SMALL, "batch_size": 16})
    cls = train(cfg, img, ske).log.column("cls")
    assert cls[-1] <= 0.5 * cls[0]
