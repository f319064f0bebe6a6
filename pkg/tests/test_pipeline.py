import math

import numpy as np
import pytest

from pulsetrace import pipeline as P
from pulsetrace.model import DiameterNet
from pulsetrace.synthdata import DatasetSplit, PhantomSpec, generate


def small_dataset(count=3, frames=30, seed=0):
    return P.make_dataset(count, seed=seed, profile="test", frames=frames)


def constant_phantom(d0, frames=20, name="c"):
    spec = PhantomSpec(d0=d0, amplitude=0.0, drift_amplitude=0.0)
    seq = generate(spec, frames, seed=1, size=64, pixel_pitch=0.125)
    seq.name = name
    return seq


def constant_model(value, recurrent=True):
    net = DiameterNet("test", recurrent=recurrent, seed=0)
    for key, p in net.head.params.items():
        p.value[...] = 0
    net.head.output_bias.value[...] = value
    return net


def test_train_config_validation():
    with pytest.raises(ValueError):
        P.TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        P.TrainConfig(profile="huge")
    cfg = P.TrainConfig()
    assert (cfg.epochs, cfg.lr, cfg.lam) == (100, 1e-4, 1e-6)


def test_one_step_per_sequence():
    seqs = small_dataset(3)
    ds = DatasetSplit(tuple(seqs), (), (), (1.0, 0.0, 0.0))
    res = P.train(seqs, ds, P.TrainConfig(epochs=2, lr=1e-4, profile="test"))
    assert res.steps == 6
    assert len(res.history) == 2


def test_lr_zero_keeps_validation_mse():
    seqs = small_dataset(3)
    ds = DatasetSplit(("seq000", "seq001"), ("seq002",), (), (0.6, 0.4, 0.0))
    res = P.train(seqs, ds, P.TrainConfig(epochs=3, lr=0.0, profile="test"))
    vals = [r.val_mse for r in res.history]
    assert vals[0] == vals[1] == vals[2]


def test_empty_training_split():
    with pytest.raises(ValueError):
        P.train(small_dataset(1), DatasetSplit((), ("seq000",), (), (0.0, 1.0, 0.0)), P.TrainConfig(profile="test"))


def test_fixed_seed_bit_identical_history():
    seqs = small_dataset(3, frames=40)
    ds = P.default_split(seqs, 0)
    cfg = P.TrainConfig(epochs=2, lr=1e-3, lam=1e-2, seed=5, profile="test")
    a = P.train(seqs, ds, cfg)
    b = P.train(seqs, ds, cfg)
    assert [(r.train_loss, r.val_mse) for r in a.history] == [(r.train_loss, r.val_mse) for r in b.history]
    for k in a.checkpoint.tensors:
        np.testing.assert_array_equal(a.checkpoint.tensors[k], b.checkpoint.tensors[k])


def test_divergence_names_sequence():
    seqs = small_dataset(1, frames=20)
    seqs["seq000"].diameters[3] = np.nan
    ds = DatasetSplit(("seq000",), (), (), (1.0, 0.0, 0.0))
    with pytest.raises(P.DivergenceError, match="seq000"):
        P.train(seqs, ds, P.TrainConfig(epochs=1, profile="test"))


def test_checkpoint_callback_cadence():
    seqs = small_dataset(2, frames=20)
    ds = DatasetSplit(tuple(seqs), (), (), (1.0, 0.0, 0.0))
    seen = []
    P.train(seqs, ds, P.TrainConfig(epochs=4, profile="test", checkpoint_every=2),
            on_checkpoint=lambda epoch, ck: seen.append((epoch, ck.optimizer_step)))
    assert seen == [(2, 4), (4, 8)]


def test_lambda_zero_beats_constant_predictor():
    seqs = P.make_dataset(4, seed=1, profile="test", frames=125)
    ds = DatasetSplit(tuple(seqs), (), (), (1.0, 0.0, 0.0))
    res = P.train(seqs, ds, P.TrainConfig(epochs=30, lr=1e-3, lam=0.0, seed=1, profile="test"))
    y = np.concatenate([s.diameters for s in seqs.values()]).astype(np.float64)
    fitted = np.mean([P.evaluate(res.model, {k: s}).mse_mean for k, s in seqs.items()])
    assert fitted < np.var(y)


# -- evaluation ------------------------------------------------------------------


def test_perfect_predictor():
    report = P.evaluate(constant_model(4.0), {"a": constant_phantom(4.0)})
    assert report.mse_mean == 0.0 and report.re_mean == 0.0


def test_half_predictor_relative_error():
    report = P.evaluate(constant_model(2.0, recurrent=False), {"a": constant_phantom(4.0)})
    assert report.re_mean == 50.0
    assert report.mse_mean == 4.0


def test_aggregates_are_means_over_sequences():
    seqs = {"a": constant_phantom(4.0, name="a"), "b": constant_phantom(5.0, name="b")}
    report = P.evaluate(constant_model(4.0), seqs)
    assert [s.mse for s in report.scores] == [0.0, 1.0]
    assert report.mse_mean == 0.5 and report.mse_std == 0.5
    assert report.re_mean == pytest.approx(10.0)
    assert len(report.frame_errors) == 40
    assert "MSE [mm^2]: 0.5000 (0.5000)" in report.summary()


def test_profile_mismatch_on_frame_size():
    big = generate(PhantomSpec(), 2, seed=0)
    with pytest.raises(P.ckpt_mod.ProfileMismatchError):
        P.evaluate(constant_model(4.0), {"big": big})


def test_relative_error_formula():
    assert P.relative_error([1.0, 3.0], [2.0, 2.0]) == 50.0


def test_mean_cyclic_loss_periodic_prediction_is_zero():
    seq = generate(PhantomSpec(speckle=0.0, gain_jitter=0.0), 100, seed=0, size=64, pixel_pitch=0.125)
    y = seq.diameters.astype(np.float64)
    report = P.report_from_scores([P.SequenceScore("a", 0.0, 0.0, y.copy(), y)])
    assert P.mean_cyclic_loss(report) == 0.0


# -- Kolmogorov-Smirnov -----------------------------------------------------------


def kolmogorov_sf(x, terms=200):
    return 2 * sum((-1) ** (k - 1) * math.exp(-2 * k * k * x * x) for k in range(1, terms + 1))


def test_ks_hand_values():
    same = P.ks_compare([0.1, 0.5, 0.9], [0.1, 0.5, 0.9])
    assert same.statistic == 0.0 and not same.significant
    assert P.ks_compare([0, 0, 0, 0], [1, 1, 1, 1]).statistic == 1.0
    assert P.ks_statistic([1, 2, 3], [1.5, 2.5, 3.5]) == pytest.approx(1 / 3, abs=1e-15)


def test_ks_bonferroni_threshold():
    res = P.ks_compare([1.0], [2.0])
    assert res.alpha == 0.05 / 7


def test_ks_pvalue_matches_series():
    rng = np.random.default_rng(0)
    a, b = rng.normal(0, 1, 300), rng.normal(0.3, 1, 250)
    res = P.ks_compare(a, b)
    en = 300 * 250 / 550
    assert res.p_value == pytest.approx(kolmogorov_sf(res.statistic * math.sqrt(en)), rel=1e-9)
    assert res.significant == (res.p_value < 0.05 / 7)


def test_ks_detects_shift():
    rng = np.random.default_rng(1)
    assert P.ks_compare(rng.normal(0, 1, 500), rng.normal(1, 1, 500)).significant


def test_ks_empty():
    with pytest.raises(ValueError):
        P.ks_compare([], [1.0])
