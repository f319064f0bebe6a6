import numpy as np
import pytest

from pulsetrace import tensor as T
from pulsetrace.encoder import (
    Encoder,
    EncoderConfig,
    LayerSpec,
    ci_config,
    encode_frame,
    full_config,
    toy_config,
)
from pulsetrace.tensor import ConvSpec, ShapeError

from gradcheck import max_rel_error, numerical_grad


def test_full_config_shape_theorem():
    cfg = full_config()
    assert cfg.output_shape == (256, 13, 13)
    assert cfg.feature_size == 43264
    out = encode_frame(np.zeros((1, 128, 128), np.float32), Encoder(cfg))
    assert out.shape == (256, 13, 13)


def test_ci_config_shape():
    enc = Encoder(ci_config())
    frame = np.random.default_rng(0).random((1, 64, 64)).astype(np.float32)
    assert enc.forward(frame).shape == (32, 6, 6)


def test_inconsistent_channels_rejected():
    with pytest.raises(ShapeError):
        EncoderConfig(16, (LayerSpec(ConvSpec(1, 3, (3, 3))), LayerSpec(ConvSpec(4, 4, (3, 3)))))


def test_degenerate_chain_rejected():
    with pytest.raises(T.DegenerateOutputError):
        EncoderConfig(4, (LayerSpec(ConvSpec(1, 2, (3, 3)), pool=(2, 2)), LayerSpec(ConvSpec(2, 2, (3, 3)))))


def test_wrong_frame_size():
    with pytest.raises(ShapeError):
        Encoder(ci_config()).forward(np.zeros((1, 32, 32), np.float32))


def test_zero_weights_zero_output():
    enc = Encoder(ci_config())
    for prm in enc.params.values():
        prm.value[...] = 0
    out = enc.forward(np.random.default_rng(1).random((1, 64, 64)).astype(np.float32))
    assert not out.any()


def test_stack_matches_single_frames():
    enc = Encoder(ci_config(), np.random.default_rng(2))
    frames = np.random.default_rng(3).random((3, 1, 64, 64)).astype(np.float32)
    stacked = enc.forward(frames)
    for k in range(3):
        np.testing.assert_allclose(stacked[k], enc.forward(frames[k]), rtol=1e-5, atol=1e-6)


def test_deterministic():
    frame = np.random.default_rng(4).random((1, 64, 64)).astype(np.float32)
    a = Encoder(ci_config(), np.random.default_rng(5)).forward(frame)
    b = Encoder(ci_config(), np.random.default_rng(5)).forward(frame)
    np.testing.assert_array_equal(a, b)


def _toy(seed=6):
    enc = Encoder(toy_config(), np.random.default_rng(seed), dtype=np.float64)
    for prm in enc.params.values():
        if prm.value.ndim == 1:
            prm.value[...] = np.random.default_rng(seed + 1).uniform(-0.1, 0.1, prm.value.shape)
    return enc


def test_backward_without_forward():
    with pytest.raises(RuntimeError):
        _toy().backward(np.zeros((4, 3, 3)))


def test_zero_upstream_zero_grads():
    enc = _toy()
    enc.forward(np.random.default_rng(7).random((1, 16, 16)), train=True)
    enc.backward(np.zeros((4, 3, 3)))
    assert all(not p.grad.any() for p in enc.params.values())


def test_finite_differences_toy():
    enc = _toy()
    x = np.random.default_rng(8).random((1, 16, 16))
    enc.forward(x, train=True)
    dx = enc.backward(np.ones((4, 3, 3)))

    def f():
        return float(enc.forward(x).sum())

    assert max_rel_error(dx, numerical_grad(f, x)) <= 1e-4
    for key, prm in enc.params.items():
        assert max_rel_error(prm.grad, numerical_grad(f, prm.value)) <= 1e-4, key


def test_two_backwards_double_grads():
    enc = _toy()
    enc.forward(np.random.default_rng(9).random((1, 16, 16)), train=True)
    up = np.random.default_rng(10).standard_normal((4, 3, 3))
    enc.backward(up)
    once = {k: p.grad.copy() for k, p in enc.params.items()}
    enc.backward(up)
    for k, p in enc.params.items():
        np.testing.assert_array_equal(p.grad, 2 * once[k])


def test_translation_response():
    cfg = EncoderConfig(16, (LayerSpec(ConvSpec(1, 2, (3, 3), (2, 2), (1, 1))),))
    enc = Encoder(cfg, np.random.default_rng(11), dtype=np.float64)
    image = np.random.default_rng(12).random((1, 20, 16))
    a = enc.forward(image[:, :16])
    b = enc.forward(image[:, 2:18])
    # one stride unit of input shift = one output row; skip rows touching padding
    np.testing.assert_array_equal(b[:, 1:-2], a[:, 2:-1])
