import numpy as np
import pytest
import torch

from stepstone.features import packet_features
from stepstone.metrics import chainlen_accuracy
from stepstone.model.chainlen import (ChainLenCNN, ChainLenConfig, chainlen_forward, mse,
                                      prepare_packets, random_crop, train_chainlen)
from stepstone.simulator import capture_points


SMALL = ChainLenConfig(channels=(8, 16), max_len=64, epochs=40, batch_size=16, augment=False)


def packets(n=48, seed=0, length=64):
    rng = np.random.default_rng(seed)
    x = np.zeros((n, 4, length), np.float32)
    for i in range(n):
        k = int(rng.integers(8, length))
        d = rng.choice([1.0, -1.0], k)
        x[i, 0, :k] = d
        x[i, 1, 1:k] = rng.exponential(0.01, k - 1)
        x[i, 2, :k] = d * rng.integers(40, 1500, k)
        x[i, 3, 1:k] = d[1:] - d[:-1]
    return x


def test_mse_example():
    assert mse([2.4], [2]) == pytest.approx(0.16)


def test_rounding_counts_as_correct():
    assert chainlen_accuracy([[2.4, 1.6]], [[2, 2]]) == (1.0, 1.0, 1.0)


def test_constant_labels_learned():
    x = packets()
    y = np.tile([[2.0, 3.0]], (len(x), 1))
    model, log = train_chainlen(x, y, ChainLenConfig(**{**SMALL.to_dict(), "lr": 1e-2}))
    pred = chainlen_forward(model, x)
    assert chainlen_accuracy(pred, y) == (1.0, 1.0, 1.0)
    assert log[-1]["mse"] < log[0]["mse"]


def test_forward_shapes(burst_model):
    model = ChainLenCNN(SMALL)
    x = packets(3)
    assert chainlen_forward(model, x).shape == (3, 2)
    from stepstone.simulator import SimConfig, generate_chains

    ch = generate_chains(SimConfig(), 1, 0, burst_model)[0]
    pt = packet_features(ch.captures[capture_points(ch.config.n_links)[1]], 64)
    out = chainlen_forward(model, pt)
    assert out.shape == (2,) and np.isfinite(out).all()


def test_padding_does_not_change_prediction():
    # the pooled average only covers positions holding packets
    model = ChainLenCNN(SMALL).eval()
    x = packets(2, length=64)
    wide = np.zeros((2, 4, 256), np.float32)
    wide[:, :, :64] = x
    assert np.allclose(chainlen_forward(model, x), chainlen_forward(model, wide), atol=0.5)


def test_prepare_scales_rows():
    x = packets(1)
    p = prepare_packets(x)
    assert np.array_equal(p[0, 0], x[0, 0])
    assert np.allclose(p[0, 2], x[0, 2] / 100)
    assert x[0, 2].any()  # input untouched


def test_random_crop_keeps_alignment():
    x = torch.from_numpy(packets(8, seed=2))
    out = random_crop(x, np.random.default_rng(0))
    for i in range(8):
        n = int((x[i, 0] != 0).sum())
        m = int((out[i, 0] != 0).sum())
        k = n - m
        assert 0 <= k <= n // 2
        assert torch.equal(out[i, 0, :m], x[i, 0, k:n])
        assert out[i, 1, 0] == 0 and out[i, 3, 0] == 0


def test_config_round_trip():
    cfg = ChainLenConfig(channels=(4, 8, 16), epochs=3)
    assert ChainLenConfig.from_dict(cfg.to_dict()) == cfg
