import numpy as np
import pytest
import torch

from stepstone.model.fen import FEN, ChainHead, ConfigError, CorrelationHead, FenConfig


def zeros(cfg, b=2):
    return torch.zeros(b, cfg.input_channels, cfg.input_len)


def test_default_shapes():
    cfg = FenConfig()
    assert cfg.n_tokens == 400 and cfg.n_windows == 117
    fen = FEN(cfg).eval()
    x = torch.randn(2, 9, 1200)
    emb, tok = fen(x)
    assert emb.shape == (2, 117, 64) and tok is None
    assert fen.tokens(x).shape == (2, 400, 96)


def test_window_span():
    assert FenConfig().window_span(0.03) == pytest.approx(4.5)


def test_keys_are_strided():
    cfg = FenConfig()
    fen = FEN(cfg).eval()
    attn = fen.blocks[0].mixer
    t = torch.zeros(1, cfg.hidden_dim, cfg.n_tokens)
    assert attn.kv_conv(t).shape[-1] == 200
    assert attn.q_conv(t).shape[-1] == 400


def test_chain_token_adds_one_token():
    base, multi = FenConfig.tiny(), FenConfig.tiny(chain_token=True)
    x = torch.randn(3, 9, 60)
    fa, fb = FEN(base).eval(), FEN(multi).eval()
    assert fb.tokens(x).shape[1] == fa.tokens(x).shape[1] + 1
    emb_a, _ = fa(x)
    emb_b, tok = fb(x)
    assert emb_a.shape == emb_b.shape
    assert tok.shape == (3, multi.hidden_dim)
    assert ChainHead(multi.hidden_dim)(tok).shape == (3, 2)


@pytest.mark.parametrize("preset", [FenConfig, FenConfig.greentea, FenConfig.hotwater])
def test_eval_is_bit_reproducible(preset):
    cfg = preset(depth=2)
    fen = FEN(cfg).eval()
    x = torch.randn(2, 9, 1200)
    with torch.no_grad():
        assert torch.equal(fen(x)[0], fen(x)[0])


def test_train_mode_uses_dropout():
    torch.manual_seed(0)
    fen = FEN(FenConfig.tiny(block_dropout=0.5)).train()
    x = torch.randn(2, 9, 60)
    assert not torch.equal(fen(x)[0], fen(x)[0])


def test_hotwater_constant_input():
    cfg = FenConfig.hotwater()
    with torch.no_grad():
        emb, _ = FEN(cfg).eval()(zeros(cfg))
    inner = emb[:, 1:-1]
    assert torch.allclose(inner, inner[:, :1].expand_as(inner), atol=1e-6)


def test_mhsa_constant_input_interior():
    cfg = FenConfig(depth=3)
    with torch.no_grad():
        emb, _ = FEN(cfg).eval()(zeros(cfg, 1))
    inner = emb[:, 5:-5]
    assert torch.allclose(inner, inner[:, :1].expand_as(inner), atol=1e-5)


def test_shape_mismatch():
    fen = FEN(FenConfig.tiny())
    with pytest.raises(ConfigError):
        fen(torch.zeros(1, 9, 61))
    with pytest.raises(ConfigError):
        fen(torch.zeros(1, 8, 60))


def test_config_validation():
    with pytest.raises(ConfigError):
        FenConfig(mixer="lstm")
    with pytest.raises(ConfigError):
        FenConfig(hidden_dim=30, head_dim=16)
    with pytest.raises(ConfigError):
        FenConfig(input_len=90)
    cfg = FenConfig.greentea(depth=4)
    assert FenConfig.from_dict(cfg.to_dict()) == cfg


def test_head_output_range():
    head = CorrelationHead(117).eval()
    sims = torch.from_numpy(np.random.default_rng(0).uniform(-1, 1, (64, 117))).float()
    with torch.no_grad():
        p = head(sims)
    assert p.shape == (64,)
    assert ((p > 0) & (p < 1)).all()
