import numpy as np
import pytest
import torch

from zlalign.backend import BackendConfig, ToyBackend
from zlalign.errors import ConfigError, ShapeError
from zlalign.lora import (
    AdapterSet,
    LoraAdapter,
    LoraConfig,
    attach_lora,
    default_targets,
    detach_lora,
    lora_forward,
    merge_lora,
    set_lora_enabled,
)


def _backend(d=32, seed=0):
    return ToyBackend(BackendConfig(vision_dim=d, text_dim=d, hidden_dim=d, vocab_size=16, seed=seed))


def _images(n=4):
    rng = np.random.default_rng(0)
    return [rng.uniform(size=(16, 16, 3)) for _ in range(n)]


def test_defaults():
    cfg = LoraConfig()
    assert (cfg.rank, cfg.alpha, cfg.dropout, cfg.bias) == (32, 64.0, 0.1, False)
    assert cfg.scaling == 2.0
    with pytest.raises(ConfigError):
        LoraConfig(bias=True)
    with pytest.raises(ConfigError):
        LoraConfig(dropout=1.0)
    with pytest.raises(ConfigError):
        LoraConfig(rank=0)


def test_shapes_rank32_on_64x64():
    b = _backend(64)
    aset = attach_lora(b)
    ad = aset["trunk.0.attn.q"]
    assert ad.A.shape == (32, 64) and ad.B.shape == (64, 32)
    assert torch.count_nonzero(ad.B) == 0
    assert set(aset.adapters) == set(default_targets(b))
    assert len(aset) == 4 * b.config.trunk_layers


def test_attach_errors():
    b = _backend()
    with pytest.raises(ConfigError, match="unknown LoRA target"):
        attach_lora(b, LoraConfig(target_names=("trunk.0.attn.z",)))
    attach_lora(b, LoraConfig(target_names=("trunk.0.attn.q",)))
    with pytest.raises(ConfigError, match="already attached"):
        attach_lora(b, LoraConfig(target_names=("trunk.0.attn.q",)))


def test_attach_then_generation_identical():
    b = _backend()
    imgs = _images()
    before = b.generate_batch(imgs, [], 6)
    attach_lora(b)
    after = b.generate_batch(imgs, [], 6)
    assert all(c1 == c2 and torch.equal(h1, h2) for (c1, h1), (c2, h2) in zip(before, after))


def test_lora_forward_examples():
    cfg = LoraConfig(rank=1, alpha=1.0, dropout=0.0)
    ad = LoraAdapter(2, 2, cfg, torch.Generator().manual_seed(0))
    W = torch.eye(2, dtype=torch.float64)
    x = torch.tensor([[3.0, -2.0], [0.5, 4.0]], dtype=torch.float64)
    assert torch.equal(lora_forward(ad, W, x), x @ W.T)  # B = 0
    with torch.no_grad():
        ad.A.copy_(torch.tensor([[1.0, 0.0]]))
        ad.B.copy_(torch.tensor([[1.0], [0.0]]))
    out = lora_forward(ad, W, x)
    assert torch.equal(out, x + torch.stack([x[:, 0], torch.zeros(2, dtype=torch.float64)], dim=1))
    ad.enabled = False
    assert torch.equal(lora_forward(ad, W, x), x @ W.T)
    with pytest.raises(ShapeError):
        lora_forward(ad, torch.eye(3, dtype=torch.float64), x)


def test_dropout_only_in_training():
    cfg = LoraConfig(rank=2, alpha=2.0, dropout=0.5)
    gen = torch.Generator().manual_seed(0)
    ad = LoraAdapter(4, 4, cfg, gen)
    with torch.no_grad():
        ad.B.normal_(generator=torch.Generator().manual_seed(1))
    W = torch.eye(4, dtype=torch.float64)
    x = torch.ones(3, 4, dtype=torch.float64)
    e1, e2 = lora_forward(ad, W, x), lora_forward(ad, W, x)
    assert torch.equal(e1, e2)
    t1 = lora_forward(ad, W, x, training=True, generator=gen)
    t2 = lora_forward(ad, W, x, training=True, generator=gen)
    assert not torch.equal(t1, t2)


def test_toggle_roundtrip_and_noop():
    set_lora_enabled(None, False)  # no adapters: no-op
    b = _backend()
    imgs = _images()
    base = b.generate_batch(imgs, [], 6)
    aset = attach_lora(b)
    with torch.no_grad():
        for ad in aset.adapters.values():
            ad.B.normal_(std=0.5, generator=torch.Generator().manual_seed(2))
    tuned = b.generate_batch(imgs, [], 6)
    state = aset.checksum()
    set_lora_enabled(aset, False)
    off = b.generate_batch(imgs, [], 6)
    assert all(c1 == c2 and torch.equal(h1, h2) for (c1, h1), (c2, h2) in zip(base, off))
    set_lora_enabled(aset, True)
    assert aset.checksum() == state
    again = b.generate_batch(imgs, [], 6)
    assert all(c1 == c2 and torch.equal(h1, h2) for (c1, h1), (c2, h2) in zip(tuned, again))


def test_merge():
    b = _backend()
    aset = attach_lora(b)
    base = {k: v.clone() for k, v in b.base_state().items()}
    merge_lora(aset)  # B == 0
    for k, v in b.base_state().items():
        assert torch.equal(v, base[k])
    with pytest.raises(ConfigError, match="already merged"):
        merge_lora(aset)

    b = _backend(seed=1)
    aset = attach_lora(b)
    with torch.no_grad():
        for ad in aset.adapters.values():
            ad.B.normal_(std=0.1, generator=torch.Generator().manual_seed(3))
    x = torch.randn(10, 32, dtype=torch.float64, generator=torch.Generator().manual_seed(4))
    adapted = b.trunk_forward(x)
    merge_lora(aset)
    assert float((b.trunk_forward(x) - adapted).detach().abs().max()) < 1e-6


def test_merge_requires_enabled():
    b = _backend()
    aset = attach_lora(b)
    set_lora_enabled(aset, False)
    with pytest.raises(ConfigError):
        merge_lora(aset)


def test_detach_restores_base_and_state_roundtrip():
    b = _backend()
    x = torch.randn(5, 32, dtype=torch.float64)
    base = b.trunk_forward(x)
    aset = attach_lora(b)
    with torch.no_grad():
        for ad in aset.adapters.values():
            ad.B.fill_(0.1)
    assert not torch.equal(b.trunk_forward(x), base)
    state = aset.state_dict()
    detach_lora(b)
    assert b.adapters is None
    assert torch.equal(b.trunk_forward(x), base)
    fresh = attach_lora(b)
    fresh.load_state_dict(state)
    assert fresh.checksum() == aset.checksum()
    assert isinstance(fresh, AdapterSet)
