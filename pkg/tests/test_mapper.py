import numpy as np
import pytest
import torch

from oracles import central_difference, rel_err
from zlalign.backend import BackendConfig, ToyBackend
from zlalign.errors import ConfigError, DegenerateOutputError, InvalidInputError, ShapeError
from zlalign.mapper import (
    MapperConfig,
    MapperParams,
    init_mapper,
    map_generation_hidden,
    mapper_forward,
    text_features_g,
    text_features_gt,
)


@pytest.fixture(scope="module")
def backend():
    return ToyBackend(BackendConfig(vision_dim=8, text_dim=8, hidden_dim=8, vocab_size=16, max_seq_len=32))


def test_init_is_deterministic_with_chain_shapes():
    cfg = MapperConfig(width=4, in_dim=8, out_dim=6, seed=3)
    a, b = init_mapper(cfg), init_mapper(cfg)
    assert [w.shape for w in a.weights] == [(8, 4), (4, 6)]
    for x, y in zip(a.weights + a.biases, b.weights + b.biases):
        assert torch.equal(x, y)
    assert all(torch.count_nonzero(bias) == 0 for bias in a.biases)
    for w, (fan_in, _) in zip(a.weights, cfg.layer_dims):
        assert float(w.abs().max()) <= 1 / np.sqrt(fan_in)
    assert init_mapper(MapperConfig(width=4, in_dim=8, out_dim=6, seed=4)).checksum() != a.checksum()


def test_config_checks():
    with pytest.raises(ConfigError):
        MapperConfig(width=0, in_dim=4, out_dim=4)
    with pytest.raises(ConfigError):
        MapperConfig(width=4, in_dim=4, out_dim=4, activation="relu6")
    with pytest.warns(UserWarning, match="depth"):
        cfg = MapperConfig(width=4, in_dim=4, out_dim=3, depth=3)
    assert cfg.layer_dims == [(4, 4), (4, 4), (4, 3)]


def test_forward_examples():
    cfg = MapperConfig(width=5, in_dim=3, out_dim=2)
    zero = MapperParams(cfg, [torch.zeros(3, 5, dtype=torch.float64), torch.zeros(5, 2, dtype=torch.float64)], [torch.zeros(5, dtype=torch.float64), torch.zeros(2, dtype=torch.float64)])
    x = torch.randn(4, 3, dtype=torch.float64)
    assert torch.count_nonzero(mapper_forward(zero, x)) == 0
    p = init_mapper(cfg)
    assert mapper_forward(p, x[:1]).shape == (1, 2)
    with pytest.raises(ShapeError):
        mapper_forward(p, torch.randn(2, 4, dtype=torch.float64))


def test_last_layer_homogeneity():
    p = init_mapper(MapperConfig(width=6, in_dim=4, out_dim=3, seed=1))
    x = torch.randn(5, 4, dtype=torch.float64)
    doubled = p.clone()
    doubled.weights[-1] = doubled.weights[-1] * 2
    assert torch.equal(mapper_forward(doubled, x), 2 * mapper_forward(p, x))


def test_forward_gradient_fd():
    p = init_mapper(MapperConfig(width=4, in_dim=3, out_dim=2, seed=2)).requires_grad_(True)
    x = torch.randn(3, 3, dtype=torch.float64)
    (g,) = torch.autograd.grad(mapper_forward(p, x).sum(), [p.weights[0]])
    for idx in [(0, 0), (1, 2), (2, 3)]:
        num = central_difference(lambda: mapper_forward(p, x).sum(), p.weights[0].data, idx)
        assert rel_err(float(g[idx]), num) < 1e-4


def test_text_features_gt_composition(backend):
    p = init_mapper(MapperConfig(width=6, in_dim=8, out_dim=8))
    caption = [4, 9, 5]
    out = text_features_gt(backend, p, caption)
    assert torch.equal(out, mapper_forward(p, backend.trunk_forward(backend.embed_text(caption))))
    assert out.shape[0] == 3
    assert torch.equal(out, text_features_gt(backend, p, caption))
    with pytest.raises(InvalidInputError):
        text_features_gt(backend, p, [])


def test_text_features_g(backend):
    p = init_mapper(MapperConfig(width=6, in_dim=8, out_dim=8))
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    feats, cap = text_features_g(backend, p, img, [], 6)
    assert feats.shape[0] == len(cap)
    feats2, cap2 = text_features_g(backend, p, img, [], 6)
    assert cap == cap2 and torch.equal(feats, feats2)
    _, hidden = backend.generate_caption(img, [], 6)
    assert torch.equal(feats, mapper_forward(p, hidden))


def test_text_features_g_degenerate():
    class Mute:
        def generate_caption(self, image, prompt, max_new_tokens):
            return [], torch.zeros(0, 8, dtype=torch.float64)

    p = init_mapper(MapperConfig(width=6, in_dim=8, out_dim=8))
    with pytest.raises(DegenerateOutputError):
        text_features_g(Mute(), p, np.zeros((4, 4)), [], 3)


def test_reapply_trunk_switch(backend):
    plain = init_mapper(MapperConfig(width=6, in_dim=8, out_dim=8))
    again = init_mapper(MapperConfig(width=6, in_dim=8, out_dim=8, reapply_trunk=True))
    h = torch.randn(3, 8, dtype=torch.float64)
    assert torch.equal(map_generation_hidden(backend, plain, h), mapper_forward(plain, h))
    assert torch.equal(map_generation_hidden(backend, again, h), mapper_forward(again, backend.trunk_forward(h)))
