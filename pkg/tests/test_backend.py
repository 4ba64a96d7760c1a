import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from zlalign.backend import (
    EOS,
    UNK,
    BackendConfig,
    LinearRecoverableBackend,
    ToyBackend,
    WordTokenizer,
    pretrain_captioner,
)
from zlalign.data import build_vocab, load_image, make_synthetic_records
from zlalign.errors import CapacityError, CheckpointError, ConfigError, InvalidInputError, ShapeError, VocabRangeError


@pytest.fixture(scope="module")
def backend():
    vocab = build_vocab([make_synthetic_records(50, seed=1)], 64)
    return ToyBackend(BackendConfig(vocab_size=len(vocab)), vocab)


def test_config_validation():
    with pytest.raises(ConfigError):
        BackendConfig(vocab_size=3)
    with pytest.raises(ConfigError):
        BackendConfig(vision_dim=0)
    with pytest.raises(ConfigError):
        BackendConfig(vision_patch_count=15)
    with pytest.raises(ConfigError):
        BackendConfig(hidden_dim=33, n_heads=2)
    with pytest.raises(ConfigError):
        BackendConfig(vision_patch_count=16, max_seq_len=16)
    with pytest.raises(ConfigError):
        BackendConfig.from_dict({"bogus": 1})


def test_same_config_same_weights():
    a, b = ToyBackend(BackendConfig(seed=5)), ToyBackend(BackendConfig(seed=5))
    assert a.weights_checksum() == b.weights_checksum()
    for (na, ta), (nb, tb) in zip(a.base_state().items(), b.base_state().items()):
        assert na == nb and torch.equal(ta, tb)
    assert ToyBackend(BackendConfig(seed=6)).weights_checksum() != a.weights_checksum()


def test_vision_encode_contract(backend):
    img = np.zeros((32, 32))
    out = backend.vision_encode(img)
    assert out.shape == (16, 32)
    assert torch.isfinite(out).all()
    assert torch.equal(out, backend.vision_encode(img))
    bad = np.zeros((32, 32, 3))
    bad[3, 4, 1] = np.nan
    with pytest.raises(InvalidInputError):
        backend.vision_encode(bad)
    for shape in [(0, 5), (4, 4, 2), (2, 2, 2, 3)]:
        with pytest.raises(ShapeError):
            backend.vision_encode(np.zeros(shape))
    with pytest.raises(ShapeError):
        backend.vision_encode(np.zeros((2000, 10)))


def test_vision_encode_channel_handling(backend):
    rgb = np.random.default_rng(0).uniform(size=(24, 20, 3))
    rgba = np.concatenate([rgb, np.ones((24, 20, 1))], axis=2)
    assert torch.equal(backend.vision_encode(rgb), backend.vision_encode(rgba))
    gray = rgb[:, :, 0]
    assert torch.equal(backend.vision_encode(gray), backend.vision_encode(np.repeat(gray[:, :, None], 3, axis=2)))


def test_batch_encode_mixed_sizes(backend):
    a, b = np.random.default_rng(1).uniform(size=(32, 32, 3)), np.random.default_rng(2).uniform(size=(20, 28, 3))
    batch = backend._encode_batch([a, b])
    assert batch.shape == (2, 16, 32)
    assert torch.allclose(batch[1], backend.vision_encode(b), atol=1e-12)


def test_embed_text(backend):
    assert backend.embed_text([]).shape == (0, 32)
    e = backend.embed_text([7, 7])
    assert torch.equal(e[0], e[1])
    with pytest.raises(VocabRangeError):
        backend.embed_text([backend.config.vocab_size])
    with pytest.raises(VocabRangeError):
        backend.embed_text([-1])


def test_trunk_forward_contract(backend):
    x = torch.randn(1, 32, dtype=torch.float64)
    assert backend.trunk_forward(x).shape == (1, 32)
    with pytest.raises(ShapeError):
        backend.trunk_forward(torch.randn(3, 31, dtype=torch.float64))
    x = torch.randn(5, 32, dtype=torch.float64)
    x[2, 3] = float("nan")
    with pytest.raises(InvalidInputError):
        backend.trunk_forward(x)


def test_trunk_causality(backend):
    x = torch.randn(8, 32, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    full = backend.trunk_forward(x)
    for k in range(8):
        assert torch.allclose(backend.trunk_forward(x[: k + 1]), full[: k + 1], atol=1e-12, rtol=0)
    y = x.clone()
    y[5] += 1.0
    pert = backend.trunk_forward(y)
    assert torch.equal(pert[:5], full[:5])
    assert not torch.equal(pert[5], full[5])


def test_generation_contract(backend):
    img = load_image(make_synthetic_records(1, seed=3)[0])
    cap, hidden = backend.generate_caption(img, [], 1)
    assert len(cap) <= 1 and hidden.shape[0] == len(cap)
    cap1, h1 = backend.generate_caption(img, [], 10)
    cap2, h2 = backend.generate_caption(img, [], 10)
    assert cap1 == cap2 and torch.equal(h1, h2)
    assert h1.shape == (len(cap1), backend.hidden_dim)
    assert EOS not in cap1
    with pytest.raises(CapacityError):
        backend.generate_caption(img, [5] * 40, 10)


def test_generation_hidden_matches_teacher_forcing(backend):
    imgs = [load_image(r) for r in make_synthetic_records(4, seed=3)]
    gens = backend.generate_batch(imgs, [], 8)
    forced = backend.caption_hidden(imgs, [], [c for c, _ in gens])
    for (cap, h), f in zip(gens, forced):
        assert h.shape == f.shape
        assert torch.allclose(h, f, atol=1e-10)


def test_batched_generation_matches_single(backend):
    imgs = [load_image(r) for r in make_synthetic_records(5, seed=4)]
    batch = backend.generate_batch(imgs, [], 8)
    for im, (cap, _) in zip(imgs, batch):
        assert backend.generate_caption(im, [], 8)[0] == cap


def test_tokenize(backend):
    assert backend.tokenize("") == []
    assert backend.tokenize("The red") == backend.tokenize("the  red")
    assert UNK in backend.tokenize("red zebraquokka")
    s = "a  small red   circle"
    assert backend.detokenize(backend.tokenize(s)) == " ".join(s.split())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["a", "red", "circle", "on", "the", "left", "blue"]), max_size=10))
def test_tokenize_roundtrip_property(words):
    vocab = {"<pad>": 0, "<bos>": 1, "<eos>": 2, "<unk>": 3, "a": 4, "red": 5, "circle": 6, "on": 7, "the": 8, "left": 9, "blue": 10}
    tok = WordTokenizer(vocab)
    text = "  ".join(words)
    assert tok.decode(tok.encode(text)) == " ".join(words)


def test_save_load_roundtrip(backend, tmp_path):
    path = tmp_path / "b.pt"
    backend.save(path)
    side = json.loads((tmp_path / "b.pt.json").read_text())
    assert side["config_hash"] == backend.config.hash()
    loaded = ToyBackend.load(path)
    assert loaded.weights_checksum() == backend.weights_checksum()
    assert loaded.tokenizer.vocab == backend.tokenizer.vocab
    side["config_hash"] = "0" * 64
    (tmp_path / "b.pt.json").write_text(json.dumps(side))
    with pytest.raises(CheckpointError):
        ToyBackend.load(path)
    with pytest.raises(CheckpointError):
        ToyBackend.load(tmp_path / "missing.pt")


def test_pretraining_learns_and_refreezes():
    recs = make_synthetic_records(40, seed=1)
    vocab = build_vocab([recs], 64)
    b = ToyBackend(BackendConfig(vocab_size=len(vocab)), vocab)
    losses = pretrain_captioner(b, recs, load_image, steps=30, batch_size=16)
    assert losses[-1] < losses[0]
    assert not any(p.requires_grad for p in b.model.parameters())
    assert not b.model.training


def test_linear_recoverable_backend():
    lb = LinearRecoverableBackend(8, seed=1)
    imgs = lb.images()
    (cap, hidden), = lb.generate_batch([imgs[3]], [], 4)
    assert cap == [7] and lb.detokenize(cap) == "item3"
    assert lb.tokenize("item3") == [7]
    assert hidden.shape == (1, 16)
    assert torch.equal(lb.trunk_forward(lb.embed_text([7])), lb.embed_text([7]))
    with pytest.raises(VocabRangeError):
        lb.embed_text([100])
