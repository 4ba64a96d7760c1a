import json

import numpy as np
import pytest

from zlalign.data import (
    QWEN2_VL_TEMPLATE,
    CaptionRecord,
    ImageRecord,
    build_prompt,
    build_vocab,
    fingerprint,
    load_caption_manifest,
    load_image,
    load_image_manifest,
    make_synthetic_records,
    mix_records,
    render_scene,
    write_manifest,
)
from zlalign.errors import ConfigError, ValidationError


def test_caption_manifest_preserves_order(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"image": "b.png", "captions": ["x"]}\n\n{"image": "a.png", "captions": ["y", "z"]}\n')
    recs = load_caption_manifest(path)
    assert [r.image_ref for r in recs] == ["b.png", "a.png"]
    assert recs[1].captions == ("y", "z") and recs[0].base_dir == str(tmp_path)


def test_manifest_errors_name_the_line(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"image": "a.png", "captions": ["x"]}\n{"image": 3}\n')
    with pytest.raises(ValidationError, match="line 2"):
        load_caption_manifest(path)
    path.write_text('{"image": "a.png", "captions": ["x"]}\n{not json\n')
    with pytest.raises(ValidationError, match="line 2"):
        load_caption_manifest(path)
    path.write_text('{"image": "a.png", "captions": []}\n')
    with pytest.raises(ValidationError, match="no captions"):
        load_caption_manifest(path)
    assert load_caption_manifest(path, require_captions=False)[0].captions == ()


def test_image_manifest(tmp_path):
    path = tmp_path / "i.jsonl"
    path.write_text("")
    with pytest.warns(UserWarning, match="empty"):
        assert load_image_manifest(path) == []
    path.write_text('{"image": "a.png", "captions": ["x"]}\n')
    with pytest.raises(ValidationError):
        load_image_manifest(path)
    path.write_text('{"image": "a.png"}\n')
    assert load_image_manifest(path) == [ImageRecord("a.png", "train", str(tmp_path))]


def test_write_manifest_roundtrip(tmp_path):
    recs = make_synthetic_records(5, seed=2)
    back = load_caption_manifest(write_manifest(tmp_path / "m.jsonl", recs))
    assert [(r.image_ref, r.captions) for r in back] == [(r.image_ref, r.captions) for r in recs]
    assert fingerprint(back) == fingerprint(recs)


def test_prompts():
    assert build_prompt("smolvlm").render() == ""
    qwen = build_prompt("qwen2-vl")
    assert qwen.template == QWEN2_VL_TEMPLATE
    assert "<|image_start|>pix<|image_end|>" in qwen.render("pix")
    with pytest.raises(ConfigError):
        build_prompt("llava")


def test_vocab():
    recs = [CaptionRecord("x", ("b a a", "c b a"))]
    vocab = build_vocab([recs], 6)
    assert list(vocab)[4:] == ["a", "b"]
    assert build_vocab([recs], 6) == vocab
    assert list(build_vocab([recs], 10))[4:] == ["a", "b", "c"]
    with pytest.raises(ConfigError):
        build_vocab([recs], 3)
    with pytest.raises(ConfigError):
        build_vocab([], 10)


def test_mix_records():
    a, b = list("abcd"), list("xy")
    assert mix_records(a, b) == ["a", "x", "b", "y", "c", "d"]
    assert mix_records(a, b, (2, 1), n=4) == ["a", "b", "x", "c"]
    assert mix_records(a, b, (0, 1)) == ["x", "y"]
    with pytest.raises(ConfigError):
        mix_records(a, b, (0, 0))


def test_synthetic_records_deterministic():
    a, b = make_synthetic_records(10, seed=3), make_synthetic_records(10, seed=3)
    assert a == b
    assert make_synthetic_records(10, seed=4) != a
    assert all(len(r.captions) == 2 for r in a)
    unl = make_synthetic_records(3, seed=3, labeled=False)
    assert all(isinstance(r, ImageRecord) for r in unl)
    img = load_image(a[0])
    assert img.shape == (32, 32, 3) and np.isfinite(img).all()
    assert np.array_equal(img, render_scene(int(a[0].image_ref.split(":")[1])))


def test_load_image_files(tmp_path):
    arr = np.random.default_rng(0).uniform(size=(8, 6, 3))
    np.save(tmp_path / "x.npy", arr)
    assert np.array_equal(load_image(ImageRecord("x.npy", base_dir=str(tmp_path))), arr)
    from PIL import Image

    Image.fromarray((arr * 255).astype(np.uint8)).save(tmp_path / "x.png")
    png = load_image(ImageRecord(str(tmp_path / "x.png")))
    assert png.shape == (8, 6, 3) and png.max() <= 1.0
    with pytest.raises(ValidationError):
        load_image(ImageRecord("synthetic:abc"))
