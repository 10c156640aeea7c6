import json

import numpy as np
import pytest
import torch

from conceptfuse.data import FACE_BOX, load_image
from conceptfuse.errors import ConfigurationError, DomainError, OverwriteError, PluginError
from conceptfuse.generation import (
    GenerationRequest, generate, postprocess, read_sidecar, request_from_dict, request_to_dict, sampling_timesteps,
    write_outputs,
)
from conceptfuse.plugins import POSTPROCESSORS, register_postprocessor

from .helpers import pearson


def _backend(backend):
    backend.add_concept("source", "<v1>", "person")
    backend.add_concept("reference", "<v2>", "style")
    return backend


FAST = dict(num_denoise_steps=8)


def test_same_request_bit_identical(backend):
    b = _backend(backend)
    req = GenerationRequest(num_images=2, seed=3, **FAST)
    a, _ = generate(b, req)
    c, _ = generate(b, req)
    assert all(torch.equal(x, y) for x, y in zip(a, c))
    other, _ = generate(b, GenerationRequest(num_images=2, seed=4, **FAST))
    assert not torch.equal(a[0], other[0])


def test_images_in_range_and_shape(backend):
    raw, post = generate(_backend(backend), GenerationRequest(num_images=2, **FAST))
    assert raw is post
    assert all(x.shape == (3, 32, 32) and float(x.abs().max()) <= 1.0 for x in raw)


def test_write_outputs_count_and_sidecars(tmp_path, backend):
    req = GenerationRequest(num_images=3, extra="wearing sunglasses", seed=5, **FAST)
    paths = write_outputs(tmp_path, _backend(backend), req, checkpoint_digest="abc")
    assert [p.name for p in paths] == ["img_000.png", "img_001.png", "img_002.png"]
    side = read_sidecar(paths[1])
    assert side["prompt"] == "a photo of <v1> person in the <v2> style, wearing sunglasses"
    assert side["index"] == 1 and side["seed"] == 5 and side["checkpoint_digest"] == "abc"
    with pytest.raises(OverwriteError):
        write_outputs(tmp_path, backend, req)


def test_saved_image_matches_sample(tmp_path, backend):
    req = GenerationRequest(num_images=1, **FAST)
    raw, _ = generate(_backend(backend), req)
    (path,) = write_outputs(tmp_path, backend, req)
    assert float((load_image(path) - raw[0]).abs().max()) <= 1 / 127.5 + 1e-6


def test_postprocess_contracts():
    img = torch.rand(3, 32, 32) * 2 - 1
    assert torch.equal(postprocess(img, []), img)
    assert postprocess(img, ["upscale2x"]).shape == (3, 64, 64)
    a = postprocess(img, ["upscale2x", "crop-face"])
    b = postprocess(img, ["crop-face", "upscale2x"])
    assert a.shape != b.shape or not torch.equal(a, b)
    with pytest.raises(ConfigurationError):
        postprocess(img, ["upscale2x", "nope"])


def test_failing_postprocessor_keeps_raw(tmp_path, backend):
    def boom(image):
        raise RuntimeError("no gpu")

    register_postprocessor("boom", boom)
    try:
        req = GenerationRequest(num_images=2, postprocess=["upscale2x", "boom"], **FAST)
        with pytest.raises(PluginError):
            write_outputs(tmp_path, _backend(backend), req)
        assert (tmp_path / "img_000.png").exists() and (tmp_path / "img_001.json").exists()
        assert not (tmp_path / "img_000.post.png").exists()
    finally:
        POSTPROCESSORS.pop("boom")


def test_postprocessed_copy_written(tmp_path, backend):
    req = GenerationRequest(num_images=1, postprocess=["upscale2x"], **FAST)
    (path,) = write_outputs(tmp_path, _backend(backend), req)
    raw = load_image(path)
    post = load_image(tmp_path / "img_000.post.png")
    assert raw.shape == (3, 32, 32) and post.shape == (3, 64, 64)
    assert read_sidecar(path)["postprocessed"] == "img_000.post.png"


def test_unknown_postprocessor_before_any_work(tmp_path, backend):
    with pytest.raises(ConfigurationError):
        write_outputs(tmp_path / "out", _backend(backend), GenerationRequest(postprocess=["nope"]))
    assert not (tmp_path / "out").exists()


def test_sampling_timesteps():
    assert sampling_timesteps(1000, 4) == [751, 501, 251, 1]
    assert sampling_timesteps(10, 10) == list(range(10, 0, -1))
    with pytest.raises(DomainError):
        sampling_timesteps(10, 11)


def test_request_round_trip_and_validation():
    req = GenerationRequest(extra="x", num_images=2, postprocess=["upscale2x"], image_hw=(16, 16))
    assert request_from_dict(json.loads(json.dumps(request_to_dict(req)))) == req
    with pytest.raises(ConfigurationError):
        request_from_dict({"count": 2})
    with pytest.raises(DomainError):
        GenerationRequest(num_images=0)


def test_trained_sample_background_follows_reference(trained_run):
    """After the toy run, the composed sample's non-face pixels resemble the reference."""
    backend = trained_run["backend"]
    ref = trained_run["trainer"].concepts["reference"].images
    raw, _ = generate(backend, GenerationRequest(num_images=4, seed=0))
    face = np.zeros((32, 32), dtype=bool)
    x0, y0, x1, y1 = FACE_BOX
    face[y0:y1, x0:x1] = True
    noise = torch.randn(3, 32, 32, generator=torch.Generator().manual_seed(0))
    for img in raw:
        g = img[:, ~face].numpy().ravel()
        r = ref[0][:, ~face].numpy().ravel()
        cos = float(g @ r / (np.linalg.norm(g) * np.linalg.norm(r)))
        n = noise[:, ~face].numpy().ravel()
        assert cos > 0.5
        assert cos > float(g @ n / (np.linalg.norm(g) * np.linalg.norm(n)))
        assert pearson(g, r) > 0.5
