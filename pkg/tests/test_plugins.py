import pytest
import torch

from conceptfuse import plugins
from conceptfuse.errors import PluginError


def test_load_plugin_modules_from_env(tmp_path, monkeypatch):
    (tmp_path / "mine.py").write_text(
        "from conceptfuse.plugins import register_postprocessor\n"
        "register_postprocessor('negate', lambda img: -img)\n"
    )
    monkeypatch.setenv(plugins.PLUGIN_PATH_ENV, str(tmp_path))
    try:
        assert plugins.load_plugin_modules() == ["mine"]
        fn = plugins.resolve_postprocessors(["negate"])[0]
        assert torch.equal(fn(torch.ones(1)), -torch.ones(1))
    finally:
        plugins.POSTPROCESSORS.pop("negate", None)


def test_broken_plugin(tmp_path):
    (tmp_path / "bad.py").write_text("raise ImportError('missing weights')\n")
    with pytest.raises(PluginError, match="bad.py"):
        plugins.load_plugin_modules(tmp_path)


def test_no_plugin_path(monkeypatch):
    monkeypatch.delenv(plugins.PLUGIN_PATH_ENV, raising=False)
    assert plugins.load_plugin_modules() == []


def test_toy_face_embedder():
    emb = plugins.ToyFaceEmbedder((0, 0, 4, 4))
    assert emb.detect(torch.zeros(3, 8, 8)) is None
    crop = emb.detect(torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(0)))
    assert crop.shape == (3, 4, 4)
    assert abs(float(emb.embed(crop).norm()) - 1) < 1e-6


def test_toy_aesthetics():
    assert plugins.ConstantAesthetic(3)(torch.zeros(3, 2, 2)) == 3.0
    assert plugins.ContrastAesthetic()(torch.zeros(3, 2, 2)) == 5.0
