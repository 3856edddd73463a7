import numpy as np
import pytest

from cropr import checkpoint as C
from cropr.errors import ContractError
from cropr.model import PrunedViT
from cropr.schedule import build_staged
from cropr.vit import ViTConfig


def model(selector="cropr"):
    cfg = ViTConfig(image_side=16, patch_size=4, channels=3, depth=3, width=8, heads=2, num_classes=4)
    return PrunedViT(cfg, build_staged([{"block": 1, "r": 6}], 16, depth=3), selector=selector, seed=3)


def test_container_round_trip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(7, dtype=np.int64),
              "c": np.array([True, False]), "d": np.ones((0, 4), dtype=np.float32),
              "e": np.arange(3, dtype=">i4")}
    path = tmp_path / "x.bin"
    C.save_container(path, arrays, {"note": "hi"})
    back, meta = C.load_container(path)
    assert meta == {"note": "hi"}
    for k, v in arrays.items():
        assert back[k].shape == v.shape and np.array_equal(back[k], v)
    assert back["e"].dtype.byteorder in ("<", "=")
    assert open(path, "rb").read().startswith(C.MAGIC)


def test_container_rejects_bad_input(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"not a container\n")
    with pytest.raises(ContractError):
        C.load_container(path)
    with pytest.raises(ContractError):
        C.save_container(tmp_path / "y.bin", {"two words": np.zeros(1)})


def test_model_round_trip_predictions(tmp_path):
    m = model()
    images = np.random.default_rng(0).normal(size=(3, 3, 16, 16))
    C.save_model(tmp_path / "m.bin", m)
    back, meta = C.load_model(tmp_path / "m.bin")
    assert meta["kind"] == "training" and meta["selector"] == "cropr"
    np.testing.assert_array_equal(back.predict(images).logits.data, m.predict(images).logits.data)


def test_folded_checkpoint_is_smaller_and_equivalent(tmp_path):
    m = model()
    images = np.random.default_rng(1).normal(size=(3, 3, 16, 16))
    C.save_model(tmp_path / "full.bin", m)
    C.save_folded(tmp_path / "fold.bin", m)
    assert (tmp_path / "fold.bin").stat().st_size < (tmp_path / "full.bin").stat().st_size
    back, meta = C.load_model(tmp_path / "fold.bin")
    assert meta["kind"] == "folded" and back.folded_only and not back.croprs
    ref = m.predict(images)
    out = back.predict(images)
    np.testing.assert_allclose(out.logits.data, ref.logits.data, rtol=1e-6, atol=1e-9)
    assert np.array_equal(out.kept_positions, ref.kept_positions)
