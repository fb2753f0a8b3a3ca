import numpy as np
import pytest

from fedgate.params import (check_same_shapes, clone_tensors,
                            deserialize_tensors, load_checkpoint,
                            save_checkpoint, serialize_tensors, tensors_hash)


def _bundle():
    rng = np.random.default_rng(0)
    return {
        "layer0/w": rng.standard_normal((3, 4)),
        "layer0/b": rng.standard_normal(4),
        "scalar": np.array(2.5),
        "layer1/theta": rng.standard_normal(2),
    }


def test_roundtrip_bit_exact():
    t = _bundle()
    back = deserialize_tensors(serialize_tensors(t))
    assert back.keys() == t.keys()
    for k in t:
        assert back[k].shape == t[k].shape
        np.testing.assert_array_equal(back[k], t[k])


def test_serialization_is_order_independent():
    t = _bundle()
    reordered = {k: t[k] for k in reversed(list(t))}
    assert serialize_tensors(t) == serialize_tensors(reordered)
    assert tensors_hash(t) == tensors_hash(reordered)


def test_hash_changes_with_content_and_name():
    t = _bundle()
    h0 = tensors_hash(t)
    t2 = clone_tensors(t)
    t2["layer0/w"][0, 0] += 1e-12
    assert tensors_hash(t2) != h0
    t3 = {("renamed" if k == "scalar" else k): v for k, v in t.items()}
    assert tensors_hash(t3) != h0


def test_hash_distinguishes_negative_zero():
    a = {"x": np.array([0.0])}
    b = {"x": np.array([-0.0])}
    assert tensors_hash(a) != tensors_hash(b)


def test_clone_is_deep():
    t = _bundle()
    c = clone_tensors(t)
    c["layer0/b"][0] = 99.0
    assert t["layer0/b"][0] != 99.0


def test_bad_magic_rejected():
    with pytest.raises(ValueError):
        deserialize_tensors(b"XXXX" + b"\x00" * 16)


def test_check_same_shapes():
    a = {"w": np.zeros((2, 2))}
    check_same_shapes(a, {"w": np.ones((2, 2))})
    with pytest.raises(ValueError):
        check_same_shapes(a, {"w": np.zeros((2, 3))})
    with pytest.raises(ValueError):
        check_same_shapes(a, {"v": np.zeros((2, 2))})


def test_checkpoint_roundtrip(tmp_path):
    t = _bundle()
    manifest = {"round": 7, "config": {"lr": 0.001, "mode": "eda"}}
    path = tmp_path / "state.ckpt"
    save_checkpoint(path, manifest, t)
    m2, t2 = load_checkpoint(path)
    assert m2 == manifest
    for k in t:
        np.testing.assert_array_equal(t2[k], t[k])


def test_checkpoint_bad_file(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(path)
