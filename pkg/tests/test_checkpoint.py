import numpy as np
import pytest

from branchvi.checkpoint import load_tensors, save_tensors
from branchvi.rng import RngStream


def test_roundtrip_bitwise(tmp_path):
    gen = RngStream(600).generator()
    tree = {
        "v.mean": gen.standard_normal(4),
        "w.000001.A": gen.standard_normal((3, 2)),
        "net.feat.0.W": gen.standard_normal((5, 7)),
        "scalarish": np.array([3.25]),
    }
    path = tmp_path / "ckpt.nt"
    save_tensors(path, tree)
    back = load_tensors(path)
    assert set(back) == set(tree)
    for k in tree:
        assert back[k].shape == np.asarray(tree[k]).shape
        assert np.array_equal(back[k], tree[k])


def test_file_level_determinism(tmp_path):
    tree = {"a": np.arange(6, dtype=float).reshape(2, 3), "b": np.zeros(1)}
    save_tensors(tmp_path / "x1.nt", tree)
    save_tensors(tmp_path / "x2.nt", tree)
    assert (tmp_path / "x1.nt").read_bytes() == (tmp_path / "x2.nt").read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.nt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_tensors(path)


def test_empty_tree(tmp_path):
    save_tensors(tmp_path / "e.nt", {})
    assert load_tensors(tmp_path / "e.nt") == {}
