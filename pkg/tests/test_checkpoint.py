import numpy as np
import pytest

from treeattn import checkpoint as ckpt_io
from treeattn.checkpoint import Checkpoint
from treeattn.errors import DataError


def sample(dtype=np.float64):
    g = np.random.default_rng(3)
    params = {"a.W": g.normal(size=(3, 4)).astype(dtype), "b": g.normal(size=5).astype(dtype),
              "scalar": np.array(2.5, dtype=dtype)}
    return Checkpoint(params, {"model": {"d": 4}, "vocab": ["x", "y"]}, step=7, seed=11, metrics={"acc": 0.5})


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_round_trip_bit_identical(tmp_path, dtype):
    ck = sample(dtype)
    path = tmp_path / "m.ck"
    ckpt_io.save(ck, path)
    back = ckpt_io.load(path)
    assert back.step == 7 and back.seed == 11 and back.metrics == {"acc": 0.5}
    assert list(back.params) == list(ck.params)
    for k in ck.params:
        assert back.params[k].dtype == ck.params[k].dtype
        assert np.array_equal(back.params[k], ck.params[k])
    path2 = tmp_path / "m2.ck"
    ckpt_io.save(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_bad_magic():
    with pytest.raises(DataError):
        ckpt_io.from_bytes(b"NOPE" + bytes(20))


def test_truncated_and_trailing():
    raw = ckpt_io.to_bytes(sample())
    with pytest.raises(DataError):
        ckpt_io.from_bytes(raw[:-3])
    with pytest.raises(DataError):
        ckpt_io.from_bytes(raw + b"\0")


def test_mixed_widths_rejected():
    ck = Checkpoint({"a": np.zeros(2), "b": np.zeros(2, dtype=np.float32)})
    with pytest.raises(DataError):
        ckpt_io.to_bytes(ck)
