import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from dorl.core import ParamStore, Tensor, load_params, read_container, save_params, write_container
from dorl.errors import DataError

DTYPES = st.sampled_from([np.float32, np.float64, np.int64, np.uint8, np.bool_])


@given(st.dictionaries(st.text("abcdefgh.", min_size=1, max_size=8),
                       DTYPES.flatmap(lambda dt: hnp.arrays(dt, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4))),
                       max_size=4))
def test_container_round_trip(tmp_path_factory, arrays):
    path = tmp_path_factory.mktemp("ck") / "a.ckpt"
    write_container(path, arrays, meta={"k": [1, 2]})
    back, frozen, meta = read_container(path)
    assert meta == {"k": [1, 2]}
    assert set(back) == set(arrays)
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == np.ascontiguousarray(v).tobytes()


def test_params_keep_freeze_flags(tmp_path):
    p = ParamStore()
    p.add("a", Tensor(np.arange(3, dtype=np.float32)), frozen=True)
    p.add("b", Tensor(np.ones((2, 2))))
    save_params(tmp_path / "p.ckpt", p, {"x": 1})
    q, meta = load_params(tmp_path / "p.ckpt")
    assert meta == {"x": 1}
    assert q.frozen() == ["a"] and q.trainable() == ["b"]
    assert q["a"].data.tobytes() == p["a"].data.tobytes()


def test_bad_magic_and_truncation(tmp_path):
    (tmp_path / "junk").write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        read_container(tmp_path / "junk")
    path = write_container(tmp_path / "t.ckpt", {"x": np.ones(100)})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DataError):
        read_container(path)
