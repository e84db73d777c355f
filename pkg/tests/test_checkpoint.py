import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from s2d.checkpoint import (
    CheckpointError,
    MissingTensorError,
    decode,
    encode,
    model_from_tensors,
    model_tensors,
    read_checkpoint,
    require,
    write_checkpoint,
)
from s2d.model import init_model

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
matrices = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite)


@given(st.dictionaries(st.text(min_size=1, max_size=8), matrices, max_size=4))
def test_round_trip_is_bit_exact(tensors):
    blob = encode(tensors)
    back = decode(blob)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == np.ascontiguousarray(tensors[k]).tobytes()
    assert encode(back) == blob


def test_file_round_trip(tmp_path):
    model = init_model([4, 3, 2], np.random.default_rng(0), attention_tokens=2)
    path = tmp_path / "m.s2d"
    write_checkpoint(path, model_tensors(model))
    first = path.read_bytes()
    write_checkpoint(path, read_checkpoint(path))
    assert path.read_bytes() == first
    back = model_from_tensors(read_checkpoint(path))
    for k, v in model.params().items():
        np.testing.assert_array_equal(back.params()[k], v)


def test_layout():
    blob = encode({"a": np.array([[1.0, 2.0]]), "b": np.array([3.0])})
    head, payload = blob.split(b"\n\n", 1)
    header = json.loads(head)
    assert header == {
        "format": "s2d-ckpt",
        "version": 1,
        "tensors": [{"name": "a", "rows": 1, "cols": 2, "offset": 0}, {"name": "b", "rows": 1, "cols": 1, "offset": 16}],
    }
    assert payload == np.array([1.0, 2.0, 3.0], dtype="<f8").tobytes()


def _good():
    return encode({"w": np.eye(2)})


@pytest.mark.parametrize(
    "mutate, offset",
    [
        (lambda b: b.replace(b"\n\n", b""), None),  # no terminator
        (lambda b: b"{bad json" + b[b.index(b"\n"):], 1),
        (lambda b: b.replace(b'"s2d-ckpt"', b'"other"'), 0),
        (lambda b: b.replace(b'"version":1', b'"version":2'), 0),
        (lambda b: b.replace(b"\n\n", b"\nX"), None),
        (lambda b: b[:-8], None),
        (lambda b: b + b"\x00" * 8, None),
    ],
)
def test_malformed_reports_offset(mutate, offset):
    blob = mutate(_good())
    with pytest.raises(CheckpointError) as info:
        decode(blob)
    assert "at byte" in str(info.value)
    assert 0 <= info.value.offset <= len(blob)
    if offset is not None:
        assert info.value.offset == offset


def test_truncation_offset_points_into_payload():
    good = _good()
    start = good.index(b"\n\n") + 2
    with pytest.raises(CheckpointError) as info:
        decode(good[:-8])
    assert info.value.offset == start
    with pytest.raises(CheckpointError) as info:
        decode(good + b"\x00")
    assert info.value.offset == len(good)


def test_duplicate_names_rejected():
    blob = _good()
    head, payload = blob.split(b"\n\n", 1)
    header = json.loads(head)
    header["tensors"].append(dict(header["tensors"][0]))
    with pytest.raises(CheckpointError, match="duplicate"):
        decode(json.dumps(header).encode() + b"\n\n" + payload)


def test_missing_tensors_listed():
    with pytest.raises(MissingTensorError) as info:
        require({"a": np.eye(1)}, ["a", "c", "b"])
    assert info.value.missing == ["b", "c"]
    assert "b, c" in str(info.value)
    with pytest.raises(MissingTensorError, match="fc1.bias"):
        model_from_tensors({"fc1.weight": np.eye(2)})
    with pytest.raises(MissingTensorError, match="fc1.weight"):
        model_from_tensors({"w": np.eye(2)})


def test_rejects_high_rank_tensor():
    with pytest.raises(ValueError):
        encode({"t": np.zeros((2, 2, 2))})
