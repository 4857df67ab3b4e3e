import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_net
from wdlab.checkpoint import (
    Checkpoint,
    checkpoint_to_params,
    layer_report,
    params_to_checkpoint,
    read_checkpoint,
    write_native,
)
from wdlab.errors import ConfigError, FormatError, InvalidInputError


def safetensors_bytes(entries, metadata=None, pad=b""):
    """entries: list of (name, dtype, shape, raw bytes); laid out back to back."""
    header, blob = {}, b""
    for name, dtype, shape, raw in entries:
        header[name] = {"dtype": dtype, "shape": shape, "data_offsets": [len(blob), len(blob) + len(raw)]}
        blob += raw
    if metadata is not None:
        header["__metadata__"] = metadata
    h = json.dumps(header).encode() + pad
    return struct.pack("<Q", len(h)) + h + blob


def test_native_round_trip_bit_exact(tmp_path, rng):
    arch, p = random_net(rng, 5, (4, 3))
    p.weights[0][0, 0] = -0.0
    p.weights[0][0, 1] = 5e-324
    ck = params_to_checkpoint(p, arch, step=3)
    ck.tensors["f32"] = np.arange(6, dtype=np.float32).reshape(2, 3) / 7
    path = tmp_path / "a.nwt"
    write_native(path, ck)
    back = read_checkpoint(path)
    assert list(back.tensors) == list(ck.tensors)
    for k, v in ck.tensors.items():
        assert back.tensors[k].dtype == v.dtype
        assert back.tensors[k].tobytes() == v.tobytes()
    assert back.meta == {"step": 3} or back.meta["step"] == 3
    q = checkpoint_to_params(back, arch)
    assert np.array_equal(q.flat(), p.flat())


def test_native_rejects_bad_input(tmp_path):
    with pytest.raises(InvalidInputError):
        write_native(tmp_path / "x", Checkpoint({}))
    with pytest.raises(InvalidInputError):
        write_native(tmp_path / "x", Checkpoint({"i": np.arange(3)}))


def test_safetensors_fixture_exact(tmp_path):
    w = np.array([[1.5, -2.0], [0.25, 3.0]], dtype="<f4")
    d = np.array([np.pi], dtype="<f8")
    bf16 = struct.pack("<2H", 0x3F80, 0xC000)  # 1.0, -2.0
    f16 = np.array([0.5, -1.0], dtype="<f2").tobytes()
    ints = np.arange(3, dtype="<i4").tobytes()
    raw = safetensors_bytes(
        [("w", "F32", [2, 2], w.tobytes()), ("d", "F64", [1], d.tobytes()), ("b", "BF16", [2], bf16),
         ("h", "F16", [1, 2], f16), ("i", "I32", [3], ints)],
        metadata={"format": "pt"},
        pad=b"   ",
    )
    path = tmp_path / "m.safetensors"
    path.write_bytes(raw)
    ck = read_checkpoint(path)
    assert list(ck.tensors) == ["w", "d", "b", "h"]
    assert np.array_equal(ck.tensors["w"], w)
    assert ck.tensors["d"][0] == np.pi
    assert np.array_equal(ck.tensors["b"], [1.0, -2.0]) and ck.tensors["b"].dtype == np.float64
    assert np.array_equal(ck.tensors["h"], [[0.5, -1.0]])
    assert any("'i'" in w for w in ck.warnings)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda h: h["w"].update(data_offsets=[0, 12]),
        lambda h: h["w"].update(data_offsets=[0, 400]),
        lambda h: h["w"].update(shape=[-1, 2]),
        lambda h: h["w"].update(dtype=7),
        lambda h: h.update(v={"dtype": "F32", "shape": [2], "data_offsets": [4, 12]}),
        lambda h: h.update(w=[1, 2]),
    ],
)
def test_safetensors_bad_headers(tmp_path, mutate):
    w = np.zeros((2, 2), dtype="<f4").tobytes()
    header = {"w": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}}
    mutate(header)
    h = json.dumps(header).encode()
    p = tmp_path / "bad"
    p.write_bytes(struct.pack("<Q", len(h)) + h + w)
    with pytest.raises(FormatError):
        read_checkpoint(p)


def test_header_length_too_big(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(struct.pack("<Q", 10**12) + b"{}")
    with pytest.raises(FormatError) as e:
        read_checkpoint(p)
    assert e.value.field == "header_length"


def _fuzz_once(tmp_path, raw):
    p = tmp_path / "fuzz"
    p.write_bytes(raw)
    try:
        read_checkpoint(p)
    except FormatError:
        pass


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=64))
def test_fuzz_random_bytes(tmp_path_factory, raw):
    _fuzz_once(tmp_path_factory.mktemp("f"), raw)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 200), st.binary(min_size=1, max_size=4))
def test_fuzz_mutated_valid_files(tmp_path_factory, pos, patch):
    arch_raw = safetensors_bytes([("w", "F32", [2, 2], bytes(16)), ("b", "BF16", [1], bytes(2))])
    pos = pos % len(arch_raw)
    raw = arch_raw[:pos] + patch + arch_raw[pos + len(patch):]
    _fuzz_once(tmp_path_factory.mktemp("f"), raw)


@settings(max_examples=200, deadline=None)
@given(st.integers(4, 120), st.binary(min_size=1, max_size=4))
def test_fuzz_mutated_native(tmp_path_factory, pos, patch):
    d = tmp_path_factory.mktemp("n")
    write_native(d / "a.nwt", Checkpoint({"W1": np.ones((2, 3)), "w2": np.ones(2, dtype=np.float32)}))
    good = (d / "a.nwt").read_bytes()
    pos = pos % len(good)
    _fuzz_once(d, good[:pos] + patch + good[pos + len(patch):])


def test_layer_report_and_groups(rng):
    q, k, v = (rng.normal(size=(2, 4)) for _ in range(3))
    ck = Checkpoint({"Q": q, "K": k, "V": v, "bias": np.ones(3), "Z": np.zeros((2, 2))})
    rep = layer_report(ck, {"attn": ["Q", "K", "V"]}, jobs=2)
    names = [r.name for r in rep.rows]
    assert names == ["Q+K+V", "Z"]
    stacked = np.vstack([q, k, v])
    row = rep.rows[0]
    assert (row.rows, row.cols, row.group) == (6, 4, "attn")
    sv = np.linalg.svd(stacked, compute_uv=False)
    assert row.spec_norm == pytest.approx(sv[0], rel=1e-10)
    assert row.stable_rank == pytest.approx(np.linalg.norm(sv) / sv[0], rel=1e-10)
    assert np.isnan(rep.rows[1].stable_rank)
    assert rep.skipped == ["bias"]
    assert rep.to_csv().splitlines()[0] == "name,rows,cols,fro_norm,spec_norm,stable_rank,group"
    json.loads(rep.to_json())


@pytest.mark.parametrize(
    "groups",
    [{"g": ["nope"]}, {"g": ["bias"]}, {"g": ["Q"], "h": ["Q"]}, {"g": ["Q", "W"]}],
)
def test_layer_report_group_errors(rng, groups):
    ck = Checkpoint({"Q": rng.normal(size=(2, 4)), "W": rng.normal(size=(2, 3)), "bias": np.ones(3)})
    with pytest.raises(ConfigError):
        layer_report(ck, groups)
