import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxmae.errors import ContractError, ParseError
from voxmae.rng import Rng
from voxmae.volume import LabelMap, Volume, normalize_volume, read_volume, write_volume


def rand_volume(seed, extents=(6, 5, 4)):
    rng = Rng(seed, "vol")
    return Volume(rng.normal(extents), spacing=(1.0, 0.5, 0.25))


def rand_labels(seed, extents=(6, 5, 4), classes=3):
    rng = Rng(seed, "lab")
    return LabelMap(rng.integers(0, classes, extents).astype(np.uint8), classes)


def test_normalize_standardizes():
    v = rand_volume(1, (16, 16, 16))
    out = normalize_volume(v)
    assert abs(float(out.voxels.mean())) < 1e-3
    assert abs(float(out.voxels.std()) - 1.0) < 1e-2


def test_normalize_constant_volume_is_zero():
    v = Volume(np.full((4, 4, 4), 3.25, dtype=np.float32))
    assert np.array_equal(normalize_volume(v).voxels, np.zeros((4, 4, 4), np.float32))


def test_normalize_idempotent_within_tolerance():
    v = rand_volume(2, (12, 12, 12))
    once = normalize_volume(v)
    twice = normalize_volume(once)
    assert np.abs(twice.voxels - once.voxels).max() < 1e-4


def test_normalize_needs_two_voxels():
    with pytest.raises(ContractError):
        normalize_volume(Volume(np.ones((1, 1, 1), np.float32)))


def test_round_trip_bit_exact(tmp_path):
    v = rand_volume(3)
    labels = rand_labels(3)
    path = tmp_path / "x.vox"
    write_volume(path, v, labels)
    rv, rl = read_volume(path)
    assert np.array_equal(rv.voxels, v.voxels)
    assert rv.spacing == v.spacing
    assert np.array_equal(rl.classes, labels.classes)
    assert rl.num_classes == labels.num_classes


def test_round_trip_without_labels(tmp_path):
    v = rand_volume(4)
    path = tmp_path / "x.vox"
    write_volume(path, v)
    rv, rl = read_volume(path)
    assert rl is None
    assert np.array_equal(rv.voxels, v.voxels)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 9), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
def test_round_trip_many_random_volumes(tmp_path_factory, seed, d, h, w):
    rng = Rng(seed, "many")
    v = Volume(rng.normal((d, h, w)), spacing=tuple(rng.uniform((3,), 0.1, 2.0)))
    labels = LabelMap(rng.integers(0, 4, (d, h, w)).astype(np.uint8), 4)
    path = tmp_path_factory.mktemp("vols") / "v.vox"
    write_volume(path, v, labels)
    rv, rl = read_volume(path)
    assert np.array_equal(rv.voxels, v.voxels)
    assert rv.spacing == v.spacing
    assert np.array_equal(rl.classes, labels.classes)


def test_truncated_payload_is_length_mismatch(tmp_path):
    v = rand_volume(5)
    path = tmp_path / "x.vox"
    write_volume(path, v)
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(ParseError, match="length mismatch"):
        read_volume(path)


def test_header_extent_payload_mismatch_names_expected_count(tmp_path):
    # header says 4x4x4 = 64 voxels, payload holds 63
    header = {"magic": "VOXMAE1", "extents": [4, 4, 4], "spacing": [1, 1, 1],
              "dtype": "float32", "labels": False}
    payload = np.zeros(63, dtype="<f4").tobytes()
    path = tmp_path / "bad.vox"
    path.write_bytes(json.dumps(header).encode() + b"\n" + payload)
    with pytest.raises(ParseError, match="64"):
        read_volume(path)


def test_malformed_header_is_distinct_error(tmp_path):
    path = tmp_path / "bad.vox"
    path.write_bytes(b"not json at all\n\x00\x01")
    with pytest.raises(ParseError, match="malformed header"):
        read_volume(path)


def test_unknown_magic_is_distinct_error(tmp_path):
    header = {"magic": "VOXMAE9", "extents": [1, 1, 1], "spacing": [1, 1, 1],
              "dtype": "float32", "labels": False}
    path = tmp_path / "bad.vox"
    path.write_bytes(json.dumps(header).encode() + b"\n" + b"\x00" * 4)
    with pytest.raises(ParseError, match="unknown format version"):
        read_volume(path)


def test_label_extent_mismatch_rejected(tmp_path):
    v = rand_volume(6, (4, 4, 4))
    labels = rand_labels(6, (4, 4, 2))
    with pytest.raises(ContractError):
        write_volume(tmp_path / "x.vox", v, labels)


def test_labelmap_rejects_out_of_range_class():
    with pytest.raises(ContractError):
        LabelMap(np.full((2, 2, 2), 7, dtype=np.uint8), 3)
