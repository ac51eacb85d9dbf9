import struct
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from connrank.ingest import (
    DATATYPES,
    UnsupportedDatatypeError,
    UnsupportedFormatError,
    parse_nifti_header,
    read_csv_timeseries,
    read_label_map,
    read_nifti_header,
    read_nifti_timeseries,
    read_nifti_volume,
    uniform_partition,
    write_nifti,
)
from connrank.model import FormatError, Parcellation, ShapeError

NATIVE = "<" if sys.byteorder == "little" else ">"
SWAPPED = ">" if NATIVE == "<" else "<"


def hand_header(prefix, dims=(4, 2, 2, 1, 3), datatype=16, bitpix=32, tr=2.0, slope=0.0, inter=0.0):
    """Header bytes laid out field by field from the NIfTI-1 offsets table."""
    buf = bytearray(352)
    buf[0:4] = struct.pack(prefix + "i", 348)
    dim = list(dims) + [1] * (8 - len(dims))
    for k, d in enumerate(dim):
        buf[40 + 2 * k : 42 + 2 * k] = struct.pack(prefix + "h", d)
    buf[70:72] = struct.pack(prefix + "h", datatype)
    buf[72:74] = struct.pack(prefix + "h", bitpix)
    pixdim = [1.0, 3.0, 3.0, 3.0, tr, 1.0, 1.0, 1.0]
    for k, v in enumerate(pixdim):
        buf[76 + 4 * k : 80 + 4 * k] = struct.pack(prefix + "f", v)
    buf[108:112] = struct.pack(prefix + "f", 352.0)
    buf[112:116] = struct.pack(prefix + "f", slope)
    buf[116:120] = struct.pack(prefix + "f", inter)
    buf[344:348] = b"n+1\0"
    return bytes(buf)


def test_header_native_order():
    h = parse_nifti_header(hand_header(NATIVE))
    assert h.byte_order == "native"
    assert h.dim[:5] == (4, 2, 2, 1, 3)
    assert h.datatype == 16 and h.bitpix == 32
    assert h.vox_offset == 352.0
    assert h.pixdim[4] == 2.0


def test_header_swapped_order():
    h = parse_nifti_header(hand_header(SWAPPED, slope=2.0, inter=1.0))
    assert h.byte_order == "swapped"
    assert h.dim[:5] == (4, 2, 2, 1, 3)
    assert (h.scl_slope, h.scl_inter) == (2.0, 1.0)


def test_header_rejects_non_nifti():
    with pytest.raises(UnsupportedFormatError):
        parse_nifti_header(bytes(352))
    with pytest.raises(UnsupportedFormatError):
        parse_nifti_header(b"\x00" * 100)


def test_header_rejects_unsupported_datatype():
    with pytest.raises(UnsupportedDatatypeError):
        parse_nifti_header(hand_header(NATIVE, datatype=512, bitpix=16))


def test_writer_matches_hand_layout(tmp_path):
    path = tmp_path / "a.nii"
    write_nifti(path, np.zeros((2, 2, 1, 3), dtype=np.float32), pixdim=[1, 3, 3, 3, 2.0])
    raw = path.read_bytes()
    assert raw[:352] == hand_header(NATIVE)
    assert len(raw) == 352 + 12 * 4


def test_timeseries_linear_index_order(tmp_path):
    vol = np.arange(12, dtype=np.float32).reshape((2, 2, 1, 3), order="C")
    path = tmp_path / "ts.nii"
    write_nifti(path, vol, pixdim=[1, 1, 1, 1, 2.0])
    mask = Parcellation(np.ones(4, dtype=int), 1, grid_shape=(2, 2, 1))
    ts = read_nifti_timeseries(path, mask, tr_seconds=2.0)
    assert ts.values.shape == (4, 3)
    # linear index = x + 2*y (x fastest)
    expected = np.array([vol[0, 0, 0], vol[1, 0, 0], vol[0, 1, 0], vol[1, 1, 0]])
    assert np.array_equal(ts.values, expected)


def test_scaling_applied(tmp_path):
    path = tmp_path / "s.nii"
    write_nifti(path, np.full((1, 1, 1, 3), 3, dtype=np.int16), scl_slope=2.0, scl_inter=1.0)
    mask = Parcellation([1], 1, grid_shape=(1, 1, 1))
    ts = read_nifti_timeseries(path, mask, tr_seconds=1.0)
    assert np.all(ts.values == 7.0)


def test_empty_mask_rejected(tmp_path):
    path = tmp_path / "e.nii"
    write_nifti(path, np.zeros((2, 1, 1, 3), dtype=np.float32))
    with pytest.raises(ShapeError):
        read_nifti_timeseries(path, Parcellation([0, 0], 0, grid_shape=(2, 1, 1)), tr_seconds=1.0)


def test_mask_grid_mismatch(tmp_path):
    path = tmp_path / "m.nii"
    write_nifti(path, np.zeros((2, 1, 1, 3), dtype=np.float32))
    with pytest.raises(ShapeError):
        read_nifti_timeseries(path, Parcellation([1, 1, 1], 1, grid_shape=(3, 1, 1)), tr_seconds=1.0)


def test_truncated_data(tmp_path):
    path = tmp_path / "t.nii"
    write_nifti(path, np.zeros((2, 2, 1, 3), dtype=np.float32))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(OSError):
        read_nifti_timeseries(path, Parcellation(np.ones(4, int), 1, grid_shape=(2, 2, 1)), tr_seconds=1.0)


def test_manifest_tr_wins_over_header(tmp_path, caplog):
    path = tmp_path / "tr.nii"
    write_nifti(path, np.random.default_rng(0).random((1, 1, 1, 4)).astype(np.float32), pixdim=[1, 1, 1, 1, 2.5])
    ts = read_nifti_timeseries(path, Parcellation([1], 1, grid_shape=(1, 1, 1)), tr_seconds=2.0)
    assert ts.tr_seconds == 2.0
    assert "differs" in caplog.text


@pytest.mark.parametrize("code", sorted(DATATYPES))
@pytest.mark.parametrize("order", ["native", "swapped"])
def test_roundtrip_bit_exact(tmp_path, code, order):
    rng = np.random.default_rng(code)
    dt = DATATYPES[code]
    if dt.kind == "f":
        data = rng.standard_normal((3, 4, 2, 5)).astype(dt)
    else:
        info = np.iinfo(dt)
        data = rng.integers(info.min, info.max, size=(3, 4, 2, 5), endpoint=True).astype(dt)
    path = tmp_path / f"r{code}{order}.nii"
    write_nifti(path, data, byte_order=order)
    header = read_nifti_header(path)
    assert header.byte_order == order
    back = read_nifti_volume(path, header)
    assert back.dtype.newbyteorder("=") == dt.newbyteorder("=")
    assert np.array_equal(back, data)
    assert back.tobytes() == data.astype(back.dtype).tobytes()


def test_csv_plain(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("1,2,3\n4,5,6\n")
    assert read_csv_timeseries(p).values.tolist() == [[1, 2, 3], [4, 5, 6]]


def test_csv_ragged(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("1,2,3\n4,5\n")
    with pytest.raises(FormatError, match="ragged"):
        read_csv_timeseries(p)


def test_csv_header_skipped(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("t1,t2\n1,2\n")
    assert read_csv_timeseries(p).values.tolist() == [[1, 2]]


def test_csv_nonfinite_location(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("1,2\n3,nan\n")
    with pytest.raises(ValueError, match="row 1, column 1"):
        read_csv_timeseries(p)


def test_label_map_nifti(tmp_path):
    p = tmp_path / "l.nii"
    write_nifti(p, np.array([0, 1, 2, 2], dtype=np.int16).reshape(4, 1, 1))
    parc = read_label_map(p)
    assert parc.n_cells == 2 and parc.remap == {} and parc.grid_shape == (4, 1, 1)


def test_label_map_gaps_relabeled(tmp_path):
    p = tmp_path / "l.nii"
    write_nifti(p, np.array([0, 1, 3, 3], dtype=np.int16).reshape(4, 1, 1))
    parc = read_label_map(p)
    assert parc.n_cells == 2
    assert parc.remap == {1: 1, 3: 2}
    assert parc.labels.tolist() == [0, 1, 2, 2]


def test_label_map_negative(tmp_path):
    p = tmp_path / "l.nii"
    write_nifti(p, np.array([0, -1, 1], dtype=np.int16).reshape(3, 1, 1))
    with pytest.raises(FormatError):
        read_label_map(p)


def test_label_map_csv(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("voxel_index,label\n0,1\n2,5\n3,5\n")
    parc = read_label_map(p)
    assert parc.labels.tolist() == [1, 0, 2, 2]
    assert parc.remap == {1: 1, 5: 2}


def test_uniform_exact_division():
    coords = np.stack(np.meshgrid(np.arange(10), np.arange(10), [0], indexing="ij"), -1).reshape(-1, 3)
    labels = uniform_partition(coords, 4)
    assert sorted(np.bincount(labels)[1:].tolist()) == [25, 25, 25, 25]


def test_uniform_uneven():
    labels = uniform_partition(np.arange(10)[:, None], 3)
    assert sorted(np.bincount(labels)[1:].tolist()) == [3, 3, 4]


def test_uniform_argument_errors():
    with pytest.raises(ValueError):
        uniform_partition(np.arange(10)[:, None], 0)
    with pytest.raises(ValueError):
        uniform_partition(np.arange(3)[:, None], 4)


def test_uniform_cells_are_compact():
    coords = np.stack(np.meshgrid(np.arange(12), np.arange(12), np.arange(6), indexing="ij"), -1).reshape(-1, 3)
    coords = coords.astype(float)

    def spread(labels):
        return np.mean([np.sum((coords[labels == c] - coords[labels == c].mean(0)) ** 2, axis=1).mean()
                        for c in np.unique(labels)])

    labels = uniform_partition(coords, 16)
    shuffled = np.random.default_rng(0).permutation(labels)
    assert spread(labels) < 0.25 * spread(shuffled)


def test_uniform_deterministic():
    coords = np.random.default_rng(1).integers(0, 20, size=(200, 3))
    assert np.array_equal(uniform_partition(coords, 7), uniform_partition(coords, 7))
    assert np.array_equal(uniform_partition(coords, 7, seed=3), uniform_partition(coords, 7, seed=3))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 120), st.data())
def test_uniform_partition_invariants(n, data):
    c = data.draw(st.integers(1, n))
    coords = np.random.default_rng(n * 1000 + c).integers(0, 8, size=(n, 3))
    labels = uniform_partition(coords, c)
    assert labels.min() >= 1 and labels.max() == c
    sizes = np.bincount(labels, minlength=c + 1)[1:]
    assert sizes.min() >= 1
    assert sizes.max() - sizes.min() <= 1
    assert sizes.sum() == n
