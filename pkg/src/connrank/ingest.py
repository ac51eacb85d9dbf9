"""Readers for NIfTI-1 volumes, CSV signal tables and label maps, plus uniform parcellation."""

from __future__ import annotations

import csv
import logging
import math
import struct
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import FormatError, Parcellation, ShapeError, TimeSeriesMatrix

log = logging.getLogger(__name__)

HEADER_SIZE = 348
MIN_VOX_OFFSET = 352

# NIfTI-1 datatype code -> numpy dtype (byte order applied at read time)
DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
DATATYPE_CODES = {dt: code for code, dt in DATATYPES.items()}

_HOST_PREFIX = "<" if sys.byteorder == "little" else ">"
_SWAP_PREFIX = ">" if _HOST_PREFIX == "<" else "<"


class UnsupportedFormatError(FormatError):
    pass


class UnsupportedDatatypeError(FormatError):
    pass


@dataclass(frozen=True)
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple
    datatype: int
    bitpix: int
    pixdim: tuple
    vox_offset: float
    scl_slope: float
    scl_inter: float
    byte_order: str  # "native" or "swapped"

    @property
    def endian(self) -> str:
        return _HOST_PREFIX if self.byte_order == "native" else _SWAP_PREFIX

    @property
    def shape(self) -> tuple:
        return tuple(int(d) for d in self.dim[1 : self.dim[0] + 1])

    @property
    def dtype(self) -> np.dtype:
        return DATATYPES[self.datatype].newbyteorder(self.endian)


def parse_nifti_header(data: bytes) -> NiftiHeader:
    """Decode the fixed 348-byte NIfTI-1 header.

    The byte order is whichever makes ``sizeof_hdr`` read as 348.
    """
    if len(data) < HEADER_SIZE:
        raise UnsupportedFormatError(f"need {HEADER_SIZE} header bytes, got {len(data)}")
    for prefix, order in ((_HOST_PREFIX, "native"), (_SWAP_PREFIX, "swapped")):
        if struct.unpack_from(prefix + "i", data, 0)[0] == HEADER_SIZE:
            break
    else:
        raise UnsupportedFormatError("sizeof_hdr is not 348 in either byte order; not a NIfTI-1 file")

    dim = struct.unpack_from(prefix + "8h", data, 40)
    datatype, bitpix = struct.unpack_from(prefix + "2h", data, 70)
    pixdim = struct.unpack_from(prefix + "8f", data, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(prefix + "3f", data, 108)

    if datatype not in DATATYPES:
        raise UnsupportedDatatypeError(
            f"datatype code {datatype} unsupported; expected one of {sorted(DATATYPES)}"
        )
    if not 1 <= dim[0] <= 7 or any(d < 1 for d in dim[1 : dim[0] + 1]):
        raise UnsupportedFormatError(f"invalid dim field {dim}")
    if vox_offset < HEADER_SIZE:
        raise UnsupportedFormatError(f"vox_offset {vox_offset} lies inside the header")
    if bitpix != 8 * DATATYPES[datatype].itemsize:
        log.warning("bitpix %d disagrees with datatype %d; trusting datatype", bitpix, datatype)
    return NiftiHeader(
        sizeof_hdr=HEADER_SIZE,
        dim=tuple(dim),
        datatype=datatype,
        bitpix=bitpix,
        pixdim=tuple(pixdim),
        vox_offset=vox_offset,
        scl_slope=scl_slope,
        scl_inter=scl_inter,
        byte_order=order,
    )


def read_nifti_header(path) -> NiftiHeader:
    with open(path, "rb") as fh:
        return parse_nifti_header(fh.read(MIN_VOX_OFFSET))


def read_nifti_volume(path, header: Optional[NiftiHeader] = None) -> np.ndarray:
    """Full data array in (x, y, z, ...) order, scaled when scl_slope != 0."""
    if header is None:
        header = read_nifti_header(path)
    shape = header.shape
    count = int(np.prod(shape))
    nbytes = count * header.dtype.itemsize
    with open(path, "rb") as fh:
        fh.seek(int(header.vox_offset))
        raw = fh.read(nbytes)
    if len(raw) < nbytes:
        raise OSError(f"{path}: truncated data section ({len(raw)} of {nbytes} bytes)")
    arr = np.frombuffer(raw, dtype=header.dtype, count=count).reshape(shape, order="F")
    if header.scl_slope != 0 and math.isfinite(header.scl_slope):
        arr = arr.astype(np.float64) * header.scl_slope + header.scl_inter
    return arr


def read_nifti_timeseries(path, mask: Parcellation, header: Optional[NiftiHeader] = None,
                          tr_seconds: Optional[float] = None) -> TimeSeriesMatrix:
    """Extract labeled-voxel time-series from a 4-D volume.

    Rows follow ascending linear voxel index (x fastest). ``tr_seconds`` from the
    manifest takes precedence; pixdim[4] is only checked against it.
    """
    if header is None:
        header = read_nifti_header(path)
    if header.dim[0] != 4:
        raise ShapeError(f"{path}: expected a 4-D volume, got {header.dim[0]}-D")
    grid = header.shape[:3]
    if mask.grid_shape is not None and tuple(mask.grid_shape) != grid:
        raise ShapeError(f"{path}: volume grid {grid} != mask grid {tuple(mask.grid_shape)}")
    if mask.labels.size != int(np.prod(grid)):
        raise ShapeError(f"{path}: mask has {mask.labels.size} voxels, volume grid has {int(np.prod(grid))}")
    voxels = mask.voxel_indices
    if voxels.size == 0:
        raise ShapeError("mask selects no voxels; empty time-series")
    vol = read_nifti_volume(path, header)
    n_t = header.shape[3]
    flat = vol.reshape(-1, n_t, order="F")
    values = np.asarray(flat[voxels], dtype=np.float64)

    header_tr = float(header.pixdim[4])
    if tr_seconds is None:
        if not header_tr > 0:
            raise FormatError(f"{path}: no TR in manifest and pixdim[4] = {header_tr}")
        tr_seconds = header_tr
    elif header_tr > 0 and not math.isclose(header_tr, tr_seconds, rel_tol=1e-3):
        log.warning("%s: header TR %.4g s differs from manifest TR %.4g s; using manifest",
                    path, header_tr, tr_seconds)
    return TimeSeriesMatrix(values, tr_seconds, row_ids=tuple(int(v) for v in voxels))


def write_nifti(path, data: np.ndarray, datatype: Optional[int] = None, byte_order: str = "native",
                pixdim=None, scl_slope: float = 0.0, scl_inter: float = 0.0) -> None:
    """Minimal single-file NIfTI-1 writer (used for fixtures and synthetic volumes)."""
    data = np.asarray(data)
    if datatype is None:
        datatype = DATATYPE_CODES.get(data.dtype.newbyteorder("="))
        if datatype is None:
            raise UnsupportedDatatypeError(f"no NIfTI code for dtype {data.dtype}")
    if datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"datatype code {datatype} unsupported")
    prefix = _HOST_PREFIX if byte_order == "native" else _SWAP_PREFIX
    if data.ndim > 7:
        raise ShapeError("NIfTI-1 supports at most 7 dimensions")
    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    pd = [1.0] * 8 if pixdim is None else list(pixdim) + [1.0] * (8 - len(pixdim))
    hdr = bytearray(MIN_VOX_OFFSET)
    struct.pack_into(prefix + "i", hdr, 0, HEADER_SIZE)
    struct.pack_into(prefix + "8h", hdr, 40, *dim)
    item = DATATYPES[datatype]
    struct.pack_into(prefix + "2h", hdr, 70, datatype, 8 * item.itemsize)
    struct.pack_into(prefix + "8f", hdr, 76, *pd[:8])
    struct.pack_into(prefix + "3f", hdr, 108, float(MIN_VOX_OFFSET), scl_slope, scl_inter)
    hdr[344:348] = b"n+1\x00"
    body = np.asarray(data, dtype=item.newbyteorder(prefix)).tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(body)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def read_csv_timeseries(path, tr_seconds: float = 1.0) -> TimeSeriesMatrix:
    """One signal per row, one timepoint per column; a non-numeric first cell marks a header row."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    if not _is_number(rows[0][0].strip()):
        rows = rows[1:]
    if not rows:
        raise FormatError(f"{path}: header only, no data rows")
    width = len(rows[0])
    values = np.empty((len(rows), width))
    for i, r in enumerate(rows):
        if len(r) != width:
            raise FormatError(f"{path}: ragged rows (row {i} has {len(r)} cells, expected {width})")
        for j, cell in enumerate(r):
            try:
                v = float(cell)
            except ValueError:
                raise FormatError(f"{path}: non-numeric cell {cell!r} at row {i}, column {j}") from None
            if not math.isfinite(v):
                raise ValueError(f"{path}: non-finite value {cell!r} at row {i}, column {j}")
            values[i, j] = v
    return TimeSeriesMatrix(values, tr_seconds)


def write_csv_timeseries(path, ts: np.ndarray) -> None:
    np.savetxt(path, np.asarray(ts), delimiter=",", fmt="%.17g")


def _densify(labels: np.ndarray) -> tuple:
    if labels.size and labels.min() < 0:
        raise FormatError("label map contains negative labels")
    present = np.unique(labels[labels > 0])
    remap = {}
    if present.size and present[-1] != present.size:
        remap = {int(old): i + 1 for i, old in enumerate(present)}
        lut = np.zeros(int(present[-1]) + 1, dtype=np.int64)
        lut[present] = np.arange(1, present.size + 1)
        labels = lut[labels]
    return labels, int(present.size), remap


def read_label_map(path) -> Parcellation:
    """Load a parcellation from an integer NIfTI-1 volume or a ``voxel_index,label`` CSV.

    Gapped labels are relabeled densely and the mapping kept in ``remap``.
    """
    with open(path, "rb") as fh:
        head = fh.read(MIN_VOX_OFFSET)
    is_nifti = False
    if len(head) >= HEADER_SIZE:
        try:
            header = parse_nifti_header(head)
            is_nifti = True
        except UnsupportedFormatError:
            pass
    if is_nifti:
        vol = read_nifti_volume(path, header)
        if vol.ndim == 4 and vol.shape[3] == 1:
            vol = vol[..., 0]
        if vol.ndim != 3:
            raise FormatError(f"{path}: label map must be 3-D, got shape {vol.shape}")
        if not np.all(np.equal(np.mod(vol, 1), 0)):
            raise FormatError(f"{path}: label map has non-integer values")
        labels = np.asarray(vol, dtype=np.int64).ravel(order="F")
        grid = vol.shape
    else:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        if rows and not _is_number(rows[0][0].strip()):
            rows = rows[1:]
        try:
            pairs = np.array([[int(r[0]), int(r[1])] for r in rows], dtype=np.int64).reshape(-1, 2)
        except (ValueError, IndexError):
            raise FormatError(f"{path}: expected 'voxel_index,label' integer rows") from None
        if pairs.size and pairs[:, 0].min() < 0:
            raise FormatError(f"{path}: negative voxel index")
        if pairs.size and pairs[:, 1].min() < 0:
            raise FormatError(f"{path}: negative label")
        n_vox = int(pairs[:, 0].max()) + 1 if pairs.size else 0
        labels = np.zeros(n_vox, dtype=np.int64)
        labels[pairs[:, 0]] = pairs[:, 1]
        grid = None
    labels, n_cells, remap = _densify(labels)
    return Parcellation(labels, n_cells, scheme_tag="external", grid_shape=grid, remap=remap)


def identity_parcellation(n_rows: int) -> Parcellation:
    return Parcellation(np.arange(1, n_rows + 1), n_rows, scheme_tag="identity")


def voxel_coordinates(mask: Parcellation) -> np.ndarray:
    """(x, y, z) of labeled voxels in ingest row order; index-only masks lie on a line."""
    idx = mask.voxel_indices
    if mask.grid_shape is None:
        return np.column_stack([idx, np.zeros_like(idx), np.zeros_like(idx)]).astype(float)
    return np.column_stack(np.unravel_index(idx, mask.grid_shape, order="F")).astype(float)


def _farthest_point_seeds(coords: np.ndarray, n_cells: int, start: int) -> np.ndarray:
    seeds = np.empty(n_cells, dtype=np.int64)
    seeds[0] = start
    dist = np.sum((coords - coords[start]) ** 2, axis=1)
    dist[start] = -1.0
    for c in range(1, n_cells):
        # argmax returns the lowest index among ties; chosen seeds sit at -1 so
        # coincident voxels can still become seeds
        nxt = int(np.argmax(dist))
        seeds[c] = nxt
        dist = np.minimum(dist, np.sum((coords - coords[nxt]) ** 2, axis=1))
        dist[seeds[: c + 1]] = -1.0
    return seeds


def uniform_partition(coords, n_cells: int, seed: Optional[int] = None, chunk: int = 2048) -> np.ndarray:
    """Split voxels into ``n_cells`` compact cells whose sizes differ by at most one.

    Seeds are placed by farthest-point sampling (the first at the voxel nearest
    the centroid, or a random voxel when ``seed`` is given). Voxels are then
    assigned in rounds: each unassigned voxel proposes to its nearest seed with
    spare capacity, and each seed accepts its closest proposers (ties to the
    lower voxel index). The first ``n % n_cells`` seeds hold one extra voxel.

    Returns a label per input voxel, in 1..n_cells.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    n = coords.shape[0]
    if n_cells < 1:
        raise ValueError(f"number of cells must be >= 1, got {n_cells}")
    if n_cells > n:
        raise ValueError(f"cannot split {n} voxels into {n_cells} cells")
    if seed is None:
        start = int(np.argmin(np.sum((coords - coords.mean(axis=0)) ** 2, axis=1)))
    else:
        start = int(np.random.default_rng(seed).integers(n))
    seeds = _farthest_point_seeds(coords, n_cells, start)
    seed_xyz = coords[seeds]

    base, extra = divmod(n, n_cells)
    capacity = np.full(n_cells, base, dtype=np.int64)
    capacity[:extra] += 1
    labels = np.zeros(n, dtype=np.int64)
    # seed voxels belong to their own cell
    labels[seeds] = np.arange(1, n_cells + 1)
    capacity -= 1

    while True:
        todo = np.flatnonzero(labels == 0)
        if todo.size == 0:
            break
        open_cells = np.flatnonzero(capacity > 0)
        open_xyz = seed_xyz[open_cells]
        open_sq = np.sum(open_xyz**2, axis=1)
        choice = np.empty(todo.size, dtype=np.int64)
        choice_d = np.empty(todo.size)
        for lo in range(0, todo.size, chunk):
            blk = coords[todo[lo : lo + chunk]]
            d = np.sum(blk**2, axis=1)[:, None] + open_sq[None, :] - 2.0 * blk @ open_xyz.T
            j = np.argmin(d, axis=1)
            choice[lo : lo + chunk] = open_cells[j]
            choice_d[lo : lo + chunk] = d[np.arange(len(j)), j]
        # each cell accepts the closest proposers, lower voxel index first on ties
        order = np.lexsort((todo, choice_d, choice))
        cell_sorted = choice[order]
        starts = np.searchsorted(cell_sorted, cell_sorted, side="left")
        rank_in_cell = np.arange(order.size) - starts
        accept = rank_in_cell < capacity[cell_sorted]
        winners = todo[order[accept]]
        cells = cell_sorted[accept]
        labels[winners] = cells + 1
        np.subtract.at(capacity, cells, 1)
    return labels


def uniform_parcellation(mask: Parcellation, n_cells: int, seed: Optional[int] = None) -> Parcellation:
    """Uniform parcellation over the labeled voxels of ``mask``."""
    coords = voxel_coordinates(mask)
    cell = uniform_partition(coords, n_cells, seed=seed)
    labels = np.zeros(mask.labels.size, dtype=np.int64)
    labels[mask.voxel_indices] = cell
    return Parcellation(labels, n_cells, scheme_tag="uniform", grid_shape=mask.grid_shape)
