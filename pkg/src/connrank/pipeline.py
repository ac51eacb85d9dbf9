"""Manifest-driven loading and per-scan connectome inference."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from .graphs import ConnectomeCache, infer_connectome
from .ingest import (
    identity_parcellation,
    read_csv_timeseries,
    read_label_map,
    read_nifti_timeseries,
    uniform_parcellation,
)
from .model import Connectome, Parcellation, PipelineConfig, ScanRecord, TimeSeriesMatrix

log = logging.getLogger(__name__)


def load_mask(config: PipelineConfig) -> Optional[Parcellation]:
    """Voxel selection for volumetric inputs: the label map itself, else ``mask_path``."""
    if config.parcellation_source not in ("identity", "uniform"):
        return read_label_map(config.parcellation_source)
    if config.mask_path:
        return read_label_map(config.mask_path)
    return None


def load_series(scan: ScanRecord, mask: Optional[Parcellation]) -> TimeSeriesMatrix:
    if scan.format == "csv":
        return read_csv_timeseries(scan.path, scan.tr_seconds)
    if mask is None:
        raise ValueError(f"scan {scan.scan_id!r}: NIfTI input needs a label map or mask_path")
    return read_nifti_timeseries(scan.path, mask, tr_seconds=scan.tr_seconds)


def resolve_parcellation(config: PipelineConfig, mask: Optional[Parcellation], n_rows: int) -> Parcellation:
    """Parcellation to apply to series with ``n_rows`` rows."""
    src = config.parcellation_source
    if src == "identity":
        return identity_parcellation(n_rows)
    if src == "uniform":
        if mask is None:
            # rows only known by index: treat them as voxels on a line
            mask = Parcellation(np.ones(n_rows, dtype=int), 1, scheme_tag="mask")
        return uniform_parcellation(mask, config.n_rois_target)
    return mask if mask is not None else read_label_map(src)


def load_dataset(scans: Sequence[ScanRecord], config: PipelineConfig, jobs: int = 1):
    """Read every scan's series and resolve the parcellation they share."""
    mask = load_mask(config)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as ex:
        series = list(ex.map(lambda s: load_series(s, mask), scans))
    parc = resolve_parcellation(config, mask, series[0].n_rows)
    return series, parc


def build_connectomes(scans: Sequence[ScanRecord], series: Sequence[TimeSeriesMatrix], parc: Parcellation,
                      config: PipelineConfig, cache: Optional[ConnectomeCache] = None, jobs: int = 1,
                      stats: Optional[dict] = None) -> list[Connectome]:
    """Infer one connectome per scan, reusing cached matrices for the same config."""
    key = config.config_hash()
    stats = {} if stats is None else stats
    stats.setdefault("hits", 0)
    stats.setdefault("computed", 0)

    def one(args):
        scan, ts = args
        if cache is not None:
            hit = cache.get(scan.scan_id, key)
            if hit is not None:
                return hit, True
        try:
            g = infer_connectome(ts, parc, config, scan_id=scan.scan_id)
        except Exception as exc:
            raise type(exc)(f"scan {scan.scan_id!r}: {exc}") from exc
        if cache is not None:
            extra = {"window_seconds": config.window_seconds, "n_rois": g.n_rois}
            cache.put(g, key, config=config.to_dict(), extra=extra)
        return g, False

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as ex:
        results = list(ex.map(one, zip(scans, series)))
    for _, hit in results:
        stats["hits" if hit else "computed"] += 1
    if cache is not None:
        log.debug("connectome cache %s: %d hits, %d computed", key, stats["hits"], stats["computed"])
    return [g for g, _ in results]
