"""File formats: volumes, sinograms, annotations, manifests, CSV outputs.

Binary formats use little-endian layouts with short ASCII magics so that
round trips are bit-exact.  All writers go through a temp file and rename
on success, so partially written outputs are never left behind.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .geometry import FanbeamGeometry, Sinogram, Volume
from .phantom import Annotation

VOL_MAGIC = b"TDVOL1\n"
SINO_MAGIC = b"TDSINO1\n"

ANNOT_HEADER = ["scan_id", "x_mm", "y_mm", "z_mm", "diameter_mm"]
DET_HEADER = ["scan_id", "x_mm", "y_mm", "z_mm", "score"]
FROC_HEADER = ["fp_per_scan", "sensitivity", "lo95", "hi95"]


class DataError(IOError):
    pass


def _atomic_write(path, payload: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


# -- TDVOL1 -------------------------------------------------------------------

def write_volume(vol: Volume, path):
    """Header: magic, unit tag, extents (nx, ny, nz), spacing, origin;
    payload little-endian float32, x fastest."""
    tag = vol.unit.encode("ascii")
    nz, ny, nx = vol.values.shape
    head = VOL_MAGIC
    head += struct.pack("<B", len(tag)) + tag
    head += struct.pack("<3I", nx, ny, nz)
    head += struct.pack("<3d", *vol.spacing)
    head += struct.pack("<3d", *vol.origin)
    vals = vol.values + 0.0  # canonicalize negative zeros
    _atomic_write(path, head + np.ascontiguousarray(vals, dtype="<f4").tobytes())


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if not raw.startswith(VOL_MAGIC):
        raise DataError(f"{path}: bad volume magic")
    off = len(VOL_MAGIC)
    try:
        (taglen,) = struct.unpack_from("<B", raw, off)
        off += 1
        tag = raw[off:off + taglen].decode("ascii")
        off += taglen
        nx, ny, nz = struct.unpack_from("<3I", raw, off)
        off += 12
        spacing = struct.unpack_from("<3d", raw, off)
        off += 24
        origin = struct.unpack_from("<3d", raw, off)
        off += 24
    except struct.error as exc:
        raise DataError(f"{path}: truncated header") from exc
    count = nx * ny * nz
    if len(raw) - off < 4 * count:
        raise DataError(
            f"{path}: truncated payload ({(len(raw) - off) // 4} of {count} values)")
    vals = np.frombuffer(raw, dtype="<f4", offset=off, count=count)
    vals = vals.reshape(nz, ny, nx).astype(np.float64)
    if not np.all(np.isfinite(vals)):
        raise DataError(f"{path}: non-finite values in payload")
    return Volume(vals, spacing=spacing, origin=origin, unit=tag)


# -- TDSINO1 ------------------------------------------------------------------

def write_sinogram(sino: Sinogram, path):
    """Header: magic, extents (n_views, n_channels, n_slices), geometry
    record, z origin; payload little-endian float32, channel fastest."""
    g = sino.geometry
    nv, nc, ns = sino.shape_spec
    head = SINO_MAGIC
    head += struct.pack("<3I", nv, nc, ns)
    head += struct.pack("<2I4d", g.n_views, g.n_channels, g.channel_arc_width,
                        g.row_height, g.dist_source_center, g.dist_source_detector)
    head += struct.pack("<d", sino.z_origin)
    vals = sino.values + 0.0
    _atomic_write(path, head + np.ascontiguousarray(vals, dtype="<f4").tobytes())


def read_sinogram(path) -> Sinogram:
    raw = Path(path).read_bytes()
    if not raw.startswith(SINO_MAGIC):
        raise DataError(f"{path}: bad sinogram magic")
    off = len(SINO_MAGIC)
    try:
        nv, nc, ns = struct.unpack_from("<3I", raw, off)
        off += 12
        gv, gc, arc, row, dsc, dsd = struct.unpack_from("<2I4d", raw, off)
        off += 40
        (z0,) = struct.unpack_from("<d", raw, off)
        off += 8
    except struct.error as exc:
        raise DataError(f"{path}: truncated header") from exc
    geom = FanbeamGeometry(n_views=gv, n_channels=gc, channel_arc_width=arc,
                           row_height=row, dist_source_center=dsc,
                           dist_source_detector=dsd)
    count = nv * nc * ns
    if len(raw) - off < 4 * count:
        raise DataError(
            f"{path}: truncated payload ({(len(raw) - off) // 4} of {count} values)")
    vals = np.frombuffer(raw, dtype="<f4", offset=off, count=count)
    vals = vals.reshape(ns, nv, nc).astype(np.float64)
    if not np.all(np.isfinite(vals)):
        raise DataError(f"{path}: non-finite values in payload")
    return Sinogram(vals, geometry=geom, z_origin=z0)


# -- annotations CSV ----------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.6g}"


def write_annotations(annotations, path):
    lines = [",".join(ANNOT_HEADER)]
    for a in annotations:
        lines.append(",".join([a.scan_id, _fmt(a.center[0]), _fmt(a.center[1]),
                               _fmt(a.center[2]), _fmt(a.diameter)]))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_annotations(path):
    text = Path(path).read_text().splitlines()
    if not text or [c.strip() for c in text[0].split(",")] != ANNOT_HEADER:
        raise DataError(f"{path}: missing or bad annotation header row")
    out = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise DataError(f"{path}: malformed row at line {lineno}")
        try:
            out.append(Annotation(parts[0],
                                  (float(parts[1]), float(parts[2]), float(parts[3])),
                                  float(parts[4])))
        except ValueError as exc:
            raise DataError(f"{path}: malformed row at line {lineno}: {exc}") from exc
    return out


# -- scan manifest ------------------------------------------------------------

def write_manifest(records, path):
    """``records`` is a list of dicts with keys id/volume/mask/annotations/
    sinogram (paths may be None before projection)."""
    doc = {"scans": [dict(r) for r in records]}
    _atomic_write(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def read_manifest(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a valid manifest ({exc})") from exc
    if "scans" not in doc or not isinstance(doc["scans"], list):
        raise DataError(f"{path}: manifest missing 'scans' list")
    return doc["scans"]


# -- CSV outputs --------------------------------------------------------------

def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(c) if isinstance(c, str) else _fmt(float(c))
                              for c in row))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_csv_rows(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        return header, [row for row in reader if row]
