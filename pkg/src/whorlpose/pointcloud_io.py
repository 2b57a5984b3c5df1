"""
pointcloud_io

Read single-tree point clouds (ascii xyz, PLY, LAS), normalize heights and
locate the stem axis used as the rotation/projection center.
"""

from __future__ import annotations

import io
import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ASCII_SUFFIXES = {".xyz", ".txt", ".asc", ".pts", ".csv"}
CLOUD_SUFFIXES = ASCII_SUFFIXES | {".ply", ".las"}

# robust-base parameters
BASE_PERCENTILE = 1.0
BASE_MAX_ABOVE_MIN = 0.5
AXIS_BAND_M = 1.0
AXIS_FALLBACK_FRACTION = 0.05


class PointCloudError(ValueError):
    """Raised when a point cloud file cannot be ingested."""


def robust_base(z: np.ndarray) -> float:
    """1st percentile of z (an actual sample value), capped at min(z) + 0.5 m."""
    zb = float(np.percentile(z, BASE_PERCENTILE, method="lower"))
    return min(zb, float(z.min()) + BASE_MAX_ABOVE_MIN)


@dataclass(frozen=True)
class TreeCloud:
    """One tree's points (N, 3) in metres. The array is made read-only."""

    tree_id: str
    points: np.ndarray
    z_base: float
    # cumulative z shift applied by normalize_height
    z_offset: float = 0.0

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_points(cls, points, tree_id: str = "tree") -> "TreeCloud":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise PointCloudError("zero points")
        if not np.isfinite(pts).all():
            bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
            raise PointCloudError(f"non-finite coordinate in point {bad}")
        return cls(tree_id=tree_id, points=pts, z_base=robust_base(pts[:, 2]))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self):
        return self.points[:, 0], self.points[:, 1], self.points[:, 2]

    @property
    def top(self) -> float:
        """Highest z in the cloud (0.0 for an empty cloud)."""
        return float(self.points[:, 2].max()) if len(self.points) else 0.0

    def with_points(self, points: np.ndarray) -> "TreeCloud":
        return TreeCloud(self.tree_id, points, self.z_base, self.z_offset)


@dataclass(frozen=True)
class StemAxis:
    x0: float
    y0: float


# ---------------------------------------------------------------- readers

def detect_format(path: Path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix in ASCII_SUFFIXES:
        return "ascii_xyz"
    if suffix == ".ply":
        return "ply"
    if suffix == ".las":
        return "las"
    if suffix == ".laz":
        raise PointCloudError(f"{path}: LAZ (compressed LAS) is not supported")
    raise PointCloudError(f"{path}: cannot infer point cloud format from suffix {suffix!r}")


def read_point_cloud(path, format: str | None = None, tree_id: str | None = None) -> TreeCloud:
    """Read one tree from disk.

    Parameters
    ----------
    path : str or Path
        Point cloud file.
    format : {"ascii_xyz", "ply", "las"}, optional
        Inferred from the file suffix when omitted.
    tree_id : str, optional
        Defaults to the file stem.

    Raises
    ------
    PointCloudError
        Unreadable file, malformed record (with line number or byte offset),
        or a file holding zero points.
    """
    path = Path(path)
    fmt = format or detect_format(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise PointCloudError(f"{path}: unreadable file ({e})") from e

    if fmt == "ascii_xyz":
        pts = _parse_ascii_xyz(raw, path)
    elif fmt == "ply":
        pts = _parse_ply(raw, path)
    elif fmt == "las":
        pts = _parse_las(raw, path)
    else:
        raise PointCloudError(f"unknown format {fmt!r}")

    if len(pts) == 0:
        raise PointCloudError(f"{path}: zero points")
    finite = np.isfinite(pts).all(axis=1)
    if not finite.all():
        raise PointCloudError(f"{path}: non-finite coordinate in point {int(np.flatnonzero(~finite)[0])}")
    cloud = TreeCloud.from_points(pts, tree_id or path.stem)
    log.debug("read %s: %d points, z_base=%.3f", path, len(cloud), cloud.z_base)
    return cloud


def _parse_ascii_xyz(raw: bytes, path: Path) -> np.ndarray:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise PointCloudError(f"{path}: not UTF-8 text (byte {e.start})") from e

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pts = np.loadtxt(io.StringIO(text), comments="#", usecols=(0, 1, 2), ndmin=2, dtype=np.float64)
        if np.isfinite(pts).all():
            return pts
    except ValueError:
        pass
    # slow path, locates the offending line
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.replace(",", " ").split()
        if len(parts) < 3:
            raise PointCloudError(f"{path}:{lineno}: malformed record, expected 3+ fields, got {len(parts)}")
        try:
            rows.append((float(parts[0]), float(parts[1]), float(parts[2])))
        except ValueError as e:
            raise PointCloudError(f"{path}:{lineno}: malformed record ({e})") from e
        if not all(np.isfinite(rows[-1])):
            raise PointCloudError(f"{path}:{lineno}: non-finite coordinate")
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_ply(raw: bytes, path: Path) -> np.ndarray:
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise PointCloudError(f"{path}: not a PLY file (missing 'ply' magic or end_header)")
    nl = raw.find(b"\n", end)
    body_start = len(raw) if nl < 0 else nl + 1
    header = raw[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PointCloudError(f"{path}: property before any element in header")
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], "list"))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise PointCloudError(f"{path}: unknown PLY property type {tok[1]!r}")
                elements[-1][2].append((tok[-1], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise PointCloudError(f"{path}: unsupported PLY format {fmt!r}")

    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise PointCloudError(f"{path}: PLY has no vertex element")

    if fmt == "ascii":
        lines = raw[body_start:].decode("ascii", errors="replace").splitlines()
        header_lines = raw[:body_start].count(b"\n")
        cursor = 0
        for name, count, props in elements:
            if name != "vertex":
                cursor += count
                continue
            idx = {p[0]: i for i, p in enumerate(props)}
            if not {"x", "y", "z"} <= idx.keys() or any(p[1] == "list" for p in props):
                raise PointCloudError(f"{path}: vertex element needs scalar x, y, z properties")
            out = np.empty((count, 3))
            for i in range(count):
                lineno = header_lines + cursor + i + 1
                if cursor + i >= len(lines):
                    raise PointCloudError(f"{path}:{lineno}: truncated vertex data")
                tok = lines[cursor + i].split()
                try:
                    out[i] = [float(tok[idx["x"]]), float(tok[idx["y"]]), float(tok[idx["z"]])]
                except (ValueError, IndexError) as e:
                    raise PointCloudError(f"{path}:{lineno}: malformed vertex record") from e
            return out

    offset = body_start
    for name, count, props in elements:
        if any(p[1] == "list" for p in props):
            if name == "vertex":
                raise PointCloudError(f"{path}: list properties in vertex element are not supported")
            # elements after the vertex block are never reached
            raise PointCloudError(f"{path}: list-valued element {name!r} precedes vertex data")
        dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
        nbytes = dtype.itemsize * count
        if name == "vertex":
            if offset + nbytes > len(raw):
                have = (len(raw) - offset) // max(dtype.itemsize, 1)
                raise PointCloudError(
                    f"{path}: truncated vertex data at byte {offset + have * dtype.itemsize} "
                    f"({have} of {count} records)")
            if not {"x", "y", "z"} <= set(dtype.names):
                raise PointCloudError(f"{path}: vertex element needs x, y, z properties")
            arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
            return np.column_stack([arr["x"], arr["y"], arr["z"]]).astype(np.float64)
        offset += nbytes
    raise AssertionError("unreachable")



def _parse_las(raw: bytes, path: Path) -> np.ndarray:
    if len(raw) < 227 or raw[:4] != b"LASF":
        raise PointCloudError(f"{path}: not a LAS file (missing LASF signature at byte 0)")
    major, minor = raw[24], raw[25]
    if (major, minor) not in ((1, 2), (1, 3), (1, 4)):
        raise PointCloudError(f"{path}: unsupported LAS version {major}.{minor}")
    (offset_to_points,) = struct.unpack_from("<I", raw, 96)
    point_format = raw[104]
    (record_len,) = struct.unpack_from("<H", raw, 105)
    (n_legacy,) = struct.unpack_from("<I", raw, 107)
    scale = struct.unpack_from("<3d", raw, 131)
    offs = struct.unpack_from("<3d", raw, 155)

    if point_format & 0x80 or point_format & 0x40:
        raise PointCloudError(f"{path}: compressed (LAZ) point data is not supported")
    if point_format > 3:
        raise PointCloudError(f"{path}: point record format {point_format} not supported (0-3 only)")
    n = n_legacy
    if (major, minor) == (1, 4) and len(raw) >= 255:
        (n14,) = struct.unpack_from("<Q", raw, 247)
        n = n14 or n_legacy
    if record_len < 12:
        raise PointCloudError(f"{path}: point record length {record_len} too short (byte 105)")

    end = offset_to_points + n * record_len
    if end > len(raw):
        have = max(0, (len(raw) - offset_to_points) // record_len)
        raise PointCloudError(
            f"{path}: truncated point data at byte {offset_to_points + have * record_len} "
            f"({have} of {n} records)")
    dtype = np.dtype({"names": ["X", "Y", "Z"], "formats": ["<i4"] * 3,
                      "offsets": [0, 4, 8], "itemsize": record_len})
    rec = np.frombuffer(raw, dtype=dtype, count=n, offset=offset_to_points)
    return np.column_stack([
        rec["X"] * scale[0] + offs[0],
        rec["Y"] * scale[1] + offs[1],
        rec["Z"] * scale[2] + offs[2],
    ])


def write_xyz(cloud: TreeCloud | np.ndarray, path) -> Path:
    """Write points as ascii xyz with 6 decimals (micrometre resolution)."""
    pts = cloud.points if isinstance(cloud, TreeCloud) else np.asarray(cloud, dtype=np.float64)
    path = Path(path)
    np.savetxt(path, pts, fmt="%.6f", delimiter=" ")
    return path


# -------------------------------------------------------------- transforms

def normalize_height(cloud: TreeCloud) -> TreeCloud:
    """Shift z so the robust base sits at 0. The shift accumulates in z_offset."""
    if len(cloud) == 0:
        raise PointCloudError("cannot normalize an empty cloud")
    dz = cloud.z_base
    if dz == 0.0:
        return cloud
    pts = cloud.points.copy()
    pts[:, 2] -= dz
    return TreeCloud(cloud.tree_id, pts, 0.0, cloud.z_offset + dz)


def estimate_stem_axis(cloud: TreeCloud) -> StemAxis:
    """Centroid of the points in the lowest metre above the base.

    Falls back to the lowest 5 % of points (at least one) when that band is empty.
    """
    if len(cloud) == 0:
        raise PointCloudError("cannot estimate a stem axis on an empty cloud")
    pts = cloud.points
    band = pts[pts[:, 2] < cloud.z_base + AXIS_BAND_M]
    if len(band) == 0:
        k = max(1, int(np.ceil(AXIS_FALLBACK_FRACTION * len(pts))))
        band = pts[np.argsort(pts[:, 2], kind="stable")[:k]]
    return StemAxis(float(band[:, 0].mean()), float(band[:, 1].mean()))
