"""
Point cloud -> section images.

Each tree is rotated into a set of view frames around its stem axis, cut to
a thin slab through the stem, split into fixed-height vertical windows and
rasterized orthographically onto the x-z plane. Every image carries the
world bounding box needed to invert the mapping exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .pointcloud_io import StemAxis, TreeCloud, estimate_stem_axis, normalize_height, read_point_cloud

OPAQUE = np.array([0, 0, 0, 255], dtype=np.uint8)
FULL_SLAB = math.inf


@dataclass
class SlicingConfig:
    view_angles_deg: list[float] = field(default_factory=lambda: [0.0, 45.0, 90.0, 135.0])
    slab_thickness_m: float = 1.0
    section_height_m: float = 10.0
    section_overlap_m: float = 1.0
    window_width_m: float = 10.0
    marker_radius_px: int = 0

    def __post_init__(self):
        if not 0 < self.section_overlap_m < self.section_height_m:
            raise ValueError("need 0 < section_overlap_m < section_height_m")
        if not self.slab_thickness_m > 0:
            raise ValueError("slab_thickness_m must be > 0")
        if not self.window_width_m > 0:
            raise ValueError("window_width_m must be > 0")
        if not self.view_angles_deg:
            raise ValueError("at least one view angle is required")
        for a in self.view_angles_deg:
            if not 0 <= a < 360:
                raise ValueError(f"view angle {a} outside [0, 360)")
        if self.marker_radius_px < 0:
            raise ValueError("marker_radius_px must be >= 0")


@dataclass(frozen=True)
class ImageMeta:
    tree_id: str
    view_angle_deg: float
    section_index: int
    x_min: float
    x_max: float
    z_min: float
    z_max: float
    width_px: int
    height_px: int

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.z_max > self.z_min):
            raise ValueError("ImageMeta bbox must satisfy x_max > x_min and z_max > z_min")
        if self.width_px < 1 or self.height_px < 1:
            raise ValueError("image dimensions must be positive")
        if not math.isclose(self.gsd, (self.z_max - self.z_min) / self.height_px, rel_tol=1e-9):
            raise ValueError("ImageMeta pixels must be square")

    @property
    def gsd(self) -> float:
        """Metres per pixel."""
        return (self.x_max - self.x_min) / self.width_px

    @property
    def name(self) -> str:
        return image_name(self.tree_id, self.view_angle_deg, self.section_index)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["view_angle_deg"] = float(d["view_angle_deg"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ImageMeta":
        keys = ("tree_id", "view_angle_deg", "section_index", "x_min", "x_max",
                "z_min", "z_max", "width_px", "height_px")
        missing = [k for k in keys if k not in d]
        if missing:
            raise ValueError(f"image metadata missing fields: {', '.join(missing)}")
        return cls(str(d["tree_id"]), float(d["view_angle_deg"]), int(d["section_index"]),
                   float(d["x_min"]), float(d["x_max"]), float(d["z_min"]), float(d["z_max"]),
                   int(d["width_px"]), int(d["height_px"]))

    # world <-> pixel / normalized coordinates, row 0 at z_max
    def world_to_pixel(self, x, z):
        g = self.gsd
        col = np.clip(np.floor((np.asarray(x) - self.x_min) / g), 0, self.width_px - 1).astype(np.int64)
        row = np.clip(np.floor((self.z_max - np.asarray(z)) / g), 0, self.height_px - 1).astype(np.int64)
        return col, row

    def pixel_center_to_world(self, col, row):
        g = self.gsd
        return self.x_min + (np.asarray(col) + 0.5) * g, self.z_max - (np.asarray(row) + 0.5) * g

    def world_to_normalized(self, x, z):
        return ((np.asarray(x) - self.x_min) / (self.x_max - self.x_min),
                (self.z_max - np.asarray(z)) / (self.z_max - self.z_min))


def image_name(tree_id: str, view_angle_deg: float, section_index: int) -> str:
    return f"{tree_id}_v{view_angle_deg:g}_s{section_index}.png"


@dataclass(frozen=True)
class SectionImage:
    meta: ImageMeta
    pixels: np.ndarray  # (height_px, width_px, 4) uint8 RGBA

    @property
    def name(self) -> str:
        return self.meta.name

    def composite(self) -> np.ndarray:
        """RGB raster composited over a white background."""
        rgba = self.pixels.astype(np.float32)
        a = rgba[..., 3:4] / 255.0
        rgb = rgba[..., :3] * a + 255.0 * (1.0 - a)
        return np.round(rgb).astype(np.uint8)

    def save(self, out_dir) -> tuple[Path, Path]:
        """Write <name>.png (RGBA) and its <name>.json metadata sidecar."""
        out_dir = Path(out_dir)
        png = out_dir / self.name
        Image.fromarray(self.pixels, mode="RGBA").save(png, format="PNG")
        sidecar = png.with_suffix(".json")
        sidecar.write_text(json.dumps(self.meta.to_dict(), indent=2) + "\n")
        return png, sidecar


def load_section_image(png_path) -> SectionImage:
    png_path = Path(png_path)
    meta = ImageMeta.from_dict(json.loads(png_path.with_suffix(".json").read_text()))
    with Image.open(png_path) as im:
        pixels = np.asarray(im.convert("RGBA"))
    return SectionImage(meta, pixels)


def load_metadata_dir(directory) -> dict[str, ImageMeta]:
    """Map image file name -> ImageMeta for every sidecar in a directory."""
    out = {}
    for p in sorted(Path(directory).glob("*.json")):
        try:
            meta = ImageMeta.from_dict(json.loads(p.read_text()))
        except (ValueError, TypeError, json.JSONDecodeError):
            continue
        out[meta.name] = meta
    return out


# ---------------------------------------------------------------- operations

def rotate_point_cloud(cloud: TreeCloud, angle_deg: float, center: StemAxis) -> TreeCloud:
    """Rotate counter-clockwise by angle_deg about the vertical line through center."""
    if not math.isfinite(angle_deg):
        raise ValueError("rotation angle must be finite")
    if angle_deg % 360.0 == 0.0:
        return cloud
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    pts = cloud.points
    dx = pts[:, 0] - center.x0
    dy = pts[:, 1] - center.y0
    out = np.empty_like(pts)
    out[:, 0] = center.x0 + c * dx - s * dy
    out[:, 1] = center.y0 + s * dx + c * dy
    out[:, 2] = pts[:, 2]
    return cloud.with_points(out)


def slice_center_slab(cloud: TreeCloud, center: StemAxis, thickness_m: float) -> TreeCloud:
    """Keep points with |y - y0| <= thickness/2 in the current frame."""
    if not thickness_m > 0:
        raise ValueError("slab thickness must be > 0")
    if math.isinf(thickness_m):
        return cloud
    keep = np.abs(cloud.points[:, 1] - center.y0) <= thickness_m / 2.0
    return cloud.with_points(cloud.points[keep])


def split_vertical_sections(cloud: TreeCloud, cfg: SlicingConfig) -> list[tuple[float, float]]:
    """Fixed-height z windows from 0 stepping by (height - overlap) until the top is covered."""
    top = cloud.top
    step = cfg.section_height_m - cfg.section_overlap_m
    sections = []
    k = 0
    while True:
        lo = k * step
        hi = lo + cfg.section_height_m
        sections.append((lo, hi))
        if hi >= top - 1e-9:
            return sections
        k += 1


def rasterize_section(points: TreeCloud, meta: ImageMeta, marker_radius_px: int = 0) -> SectionImage:
    pixels = np.zeros((meta.height_px, meta.width_px, 4), dtype=np.uint8)
    x, _, z = points.xyz
    inside = (x >= meta.x_min) & (x <= meta.x_max) & (z >= meta.z_min) & (z <= meta.z_max)
    col, row = meta.world_to_pixel(x[inside], z[inside])
    if marker_radius_px <= 0:
        pixels[row, col] = OPAQUE
    else:
        r = marker_radius_px
        for dr in range(-r, r + 1):
            for dc in range(-r, r + 1):
                if dr * dr + dc * dc > r * r:
                    continue
                rr, cc = row + dr, col + dc
                ok = (rr >= 0) & (rr < meta.height_px) & (cc >= 0) & (cc < meta.width_px)
                pixels[rr[ok], cc[ok]] = OPAQUE
    return SectionImage(meta, pixels)


def _image_height_px(cfg: SlicingConfig, px: int) -> int:
    h = px * cfg.section_height_m / cfg.window_width_m
    if not math.isclose(h, round(h), abs_tol=1e-9):
        raise ValueError("section_height_m / window_width_m * px must be an integer for square pixels")
    return int(round(h))


def iter_section_images(cloud: TreeCloud, axis: StemAxis, cfg: SlicingConfig,
                        px: int = 1000) -> Iterator[SectionImage]:
    """Lazily yield one image per view x section (views outermost).

    A view at angle a rotates the cloud by -a, bringing the vertical plane at
    azimuth a onto the image x-z plane.
    """
    sections = split_vertical_sections(cloud, cfg)
    height_px = _image_height_px(cfg, px)
    half = cfg.window_width_m / 2.0
    for angle in cfg.view_angles_deg:
        view = slice_center_slab(rotate_point_cloud(cloud, -angle, axis), axis, cfg.slab_thickness_m)
        for idx, (lo, hi) in enumerate(sections):
            meta = ImageMeta(cloud.tree_id, float(angle), idx, axis.x0 - half, axis.x0 + half,
                             lo, hi, px, height_px)
            yield rasterize_section(view, meta, cfg.marker_radius_px)


def convert_sections_to_images(cloud: TreeCloud, axis: StemAxis, cfg: SlicingConfig,
                               px: int = 1000) -> list[SectionImage]:
    return list(iter_section_images(cloud, axis, cfg, px))


def prepare_cloud(path, format: str | None = None) -> tuple[TreeCloud, StemAxis]:
    """read -> normalize -> stem axis."""
    cloud = normalize_height(read_point_cloud(path, format))
    return cloud, estimate_stem_axis(cloud)


def process_point_cloud(path, cfg: SlicingConfig | None = None,
                        px: int = 1000) -> tuple[TreeCloud, list[SectionImage]]:
    cfg = cfg or SlicingConfig()
    cloud, axis = prepare_cloud(path)
    return cloud, convert_sections_to_images(cloud, axis, cfg, px)
