"""Procedural conifer point clouds with exact whorl ground truth."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pointcloud_io import TreeCloud, write_xyz
from .postprocess import calculate_angle_at_p2, calculate_distance

MIN_TRUTH_SPACING_M = 0.3
BASE_RING_FRACTION = 0.02


@dataclass(frozen=True)
class SynthTreeConfig:
    tree_id: str = "synth_000"
    height_m: float = 12.0
    first_whorl_z_m: float = 2.0
    whorl_spacing_m: float = 0.5
    # spacing at the top when it varies linearly with height; None = constant
    whorl_spacing_top_m: float | None = None
    insertion_angle_deg: float = 140.0
    branch_len_base_m: float = 1.5
    # fraction of the base length lost by the top whorl
    branch_taper: float = 0.7
    stem_radius_m: float = 0.12
    point_density_pts_per_m: float = 1000.0
    noise_sigma_m: float = 0.005
    seed: int = 0
    stem_x_m: float = 0.0
    stem_y_m: float = 0.0
    base_z_m: float = 0.0
    random_azimuth: bool = False

    def __post_init__(self):
        if not self.height_m > self.first_whorl_z_m >= 0:
            raise ValueError("need height_m > first_whorl_z_m >= 0")
        spacings = [self.whorl_spacing_m]
        if self.whorl_spacing_top_m is not None:
            spacings.append(self.whorl_spacing_top_m)
        if min(spacings) < MIN_TRUTH_SPACING_M:
            raise ValueError(f"whorl spacing must be >= {MIN_TRUTH_SPACING_M} m")
        if not 0 < self.insertion_angle_deg <= 180:
            raise ValueError("insertion_angle_deg must be in (0, 180]")
        if not 0 <= self.branch_taper < 1:
            raise ValueError("branch_taper must be in [0, 1)")
        if self.branch_len_base_m <= 0 or self.stem_radius_m <= 0 or self.point_density_pts_per_m <= 0:
            raise ValueError("lengths and densities must be > 0")
        if self.noise_sigma_m < 0:
            raise ValueError("noise_sigma_m must be >= 0")


@dataclass(frozen=True)
class SynthWhorl:
    """Exact whorl geometry; tips are (x, z) in the branch plane, z above the tree base."""

    z_m: float
    tip1: tuple[float, float]
    tip2: tuple[float, float]
    angle_deg: float
    max_len_m: float
    center_x: float
    azimuth_deg: float = 0.0

    @property
    def center(self) -> tuple[float, float]:
        return (self.center_x, self.z_m)

    def to_json(self) -> dict:
        return {"z_m": self.z_m, "tip1": list(self.tip1), "tip2": list(self.tip2),
                "angle_deg": self.angle_deg, "max_len_m": self.max_len_m,
                "center": [self.center_x, self.z_m], "azimuth_deg": self.azimuth_deg}

    @classmethod
    def from_json(cls, d: dict) -> "SynthWhorl":
        tip1, tip2 = tuple(d["tip1"]), tuple(d["tip2"])
        cx = d["center"][0] if "center" in d else 0.5 * (tip1[0] + tip2[0])
        return cls(d["z_m"], tip1, tip2, d["angle_deg"], d["max_len_m"], cx, d.get("azimuth_deg", 0.0))


@dataclass
class SynthGroundTruth:
    tree_id: str
    whorls: list[SynthWhorl] = field(default_factory=list)
    height_m: float | None = None

    @property
    def z(self) -> list[float]:
        return [w.z_m for w in self.whorls]

    @property
    def top_z_m(self) -> float:
        """Highest noise-free point: stem apex or the highest branch tip."""
        tips = [max(w.tip1[1], w.tip2[1]) for w in self.whorls]
        return max([self.height_m or 0.0] + tips)


def whorl_heights(cfg: SynthTreeConfig) -> list[float]:
    h, z0 = cfg.height_m, cfg.first_whorl_z_m
    if cfg.whorl_spacing_top_m is None:
        n = int(math.floor((h - z0) / cfg.whorl_spacing_m + 1e-9)) + 1
        return [z0 + k * cfg.whorl_spacing_m for k in range(n)]
    zs = [z0]
    while True:
        frac = (zs[-1] - z0) / (h - z0)
        nxt = zs[-1] + cfg.whorl_spacing_m + frac * (cfg.whorl_spacing_top_m - cfg.whorl_spacing_m)
        if nxt > h + 1e-9:
            return zs
        zs.append(nxt)


def generate_tree(cfg: SynthTreeConfig) -> tuple[TreeCloud, SynthGroundTruth]:
    """Noisy stem cylinder plus two opposite in-plane branches per whorl.

    A flat ring of points at the stem foot pins the robust base at exactly z=0
    and a single apex point marks the stem top. Ground truth stores the
    noise-free geometry with z measured from the base.
    """
    rng = np.random.default_rng(cfg.seed)
    h, dens, sx, sy = cfg.height_m, cfg.point_density_pts_per_m, cfg.stem_x_m, cfg.stem_y_m
    half = math.radians(cfg.insertion_angle_deg) / 2.0
    zs = whorl_heights(cfg)
    z_span = max(h - cfg.first_whorl_z_m, 1e-9)

    whorls = []
    branch_pts = []
    for z in zs:
        length = cfg.branch_len_base_m * (1.0 - cfg.branch_taper * (z - cfg.first_whorl_z_m) / z_span)
        az = float(rng.uniform(0.0, 180.0)) if cfg.random_azimuth else 0.0
        dx, dz = length * math.sin(half), length * math.cos(half)
        tip1, tip2 = (sx - dx, z + dz), (sx + dx, z + dz)
        whorls.append(SynthWhorl(
            z_m=z, tip1=tip1, tip2=tip2,
            angle_deg=calculate_angle_at_p2(tip1, (sx, z), tip2),
            max_len_m=calculate_distance((sx, z), (tip1, tip2)),
            center_x=sx, azimuth_deg=az,
        ))
        ca, sa = math.cos(math.radians(az)), math.sin(math.radians(az))
        for sign in (-1.0, 1.0):
            n = max(2, int(math.ceil(dens * length)))
            t = rng.uniform(0.0, 1.0, n)[:, None]
            start = np.array([sx, sy, z])
            end = np.array([sx + sign * dx * ca, sy + sign * dx * sa, z + dz])
            branch_pts.append(start + t * (end - start))

    n_stem = int(math.ceil(dens * h))
    zz = rng.uniform(0.0, h, n_stem)
    th = rng.uniform(0.0, 2 * math.pi, n_stem)
    r = cfg.stem_radius_m * (1.0 - 0.7 * zz / h)
    stem = np.column_stack([sx + r * np.cos(th), sy + r * np.sin(th), zz])

    body = np.vstack([stem] + branch_pts)
    if cfg.noise_sigma_m > 0:
        body = body + rng.normal(0.0, cfg.noise_sigma_m, body.shape)
        body[:, 2] = np.maximum(body[:, 2], 0.0)

    n_ring = max(8, int(math.ceil(BASE_RING_FRACTION * len(body))))
    th = rng.uniform(0.0, 2 * math.pi, n_ring)
    ring = np.column_stack([sx + cfg.stem_radius_m * np.cos(th), sy + cfg.stem_radius_m * np.sin(th),
                            np.zeros(n_ring)])
    if cfg.noise_sigma_m > 0:
        ring[:, :2] += rng.normal(0.0, cfg.noise_sigma_m, (n_ring, 2))

    pts = np.vstack([ring, body, [[sx, sy, h]]])
    pts[:, 2] += cfg.base_z_m
    cloud = TreeCloud.from_points(pts, cfg.tree_id)
    return cloud, SynthGroundTruth(cfg.tree_id, whorls, h)


def truth_path(directory, tree_id: str) -> Path:
    return Path(directory) / f"{tree_id}.truth.json"


def write_truth(truth: SynthGroundTruth, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps([w.to_json() for w in truth.whorls], indent=1) + "\n")
    return path


def read_truth(path, tree_id: str | None = None) -> SynthGroundTruth:
    path = Path(path)
    doc = json.loads(path.read_text())
    if not isinstance(doc, list):
        raise ValueError(f"{path}: ground truth must be a JSON array of whorl records")
    tid = tree_id or path.name.removesuffix(".truth.json")
    whorls = sorted((SynthWhorl.from_json(d) for d in doc), key=lambda w: w.z_m)
    return SynthGroundTruth(tid, whorls)


def write_tree(cloud: TreeCloud, truth: SynthGroundTruth, directory) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    xyz = write_xyz(cloud, directory / f"{cloud.tree_id}.xyz")
    return xyz, write_truth(truth, truth_path(directory, truth.tree_id))


def random_tree_config(seed: int, **overrides) -> SynthTreeConfig:
    """Varied tree: height 8-25 m, spacing 0.4-1.0 m."""
    rng = np.random.default_rng([seed, 7919])
    params = dict(
        tree_id=f"synth_{seed:03d}",
        height_m=float(rng.uniform(8.0, 25.0)),
        first_whorl_z_m=float(rng.uniform(1.0, 3.0)),
        whorl_spacing_m=float(rng.uniform(0.4, 1.0)),
        insertion_angle_deg=float(rng.uniform(100.0, 170.0)),
        branch_len_base_m=float(rng.uniform(1.0, 2.5)),
        seed=seed,
    )
    params.update(overrides)
    return SynthTreeConfig(**params)


def generate_batch(directory, n: int, seed0: int = 0, **overrides) -> list[Path]:
    """Write n varied synthetic trees (seeds seed0..seed0+n-1) and their truth files."""
    paths = []
    for seed in range(seed0, seed0 + n):
        cloud, truth = generate_tree(random_tree_config(seed, **overrides))
        paths.append(write_tree(cloud, truth, directory)[0])
    return paths

