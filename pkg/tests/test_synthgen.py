import hashlib
import math

import numpy as np
import pytest

from whorlpose.pointcloud_io import normalize_height, read_point_cloud
from whorlpose.postprocess import calculate_angle_at_p2, calculate_distance
from whorlpose.synthgen import (SynthTreeConfig, SynthWhorl, generate_batch, generate_tree, random_tree_config,
                                read_truth, truth_path, whorl_heights, write_tree)


def segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def test_whorl_count_and_spacing():
    cfg = SynthTreeConfig(height_m=12, first_whorl_z_m=2, whorl_spacing_m=0.5)
    zs = whorl_heights(cfg)
    assert len(zs) == 21
    assert zs[0] == 2.0 and zs[-1] == pytest.approx(12.0)
    assert np.diff(zs) == pytest.approx([0.5] * 20)


def test_spacing_gradient_within_bounds():
    zs = whorl_heights(SynthTreeConfig(height_m=20, whorl_spacing_m=0.9, whorl_spacing_top_m=0.4))
    gaps = np.diff(zs)
    assert gaps[0] == pytest.approx(0.9)
    assert np.all(np.diff(gaps) < 0) and gaps.min() >= 0.4


@pytest.mark.parametrize("kw", [dict(whorl_spacing_m=0.2), dict(height_m=1.0), dict(insertion_angle_deg=0),
                                dict(noise_sigma_m=-1), dict(branch_taper=1.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SynthTreeConfig(**kw)


@pytest.mark.parametrize("random_azimuth", [False, True])
def test_noise_free_branch_points_lie_on_segments(random_azimuth):
    cfg = SynthTreeConfig(noise_sigma_m=0.0, point_density_pts_per_m=200, random_azimuth=random_azimuth, seed=4)
    cloud, truth = generate_tree(cfg)
    p = cloud.points
    r = np.hypot(p[:, 0], p[:, 1])
    off_stem = p[(r > cfg.stem_radius_m + 1e-9) & (p[:, 2] > 0) & (p[:, 2] < cfg.height_m)]
    assert len(off_stem) > 100
    best = np.full(len(off_stem), np.inf)
    for w in truth.whorls:
        a = np.array([0.0, 0.0, w.z_m])
        ca, sa = math.cos(math.radians(w.azimuth_deg)), math.sin(math.radians(w.azimuth_deg))
        for tip in (w.tip1, w.tip2):
            b = np.array([tip[0] * ca, tip[0] * sa, tip[1]])
            best = np.minimum(best, segment_distance(off_stem, a, b))
    assert best.max() < 1e-9


def test_truth_geometry_self_consistent():
    _, truth = generate_tree(SynthTreeConfig(insertion_angle_deg=130))
    for w in truth.whorls:
        assert w.angle_deg == pytest.approx(130.0, abs=1e-9)
        assert calculate_angle_at_p2(w.tip1, w.center, w.tip2) == pytest.approx(w.angle_deg)
        assert calculate_distance(w.center, (w.tip1, w.tip2)) == pytest.approx(w.max_len_m)
    lens = [w.max_len_m for w in truth.whorls]
    assert lens == sorted(lens, reverse=True)  # tapering towards the top


def test_base_offset_normalizes_away(tmp_path):
    cloud, _ = generate_tree(SynthTreeConfig(base_z_m=137.2, point_density_pts_per_m=100))
    n = normalize_height(cloud)
    assert n.z_offset == pytest.approx(137.2)
    assert n.points[:, 2].min() == pytest.approx(0.0, abs=1e-9)


def test_noisy_points_never_below_base():
    cloud, _ = generate_tree(SynthTreeConfig(noise_sigma_m=0.05, point_density_pts_per_m=200))
    assert cloud.points[:, 2].min() >= 0.0


def test_write_read_round_trip(tmp_path):
    cloud, truth = generate_tree(SynthTreeConfig(tree_id="rt", random_azimuth=True, point_density_pts_per_m=100))
    xyz, tj = write_tree(cloud, truth, tmp_path)
    assert tj == truth_path(tmp_path, "rt")
    back = read_truth(tj)
    assert back.tree_id == "rt"
    assert back.whorls == truth.whorls
    got = read_point_cloud(xyz)
    assert np.abs(got.points - cloud.points).max() <= 5e-7


def test_truth_without_center_key():
    w = SynthWhorl.from_json({"z_m": 3.0, "tip1": [-1, 3.5], "tip2": [1, 3.5], "angle_deg": 90, "max_len_m": 1.1})
    assert w.center == (0.0, 3.0) and w.azimuth_deg == 0.0


def test_random_configs_in_range():
    for s in range(30):
        c = random_tree_config(s)
        assert 8 <= c.height_m <= 25 and 0.4 <= c.whorl_spacing_m <= 1.0
    assert random_tree_config(3, height_m=9.0).height_m == 9.0


def test_batch_byte_identical(tmp_path):
    def digest(d):
        generate_batch(d, 2, seed0=5, point_density_pts_per_m=100)
        return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir())}

    a, b = digest(tmp_path / "a"), digest(tmp_path / "b")
    assert a == b and len(a) == 4
