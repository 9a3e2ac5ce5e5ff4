import math
import shutil
from dataclasses import replace

import numpy as np
import pytest

from pathfusion.errors import ConfigError, CorruptionError, DomainError, FormatError
from pathfusion.preprocess import GpsFix, miller_project
from pathfusion.scene import Box, Route, free_space_intercept_db
from pathfusion.sensors import (
    GROUND_COLOR,
    SKY_COLOR,
    CameraConfig,
    LidarConfig,
    RxPose,
    generate_dataset,
    image_hit_ids,
    load_dataset,
    regenerate_label,
    render_image,
    render_point_cloud,
    sample_gps,
    save_dataset,
)

QUIET = LidarConfig(range_noise_m=0.0, outlier_fraction=0.0)
ORIGIN = GpsFix(39.96, 116.35)


@pytest.fixture(scope="module")
def empty(scene):
    return replace(scene, buildings=())


@pytest.fixture(scope="module")
def wall(scene):
    """One wide wall whose near face is the plane x = 10."""
    return replace(scene, buildings=(Box((10.0, -500.0, -1.0), (12.0, 500.0, 200.0), (0.2, 0.5, 0.9)),), has_ground=False)


# --- camera ----------------------------------------------------------------


def test_empty_scene_is_sky_over_ground(empty):
    cam = CameraConfig(draw_mast=False)
    img = render_image(empty, RxPose(50.0, 0.0, 0.0), cam)
    assert img.shape == (64, 64, 3) and img.dtype == np.float32
    np.testing.assert_allclose(img[:32].reshape(-1, 3), np.tile(SKY_COLOR, (32 * 64, 1)), atol=1e-7)
    np.testing.assert_allclose(img[32:].reshape(-1, 3), np.tile(GROUND_COLOR, (32 * 64, 1)), atol=1e-7)


def test_building_ahead_fills_frame(wall):
    ids = image_hit_ids(wall, RxPose(8.0, 0.0, 0.0))
    assert (ids == 0).mean() > 0.5


def test_render_deterministic(scene):
    pose = RxPose(120.0, -3.5, 0.0)
    assert np.array_equal(render_image(scene, pose), render_image(scene, pose))


def test_camera_config_validation():
    with pytest.raises(ConfigError):
        CameraConfig(width=0)


def test_mast_visible_from_side_street(scene):
    # looking north up the side street at the transmitter
    x, y, _ = scene.tx_pose
    img = render_image(scene, RxPose(x, y - 15.0, math.pi / 2))
    plain = render_image(scene, RxPose(x, y - 15.0, math.pi / 2), CameraConfig(draw_mast=False))
    rows, cols = np.nonzero(np.any(img != plain, axis=2))
    assert len(np.unique(cols)) == 1 and len(rows) >= 3


# --- lidar -----------------------------------------------------------------


def test_empty_scene_gives_empty_cloud(empty):
    no_ground = replace(empty, has_ground=False)
    assert render_point_cloud(no_ground, RxPose(0, 0, 0), QUIET).shape == (0, 3)


def test_wall_ranges_exact(wall):
    pts = render_point_cloud(wall, RxPose(0.0, 0.0, 0.0), QUIET)
    # azimuth-0 rays: points lie on the plane x = 10 (sensor frame: heading 0, origin at x=0)
    front = pts[(np.abs(pts[:, 1]) < 1e-6)]
    assert len(front) == 16
    np.testing.assert_allclose(front[:, 0], 10.0, atol=1e-5)
    elev = np.radians(np.linspace(-15, 15, 16))
    np.testing.assert_allclose(np.sort(np.linalg.norm(front, axis=1)), np.sort(10.0 / np.cos(elev)), rtol=1e-6)


def test_outlier_count_binomial(wall):
    lidar = LidarConfig(n_azimuth=1250, n_elevation=16, range_noise_m=0.0)
    counts = []
    for seed in range(5):
        pts, mask = render_point_cloud(wall, RxPose(0, 0, 0), lidar, seed=seed, return_outlier_mask=True)
        assert len(pts) > 0
        counts.append(mask.sum() * 10_000 / len(pts))
    for c in counts:
        assert 170 <= c <= 230


def test_lidar_validation():
    with pytest.raises(ConfigError):
        LidarConfig(max_range_m=0.0)


# --- gps -------------------------------------------------------------------


ROUTE = Route(((5.0, -3.5), (200.0, -3.5), (200.0, 40.0)))


def test_gps_at_start_is_origin():
    fix = sample_gps(ROUTE, 0.0, ORIGIN, noise_m=0.0)
    assert (fix.lat_deg, fix.lon_deg) == (ORIGIN.lat_deg, ORIGIN.lon_deg)


@pytest.mark.parametrize("s", [1.0, 77.7, 195.0, 210.0, ROUTE.length])
def test_gps_displacement_matches_route(s):
    o = miller_project(sample_gps(ROUTE, 0.0, ORIGIN, noise_m=0.0))
    p = miller_project(sample_gps(ROUTE, s, ORIGIN, noise_m=0.0))
    x0, y0, _ = ROUTE.point_at(0.0)
    x, y, _ = ROUTE.point_at(s)
    assert abs((p.x - o.x) - (x - x0)) < 1e-6 and abs((p.y - o.y) - (y - y0)) < 1e-6


def test_gps_noise_std():
    o = miller_project(sample_gps(ROUTE, 50.0, ORIGIN, noise_m=0.0))
    errs = []
    for seed in range(1000):
        p = miller_project(sample_gps(ROUTE, 50.0, ORIGIN, seed=seed, noise_m=1.5))
        errs += [p.x - o.x, p.y - o.y]
    assert 1.3 <= np.std(errs) <= 1.7


def test_gps_outside_route():
    with pytest.raises(DomainError):
        sample_gps(ROUTE, ROUTE.length + 1.0, ORIGIN)


# --- dataset ---------------------------------------------------------------


def test_split_sizes(scene, routes):
    from pathfusion.sensors import split_indices

    sp = split_indices(2600, 0)
    assert [len(sp[k]) for k in ("train", "val", "test")] == [1820, 390, 390]
    assert sorted(sp["train"] + sp["val"] + sp["test"]) == list(range(2600))
    one = generate_dataset(scene, routes, n_samples=1)
    assert one.split == {"train": [0], "val": [], "test": []}
    with pytest.raises(ConfigError):
        generate_dataset(scene, [], n_samples=1)


def test_dataset_contents(small_dataset, scene):
    ds = small_dataset
    assert len(ds) == 40
    for s in ds.samples:
        assert s.image.shape == (64, 64, 3) and s.cloud.shape[1] == 3
        assert len(s.gps_track) == 8
        assert regenerate_label(scene, s, seed=3) == s.label
    routes_used = {s.pose["route"] for s in ds.samples}
    assert routes_used == {0, 1, 2, 3}


def test_los_samples_follow_closed_form(scene, routes):
    ds = generate_dataset(scene, routes, n_samples=60, shadowing=False, seed=1)
    pl0 = free_space_intercept_db(scene.carrier_frequency)
    los = [s for s in ds.samples if s.label.los]
    assert los
    for s in los:
        assert s.label.pl_db == pl0 + 10 * 2.1 * math.log10(s.label.distance)


def test_dataset_determinism(scene, routes, small_dataset):
    from pathfusion.scene import SceneConfig

    again = generate_dataset(scene, routes, n_samples=40, gps_window=8, seed=3, config_digest=SceneConfig().digest())
    assert again.checksum() == small_dataset.checksum()
    other = generate_dataset(scene, routes, n_samples=40, gps_window=8, seed=4, config_digest=SceneConfig().digest())
    assert other.checksum() != small_dataset.checksum()


def _same(a, b):
    assert a.checksum() == b.checksum()
    assert a.split == b.split and a.origin == b.origin and a.scene_diagonal == b.scene_diagonal
    for x, y in zip(a.samples, b.samples):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.cloud, y.cloud)
        assert x.gps_track == y.gps_track and x.label == y.label and x.pose == y.pose


def test_save_load_round_trip(small_dataset, tmp_path):
    save_dataset(small_dataset, tmp_path / "d")
    _same(small_dataset, load_dataset(tmp_path / "d"))


def test_truncated_cloud_is_corruption(small_dataset, tmp_path):
    d = tmp_path / "d"
    save_dataset(small_dataset, d)
    f = d / "clouds" / "00003.pcd"
    f.write_bytes(f.read_bytes()[:-7])
    with pytest.raises(CorruptionError, match="00003"):
        load_dataset(d)


def test_missing_files_listed(small_dataset, tmp_path):
    d = tmp_path / "d"
    save_dataset(small_dataset, d)
    (d / "images" / "00005.img").unlink()
    (d / "clouds" / "00011.pcd").unlink()
    with pytest.raises(FormatError, match=r"\[5, 11\]"):
        load_dataset(d)


def test_missing_manifest(tmp_path):
    with pytest.raises(FormatError):
        load_dataset(tmp_path)


def test_copied_dataset_loads(small_dataset, tmp_path):
    save_dataset(small_dataset, tmp_path / "a")
    shutil.copytree(tmp_path / "a", tmp_path / "b")
    _same(load_dataset(tmp_path / "a"), load_dataset(tmp_path / "b"))
