import numpy as np
import pytest

from t2ldm.rangemap import (
    NormalizedImage,
    RangeImage,
    SensorConfig,
    denormalize,
    normalize,
    pixel_angles,
    project,
    read_point_cloud,
    read_range_image,
    unproject,
    write_point_cloud,
    write_range_image,
)

CFG = SensorConfig(height=32, width=1024, fov_up_deg=2.0, fov_down_deg=-25.0,
                   depth_min=0.5, depth_max=63.0)


def centers_cloud(config, rng, n):
    # independent transcription of the pixel-center geometry used as oracle
    rows = rng.integers(0, config.height, size=n)
    cols = rng.integers(0, config.width, size=n)
    keys = rows * config.width + cols
    _, first = np.unique(keys, return_index=True)
    rows, cols = rows[first], cols[first]
    r = rng.uniform(config.depth_min + 0.1, config.depth_max - 0.1, size=len(rows))
    fu, fd = np.deg2rad(config.fov_up_deg), np.deg2rad(config.fov_down_deg)
    psi = np.pi * (1.0 - 2.0 * (cols + 0.5) / config.width)
    phi = fu - (fu - fd) * (rows + 0.5) / config.height
    pts = np.stack([r * np.cos(phi) * np.cos(psi),
                    r * np.cos(phi) * np.sin(psi),
                    r * np.sin(phi),
                    rng.uniform(0, 1, size=len(rows))], axis=1)
    return pts, rows, cols


def test_column_formula_examples():
    img = project(np.array([[10.0, 0.0, 0.0, 0.5]]), CFG)
    v, u = np.argwhere(img.valid)[0]
    assert u == 512  # atan2(0, 10) = 0 -> u = W/2

    img = project(np.array([[-10.0, 1e-9, 0.0, 0.5]]), CFG)
    v, u = np.argwhere(img.valid)[0]
    assert u == 0  # atan2 -> pi -> u -> 0


def test_row_zero_is_fov_up():
    fu = np.deg2rad(CFG.fov_up_deg)
    r = 10.0
    pitch = fu - 1e-6
    pt = np.array([[r * np.cos(pitch), 0.0, r * np.sin(pitch), 0.0]])
    img = project(pt, CFG)
    v, u = np.argwhere(img.valid)[0]
    assert v == 0


def test_nearest_point_wins_and_tie_keeps_first():
    near = [5.0, 0.0, 0.0, 0.1]
    far = [9.0, 0.0, 0.0, 0.9]
    img = project(np.array([far, near]), CFG)
    assert img.depth[img.valid][0] == pytest.approx(5.0)
    assert img.intensity[img.valid][0] == pytest.approx(0.1)

    a = [7.0, 0.0, 0.0, 0.3]
    b = [7.0, 0.0, 0.0, 0.7]
    img = project(np.array([a, b]), CFG)
    assert img.intensity[img.valid][0] == pytest.approx(0.3)


def test_out_of_gate_points_dropped():
    pts = np.array([
        [0.1, 0.0, 0.0, 0.0],        # below depth_min
        [100.0, 0.0, 0.0, 0.0],      # beyond depth_max
        [10.0, 0.0, 8.0, 0.0],       # pitch above fov_up
        [5.0, 0.0, -10.0, 0.0],      # pitch below fov_down
        [0.0, 0.0, 0.0, 0.0],        # zero range
    ])
    img = project(pts, CFG)
    assert img.valid.sum() == 0


def test_non_finite_points_rejected():
    with pytest.raises(ValueError):
        project(np.array([[np.nan, 0.0, 0.0, 0.0]]), CFG)
    with pytest.raises(ValueError):
        project(np.array([[np.inf, 1.0, 0.0, 0.0]]), CFG)


def test_config_validation():
    with pytest.raises(ValueError):
        SensorConfig(fov_up_deg=-5.0, fov_down_deg=5.0)
    with pytest.raises(ValueError):
        SensorConfig(depth_min=10.0, depth_max=1.0)
    with pytest.raises(ValueError):
        SensorConfig(height=0)


def test_pixel_center_round_trip():
    rng = np.random.default_rng(0)
    pts, rows, cols = centers_cloud(CFG, rng, 600)
    img = project(pts, CFG)
    # bijective: every chosen pixel valid, no strays
    got = np.zeros(img.valid.shape, dtype=bool)
    got[rows, cols] = True
    assert np.array_equal(img.valid, got)

    back = unproject(img, CFG)
    order_in = np.lexsort((cols, rows))
    assert np.allclose(back[:, :3], pts[order_in, :3], atol=1e-4)
    assert np.allclose(back[:, 3], pts[order_in, 3], atol=1e-6)


def test_quantization_bound_arbitrary_points():
    rng = np.random.default_rng(1)
    n = 3000
    r = rng.uniform(CFG.depth_min + 0.05, CFG.depth_max - 0.05, n)
    pitch = rng.uniform(np.deg2rad(CFG.fov_down_deg) + 1e-4,
                        np.deg2rad(CFG.fov_up_deg) - 1e-4, n)
    yaw = rng.uniform(-np.pi + 1e-6, np.pi, n)
    pts = np.stack([r * np.cos(pitch) * np.cos(yaw),
                    r * np.cos(pitch) * np.sin(yaw),
                    r * np.sin(pitch),
                    rng.uniform(0, 1, n)], axis=1)
    img = project(pts, CFG)
    back = unproject(img, CFG)

    # brute-force winner per pixel, independent of project's internals
    fu, fd = CFG.fov_up, CFG.fov_down
    u = np.floor(0.5 * (1.0 - yaw / np.pi) * CFG.width).astype(int).clip(0, CFG.width - 1)
    v = np.floor((1.0 - (pitch - fd) / (fu - fd)) * CFG.height).astype(int).clip(0, CFG.height - 1)
    winner = {}
    for i in range(n):
        key = (v[i], u[i])
        if key not in winner or r[i] < r[winner[key]]:
            winner[key] = i
    dpsi = 2.0 * np.pi / CFG.width
    dphi = (fu - fd) / CFG.height
    rows_b, cols_b = np.nonzero(img.valid)
    for k in range(len(back)):
        i = winner[(rows_b[k], cols_b[k])]
        err = np.linalg.norm(back[k, :3] - pts[i, :3])
        assert err <= r[i] * max(dpsi, dphi) * np.sqrt(2.0) + 1e-6


def test_unproject_single_center_pixel():
    cfg = SensorConfig(height=5, width=9, fov_up_deg=10.0, fov_down_deg=-10.0,
                       depth_min=0.5, depth_max=63.0)
    depth = np.zeros((5, 9), dtype=np.float32)
    inten = np.zeros((5, 9), dtype=np.float32)
    valid = np.zeros((5, 9), dtype=bool)
    depth[2, 4] = 7.0  # pixel center at psi = 0, phi = 0
    valid[2, 4] = True
    pts = unproject(RangeImage(depth, inten, valid), cfg)
    assert pts.shape == (1, 4)
    assert np.allclose(pts[0, :3], [7.0, 0.0, 0.0], atol=1e-5)


def test_pixel_angles_monotone():
    psi, phi = pixel_angles(CFG)
    assert (np.diff(psi) < 0).all() and (np.diff(phi) < 0).all()
    assert psi[0] <= np.pi and psi[-1] >= -np.pi
    assert phi[0] <= CFG.fov_up and phi[-1] >= CFG.fov_down


def test_normalize_oracle_values():
    cfg = SensorConfig(height=2, width=2, depth_min=0.5, depth_max=80.0)
    depth = np.array([[3.0, 80.0], [90.0, 1.0]], dtype=np.float32)
    inten = np.array([[0.25, 1.0], [0.5, 0.0]], dtype=np.float32)
    valid = np.array([[True, True], [True, False]])
    norm = normalize(RangeImage(depth, inten, valid), cfg)

    expect_d3 = 2.0 * np.log2(4.0) / np.log2(81.0) - 1.0
    assert norm.data[0, 0, 0] == pytest.approx(expect_d3, abs=1e-6)
    assert norm.data[0, 0, 1] == pytest.approx(-0.5)
    assert norm.data[0, 1, 0] == pytest.approx(1.0)   # depth_max maps to +1
    assert norm.data[1, 0, 0] == pytest.approx(1.0)   # clamped to depth_max
    assert norm.clamped_count == 1
    assert norm.data[1, 1, 0] == -1.0 and norm.data[1, 1, 1] == -1.0  # invalid
    assert np.abs(norm.data).max() <= 1.0


def test_normalize_denormalize_round_trip():
    rng = np.random.default_rng(2)
    depth = rng.uniform(CFG.depth_min, CFG.depth_max, size=(8, 16)).astype(np.float32)
    inten = rng.uniform(0, 1, size=(8, 16)).astype(np.float32)
    valid = rng.uniform(size=(8, 16)) > 0.3
    img = RangeImage(depth, inten, valid)
    back = denormalize(normalize(img, CFG), CFG)
    assert np.array_equal(back.valid, valid)
    assert np.allclose(back.depth[valid], depth[valid], rtol=1e-5, atol=1e-4)
    assert np.allclose(back.intensity[valid], inten[valid], atol=1e-6)
    assert (back.depth[~valid] == 0).all()


def test_denormalize_below_depth_min_invalid():
    cfg = SensorConfig(depth_min=2.0, depth_max=80.0)
    # encode a depth of 1.0 (< depth_min) and one of 10.0
    lo = 2.0 * np.log2(2.0) / np.log2(81.0) - 1.0
    hi = 2.0 * np.log2(11.0) / np.log2(81.0) - 1.0
    data = np.array([[[lo, 0.0], [hi, 0.0], [-1.0, -1.0]]], dtype=np.float32)
    img = denormalize(NormalizedImage(data), cfg)
    assert not img.valid[0, 0] and img.depth[0, 0] == 0
    assert img.valid[0, 1] and img.depth[0, 1] == pytest.approx(10.0, abs=1e-4)
    assert not img.valid[0, 2]


def test_point_cloud_io_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(100, 4)).astype(np.float32)
    path = tmp_path / "cloud.bin"
    write_point_cloud(path, pts)
    assert path.stat().st_size == 100 * 16
    assert np.array_equal(read_point_cloud(path), pts)

    with pytest.raises(ValueError):
        write_point_cloud(tmp_path / "bad.bin", pts[:, :3])
    (tmp_path / "trunc.bin").write_bytes(b"\x00" * 15)
    with pytest.raises(ValueError):
        read_point_cloud(tmp_path / "trunc.bin")


def test_range_image_io_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    pts, _, _ = centers_cloud(CFG, rng, 400)
    img = project(pts, CFG)
    path = tmp_path / "scan.rmg"
    write_range_image(path, img)
    raw = path.read_bytes()
    assert raw[:4] == b"RMG1"
    assert len(raw) == 16 + 2 * CFG.height * CFG.width * 4

    back = read_range_image(path)
    assert np.array_equal(back.valid, img.valid)
    assert np.array_equal(back.depth, np.where(img.valid, img.depth, 0.0))

    write_range_image(tmp_path / "again.rmg", img)
    assert (tmp_path / "again.rmg").read_bytes() == raw

    (tmp_path / "bad.rmg").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError):
        read_range_image(tmp_path / "bad.rmg")
