import json
import warnings

import numpy as np
import pytest

from rwcnet import tensor as T
from rwcnet.data import (
    build_manifest,
    generate_synthetic_pair,
    load_keypoints,
    load_manifest,
    load_pair,
    load_volume,
    save_keypoints,
    save_pair,
    save_volume,
)
from rwcnet.objectives import KeypointSet, smoothness_loss, tre
from rwcnet.params import ParseError
from rwcnet.spatial import Volume3D, warp


@pytest.fixture(scope="module")
def pair6():
    return generate_synthetic_pair((32, 32, 32), max_disp_voxels=6, seed=3)


def test_pair_invariants(pair6):
    p = pair6
    warped = warp(p.moving, p.gt_field).data
    assert np.mean((warped - p.fixed.data) ** 2) < 1e-3
    assert tre(p.gt_field, p.keypoints).item() < 0.1
    assert np.abs(p.gt_field).max() <= 6 + 1e-5
    assert p.labels_fixed.kind == "label" and p.fixed.kind == "image"
    assert set(np.unique(p.labels_moving.data)) == {0, 1, 2, 3, 4}


def test_zero_field_baseline_range(pair6):
    zero = tre(np.zeros_like(pair6.gt_field), pair6.keypoints).item()
    assert 1 <= zero <= 6 * 1.5
    assert zero > 5 * tre(pair6.gt_field, pair6.keypoints).item()


def test_zero_displacement_pair():
    p = generate_synthetic_pair((16, 16, 16), max_disp_voxels=0, seed=1)
    assert p.fixed.data.tobytes() == p.moving.data.tobytes()
    np.testing.assert_array_equal(p.keypoints.fixed, p.keypoints.moving)
    assert tre(np.zeros((3, 16, 16, 16), np.float32), p.keypoints).item() == 0.0


def test_generation_is_deterministic():
    a = generate_synthetic_pair((16, 16, 16), seed=9)
    b = generate_synthetic_pair((16, 16, 16), seed=9)
    for x, y in [(a.fixed.data, b.fixed.data), (a.gt_field, b.gt_field), (a.keypoints.fixed, b.keypoints.fixed)]:
        assert x.tobytes() == y.tobytes()
    c = generate_synthetic_pair((16, 16, 16), seed=10)
    assert a.gt_field.tobytes() != c.gt_field.tobytes()


@pytest.mark.parametrize("extents", [(24, 32, 32), (8, 8, 8), (32, 32)])
def test_generation_rejects_bad_extents(extents):
    with pytest.raises(ValueError):
        generate_synthetic_pair(extents)


def test_smoother_fields_have_lower_regulariser():
    values = []
    for sigma in (1.0, 2.0, 3.0, 4.0, 6.0):
        p = generate_synthetic_pair((16, 16, 16), max_disp_voxels=3, smoothness_sigma=sigma, seed=5)
        with T.precision(np.float64):
            values.append(smoothness_loss(p.gt_field.astype(np.float64)).item())
    assert all(a > b for a, b in zip(values, values[1:]))


# -- volume files ----------------------------------------------------------


def test_volume_round_trip(tmp_path):
    vol = Volume3D(np.random.default_rng(0).normal(size=(2, 3, 4, 5)).astype(np.float32), (1.5, 2.0, 0.7), "image")
    save_volume(vol, tmp_path / "v.rwv")
    back = load_volume(tmp_path / "v.rwv")
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.spacing_mm == vol.spacing_mm and back.kind == "image"


def test_label_round_trip_uses_u16(tmp_path):
    lab = Volume3D(np.random.default_rng(0).integers(0, 300, (1, 4, 4, 4)).astype(np.float32), (1, 1, 1), "label")
    save_volume(lab, tmp_path / "l.rwv")
    header_len = int.from_bytes((tmp_path / "l.rwv").read_bytes()[8:12], "little")
    header = json.loads((tmp_path / "l.rwv").read_bytes()[12 : 12 + header_len])
    assert header["dtype"] == "u16le"
    np.testing.assert_array_equal(load_volume(tmp_path / "l.rwv").data, lab.data)


def test_volume_payload_mismatch(tmp_path):
    save_volume(Volume3D(np.zeros((1, 2, 2, 2), np.float32), (1, 1, 1)), tmp_path / "v.rwv")
    raw = (tmp_path / "v.rwv").read_bytes()
    (tmp_path / "short.rwv").write_bytes(raw[:-4])
    with pytest.raises(ParseError, match="payload"):
        load_volume(tmp_path / "short.rwv")
    (tmp_path / "magic.rwv").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ParseError, match="magic"):
        load_volume(tmp_path / "magic.rwv")


# -- keypoints -------------------------------------------------------------


def test_keypoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    kps = KeypointSet(rng.uniform(0, 30, (7, 3)), rng.uniform(0, 30, (7, 3)), (1.5, 1.5, 1.5))
    save_keypoints(kps, tmp_path / "k.csv")
    assert (tmp_path / "k.csv").read_text().splitlines()[0] == "fz,fy,fx,mz,my,mx"
    back = load_keypoints(tmp_path / "k.csv", (1.5, 1.5, 1.5))
    assert np.abs(back.fixed - kps.fixed).max() < 1e-6
    assert np.abs(back.moving - kps.moving).max() < 1e-6


def test_keypoints_empty_body(tmp_path):
    (tmp_path / "k.csv").write_text("fz,fy,fx,mz,my,mx\n")
    kps = load_keypoints(tmp_path / "k.csv")
    assert len(kps) == 0
    with pytest.raises(ValueError):
        tre(np.zeros((3, 4, 4, 4)), kps)


def test_keypoints_wrong_columns_names_line(tmp_path):
    (tmp_path / "k.csv").write_text("fz,fy,fx,mz,my,mx\n1,2,3,4,5,6\n1,2,3,4\n")
    with pytest.raises(ParseError, match="line 3"):
        load_keypoints(tmp_path / "k.csv")


def test_keypoints_need_header(tmp_path):
    (tmp_path / "k.csv").write_text("1,2,3,4,5,6\n")
    with pytest.raises(ParseError, match="header"):
        load_keypoints(tmp_path / "k.csv")


# -- manifests -------------------------------------------------------------


@pytest.fixture(scope="module")
def pair_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pairs")
    for i in range(10):
        save_pair(generate_synthetic_pair((16, 16, 16), max_disp_voxels=2, seed=i), root / f"pair_{i:03d}")
    return root


def test_manifest_split(pair_dir):
    m = build_manifest(pair_dir, 0.9, seed=0)
    assert len(m.split("train")) == 9 and len(m.split("val")) == 1
    again = build_manifest(pair_dir, 0.9, seed=0)
    assert again.records == m.records


def test_manifest_full_ratio_warns(pair_dir):
    with pytest.warns(UserWarning, match="empty"):
        m = build_manifest(pair_dir, 1.0)
    assert m.split("val") == []


def test_manifest_round_trip_and_pair_loading(pair_dir, tmp_path):
    m = build_manifest(pair_dir, 0.9, seed=1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        path = m.save(tmp_path / "manifest.json")
    loaded = load_manifest(path)
    assert loaded.records == m.records
    rec = m.records[0]
    pair = load_pair(m, rec)
    ref = generate_synthetic_pair((16, 16, 16), max_disp_voxels=2, seed=int(pair.name.split("_")[1]))
    assert pair.fixed.data.tobytes() == ref.fixed.data.tobytes()
    assert pair.gt_field.tobytes() == ref.gt_field.tobytes()
    assert set(rec) >= {"fixed", "moving", "labels_fixed", "labels_moving", "keypoints", "split"}
