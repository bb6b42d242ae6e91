"""File format tests: round trips, bit-exactness, and malformed-input errors."""

import json

import jsonschema
import numpy as np
import pytest

from maskpose.geom import CameraModel, Pose, Rotation
from maskpose.io import (
    BadMagicError,
    DimensionError,
    FormatError,
    TruncatedError,
    load_camera,
    read_depth_png,
    read_map,
    read_mask_png,
    read_ply,
    read_results_csv,
    read_rgb_png,
    read_tensor,
    save_camera,
    validate_json,
    write_depth_png,
    write_json,
    write_map,
    write_mask_png,
    write_ply,
    write_results_csv,
    write_rgb_png,
    write_tensor,
)
from maskpose.sampler import ObjectModel
from maskpose.warp import RgbXyzMap


def small_map(rng):
    depth = rng.uniform(0.5, 1.5, size=(12, 16))
    depth[0, :3] = 0.0
    rgb = rng.random((12, 16, 3)).astype(np.float32)
    cam = CameraModel(fx=40.0, fy=40.0, cx=7.5, cy=5.5, width=16, height=12)
    return RgbXyzMap.from_depth(rgb, depth, cam)


def tetra_model():
    pts = np.array(
        [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1]]
    )
    colors = np.array([[0, 0, 0], [51, 102, 153], [255, 255, 255], [204, 0, 102]])
    return ObjectModel(pts, colors / 255.0, identifier="tetra")


class TestTensorFormat:
    @pytest.mark.parametrize("dtype", [np.float32, np.uint8, np.uint16])
    def test_round_trip_preserves_values_and_dtype(self, tmp_path, dtype):
        rng = np.random.default_rng(40)
        arr = (rng.random((3, 5, 2)) * 200).astype(dtype)
        path = tmp_path / "t.dten"
        write_tensor(path, arr)
        back = read_tensor(path)
        assert back.dtype == np.dtype(dtype)
        assert np.array_equal(back, arr)

    def test_rewrite_is_byte_identical(self, tmp_path):
        rng = np.random.default_rng(41)
        arr = rng.random((7, 4)).astype(np.float32)
        p1, p2 = tmp_path / "a.dten", tmp_path / "b.dten"
        write_tensor(p1, arr)
        write_tensor(p2, read_tensor(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_layout(self, tmp_path):
        path = tmp_path / "t.dten"
        write_tensor(path, np.zeros((2, 3), dtype=np.uint16))
        data = path.read_bytes()
        assert data[:4] == b"DTEN"
        assert data[4] == 1
        assert data[5] == 2
        assert data[6] == 2
        assert data[7] == 0
        assert int.from_bytes(data[8:12], "little") == 2
        assert int.from_bytes(data[12:16], "little") == 3
        assert len(data) == 16 + 2 * 3 * 2

    def test_rejects_unsupported_dtype(self, tmp_path):
        with pytest.raises(ValueError):
            write_tensor(tmp_path / "t.dten", np.zeros(3, dtype=np.float64))

    def test_missing_file_raises_file_not_found(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_tensor(tmp_path / "absent.dten")

    def test_bad_magic_reports_offset_zero(self, tmp_path):
        path = tmp_path / "t.dten"
        path.write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(BadMagicError) as err:
            read_tensor(path)
        assert err.value.offset == 0

    def test_bad_version_reports_offset_four(self, tmp_path):
        path = tmp_path / "t.dten"
        write_tensor(path, np.zeros(2, dtype=np.uint8))
        data = bytearray(path.read_bytes())
        data[4] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError) as err:
            read_tensor(path)
        assert err.value.offset == 4

    def test_bad_dtype_code_reports_offset_five(self, tmp_path):
        path = tmp_path / "t.dten"
        write_tensor(path, np.zeros(2, dtype=np.uint8))
        data = bytearray(path.read_bytes())
        data[5] = 7
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError) as err:
            read_tensor(path)
        assert err.value.offset == 5

    def test_nonzero_reserved_byte_rejected(self, tmp_path):
        path = tmp_path / "t.dten"
        write_tensor(path, np.zeros(2, dtype=np.uint8))
        data = bytearray(path.read_bytes())
        data[7] = 1
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError) as err:
            read_tensor(path)
        assert err.value.offset == 7

    def test_truncated_payload_names_byte_counts(self, tmp_path):
        path = tmp_path / "t.dten"
        write_tensor(path, np.arange(6, dtype=np.float32).reshape(2, 3))
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(TruncatedError) as err:
            read_tensor(path)
        assert "24" in str(err.value)
        assert "19" in str(err.value)

    def test_truncated_header_rejected(self, tmp_path):
        path = tmp_path / "t.dten"
        path.write_bytes(b"DTEN\x01")
        with pytest.raises(TruncatedError):
            read_tensor(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "t.dten"
        write_tensor(path, np.zeros(4, dtype=np.uint8))
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(TruncatedError):
            read_tensor(path)


class TestMapFormat:
    def test_round_trip_is_bitwise(self, tmp_path):
        m = small_map(np.random.default_rng(42))
        path = tmp_path / "m.dten"
        write_map(path, m)
        back = read_map(path)
        assert np.array_equal(back.rgb, m.rgb)
        assert np.array_equal(back.xyz, m.xyz)
        assert np.array_equal(back.valid, m.valid)

    def test_rewrite_is_byte_identical(self, tmp_path):
        m = small_map(np.random.default_rng(43))
        p1, p2 = tmp_path / "a.dten", tmp_path / "b.dten"
        write_map(p1, m)
        write_map(p2, read_map(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_wrong_channel_count_rejected(self, tmp_path):
        path = tmp_path / "m.dten"
        write_tensor(path, np.zeros((4, 4, 6), dtype=np.float32))
        with pytest.raises(DimensionError):
            read_map(path)


class TestPlyFormat:
    def test_round_trip(self, tmp_path):
        model = tetra_model()
        path = tmp_path / "m.ply"
        write_ply(path, model)
        back = read_ply(path)
        assert back.identifier == "tetra"
        assert np.array_equal(back.points, model.points)
        assert np.allclose(back.colors, model.colors, atol=1e-7)

    def test_random_points_round_trip_exactly(self, tmp_path):
        rng = np.random.default_rng(44)
        model = ObjectModel(rng.normal(scale=0.05, size=(50, 3)))
        path = tmp_path / "m.ply"
        write_ply(path, model)
        assert np.array_equal(read_ply(path).points, model.points)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ply"
        path.write_text("obj\n")
        with pytest.raises(BadMagicError):
            read_ply(path)

    def test_truncated_vertex_list(self, tmp_path):
        model = tetra_model()
        path = tmp_path / "m.ply"
        write_ply(path, model)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(TruncatedError):
            read_ply(path)

    def test_wrong_field_count(self, tmp_path):
        model = tetra_model()
        path = tmp_path / "m.ply"
        write_ply(path, model)
        text = path.read_text().splitlines()
        text[-1] = "0 0 0 1 2"
        path.write_text("\n".join(text) + "\n")
        with pytest.raises(DimensionError):
            read_ply(path)


class TestDepthAndImagePngs:
    def test_documented_scale_example(self, tmp_path):
        path = tmp_path / "d.png"
        depth = np.full((4, 4), 2.0)
        write_depth_png(path, depth, depth_scale=0.001)
        back = read_depth_png(path, depth_scale=0.001)
        assert np.all(back == 2.0)

    def test_quantization_bounded_by_half_scale(self, tmp_path):
        rng = np.random.default_rng(45)
        depth = rng.uniform(0.3, 2.5, size=(8, 8))
        path = tmp_path / "d.png"
        write_depth_png(path, depth, depth_scale=0.001)
        back = read_depth_png(path, depth_scale=0.001)
        assert np.max(np.abs(back - depth)) <= 0.0005 + 1e-12

    def test_zeros_stay_invalid(self, tmp_path):
        path = tmp_path / "d.png"
        depth = np.zeros((4, 4))
        depth[1, 1] = 1.0
        write_depth_png(path, depth, depth_scale=0.001)
        back = read_depth_png(path, depth_scale=0.001)
        assert back[0, 0] == 0.0
        assert back[1, 1] == 1.0

    def test_rejects_bad_scale(self, tmp_path):
        with pytest.raises(ValueError):
            write_depth_png(tmp_path / "d.png", np.zeros((2, 2)), 0.0)

    def test_rgb_round_trip(self, tmp_path):
        rng = np.random.default_rng(46)
        rgb = rng.integers(0, 256, size=(6, 7, 3), dtype=np.uint8)
        path = tmp_path / "c.png"
        write_rgb_png(path, rgb)
        assert np.array_equal(read_rgb_png(path), rgb)

    def test_mask_round_trip(self, tmp_path):
        rng = np.random.default_rng(47)
        mask = rng.random((9, 5)) > 0.5
        path = tmp_path / "m.png"
        write_mask_png(path, mask)
        assert np.array_equal(read_mask_png(path), mask)


class TestCameraJson:
    def test_round_trip(self, tmp_path):
        cam = CameraModel(
            fx=320.0, fy=320.0, cx=159.5, cy=119.5,
            width=320, height=240, depth_scale=0.001,
        )
        path = tmp_path / "camera.json"
        save_camera(path, cam)
        assert load_camera(path) == cam

    def test_schema_rejects_missing_field(self, tmp_path):
        path = tmp_path / "camera.json"
        path.write_text(json.dumps({"fx": 1.0}))
        with pytest.raises(jsonschema.ValidationError):
            load_camera(path)

    def test_write_json_validates_before_writing(self, tmp_path):
        path = tmp_path / "camera.json"
        with pytest.raises(jsonschema.ValidationError):
            write_json(path, {"fx": 1.0}, schema="camera")
        assert not path.exists()

    def test_validate_json_accepts_good_payload(self):
        validate_json(
            {
                "fx": 1.0, "fy": 1.0, "cx": 0.0, "cy": 0.0,
                "width": 2, "height": 2, "depth_scale": 1.0,
            },
            schema="camera",
        )


class TestResultsCsv:
    def rows(self, rng, count=5):
        out = []
        for i in range(count):
            pose = Pose(Rotation.random(rng), rng.normal(scale=0.4, size=3))
            out.append(
                {
                    "scene_id": 1,
                    "im_id": i,
                    "obj_id": i % 3,
                    "score": float(rng.random()),
                    "pose": pose,
                    "time": -1.0,
                }
            )
        return out

    def test_round_trip(self, tmp_path):
        rows = self.rows(np.random.default_rng(48))
        path = tmp_path / "results.csv"
        write_results_csv(path, rows)
        back = read_results_csv(path)
        assert len(back) == len(rows)
        for a, b in zip(rows, back):
            assert (a["scene_id"], a["im_id"], a["obj_id"]) == (
                b["scene_id"], b["im_id"], b["obj_id"],
            )
            assert np.isclose(a["score"], b["score"], atol=1e-15)
            assert b["time"] == -1.0
            assert a["pose"].rotation.angle_to(b["pose"].rotation) < 1e-12
            assert np.allclose(a["pose"].translation, b["pose"].translation, atol=1e-12)

    def test_translation_stored_in_millimeters(self, tmp_path):
        pose = Pose(Rotation.identity(), np.array([0.1, 0.0, 1.0]))
        path = tmp_path / "results.csv"
        write_results_csv(
            path,
            [{"scene_id": 0, "im_id": 0, "obj_id": 0, "score": 1.0, "pose": pose}],
        )
        line = path.read_text().splitlines()[1]
        t_field = line.split(",")[5]
        assert [float(v) for v in t_field.split()] == [100.0, 0.0, 1000.0]

    def test_rewrite_is_byte_identical(self, tmp_path):
        rows = self.rows(np.random.default_rng(49))
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_results_csv(p1, rows)
        write_results_csv(p2, rows)
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_mismatch_rejected(self, tmp_path):
        path = tmp_path / "results.csv"
        path.write_text("a,b,c\n")
        with pytest.raises(FormatError):
            read_results_csv(path)

    def test_short_rotation_rejected(self, tmp_path):
        path = tmp_path / "results.csv"
        path.write_text(
            "scene_id,im_id,obj_id,score,R,t,time\n"
            "0,0,0,1.0,1 0 0 0 1 0,0 0 1000,-1\n"
        )
        with pytest.raises(DimensionError):
            read_results_csv(path)
