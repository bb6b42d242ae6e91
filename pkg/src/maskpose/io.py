"""File formats: binary tensors, point-cloud models, depth images, results.

DTEN is a tiny self-describing container used to exchange feature maps and
RGB-XYZ tensors across tools: the magic bytes "DTEN", a version byte (1), a
dtype byte (0 = float32, 1 = uint8, 2 = uint16), an ndim byte, one reserved
zero byte, then ndim little-endian uint32 dimensions followed by the
row-major little-endian payload.  Loaders reject malformed input with the
byte offset of the failure and, for truncation, the expected versus actual
byte counts.

Object models travel as ASCII PLY (float x y z plus uchar red green blue
per vertex), depth images as 16-bit grayscale PNG whose meters-per-count
factor lives in the camera JSON, and per-object pose results as a CSV with
the rotation row-major and the translation in millimeters.  Every JSON
document this package emits validates against a schema shipped under
maskpose/schemas.
"""

import csv
import json
import struct
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image

from maskpose.geom import CameraModel, Pose, Rotation
from maskpose.sampler import ObjectModel
from maskpose.warp import RgbXyzMap

_MAGIC = b"DTEN"
_VERSION = 1
_DTYPE_CODES = {"float32": 0, "uint8": 1, "uint16": 2}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<u2")}


class FormatError(ValueError):
    """Malformed file content; offset is the byte position of the failure."""

    def __init__(self, message: str, offset: int | None = None) -> None:
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagicError(FormatError):
    """The file does not start with the expected magic bytes."""


class TruncatedError(FormatError):
    """The file ends before the declared content does."""


class DimensionError(FormatError):
    """Declared dimensions are inconsistent with the content."""


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    """Serialize an array to the DTEN container.

    The dtype must be float32, uint8, or uint16; callers convert explicitly
    so no precision is lost silently.
    """
    array = np.ascontiguousarray(array)
    if array.dtype.name not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {array.dtype.name}")
    if array.ndim > 255:
        raise ValueError("too many dimensions")
    if any(d >= 2**32 for d in array.shape):
        raise ValueError("dimension exceeds uint32 range")
    code = _DTYPE_CODES[array.dtype.name]
    header = _MAGIC + bytes([_VERSION, code, array.ndim, 0])
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = array.astype(_CODE_DTYPES[code], copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path: str | Path) -> np.ndarray:
    """Load an array from the DTEN container, checking every header field."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise TruncatedError(
            f"header needs 8 bytes, found {len(data)}", offset=len(data)
        )
    if data[:4] != _MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}", offset=0)
    if data[4] != _VERSION:
        raise FormatError(f"unsupported version {data[4]}", offset=4)
    if data[5] not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {data[5]}", offset=5)
    ndim = data[6]
    if data[7] != 0:
        raise FormatError(f"reserved byte must be 0, found {data[7]}", offset=7)
    dims_end = 8 + 4 * ndim
    if len(data) < dims_end:
        raise TruncatedError(
            f"dimension table needs {dims_end} bytes, found {len(data)}",
            offset=len(data),
        )
    dims = struct.unpack(f"<{ndim}I", data[8:dims_end])
    dtype = _CODE_DTYPES[data[5]]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(data) - dims_end
    if actual != expected:
        raise TruncatedError(
            f"payload expected {expected} bytes, found {actual}", offset=dims_end
        )
    return np.frombuffer(data, dtype=dtype, offset=dims_end).reshape(dims).copy()


def write_map(path: str | Path, m: RgbXyzMap) -> None:
    """Store an RGB-XYZ map as one float32 DTEN of shape (H, W, 7).

    Channels are rgb (3), xyz (3), and validity (0.0 or 1.0).
    """
    packed = np.concatenate(
        [m.rgb, m.xyz, m.valid[..., None].astype(np.float32)], axis=2
    )
    write_tensor(path, packed.astype(np.float32))


def read_map(path: str | Path) -> RgbXyzMap:
    """Load an RGB-XYZ map stored by write_map."""
    packed = read_tensor(path)
    if packed.ndim != 3 or packed.shape[2] != 7 or packed.dtype != np.float32:
        raise DimensionError("map tensor must be float32 with 7 channels")
    return RgbXyzMap(packed[..., :3], packed[..., 3:6], packed[..., 6] != 0.0)


def write_ply(path: str | Path, model: ObjectModel) -> None:
    """Write a colored point cloud as ASCII PLY."""
    colors = np.clip(np.round(model.colors * 255.0), 0, 255).astype(np.uint8)
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment identifier {model.identifier}",
        f"element vertex {len(model.points)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c in zip(model.points, colors):
        xyz = " ".join(str(float(v)) for v in p)
        lines.append(f"{xyz} {c[0]} {c[1]} {c[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path: str | Path) -> ObjectModel:
    """Load a colored point cloud written by write_ply."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise BadMagicError("not a PLY file", offset=0)
    identifier = "object"
    count = None
    header_end = None
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if parts[:2] == ["comment", "identifier"] and len(parts) == 3:
            identifier = parts[2]
        elif parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts == ["end_header"]:
            header_end = i
            break
    if header_end is None or count is None:
        raise FormatError("missing end_header or vertex count")
    body = lines[header_end + 1 : header_end + 1 + count]
    if len(body) != count:
        raise TruncatedError(
            f"expected {count} vertex lines, found {len(body)}"
        )
    points = np.zeros((count, 3))
    colors = np.zeros((count, 3), dtype=np.float32)
    for i, line in enumerate(body):
        fields = line.split()
        if len(fields) != 6:
            raise DimensionError(f"vertex line {i} has {len(fields)} fields")
        points[i] = [float(v) for v in fields[:3]]
        colors[i] = [int(v) / 255.0 for v in fields[3:]]
    return ObjectModel(points, colors, identifier=identifier)


def write_depth_png(path: str | Path, depth_m: np.ndarray, depth_scale: float) -> None:
    """Store a metric depth map as 16-bit grayscale PNG.

    Values are rounded to integer multiples of depth_scale; zeros stay zero
    and mean invalid.
    """
    if depth_scale <= 0:
        raise ValueError("depth_scale must be positive")
    counts = np.round(np.asarray(depth_m, dtype=np.float64) / depth_scale)
    counts = np.clip(counts, 0, 65535).astype(np.uint16)
    Image.fromarray(counts).save(path)


def read_depth_png(path: str | Path, depth_scale: float) -> np.ndarray:
    """Load a 16-bit depth PNG back to meters."""
    if depth_scale <= 0:
        raise ValueError("depth_scale must be positive")
    counts = np.array(Image.open(path), dtype=np.float64)
    return counts * depth_scale


def write_rgb_png(path: str | Path, rgb: np.ndarray) -> None:
    """Store an 8-bit color image."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        raise ValueError("rgb must be uint8")
    Image.fromarray(rgb, mode="RGB").save(path)


def read_rgb_png(path: str | Path) -> np.ndarray:
    """Load an 8-bit color image."""
    return np.array(Image.open(path).convert("RGB"))


def write_mask_png(path: str | Path, mask: np.ndarray) -> None:
    """Store a boolean mask as an 8-bit PNG of 0/255 values."""
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def read_mask_png(path: str | Path) -> np.ndarray:
    """Load a mask PNG back to booleans (any nonzero pixel is True)."""
    return np.array(Image.open(path).convert("L")) != 0


def save_camera(path: str | Path, cam: CameraModel) -> None:
    """Write camera intrinsics plus depth scale as JSON."""
    payload = {
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "depth_scale": cam.depth_scale,
    }
    write_json(path, payload, schema="camera")


def load_camera(path: str | Path) -> CameraModel:
    """Read a camera JSON written by save_camera."""
    payload = load_json(path, schema="camera")
    return CameraModel(**payload)


_RESULT_HEADER = ["scene_id", "im_id", "obj_id", "score", "R", "t", "time"]


def write_results_csv(path: str | Path, rows: list[dict]) -> None:
    """Write per-object pose results.

    Each row needs scene_id, im_id, obj_id (ints), score (float), pose
    (Pose, meters), and optionally time (seconds, -1.0 when timing is
    reported elsewhere).  R is the row-major rotation matrix and t is in
    millimeters, both space-separated with full float precision so files
    are byte-stable across runs.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_RESULT_HEADER)
        for row in rows:
            pose: Pose = row["pose"]
            r_flat = " ".join(f"{v:.17g}" for v in pose.rotation.as_matrix().ravel())
            t_mm = " ".join(f"{v:.17g}" for v in pose.translation * 1000.0)
            writer.writerow(
                [
                    int(row["scene_id"]),
                    int(row["im_id"]),
                    int(row["obj_id"]),
                    f"{float(row['score']):.17g}",
                    r_flat,
                    t_mm,
                    f"{float(row.get('time', -1.0)):.17g}",
                ]
            )


def read_results_csv(path: str | Path) -> list[dict]:
    """Read a results CSV back into dicts with Pose objects in meters."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _RESULT_HEADER:
            raise FormatError(f"unexpected CSV header {header}")
        for line_no, fields in enumerate(reader, start=2):
            if len(fields) != 7:
                raise DimensionError(
                    f"row {line_no} has {len(fields)} columns, expected 7"
                )
            r = [float(v) for v in fields[4].split()]
            if len(r) != 9:
                raise DimensionError(f"row {line_no} rotation needs 9 values")
            t = [float(v) for v in fields[5].split()]
            if len(t) != 3:
                raise DimensionError(f"row {line_no} translation needs 3 values")
            pose = Pose(
                Rotation.from_matrix(np.array(r).reshape(3, 3)),
                np.array(t) / 1000.0,
            )
            out.append(
                {
                    "scene_id": int(fields[0]),
                    "im_id": int(fields[1]),
                    "obj_id": int(fields[2]),
                    "score": float(fields[3]),
                    "pose": pose,
                    "time": float(fields[6]),
                }
            )
    return out


def _load_schema(name: str) -> dict:
    ref = resources.files("maskpose") / "schemas" / f"{name}.schema.json"
    return json.loads(ref.read_text())


def validate_json(payload: dict, schema: str) -> None:
    """Check a payload against one of the shipped schemas by name."""
    jsonschema.validate(payload, _load_schema(schema))


def write_json(path: str | Path, payload: dict, schema: str | None = None) -> None:
    """Write JSON with sorted keys, validating against a schema when named."""
    if schema is not None:
        validate_json(payload, schema)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_json(path: str | Path, schema: str | None = None) -> dict:
    """Read JSON, validating against a schema when named."""
    payload = json.loads(Path(path).read_text())
    if schema is not None:
        validate_json(payload, schema)
    return payload
