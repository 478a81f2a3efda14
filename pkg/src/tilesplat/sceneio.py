"""Scene, camera, and image file formats.

Scenes persist as binary little-endian PLY with float32 properties in a
fixed order: position, DC color coefficients, higher-order coefficients
(channel-major), opacity logit, log scales, quaternion. Cameras travel
as JSON. Rendered images write as binary PPM (P6) by default, or PNG
when Pillow is installed.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .backward import TrainConfig
from .forward import RenderConfig
from .model import Camera, GaussianScene, ImageRGB

_REST_COUNTS = {0: 0, 9: 1, 24: 2, 45: 3}  # f_rest count -> SH degree


class PlyError(ValueError):
    """Malformed or truncated PLY input."""


def _property_names(rest: int) -> list[str]:
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2"]
    names += [f"rot_{i}" for i in range(4)]
    return names


def _record_dtype(names: list[str]) -> np.dtype:
    return np.dtype([(name, "<f4") for name in names])


def scene_to_ply_bytes(scene: GaussianScene) -> bytes:
    n = scene.n
    m = scene.sh_coeff_count - 1  # higher-order coefficients per channel
    names = _property_names(3 * m)
    rec = np.zeros(n, dtype=_record_dtype(names))
    rec["x"], rec["y"], rec["z"] = scene.means.T
    for ch in range(3):
        rec[f"f_dc_{ch}"] = scene.sh[:, 0, ch]
    for ch in range(3):
        for j in range(m):
            rec[f"f_rest_{ch * m + j}"] = scene.sh[:, j + 1, ch]
    rec["opacity"] = scene.opacity_logits
    for i in range(3):
        rec[f"scale_{i}"] = scene.log_scales[:, i]
    for i in range(4):
        rec[f"rot_{i}"] = scene.rotations[:, i]

    header_lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header_lines += [f"property float {name}" for name in names]
    header_lines.append("end_header")
    header = ("\n".join(header_lines) + "\n").encode("ascii")
    return header + rec.tobytes()


def save_ply(scene: GaussianScene, path: str | Path) -> None:
    Path(path).write_bytes(scene_to_ply_bytes(scene))


def scene_from_ply_bytes(data: bytes) -> GaussianScene:
    end_tag = b"end_header\n"
    end = data.find(end_tag)
    if end < 0:
        raise PlyError("missing end_header")
    header_len = end + len(end_tag)
    try:
        lines = data[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise PlyError(f"non-ascii header: {exc}") from None
    if not lines or lines[0].strip() != "ply":
        raise PlyError("not a PLY file (missing 'ply' magic)")

    fmt = None
    count = None
    props: list[str] = []
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1:]
        elif parts[0] == "element":
            if parts[1] != "vertex" or count is not None:
                raise PlyError(f"unsupported element {parts[1]!r}")
            count = int(parts[2])
        elif parts[0] == "property":
            if len(parts) != 3 or parts[1] != "float":
                raise PlyError(f"unsupported property {line.strip()!r}")
            props.append(parts[2])
        else:
            raise PlyError(f"unsupported header line {line.strip()!r}")
    if fmt != ["binary_little_endian", "1.0"]:
        raise PlyError(f"unsupported format {fmt}")
    if count is None:
        raise PlyError("missing vertex element")
    if count < 0:
        raise PlyError(f"negative vertex count {count}")

    rest = len(props) - 14
    if rest not in _REST_COUNTS:
        raise PlyError(f"unsupported property count {len(props)}")
    expected = _property_names(rest)
    if props != expected:
        raise PlyError("property names or order do not match the scene layout")

    dtype = _record_dtype(expected)
    need = count * dtype.itemsize
    payload = data[header_len:]
    if len(payload) < need:
        raise PlyError(
            f"truncated payload: expected {need} bytes after the header, "
            f"found {len(payload)} (file ends at byte {header_len + len(payload)})"
        )
    if len(payload) > need:
        raise PlyError(f"{len(payload) - need} trailing bytes after vertex data")
    rec = np.frombuffer(payload, dtype=dtype)

    m = rest // 3
    sh = np.empty((count, m + 1, 3), dtype=np.float64)
    for ch in range(3):
        sh[:, 0, ch] = rec[f"f_dc_{ch}"]
    for ch in range(3):
        for j in range(m):
            sh[:, j + 1, ch] = rec[f"f_rest_{ch * m + j}"]
    return GaussianScene(
        means=np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64),
        log_scales=np.stack([rec[f"scale_{i}"] for i in range(3)], axis=1).astype(
            np.float64
        ),
        rotations=np.stack([rec[f"rot_{i}"] for i in range(4)], axis=1).astype(
            np.float64
        ),
        opacity_logits=rec["opacity"].astype(np.float64),
        sh=sh,
    )


def load_ply(path: str | Path) -> GaussianScene:
    return scene_from_ply_bytes(Path(path).read_bytes())


def save_cameras(
    path: str | Path,
    cameras: list[Camera],
    image_paths: list[str | None] | None = None,
) -> None:
    entries = []
    for i, cam in enumerate(cameras):
        entry = {
            "id": i,
            "width": cam.width,
            "height": cam.height,
            "fx": cam.fx,
            "fy": cam.fy,
            "cx": cam.cx,
            "cy": cam.cy,
            "near": cam.near,
            "world_to_cam": [float(v) for v in cam.world_to_cam.reshape(-1)],
        }
        if image_paths is not None and image_paths[i] is not None:
            entry["image_path"] = image_paths[i]
        entries.append(entry)
    Path(path).write_text(json.dumps(entries, indent=2) + "\n")


def load_cameras(path: str | Path) -> list[tuple[Camera, str | None]]:
    """Camera list plus optional per-view target image path."""
    entries = json.loads(Path(path).read_text())
    if not isinstance(entries, list):
        raise ValueError("camera file must contain a JSON list")
    out = []
    for entry in entries:
        mat = np.asarray(entry["world_to_cam"], dtype=np.float64)
        if mat.size != 16:
            raise ValueError("world_to_cam must hold 16 values (row-major 4x4)")
        cam = Camera(
            world_to_cam=mat.reshape(4, 4),
            fx=float(entry["fx"]),
            fy=float(entry["fy"]),
            cx=float(entry["cx"]),
            cy=float(entry["cy"]),
            width=int(entry["width"]),
            height=int(entry["height"]),
            near=float(entry.get("near", 0.2)),
        )
        out.append((cam, entry.get("image_path")))
    return out


_RENDER_KEYS = {
    "tile_size",
    "z_tiles",
    "eps_t",
    "hybrid",
    "hybrid_fraction",
    "occlusion_threshold",
    "background",
    "dtype",
    "threads",
    "seed",
    "record_occlusion",
    "bank_trace_groups",
}

_TRAIN_KEYS = {
    "tile_size",
    "loss",
    "background",
    "eps_t",
    "recip_mode",
    "offload_batch",
    "dtype",
    "threads",
}

_DTYPES = {"float32": np.float32, "float64": np.float64}


def _coerce_common(d: dict) -> dict:
    d = dict(d)
    if "tile_size" in d:
        d["tile_size"] = tuple(int(v) for v in d["tile_size"])
    if "background" in d:
        d["background"] = tuple(float(v) for v in d["background"])
    if "dtype" in d:
        name = d["dtype"]
        if name not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {name!r}")
        d["dtype"] = _DTYPES[name]
    return d


def render_config_from_dict(d: dict) -> RenderConfig:
    unknown = set(d) - _RENDER_KEYS
    if unknown:
        raise ValueError(f"unknown render config keys: {sorted(unknown)}")
    return RenderConfig(**_coerce_common(d))


def train_config_from_dict(d: dict) -> TrainConfig:
    unknown = set(d) - _TRAIN_KEYS
    if unknown:
        raise ValueError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**_coerce_common(d))


def load_render_config(path: str | Path) -> RenderConfig:
    return render_config_from_dict(json.loads(Path(path).read_text()))


def load_train_config(path: str | Path) -> TrainConfig:
    return train_config_from_dict(json.loads(Path(path).read_text()))


def quantize_u8(data: np.ndarray) -> np.ndarray:
    """Linear [0, 1] floats to uint8 with round-half-up (0.5 -> 128)."""
    clipped = np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0)
    return np.floor(clipped * 255.0 + 0.5).astype(np.uint8)


def image_to_ppm_bytes(img: ImageRGB) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + quantize_u8(img.data).tobytes()


def save_ppm(img: ImageRGB, path: str | Path) -> None:
    Path(path).write_bytes(image_to_ppm_bytes(img))


def load_ppm(path: str | Path) -> ImageRGB:
    data = Path(path).read_bytes()
    # header: magic, width, height, maxval, then a single whitespace byte
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P6":
        raise ValueError(f"not a binary PPM: magic {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    need = w * h * 3
    raw = data[pos : pos + need]
    if len(raw) < need:
        raise ValueError(f"truncated PPM: expected {need} pixel bytes, got {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return ImageRGB(pixels.astype(np.float64) / 255.0)


def save_png(img: ImageRGB, path: str | Path) -> None:
    try:
        from PIL import Image
    except ImportError:
        raise RuntimeError(
            "PNG output needs Pillow; install the 'png' extra or use .ppm"
        ) from None
    Image.fromarray(quantize_u8(img.data), mode="RGB").save(Path(path))


def load_png(path: str | Path) -> ImageRGB:
    try:
        from PIL import Image
    except ImportError:
        raise RuntimeError(
            "PNG input needs Pillow; install the 'png' extra or use .ppm"
        ) from None
    with Image.open(Path(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return ImageRGB(arr.astype(np.float64) / 255.0)


def save_image(img: ImageRGB, path: str | Path) -> None:
    """Dispatch on suffix: .ppm or .png."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        save_ppm(img, path)
    elif suffix == ".png":
        save_png(img, path)
    else:
        raise ValueError(f"unsupported image suffix {suffix!r} (use .ppm or .png)")


def load_image(path: str | Path) -> ImageRGB:
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        return load_ppm(path)
    if suffix == ".png":
        return load_png(path)
    raise ValueError(f"unsupported image suffix {suffix!r} (use .ppm or .png)")


def psnr(a: ImageRGB, b: ImageRGB) -> float:
    """Peak signal-to-noise ratio in dB between two linear [0, 1] images."""
    if a.data.shape != b.data.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
