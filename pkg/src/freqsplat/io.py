"""PLY and PNG I/O.

Gaussian clouds use the de-facto splat layout: little-endian binary PLY with
float properties x, y, z, opacity (pre-sigmoid), scale_0..2 (log),
rot_0..3, f_dc_0..2. Colors are stored as DC spherical-harmonic
coefficients, color = 0.5 + C0 * f_dc, so external splat viewers shade them
correctly.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import InvalidParameterError
from .scene import GaussianCloud, ImageBuffer, logit

SH_C0 = 0.28209479177387814

_GAUSSIAN_PROPS = (
    "x", "y", "z",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "f_dc_0", "f_dc_1", "f_dc_2",
)

_PLY_SCALAR = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "ushort": "<u2", "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
}


def _parse_ply_header(f):
    magic = f.readline().strip()
    if magic != b"ply":
        raise InvalidParameterError("not a PLY file")
    fmt = None
    count = 0
    props = []
    while True:
        line = f.readline()
        if not line:
            raise InvalidParameterError("truncated PLY header")
        tokens = line.decode("ascii", "replace").strip().split()
        if not tokens:
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            if tokens[1] != "vertex" and count:
                raise InvalidParameterError("only single vertex-element PLY supported")
            if tokens[1] == "vertex":
                count = int(tokens[2])
        elif tokens[0] == "property":
            if tokens[1] == "list":
                raise InvalidParameterError("list properties not supported")
            props.append((tokens[2], _PLY_SCALAR[tokens[1]]))
        elif tokens[0] == "end_header":
            break
    return fmt, count, props


def _read_vertex_table(path):
    with open(path, "rb") as f:
        fmt, count, props = _parse_ply_header(f)
        dtype = np.dtype([(name, code) for name, code in props])
        if fmt == "binary_little_endian":
            raw = f.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise InvalidParameterError("truncated PLY payload")
            return np.frombuffer(raw, dtype=dtype, count=count)
        if fmt == "ascii":
            rows = []
            for _ in range(count):
                rows.append(tuple(float(v) for v in f.readline().split()))
            return np.array(rows, dtype=dtype)
        raise InvalidParameterError(f"unsupported PLY format {fmt!r}")


def save_gaussian_ply(path, cloud: GaussianCloud) -> None:
    rec = np.zeros(len(cloud), dtype=np.dtype([(p, "<f4") for p in _GAUSSIAN_PROPS]))
    rec["x"], rec["y"], rec["z"] = cloud.positions.T.astype(np.float32)
    rec["opacity"] = cloud.opacity_logits.astype(np.float32)
    for i in range(3):
        rec[f"scale_{i}"] = cloud.log_scales[:, i].astype(np.float32)
    for i in range(4):
        rec[f"rot_{i}"] = cloud.rotations[:, i].astype(np.float32)
    f_dc = (cloud.colors - 0.5) / SH_C0
    for i in range(3):
        rec[f"f_dc_{i}"] = f_dc[:, i].astype(np.float32)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += [f"property float {p}" for p in _GAUSSIAN_PROPS]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def load_gaussian_ply(path) -> GaussianCloud:
    table = _read_vertex_table(path)
    names = set(table.dtype.names)
    missing = [p for p in _GAUSSIAN_PROPS if p not in names]
    if missing:
        raise InvalidParameterError(f"PLY missing splat properties: {missing}")
    pos = np.stack([table["x"], table["y"], table["z"]], axis=1).astype(np.float64)
    log_scales = np.stack([table[f"scale_{i}"] for i in range(3)], axis=1).astype(np.float64)
    rots = np.stack([table[f"rot_{i}"] for i in range(4)], axis=1).astype(np.float64)
    f_dc = np.stack([table[f"f_dc_{i}"] for i in range(3)], axis=1).astype(np.float64)
    colors = np.clip(0.5 + SH_C0 * f_dc, 0.0, 1.0)
    return GaussianCloud(
        pos, log_scales, rots, logit(colors), table["opacity"].astype(np.float64)
    )


def load_point_ply(path):
    """Read positions (and colors when present) from a generic point PLY."""
    table = _read_vertex_table(path)
    names = set(table.dtype.names)
    if not {"x", "y", "z"} <= names:
        raise InvalidParameterError("point PLY lacks x/y/z properties")
    pos = np.stack([table["x"], table["y"], table["z"]], axis=1).astype(np.float64)
    colors = None
    if {"red", "green", "blue"} <= names:
        colors = np.stack([table["red"], table["green"], table["blue"]], axis=1)
        colors = colors.astype(np.float64)
        if colors.max(initial=0.0) > 1.0:
            colors = colors / 255.0
    elif {"f_dc_0", "f_dc_1", "f_dc_2"} <= names:
        f_dc = np.stack([table[f"f_dc_{i}"] for i in range(3)], axis=1).astype(np.float64)
        colors = np.clip(0.5 + SH_C0 * f_dc, 0.0, 1.0)
    return pos, colors


def save_point_ply(path, points) -> None:
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(points).tobytes())


def load_png(path) -> ImageBuffer:
    """8-bit PNG to float image in [0, 1]; keeps the alpha channel when present."""
    img = Image.open(path)
    if img.mode not in ("L", "RGB", "RGBA"):
        img = img.convert("RGBA" if "A" in img.mode else "RGB")
    return ImageBuffer(np.asarray(img, dtype=np.float64) / 255.0)


def save_png(path, image) -> None:
    data = image.data if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    arr = np.clip(np.round(data * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)
