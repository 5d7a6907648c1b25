"""Binary little-endian PLY storage in the 3DGS ecosystem layout.

Per vertex: ``x y z nx ny nz f_dc_0..2 f_rest_* opacity scale_0..2 rot_0..3``
followed by the pixel-alignment indices ``source_view source_pixel``.
Opacity is stored as a logit, scale as a natural log, rotation w-first, and
``f_rest`` channel-major (all red coefficients, then green, then blue).
Readers locate properties by name, so third-party viewers skip the extras.
"""
from __future__ import annotations

import numpy as np

from . import sh
from .scene import CanonicalScene

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

REQUIRED = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
            "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]

# keeps logit(opacity) finite at 0 and 1
_OPACITY_EPS = 1e-7


class PlyError(ValueError):
    pass


def scene_property_names(sh_degree):
    n_rest = 3 * (sh.num_coeffs(sh_degree) - 1)
    return (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
            + [f"f_rest_{i}" for i in range(n_rest)]
            + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"])


def _logit(p):
    p = np.clip(p, _OPACITY_EPS, 1 - _OPACITY_EPS)
    return np.log(p) - np.log1p(-p)


def write_scene(scene, path):
    n = len(scene)
    K = scene.sh.shape[1]
    names = scene_property_names(scene.sh_degree)
    dtype = [(name, "<f4") for name in names] + [("source_view", "<i4"), ("source_pixel", "<i4")]
    data = np.zeros(n, dtype=dtype)
    for i, ax in enumerate("xyz"):
        data[ax] = scene.centers[:, i]
    for c in range(3):
        data[f"f_dc_{c}"] = scene.sh[:, 0, c]
        for k in range(1, K):
            data[f"f_rest_{c * (K - 1) + k - 1}"] = scene.sh[:, k, c]
    data["opacity"] = _logit(scene.opacities)
    for i in range(3):
        data[f"scale_{i}"] = np.log(scene.scales[:, i])
    for i in range(4):
        data[f"rot_{i}"] = scene.rotations[:, i]
    data["source_view"] = scene.source_view
    data["source_pixel"] = scene.source_pixel

    H, W = scene.view_shape
    header = ["ply", "format binary_little_endian 1.0",
              f"comment num_views {scene.num_views}",
              f"comment view_shape {H} {W}",
              f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header += ["property int source_view", "property int source_pixel", "end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def _parse_header(f):
    first = f.readline()
    if first.strip() != b"ply":
        raise PlyError("not a PLY file (missing 'ply' magic)")
    fmt = None
    count = None
    props = []
    comments = {}
    in_vertex = False
    while True:
        line = f.readline()
        if not line:
            raise PlyError("unexpected end of file inside header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens:
            continue
        key = tokens[0]
        if key == "end_header":
            break
        if key == "format":
            fmt = tokens[1] if len(tokens) > 1 else None
        elif key == "comment" and len(tokens) >= 2:
            comments[tokens[1]] = tokens[2:]
        elif key == "element":
            if len(tokens) != 3:
                raise PlyError(f"malformed element line: {line!r}")
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                count = int(tokens[2])
            elif count is None:
                raise PlyError(f"element '{tokens[1]}' before vertex is not supported")
        elif key == "property" and in_vertex:
            if len(tokens) != 3 or tokens[1] == "list":
                raise PlyError(f"unsupported vertex property line: {line!r}")
            if tokens[1] not in _PLY_TYPES:
                raise PlyError(f"unknown property type '{tokens[1]}'")
            props.append((tokens[2], "<" + _PLY_TYPES[tokens[1]]))
    if fmt != "binary_little_endian":
        raise PlyError(f"unsupported format '{fmt}', expected binary_little_endian")
    if count is None:
        raise PlyError("header declares no vertex element")
    return count, props, comments


def read_scene(path):
    with open(path, "rb") as f:
        count, props, comments = _parse_header(f)
        payload = f.read()
    names = [p for p, _ in props]
    for name in REQUIRED:
        if name not in names:
            raise PlyError(f"missing required property '{name}'")
    dtype = np.dtype(props)
    expected = count * dtype.itemsize
    if len(payload) < expected:
        raise PlyError(f"truncated payload: expected {expected} bytes, found {len(payload)}")
    data = np.frombuffer(payload[:expected], dtype=dtype, count=count)

    n_rest = sum(1 for p in names if p.startswith("f_rest_"))
    if n_rest % 3:
        raise PlyError(f"unknown SH degree: {n_rest} f_rest properties")
    try:
        degree = sh.degree_from_coeffs(n_rest // 3 + 1)
    except ValueError:
        raise PlyError(f"unknown SH degree: {n_rest} f_rest properties") from None
    for i in range(n_rest):
        if f"f_rest_{i}" not in names:
            raise PlyError(f"missing required property 'f_rest_{i}'")
    K = sh.num_coeffs(degree)

    f64 = lambda name: data[name].astype(np.float64)
    centers = np.stack([f64("x"), f64("y"), f64("z")], axis=1)
    coeffs = np.zeros((count, K, 3))
    for c in range(3):
        coeffs[:, 0, c] = f64(f"f_dc_{c}")
        for k in range(1, K):
            coeffs[:, k, c] = f64(f"f_rest_{c * (K - 1) + k - 1}")
    opacities = 1.0 / (1.0 + np.exp(-f64("opacity")))
    scales = np.exp(np.stack([f64(f"scale_{i}") for i in range(3)], axis=1))
    rotations = np.stack([f64(f"rot_{i}") for i in range(4)], axis=1)
    if "source_view" in names:
        source_view = data["source_view"].astype(np.int64)
        source_pixel = data["source_pixel"].astype(np.int64)
    else:
        source_view = np.ones(count, dtype=np.int64)
        source_pixel = np.arange(count, dtype=np.int64)
    num_views = int(comments.get("num_views", [int(source_view.max()) if count else 1])[0])
    shape = comments.get("view_shape", ["0", "0"])
    return CanonicalScene(centers, opacities, rotations, scales, coeffs, source_view,
                          source_pixel, num_views=num_views,
                          view_shape=(int(shape[0]), int(shape[1])))
