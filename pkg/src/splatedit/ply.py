"""Binary little-endian PLY persistence in the de-facto 3DGS layout.

Required float32 vertex properties:
    x y z, f_dc_0 f_dc_1 f_dc_2, opacity (logit),
    scale_0 scale_1 scale_2 (log), rot_0..rot_3 (quaternion w,x,y,z).

Extra properties (f_rest_*, nx ny nz, ...) are skipped; higher-order SH
coefficients present in the input are dropped with a warning.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import PlyFormatError, SceneValidationError
from .scene import Scene

REQUIRED_PROPERTIES = (
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)

_PLY_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("u1", 1), "uint8": ("u1", 1),
    "char": ("i1", 1), "int8": ("i1", 1),
    "ushort": ("<u2", 2), "uint16": ("<u2", 2),
    "short": ("<i2", 2), "int16": ("<i2", 2),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
    "int": ("<i4", 4), "int32": ("<i4", 4),
}


def _parse_header(fh):
    magic = fh.readline().strip()
    if magic != b"ply":
        raise PlyFormatError("not a PLY file (missing 'ply' magic)")
    fmt = None
    elements = []  # list of (name, count, [(prop_name, type_str)])
    while True:
        line = fh.readline()
        if not line:
            raise PlyFormatError("unexpected EOF in PLY header")
        tokens = line.decode("ascii", "replace").strip().split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise PlyFormatError("property before element in header")
            if tokens[1] == "list":
                raise PlyFormatError("list properties are not supported")
            elements[-1][2].append((tokens[2], tokens[1]))
        elif tokens[0] == "end_header":
            break
    if fmt != "binary_little_endian":
        raise PlyFormatError(f"unsupported PLY format '{fmt}' "
                             "(binary_little_endian required)")
    return elements


def load_scene(path) -> Scene:
    """Read a 3DGS PLY into a Scene; tags default to background."""
    with open(path, "rb") as fh:
        elements = _parse_header(fh)
        data = fh.read()

    scene = None
    offset = 0
    for name, count, props in elements:
        dtype = np.dtype([(pname, _PLY_TYPES[ptype][0]) for pname, ptype in props])
        nbytes = dtype.itemsize * count
        if len(data) - offset < nbytes:
            raise PlyFormatError(f"PLY payload truncated in element '{name}'")
        if name == "vertex":
            missing = [p for p in REQUIRED_PROPERTIES
                       if p not in dtype.names]
            if missing:
                raise PlyFormatError(f"missing vertex property '{missing[0]}'")
            rest = [p for p in dtype.names if p.startswith("f_rest_")]
            if rest:
                warnings.warn(
                    "input PLY carries higher-order SH coefficients "
                    f"({len(rest)} f_rest_* properties); truncating to degree 0",
                    stacklevel=2)
            verts = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
            cols = np.stack(
                [verts[p].astype(np.float64) for p in REQUIRED_PROPERTIES], axis=1)
            bad = np.flatnonzero(~np.isfinite(cols).all(axis=1))
            if bad.size:
                raise SceneValidationError(
                    f"non-finite field at vertex index {int(bad[0])}")
            # keep stored quaternions verbatim (normalization happens at
            # activation time) so save/load round-trips are byte-stable
            rot = cols[:, 10:14]
            zero = np.flatnonzero(np.linalg.norm(rot, axis=1) == 0.0) \
                if count else np.array([], dtype=int)
            if zero.size:
                raise SceneValidationError(
                    f"zero-norm rotation at vertex index {int(zero[0])}")
            scene = Scene(
                positions=cols[:, 0:3],
                rotations=rot,
                log_scales=cols[:, 7:10],
                opacity_logits=cols[:, 6],
                colors_dc=cols[:, 3:6],
            )
        offset += nbytes

    if scene is None:
        raise PlyFormatError("PLY has no 'vertex' element")
    return scene


def save_scene(scene: Scene, path) -> None:
    """Write a Scene as a binary little-endian 3DGS PLY."""
    n = len(scene)
    dtype = np.dtype([(p, "<f4") for p in REQUIRED_PROPERTIES])
    verts = np.empty(n, dtype=dtype)
    verts["x"], verts["y"], verts["z"] = scene.positions.T.astype(np.float32)
    for i in range(3):
        verts[f"f_dc_{i}"] = scene.colors_dc[:, i].astype(np.float32)
        verts[f"scale_{i}"] = scene.log_scales[:, i].astype(np.float32)
    verts["opacity"] = scene.opacity_logits.astype(np.float32)
    for i in range(4):
        verts[f"rot_{i}"] = scene.rotations[:, i].astype(np.float32)

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in REQUIRED_PROPERTIES]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(verts.tobytes())
