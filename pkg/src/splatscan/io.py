"""File formats: scans, trajectories, models, float images and config text.

Everything here is deliberately boring.  Scans arrive as raw float32
x,y,z,intensity records or as PLY; trajectories go out in the two common
text layouts; the model container is a small tagged binary (or an ASCII
point list for debugging); float images use the PFM convention so any
viewer that knows portable float maps can open them.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import fields, is_dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import IngestionError
from .evaluation import Trajectory
from .se3 import SE3Pose
from .splats import SplatModel

__all__ = [
    "load_scan",
    "read_ply",
    "write_ply",
    "save_trajectory",
    "load_trajectory",
    "save_model",
    "load_model",
    "read_pfm",
    "write_pfm",
    "parse_config_text",
    "apply_overrides",
    "write_report",
]


# --- point clouds -----------------------------------------------------------


def load_scan(path) -> np.ndarray:
    """Load one scan as an (N, 3) float array, dropping non-finite rows.

    ``.bin`` files are raw little-endian float32 x,y,z,intensity records
    (the intensity channel is discarded); anything else must be PLY.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"scan file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".bin":
        raw = np.fromfile(path, dtype="<f4")
        if raw.size == 0:
            raise IngestionError(f"empty scan file: {path}")
        if raw.size % 4 != 0:
            raise IngestionError(f"truncated scan file: {path} ({raw.size} floats)")
        pts = raw.reshape(-1, 4)[:, :3].astype(float)
    elif suffix == ".ply":
        pts, _ = read_ply(path)
    else:
        raise IngestionError(f"unknown scan format {suffix!r}: {path}")
    pts = pts[np.isfinite(pts).all(axis=1)]
    if pts.shape[0] == 0:
        raise IngestionError(f"no finite points in {path}")
    return pts


_PLY_DTYPES = {
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
    "uchar": "u1", "uint8": "u1",
    "char": "i1", "int8": "i1",
    "short": "i2", "ushort": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
}


def _parse_ply_header(fh):
    line = fh.readline()
    if line.strip() != b"ply":
        raise IngestionError("not a PLY file")
    fmt = None
    count = 0
    props = []
    in_vertex = False
    while True:
        line = fh.readline()
        if not line:
            raise IngestionError("unterminated PLY header")
        tok = line.decode("ascii", "replace").split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise IngestionError("list properties unsupported in vertex element")
            props.append((tok[2], _PLY_DTYPES.get(tok[1])))
            if props[-1][1] is None:
                raise IngestionError(f"unsupported PLY property type {tok[1]!r}")
        elif tok[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise IngestionError(f"unsupported PLY format {fmt!r}")
    return fmt, count, props


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Vertex positions (and normals, when present) from an ASCII or
    little-endian binary PLY."""
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, count, props = _parse_ply_header(fh)
        names = [p[0] for p in props]
        for need in ("x", "y", "z"):
            if need not in names:
                raise IngestionError(f"PLY misses vertex property {need!r}")
        dtype = np.dtype([(n, "<" + t) for n, t in props])
        if fmt == "ascii":
            rows = np.loadtxt(fh, dtype=float, max_rows=count, ndmin=2)
            if rows.shape[0] != count or rows.shape[1] != len(props):
                raise IngestionError(f"truncated ASCII PLY: {path}")
            data = {n: rows[:, i] for i, (n, _) in enumerate(props)}
        else:
            buf = fh.read(dtype.itemsize * count)
            if len(buf) != dtype.itemsize * count:
                raise IngestionError(f"truncated binary PLY: {path}")
            rec = np.frombuffer(buf, dtype=dtype)
            data = {n: rec[n].astype(float) for n in names}
    pts = np.stack([data["x"], data["y"], data["z"]], axis=1)
    normals = None
    if all(n in data for n in ("nx", "ny", "nz")):
        normals = np.stack([data["nx"], data["ny"], data["nz"]], axis=1)
    return pts, normals


def write_ply(path, points: np.ndarray, normals: np.ndarray | None = None,
              binary: bool = True) -> None:
    """Write points (optionally with normals) as double-precision PLY.

    Double properties keep export → load round trips exact.
    """
    points = np.asarray(points, dtype="<f8").reshape(-1, 3)
    cols = [points]
    prop_names = ["x", "y", "z"]
    if normals is not None:
        normals = np.asarray(normals, dtype="<f8").reshape(-1, 3)
        if normals.shape[0] != points.shape[0]:
            raise IngestionError("normals and points disagree in length")
        cols.append(normals)
        prop_names += ["nx", "ny", "nz"]
    data = np.concatenate(cols, axis=1)
    header = ["ply"]
    header.append(
        "format binary_little_endian 1.0" if binary else "format ascii 1.0"
    )
    header.append(f"element vertex {points.shape[0]}")
    header += [f"property double {n}" for n in prop_names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(data).tobytes())
        else:
            np.savetxt(fh, data, fmt="%.17g")


# --- trajectories -----------------------------------------------------------


def save_trajectory(traj: Trajectory, path, fmt: str = "tum") -> None:
    """Write a trajectory as TUM or KITTI text.

    TUM rows are "timestamp tx ty tz qx qy qz qw"; KITTI rows are the 12
    row-major values of the 3x4 pose matrix (timestamps implicit).  Both
    print with 17 significant digits so a reload reproduces the poses.
    """
    if len(traj) == 0:
        raise IngestionError("refusing to save an empty trajectory")
    lines = []
    if fmt == "tum":
        for t, pose in zip(traj.stamps, traj.poses):
            q = Rotation.from_matrix(pose.rotation).as_quat()  # x, y, z, w
            q = q / np.linalg.norm(q)
            vals = [t, *pose.translation, *q]
            lines.append(" ".join(f"{v:.17g}" for v in vals))
    elif fmt == "kitti":
        for pose in traj.poses:
            M = np.concatenate([pose.rotation, pose.translation[:, None]], axis=1)
            lines.append(" ".join(f"{v:.17g}" for v in M.ravel()))
    else:
        raise IngestionError(f"unknown trajectory format {fmt!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path, fmt: str | None = None) -> Trajectory:
    """Read a TUM or KITTI trajectory; the format is inferred from the
    column count when not given (8 = TUM, 12 = KITTI)."""
    rows = np.loadtxt(path, dtype=float, ndmin=2)
    if rows.size == 0:
        raise IngestionError(f"empty trajectory file: {path}")
    if fmt is None:
        fmt = {8: "tum", 12: "kitti"}.get(rows.shape[1])
        if fmt is None:
            raise IngestionError(
                f"cannot infer trajectory format from {rows.shape[1]} columns"
            )
    poses = []
    if fmt == "tum":
        if rows.shape[1] != 8:
            raise IngestionError("TUM rows need 8 columns")
        stamps = rows[:, 0]
        for r in rows:
            R = Rotation.from_quat(r[4:8]).as_matrix()
            poses.append(SE3Pose(R, r[1:4].copy()))
    elif fmt == "kitti":
        if rows.shape[1] != 12:
            raise IngestionError("KITTI rows need 12 columns")
        stamps = np.arange(rows.shape[0], dtype=float)
        for r in rows:
            M = r.reshape(3, 4)
            poses.append(SE3Pose(M[:, :3].copy(), M[:, 3].copy()).orthonormalized())
    else:
        raise IngestionError(f"unknown trajectory format {fmt!r}")
    return Trajectory(stamps, poses)


# --- model container --------------------------------------------------------

_MODEL_MAGIC = b"SPLM"
_MODEL_VERSION = 1
# per row: center(3) t_alpha(3) t_beta(3) scales(2) opacity(1)
_MODEL_COLS = 12


def _model_rows(model: SplatModel) -> np.ndarray:
    return np.concatenate(
        [
            model.centers,
            model.raw_t_alpha,
            model.raw_t_beta,
            model.scales,
            model.opacities[:, None],
        ],
        axis=1,
    ).astype("<f8")


def save_model(path, model: SplatModel, ascii_variant: bool = False) -> None:
    """Persist a splat model.

    Binary layout: magic ``SPLM``, u32 version, u64 count, then count
    rows of 12 little-endian float64 (center, two tangents, two scales,
    opacity).  The ASCII variant is one whitespace row per splat behind a
    one-line header, for quick inspection and diffing.
    """
    rows = _model_rows(model)
    if ascii_variant:
        with open(path, "w") as fh:
            fh.write(f"# splat-model v{_MODEL_VERSION} count={rows.shape[0]}\n")
            np.savetxt(fh, rows, fmt="%.17g")
        return
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<IQ", _MODEL_VERSION, rows.shape[0]))
        fh.write(np.ascontiguousarray(rows).tobytes())


def load_model(path) -> SplatModel:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == _MODEL_MAGIC:
            ver, count = struct.unpack("<IQ", fh.read(12))
            if ver != _MODEL_VERSION:
                raise IngestionError(f"unsupported model version {ver}")
            buf = fh.read(count * _MODEL_COLS * 8)
            if len(buf) != count * _MODEL_COLS * 8:
                raise IngestionError(f"truncated model file: {path}")
            rows = np.frombuffer(buf, dtype="<f8").reshape(count, _MODEL_COLS)
        else:
            text = head + fh.read()
            first = text.split(b"\n", 1)[0]
            if not first.startswith(b"# splat-model"):
                raise IngestionError(f"not a splat model file: {path}")
            rows = np.loadtxt(text.decode("ascii").splitlines(), dtype=float, ndmin=2)
            if rows.size == 0:
                rows = rows.reshape(0, _MODEL_COLS)
            if rows.shape[1] != _MODEL_COLS:
                raise IngestionError(f"model rows need {_MODEL_COLS} columns")
    model = SplatModel()
    if rows.shape[0]:
        model.append(
            rows[:, 0:3], rows[:, 3:6], rows[:, 6:9], rows[:, 9:11], rows[:, 11], 0
        )
    return model


# --- portable float maps ----------------------------------------------------


def write_pfm(path, image: np.ndarray) -> None:
    """Write a 1- or 3-channel float image as little-endian PFM.

    PFM stores rows bottom-up; a negative scale marks little-endian.
    """
    image = np.asarray(image, dtype="<f4")
    if image.ndim == 2:
        header = b"Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        header = b"PF"
    else:
        raise IngestionError(f"PFM needs HxW or HxWx3, got {image.shape}")
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{image.shape[1]} {image.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise IngestionError(f"not a PFM file: {path}")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline())
        endian = "<" if scale < 0 else ">"
        channels = 3 if kind == b"PF" else 1
        buf = fh.read(w * h * channels * 4)
        if len(buf) != w * h * channels * 4:
            raise IngestionError(f"truncated PFM: {path}")
    img = np.frombuffer(buf, dtype=endian + "f4")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return img.reshape(shape)[::-1].astype(float)


# --- config text ------------------------------------------------------------

_BOOLS = {"true": True, "false": False, "yes": True, "no": False}


def _coerce(text: str):
    t = text.strip()
    low = t.lower()
    if low in _BOOLS:
        return _BOOLS[low]
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def parse_config_text(text: str) -> dict:
    """Parse ``dotted.key = value`` lines into a flat dict.

    Blank lines and ``#`` comments are skipped; values become bool, int
    or float when they look like one, otherwise stay strings.
    """
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.fullmatch(r"([A-Za-z_][\w.]*)\s*[=:]\s*(.+)", line)
        if m is None:
            raise IngestionError(f"config line {lineno} unparseable: {raw!r}")
        out[m.group(1)] = _coerce(m.group(2))
    return out


def apply_overrides(cfg, mapping: dict) -> list[str]:
    """Assign dotted keys onto a tree of dataclasses; returns keys applied.

    Unknown keys raise so typos in config files fail loudly instead of
    silently running defaults.
    """
    applied = []
    for key, value in mapping.items():
        obj = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            if not hasattr(obj, p):
                raise IngestionError(f"unknown config section {p!r} in {key!r}")
            obj = getattr(obj, p)
        leaf = parts[-1]
        if not (is_dataclass(obj) and leaf in {f.name for f in fields(obj)}):
            raise IngestionError(f"unknown config key {key!r}")
        current = getattr(obj, leaf)
        if isinstance(current, bool):
            value = bool(value)
        elif isinstance(current, int) and not isinstance(value, bool):
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        setattr(obj, leaf, value)
        applied.append(key)
    return applied


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
