"""Point cloud loading, run configuration files and result export."""

from __future__ import annotations

import configparser
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import geometry as geo
from .fitter import FitConfig, FitResult

MIN_POINTS = 32


class CloudError(ValueError):
    """Base class for input clouds that cannot be used."""


class CloudParseError(CloudError):
    pass


class TooFewPointsError(CloudError):
    pass


class NonFiniteError(CloudError):
    pass


class ExportError(OSError):
    pass


@dataclass
class PointCloud:
    """Normalized points plus what is needed to map results back to the source frame."""

    points: np.ndarray
    centroid: np.ndarray
    scale: float
    source: str = ""

    def denormalize(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.scale + self.centroid

    @property
    def raw_points(self) -> np.ndarray:
        return self.denormalize(self.points)


def normalize(points, source: str = "") -> PointCloud:
    """Center on the centroid and scale the longest axis-aligned extent to 1."""
    # contiguous so every reader sums in the same order
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise CloudParseError(f"{source or 'cloud'}: expected N×3 coordinates, got shape {points.shape}")
    if len(points) < MIN_POINTS:
        raise TooFewPointsError(f"{source or 'cloud'}: {len(points)} points, need at least {MIN_POINTS}")
    if not np.all(np.isfinite(points)):
        raise NonFiniteError(f"{source or 'cloud'}: non-finite coordinate at row {int(np.argwhere(~np.isfinite(points))[0, 0])}")
    centroid = points.mean(axis=0)
    centered = points - centroid
    extent = float((centered.max(axis=0) - centered.min(axis=0)).max())
    if extent <= 0:
        raise CloudParseError(f"{source or 'cloud'}: all points coincide")
    normed = centered / extent
    # remove the rounding residue so the centroid sits at the origin
    normed -= normed.mean(axis=0)
    return PointCloud(normed, centroid, extent, source)


def _read_xyz(path: Path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) < 3:
            raise CloudParseError(f"{path}:{lineno}: expected at least 3 numbers")
        try:
            rows.append([float(v) for v in parts[:3]])
        except ValueError:
            raise CloudParseError(f"{path}:{lineno}: not a number in {line!r}") from None
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def _read_obj(path: Path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0] != "v":
            continue
        try:
            rows.append([float(v) for v in parts[1:4]])
        except ValueError:
            raise CloudParseError(f"{path}:{lineno}: bad vertex record") from None
        if len(rows[-1]) != 3:
            raise CloudParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply(path: Path) -> np.ndarray:
    data = path.read_bytes()
    end = re.search(rb"end_header\r?\n", data)
    if not data.startswith(b"ply") or end is None:
        raise CloudParseError(f"{path}: missing ply header")
    header = data[: end.start()].decode("ascii", errors="replace").splitlines()
    body = data[end.end():]
    fmt, elements = None, []
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise CloudParseError(f"{path}: property before element")
            elements[-1][2].append(parts[1:])
    if fmt not in ("ascii", "binary_little_endian"):
        raise CloudParseError(f"{path}: unsupported ply format {fmt!r}")
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise CloudParseError(f"{path}: no vertex element")

    if fmt == "ascii":
        lines = body.decode("ascii", errors="replace").splitlines()
        start = sum(e[1] for e in elements[: names.index("vertex")])
        _, count, props = elements[names.index("vertex")]
        cols = [p[-1] for p in props]
        try:
            idx = [cols.index(c) for c in "xyz"]
            table = np.array([lines[start + i].split() for i in range(count)], dtype=np.float64)
        except (ValueError, IndexError):
            raise CloudParseError(f"{path}: malformed ascii vertex data") from None
        return table[:, idx].reshape(-1, 3)

    offset = 0
    for name, count, props in elements:
        if any(p[0] == "list" for p in props):
            if name == "vertex" or names.index(name) < names.index("vertex"):
                raise CloudParseError(f"{path}: list properties before vertex data are not supported")
            break
        try:
            dtype = np.dtype([(p[1], "<" + PLY_TYPES[p[0]]) for p in props])
        except KeyError as err:
            raise CloudParseError(f"{path}: unknown ply type {err}") from None
        if name == "vertex":
            if dtype.itemsize * count > len(body) - offset:
                raise CloudParseError(f"{path}: truncated binary vertex data")
            table = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
            if not all(c in dtype.names for c in "xyz"):
                raise CloudParseError(f"{path}: vertex element lacks x/y/z")
            return np.stack([table[c].astype(np.float64) for c in "xyz"], axis=1)
        offset += dtype.itemsize * count
    raise CloudParseError(f"{path}: no vertex data")


READERS = {".xyz": _read_xyz, ".txt": _read_xyz, ".pts": _read_xyz, ".ply": _read_ply, ".obj": _read_obj}


def load_point_cloud(path) -> PointCloud:
    """Read an XYZ, PLY or OBJ file and normalize it (see :func:`normalize`)."""
    path = Path(path)
    if not path.is_file():
        raise CloudParseError(f"{path}: no such file")
    reader = READERS.get(path.suffix.lower())
    if reader is None:
        raise CloudParseError(f"{path}: unknown extension {path.suffix!r} (use .xyz, .ply or .obj)")
    try:
        points = reader(path)
    except UnicodeDecodeError:
        raise CloudParseError(f"{path}: not a text file") from None
    return normalize(points, str(path))


def write_xyz(path, points) -> None:
    np.savetxt(path, np.asarray(points), fmt="%.17g")


def write_labels(path, labels) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def read_labels(path) -> np.ndarray:
    try:
        return np.array([int(v) for v in Path(path).read_text().split()], dtype=np.int64)
    except ValueError:
        raise CloudParseError(f"{path}: labels must be integers, one per line") from None


# run configuration files

@dataclass
class RunConfig:
    fit: FitConfig = field(default_factory=FitConfig)
    inputs: list = field(default_factory=list)
    out_dir: str = "out"
    export_meshes: bool = True
    export_labels: bool = True
    export_report: bool = True
    metrics: tuple = ("cd",)
    jobs: int = None


FIT_KEYS = {
    "steps": "total_steps",
    "primitives": "max_primitives",
    "semantics": "max_semantics",
    "samples": "samples_per_primitive",
}


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(v.strip() for v in value.split(",") if v.strip())
    return value


def read_config_file(path) -> dict:
    """Flat ``key = value`` pairs; an optional ``[section]`` header is ignored."""
    text = Path(path).read_text()
    if not re.search(r"^\s*\[", text, flags=re.M):
        text = "[run]\n" + text
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ValueError(f"{path}: {err}") from None
    out = {}
    for section in parser.sections():
        for key, value in parser[section].items():
            out[key.replace("-", "_")] = value
    return out


def build_run_config(file_values: dict = None, overrides: dict = None) -> RunConfig:
    """Merge config-file strings and already-typed CLI overrides (CLI wins)."""
    run = RunConfig()
    fit_values = run.fit.to_dict()
    loss_values = fit_values.pop("loss")
    merged = {}
    for source, typed in ((file_values or {}, False), (overrides or {}, True)):
        for key, value in source.items():
            if value is None:
                continue
            merged[FIT_KEYS.get(key, key)] = (value, typed)
    run_fields = {"inputs", "out_dir", "export_meshes", "export_labels", "export_report", "metrics", "jobs"}
    for key, (value, typed) in merged.items():
        if key in run_fields:
            if key == "inputs" and not typed:
                value = [v for v in re.split(r"[,\s]+", value) if v]
            elif key == "jobs" and not typed:
                value = int(value)
            elif not typed:
                value = _coerce(value, getattr(run, key))
            setattr(run, key, list(value) if key == "inputs" else value)
        elif key in fit_values:
            like = fit_values[key]
            if key == "stage_boundaries":
                value = tuple(float(v) for v in (value.split(",") if isinstance(value, str) else value))
            elif not typed:
                value = _coerce(value, like)
            fit_values[key] = value
        elif key in loss_values:
            loss_values[key] = value if typed else _coerce(value, loss_values[key])
        else:
            raise ValueError(f"unknown configuration key {key!r}")
    run.fit = FitConfig.from_dict({**fit_values, "loss": loss_values})
    run.metrics = tuple(run.metrics)
    return run


# result export

def denormalized_params(theta: np.ndarray, cloud: PointCloud) -> np.ndarray:
    """Map M×16 parameter rows from the normalized frame to the source frame."""
    p = np.array(theta, dtype=np.float64)
    s = cloud.scale
    p[:, 0:3] *= s  # size
    p[:, 7] /= s  # bend curvature
    p[:, 9:12] = p[:, 9:12] * s + cloud.centroid
    return p


def param_record(row) -> dict:
    return {
        "size": row[0:3].tolist(),
        "shape": row[3:5].tolist(),
        "taper": row[5:7].tolist(),
        "bend": float(row[7]),
        "bend_angle": float(row[8]),
        "translation": row[9:12].tolist(),
        "rotation": row[12:16].tolist(),
    }


def params_from_records(records) -> np.ndarray:
    rows = []
    for r in records:
        rows.append([*r["size"], *r["shape"], *r["taper"], r["bend"], r["bend_angle"], *r["translation"], *r["rotation"]])
    return np.array(rows, dtype=np.float64).reshape(-1, geo.PARAM_DIM)


def mesh_from_params(theta: np.ndarray, resolution: int = geo.MESH_RESOLUTION) -> np.ndarray:
    """Mesh vertices (K×V×3) of parameter rows, without range checks on size or curvature."""
    with torch.no_grad():
        return geo.mesh_vertices(geo.DsqParams.from_vector(torch.as_tensor(theta, dtype=torch.float64)), resolution).numpy()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


def build_report(result: FitResult, cloud: PointCloud, include_timings: bool = True) -> dict:
    kept = result.kept
    report = {
        "source": cloud.source,
        "status": result.status,
        "diagnostic": result.diagnostic,
        "normalization": {"centroid": cloud.centroid.tolist(), "scale": cloud.scale},
        "config": result.config.to_dict(),
        "existence_mask": result.existence_mask.astype(bool).tolist(),
        "point_counts": result.point_counts.tolist(),
        "semantic_of_instance": result.semantic_of_instance.tolist(),
        "mirror_planes": [geo.MirrorPlane(int(v)).name for v in result.mirror_planes],
        "final_loss": result.final_loss,
        "loss_history": result.loss_history,
        "primitives": {},
    }
    for kind in ("ins", "sem", "rep"):
        theta = denormalized_params(getattr(result, f"theta_{kind}"), cloud)
        report["primitives"][kind] = [dict(index=int(k), **param_record(theta[k])) for k in kept]
    if include_timings:
        report["timings"] = result.timings
    return _jsonable(report)


def export_result(result: FitResult, cloud: PointCloud, out_dir, stem: str = "result", run: RunConfig = None, include_timings: bool = True) -> dict:
    """Write labels, per-abstraction OBJ meshes and a JSON report; returns the written paths."""
    run = run or RunConfig()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"{out} is not writable")
        written = {}
        if run.export_labels:
            for kind in ("instance", "semantic"):
                path = out / f"{stem}.{kind}.labels"
                write_labels(path, getattr(result, f"{kind}_labels"))
                written[f"{kind}_labels"] = str(path)
        if run.export_meshes:
            faces = geo.surface_grid(result.config.mesh_resolution).faces
            for kind in ("ins", "sem", "rep"):
                theta = denormalized_params(getattr(result, f"theta_{kind}"), cloud)[result.kept]
                path = out / f"{stem}.{kind}.obj"
                verts = mesh_from_params(theta, result.config.mesh_resolution) if len(theta) else np.zeros((0, 0, 3))
                geo.write_obj(path, list(verts), faces, [f"primitive_{k}" for k in result.kept])
                written[f"{kind}_mesh"] = str(path)
        if run.export_report:
            path = out / f"{stem}.json"
            path.write_text(json.dumps(build_report(result, cloud, include_timings), indent=1))
            written["report"] = str(path)
    except OSError as err:
        raise ExportError(f"cannot write results to {out}: {err}") from err
    return written
