"""Readers and writers for every on-disk format the tools exchange.

Layout / geometry JSON::

    {"width": 512, "height": 512, "polygons": [[[x, y], ...], ...], "tags": ["main", ...]}

``width``, ``height`` and ``tags`` are optional; a bare list of vertex
arrays is accepted as well. The schema lives in ``schemas/layout.schema.json``.

Kernel binary (all little-endian)::

    int32 N_k, int32 K, float64 weights[N_k],
    then N_k kernels of K*K (float32 real, float32 imag) pairs, row-major

Masks are written as PGM P5 (8-bit, 0 or 255) or as raw row-major uint8
bytes (0 or 1), one byte per pixel, first row first.
"""
from __future__ import annotations

import csv
import json
import struct
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from .errors import ConfigError, GeometryError
from .geometry import Polygon, SegmentSet

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


def _schema(name: str) -> dict:
    return json.loads(resources.files("edgeopc").joinpath("schemas", name).read_text())


def _read_json(path) -> object:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# layouts

def parse_layout(doc) -> dict:
    """Validate a layout document; returns ``{"polygons", "tags", "width", "height"}``."""
    if isinstance(doc, list):
        doc = {"polygons": doc}
    try:
        jsonschema.validate(doc, _schema("layout.schema.json"))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"layout does not match schema at {where}: {exc.message}") from exc
    polys = [Polygon.from_coords(p) for p in doc["polygons"]]
    tags = doc.get("tags") or ["main"] * len(polys)
    if len(tags) != len(polys):
        raise ConfigError(f"layout has {len(polys)} polygons but {len(tags)} tags")
    return {"polygons": polys, "tags": list(tags), "width": doc.get("width"), "height": doc.get("height")}


def load_layout(path) -> dict:
    try:
        return parse_layout(_read_json(path))
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def layout_to_dict(polygons: Sequence[Polygon], width=None, height=None, tags=None) -> dict:
    doc: dict = {"polygons": [[[_num(v.x), _num(v.y)] for v in p.vertices] for p in polygons]}
    if tags is not None:
        doc["tags"] = list(tags)
    if width is not None:
        doc["width"] = int(width)
    if height is not None:
        doc["height"] = int(height)
    return doc


def save_layout(path, polygons, width=None, height=None, tags=None) -> None:
    write_json(path, layout_to_dict(polygons, width, height, tags))


def _num(v: float):
    return int(v) if float(v).is_integer() else float(v)


def geometry_to_dict(merged: SegmentSet, width: int, height: int) -> dict:
    """Merged rings as a layout document, collinear vertices dropped, tags kept."""
    polys, tags = [], []
    for k in range(len(merged.rings)):
        v = merged.ring_vertices(k)
        prev, nxt = np.roll(v, 1, axis=0), np.roll(v, -1, axis=0)
        cross = (v[:, 0] - prev[:, 0]) * (nxt[:, 1] - v[:, 1]) - (v[:, 1] - prev[:, 1]) * (nxt[:, 0] - v[:, 0])
        v = v[cross != 0]
        if len(v) < 4:
            continue
        polys.append(Polygon.from_coords(v.tolist()))
        tags.append(merged.ring_tags[k] if k < len(merged.ring_tags) else "main")
    return layout_to_dict(polys, width, height, tags)


# kernels

_KERNEL_HEADER = struct.Struct("<ii")


def kernels_to_bytes(kernels) -> bytes:
    k = np.asarray(kernels.kernels, dtype=np.complex64)
    n, K = k.shape[0], k.shape[1]
    pairs = np.empty((n, K, K, 2), dtype="<f4")
    pairs[..., 0] = k.real
    pairs[..., 1] = k.imag
    return _KERNEL_HEADER.pack(n, K) + np.asarray(kernels.weights, dtype="<f8").tobytes() + pairs.tobytes()


def kernels_from_bytes(data: bytes, source: str = "<bytes>"):
    from .litho import KernelSet

    if len(data) < _KERNEL_HEADER.size:
        raise ConfigError(f"{source}: too short for a kernel header")
    n, K = _KERNEL_HEADER.unpack_from(data)
    if n < 1 or K < 1:
        raise ConfigError(f"{source}: bad kernel header N_k={n}, K={K}")
    want = _KERNEL_HEADER.size + 8 * n + 8 * n * K * K
    if len(data) != want:
        raise ConfigError(f"{source}: expected {want} bytes for N_k={n}, K={K}, found {len(data)}")
    off = _KERNEL_HEADER.size
    weights = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
    pairs = np.frombuffer(data, dtype="<f4", count=2 * n * K * K, offset=off + 8 * n).reshape(n, K, K, 2)
    kern = pairs[..., 0] + 1j * pairs[..., 1]
    return KernelSet(kern.astype(np.complex64), weights, {"source": source})


def save_kernels(path, kernels) -> None:
    Path(path).write_bytes(kernels_to_bytes(kernels))


def load_kernels(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"kernel file not found: {path}")
    return kernels_from_bytes(path.read_bytes(), str(path))


# masks

def pgm_bytes(mask: np.ndarray) -> bytes:
    m = np.asarray(mask)
    H, W = m.shape
    return f"P5\n{W} {H}\n255\n".encode("ascii") + np.where(m > 0, 255, 0).astype(np.uint8).tobytes()


def save_pgm(path, mask: np.ndarray) -> None:
    Path(path).write_bytes(pgm_bytes(mask))


def parse_pgm(data: bytes, source: str = "<bytes>") -> np.ndarray:
    """Decode a binary PGM (P5, maxval < 256); nonzero pixels become 1."""
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ConfigError(f"{source}: truncated PGM header")
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ConfigError(f"{source}: not a binary PGM (magic {fields[0]!r})")
    W, H, maxval = (int(f) for f in fields[1:])
    if maxval > 255:
        raise ConfigError(f"{source}: 16-bit PGM is not supported")
    if len(data) < pos + 1 + W * H:
        raise ConfigError(f"{source}: PGM pixel data is truncated")
    pix = np.frombuffer(data, dtype=np.uint8, count=W * H, offset=pos + 1)
    return (pix.reshape(H, W) > 0).astype(np.uint8)


def load_pgm(path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes(), str(path))


def save_raw(path, mask: np.ndarray) -> None:
    Path(path).write_bytes((np.asarray(mask) > 0).astype(np.uint8).tobytes())


def parse_mask(data: bytes, width: int | None = None, height: int | None = None,
               source: str = "<bytes>") -> np.ndarray:
    """A PGM by magic number, otherwise raw bytes of the given size."""
    if data[:2] == b"P5":
        return parse_pgm(data, source)
    if width is None or height is None:
        raise ConfigError(f"{source}: raw mask needs width and height")
    if len(data) != width * height:
        raise ConfigError(f"{source}: {len(data)} bytes, expected {width}x{height}")
    return (np.frombuffer(data, dtype=np.uint8).reshape(height, width) > 0).astype(np.uint8)


def load_mask(path, width: int | None = None, height: int | None = None) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"mask file not found: {path}")
    return parse_mask(path.read_bytes(), width, height, str(path))


# configs, rules, reports

def load_config_dict(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix.lower() == ".toml":
        try:
            return tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be an object")
    return doc


def load_rules(path):
    from .mrc import MrcRuleSet

    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: rules must be an object of named constants")
    return MrcRuleSet.from_dict(doc)


def save_violations(path, violations) -> None:
    write_json(path, [v.to_dict() for v in violations])


def metrics_to_dict(report) -> dict:
    # wall time is left out so repeated runs write identical files
    d = report.to_dict()
    d.pop("tat_seconds", None)
    return d


def save_metrics(path, report) -> None:
    write_json(path, metrics_to_dict(report))


CONVERGENCE_COLUMNS = ("iteration", "l2", "pvb", "epe", "total", "l2_metric", "epe_count",
                       "max_displacement", "gate_activations", "n_pairs", "n_srafs")


def save_convergence(path, logs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONVERGENCE_COLUMNS)
        for entry in logs:
            d = entry if isinstance(entry, dict) else entry.to_dict()
            w.writerow([repr(float(d[c])) if isinstance(d[c], float) else d[c] for c in CONVERGENCE_COLUMNS])


def load_convergence(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


OUTPUT_FILES = ("mask.pgm", "geometry.json", "metrics.json", "convergence.csv")


def write_artifacts(out_dir, mask_pgm: bytes, geometry: dict, metrics: dict, logs: Sequence[dict]) -> dict:
    """The four optimizer outputs; used both in-process and by the HTTP client."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in OUTPUT_FILES}
    paths["mask.pgm"].write_bytes(mask_pgm)
    write_json(paths["geometry.json"], geometry)
    metrics = dict(metrics)
    metrics.pop("tat_seconds", None)  # wall time would make reruns differ
    write_json(paths["metrics.json"], metrics)
    save_convergence(paths["convergence.csv"], logs)
    return paths


def check_frame(polygons, width, height) -> None:
    for p in polygons:
        x0, y0, x1, y1 = p.bbox()
        if x0 < 0 or y0 < 0 or x1 > width - 1 or y1 > height - 1:
            raise GeometryError(f"polygon with bbox {(x0, y0, x1, y1)} does not fit a {width}x{height} frame")
