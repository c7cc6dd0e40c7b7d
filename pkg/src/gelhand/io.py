"""File formats: flat key-value configs, ASCII PLY, 16-bit PGM, binary PPM."""
from __future__ import annotations

import configparser
import json
from pathlib import Path

import numpy as np
import yaml

_SECTION = "config"


def read_kv(path) -> dict[str, str]:
    """Read a flat ``key = value`` file (``#`` comments allowed)."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string(f"[{_SECTION}]\n" + Path(path).read_text())
    return dict(parser[_SECTION])


def write_kv(path, values: dict) -> None:
    lines = [f"{k} = {_kv_value(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _kv_value(v) -> str:
    if isinstance(v, (list, tuple, np.ndarray)):
        return ", ".join(repr(float(x)) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_floats(text: str) -> list[float]:
    return [float(t) for t in str(text).replace(",", " ").split()]


def load_structured(path) -> dict:
    """Load a single-document JSON or YAML config; flat key-value otherwise."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".json":
        return json.loads(path.read_text())
    if suffix in (".yaml", ".yml"):
        return yaml.safe_load(path.read_text()) or {}
    return read_kv(path)


def write_ply(path, points, sensor_ids=None) -> None:
    """ASCII PLY with an optional per-point ``sensor_id`` scalar property."""
    points = np.asarray(points, float).reshape(-1, 3)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if sensor_ids is not None:
        header.append("property uchar sensor_id")
    header.append("end_header")
    with open(path, "w") as f:
        f.write("\n".join(header) + "\n")
        if sensor_ids is None:
            for p in points:
                f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")
        else:
            for p, s in zip(points, np.asarray(sensor_ids).reshape(-1)):
                f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {int(s)}\n")


def read_ply(path):
    """Read an ASCII PLY written by :func:`write_ply`; returns (points, sensor_ids or None)."""
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"{path} is not a PLY file")
        n = 0
        props = []
        for line in f:
            line = line.strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("property"):
                props.append(line.split()[-1])
            elif line == "end_header":
                break
        data = np.loadtxt(f, ndmin=2, max_rows=n) if n else np.zeros((0, len(props)))
    data = data.reshape(-1, len(props))
    ids = data[:, props.index("sensor_id")].astype(int) if "sensor_id" in props else None
    return data[:, :3], ids


def write_pgm16(path, h, scale=None) -> float:
    """Write a height map as a 16-bit binary PGM; returns the mm per gray level."""
    h = np.asarray(h, float)
    lo = h.min()
    span = h.max() - lo
    if scale is None:
        scale = span / 65535.0 if span > 0 else 1.0
    q = np.clip(np.rint((h - lo) / scale), 0, 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{h.shape[1]} {h.shape[0]}\n65535\n".encode())
        f.write(q.tobytes())
    return scale


def read_pgm16(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, offset = _pnm_header(data, 3)
    w, h, maxval = tokens
    dtype = ">u2" if maxval > 255 else np.uint8
    return np.frombuffer(data, dtype=dtype, count=w * h, offset=offset).reshape(h, w)


def write_ppm(path, image) -> None:
    image = np.asarray(image, np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        f.write(np.ascontiguousarray(image).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path} is not a binary PPM")
    (w, h, _), offset = _pnm_header(data, 3)
    return np.frombuffer(data, np.uint8, count=w * h * 3, offset=offset).reshape(h, w, 3).copy()


def _pnm_header(data: bytes, count: int):
    pos = 2
    values = []
    while len(values) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        values.append(int(data[start:pos]))
    return values, pos + 1
