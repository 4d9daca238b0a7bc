"""Dataset persistence: raw float32 volumes with a JSON sidecar, PGM slices."""
from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

RAW_DTYPE = "<f4"


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_raw(path, array, kind="volume", voxel_size=1.0, **meta) -> Path:
    """Write ``array`` as little-endian float32 plus a sidecar header.

    The sidecar records the shape (slowest axis first), the value kind,
    the voxel or pixel size, a SHA-256 checksum of the payload and any
    extra metadata.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(array, dtype=RAW_DTYPE).tobytes()
    path.write_bytes(payload)
    head = {
        "shape": list(np.shape(array)),
        "dtype": "float32-le",
        "kind": kind,
        "voxel_size": voxel_size,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    head.update(meta)
    sidecar_path(path).write_text(json.dumps(head, indent=2, sort_keys=True) + "\n")
    return path


def read_header(path) -> dict:
    sp = sidecar_path(path)
    if not sp.exists():
        raise ConfigurationError(f"missing sidecar {sp}")
    try:
        return json.loads(sp.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"unreadable sidecar {sp}: {exc}") from exc


def read_raw(path):
    """Read a raw volume; returns ``(array, header)`` after verifying size and checksum."""
    path = Path(path)
    head = read_header(path)
    if not path.exists():
        raise ConfigurationError(f"missing payload {path}")
    payload = path.read_bytes()
    shape = tuple(int(n) for n in head["shape"])
    if len(payload) != int(np.prod(shape)) * 4:
        raise ConfigurationError(f"{path}: payload has {len(payload)} bytes, shape {shape} needs "
                                 f"{int(np.prod(shape)) * 4}")
    if hashlib.sha256(payload).hexdigest() != head.get("sha256"):
        raise ConfigurationError(f"{path}: checksum mismatch")
    return np.frombuffer(payload, dtype=RAW_DTYPE).reshape(shape).copy(), head


def central_slice(volume):
    """2D image of a volume: the array itself in 2D, the middle ``z`` slice in 3D."""
    volume = np.asarray(volume)
    if volume.ndim == 2:
        return volume
    if volume.ndim == 3:
        return volume[:, :, volume.shape[2] // 2]
    raise ConfigurationError("slices need a 2D or 3D volume")


def write_pgm(path, image, window=None):
    """Write an 8-bit binary PGM; ``window = (lo, hi)`` defaults to the image range.

    Rows of the file run along the second array axis, so ``image[x, y]``
    is displayed with ``x`` horizontal.  Returns the window used.
    """
    img = np.asarray(image, dtype=float)
    lo, hi = (float(np.min(img)), float(np.max(img))) if window is None else map(float, window)
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.clip(np.round((img - lo) * scale), 0, 255).astype(np.uint8).T[::-1]
    h, w = pix.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
    return lo, hi


def read_pgm(path):
    """Read an 8-bit binary PGM written by :func:`write_pgm` (header without comments)."""
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ConfigurationError(f"{path} is not a binary PGM")
    w, h, maxval = (int(v) for v in m.groups())
    if maxval != 255:
        raise ConfigurationError("only 8-bit PGM files are supported")
    pix = np.frombuffer(data[m.end(): m.end() + w * h], dtype=np.uint8).reshape(h, w)
    return pix[::-1].T
