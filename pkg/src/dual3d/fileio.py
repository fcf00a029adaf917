"""Small deterministic file formats shared across the pipeline.

Images travel as binary PPM (P6, 8 bits per channel); float arrays as raw
little-endian float32 with a JSON sidecar describing the shape; manifests
as canonical JSON (sorted keys, no whitespace) so equal content always
hashes equally.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np


def write_ppm(path, img: np.ndarray) -> None:
    """Write an RGB image with values in [0, 1] as binary PPM."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("image must be (h, w, 3)")
    if not np.all(np.isfinite(img)):
        raise ValueError("image must be finite")
    h, w, _ = img.shape
    quantized = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(str(path), "wb") as fp:
        fp.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fp.write(quantized.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into float RGB in [0, 1]."""
    with open(str(path), "rb") as fp:
        blob = fp.read()
    # Header: magic, width, height, maxval as whitespace-separated tokens
    # (comment lines are not produced by write_ppm and not supported).
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1   # single whitespace after maxval
    if fields[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_raw_f32(path, arr: np.ndarray, meta: dict | None = None) -> None:
    """Raw little-endian float32 blob plus a ``.json`` shape sidecar."""
    arr = np.asarray(arr, dtype=np.float64)
    path = str(path)
    arr.astype("<f4").tofile(path)
    sidecar = dict(meta or {})
    sidecar["shape"] = list(arr.shape)
    sidecar["dtype"] = "<f4"
    with open(path + ".json", "w", encoding="utf-8") as fp:
        json.dump(sidecar, fp, sort_keys=True)
        fp.write("\n")


def read_raw_f32(path) -> tuple[np.ndarray, dict]:
    path = str(path)
    with open(path + ".json", "r", encoding="utf-8") as fp:
        meta = json.load(fp)
    data = np.fromfile(path, dtype=meta.get("dtype", "<f4"))
    shape = tuple(meta["shape"])
    if data.size != int(np.prod(shape)):
        raise ValueError("raw blob size does not match its sidecar")
    return data.reshape(shape).astype(np.float64), meta


def canonical_json(obj) -> str:
    """Deterministic JSON text: sorted keys, minimal separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(str(path), "rb") as fp:
        for chunk in iter(lambda: fp.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sig_digits(x: float, n: int = 6) -> float:
    """Round to ``n`` significant digits (stable text via repr)."""
    if x == 0 or not np.isfinite(x):
        return float(x)
    return float(f"{x:.{n}g}")
