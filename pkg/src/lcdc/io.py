"""File formats: TSR/1 tensors, Netpbm images, checkpoints, label CSVs.

TSR/1 is one ASCII header line ``TSR1 <rank> <d0> ... <dk>`` followed by
the values as little-endian float64 in row-major order.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = "TSR1"


def tsr_bytes(x) -> bytes:
    arr = np.ascontiguousarray(x, dtype="<f8")
    header = " ".join([MAGIC, str(arr.ndim)] + [str(d) for d in arr.shape]) + "\n"
    return header.encode("ascii") + arr.tobytes(order="C")


def write_tsr(path, x) -> None:
    Path(path).write_bytes(tsr_bytes(x))


def parse_tsr(blob: bytes) -> np.ndarray:
    nl = blob.find(b"\n")
    if nl < 0:
        raise ValueError("TSR1: missing header line")
    fields = blob[:nl].decode("ascii").split()
    if not fields or fields[0] != MAGIC:
        raise ValueError(f"TSR1: bad magic {fields[:1]}")
    rank = int(fields[1])
    shape = tuple(int(d) for d in fields[2:])
    if len(shape) != rank:
        raise ValueError(f"TSR1: rank {rank} but {len(shape)} extents")
    payload = blob[nl + 1 :]
    count = int(np.prod(shape, dtype=np.int64))
    if len(payload) != 8 * count:
        raise ValueError(f"TSR1: expected {8 * count} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def read_tsr(path) -> np.ndarray:
    return parse_tsr(Path(path).read_bytes())


def write_pgm16(path, image) -> float:
    """Write a max-normalized 16-bit binary PGM; returns the normalization constant."""
    img = np.asarray(image, dtype=np.float64)
    peak = float(img.max()) if img.size else 0.0
    scaled = np.zeros(img.shape) if peak <= 0 else img / peak
    data = np.round(np.clip(scaled, 0, 1) * 65535).astype(">u2")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + data.tobytes())
    return peak


def write_ppm(path, rgb) -> None:
    """Write an 8-bit binary PPM from an ``(H, W, 3)`` array in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    h, w, _ = rgb.shape
    data = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def save_checkpoint(directory, tensors: dict[str, np.ndarray], extra: dict | None = None) -> dict:
    """Write each tensor as ``<name>.tsr`` plus ``manifest.json`` with shapes and sha256."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        blob = tsr_bytes(tensors[name])
        (directory / f"{name}.tsr").write_bytes(blob)
        entries.append(
            {
                "name": name,
                "file": f"{name}.tsr",
                "shape": list(np.shape(tensors[name])),
                "sha256": hashlib.sha256(blob).hexdigest(),
            }
        )
    manifest = {"format": "TSR1", "tensors": entries}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_checkpoint(directory, verify: bool = True) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tensors = {}
    for entry in manifest["tensors"]:
        blob = (directory / entry["file"]).read_bytes()
        if verify and hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise ValueError(f"checkpoint tensor {entry['name']} fails its content hash")
        arr = parse_tsr(blob)
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"checkpoint tensor {entry['name']} has shape {arr.shape}, manifest says {entry['shape']}")
        tensors[entry["name"]] = arr
    return tensors, manifest


def write_labels_csv(path, labels) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame", "label"])
        for i, lab in enumerate(labels):
            writer.writerow([i, int(lab)])


def read_labels_csv(path) -> list[int]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and rows[0] and not rows[0][0].strip().lstrip("-").isdigit():
        rows = rows[1:]
    rows = [r for r in rows if r]
    rows.sort(key=lambda r: int(r[0]))
    return [int(r[1]) for r in rows]
