"""On-disk formats: the two-plane image container, 16-bit PNG pairs, and the
JSON dataset manifest.

Container layout (``.pvimg``): 8 magic bytes ``PVIMG001``, three little-endian
uint32 (height, width, planes), then the planes as row-major float32, image
plane first and centroid plane second.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PVIMG001"
MANIFEST_FORMAT = "protoverse-manifest-v1"
IMAGE_FORMATS = ("pvimg", "png16")


def write_array_container(path, planes: np.ndarray) -> None:
    planes = np.ascontiguousarray(planes, dtype=np.float32)
    if planes.ndim != 3:
        raise ValueError(f"expected (planes, H, W), got shape {planes.shape}")
    p, h, w = planes.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", h, w, p))
        f.write(planes.tobytes())


def read_array_container(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic bytes {magic!r}")
        h, w, p = struct.unpack("<III", f.read(12))
        data = np.frombuffer(f.read(4 * h * w * p), dtype="<f4")
    if data.size != h * w * p:
        raise ValueError(f"{path}: truncated payload")
    return data.reshape(p, h, w).copy()


def write_png16(path, array: np.ndarray) -> None:
    """Store a [0, 1] float image as 16-bit grayscale PNG."""
    from PIL import Image

    arr = np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0)
    quantized = np.round(arr * 65535.0).astype(np.uint16)
    Image.fromarray(quantized, mode="I;16").save(path)


def read_png16(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return (arr / 65535.0).astype(np.float32)


def write_sample_arrays(directory: Path, sample_id: str, image, centroid, image_format: str) -> str:
    """Write one sample's planes; returns the manifest-relative primary path."""
    directory = Path(directory)
    if image_format == "pvimg":
        rel = f"{sample_id}.pvimg"
        write_array_container(directory / rel, np.stack([image, centroid]))
    elif image_format == "png16":
        rel = f"{sample_id}.png"
        write_png16(directory / rel, image)
        write_png16(directory / f"{sample_id}_centroid.png", centroid)
    else:
        raise ValueError(f"unknown image format {image_format!r}")
    return rel


def read_sample_arrays(directory: Path, rel_path: str, image_format: str):
    """Returns (image, centroid) float32 planes for one manifest entry."""
    directory = Path(directory)
    if image_format == "pvimg":
        planes = read_array_container(directory / rel_path)
        return planes[0], planes[1]
    if image_format == "png16":
        image = read_png16(directory / rel_path)
        stem = rel_path[: -len(".png")]
        centroid = read_png16(directory / f"{stem}_centroid.png")
        return image, centroid
    raise ValueError(f"unknown image format {image_format!r}")


def save_manifest(manifest, path) -> None:
    path = Path(path)
    payload = {
        "format": MANIFEST_FORMAT,
        "split": manifest.split,
        "seed": manifest.seed,
        "image_format": manifest.image_format,
        "class_counts": dict(manifest.class_counts),
        "samples": [
            {
                "sample_id": e.sample_id,
                "path": e.path,
                "grade": e.grade,
                "metadata": e.metadata,
            }
            for e in manifest.samples
        ],
    }
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_manifest(path):
    from .datagen import DatasetManifest, ManifestEntry

    path = Path(path)
    payload = json.loads(path.read_text())
    if payload.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path} is not a recognized dataset manifest")
    samples = [
        ManifestEntry(
            sample_id=s["sample_id"],
            path=s["path"],
            grade=s["grade"],
            metadata=s.get("metadata", {}),
        )
        for s in payload["samples"]
    ]
    return DatasetManifest(
        samples=samples,
        split=payload["split"],
        seed=payload["seed"],
        image_format=payload.get("image_format", "pvimg"),
        root=path.parent,
    )
