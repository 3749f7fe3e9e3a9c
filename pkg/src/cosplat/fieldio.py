"""Binary (de)serialization for Gaussian fields and float images.

Both formats are a single JSON header line followed by raw little-endian
C-order array bytes, so they stay trivially parseable from any language and
round-trip bit-exactly. Field arrays are stored at their native float64;
image files default to float32.
"""

from __future__ import annotations

import json
import os
from typing import Union

import numpy as np

from .errors import FieldFormatError
from .scene import GaussianField, ImageBuffer

FIELD_MAGIC = "cosplat-field"
IMAGE_MAGIC = "cosplat-image"
FORMAT_VERSION = 1
_MAX_HEADER = 1 << 16

PathLike = Union[str, os.PathLike]


def _read_header(raw: bytes) -> tuple[dict, int]:
    end = raw.find(b"\n", 0, _MAX_HEADER)
    if end < 0:
        raise FieldFormatError("missing header line", 0)
    try:
        header = json.loads(raw[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FieldFormatError(f"unparseable header: {exc}", 0) from exc
    if not isinstance(header, dict):
        raise FieldFormatError("header is not a JSON object", 0)
    return header, end + 1


def save_field(field: GaussianField, path: PathLike) -> None:
    field.validate()
    arrays = [
        ("positions", field.positions),
        ("log_scales", field.log_scales),
        ("rotations", field.rotations),
        ("opacities_raw", field.opacities_raw),
        ("colors_raw", field.colors_raw),
    ]
    header = {
        "magic": FIELD_MAGIC,
        "version": FORMAT_VERSION,
        "count": field.count,
        "arrays": [
            {"name": name, "dtype": "<f8", "shape": list(arr.shape)}
            for name, arr in arrays
        ],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_field(path: PathLike) -> GaussianField:
    with open(path, "rb") as fh:
        raw = fh.read()
    header, offset = _read_header(raw)
    if header.get("magic") != FIELD_MAGIC:
        raise FieldFormatError(f"bad magic {header.get('magic')!r}", 0)
    if header.get("version") != FORMAT_VERSION:
        raise FieldFormatError(f"unsupported version {header.get('version')!r}", 0)
    count = header.get("count")
    arrays = {}
    for spec in header.get("arrays", []):
        name, dtype, shape = spec.get("name"), spec.get("dtype"), tuple(spec.get("shape", ()))
        if not shape or shape[0] != count:
            raise FieldFormatError(f"array {name!r} shape {shape} does not match count {count}", offset)
        dt = np.dtype(dtype)
        nbytes = int(np.prod(shape)) * dt.itemsize
        if offset + nbytes > len(raw):
            raise FieldFormatError(
                f"truncated payload for array {name!r}: need {nbytes} bytes, have {len(raw) - offset}",
                offset,
            )
        arrays[name] = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise FieldFormatError(f"{len(raw) - offset} trailing bytes after payload", offset)
    try:
        field = GaussianField(
            positions=np.array(arrays["positions"], dtype=np.float64),
            log_scales=np.array(arrays["log_scales"], dtype=np.float64),
            rotations=np.array(arrays["rotations"], dtype=np.float64),
            opacities_raw=np.array(arrays["opacities_raw"], dtype=np.float64),
            colors_raw=np.array(arrays["colors_raw"], dtype=np.float64),
        )
    except KeyError as exc:
        raise FieldFormatError(f"missing array {exc}", offset) from exc
    field.validate()
    return field


def save_image_raw(image: ImageBuffer, path: PathLike, dtype: str = "<f4") -> None:
    image.validate()
    header = {
        "magic": IMAGE_MAGIC,
        "version": FORMAT_VERSION,
        "width": image.width,
        "height": image.height,
        "channels": image.channels,
        "dtype": dtype,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(image.data, dtype=dtype).tobytes())


def load_image_raw(path: PathLike) -> ImageBuffer:
    with open(path, "rb") as fh:
        raw = fh.read()
    header, offset = _read_header(raw)
    if header.get("magic") != IMAGE_MAGIC:
        raise FieldFormatError(f"bad magic {header.get('magic')!r}", 0)
    if header.get("version") != FORMAT_VERSION:
        raise FieldFormatError(f"unsupported version {header.get('version')!r}", 0)
    w, h, c = header.get("width"), header.get("height"), header.get("channels")
    if c not in (1, 3):
        raise FieldFormatError(f"unsupported channel count {c}", 0)
    dt = np.dtype(header.get("dtype"))
    n = w * h * c
    if offset + n * dt.itemsize > len(raw):
        raise FieldFormatError(
            f"truncated payload: need {n * dt.itemsize} bytes, have {len(raw) - offset}", offset
        )
    data = np.frombuffer(raw, dtype=dt, count=n, offset=offset).astype(np.float64)
    shape = (h, w) if c == 1 else (h, w, 3)
    return ImageBuffer(data.reshape(shape))


def save_image_png(image: ImageBuffer, path: PathLike) -> None:
    from PIL import Image

    data = np.clip(image.data, 0.0, 1.0)
    if image.channels == 1:
        arr = np.round(data * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(path)
    else:
        arr = np.round(data * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(path)
