"""Image and JSON artifact input/output.

Images are grayscale PNG or PGM; 8- and 16-bit files are read as floats in
``[0, 1]`` and written as 16-bit PNG.  JSON artifacts carry a ``schema`` name
and ``schema_version`` and are written canonically (sorted keys, fixed
indentation) so identical inputs produce identical bytes.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from PIL import Image


class ArtifactError(OSError):
    pass


def load_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
            mode = im.mode
    except (OSError, ValueError) as exc:
        raise ArtifactError(f"cannot read image {path}: {exc}") from exc
    if mode in ("I;16", "I;16B", "I;16L", "I") or arr.dtype == np.uint16:
        scale = 65535.0
    elif arr.dtype == np.uint8:
        scale = 255.0
    else:
        scale = 1.0
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=-1)
    return arr.astype(float) / scale


def save_image(path, img) -> None:
    path = Path(path)
    data = np.clip(np.round(np.asarray(img, dtype=float) * 65535.0), 0, 65535).astype(np.uint16)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(data).save(path)
    except (OSError, ValueError) as exc:
        raise ArtifactError(f"cannot write image {path}: {exc}") from exc


def _clean(obj):
    """Make ``obj`` JSON-serialisable; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isfinite(x):
            return x
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(doc) -> str:
    return json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"


def write_json(path, doc) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(doc))
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc}") from exc


def read_json(path, schema: str | None = None) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc
    if schema is not None and doc.get("schema") != schema:
        raise ValueError(f"{path}: expected schema {schema!r}, found {doc.get('schema')!r}")
    return doc


def as_float(x) -> float:
    """Inverse of the non-finite encoding used by :func:`dumps`."""
    return float(x)
