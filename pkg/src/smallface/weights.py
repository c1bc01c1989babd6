"""Weight files: a text manifest plus a flat little-endian float32 blob.

``<stem>.manifest`` holds ``key value`` lines. ``tensor`` lines give
``name shape offset nbytes`` in blob order; every other key is metadata
(the network config, the upsampling convention, input means, ...).
``<stem>.bin`` is the raw blob. Loading upcasts to float64.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT = "smallface-weights/1"


class WeightFileError(ValueError):
    pass


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".manifest", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".manifest"), stem.with_suffix(".bin")


def save_weights(stem, params: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> Path:
    manifest, blob = _paths(stem)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"format {FORMAT}", "dtype float32", "byte_order little"]
    for k, v in (meta or {}).items():
        if any(c.isspace() for c in k) or "\n" in str(v):
            raise WeightFileError(f"metadata key/value not representable on one line: {k!r}")
        lines.append(f"{k} {v}")
    offset = 0
    chunks = []
    for name, arr in params.items():
        a = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        shape = ",".join(str(d) for d in a.shape) or "scalar"
        lines.append(f"tensor {name} {shape} {offset} {a.nbytes}")
        chunks.append(a.tobytes())
        offset += a.nbytes
    blob.write_bytes(b"".join(chunks))
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_weights(stem) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    manifest, blob = _paths(stem)
    if not manifest.exists():
        raise WeightFileError(f"missing weight manifest: {manifest}")
    if not blob.exists():
        raise WeightFileError(f"missing weight blob: {blob}")
    raw = blob.read_bytes()
    params: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, _, rest = line.partition(" ")
        if key != "tensor":
            meta[key] = rest
            continue
        try:
            name, shape_s, off_s, n_s = rest.split()
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split(","))
            off, n = int(off_s), int(n_s)
        except ValueError as e:
            raise WeightFileError(f"{manifest}:{lineno}: malformed tensor line: {line!r}") from e
        if off + n > len(raw) or n != 4 * int(np.prod(shape, dtype=np.int64)):
            raise WeightFileError(f"{manifest}:{lineno}: tensor {name} does not fit the blob {blob}")
        params[name] = np.frombuffer(raw, dtype="<f4", count=n // 4, offset=off).astype(np.float64).reshape(shape)
    if meta.get("format") != FORMAT:
        raise WeightFileError(f"{manifest}: unsupported format {meta.get('format')!r}")
    return params, meta
