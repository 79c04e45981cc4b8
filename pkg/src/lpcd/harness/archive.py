"""Tensor archives: a JSON manifest next to one raw little-endian float32 blob.

Layout of an archive directory::

    manifest.json   {"format", "version", "meta", "tensors": {key: {shape, dtype, offset}}}
    tensors.bin     concatenated row-major float32 data, offsets in bytes

Every failure mode raises a subclass of :class:`ArchiveError` carrying its own
process exit code so the CLI can report it without guessing.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from lpcd.harness.model import NORM_NAMES, WEIGHT_NAMES, ModelDims, ToyModel

FORMAT = "lpcd-tensor-archive"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_DTYPES = {"float32": np.dtype("<f4")}


class ArchiveError(Exception):
    """Base class for unreadable or inconsistent archives."""

    code = 1
    kind = "archive_error"


class ManifestMismatchError(ArchiveError):
    code = 3
    kind = "manifest_mismatch"


class TruncatedArchiveError(ArchiveError):
    code = 4
    kind = "truncated_archive"


class UnknownDtypeError(ArchiveError):
    code = 5
    kind = "unknown_dtype"


class EmptyArchiveError(ArchiveError):
    code = 6
    kind = "empty_archive"


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``tensors`` (in insertion order) to the archive directory ``path``.

    Values are stored as float32; callers that need a bit-exact round trip
    should hold float32-representable data.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = {}, [], 0
    for key, arr in tensors.items():
        data = np.ascontiguousarray(np.asarray(arr), dtype=_DTYPES["float32"])
        entries[key] = {"shape": list(data.shape), "dtype": "float32", "offset": offset}
        raw = data.tobytes(order="C")
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "version": VERSION, "meta": meta or {}, "tensors": entries}
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_manifest(path: Path) -> dict:
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise ManifestMismatchError(f"no {MANIFEST} in {path}")
    try:
        manifest = json.loads(mpath.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestMismatchError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or not isinstance(manifest.get("tensors"), dict):
        raise ManifestMismatchError("manifest lacks a 'tensors' table")
    if manifest.get("format", FORMAT) != FORMAT:
        raise ManifestMismatchError(f"unexpected format tag {manifest.get('format')!r}")
    return manifest


def read_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read an archive; returns ``(tensors, meta)`` with float32 arrays."""
    path = Path(path)
    manifest = _load_manifest(path)
    entries = manifest["tensors"]
    if not entries:
        raise EmptyArchiveError(f"archive {path} holds no tensors")
    bpath = path / BLOB
    if not bpath.is_file():
        raise TruncatedArchiveError(f"missing blob {BLOB} in {path}")
    blob = bpath.read_bytes()

    spans, out = [], {}
    for key, e in entries.items():
        try:
            shape = tuple(int(s) for s in e["shape"])
            offset = int(e["offset"])
            dtype_name = e["dtype"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestMismatchError(f"malformed entry for {key!r}: {exc}") from exc
        if dtype_name not in _DTYPES:
            raise UnknownDtypeError(f"tensor {key!r} has unsupported dtype {dtype_name!r}")
        if offset < 0 or any(s < 0 for s in shape):
            raise ManifestMismatchError(f"negative offset or shape for {key!r}")
        dtype = _DTYPES[dtype_name]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(blob):
            raise TruncatedArchiveError(
                f"tensor {key!r} needs bytes [{offset}, {offset + nbytes}) but blob has {len(blob)}"
            )
        spans.append((offset, offset + nbytes, key))
        out[key] = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape).copy()

    spans.sort()
    for (_, end, k1), (start, _, k2) in zip(spans, spans[1:]):
        if start < end:
            raise ManifestMismatchError(f"tensors {k1!r} and {k2!r} overlap in the blob")
    used = max(end for _, end, _ in spans)
    if used != len(blob):
        raise ManifestMismatchError(f"blob has {len(blob)} bytes but the manifest accounts for {used}")
    return out, manifest.get("meta", {})


def model_to_tensors(model: ToyModel) -> tuple[dict[str, np.ndarray], dict]:
    tensors = {}
    for i, blk in enumerate(model.blocks):
        for name in WEIGHT_NAMES + NORM_NAMES:
            tensors[f"blocks.{i}.{name}"] = blk[name]
    meta = {"dims": model.dims.to_dict(), "seed": model.seed, "init_scale": model.init_scale, **model.meta}
    return tensors, meta


def model_from_tensors(tensors: dict[str, np.ndarray], meta: dict) -> ToyModel:
    if not tensors:
        raise EmptyArchiveError("archive holds no tensors")
    try:
        dims = ModelDims(**meta["dims"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestMismatchError(f"archive meta has no valid dims: {exc}") from exc
    shapes = {**dims.shapes(), **{n: (dims.d_model,) for n in NORM_NAMES}}
    expected = {f"blocks.{i}.{n}" for i in range(dims.n_blocks) for n in shapes}
    if set(tensors) != expected:
        missing, extra = sorted(expected - set(tensors)), sorted(set(tensors) - expected)
        raise ManifestMismatchError(f"tensor keys disagree with dims (missing {missing[:3]}, extra {extra[:3]})")
    blocks = []
    for i in range(dims.n_blocks):
        blk = {}
        for name, shape in shapes.items():
            arr = tensors[f"blocks.{i}.{name}"]
            if tuple(arr.shape) != tuple(shape):
                raise ManifestMismatchError(f"blocks.{i}.{name} has shape {arr.shape}, expected {shape}")
            blk[name] = arr.astype(np.float64)
        blocks.append(blk)
    extra_meta = {k: v for k, v in meta.items() if k not in ("dims", "seed", "init_scale")}
    return ToyModel(dims, blocks, int(meta.get("seed", 0)), float(meta.get("init_scale", 1.0)), extra_meta)


def save_model(model: ToyModel, path: str | Path) -> Path:
    tensors, meta = model_to_tensors(model)
    return write_tensors(path, tensors, meta)


def load_model(path: str | Path) -> ToyModel:
    return model_from_tensors(*read_tensors(path))
