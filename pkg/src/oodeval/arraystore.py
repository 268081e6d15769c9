"""Bit-exact matrix files and manifest-driven evaluation bundles.

Matrix file layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"OODM"
    4       2     version (u16) = 1
    6       1     dtype (u8): 0 = f32, 1 = u32
    7       1     pad (u8) = 0
    8       8     rows (u64)
    16      8     cols (u64)
    24      ...   rows*cols values, row-major, little-endian

Vectors are stored as ``n x 1`` matrices; readers also accept ``1 x n``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError, FormatError

MAGIC = b"OODM"
VERSION = 1
HEADER = struct.Struct("<4sHBBQQ")

_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<u4")}
_KIND_TO_CODE = {"f": 0, "u": 1}

CONSISTENCY_RTOL = 1e-4


def _as_storable(m: np.ndarray) -> tuple[int, np.ndarray]:
    m = np.asarray(m)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise DataError(f"expected a 1-D or 2-D array, got shape {m.shape}")
    if m.dtype.kind == "f":
        if not np.all(np.isfinite(m)):
            raise DataError("matrix contains NaN or Inf")
        return 0, np.ascontiguousarray(m, dtype="<f4")
    if m.dtype.kind in "ui":
        if m.size and (m.min() < 0 or m.max() > np.iinfo(np.uint32).max):
            raise DataError("integer matrix values do not fit in u32")
        return 1, np.ascontiguousarray(m, dtype="<u4")
    raise DataError(f"unsupported dtype {m.dtype}")


def encode_matrix(m: np.ndarray) -> bytes:
    code, data = _as_storable(m)
    rows, cols = data.shape
    return HEADER.pack(MAGIC, VERSION, code, 0, rows, cols) + data.tobytes(order="C")


def decode_matrix(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < HEADER.size:
        raise FormatError(f"{source}: truncated header ({len(buf)} bytes)")
    magic, version, code, _pad, rows, cols = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"{source}: unknown dtype code {code}")
    dtype = _CODE_TO_DTYPE[code]
    expected = rows * cols * dtype.itemsize
    payload = len(buf) - HEADER.size
    if payload < expected:
        raise FormatError(f"{source}: truncated payload ({payload} of {expected} bytes)")
    if payload > expected:
        raise FormatError(f"{source}: {payload - expected} trailing bytes after payload")
    data = np.frombuffer(buf, dtype=dtype, count=rows * cols, offset=HEADER.size).reshape(rows, cols)
    if code == 0 and not np.all(np.isfinite(data)):
        raise FormatError(f"{source}: NaN or Inf in f32 payload")
    return data.copy()


def write_matrix(path: str | Path, m: np.ndarray) -> None:
    """Write ``m`` (float -> f32, integer -> u32) to ``path``."""
    blob = encode_matrix(m)
    Path(path).write_bytes(blob)


def read_matrix(path: str | Path) -> np.ndarray:
    """Read a matrix file; returns a ``float32`` or ``uint32`` 2-D array."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return decode_matrix(buf, str(path))


def _read_vector(path: Path) -> np.ndarray:
    m = read_matrix(path)
    if 1 not in m.shape:
        raise DataError(f"{path}: expected a vector, got shape {m.shape}")
    return m.reshape(-1)


@dataclass(frozen=True)
class SampleSet:
    logits: np.ndarray
    features: np.ndarray | None = None

    def __len__(self) -> int:
        return self.logits.shape[0]


@dataclass(frozen=True)
class EvalBundle:
    """Everything needed to fit detectors and evaluate them.

    ``features`` and ``last_layer`` are optional as a group: a bundle either
    has features for every split plus ``W``/``b``, or is logits-only.
    """

    id_train: SampleSet
    labels: np.ndarray
    id_test: SampleSet
    ood_sets: Mapping[str, SampleSet]
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    source: str = field(default="", compare=False)

    @property
    def has_features(self) -> bool:
        return self.id_train.features is not None

    @property
    def num_classes(self) -> int:
        return self.id_train.logits.shape[1]

    @property
    def feature_dim(self) -> int | None:
        return None if self.id_train.features is None else self.id_train.features.shape[1]


def _require(section: Mapping, key: str, where: str):
    if not isinstance(section, Mapping) or key not in section:
        raise DataError(f"manifest: missing key {where}{key}")
    return section[key]


def _load_set(entry: Mapping, root: Path, where: str) -> SampleSet:
    logits = read_matrix(root / _require(entry, "logits", where))
    feats_rel = entry.get("features")
    features = None if feats_rel is None else read_matrix(root / feats_rel)
    if logits.dtype.kind != "f" or (features is not None and features.dtype.kind != "f"):
        raise DataError(f"{where.rstrip('.')}: features and logits must be f32 matrices")
    if features is not None and features.shape[0] != logits.shape[0]:
        raise DataError(
            f"{where.rstrip('.')}: features have {features.shape[0]} rows but logits have {logits.shape[0]}"
        )
    return SampleSet(logits=logits, features=features)


def check_last_layer(features: np.ndarray, logits: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> None:
    """Raise if ``features @ W + b`` does not reproduce ``logits``."""
    pred = features.astype(np.float64) @ weights.astype(np.float64) + bias.astype(np.float64)
    err = np.abs(pred - logits.astype(np.float64))
    scale = float(np.max(np.abs(logits))) if logits.size else 0.0
    worst = int(np.argmax(err.max(axis=1))) if err.size else 0
    max_err = float(err.max()) if err.size else 0.0
    if max_err > CONSISTENCY_RTOL * scale:
        raise DataError(
            f"last layer does not reproduce train logits: max abs error {max_err:.3g} "
            f"exceeds {CONSISTENCY_RTOL:g} x max |logit| ({scale:.3g}); worst sample index {worst}"
        )


def load_bundle(manifest_path: str | Path) -> EvalBundle:
    """Load and validate the bundle described by a JSON manifest.

    Paths in the manifest are relative to the manifest's directory. OOD sets
    are ordered by name regardless of their order in the file.
    """
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    root = manifest_path.parent

    train_entry = _require(doc, "id_train", "")
    id_train = _load_set(train_entry, root, "id_train.")
    labels_raw = read_matrix(root / _require(train_entry, "labels", "id_train."))
    if labels_raw.dtype.kind != "u" or 1 not in labels_raw.shape:
        raise DataError("id_train.labels must be a u32 vector")
    labels = labels_raw.reshape(-1).astype(np.int64)
    id_test = _load_set(_require(doc, "id_test", ""), root, "id_test.")

    ood_entry = _require(doc, "ood", "")
    if not isinstance(ood_entry, Mapping) or not ood_entry:
        raise DataError("at least one OOD set required")
    ood_sets = {name: _load_set(ood_entry[name], root, f"ood.{name}.") for name in sorted(ood_entry)}

    n_tr, C = id_train.logits.shape
    if labels.shape[0] != n_tr:
        raise DataError(f"id_train: {labels.shape[0]} labels for {n_tr} samples")
    if n_tr == 0:
        raise DataError("id_train is empty")
    if labels.size and labels.max() >= C:
        bad = int(np.argmax(labels >= C))
        raise DataError(f"label {int(labels[bad])} at index {bad} out of range [0, {C})")

    named = [("id_test", id_test)] + [(f"ood set '{k}'", v) for k, v in ood_sets.items()]
    for name, s in named:
        if s.logits.shape[1] != C:
            raise DataError(f"dimension mismatch: {name} has {s.logits.shape[1]} logit columns, expected {C}")
        if len(s) == 0:
            raise DataError(f"{name} is empty")

    has_features = id_train.features is not None
    for name, s in named:
        if (s.features is not None) != has_features:
            raise DataError(f"{name}: features must be given for all sets or for none")

    weights = bias = None
    if has_features:
        d = id_train.features.shape[1]
        for name, s in named:
            if s.features.shape[1] != d:
                raise DataError(f"dimension mismatch: {name} has {s.features.shape[1]} feature columns, expected {d}")
        layer = _require(doc, "last_layer", "")
        weights = read_matrix(root / _require(layer, "weights", "last_layer."))
        bias = _read_vector(root / _require(layer, "bias", "last_layer."))
        if weights.shape != (d, C):
            raise DataError(f"dimension mismatch: last_layer.weights has shape {weights.shape}, expected {(d, C)}")
        if bias.shape != (C,):
            raise DataError(f"dimension mismatch: last_layer.bias has length {bias.shape[0]}, expected {C}")
        check_last_layer(id_train.features, id_train.logits, weights, bias)

    return EvalBundle(
        id_train=id_train,
        labels=labels,
        id_test=id_test,
        ood_sets=ood_sets,
        weights=weights,
        bias=bias,
        source=str(manifest_path),
    )


def save_bundle(
    directory: str | Path,
    *,
    train_logits: np.ndarray,
    labels: np.ndarray,
    test_logits: np.ndarray,
    ood: Mapping[str, tuple[np.ndarray | None, np.ndarray]],
    train_features: np.ndarray | None = None,
    test_features: np.ndarray | None = None,
    weights: np.ndarray | None = None,
    bias: np.ndarray | None = None,
) -> Path:
    """Write matrices plus ``manifest.json`` into ``directory``.

    ``ood`` maps set name to ``(features, logits)``. Returns the manifest path.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    def put(rel: str, arr: np.ndarray) -> str:
        target = directory / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        write_matrix(target, arr)
        return rel

    def entry(prefix: str, feats: np.ndarray | None, logits: np.ndarray) -> dict:
        out = {"logits": put(f"{prefix}_logits.oodm", logits)}
        if feats is not None:
            out["features"] = put(f"{prefix}_features.oodm", feats)
        return out

    doc: dict = {
        "id_train": entry("id_train", train_features, train_logits),
        "id_test": entry("id_test", test_features, test_logits),
    }
    doc["id_train"]["labels"] = put("id_train_labels.oodm", np.asarray(labels, dtype=np.uint32))
    doc["ood"] = {}
    for i, name in enumerate(sorted(ood)):
        feats, logits = ood[name]
        doc["ood"][name] = entry(f"ood/{i:04d}", feats, logits)
    if weights is not None:
        doc["last_layer"] = {"weights": put("last_layer_weights.oodm", weights), "bias": put("last_layer_bias.oodm", bias)}
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps(doc, indent=2) + "\n")
    return manifest
