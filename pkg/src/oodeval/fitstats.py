"""Train-set statistics for all detectors.

All sums over samples go through :func:`oodeval.parallel.chunked_sum`, so a
fit is bit-identical regardless of the worker count.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import parallel
from .errors import DataError, DegenerateError, FormatError

logger = logging.getLogger(__name__)

PINV_EPS = 1e-10
REACT_PERCENTILE = 99.0
DEFAULT_KNN_K = 1000


@dataclass(frozen=True)
class VimState:
    offset: np.ndarray  # u, shape (d,)
    principal_basis: np.ndarray  # (d, D), orthonormal columns
    alpha: float

    @property
    def dim(self) -> int:
        return self.principal_basis.shape[1]


@dataclass(frozen=True)
class KLRefs:
    refs: np.ndarray  # (K_present, C), rows on the simplex
    class_index: np.ndarray  # (K_present,), original class of each row


@dataclass(frozen=True)
class KnnIndex:
    normalized: np.ndarray  # (N_tr, d)
    k: int


@dataclass(frozen=True)
class FittedState:
    """Immutable bundle of every fitted detector statistic.

    Feature-based fields are ``None`` for logits-only bundles.
    """

    num_classes: int
    kl_refs: KLRefs
    class_means: np.ndarray | None = None
    shared_cov_pinv: np.ndarray | None = None
    global_mean: np.ndarray | None = None
    global_cov_pinv: np.ndarray | None = None
    vim: VimState | None = None
    react_r: float | None = None
    knn_index: KnnIndex | None = None
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    kl_grouping: str = field(default="predicted")

    @property
    def has_features(self) -> bool:
        return self.class_means is not None

    @property
    def feature_dim(self) -> int | None:
        return None if self.class_means is None else self.class_means.shape[1]


def _f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def _column_sum(x: np.ndarray) -> np.ndarray:
    return parallel.chunked_sum(lambda a, b: x[a:b].sum(axis=0), x.shape[0])


def _scatter(x: np.ndarray) -> np.ndarray:
    """Sum of outer products ``sum_i x_i x_i^T``."""
    return parallel.chunked_sum(lambda a, b: x[a:b].T @ x[a:b], x.shape[0])


def symmetric_pinv(sigma: np.ndarray, eps: float = PINV_EPS) -> np.ndarray:
    """Pseudo-inverse of a symmetric PSD matrix via eigendecomposition.

    Eigenvalues below ``eps * max_eigenvalue`` (including negative ones from
    rounding) are treated as zero.
    """
    sigma = _f64(sigma)
    sigma = 0.5 * (sigma + sigma.T)
    vals, vecs = np.linalg.eigh(sigma)
    top = vals.max() if vals.size else 0.0
    if top <= 0.0:
        return np.zeros_like(sigma)
    keep = vals >= eps * top
    inv = (vecs[:, keep] / vals[keep]) @ vecs[:, keep].T
    return 0.5 * (inv + inv.T)


def fit_class_means(features, labels, num_classes: int) -> np.ndarray:
    h = _f64(features)
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=num_classes)
    empty = np.flatnonzero(counts[:num_classes] == 0)
    if empty.size:
        raise DataError(f"class {int(empty[0])} has no training samples")
    means = np.empty((num_classes, h.shape[1]))
    for c in range(num_classes):
        means[c] = _column_sum(h[labels == c]) / counts[c]
    return means


def class_covariance(features, labels, class_means) -> np.ndarray:
    """Shared within-class covariance with divisor N."""
    h = _f64(features)
    centered = h - np.asarray(class_means)[np.asarray(labels)]
    return _scatter(centered) / h.shape[0]


def fit_shared_covariance(features, labels, class_means) -> np.ndarray:
    return symmetric_pinv(class_covariance(features, labels, class_means))


def fit_global_gaussian(features) -> tuple[np.ndarray, np.ndarray]:
    h = _f64(features)
    n = h.shape[0]
    mean = _column_sum(h) / n
    cov = _scatter(h - mean) / n
    return mean, symmetric_pinv(cov)


def vim_dim(d: int) -> int:
    """Principal-space width used for a feature width ``d``."""
    if d >= 2048:
        return 1000
    if d >= 768:
        return 512
    return int(math.floor(d / 2 + 0.5))


def vim_offset(weights, bias) -> np.ndarray:
    """``u = -(W^T)^+ b`` with ``W`` of shape (d, C)."""
    return -(np.linalg.pinv(_f64(weights).T) @ _f64(bias))


def principal_basis(centered: np.ndarray, dim: int) -> np.ndarray:
    """Top-``dim`` eigenvectors of ``F^T F``; ties keep ascending eigh order."""
    gram = _scatter(centered)
    gram = 0.5 * (gram + gram.T)
    vals, vecs = np.linalg.eigh(gram)
    order = np.lexsort((np.arange(vals.size), -vals))
    return np.ascontiguousarray(vecs[:, order[:dim]])


def residual_norms(centered: np.ndarray, basis: np.ndarray) -> np.ndarray:
    residual = centered - (centered @ basis) @ basis.T
    return np.sqrt(np.einsum("ij,ij->i", residual, residual))


def fit_vim(features, logits, weights, bias, dim: int | None = None) -> VimState:
    h = _f64(features)
    n, d = h.shape
    dim = vim_dim(d) if dim is None else dim
    if not 0 <= dim <= d:
        raise DataError(f"ViM principal dimension {dim} outside [0, {d}]")
    if n < dim:
        raise DataError(f"ViM needs at least D={dim} train samples, got {n}")
    u = vim_offset(weights, bias)
    centered = h - u
    basis = principal_basis(centered, dim)
    norms = residual_norms(centered, basis)
    norm_total = float(_column_sum(norms[:, None])[0])
    if norm_total == 0.0:
        raise DegenerateError("degenerate residual space: every train residual is zero, alpha undefined")
    max_logit_total = float(_column_sum(_f64(logits).max(axis=1)[:, None])[0])
    alpha = max_logit_total / norm_total
    if not (alpha > 0.0 and math.isfinite(alpha)):
        raise DegenerateError(f"ViM alpha must be positive and finite, got {alpha!r}")
    return VimState(offset=u, principal_basis=basis, alpha=alpha)


def fit_react_threshold(features) -> float:
    flat = np.asarray(features, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise DataError("ReAct threshold needs at least one feature value")
    return float(np.percentile(flat, REACT_PERCENTILE, method="linear"))


def softmax(logits) -> np.ndarray:
    o = _f64(logits)
    z = np.exp(o - o.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def fit_kl_refs(train_logits, labels=None, grouping: str = "predicted") -> KLRefs:
    """Mean softmax vector per class.

    ``grouping="predicted"`` groups rows by argmax of the logits (ties go to
    the lowest index); ``"label"`` groups by the given true labels. Classes
    without rows are left out.
    """
    p = softmax(train_logits)
    C = p.shape[1]
    if grouping == "predicted":
        group = np.asarray(train_logits).argmax(axis=1)
    elif grouping == "label":
        if labels is None:
            raise DataError("label grouping requires labels")
        group = np.asarray(labels)
    else:
        raise DataError(f"unknown KL grouping {grouping!r}")
    rows, present = [], []
    for c in range(C):
        members = p[group == c]
        if members.shape[0]:
            rows.append(_column_sum(members) / members.shape[0])
            present.append(c)
    return KLRefs(refs=np.array(rows).reshape(-1, C), class_index=np.array(present, dtype=np.int64))


def normalize_rows(x) -> np.ndarray:
    x = _f64(x)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))[:, None]
    out = np.zeros_like(x)
    np.divide(x, norms, out=out, where=norms > 0)
    return out


def build_knn_index(features, k_requested: int = DEFAULT_KNN_K) -> KnnIndex:
    if k_requested < 1:
        raise DataError(f"KNN K must be >= 1, got {k_requested}")
    z = normalize_rows(features)
    if z.shape[0] == 0:
        raise DataError("KNN index needs at least one train sample")
    return KnnIndex(normalized=z, k=min(k_requested, z.shape[0]))


def fit_state(
    bundle,
    *,
    knn_k: int = DEFAULT_KNN_K,
    kl_grouping: str = "predicted",
    vim_dim_override: int | None = None,
) -> FittedState:
    """Fit every statistic applicable to ``bundle`` (an :class:`EvalBundle`)."""
    train = bundle.id_train
    C = train.logits.shape[1]
    kl = fit_kl_refs(train.logits, bundle.labels, kl_grouping)
    if train.features is None:
        return FittedState(num_classes=C, kl_refs=kl, kl_grouping=kl_grouping)
    h = _f64(train.features)
    means = fit_class_means(h, bundle.labels, C)
    shared = fit_shared_covariance(h, bundle.labels, means)
    g_mean, g_pinv = fit_global_gaussian(h)
    vim = fit_vim(h, train.logits, bundle.weights, bundle.bias, vim_dim_override)
    logger.info("fitted ViM with D=%d alpha=%.6g", vim.dim, vim.alpha)
    return FittedState(
        num_classes=C,
        kl_refs=kl,
        class_means=means,
        shared_cov_pinv=shared,
        global_mean=g_mean,
        global_cov_pinv=g_pinv,
        vim=vim,
        react_r=fit_react_threshold(train.features),
        knn_index=build_knn_index(h, knn_k),
        weights=_f64(bundle.weights),
        bias=_f64(bundle.bias),
        kl_grouping=kl_grouping,
    )


def with_knn_k(state: FittedState, k_requested: int) -> FittedState:
    if state.knn_index is None:
        return state
    z = state.knn_index.normalized
    return replace(state, knn_index=KnnIndex(normalized=z, k=min(k_requested, z.shape[0])))


# --- serialization -----------------------------------------------------------
#
# Layout: b"OODS" | u16 version | u64 header length | UTF-8 JSON header |
# payload of little-endian f64/i64 arrays, concatenated in header order.

STATE_MAGIC = b"OODS"
STATE_VERSION = 1
_PREFIX = struct.Struct("<4sHQ")

_ARRAY_FIELDS = (
    "class_means",
    "shared_cov_pinv",
    "global_mean",
    "global_cov_pinv",
    "weights",
    "bias",
)


def _flatten(state: FittedState) -> tuple[dict, dict[str, np.ndarray]]:
    scalars: dict = {"num_classes": state.num_classes, "kl_grouping": state.kl_grouping}
    arrays: dict[str, np.ndarray] = {
        "kl_refs.refs": state.kl_refs.refs,
        "kl_refs.class_index": state.kl_refs.class_index,
    }
    for name in _ARRAY_FIELDS:
        value = getattr(state, name)
        if value is not None:
            arrays[name] = value
    if state.vim is not None:
        arrays["vim.offset"] = state.vim.offset
        arrays["vim.principal_basis"] = state.vim.principal_basis
        scalars["vim.alpha"] = state.vim.alpha.hex()
    if state.react_r is not None:
        scalars["react_r"] = float(state.react_r).hex()
    if state.knn_index is not None:
        arrays["knn.normalized"] = state.knn_index.normalized
        scalars["knn.k"] = state.knn_index.k
    return scalars, arrays


def save_state(path: str | Path, state: FittedState) -> None:
    scalars, arrays = _flatten(state)
    entries, blobs = [], []
    for name, arr in arrays.items():
        kind = "i8" if arr.dtype.kind in "iu" else "f8"
        data = np.ascontiguousarray(arr, dtype="<" + kind)
        entries.append({"name": name, "dtype": kind, "shape": list(data.shape)})
        blobs.append(data.tobytes())
    header = json.dumps({"scalars": scalars, "arrays": entries}, sort_keys=True).encode()
    Path(path).write_bytes(_PREFIX.pack(STATE_MAGIC, STATE_VERSION, len(header)) + header + b"".join(blobs))


def load_state(path: str | Path) -> FittedState:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read state file {path}: {exc}") from exc
    if len(buf) < _PREFIX.size:
        raise FormatError(f"{path}: truncated state file")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != STATE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != STATE_VERSION:
        raise FormatError(f"{path}: unsupported state version {version}")
    try:
        header = json.loads(buf[_PREFIX.size:_PREFIX.size + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    offset = _PREFIX.size + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        dtype = np.dtype("<" + entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(buf):
            raise FormatError(f"{path}: truncated payload in {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(buf):
        raise FormatError(f"{path}: trailing bytes")
    s = header["scalars"]
    kwargs = {name: arrays.get(name) for name in _ARRAY_FIELDS}
    if "vim.offset" in arrays:
        kwargs["vim"] = VimState(
            offset=arrays["vim.offset"],
            principal_basis=arrays["vim.principal_basis"],
            alpha=float.fromhex(s["vim.alpha"]),
        )
    if "react_r" in s:
        kwargs["react_r"] = float.fromhex(s["react_r"])
    if "knn.normalized" in arrays:
        kwargs["knn_index"] = KnnIndex(normalized=arrays["knn.normalized"], k=int(s["knn.k"]))
    return FittedState(
        num_classes=int(s["num_classes"]),
        kl_refs=KLRefs(refs=arrays["kl_refs.refs"], class_index=arrays["kl_refs.class_index"]),
        kl_grouping=s["kl_grouping"],
        **kwargs,
    )


def states_equal(a: FittedState, b: FittedState) -> bool:
    """Exact field-by-field equality (arrays compared bit-for-bit)."""
    fa, fb = _flatten(a), _flatten(b)
    if fa[0] != fb[0] or fa[1].keys() != fb[1].keys():
        return False
    return all(
        x.dtype == fb[1][k].dtype and x.shape == fb[1][k].shape and x.tobytes() == fb[1][k].tobytes()
        for k, x in fa[1].items()
    )


__all__ = [
    "FittedState",
    "KLRefs",
    "KnnIndex",
    "VimState",
    "build_knn_index",
    "fit_class_means",
    "fit_global_gaussian",
    "fit_kl_refs",
    "fit_react_threshold",
    "fit_shared_covariance",
    "fit_state",
    "fit_vim",
    "load_state",
    "save_state",
    "symmetric_pinv",
    "vim_dim",
]
