"""Per-sample OOD scores. Higher means more in-distribution.

Every scorer works in float64 and is row-wise, so callers may split inputs
at any row boundary. :func:`score_method` does that with fixed chunks via
:mod:`oodeval.parallel`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import parallel
from .errors import DataError, DegenerateError
from .fitstats import FittedState, KLRefs, KnnIndex, VimState, normalize_rows, softmax

# Bound on the (queries x train x d) block materialized by exact KNN.
_KNN_BLOCK = 1 << 22


@dataclass(frozen=True)
class ScoreVector:
    method: str
    set_name: str
    values: np.ndarray

    def __len__(self) -> int:
        return self.values.shape[0]


def _f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def logsumexp(o: np.ndarray) -> np.ndarray:
    m = o.max(axis=-1)
    return m + np.log(np.exp(o - m[..., None]).sum(axis=-1))


def _log_softmax(o: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, accurate to a few ulps even when one class dominates."""
    top = o.argmax(axis=-1)
    z = o - np.take_along_axis(o, top[:, None], axis=-1)
    rest = np.exp(z)
    np.put_along_axis(rest, top[:, None], 0.0, axis=-1)
    return z - np.log1p(rest.sum(axis=-1))[:, None]


def score_msp(logits) -> np.ndarray:
    return softmax(logits).max(axis=-1)


def score_maxlogit(logits) -> np.ndarray:
    return _f64(logits).max(axis=-1)


def score_energy(logits) -> np.ndarray:
    return logsumexp(_f64(logits))


def score_kl_matching(logits, kl_refs: KLRefs) -> np.ndarray:
    """Negative KL divergence from the softmax to the closest class reference."""
    log_p = _log_softmax(_f64(logits))
    p = np.exp(log_p)
    refs = _f64(kl_refs.refs)
    if refs.shape[0] == 0:
        raise DegenerateError("KL-matching has no reference distributions")
    # KL[p||d_c] = sum_k p_k (log p_k - log d_ck), with 0 log 0 = 0. For confident
    # predictions KL is tiny while p_max is within an ulp of 1, so log p_max has to
    # come from the logits rather than from the rounded probability.
    with np.errstate(divide="ignore", invalid="ignore"):
        log_d = np.log(refs)
        kl = np.empty((p.shape[0], refs.shape[0]))
        for j in range(refs.shape[0]):
            kl[:, j] = np.where(p > 0, p * (log_p - log_d[j]), 0.0).sum(axis=1)
    best = kl.min(axis=1)
    if not np.all(np.isfinite(best)):
        raise DegenerateError("KL divergence is infinite for every reference class")
    return -best


def _min_quadratic(h: np.ndarray, centers: np.ndarray, precision: np.ndarray) -> np.ndarray:
    best = np.full(h.shape[0], np.inf)
    for mu in centers:
        diff = h - mu
        np.minimum(best, np.einsum("ij,ij->i", diff @ precision, diff), out=best)
    return best


def score_mahalanobis(features, class_means, shared_cov_pinv) -> np.ndarray:
    return -_min_quadratic(_f64(features), _f64(class_means), _f64(shared_cov_pinv))


def score_rel_mahalanobis(features, state: FittedState) -> np.ndarray:
    h = _f64(features)
    diff = h - state.global_mean
    global_term = np.einsum("ij,ij->i", diff @ state.global_cov_pinv, diff)
    best = np.full(h.shape[0], np.inf)
    for mu in state.class_means:
        d = h - mu
        np.minimum(best, np.einsum("ij,ij->i", d @ state.shared_cov_pinv, d) - global_term, out=best)
    return -best


def score_react_energy(features, weights, bias, react_r: float) -> np.ndarray:
    clipped = np.minimum(_f64(features), react_r)
    return logsumexp(clipped @ _f64(weights) + _f64(bias))


def vim_residual_norm(features, vim: VimState) -> np.ndarray:
    centered = _f64(features) - vim.offset
    basis = vim.principal_basis
    residual = centered - (centered @ basis) @ basis.T
    return np.sqrt(np.einsum("ij,ij->i", residual, residual))


def score_vim(features, logits, vim: VimState) -> np.ndarray:
    """Minus the softmax probability of the virtual logit."""
    virtual = vim.alpha * vim_residual_norm(features, vim)
    extended = np.concatenate([_f64(logits), virtual[:, None]], axis=1)
    m = extended.max(axis=1, keepdims=True)
    e = np.exp(extended - m)
    return -e[:, -1] / e.sum(axis=1)


def score_knn(features, knn_index: KnnIndex) -> np.ndarray:
    """Minus the exact K-th smallest distance between normalized features."""
    z = normalize_rows(features)
    train = knn_index.normalized
    k = knn_index.k
    n_train, d = train.shape
    step = max(1, _KNN_BLOCK // max(1, n_train * d))
    out = np.empty(z.shape[0])
    for start in range(0, z.shape[0], step):
        q = z[start:start + step]
        diff = q[:, None, :] - train[None, :, :]
        dist = np.sqrt(np.einsum("qnd,qnd->qn", diff, diff))
        out[start:start + step] = np.partition(dist, k - 1, axis=1)[:, k - 1]
    return -out


def cosine_similarities(features, concept_vectors) -> np.ndarray:
    """Cosine similarity matrix (n, C); zero-norm rows give similarity 0."""
    return normalize_rows(features) @ normalize_rows(concept_vectors).T


def score_cosine(features, concept_vectors) -> np.ndarray:
    return cosine_similarities(features, concept_vectors).max(axis=1)


def score_rcos_mcm(features, concept_vectors) -> np.ndarray:
    return softmax(cosine_similarities(features, concept_vectors)).max(axis=1)


@dataclass(frozen=True)
class Method:
    id: str
    label: str
    needs_features: bool
    fn: Callable[[np.ndarray | None, np.ndarray, FittedState], np.ndarray]


METHODS: dict[str, Method] = {
    m.id: m
    for m in (
        Method("msp", "MSP", False, lambda h, o, s: score_msp(o)),
        Method("maxlogit", "MaxLogit", False, lambda h, o, s: score_maxlogit(o)),
        Method("energy", "Energy", False, lambda h, o, s: score_energy(o)),
        Method("kl_matching", "KL-Matching", False, lambda h, o, s: score_kl_matching(o, s.kl_refs)),
        Method(
            "mahalanobis", "Maha", True, lambda h, o, s: score_mahalanobis(h, s.class_means, s.shared_cov_pinv)
        ),
        Method("rel_mahalanobis", "RMaha", True, lambda h, o, s: score_rel_mahalanobis(h, s)),
        Method("react", "Energy+ReAct", True, lambda h, o, s: score_react_energy(h, s.weights, s.bias, s.react_r)),
        Method("vim", "ViM", True, lambda h, o, s: score_vim(h, o, s.vim)),
        Method("knn", "KNN", True, lambda h, o, s: score_knn(h, s.knn_index)),
        Method("cosine", "Cosine", True, lambda h, o, s: score_cosine(h, s.class_means)),
        Method("rcos", "MCM/RCos", True, lambda h, o, s: score_rcos_mcm(h, s.class_means)),
    )
}


def applicable_methods(state: FittedState) -> list[str]:
    return [m.id for m in METHODS.values() if state.has_features or not m.needs_features]


def score_method(method: str, features, logits, state: FittedState, set_name: str = "") -> ScoreVector:
    """Score one sample set with one method, in fixed row chunks."""
    try:
        spec = METHODS[method]
    except KeyError:
        raise DataError(f"unknown method id {method!r}; choose from {', '.join(METHODS)}") from None
    logits = _f64(logits)
    if logits.ndim != 2 or logits.shape[1] != state.num_classes:
        raise DataError(f"{set_name or 'input'}: expected {state.num_classes} logit columns, got {logits.shape}")
    if spec.needs_features:
        if features is None or not state.has_features:
            raise DataError(f"method {method!r} requires features, but the bundle is logits-only")
        features = _f64(features)
        if features.shape != (logits.shape[0], state.feature_dim):
            raise DataError(
                f"{set_name or 'input'}: expected features of shape ({logits.shape[0]}, {state.feature_dim}), "
                f"got {features.shape}"
            )
        values = parallel.map_rows(lambda h, o: spec.fn(h, o, state), [features, logits])
    else:
        values = parallel.map_rows(lambda o: spec.fn(None, o, state), [logits])
    if not np.all(np.isfinite(values)):
        raise DegenerateError(f"method {method!r} produced non-finite scores on {set_name or 'input'}")
    return ScoreVector(method=method, set_name=set_name, values=values)
