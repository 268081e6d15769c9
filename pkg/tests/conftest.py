from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from oodeval.arraystore import EvalBundle, SampleSet, save_bundle

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_log():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@dataclass
class SyntheticData:
    train_features: np.ndarray
    train_logits: np.ndarray
    labels: np.ndarray
    test_features: np.ndarray
    test_logits: np.ndarray
    ood: dict[str, tuple[np.ndarray, np.ndarray]]
    weights: np.ndarray
    bias: np.ndarray

    def bundle(self) -> EvalBundle:
        return EvalBundle(
            id_train=SampleSet(self.train_logits, self.train_features),
            labels=self.labels,
            id_test=SampleSet(self.test_logits, self.test_features),
            ood_sets={k: SampleSet(v[1], v[0]) for k, v in sorted(self.ood.items())},
            weights=self.weights,
            bias=self.bias,
        )

    def save(self, directory) -> "Path":
        return save_bundle(
            directory,
            train_features=self.train_features,
            train_logits=self.train_logits,
            labels=self.labels,
            test_features=self.test_features,
            test_logits=self.test_logits,
            ood=self.ood,
            weights=self.weights,
            bias=self.bias,
        )


def make_synthetic(
    seed: int,
    *,
    n_train: int = 300,
    n_test: int = 100,
    d: int = 8,
    C: int = 3,
    ood_sizes: dict[str, int] | None = None,
    ood_shift: float = 2.0,
) -> SyntheticData:
    """Class-clustered features with logits exactly ``h @ W + b`` (rounded to f32)."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 2.0, size=(C, d))
    weights = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, C)).astype(np.float32)
    bias = rng.normal(0.0, 0.5, size=C).astype(np.float32)
    # logits are centred on class centres, so make the right class win on average
    weights += (centers / np.linalg.norm(centers, axis=1, keepdims=True)).T.astype(np.float32)

    def sample(n: int, shift: float = 0.0):
        lab = rng.integers(0, C, size=n)
        lab[:C] = np.arange(C)[: min(C, n)]
        h = centers[lab] + rng.normal(size=(n, d)) + shift
        h = h.astype(np.float32)
        logits = (h.astype(np.float64) @ weights.astype(np.float64) + bias).astype(np.float32)
        return h, logits, lab

    h_tr, o_tr, y_tr = sample(n_train)
    h_te, o_te, _ = sample(n_test)
    ood_sizes = ood_sizes or {"far": 60, "near": 40}
    ood = {}
    for i, (name, n) in enumerate(sorted(ood_sizes.items())):
        h, o, _ = sample(n, shift=ood_shift * (i + 1))
        ood[name] = (h, o)
    return SyntheticData(h_tr, o_tr, y_tr.astype(np.uint32), h_te, o_te, ood, weights, bias)


@pytest.fixture
def synthetic():
    return make_synthetic(0)
