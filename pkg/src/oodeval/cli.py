"""Command-line interface: ``oodeval {fit,score,eval,gen-unittests,report}``.

Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric degeneracy. Outputs are
assembled completely before anything is written, so a failing command
leaves no partial files behind.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import __version__
from .arraystore import EvalBundle, encode_matrix, load_bundle
from .detectors import METHODS, applicable_methods, score_method
from .errors import DataError, DegenerateError
from .fitstats import DEFAULT_KNN_K, FittedState, fit_state, load_state, save_state, with_knn_k
from .metrics import DEFAULT_FAIL_THRESHOLD, DEFAULT_TPR_Q, UNITTEST_PREFIX, EvalReport, per_class_report
from .report import (
    cdf_csv,
    grid_csv,
    grid_markdown,
    per_class_csv,
    report_from_dict,
    report_to_json,
    summary_csv,
    summary_json,
    summary_markdown,
)
from .unitgen import RECIPES, RecipeSpec, generate_suite

logger = logging.getLogger("oodeval")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DEGENERATE = 0, 2, 3, 4


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    bundle_path: Path
    methods: list[str] | None = None
    tpr_q: float = DEFAULT_TPR_Q
    unit_fail_threshold: float = DEFAULT_FAIL_THRESHOLD
    knn_k: int = DEFAULT_KNN_K
    kl_grouping: str = "predicted"
    state_path: Path | None = None
    out_dir: Path = field(default_factory=lambda: Path("."))
    format: str = "json"

    def validate(self) -> None:
        if not 0.0 < self.tpr_q <= 1.0:
            raise UsageError(f"--tpr-q must be in (0, 1], got {self.tpr_q}")
        if not 0.0 <= self.unit_fail_threshold <= 1.0:
            raise UsageError(f"--unit-fail-threshold must be in [0, 1], got {self.unit_fail_threshold}")
        if self.knn_k < 1:
            raise UsageError(f"--knn-k must be >= 1, got {self.knn_k}")
        if self.methods is not None:
            unknown = [m for m in self.methods if m not in METHODS]
            if unknown:
                raise UsageError(f"unknown method id(s): {', '.join(unknown)}; choose from {', '.join(METHODS)}")


def _write_outputs(out_dir: Path, files: dict[str, bytes]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for rel, blob in files.items():
        target = out_dir / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(blob)


def _prepare(config: RunConfig) -> tuple[EvalBundle, FittedState, list[str]]:
    config.validate()
    bundle = load_bundle(config.bundle_path)
    if config.state_path is not None:
        state = with_knn_k(load_state(config.state_path), config.knn_k)
        if state.num_classes != bundle.num_classes or state.feature_dim != bundle.feature_dim:
            raise DataError("state file does not match the bundle's dimensions")
    else:
        state = fit_state(bundle, knn_k=config.knn_k, kl_grouping=config.kl_grouping)
    if config.methods is None:
        methods = applicable_methods(state)
    else:
        methods = list(dict.fromkeys(config.methods))
        needs = [m for m in methods if METHODS[m].needs_features]
        if needs and not state.has_features:
            raise DataError(f"method(s) {', '.join(needs)} require features, but the bundle is logits-only")
    return bundle, state, methods


def cmd_fit(config: RunConfig, out_path: Path) -> FittedState:
    config.validate()
    bundle = load_bundle(config.bundle_path)
    state = fit_state(bundle, knn_k=config.knn_k, kl_grouping=config.kl_grouping)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_state(out_path, state)
    print(f"classes C={state.num_classes}")
    if state.has_features:
        print(f"features d={state.feature_dim}")
        print(f"ViM D={state.vim.dim} alpha={state.vim.alpha:.6g}")
        print(f"ReAct r={state.react_r:.6g}")
        print(f"KNN K={state.knn_index.k}")
    else:
        print("logits-only bundle: feature-based statistics skipped")
    print(f"wrote {out_path}")
    return state


def _set_items(bundle: EvalBundle):
    yield "id_test", bundle.id_test
    yield from bundle.ood_sets.items()


def cmd_score(config: RunConfig) -> dict:
    bundle, state, methods = _prepare(config)
    files: dict[str, bytes] = {}
    index = []
    for method in methods:
        for i, (name, s) in enumerate(_set_items(bundle)):
            sv = score_method(method, s.features, s.logits, state, name)
            rel = f"scores/{method}/{i:04d}.oodm"
            files[rel] = encode_matrix(sv.values.reshape(-1, 1))
            index.append({"method": method, "set": name, "n": len(sv), "file": rel})
    doc = {"bundle": str(config.bundle_path), "entries": index}
    files["scores.json"] = (json.dumps(doc, indent=2) + "\n").encode()
    _write_outputs(config.out_dir, files)
    return doc


def evaluate(bundle: EvalBundle, state: FittedState, methods: Sequence[str], config: RunConfig) -> list[EvalReport]:
    natural = {k: v for k, v in bundle.ood_sets.items() if not k.startswith(UNITTEST_PREFIX)}
    units = {k[len(UNITTEST_PREFIX):]: v for k, v in bundle.ood_sets.items() if k.startswith(UNITTEST_PREFIX)}
    if not natural:
        raise DataError("at least one non-unit-test OOD set required")
    reports = []
    for method in methods:
        id_scores = score_method(method, bundle.id_test.features, bundle.id_test.logits, state, "id_test").values
        ood = {k: score_method(method, v.features, v.logits, state, k).values for k, v in natural.items()}
        unit = {k: score_method(method, v.features, v.logits, state, UNITTEST_PREFIX + k).values for k, v in units.items()}
        reports.append(
            per_class_report(
                id_scores,
                ood,
                config.tpr_q,
                method=method,
                unit_score_map=unit or None,
                fail_threshold=config.unit_fail_threshold,
            )
        )
    return reports


def cmd_eval(config: RunConfig) -> list[EvalReport]:
    bundle, state, methods = _prepare(config)
    reports = evaluate(bundle, state, methods, config)
    files: dict[str, bytes] = {}
    for r in reports:
        files[f"report_{r.method}.json"] = report_to_json(r).encode()
        if config.format == "csv":
            files[f"report_{r.method}_classes.csv"] = per_class_csv(r).encode()
            files[f"report_{r.method}_cdf.csv"] = cdf_csv(r).encode()
    summary = {"json": summary_json, "csv": summary_csv, "md": summary_markdown}[config.format](reports)
    files[f"summary.{config.format}"] = summary.encode()
    _write_outputs(config.out_dir, files)
    return reports


def cmd_gen_unittests(
    recipes: Sequence[str],
    out_dir: Path,
    *,
    count: int = 400,
    width: int = 224,
    height: int = 224,
    seed: int = 0,
    source_dir: Path | None = None,
) -> dict[str, dict]:
    specs = [RecipeSpec(r, width, height, count, seed, source_dir) for r in recipes]
    for spec in specs:
        spec.validate()
    created = not out_dir.exists()
    out_dir.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out_dir))
    try:
        manifests = {spec.name: generate_suite(spec, staging / spec.name) for spec in specs}
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        if created:
            shutil.rmtree(out_dir, ignore_errors=True)
        raise
    for spec in specs:
        target = out_dir / spec.name
        if target.exists():
            shutil.rmtree(target)
        (staging / spec.name).rename(target)
    shutil.rmtree(staging, ignore_errors=True)
    return manifests


def cmd_report(inputs: Sequence[tuple[str, Path]], fmt: str) -> str:
    grid: dict[str, list[EvalReport]] = {}
    for label, directory in inputs:
        paths = sorted(Path(directory).glob("report_*.json"))
        if not paths:
            raise DataError(f"no report_*.json files in {directory}")
        try:
            reports = [report_from_dict(json.loads(p.read_text())) for p in paths]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"malformed report in {directory}: {exc}") from exc
        order = list(METHODS)
        grid[label] = sorted(reports, key=lambda r: order.index(r.method) if r.method in order else len(order))
    return grid_markdown(grid) if fmt == "md" else grid_csv(grid)


# --- argument parsing ----------------------------------------------------------------


def _methods_arg(raw: str | None) -> list[str] | None:
    if raw is None or raw == "all":
        return None
    return [m.strip() for m in raw.split(",") if m.strip()]


def _recipes_arg(raw: str) -> list[str]:
    if raw == "all":
        return list(RECIPES)
    names = [r.strip() for r in raw.split(",") if r.strip()]
    unknown = [r for r in names if r not in RECIPES]
    if unknown:
        raise UsageError(f"unknown recipe(s): {', '.join(unknown)}; choose from {', '.join(RECIPES)}")
    return list(dict.fromkeys(names))


def _report_input(raw: str) -> tuple[str, Path]:
    label, sep, path = raw.partition("=")
    if not sep:
        return Path(raw).name, Path(raw)
    return label, Path(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oodeval", description="Fit, score and evaluate OOD detectors.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def bundle_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--bundle", required=True, type=Path, help="bundle manifest JSON")
        p.add_argument("--knn-k", type=int, default=DEFAULT_KNN_K)
        p.add_argument("--kl-grouping", choices=("predicted", "label"), default="predicted")

    p = sub.add_parser("fit", help="fit detector statistics and save them")
    bundle_args(p)
    p.add_argument("--out", required=True, type=Path, help="state file to write")

    for name, help_text in (("score", "write per-sample scores"), ("eval", "compute per-class reports")):
        p = sub.add_parser(name, help=help_text)
        bundle_args(p)
        p.add_argument("--state", type=Path, help="fitted state file (fit on the fly if omitted)")
        p.add_argument("--methods", default="all", help="comma-separated method ids or 'all'")
        p.add_argument("--out-dir", required=True, type=Path)
        if name == "eval":
            p.add_argument("--tpr-q", type=float, default=DEFAULT_TPR_Q)
            p.add_argument("--unit-fail-threshold", type=float, default=DEFAULT_FAIL_THRESHOLD)
            p.add_argument("--format", choices=("json", "csv", "md"), default="json")

    p = sub.add_parser("gen-unittests", help="generate synthetic OOD unit-test images")
    p.add_argument("--recipes", default="all", help="comma-separated recipe names or 'all'")
    p.add_argument("--count", type=int, default=400)
    p.add_argument("--width", type=int, default=224)
    p.add_argument("--height", type=int, default=224)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--source-dir", type=Path, help="images for the pixel-permutation recipes")
    p.add_argument("--out-dir", required=True, type=Path)

    p = sub.add_parser("report", help="combine eval outputs into a model x method table")
    p.add_argument("inputs", nargs="+", help="eval output directories, optionally as LABEL=DIR")
    p.add_argument("--format", choices=("md", "csv"), default="md")
    p.add_argument("--out", type=Path, help="write here instead of stdout")
    return parser


def _config(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        bundle_path=args.bundle,
        methods=_methods_arg(getattr(args, "methods", None)),
        tpr_q=getattr(args, "tpr_q", DEFAULT_TPR_Q),
        unit_fail_threshold=getattr(args, "unit_fail_threshold", DEFAULT_FAIL_THRESHOLD),
        knn_k=args.knn_k,
        kl_grouping=args.kl_grouping,
        state_path=getattr(args, "state", None),
        out_dir=getattr(args, "out_dir", Path(".")),
        format=getattr(args, "format", "json"),
    )


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "fit":
            cmd_fit(_config(args), args.out)
        elif args.command == "score":
            doc = cmd_score(_config(args))
            print(f"wrote {len(doc['entries'])} score vectors to {args.out_dir}")
        elif args.command == "eval":
            reports = cmd_eval(_config(args))
            print(summary_markdown(reports), end="")
        elif args.command == "gen-unittests":
            manifests = cmd_gen_unittests(
                _recipes_arg(args.recipes),
                args.out_dir,
                count=args.count,
                width=args.width,
                height=args.height,
                seed=args.seed,
                source_dir=args.source_dir,
            )
            print(f"wrote {len(manifests)} suites to {args.out_dir}")
        elif args.command == "report":
            text = cmd_report([_report_input(x) for x in args.inputs], args.format)
            if args.out is None:
                print(text, end="")
            else:
                args.out.write_text(text)
    except UsageError as exc:
        parser.error(str(exc))
    except DegenerateError as exc:
        print(f"oodeval: numeric degeneracy: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except DataError as exc:
        print(f"oodeval: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
