"""``frailrisk`` command line: fit, select, predict, simulate.

Each command writes its outputs into ``--out`` (a directory) together with a
``manifest.json`` listing inputs and outputs with SHA-256 digests.  The thread
count for likelihood evaluation comes from ``FRAILRISK_THREADS``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from . import __version__
from .cohort import CohortError, CovariateSchema, DesignError, ModelSpec, Term, ingest_csv
from .inference import (
    FitConfig,
    FitResult,
    NotConvergedError,
    coefficient_report,
    fit_model,
    generalized_r2,
    stepwise_select,
)
from .likelihood import LikelihoodError, QuadratureOrderError, default_threads
from .optimizer import OptimizationError
from .prediction import (
    classify_risk,
    cohort_risk_summary,
    parse_classify,
    predict_cohort,
    write_predictions_csv,
    write_predictions_json,
)
from .simulate import ScenarioError, SimScenario, generate_cohort, write_outputs

log = logging.getLogger("frailrisk")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NOT_CONVERGED = 4


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def digest_config(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    config_digest: str = ""
    seed: int | None = None
    tool_version: str = __version__
    threads: int = 1
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def add_input(self, path: str | Path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path: str | Path) -> None:
        self.outputs[str(path)] = sha256_file(path)

    def verify(self) -> list[str]:
        """Paths whose current digest differs from the recorded one."""
        bad = []
        for group in (self.inputs, self.outputs):
            for path, digest in group.items():
                if not Path(path).exists() or sha256_file(path) != digest:
                    bad.append(path)
        if digest_config(self.config) != self.config_digest:
            bad.append("<config>")
        return bad

    def write(self, path: str | Path) -> None:
        self.config_digest = digest_config(self.config)
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _write_text(path: Path, text: str, manifest: RunManifest) -> None:
    path.write_text(text, encoding="utf-8")
    manifest.add_output(path)


def _load_schema(args, spec_doc: dict | None) -> CovariateSchema:
    if getattr(args, "schema", None):
        return CovariateSchema.load(args.schema)
    if spec_doc and "covariates" in spec_doc:
        return CovariateSchema.from_dict(spec_doc["covariates"])
    sidecar = Path(args.data).with_suffix(".schema.json")
    if sidecar.exists():
        return CovariateSchema.load(sidecar)
    return CovariateSchema()


def _schema_path(args) -> Path | None:
    if getattr(args, "schema", None):
        return Path(args.schema)
    sidecar = Path(args.data).with_suffix(".schema.json")
    return sidecar if sidecar.exists() else None


def _quadrature(text: str) -> int | str:
    if text == "auto":
        return text
    try:
        q = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"quadrature must be an integer or 'auto', got {text!r}") from None
    if q < 1:
        raise argparse.ArgumentTypeError("quadrature order must be positive")
    return q


def _fit_config(args) -> FitConfig:
    return FitConfig(quadrature=args.quadrature, r2_n=args.r2_n)


def _write_fit(fit: FitResult, out: Path, manifest: RunManifest, trace: bool) -> None:
    fit.save(out / "fit.json")
    manifest.add_output(out / "fit.json")
    if trace and fit.trace is not None:
        _write_text(out / "trace.json", fit.trace.to_json(indent=2) + "\n", manifest)
    if fit.converged:
        report = coefficient_report(fit)
        lines = [report.to_text()]
        lines.append(f"Log-likelihood        {fit.loglik:.6f}")
        if fit.null_loglik is not None:
            lines.append(f"Null log-likelihood   {fit.null_loglik:.6f}")
            lines.append(f"Generalized R-square  {generalized_r2(fit):.4f}  (n={fit.n})")
        lines.append(f"Quadrature points     {fit.quadrature_order}")
        lines.append(f"Max |gradient|        {fit.max_abs_gradient:.3e}")
        _write_text(out / "report.txt", "\n".join(lines) + "\n", manifest)
        _write_text(out / "report.json", report.to_json(indent=2) + "\n", manifest)


def cmd_fit(args, manifest: RunManifest) -> int:
    out = Path(args.out)
    spec_doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    spec = ModelSpec.from_dict(spec_doc)
    schema = _load_schema(args, spec_doc)
    cohort = ingest_csv(args.data, schema, censor_at_30=args.censor_at_30)
    for p in (args.data, args.spec, _schema_path(args)):
        if p is not None:
            manifest.add_input(p)
    fit = fit_model(cohort, spec, _fit_config(args))
    manifest.config["quadrature_order"] = fit.quadrature_order
    _write_fit(fit, out, manifest, args.trace)
    if not fit.converged:
        if fit.trace is not None and not args.trace:
            _write_text(out / "trace.json", fit.trace.to_json(indent=2) + "\n", manifest)
        log.error("fit did not converge (%s); trace kept in %s", fit.termination, out / "trace.json")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _read_candidates(path: str) -> list[str]:
    text = Path(path).read_text(encoding="utf-8").strip()
    if not text:
        return []
    if text.startswith("[") or text.startswith("{"):
        doc = json.loads(text)
        items = doc.get("terms", []) if isinstance(doc, dict) else doc
        return [t if isinstance(t, str) else ":".join(t) for t in items]
    return [line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")]


def cmd_select(args, manifest: RunManifest) -> int:
    if not args.enter < args.remove:
        raise argparse.ArgumentTypeError(f"--enter ({args.enter}) must be smaller than --remove ({args.remove})")
    out = Path(args.out)
    spec_doc = json.loads(Path(args.spec).read_text(encoding="utf-8")) if args.spec else {}
    base = ModelSpec.from_dict(spec_doc) if args.spec else ModelSpec(family=args.family)
    schema = _load_schema(args, spec_doc)
    cohort = ingest_csv(args.data, schema, censor_at_30=args.censor_at_30)
    candidates = [Term.parse(t) for t in _read_candidates(args.candidates)]
    for p in (args.data, args.candidates, args.spec, _schema_path(args)):
        if p is not None:
            manifest.add_input(p)
    final, trace, _ = stepwise_select(cohort, candidates, args.enter, args.remove, base, _fit_config(args))
    _write_text(out / "selection.json", trace.to_json(indent=2) + "\n", manifest)
    _write_text(out / "final_spec.json", json.dumps(final.to_dict(), indent=2) + "\n", manifest)
    fit = fit_model(cohort, final, _fit_config(args))
    _write_fit(fit, out, manifest, args.trace)
    return EXIT_OK if fit.converged else EXIT_NOT_CONVERGED


def cmd_predict(args, manifest: RunManifest) -> int:
    out = Path(args.out)
    fit = FitResult.load(args.fit)
    cohort = ingest_csv(args.data, fit.schema, censor_at_30=fit.censor_at_window)
    manifest.add_input(args.data)
    manifest.add_input(args.fit)
    times = [float(t) for t in args.times.split(",") if t.strip()]
    preds = predict_cohort(fit, cohort.subjects, times)
    labels = None
    if args.classify:
        labels = classify_risk(preds, eval_time=args.eval_time, **parse_classify(args.classify))
    write_predictions_csv(preds, out / "predictions.csv", labels)
    manifest.add_output(out / "predictions.csv")
    write_predictions_json(preds, out / "predictions.json")
    manifest.add_output(out / "predictions.json")
    summary = cohort_risk_summary(preds, args.eval_time)
    _write_text(out / "summary.json", summary.to_json(indent=2) + "\n", manifest)
    _write_text(out / "summary.txt", summary.to_text(), manifest)
    return EXIT_OK


def cmd_simulate(args, manifest: RunManifest) -> int:
    out = Path(args.out)
    if args.scenario:
        scenario = SimScenario.load(args.scenario)
        manifest.add_input(args.scenario)
    else:
        scenario = SimScenario.reference()
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    if args.n_subjects is not None:
        scenario = SimScenario.from_dict({**scenario.to_dict(), "n_subjects": args.n_subjects})
    manifest.seed = scenario.seed
    manifest.config["scenario"] = scenario.to_dict()
    cohort, truth = generate_cohort(scenario)
    csv_path = out / "cohort.csv"
    sidecar = write_outputs(cohort, truth, csv_path)
    for p in (csv_path, sidecar, csv_path.with_suffix(".schema.json")):
        manifest.add_output(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="frailrisk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p, spec_required: bool):
        p.add_argument("--data", required=True, help="spell-per-row CSV")
        p.add_argument("--spec", required=spec_required, help="model spec JSON")
        p.add_argument("--schema", help="covariate schema JSON (default: <data>.schema.json)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--quadrature", type=_quadrature, default="auto", help="order or 'auto' (default)")
        p.add_argument("--censor-at-30", action="store_true", help="treat censored spells as ending at day 30")
        p.add_argument("--r2-n", choices=("spells", "subjects"), default="spells")
        p.add_argument("--trace", action="store_true", help="write the optimizer trace")

    p = sub.add_parser("fit", help="fit a model")
    data_args(p, True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="stepwise selection")
    data_args(p, False)
    p.add_argument("--candidates", required=True, help="JSON list or one term per line")
    p.add_argument("--enter", type=float, default=0.10)
    p.add_argument("--remove", type=float, default=0.15)
    p.add_argument("--family", choices=("weibull", "exponential"), default="weibull")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("predict", help="empirical-Bayes risk predictions")
    p.add_argument("--data", required=True)
    p.add_argument("--fit", required=True, help="fit.json from 'frailrisk fit'")
    p.add_argument("--times", default="30", help="comma-separated evaluation times")
    p.add_argument("--eval-time", type=float, default=30.0, help="time used for summaries and classes")
    p.add_argument("--classify", help="'q0.9' for a quantile cutoff or a number for an absolute hazard")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="generate a synthetic cohort")
    p.add_argument("--scenario", help="scenario JSON (default: built-in reference scenario)")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-subjects", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {k: v for k, v in vars(args).items() if k not in ("func", "verbose", "out")}
    manifest = RunManifest(args.command, argv, config, threads=default_threads())
    started = time.time()
    try:
        code = args.func(args, manifest)
    except (CohortError, DesignError, ScenarioError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"frailrisk {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except argparse.ArgumentTypeError as exc:
        parser.error(str(exc))
    except (LikelihoodError, OptimizationError, QuadratureOrderError, NotConvergedError) as exc:
        print(f"frailrisk {args.command}: {exc}", file=sys.stderr)
        code = EXIT_NOT_CONVERGED
    manifest.timings = {"started": started, "elapsed_seconds": time.time() - started}
    manifest.write(out / "manifest.json")
    return code


if __name__ == "__main__":
    sys.exit(main())
