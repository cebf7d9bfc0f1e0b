"""``mvcrop`` command line: dataset tooling and experiment protocols.

Subcommands: ``synth`` (generate a synthetic dataset), ``import`` (CSV to
container), ``inspect-params`` (parameter counts vs. reference targets),
``entropy`` (spectral-entropy diagnostics), ``train`` (one cell), ``grid``
(full 31-cell protocol), ``search`` (reduced 16-cell protocol), and
``report`` (re-emit tables from a run directory).

Exit codes: 0 success, 1 validation error (bad flags, unreadable or invalid
configs and inputs), 2 runtime error (training or scoring failed).
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .data import (
    SynthSpec,
    entropy_report,
    import_csv,
    load_dataset,
    save_dataset,
    synth_generate,
    with_ndvi,
)
from .errors import ConfigError, FormatError, ShapeError
from .experiments import (
    ExperimentConfig,
    inspect_parameters,
    reemit_reports,
    run_cell,
    run_grid,
    run_search,
)
from .views import ViewSchema, canonical_schema

_SYNTH_KINDS = ("complementary", "redundant", "noisy-view")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map to 1
        raise _UsageError(message)


def _add_run_flags(parser) -> None:
    parser.add_argument("--config", required=True,
                        help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the seed base")
    parser.add_argument("--reps", type=int, default=None,
                        help="override the repetition count")
    parser.add_argument("--jobs", type=int, default=None,
                        help="parallel workers over (cell, repetition)")
    parser.add_argument("--out", default=None,
                        help="override the output directory")


def _build_parser() -> _Parser:
    parser = _Parser(prog="mvcrop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command")

    synth = sub.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--kind", required=True, choices=_SYNTH_KINDS)
    synth.add_argument("--samples", type=int, default=400)
    synth.add_argument("--noise", type=float, default=0.1)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True)

    imp = sub.add_parser("import", help="assemble a container from CSVs")
    imp.add_argument("--manifest", required=True,
                     help="JSON describing views, schemas, and labels")
    imp.add_argument("--out", required=True)

    inspect = sub.add_parser("inspect-params",
                             help="parameter counts vs. reference targets")
    inspect.add_argument("--json", action="store_true")

    entropy = sub.add_parser("entropy",
                             help="spectral-entropy diagnostics per view")
    entropy.add_argument("--data", required=True)
    entropy.add_argument("--segments", type=int, default=2)
    entropy.add_argument("--out", default=None)

    for name, text in (("train", "run the single cell named by the config"),
                       ("grid", "run the full 31-cell protocol"),
                       ("search", "run the reduced 16-cell protocol")):
        _add_run_flags(sub.add_parser(name, help=text))

    report = sub.add_parser("report",
                            help="re-emit tables from a run directory")
    report.add_argument("--records", required=True,
                        help="run directory holding records.csv")
    return parser


def _load_json(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        return json.loads(text)
    except ValueError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from None


def _cmd_synth(args) -> int:
    spec = SynthSpec(kind=args.kind, samples=args.samples, noise=args.noise)
    dataset = synth_generate(spec, args.seed)
    save_dataset(dataset, args.out)
    print(f"wrote {args.out}: {len(dataset)} samples, "
          f"views: {', '.join(dataset.view_names)}")
    return 0


def _schema_from_manifest(name: str, spec) -> ViewSchema:
    if not isinstance(spec, dict):
        raise ConfigError(f"schema for view {name!r} must be a mapping")
    if spec.get("canonical"):
        return canonical_schema(name)
    temporal = bool(spec.get("temporal", True))
    if "channels" not in spec:
        raise ConfigError(f"schema for view {name!r} needs 'channels'")
    channels = int(spec["channels"])
    if temporal:
        if "steps" not in spec:
            raise ConfigError(
                f"temporal schema for view {name!r} needs 'steps'")
        return ViewSchema(name, True, channels, int(spec["steps"]))
    return ViewSchema(name, False, channels)


def _cmd_import(args) -> int:
    manifest_path = Path(args.manifest)
    payload = _load_json(manifest_path)
    if not isinstance(payload, dict):
        raise ConfigError("import manifest must be a JSON object")
    for key in ("labels", "views", "schemas"):
        if key not in payload:
            raise ConfigError(f"import manifest needs {key!r}")
    base = manifest_path.parent
    views = payload["views"]
    schemas = []
    view_files = {}
    for name in views:
        if name not in payload["schemas"]:
            raise ConfigError(f"no schema declared for view {name!r}")
        schemas.append(_schema_from_manifest(name, payload["schemas"][name]))
        view_files[name] = base / views[name]
    dataset = import_csv(view_files, base / payload["labels"], schemas,
                         task=payload.get("task", "binary"),
                         classes=int(payload.get("classes", 2)))
    if payload.get("ndvi"):
        dataset = with_ndvi(dataset)
    save_dataset(dataset, args.out)
    print(f"imported {len(dataset)} samples "
          f"({', '.join(dataset.view_names)}) into {args.out}")
    return 0


def _cmd_inspect_params(args) -> int:
    rows = inspect_parameters()
    if args.json:
        print(json.dumps(rows, indent=2))
        return 0
    print(f"{'component':<22} {'view':<12} {'computed':>10} "
          f"{'reference':>10}  status")
    for row in rows:
        reference = "-" if row["reference"] is None else row["reference"]
        print(f"{row['component']:<22} {row['view']:<12} "
              f"{row['computed']:>10} {reference:>10}  {row['status']}")
    checked = [row for row in rows if row["status"] != "info"]
    ok = sum(row["status"] == "ok" for row in checked)
    mismatched = sum(row["status"] == "mismatch" for row in checked)
    excluded = sum(row["status"] == "excluded" for row in checked)
    print(f"checks: {ok} ok, {mismatched} mismatch (documented), "
          f"{excluded} excluded")
    return 0


def _cmd_entropy(args) -> int:
    dataset = load_dataset(args.data)
    report = entropy_report(dataset, segments=args.segments)
    for view, stats in report.summary.items():
        print(f"{view}: mean spectral entropy {stats['mean']:.4f} "
              f"(min {stats['min']:.4f}, max {stats['max']:.4f}, "
              f"std {stats['std']:.4f})")
    if args.out:
        import csv

        with open(args.out, "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(("view", "feature", "entropy"))
            for view, values in report.per_feature.items():
                for feature, value in enumerate(values):
                    writer.writerow((view, feature, repr(float(value))))
        print(f"wrote {args.out}")
    return 0


def _experiment_config(args) -> ExperimentConfig:
    payload = _load_json(args.config)
    config = ExperimentConfig.from_dict(payload)
    overrides = {}
    if args.seed is not None:
        overrides["seed_base"] = args.seed
    if args.reps is not None:
        overrides["repetitions"] = args.reps
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if args.out is not None:
        overrides["output_dir"] = args.out
    if overrides:
        config = replace(config, **overrides)
    if not config.dataset:
        raise ConfigError("config must set a dataset path")
    # Relative paths in the config resolve against the config file itself;
    # an --out override resolves against the working directory instead.
    base = Path(args.config).resolve().parent
    dataset = Path(config.dataset)
    if not dataset.is_absolute():
        dataset = base / dataset
    output = Path(config.output_dir)
    if not output.is_absolute() and args.out is None:
        output = base / output
    return replace(config, dataset=str(dataset), output_dir=str(output))


def _print_outcome(outcome) -> None:
    print(f"cells: {len(outcome.cells)}  "
          f"trainings: {outcome.trainings_executed}  "
          f"best: {outcome.best_cell}")
    print(f"records: {Path(outcome.output_dir) / 'records.csv'}")
    print(f"reports: {Path(outcome.output_dir) / 'reports'}")


def _cmd_train(args) -> int:
    config = _experiment_config(args)
    _print_outcome(run_cell(config.dataset, config))
    return 0


def _cmd_grid(args) -> int:
    config = _experiment_config(args)
    _print_outcome(run_grid(config.dataset, config))
    return 0


def _cmd_search(args) -> int:
    config = _experiment_config(args)
    _print_outcome(run_search(config.dataset, config))
    return 0


def _cmd_report(args) -> int:
    reemit_reports(args.records)
    print(f"re-emitted reports under {Path(args.records) / 'reports'}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "import": _cmd_import,
    "inspect-params": _cmd_inspect_params,
    "entropy": _cmd_entropy,
    "train": _cmd_train,
    "grid": _cmd_grid,
    "search": _cmd_search,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError("a subcommand is required")
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mvcrop: error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, FormatError, ShapeError, FileNotFoundError,
            IsADirectoryError, NotADirectoryError, PermissionError) as exc:
        print(f"mvcrop: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a runtime failure
        print(f"mvcrop: runtime error: {exc}", file=sys.stderr)
        return 2


def console_main() -> None:
    sys.exit(main())
