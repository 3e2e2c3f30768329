"""Command line interface.

Exit codes: 0 success, 1 usage error, 2 data/schema error, 3 training
failure, 4 significant findings with ``--fail-on-significant``.
Every option can also be set through a ``FAULTFLOW_<SUBCOMMAND>_<OPTION>``
environment variable.
"""

from __future__ import annotations

import json
import logging
import math
import sys
from pathlib import Path
from urllib.parse import quote

import click

from faultflow.density.bundle import fit_all, load_store, save_store
from faultflow.density.fit import min_rows
from faultflow.density.model import FitConfig, ModelKind
from faultflow.errors import DataError, FaultflowError, InsufficientDataError, SchemaError
from faultflow.graph import assemble, load_trace
from faultflow.localize import (
    DEFAULT_CRITICAL_VALUE,
    LocalizationReport,
    export_plot_data,
    localize,
    to_natural_log,
    write_report,
)

EXIT_USAGE = 1
EXIT_SIGNIFICANT = 4

logger = logging.getLogger("faultflow")


def _fit_options(func):
    defaults = FitConfig()
    options = [
        click.option("--coupling-layers", type=int, default=defaults.coupling_layers, show_default=True),
        click.option("--hidden-units", type=int, default=defaults.hidden_units, show_default=True),
        click.option("--epochs", type=int, default=defaults.epochs, show_default=True),
        click.option("--learning-rate", type=float, default=defaults.learning_rate, show_default=True),
        click.option("--batch-size", type=int, default=defaults.batch_size, show_default=True),
        click.option("--validation-fraction", type=float, default=defaults.validation_fraction, show_default=True),
        click.option("--patience", type=int, default=defaults.early_stop_patience, show_default=True),
        click.option("--noise-std", type=float, default=defaults.noise_std, show_default=True),
        click.option("--kind", type=click.Choice([k.value for k in ModelKind]), default=ModelKind.NVP_FLOW.value,
                     show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--jobs", type=int, default=1, show_default=True, help="Parallel fitting processes."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _critical_options(func):
    func = click.option("--log-base", type=click.Choice(["e", "10"]), default="e", show_default=True,
                        help="Base of the logarithm --critical-value is given in.")(func)
    func = click.option("--critical-value", type=float, default=None,
                        help="Critical value c; default log(0.001).")(func)
    return func


def _config_from(opts: dict) -> FitConfig:
    try:
        return FitConfig(
            coupling_layers=opts["coupling_layers"],
            hidden_units=opts["hidden_units"],
            epochs=opts["epochs"],
            learning_rate=opts["learning_rate"],
            batch_size=opts["batch_size"],
            validation_fraction=opts["validation_fraction"],
            seed=opts["seed"],
            early_stop_patience=opts["patience"],
            noise_std=opts["noise_std"],
        )
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None


def resolve_critical_value(value: float | None, base: str) -> float:
    c = DEFAULT_CRITICAL_VALUE if value is None else to_natural_log(value, "e" if base == "e" else 10)
    if not c < 0 or not math.isfinite(c):
        raise click.UsageError(f"critical value must be negative, got {c}")
    return c


def _fit_store(trace: Path, out: Path, config: FitConfig, kind: str, jobs: int) -> dict:
    events, graph = load_trace(trace)
    assembly = assemble(events, graph)
    if not assembly.datasets:
        raise DataError(f"{trace}: no complete invocations")
    failures = []
    datasets = {}
    for x, ds in assembly.datasets.items():
        if ds.n < min_rows(ds.d):
            failures.append(str(InsufficientDataError(x, ds.n, min_rows(ds.d))))
        else:
            datasets[x] = ds
    bundles = fit_all(datasets, config, kind, jobs=jobs) if not failures else {}
    summary = {
        "trace": str(trace),
        "graph_hash": graph.digest(),
        "models": {
            x: {
                "n": datasets[x].n,
                "d": datasets[x].d,
                "self_ll": b.full.self_ll,
                "groups": {g: m.self_ll for g, m in b.groups.items()},
                "epochs": len(b.full.history) - 1,
                "degenerate": b.degenerate,
            }
            for x, b in bundles.items()
        },
        "failures": failures,
        "warnings": assembly.warnings,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "fit_summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    if failures:
        raise DataError("fitting failed:\n  " + "\n  ".join(failures))
    save_store(out, bundles, graph.digest(), config)
    return summary


def _locate(models: Path, trace: Path, c: float) -> LocalizationReport:
    bundles, manifest = load_store(models)
    events, graph = load_trace(trace)
    if manifest["graph_hash"] != graph.digest():
        raise SchemaError(
            f"{trace}: program graph hash {graph.digest()[:12]} does not match model store "
            f"{manifest['graph_hash'][:12]}"
        )
    assembly = assemble(events, graph)
    seeds = {"fit": int(manifest["config"].get("seed", 0))}
    return localize(bundles, assembly.datasets, c, graph, seeds, assembly.warnings)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool) -> None:
    """Localize behavioral faults from runtime traces."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.ERROR, format="%(levelname)s %(message)s")


@cli.command()
@click.argument("null_trace", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@_fit_options
def fit(null_trace: Path, out_dir: Path, **opts) -> None:
    """Fit one model bundle per executable from a reference trace."""
    config = _config_from(opts)
    summary = _fit_store(null_trace, out_dir, config, opts["kind"], opts["jobs"])
    for x, info in sorted(summary["models"].items()):
        click.echo(f"{x:<28} N={info['n']:<6} d={info['d']:<3} self_ll={info['self_ll']:.4f}")
    for w in summary["warnings"]:
        click.echo(f"warning: {w}", err=True)


@cli.command()
@click.argument("alt_trace", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--models", "model_dir", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@_critical_options
@click.option("--fail-on-significant", is_flag=True, help="Exit 4 when anything is significant.")
def locate(alt_trace: Path, model_dir: Path, out_dir: Path, critical_value, log_base, fail_on_significant) -> None:
    """Evaluate an alt trace under fitted models and write the report."""
    c = resolve_critical_value(critical_value, log_base)
    report = _locate(model_dir, alt_trace, c)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report(report, out_dir / "report.json", out_dir / "report.csv")
    click.echo(report.render())
    if fail_on_significant and report.significant_set():
        sys.exit(EXIT_SIGNIFICANT)


@cli.command()
@click.argument("report_json", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@_critical_options
def report(report_json: Path, out_dir: Path | None, critical_value, log_base) -> None:
    """Print a saved report, optionally re-deciding significance with a new c."""
    try:
        doc = json.loads(report_json.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{report_json}: not valid JSON ({exc})") from None
    rep = LocalizationReport.from_json(doc)
    if critical_value is not None:
        rep = rep.rethreshold(resolve_critical_value(critical_value, log_base))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_report(rep, out_dir / "report.json", out_dir / "report.csv")
    click.echo(rep.render())


def _parse_element(spec: str) -> tuple[str, str]:
    if ":" not in spec:
        raise click.UsageError(f"--element expects EXECUTABLE:ELEMENT, got {spec!r}")
    x, e = spec.split(":", 1)
    return x, e


def _plot_filename(executable_id: str, element_id: str) -> str:
    return f"{quote(executable_id, safe='')}__{quote(element_id, safe='')}.json"


@cli.command()
@click.option("--models", "model_dir", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--null", "null_trace", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--alt", "alt_trace", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--element", "elements", required=True, multiple=True, help="EXECUTABLE:ELEMENT, repeatable.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
def plot(model_dir: Path, null_trace: Path, alt_trace: Path, elements, out_dir: Path) -> None:
    """Export null-vs-alt histogram and density data for elements."""
    bundles, _ = load_store(model_dir)
    null_events, graph = load_trace(null_trace)
    alt_events, alt_graph = load_trace(alt_trace)
    null_ds = assemble(null_events, graph).datasets
    alt_ds = assemble(alt_events, alt_graph).datasets
    targets = [graph.element(*_parse_element(spec)) for spec in elements]
    out_dir.mkdir(parents=True, exist_ok=True)
    for el in targets:
        doc = export_plot_data(bundles, null_ds, alt_ds, el)
        path = out_dir / _plot_filename(el.executable_id, el.element_id)
        path.write_text(json.dumps(doc), encoding="utf-8")
        click.echo(str(path))


@cli.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--requests", "request_count", type=int, default=3000, show_default=True)
@_critical_options
@_fit_options
def demo(out_dir: Path, request_count: int, critical_value, log_base, **opts) -> None:
    """Run the Nutrition Advisor study end to end: traces, models, reports, plots."""
    from faultflow.demo import PLOT_PANELS, WorkloadConfig, reproduce_study

    c = resolve_critical_value(critical_value, log_base)
    config = _config_from(opts)
    if request_count < 1:
        raise click.UsageError("--requests must be >= 1")
    study = reproduce_study(
        seed=config.seed,
        c=c,
        workload=WorkloadConfig(request_count=request_count),
        fit_config=config,
        workdir=out_dir / "traces",
        jobs=opts["jobs"],
    )
    save_store(out_dir / "models", study.bundles, study.graph.digest(), config)
    reports_dir = out_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    for name, rep in sorted(study.reports.items()):
        write_report(rep, reports_dir / f"{name}.json", reports_dir / f"{name}.csv")
        plots_dir = out_dir / "plots" / name
        plots_dir.mkdir(parents=True, exist_ok=True)
        for x, e in PLOT_PANELS[name]:
            doc = export_plot_data(study.bundles, study.null_datasets, study.alt_datasets[name],
                                   study.graph.element(x, e))
            (plots_dir / _plot_filename(x, e)).write_text(json.dumps(doc), encoding="utf-8")
        click.echo(f"===== {name}")
        click.echo(rep.render())
    click.echo(f"artifacts written to {out_dir}")


def main(argv: list[str] | None = None) -> int:
    try:
        rv = cli.main(args=argv, prog_name="faultflow", standalone_mode=False, auto_envvar_prefix="FAULTFLOW")
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except FaultflowError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except SystemExit as exc:
        return int(exc.code or 0)
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return DataError.exit_code
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
