from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path
from typing import Optional

import click

from .const import DEFAULT_MAX_ITER, DEFAULT_TOL
from .exceptions import EOTError

logger = logging.getLogger(__name__)


def _configure_logging(verbose: int) -> None:
    from rich.console import Console
    from rich.logging import RichHandler

    level = logging.WARNING if verbose <= 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def _fmt(value: float) -> str:
    # -0.0 prints as 0.0
    return repr(float(value) + 0.0)


def verbose_option(fn):
    @click.option(
        "--verbose",
        "-v",
        count=True,
        help="Increase verbosity level (use multiple times for more verbosity)",
    )
    @functools.wraps(fn)
    def wrapper(*args, verbose: int, **kwargs):
        _configure_logging(verbose)
        return fn(*args, **kwargs)

    return wrapper


def experiment_options(fn):
    """Options shared by the commands that read an experiment config."""
    options = [
        click.option(
            "--config",
            "-c",
            "config_path",
            type=click.Path(exists=True, dir_okay=False),
            required=True,
            help="Experiment config (JSON)",
        ),
        click.option("--eps", type=float, default=None, help="Regularization, replaces the config's epsilons"),
        click.option("--tol", type=float, default=None, help=f"Marginal TV tolerance [default: {DEFAULT_TOL}]"),
        click.option(
            "--max-iter", type=int, default=None, help=f"Iteration cap [default: {DEFAULT_MAX_ITER}]"
        ),
        click.option("--seed", type=int, default=None, help="Seed for samplers and perturbations"),
        click.option("--out", "-o", type=click.Path(file_okay=False), default=None, help="Output directory"),
        click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default=None, help="Report format"),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _load_experiment(ctx: click.Context, config_path: str, **flags):
    """Config file, then flag overrides; validation errors exit with status 2."""
    from pydantic import ValidationError
    from rich.console import Console

    from .harness import apply_overrides, load_config

    err = Console(stderr=True)
    try:
        cfg = apply_overrides(load_config(config_path), **flags)
        logger.debug("loaded %s (sha256 %s)", config_path, cfg.digest())
        return cfg
    except ValidationError as e:
        err.print("[red]✗ Invalid config![/red]")
        for error in e.errors():
            loc = ".".join(str(part) for part in error["loc"]) or "<root>"
            err.print(f"- {loc}: {error['msg']}")
        ctx.exit(2)
    except ValueError as e:
        err.print(f"[red]✗ Invalid config: {e}[/red]")
        ctx.exit(2)


def _fail(message: str) -> None:
    from rich.console import Console

    Console(stderr=True).print(f"[red]✗ {message}[/red]")
    sys.exit(1)


@click.group()
def main():
    """eot-stability CLI"""
    pass


@main.command(name="solve", help="Solve the configured entropic OT problem with Sinkhorn")
@experiment_options
@verbose_option
@click.pass_context
def solve_cmd(
    ctx,
    config_path: str,
    eps: Optional[float],
    tol: Optional[float],
    max_iter: Optional[int],
    seed: Optional[int],
    out: Optional[str],
    fmt: Optional[str],
):
    from rich.console import Console

    from .diagnostics import dual_value, normalize, primal_value, schroedinger_residual
    from .harness import resolve_cost, resolve_marginals
    from .sinkhorn import TRACE_HEADER, solve
    from .utils import write_csv, write_json

    cfg = _load_experiment(ctx, config_path, eps=eps, tol=tol, max_iter=max_iter, seed=seed, out=out, format=fmt)
    console = Console()
    try:
        mu, nu = resolve_marginals(cfg)
        C = resolve_cost(cfg, mu, nu)
        multi = len(cfg.epsilons) > 1
        all_converged = True
        for value in cfg.epsilons:
            report = solve(mu, nu, C, value, tol=cfg.solver.tol, max_iter=cfg.solver.max_iter)
            p = normalize(report.potentials, mu, 0.0)
            dual = dual_value(p, mu, nu)
            primal = primal_value(report.coupling, C, mu, nu, value)
            r_f, r_g = schroedinger_residual(p, C, mu, nu)

            stem = f"solve-eps={value:g}" if multi else "solve"
            directory = Path(cfg.output.dir)
            payload = {**report.to_dict(), "normalized": p.to_dict(), "dual_value": dual, "primal_value": primal}
            write_json(directory / f"{stem}.json", payload)
            write_csv(directory / f"{stem}-trace.csv", TRACE_HEADER, report.trace_rows())

            mark = "[green]✓[/green]" if report.converged else "[yellow]![/yellow]"
            console.print(f"{mark} eps={value:g} iterations={report.iterations} converged={report.converged}")
            console.print(f"dual value: {_fmt(dual)}")
            console.print(f"primal value: {_fmt(primal)}")
            console.print(f"residuals: r_f={r_f:.3e} r_g={r_g:.3e}")
            all_converged = all_converged and report.converged
    except EOTError as e:
        _fail(str(e))
    console.print(f"Reports written to {Path(cfg.output.dir).absolute()}")
    if not all_converged:
        sys.exit(1)


@main.command(name="trace", help="Record Sinkhorn iterates against a tight reference solve")
@experiment_options
@click.option(
    "--beta",
    "betas",
    type=float,
    multiple=True,
    help="Exponential-moment exponent (repeatable) [default: 1 / max cost]",
)
@verbose_option
@click.pass_context
def trace_cmd(
    ctx,
    config_path: str,
    eps: Optional[float],
    tol: Optional[float],
    max_iter: Optional[int],
    seed: Optional[int],
    out: Optional[str],
    fmt: Optional[str],
    betas: tuple,
):
    from rich.console import Console

    from .harness import TRACE_METRICS, emit_report, resolve_cost, resolve_marginals, sinkhorn_trace

    cfg = _load_experiment(ctx, config_path, eps=eps, tol=tol, max_iter=max_iter, seed=seed, out=out, format=fmt)
    if len(cfg.epsilons) != 1:
        raise click.UsageError("trace runs a single epsilon; pass --eps", ctx=ctx)
    console = Console()
    metrics = None if cfg.metrics is None else [m for m in cfg.metrics if m in TRACE_METRICS]
    try:
        mu, nu = resolve_marginals(cfg)
        C = resolve_cost(cfg, mu, nu)
        trace = sinkhorn_trace(
            mu,
            nu,
            C,
            cfg.epsilons[0],
            max_iter=cfg.solver.max_iter,
            tol=cfg.solver.tol,
            betas=list(betas) or cfg.betas or None,
            metrics=metrics,
            reference_factor=cfg.solver.trace_reference_factor,
        )
        trace.meta["config_sha256"] = cfg.digest()
        paths = emit_report(trace, cfg.output.format, cfg.output.dir)
    except EOTError as e:
        _fail(str(e))

    converged = bool(trace.rows) and trace.rows[-1].converged
    mark = "[green]✓[/green]" if converged else "[yellow]![/yellow]"
    last_index = trace.rows[-1].index if trace.rows else 0
    console.print(f"{mark} recorded {last_index} iterates")
    for metric in trace.metrics:
        values = trace.column(metric)
        if values:
            console.print(f"{metric}: first={values[0]:.3e} last={values[-1]:.3e}")
    for path in paths:
        console.print(f"{path}")
    if not converged:
        sys.exit(1)


@main.command(name="sweep", help="Run a marginal-perturbation stability sweep")
@experiment_options
@click.option("--workers", "-j", type=int, default=None, help="Worker threads for the sweep")
@verbose_option
@click.pass_context
def sweep_cmd(
    ctx,
    config_path: str,
    eps: Optional[float],
    tol: Optional[float],
    max_iter: Optional[int],
    seed: Optional[int],
    out: Optional[str],
    fmt: Optional[str],
    workers: Optional[int],
):
    from rich.console import Console
    from rich.table import Table

    from .hash import batch_get_sha256
    from .harness import emit_report, stability_sweep

    cfg = _load_experiment(
        ctx, config_path, eps=eps, tol=tol, max_iter=max_iter, seed=seed, out=out, format=fmt, workers=workers
    )
    if cfg.perturbation is None:
        raise click.UsageError("the config has no 'perturbation' section", ctx=ctx)
    console = Console()
    try:
        trace = stability_sweep(cfg)
        paths = emit_report(trace, cfg.output.format, cfg.output.dir)
    except EOTError as e:
        _fail(str(e))

    table = Table(title="")
    table.add_column("Metric", style="cyan")
    table.add_column("First", style="green")
    table.add_column("Last", style="yellow")
    labels = list(dict.fromkeys(row.metric for row in trace.rows))
    for label in labels:
        values = trace.column(label)
        table.add_row(label, f"{values[0]:.3e}", f"{values[-1]:.3e}")
    console.print(table)

    unconverged = sum(1 for row in trace.rows if not row.converged)
    if unconverged:
        console.print(f"[yellow]! {unconverged} rows come from unconverged solves[/yellow]")
    console.print("[green]✓ Sweep finished![/green]")
    for path, sha256 in batch_get_sha256(paths).items():
        console.print(f"{sha256}  {path}")


@main.command(name="oracle-check", help="Compare Sinkhorn with the brute-force oracle on random instances")
@click.option("--seed", type=int, default=0, help="Seed of the instance generator")
@click.option("--instances", "-n", type=click.IntRange(min=1), default=20, help="Number of random instances")
@click.option("--tol", type=float, default=1e-10, help="Tolerance of both solvers")
@verbose_option
def oracle_check_cmd(seed: int, instances: int, tol: float):
    from rich.console import Console

    from .oracle import oracle_check

    console = Console()
    results = oracle_check(seed, instances, tol)
    for result in results:
        color = "green" if result.passed else "red"
        console.print(f"[{color}]{result.line()}[/{color}]", highlight=False)
    failed = [r for r in results if not r.passed]
    if failed:
        console.print(f"[red]✗ {len(failed)} of {len(results)} instances failed[/red]")
        sys.exit(1)
    console.print(f"[green]✓ All {len(results)} instances agree[/green]")


@main.command(name="selftest", help="Run the built-in catalogue of closed-form checks")
@verbose_option
def selftest_cmd():
    from rich.console import Console

    from .selftest import run_selftest

    console = Console()
    outcomes = run_selftest()
    for outcome in outcomes:
        if outcome.passed:
            console.print(f"[green]✓[/green] {outcome.module}: {outcome.name}", highlight=False)
        else:
            console.print(
                f"[red]✗[/red] {outcome.module}: {outcome.name} {outcome.detail}", highlight=False
            )
    failed = sum(1 for o in outcomes if not o.passed)
    if failed:
        console.print(f"[red]✗ {failed} of {len(outcomes)} checks failed[/red]")
        sys.exit(1)
    console.print(f"[green]✓ All {len(outcomes)} checks passed[/green]")


def run(argv=None) -> int:
    """Invoke the CLI with ``argv`` and return its exit status instead of exiting."""
    try:
        main.main(args=argv, prog_name="eot-stability", standalone_mode=True)
    except SystemExit as e:
        return int(e.code or 0)
    return 0
