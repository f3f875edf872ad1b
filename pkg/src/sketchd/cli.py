"""Command line interface.

    sketchd run --workload w.jsonl --mode imp --out report.csv
    sketchd gen --rows 1000000 --groups 5000 --seed 1 --out table.csv
    sketchd compare ns.csv fm.csv imp.csv --out summary.csv
    sketchd bench-kernels --rows 1000000
"""

from __future__ import annotations

import sys
import time

import click
import numpy as np

from . import kernels, synth
from .engine import DEFAULT_MINMAX_BUFFER
from .workload import (
    RunReport,
    compare_modes,
    run_workload,
    write_summary_csv,
)


@click.group()
def main():
    """Provenance-sketch maintenance engine."""


@main.command()
@click.option("--workload", "workload_path", required=True, type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["ns", "fm", "imp"]), required=True)
@click.option("--out", "out_path", type=click.Path(), default=None, help="Report CSV path.")
@click.option("--strategy", type=click.Choice(["lazy", "eager"]), default="lazy", show_default=True)
@click.option("--batch-size", type=int, default=50, show_default=True)
@click.option("--reuse", type=click.Choice(["exact", "relaxed"]), default="exact", show_default=True)
@click.option("--bloom", type=click.Choice(["on", "off"]), default="on", show_default=True)
@click.option("--pushdown", type=click.Choice(["on", "off"]), default="on", show_default=True)
@click.option("--bloom-fpr", type=float, default=0.01, show_default=True)
@click.option("--topk-buffer", default="auto", show_default=True,
              help="Top-k state bound: row count, 'auto' (5x k), or 'off'.")
@click.option("--minmax-buffer", default=str(DEFAULT_MINMAX_BUFFER), show_default=True,
              help="Min/max state bound per group: row count or 'off'.")
@click.option("--fragments", type=int, default=128, show_default=True, help="Default partition fragment count.")
@click.option("--state-dir", type=click.Path(), default=None)
def run(workload_path, mode, out_path, strategy, batch_size, reuse, bloom, pushdown,
        bloom_fpr, topk_buffer, minmax_buffer, fragments, state_dir):
    """Replay a workload file in one mode and write the per-operation report."""
    report = run_workload(
        workload_path,
        mode,
        strategy=strategy,
        batch_size=batch_size,
        reuse=reuse,
        bloom=bloom == "on",
        pushdown=pushdown == "on",
        bloom_fpr=bloom_fpr,
        topk_buffer=_buffer_arg(topk_buffer, allow_auto=True),
        minmax_buffer=_buffer_arg(minmax_buffer, allow_auto=False),
        default_fragments=fragments,
        state_dir=state_dir,
    )
    if out_path:
        report.write_csv(out_path)
        click.echo(f"wrote {len(report.rows)} rows to {out_path}")
    else:
        for row in report.rows:
            click.echo(
                f"{row.index}\t{row.kind}\t{row.wall_us}us\tdelta={row.delta_rows}"
                f"\tfrags={row.sketch_frags}\trecaptures={row.recaptures}\t{row.checksum}"
            )


@main.command()
@click.option("--rows", type=int, required=True)
@click.option("--groups", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--noise", type=float, default=0.0, show_default=True, help="Gaussian noise sigma.")
@click.option("--out", "out_path", type=click.Path(), required=True)
def gen(rows, groups, seed, noise, out_path):
    """Write a synthetic table as CSV."""
    cols = synth.generate_columns(rows, groups, seed, noise)
    synth.write_csv(cols, out_path)
    click.echo(f"wrote {rows} rows, {groups} groups to {out_path}")


@main.command()
@click.argument("reports", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(), default=None)
def compare(reports, out_path):
    """Cross-check reports from different modes and summarize timings."""
    parsed = [RunReport.read_csv(p) for p in reports]
    summary, crossover = compare_modes(parsed)
    if out_path:
        write_summary_csv(summary, crossover, out_path)
        click.echo(f"wrote summary to {out_path}")
    for entry in summary:
        click.echo(
            f"op {entry['index']}: delta={entry['delta_rows']} ns={entry['ns_us']} "
            f"fm={entry['fm_us']} imp={entry['imp_us']} ratio={entry['imp_fm_ratio']}"
        )
    if crossover is not None:
        click.echo(f"break-even at ~{crossover:.0f} delta rows")
    else:
        click.echo("no break-even inside the measured range")


@main.command("bench-kernels")
@click.option("--rows", type=int, default=1_000_000, show_default=True)
@click.option("--groups", type=int, default=5000, show_default=True)
@click.option("--repeat", type=int, default=5, show_default=True)
def bench_kernels(rows, groups, repeat):
    """Time each kernel on both backends (numba vs pure numpy)."""
    rng = np.random.default_rng(0)
    gids = rng.integers(0, groups, rows)
    values_f = rng.random(rows)
    values_i = rng.integers(0, 1000, rows)
    bounds = np.linspace(0, 1000, 129).astype(np.int64)
    keys = kernels.keys_to_u64(values_i.astype(np.int64))
    bits = np.zeros(1 << 18, dtype=np.uint64)

    cases = {
        "fragment_lookup": lambda impl: impl["fragment_lookup"](values_i, bounds),
        "group_sum_f64": lambda impl: impl["group_sum_f64"](gids, values_f, groups),
        "group_sum_i64": lambda impl: impl["group_sum_i64"](gids, values_i, groups),
        "group_count": lambda impl: impl["group_count"](gids, groups),
        "interval_mask": lambda impl: impl["interval_mask"](
            values_i, bounds[:-1:2].copy(), bounds[1::2].copy()
        ),
        "bloom_fill": lambda impl: impl["bloom_fill"](keys, bits, len(bits) * 64, 7),
        "bloom_query": lambda impl: impl["bloom_query"](keys, bits, len(bits) * 64, 7),
    }
    backends = {"numpy": kernels.numpy_impl()}
    numba = kernels.numba_impl()
    if numba is not None:
        backends["numba"] = numba

    click.echo(f"rows={rows} groups={groups} repeat={repeat}")
    click.echo(f"{'kernel':<18}" + "".join(f"{name:>12}" for name in backends))
    for case, fn in cases.items():
        cells = []
        for name, impl in backends.items():
            fn(impl)  # warm-up / jit compile
            best = min(_time_once(fn, impl) for _ in range(repeat))
            cells.append(f"{best * 1e3:9.2f}ms")
        click.echo(f"{case:<18}" + "".join(f"{c:>12}" for c in cells))


def _buffer_arg(text, allow_auto: bool):
    if text is None or text == "off":
        return None
    if allow_auto and text == "auto":
        return "auto"
    try:
        value = int(text)
    except ValueError:
        raise click.BadParameter(f"expected an integer{', auto,' if allow_auto else ''} or off, got {text!r}")
    return value


def _time_once(fn, impl) -> float:
    start = time.perf_counter()
    fn(impl)
    return time.perf_counter() - start


if __name__ == "__main__":
    sys.exit(main())
