"""Grid sweeps: grid-spec parsing, the worker pool that runs cells and the
summary tables written once every cell has finished.
"""

from collections import defaultdict
from pathlib import Path
import csv
import itertools
import multiprocessing as mp

import regex as re

from dendplrnn.utils.utils import ConfigError

GRID_TOKEN = re.compile(r"(?P<key>[A-Za-z_][A-Za-z0-9_]*)=(?P<values>\S+)")
GRID_RANGE = re.compile(r"(?P<start>-?\d+)\.\.(?P<stop>-?\d+)")

SUMMARY_COLUMNS = ["M", "B", "seed", "dstsp_bin", "psc", "pe20", "success"]
RATE_COLUMNS = ["M", "B", "n_runs", "success_rate"]


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    if text in ("true", "false"):
        return text == "true"
    raise ConfigError("sweep.grid", f"value '{text}' is not a number")


def parse_grid(spec: str) -> list[dict]:
    """Expand a grid spec such as "M=10 B=0,20 seed=0..4" into cells.

    Comma lists enumerate values, a..b is an inclusive integer range. Cells
    come out in row-major order of the keys as written.
    """
    axes = {}
    for token in spec.split():
        match = GRID_TOKEN.fullmatch(token)
        if match is None:
            raise ConfigError("sweep.grid", f"cannot parse '{token}', expected key=values")
        key = match["key"]
        if key in axes:
            raise ConfigError("sweep.grid", f"key '{key}' given twice")

        span = GRID_RANGE.fullmatch(match["values"])
        if span is not None:
            start, stop = int(span["start"]), int(span["stop"])
            if stop < start:
                raise ConfigError("sweep.grid", f"empty range {start}..{stop} for '{key}'")
            axes[key] = list(range(start, stop + 1))
        else:
            parts = match["values"].split(",")
            if any(not part for part in parts):
                raise ConfigError("sweep.grid", f"empty value in '{token}'")
            axes[key] = [_parse_value(part) for part in parts]

    if not axes:
        raise ConfigError("sweep.grid", "grid is empty")

    return [dict(zip(axes, combo)) for combo in itertools.product(*axes.values())]


def cell_name(cell: dict) -> str:
    return "_".join(f"{key}{value}" for key, value in cell.items())


class worker_pool_handler:
    def __init__(self, workers, logger):
        self._log = logger
        self.worker_pool = mp.Pool(processes=workers)

        self._log.info(f"Successfully initialised worker pool with {workers} workers")

        self.rows = []
        self.failures = []

    def submit_job(self, func, cell, kwds):
        self._log.info(f"Submitting sweep cell {cell_name(cell)} to the worker pool")

        self.worker_pool.apply_async(
            func=func,
            kwds=kwds,
            callback=self.callback,
            error_callback=self.error_callback,
        )

    def callback(self, cell_result):
        success, row = cell_result

        if success:
            self._log.info(
                f"Finished cell M={row['M']} B={row['B']} seed={row['seed']}: dstsp_bin={row['dstsp_bin']} success={row['success']}"
            )
        else:
            self._log.warning(
                f"Cell M={row['M']} B={row['B']} seed={row['seed']} failed: {row.get('error')}"
            )

        self.rows.append(row)

    def error_callback(self, exception):
        self._log.error(f"Worker failed with unhandled exception: {exception}")
        self.failures.append(str(exception))

    def close(self):
        self.worker_pool.close()
        self.worker_pool.join()


def summary_row(M: int, B: int, seed: int, report: dict | None = None, error: str | None = None) -> dict:
    row = {"M": M, "B": B, "seed": seed, "dstsp_bin": None, "psc": None, "pe20": None, "success": False}
    if report is not None:
        row["dstsp_bin"] = report["dstsp_bin"]
        row["psc"] = report["psc"]
        row["pe20"] = report["pe"].get("20")
        row["success"] = bool(report["success"])
    if error is not None:
        row["error"] = error
    return row


def success_rates(rows: list[dict]) -> list[dict]:
    """Fraction of successful runs per (M, B) cell, failed runs counted as unsuccessful"""
    groups = defaultdict(list)
    for row in rows:
        groups[(row["M"], row["B"])].append(bool(row["success"]))
    return [
        {"M": M, "B": B, "n_runs": len(flags), "success_rate": sum(flags) / len(flags)}
        for (M, B), flags in sorted(groups.items())
    ]


def _write_rows(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in columns})


def write_summary(rows: list[dict], out_dir) -> tuple[Path, Path]:
    """Write summary.csv (one row per run) and summary_rates.csv (one row per cell)"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=lambda r: (r["M"], r["B"], r["seed"]))

    summary_path = out_dir / "summary.csv"
    rates_path = out_dir / "summary_rates.csv"
    _write_rows(summary_path, SUMMARY_COLUMNS, rows)
    _write_rows(rates_path, RATE_COLUMNS, success_rates(rows))
    return summary_path, rates_path
