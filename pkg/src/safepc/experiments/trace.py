"""Run traces: per-sample closed-loop signals, CSV round trip, and validation."""
import csv
import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError

TRACE_VERSION_LINE = "# safepc-trace v1"
TRACE_COLUMNS = ("t", "x1", "x2", "y_ref", "dy_ref", "funnel_radius",
                 "mu", "u_fc", "a_tau", "u", "d", "model_version")
INTEGER_COLUMNS = ("d", "model_version")


@dataclass
class RunTrace:
    """Column-oriented trace; every column has one entry per logged sample."""

    columns: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = [c for c in TRACE_COLUMNS if c not in self.columns]
        if missing:
            raise InvalidInputError(f"trace is missing columns {missing}")
        lengths = {len(self.columns[c]) for c in TRACE_COLUMNS}
        if len(lengths) != 1:
            raise InvalidInputError("trace columns differ in length")
        self.columns = {c: np.asarray(self.columns[c], dtype=float) for c in TRACE_COLUMNS}

    def __len__(self):
        return len(self.columns["t"])

    def __getitem__(self, name):
        return self.columns[name]

    @property
    def tracking_error(self):
        return np.abs(self["x1"] - self["y_ref"])


def _fmt(name, v):
    if name in INTEGER_COLUMNS:
        return str(int(v))
    return repr(float(v))


def write_trace_csv(path, trace: RunTrace, metadata_path=None):
    """Write the CSV and, next to it, a JSON sidecar with the run metadata."""
    with open(path, "w", newline="") as fh:
        fh.write(TRACE_VERSION_LINE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for i in range(len(trace)):
            w.writerow([_fmt(c, trace[c][i]) for c in TRACE_COLUMNS])
    if metadata_path is not None:
        with open(metadata_path, "w") as fh:
            json.dump(trace.metadata, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def read_trace_csv(path) -> RunTrace:
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != TRACE_VERSION_LINE:
            raise InvalidInputError(f"unexpected trace version line {first!r}")
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRACE_COLUMNS:
            raise InvalidInputError(f"unexpected trace header {header}")
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.array(rows, dtype=float).reshape(-1, len(TRACE_COLUMNS))
    return RunTrace({c: data[:, i] for i, c in enumerate(TRACE_COLUMNS)})


@dataclass(frozen=True)
class TraceReport:
    rows: int
    violations: int
    first_violation_t: float
    max_ratio: float

    @property
    def ok(self):
        return self.rows > 0 and self.violations == 0


def validate_trace(trace: RunTrace) -> TraceReport:
    """Check ``|y - y_ref| < funnel_radius`` on every row."""
    err = trace.tracking_error
    radius = trace["funnel_radius"]
    bad = ~(err < radius)
    ratio = float(np.max(err / radius)) if len(trace) else float("nan")
    first = float(trace["t"][np.argmax(bad)]) if bad.any() else float("nan")
    return TraceReport(len(trace), int(bad.sum()), first, ratio)
