"""File formats: visit CSVs, model files, chart series, scenario specs.

All formats are deterministic text.  Floats are serialized with ``repr``
(shortest round-tripping decimal, up to 17 significant digits), so write/read
round trips are bit-exact for models and chart series.  Times are decimal
years everywhere; a monthly cadence uses multiples of 1/12.

The visit CSV's condition columns arrive pre-binarized (0/1).  The clinical
threshold definitions behind such indicators (fasting glucose, BMI, blood
pressure, lipid panels, cognitive scores, medication use) are documentation
for data preparation only and are never computed here.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError
from .monitor import ChartPoint
from .network import Event, FactorSchema, Trajectory
from .params import CompactParams

__all__ = [
    "VisitRow",
    "VisitSchema",
    "ParseReport",
    "ModelFile",
    "parse_visits",
    "write_visits",
    "write_model",
    "read_model",
    "write_chart_series",
    "read_chart_series",
    "write_chart_svg",
    "write_tensor_series",
    "read_tensor_series",
]

MODEL_FORMAT = "dfctbn-model"
MODEL_FORMAT_VERSION = 1
TENSOR_FORMAT = "dfctbn-tensor-series"
CHART_HEADER = ["index", "time", "statistic", "UCL", "LCL", "signal"]


@dataclass(frozen=True)
class VisitRow:
    """One visit-file row: raw (unencoded) factor values plus the profile."""

    patient_id: str
    time: float
    profile: np.ndarray
    factors: dict[str, float]


@dataclass(frozen=True)
class VisitSchema:
    """Column layout of a visit CSV: condition names plus the factor schema."""

    condition_names: tuple[str, ...]
    factor_schema: FactorSchema

    @property
    def n_conditions(self) -> int:
        return len(self.condition_names)

    def header(self) -> list[str]:
        return (
            ["patient_id", "time"]
            + list(self.condition_names)
            + list(self.factor_schema.names)
        )


@dataclass(frozen=True)
class ParseReport:
    """Ingestion summary returned alongside parsed trajectories."""

    n_rows: int
    n_patients: int
    n_dropped: int


def _parse_cell(text, column, line_no):
    try:
        return float(text)
    except ValueError:
        raise DataError(
            f"line {line_no}: column {column!r} has non-numeric value {text!r}"
        ) from None


def parse_visits(path, schema: VisitSchema, *, allow_extra_columns: bool = False):
    """Read a visit CSV into per-patient trajectories.

    Rows are grouped by patient and sorted by time, so row order in the file
    never matters.  Errors carry line numbers; duplicate (patient, time)
    pairs are rejected.  Returns ``(trajectories, report)`` with trajectories
    sorted by patient id and design vectors encoded through the schema.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"visit file not found: {path}")
    expected = schema.header()
    with path.open(newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file (header row is mandatory)") from None
        if header[: len(expected)] != expected:
            raise DataError(
                f"{path}: header mismatch; expected {expected}, found {header}"
            )
        if len(header) > len(expected) and not allow_extra_columns:
            extra = header[len(expected) :]
            raise DataError(
                f"{path}: unknown columns {extra}; pass allow_extra_columns to ignore"
            )
        n_rows = 0
        n_dropped = 0
        per_patient: dict[str, list] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                n_dropped += 1
                continue
            if len(row) < len(expected):
                raise DataError(f"line {line_no}: expected {len(expected)} columns")
            n_rows += 1
            patient = row[0]
            time = _parse_cell(row[1], "time", line_no)
            offset = 2
            states = []
            for j, name in enumerate(schema.condition_names):
                value = _parse_cell(row[offset + j], name, line_no)
                if value not in (0.0, 1.0):
                    raise DataError(
                        f"line {line_no}: condition {name!r} must be 0 or 1"
                    )
                states.append(int(value))
            offset += schema.n_conditions
            raw = [
                _parse_cell(row[offset + j], name, line_no)
                for j, name in enumerate(schema.factor_schema.names)
            ]
            per_patient.setdefault(patient, []).append((time, states, raw))

    trajectories = []
    for patient in sorted(per_patient):
        visits = sorted(per_patient[patient], key=lambda item: item[0])
        times = [v[0] for v in visits]
        for t0, t1 in zip(times, times[1:]):
            if t0 == t1:
                raise DataError(
                    f"duplicate visit time {t0} for patient {patient!r}"
                )
        events = tuple(
            Event(time, np.asarray(states, dtype=np.int8), schema.factor_schema.encode(raw))
            for time, states, raw in visits
        )
        trajectories.append(Trajectory(patient, events))
    return trajectories, ParseReport(n_rows, len(per_patient), n_dropped)


def write_visits(path, rows, schema: VisitSchema) -> None:
    """Write :class:`VisitRow` records as a visit CSV (raw factor values)."""
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(schema.header())
        for row in rows:
            writer.writerow(
                [row.patient_id, repr(float(row.time))]
                + [str(int(v)) for v in row.profile]
                + [repr(float(row.factors[name])) for name in schema.factor_schema.names]
            )


# ---------------------------------------------------------------------------
# model files


@dataclass(frozen=True)
class ModelFile:
    """A deserialized model: coefficients, structure, schema and metadata."""

    params: CompactParams
    structure: np.ndarray | None
    condition_names: tuple[str, ...]
    factor_schema: FactorSchema
    penalty_weight: float | None
    metadata: dict = field(default_factory=dict)

    @property
    def visit_schema(self) -> VisitSchema:
        return VisitSchema(self.condition_names, self.factor_schema)


def _canonical(payload) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def write_model(
    path,
    params: CompactParams,
    *,
    structure=None,
    condition_names=None,
    factor_schema: FactorSchema,
    penalty_weight=None,
    metadata=None,
) -> None:
    """Serialize a fitted model with a payload checksum.

    Coefficients round-trip bit-exactly (shortest-repr decimal floats).
    """
    if condition_names is None:
        condition_names = tuple(f"condition_{i}" for i in range(params.n_conditions))
    if len(condition_names) != params.n_conditions:
        raise DataError("condition names do not match the coefficient shape")
    if factor_schema.n_factors != params.n_factors:
        raise DataError("factor schema does not match the coefficient shape")
    payload = {
        "n_conditions": params.n_conditions,
        "n_factors": params.n_factors,
        "condition_names": list(condition_names),
        "factor_schema": {
            "names": list(factor_schema.names),
            "kinds": list(factor_schema.kinds),
            "offsets": list(factor_schema.offsets),
            "scales": list(factor_schema.scales),
        },
        "coefficients": params.coefficients.tolist(),
        "structure": None if structure is None else np.asarray(structure, dtype=bool).tolist(),
        "penalty_weight": None if penalty_weight is None else float(penalty_weight),
        "library_version": __version__,
        "metadata": metadata or {},
    }
    document = {
        "format": MODEL_FORMAT,
        "format_version": MODEL_FORMAT_VERSION,
        "checksum": hashlib.sha256(_canonical(payload)).hexdigest(),
        "payload": payload,
    }
    Path(path).write_text(json.dumps(document, indent=1, sort_keys=True) + "\n")


def read_model(path) -> ModelFile:
    """Read a model file, verifying format version and checksum."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"model file not found: {path}")
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a valid model file ({exc})") from None
    if document.get("format") != MODEL_FORMAT:
        raise DataError(f"{path}: not a {MODEL_FORMAT} file")
    if document.get("format_version") != MODEL_FORMAT_VERSION:
        raise DataError(
            f"{path}: unsupported format version {document.get('format_version')}"
        )
    payload = document.get("payload", {})
    if hashlib.sha256(_canonical(payload)).hexdigest() != document.get("checksum"):
        raise DataError(f"{path}: checksum mismatch; file is corrupt or truncated")
    schema = FactorSchema(
        names=tuple(payload["factor_schema"]["names"]),
        kinds=tuple(payload["factor_schema"]["kinds"]),
        offsets=tuple(payload["factor_schema"]["offsets"]),
        scales=tuple(payload["factor_schema"]["scales"]),
    )
    structure = payload.get("structure")
    return ModelFile(
        params=CompactParams(np.asarray(payload["coefficients"], dtype=float)),
        structure=None if structure is None else np.asarray(structure, dtype=bool),
        condition_names=tuple(payload["condition_names"]),
        factor_schema=schema,
        penalty_weight=payload.get("penalty_weight"),
        metadata=payload.get("metadata", {}),
    )


# ---------------------------------------------------------------------------
# chart series


def write_chart_series(path, series) -> None:
    """CSV export of a chart series (stable column order and float text)."""
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CHART_HEADER)
        for point in series:
            writer.writerow(
                [
                    int(point.index),
                    repr(float(point.time)),
                    repr(float(point.statistic)),
                    repr(float(point.ucl)),
                    repr(float(point.lcl)),
                    "true" if point.signal else "false",
                ]
            )


def read_chart_series(path) -> list[ChartPoint]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"chart file not found: {path}")
    points = []
    with path.open(newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != CHART_HEADER:
            raise DataError(f"{path}: unexpected chart header {header}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(CHART_HEADER):
                raise DataError(f"line {line_no}: expected {len(CHART_HEADER)} columns")
            points.append(
                ChartPoint(
                    index=int(row[0]),
                    time=float(row[1]),
                    statistic=float(row[2]),
                    ucl=float(row[3]),
                    lcl=float(row[4]),
                    signal=row[5] == "true",
                )
            )
    return points


def write_chart_svg(path, series, *, width=640, height=320) -> None:
    """Companion line plot of the statistic against its limits (plain SVG)."""
    series = list(series)
    pad = 40
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if series:
        xs = [p.time for p in series]
        values = [p.statistic for p in series] + [p.ucl for p in series] + [
            p.lcl for p in series
        ]
        x_lo, x_hi = min(xs), max(xs)
        y_lo, y_hi = min(values), max(values)
        x_span = (x_hi - x_lo) or 1.0
        y_span = (y_hi - y_lo) or 1.0

        def sx(x):
            return pad + (x - x_lo) / x_span * (width - 2 * pad)

        def sy(y):
            return height - pad - (y - y_lo) / y_span * (height - 2 * pad)

        def polyline(getter, color, dash=""):
            pts = " ".join(f"{sx(p.time):.2f},{sy(getter(p)):.2f}" for p in series)
            dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
            return (
                f'<polyline fill="none" stroke="{color}" stroke-width="1.5"'
                f"{dash_attr} points=\"{pts}\"/>"
            )

        lines.append(polyline(lambda p: p.ucl, "#cc0000", dash="4 3"))
        lines.append(polyline(lambda p: p.lcl, "#cc0000", dash="4 3"))
        lines.append(polyline(lambda p: p.statistic, "#1f4e9c"))
        for p in series:
            if p.signal:
                lines.append(
                    f'<circle cx="{sx(p.time):.2f}" cy="{sy(p.statistic):.2f}" '
                    'r="3.5" fill="#cc0000"/>'
                )
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# tensor series (filter output consumed by the monitor command)


def write_tensor_series(path, times, tensors) -> None:
    """Serialize per-visit coefficient tensors with their time stamps."""
    times = [float(t) for t in times]
    tensors = [np.asarray(t, dtype=float) for t in tensors]
    if len(times) != len(tensors):
        raise DataError("times and tensors must have equal lengths")
    if tensors and any(t.shape != tensors[0].shape for t in tensors):
        raise DataError("all tensors must share one shape")
    payload = {
        "shape": list(tensors[0].shape) if tensors else [],
        "times": times,
        "tensors": [t.tolist() for t in tensors],
    }
    document = {
        "format": TENSOR_FORMAT,
        "format_version": 1,
        "checksum": hashlib.sha256(_canonical(payload)).hexdigest(),
        "payload": payload,
    }
    Path(path).write_text(json.dumps(document, indent=1, sort_keys=True) + "\n")


def read_tensor_series(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"tensor file not found: {path}")
    document = json.loads(path.read_text())
    if document.get("format") != TENSOR_FORMAT:
        raise DataError(f"{path}: not a {TENSOR_FORMAT} file")
    payload = document["payload"]
    if hashlib.sha256(_canonical(payload)).hexdigest() != document.get("checksum"):
        raise DataError(f"{path}: checksum mismatch; file is corrupt or truncated")
    tensors = [np.asarray(t, dtype=float) for t in payload["tensors"]]
    return payload["times"], tensors
