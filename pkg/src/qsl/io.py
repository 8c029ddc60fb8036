"""Run records, matrix files and quantization-error observations."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from qsl.errors import ConfigError, SchemaError, ValidationError
from qsl.laws import effective_g
from qsl.quant import Granularity

RUN_FIELDS = ("n_params", "d_tokens", "precision", "granularity", "fc2_8bit", "final_loss")
RUN_PRECISIONS = ("bf16", "w4a4", "w4a16", "w16a4")
RUN_GRANULARITIES = ("g32", "g64", "g128", "g256", "per_vector")

# hidden size per model size of the reference architecture table; used as
# the per-vector group length when no explicit length is given
REFERENCE_HIDDEN = {74e6: 768, 145e6: 1024, 297e6: 1536, 595e6: 1536, 973e6: 2048, 2.8e9: 3072}


@dataclass(frozen=True)
class RunRecord:
    n_params: float
    d_tokens: float
    precision: str
    granularity: Optional[Granularity]
    fc2_8bit: bool
    final_loss: float

    def __post_init__(self):
        bad = []
        if not self.n_params > 0:
            bad.append("n_params")
        if not self.d_tokens > 0:
            bad.append("d_tokens")
        if self.precision not in RUN_PRECISIONS:
            bad.append("precision")
        if self.precision != "bf16" and (
            self.granularity is None or self.granularity.name not in RUN_GRANULARITIES
        ):
            bad.append("granularity")
        if not (self.final_loss > 0 and np.isfinite(self.final_loss)):
            bad.append("final_loss")
        if bad:
            raise ValidationError(f"invalid run record fields: {', '.join(bad)}", bad)

    @property
    def key(self):
        if self.precision == "bf16":
            return (self.n_params, self.d_tokens, "bf16", None, False)
        return (self.n_params, self.d_tokens, self.precision, self.granularity.name, self.fc2_8bit)

    @property
    def tag(self) -> str:
        return self.precision + ("_fc2_8" if self.fc2_8bit and self.precision != "bf16" else "")

    def to_row(self) -> dict:
        return {
            "n_params": _num_str(self.n_params),
            "d_tokens": _num_str(self.d_tokens),
            "precision": self.precision,
            "granularity": self.granularity.name if self.granularity else "",
            "fc2_8bit": "true" if self.fc2_8bit else "false",
            "final_loss": repr(float(self.final_loss)),
        }


def _num_str(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _parse_bool(s, line, name) -> bool:
    v = str(s).strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no", ""):
        return False
    raise SchemaError(f"cannot parse {name}={s!r} as a boolean", line)


def _parse_float(s, line, name) -> float:
    try:
        return float(s)
    except (TypeError, ValueError):
        raise SchemaError(f"cannot parse {name}={s!r} as a number", line) from None


def _record(d: dict, line: int) -> RunRecord:
    missing = [f for f in RUN_FIELDS if f not in d]
    if missing:
        raise SchemaError(f"missing fields {missing}", line)
    prec = str(d["precision"]).strip().lower()
    gran_s = str(d["granularity"] or "").strip().lower()
    try:
        gran = Granularity.from_name(gran_s) if gran_s else None
    except ConfigError:
        gran = None
        if prec != "bf16":
            raise ValidationError(f"line {line}: unknown granularity {gran_s!r}", ["granularity"])
    fc2 = d["fc2_8bit"]
    fc2 = fc2 if isinstance(fc2, bool) else _parse_bool(fc2, line, "fc2_8bit")
    try:
        return RunRecord(
            _parse_float(d["n_params"], line, "n_params"),
            _parse_float(d["d_tokens"], line, "d_tokens"),
            prec,
            None if prec == "bf16" else gran,
            fc2 if prec != "bf16" else False,
            _parse_float(d["final_loss"], line, "final_loss"),
        )
    except ValidationError as e:
        raise ValidationError(f"line {line}: {e}", e.fields) from None


def _check_duplicates(records: list[RunRecord], lines: list[int]) -> None:
    seen = {}
    for r, ln in zip(records, lines):
        if r.key in seen:
            raise ValidationError(
                f"line {ln}: duplicate run (also on line {seen[r.key]})",
                ["n_params", "d_tokens", "precision", "granularity"],
            )
        seen[r.key] = ln


def parse_runs(source, format: str | None = None) -> list[RunRecord]:
    """Read run records from a path, an open file or a string of text.

    ``format`` is ``"csv"`` or ``"json"``; when omitted it is taken from the
    file suffix (CSV otherwise).
    """
    if hasattr(source, "read"):
        text = source.read()
        name = getattr(source, "name", "")
    else:
        name = str(source)
        with open(source) as fh:
            text = fh.read()
    if format is None:
        format = "json" if name.endswith(".json") else "csv"
    if format == "json":
        return _parse_runs_json(text)
    if format == "csv":
        return _parse_runs_csv(text)
    raise SchemaError(f"unknown runs format {format!r}")


def _parse_runs_csv(text: str) -> list[RunRecord]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError("empty file: no header", 1) from None
    if tuple(header) != RUN_FIELDS:
        raise SchemaError(f"expected header {','.join(RUN_FIELDS)}", 1)
    records, lines = [], []
    for row in reader:
        ln = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(RUN_FIELDS):
            raise SchemaError(f"expected {len(RUN_FIELDS)} columns, got {len(row)}", ln)
        records.append(_record(dict(zip(RUN_FIELDS, (c.strip() for c in row))), ln))
        lines.append(ln)
    _check_duplicates(records, lines)
    return records


def _parse_runs_json(text: str) -> list[RunRecord]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON: {e.msg}", e.lineno) from None
    if isinstance(data, dict):
        data = data.get("runs")
    if not isinstance(data, list):
        raise SchemaError("expected a list of run objects")
    records, idx = [], []
    for i, d in enumerate(data, start=1):
        if not isinstance(d, dict):
            raise SchemaError("run entries must be objects", i)
        records.append(_record(d, i))
        idx.append(i)
    _check_duplicates(records, idx)
    return records


def write_runs(records: Iterable[RunRecord], fh, format: str = "csv") -> None:
    rows = [r.to_row() for r in records]
    if format == "csv":
        w = csv.DictWriter(fh, fieldnames=RUN_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    elif format == "json":
        for r in rows:
            r["n_params"] = float(r["n_params"])
            r["d_tokens"] = float(r["d_tokens"])
            r["final_loss"] = float(r["final_loss"])
            r["fc2_8bit"] = r["fc2_8bit"] == "true"
        json.dump(rows, fh, indent=1)
        fh.write("\n")
    else:
        raise SchemaError(f"unknown runs format {format!r}")


def reference_hidden(n_params: float) -> Optional[int]:
    for n, h in REFERENCE_HIDDEN.items():
        if abs(n_params / n - 1) < 0.05:
            return h
    return None


def delta_observations(
    records: list[RunRecord], tag: str, vector_len: Optional[int] = None
) -> list[tuple]:
    """Pair quantized runs with their bf16 twins: rows of (N, D, g_eff, delta).

    ``tag`` selects the precision (``w4a4``, ``w16a4_fc2_8``, ...). Per-vector
    runs use ``vector_len`` or, failing that, the reference hidden size for N.
    """
    base = {(r.n_params, r.d_tokens): r.final_loss for r in records if r.precision == "bf16"}
    out = []
    for r in records:
        if r.precision == "bf16" or r.tag != tag:
            continue
        b = base.get((r.n_params, r.d_tokens))
        if b is None:
            continue
        vlen = vector_len or reference_hidden(r.n_params)
        out.append((r.n_params, r.d_tokens, effective_g(r.granularity, vlen), r.final_loss - b))
    return out


def read_matrix(path) -> np.ndarray:
    """Read a CSV of reals as a 2-D array (one row per line)."""
    try:
        with open(path) as fh:
            rows = [row for row in csv.reader(fh) if row and any(c.strip() for c in row)]
    except OSError as e:
        raise SchemaError(f"cannot read {path}: {e.strerror}") from None
    if not rows:
        raise SchemaError(f"{path}: no data")
    width = len(rows[0])
    out = []
    for i, row in enumerate(rows, start=1):
        if len(row) != width:
            raise SchemaError(f"ragged row ({len(row)} values, expected {width})", i)
        try:
            out.append([float(c) for c in row])
        except ValueError:
            raise SchemaError("non-numeric value", i) from None
    return np.array(out, dtype=np.float64)


def write_matrix(x, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    for row in np.atleast_2d(x):
        w.writerow([repr(float(v)) for v in row])
