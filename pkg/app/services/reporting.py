"""
CSV output with a declared schema

Rows are validated against the schema before anything touches the file, so a
bad row never leaves a half-written CSV behind.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Tuple, Union

from app.exceptions import ContractError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CsvSchema:
    """Ordered columns with a python type each; columns listed in `optional` may be None"""
    columns: Tuple[Tuple[str, type], ...]
    optional: frozenset = field(default_factory=frozenset)

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.columns]

    def validate(self, row: Mapping[str, Any], index: int = 0) -> None:
        unknown = set(row) - set(self.names)
        if unknown:
            raise ContractError(f"row {index}: unknown column(s) {sorted(unknown)}")
        for name, kind in self.columns:
            value = row.get(name)
            if value is None:
                if name not in self.optional:
                    raise ContractError(f"row {index}: missing required column '{name}'")
                continue
            if kind is float and isinstance(value, int) and not isinstance(value, bool):
                continue
            if kind is str and isinstance(value, Enum):
                continue
            if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
                raise ContractError(
                    f"row {index}: column '{name}' expects {kind.__name__}, got {type(value).__name__}"
                )


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


def render_csv(rows: Sequence[Mapping[str, Any]], schema: CsvSchema, header: bool = True) -> str:
    for index, row in enumerate(rows):
        schema.validate(row, index)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    if header:
        writer.writerow(schema.names)
    for row in rows:
        writer.writerow([_cell(row.get(name)) for name in schema.names])
    return buffer.getvalue()


def emit_csv(rows: Iterable[Mapping[str, Any]], schema: CsvSchema, path: Union[str, Path]) -> Path:
    """
    Write header then rows with RFC-4180 quoting and a trailing newline

    Raises:
        ContractError: if any row violates the schema (the file is not touched)
    """
    rows = list(rows)
    text = render_csv(rows, schema)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")
    logger.info("📝 Wrote %d rows to %s", len(rows), path)
    return path


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


class CsvAppender:
    """Append-only CSV: the header is written on creation, rows are flushed one by one"""

    def __init__(self, path: Union[str, Path], schema: CsvSchema):
        self.path = Path(path)
        self.schema = schema
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(render_csv([], schema), encoding="utf-8", newline="")
        self.count = 0

    def append(self, row: Mapping[str, Any]) -> None:
        text = render_csv([row], self.schema, header=False)
        with self.path.open("a", encoding="utf-8", newline="") as f:
            f.write(text)
        self.count += 1


# ----------------------------------------------------------------------------
# Schemas
# ----------------------------------------------------------------------------

METRICS_SCHEMA = CsvSchema(
    columns=(
        ("kind", str),
        ("step", int),
        ("lr", float),
        ("loss", float),
        ("grad_norm", float),
        ("wall_ms", float),
        ("split", str),
        ("accuracy", float),
        ("mAP", float),
    ),
    optional=frozenset({"lr", "loss", "grad_norm", "wall_ms", "split", "accuracy", "mAP"}),
)

BENCH_SCHEMA = CsvSchema(
    columns=(
        ("operator", str),
        ("seq_len", int),
        ("channels", int),
        ("batch", int),
        ("reps", int),
        ("wall_ms", float),
        ("tokens_per_sec", float),
        ("peak_bytes", int),
        ("status", str),
    ),
    optional=frozenset({"wall_ms", "tokens_per_sec"}),
)

ABLATION_SCHEMA = CsvSchema(
    columns=(
        ("variant", str),
        ("scan", str),
        ("fusion", str),
        ("token_shift", str),
        ("cutmix", str),
        ("seed", int),
        ("steps", int),
        ("final_loss", float),
        ("accuracy", float),
        ("mAP", float),
        ("data_hash", str),
    ),
    optional=frozenset({"mAP"}),
)

GRADCHECK_SCHEMA = CsvSchema(
    columns=(
        ("scope", str),
        ("name", str),
        ("max_rel_err", float),
        ("tol", float),
        ("passed", str),
        ("message", str),
    ),
    optional=frozenset({"message"}),
)


def rows_from_models(models: Iterable[Any], schema: CsvSchema) -> List[Dict[str, Any]]:
    """Project pydantic models onto a schema's columns"""
    names = schema.names
    return [{name: getattr(item, name) for name in names} for item in models]
