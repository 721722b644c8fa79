"""JSON schemas of the report artifacts, shipped under ``docs/`` as well.

The CSV files carry the same columns as the ``rows`` of their JSON twin, so
:func:`read_report_csv` parses a CSV into row objects that validate against
the row schema.
"""

from __future__ import annotations

import csv
import io

import jsonschema

from .bounds import METRIC_COLUMNS, PCB_COLUMNS

EVAL_COLUMNS = ("prediction",) + tuple(
    {"gap_percent": "Gap%", "max_eq": "Max Eq.", "mean_eq": "Mean Eq.",
     "max_ineq": "Max Ineq.", "mean_ineq": "Mean Ineq."}[c] for c in METRIC_COLUMNS)

_nullable_number = {"type": ["number", "null"]}

EVAL_ROW_SCHEMA = {
    "type": "object",
    "required": list(EVAL_COLUMNS),
    "additionalProperties": False,
    "properties": {
        "prediction": {"enum": ["mean", "svp", "point"]},
        # an undefined gap (zero optimal cost or unlabeled test data) is null
        "Gap%": _nullable_number,
        **{c: {"type": "number", "minimum": 0} for c in EVAL_COLUMNS[2:]},
    },
}

EVAL_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "proxybnn eval report",
    "type": "object",
    "required": ["format_version", "config", "columns", "rows", "n_instances", "diagnostics"],
    "properties": {
        "format_version": {"const": 1},
        "config": {"type": "object"},
        "columns": {"const": list(EVAL_COLUMNS)},
        "rows": {"type": "array", "minItems": 1, "items": EVAL_ROW_SCHEMA},
        "n_instances": {"type": "integer", "minimum": 1},
        "diagnostics": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["instance", "svp_column", "svp_score", "min_column_score"],
                "properties": {
                    "instance": {"type": "integer", "minimum": 0},
                    "svp_column": {"type": "integer", "minimum": 0},
                    "svp_score": {"type": "number", "minimum": 0},
                    "min_column_score": {"type": "number", "minimum": 0},
                },
            },
        },
    },
}

_PCB_TYPES = {"variable_id": {"type": "integer", "minimum": 0},
              "M": {"type": "integer", "minimum": 1},
              "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}}

PCB_ROW_SCHEMA = {
    "type": "object",
    "required": list(PCB_COLUMNS),
    "additionalProperties": False,
    "properties": {c: _PCB_TYPES.get(c, {"type": "number", "minimum": 0}) for c in PCB_COLUMNS},
}

PCB_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "proxybnn probabilistic confidence bound report",
    "type": "object",
    "required": ["format_version", "config", "M", "delta", "H", "alpha", "emp_bernstein_coef",
                 *PCB_COLUMNS],
    "properties": {
        "format_version": {"const": 1},
        "config": {"type": "object"},
        "M": {"type": "integer", "minimum": 1},
        "H": {"type": "integer", "minimum": 2},
        "delta": _PCB_TYPES["delta"],
        **{c: {"type": "array", "items": PCB_ROW_SCHEMA["properties"][c]}
           for c in PCB_COLUMNS if c not in ("M", "delta")},
    },
}

SCHEMAS = {"eval": EVAL_SCHEMA, "pcb": PCB_SCHEMA}


def validate(doc, schema) -> None:
    """Raise ``jsonschema.ValidationError`` for the first problem found."""
    jsonschema.Draft7Validator(schema).validate(doc)


def _cell(text):
    if text == "":
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_report_csv(text: str, columns) -> list[dict]:
    """Parse a report CSV, checking the header against ``columns``."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != tuple(columns):
        raise ValueError(f"CSV header {header} does not match {list(columns)}")
    return [dict(zip(header, map(_cell, row))) for row in reader]
