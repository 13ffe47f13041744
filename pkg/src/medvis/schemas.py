"""Versioned JSON Schemas for every JSON artifact the CLI writes."""

from __future__ import annotations

import jsonschema

_num_or_null = {"type": ["number", "null"]}
_metric_row = {
    "type": "object",
    "required": ["dice", "jaccard", "hd95", "nsd", "specificity", "sensitivity"],
    "additionalProperties": _num_or_null,
}
_ttest = {
    "type": "object",
    "required": ["a", "b", "metric", "p"],
    "properties": {
        "metric": {"type": "string"},
        "p": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "t": {"type": "number"},
        "n": {"type": "integer", "minimum": 2},
        "mean_diff": {"type": "number"},
        "degenerate": {"type": "boolean"},
    },
}

BUDGET_REPORT = {
    "$id": "budget-report/1",
    "type": "object",
    "required": ["schema", "variants"],
    "properties": {
        "schema": {"const": "budget-report/1"},
        "variants": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["variant", "total", "trainable", "frozen", "gflops", "ms_per_sample"],
                "properties": {
                    "variant": {"type": "string"},
                    "total": {"type": "integer", "minimum": 0},
                    "trainable": {"type": "integer", "minimum": 0},
                    "frozen": {"type": "integer", "minimum": 0},
                    "gflops": {"type": "number", "minimum": 0},
                    "ms_per_sample": _num_or_null,
                },
            },
        },
    },
}

RANK_SWEEP = {
    "$id": "rank-sweep/1",
    "type": "object",
    "required": ["schema", "rows", "tests"],
    "properties": {
        "schema": {"const": "rank-sweep/1"},
        "rows": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["rank", "trainable_params", "dice", "dice_sd", "nsd", "nsd_sd"],
                "properties": {
                    "rank": {"type": "integer", "minimum": 1},
                    "trainable_params": {"type": "integer", "minimum": 1},
                    "dice": _num_or_null, "dice_sd": _num_or_null,
                    "nsd": _num_or_null, "nsd_sd": _num_or_null,
                },
                "additionalProperties": False,
            },
        },
        "tests": {"type": "array", "items": _ttest},
    },
}

METRICS_REPORT = {
    "$id": "metrics-report/1",
    "type": "object",
    "required": ["label", "tau_mm", "spacing", "cases", "aggregate"],
    "properties": {
        "tau_mm": {"type": "number", "exclusiveMinimum": 0},
        "spacing": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "cases": {"type": "object", "additionalProperties": _metric_row},
        "aggregate": {"type": "object"},
    },
}

COMPARISON = {
    "$id": "comparison/1",
    "type": "object",
    "required": ["schema", "budget", "rows", "tests", "reports"],
    "properties": {
        "schema": {"const": "comparison/1"},
        "budget": BUDGET_REPORT,
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["variant", "metric", "mean", "sd", "n"],
            },
        },
        "tests": {"type": "array", "items": _ttest},
        "reports": {"type": "object", "additionalProperties": {"type": "array", "items": METRICS_REPORT}},
    },
}

MANIFEST = {
    "$id": "run-manifest/1",
    "type": "object",
    "required": ["schema", "command", "config", "seeds", "threads", "code_version", "timings", "outputs"],
    "properties": {
        "schema": {"const": "run-manifest/1"},
        "command": {"type": "string"},
        "config": {"type": "object"},
        "seeds": {"type": "object"},
        "threads": {"type": "integer", "minimum": 1},
        "code_version": {"type": "string"},
        "weight_source": {"type": ["string", "null"]},
        "timings": {"type": "object"},
        "outputs": {"type": "array", "items": {"type": "string"}},
    },
}

ACTIVATIONS = {
    "$id": "activations/1",
    "type": "object",
    "required": ["schema", "grid", "tokens", "files", "skipped"],
    "properties": {
        "schema": {"const": "activations/1"},
        "grid": {"type": "array", "items": {"type": "integer"}, "minItems": 3, "maxItems": 3},
        "tokens": {"type": "integer", "minimum": 1},
        "files": {"type": "object", "additionalProperties": {"type": "string"}},
        "skipped": {
            "type": "array",
            "items": {"type": "object", "required": ["tap", "reason"]},
        },
    },
}

REPORT_TABLE = {
    "$id": "report-table/1",
    "type": "object",
    "required": ["schema", "rows", "has_p"],
    "properties": {
        "schema": {"const": "report-table/1"},
        "has_p": {"type": "boolean"},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["run", "metric", "mean", "sd", "n"],
                "properties": {"p": _num_or_null},
            },
        },
    },
}

SCHEMAS = {s["$id"]: s for s in (BUDGET_REPORT, RANK_SWEEP, METRICS_REPORT, COMPARISON, MANIFEST,
                                 ACTIVATIONS, REPORT_TABLE)}


def validate(obj, schema_id: str) -> None:
    """Raise ``jsonschema.ValidationError`` unless ``obj`` matches the named schema."""
    jsonschema.validate(obj, SCHEMAS[schema_id])
