"""JSON schema for metrics.json and a validation helper."""
from __future__ import annotations

import jsonschema

_SCORE = {"type": "number", "minimum": 0.0, "maximum": 1.0}
_AVG = {
    "type": "object",
    "required": ["mAP", "R1"],
    "properties": {"mAP": {"oneOf": [_SCORE, {"type": "null"}]}, "R1": {"oneOf": [_SCORE, {"type": "null"}]}},
}

METRICS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "lifelong ReID metrics",
    "type": "object",
    "required": ["seed", "config_hash", "domains", "seen_avg", "unseen_avg"],
    "properties": {
        "seed": {"type": "integer"},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{16}$"},
        "variant": {"type": "string"},
        "domains": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {
                "type": "object",
                "required": ["mAP", "R1", "role"],
                "properties": {"mAP": _SCORE, "R1": _SCORE, "role": {"enum": ["seen", "unseen"]}},
            },
        },
        "seen_avg": _AVG,
        "unseen_avg": _AVG,
        "history": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["step", "domain", "seen_avg"],
                "properties": {"step": {"type": "integer", "minimum": 1}, "domain": {"type": "string"}},
            },
        },
        "config": {"type": "object"},
    },
}


def validate_metrics(doc: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if ``doc`` is not a valid metrics report."""
    jsonschema.validate(doc, METRICS_SCHEMA)
