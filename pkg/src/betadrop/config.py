"""JSON run-configuration loading and validation.

The committed schema (config_schema.json) is the single source of defaults;
unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import json
from importlib import resources

from .errors import BetadropError


class ConfigError(BetadropError, ValueError):
    """Malformed or invalid run configuration (a usage error)."""


def _schema() -> dict:
    with resources.files("betadrop").joinpath("config_schema.json").open("rb") as fh:
        return json.load(fh)


def _type_ok(value, type_names: list[str]) -> bool:
    for t in type_names:
        if t == "null" and value is None:
            return True
        if t == "string" and isinstance(value, str):
            return True
        if t == "bool" and isinstance(value, bool):
            return True
        if t == "int" and isinstance(value, int) and not isinstance(value, bool):
            return True
        if t == "number" and isinstance(value, (int, float)) and not isinstance(value, bool):
            return True
        if t.startswith("list:") and isinstance(value, list):
            inner = t.split(":", 1)[1]
            if all(_type_ok(v, [inner]) for v in value):
                return True
    return False


def _validate_section(user: dict, schema_fields: dict, path: str) -> dict:
    out = {}
    for key, value in user.items():
        if key not in schema_fields:
            raise ConfigError(f"unknown config key {path}{key!r}")
        spec = schema_fields[key]
        if not _type_ok(value, spec["type"]):
            raise ConfigError(
                f"config key {path}{key!r} expects {'/'.join(spec['type'])}, "
                f"got {type(value).__name__}"
            )
        if "choices" in spec and value not in spec["choices"]:
            raise ConfigError(
                f"config key {path}{key!r} must be one of {spec['choices']}, got {value!r}"
            )
        out[key] = value
    for key, spec in schema_fields.items():
        out.setdefault(key, spec["default"])
    return out


def validate_config(raw: dict) -> dict:
    """Fill defaults and reject unknown keys/section shapes."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    schema = _schema()
    out = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown config section {key!r}")
        spec = schema[key]
        if "fields" in spec:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            out[key] = _validate_section(value, spec["fields"], f"{key}.")
        else:
            if not _type_ok(value, spec["type"]):
                raise ConfigError(
                    f"config key {key!r} expects {'/'.join(spec['type'])}, "
                    f"got {type(value).__name__}"
                )
            out[key] = value
    for key, spec in schema.items():
        if key in out:
            continue
        out[key] = (
            _validate_section({}, spec["fields"], f"{key}.")
            if "fields" in spec
            else spec["default"]
        )
    return out


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"malformed JSON in {path}: {exc.msg} at line {exc.lineno} column {exc.colno}"
        )
    return validate_config(raw)


def describe_defaults() -> str:
    """Human-readable key/default/doc listing used by --help."""
    schema = _schema()
    lines = []
    for section, spec in schema.items():
        if "fields" in spec:
            lines.append(f"{section}:  {spec.get('_doc', '')}")
            for key, fs in spec["fields"].items():
                lines.append(
                    f"  {key} (default {json.dumps(fs['default'])}): {fs.get('doc', '')}"
                )
        else:
            lines.append(
                f"{section} (default {json.dumps(spec['default'])}): {spec.get('doc', '')}"
            )
    return "\n".join(lines)
