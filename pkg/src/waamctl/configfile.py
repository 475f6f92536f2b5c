"""Versioned key-value config files.

Format: one `key = value` per line, `#` comments, blank lines ignored.
Every file must carry `schema_version`; unknown keys are errors so that a
stale or misspelled parameter cannot silently diverge from a run.
"""

from __future__ import annotations

import dataclasses

from .errors import DataFormatError

SCHEMA_KEY = "schema_version"


def parse_kv_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key or not value:
                raise DataFormatError(f"{path}:{lineno}: empty key or value")
            if key in out:
                raise DataFormatError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out


def _convert(name: str, text: str, target_type):
    try:
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
        if target_type is bool:
            if text.lower() in ("true", "1"):
                return True
            if text.lower() in ("false", "0"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        return text
    except ValueError as exc:
        raise DataFormatError(f"key {name!r}: {exc}") from exc


def load_dataclass(cls, path, schema_version: int):
    """Build a config dataclass from a key-value file, defaults for absent keys."""
    raw = parse_kv_file(path)
    if SCHEMA_KEY not in raw:
        raise DataFormatError(f"{path}: missing {SCHEMA_KEY}")
    version = _convert(SCHEMA_KEY, raw.pop(SCHEMA_KEY), int)
    if version != schema_version:
        raise DataFormatError(f"{path}: schema_version {version} != expected {schema_version}")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise DataFormatError(f"{path}: unknown keys {unknown}")
    kwargs = {name: _convert(name, text, type(getattr(defaults, name)))
              for name, text in raw.items()}
    return dataclasses.replace(defaults, **kwargs)


def dump_dataclass(cfg, path, schema_version: int) -> None:
    with open(path, "w") as fh:
        fh.write(f"{SCHEMA_KEY} = {schema_version}\n")
        for field in dataclasses.fields(cfg):
            value = getattr(cfg, field.name)
            text = repr(value) if not isinstance(value, str) else value
            fh.write(f"{field.name} = {text}\n")


def snapshot(cfg) -> dict:
    """Plain-dict snapshot of a config dataclass, for manifests and sidecars."""
    return dataclasses.asdict(cfg)
