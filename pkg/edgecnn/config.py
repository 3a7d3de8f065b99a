"""``key = value`` configuration text, shared by config files and checkpoints."""

from __future__ import annotations

from pathlib import Path


def parse_key_values(text: str, *, source: str = "<text>") -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    values: dict[str, str] = {}
    for line_number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ValueError(f"{source}:{line_number}: expected 'key = value': {raw_line!r}")
        if key in values:
            raise ValueError(f"{source}:{line_number}: duplicate key: {key!r}")
        values[key] = value.strip()
    return values


def format_key_values(values: dict[str, str]) -> str:
    return "".join(f"{key} = {value}\n" for key, value in values.items())


def load_config_file(path: Path) -> dict[str, str]:
    return parse_key_values(path.read_text(encoding="utf-8"), source=str(path))


def parse_int_tuple(value: str, *, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in value.replace(" ", "").split(",") if part)
    except ValueError:
        raise ValueError(f"{key} must be a comma-separated list of ints: {value!r}") from None


def parse_bool(value: str, *, key: str) -> bool:
    lowered = value.strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"{key} must be a boolean: {value!r}")
