"""TOML reading for provider maps and scenario files."""

import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import DataError


def parse_config(text, source="<config>"):
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise DataError("malformed-file", f"{source}: {exc}") from None


def _toml_value(val):
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, (int, float)):
        return repr(val)
    escaped = str(val).replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def format_flat(mapping):
    """Write a flat {key: scalar} mapping as TOML."""
    return "".join(f"{key} = {_toml_value(val)}\n" for key, val in mapping.items())
