"""YAML run configuration and the provenance manifest written next to every output."""

from __future__ import annotations

import hashlib
import math
import os
from importlib.metadata import PackageNotFoundError, version

import yaml
from natsort import natsorted

from extremal_partition.errors import ConfigError

TOP_LEVEL_KEYS = {
    "seed", "sites", "partition", "panel", "scale", "margins", "pairs", "penalty",
    "optimizer", "simulate", "merge", "diagnose",
}
_MISSING = object()


def package_version() -> str:
    try:
        return version("extremal-partition")
    except PackageNotFoundError:
        return "unknown"


def _key_lines(node, prefix: str = "", lines: dict | None = None) -> dict:
    """Map dotted key paths to the 1-based line they appear on."""
    lines = {} if lines is None else lines
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = "{}.{}".format(prefix, key_node.value) if prefix else str(key_node.value)
            lines[path] = key_node.start_mark.line + 1
            _key_lines(value_node, path, lines)
    return lines


class RunConfig:
    """Parsed configuration file with typed, line-aware accessors.

    Keys are dotted paths (``partition.regions``). Relative paths resolve against the
    directory holding the file.
    """

    def __init__(self, data: dict, path: str | None = None, lines: dict | None = None,
                 digest: str | None = None):
        self.data = data
        self.file_path = path
        self.lines = lines or {}
        self.digest = digest
        self.base_dir = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()
        self.overrides: dict = {}

    def error(self, key: str, message: str) -> ConfigError:
        name = os.path.basename(self.file_path) if self.file_path else "<config>"
        line = self.lines.get(key)
        where = "{}:{}".format(name, line) if line else name
        return ConfigError("{}: {} {}".format(where, key, message))

    def has(self, key: str) -> bool:
        return self.raw(key, _MISSING) is not _MISSING

    def raw(self, key: str, default=_MISSING):
        if key in self.overrides:
            return self.overrides[key]
        node = self.data
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                if default is _MISSING:
                    raise self.error(key, "is required")
                return default
            node = node[part]
        if node is None and default is not _MISSING:
            return default
        return node

    def integer(self, key: str, default=_MISSING, minimum: int | None = None) -> int:
        value = self.raw(key, default)
        if isinstance(value, bool) or not isinstance(value, int):
            raise self.error(key, "must be an integer")
        if minimum is not None and value < minimum:
            if minimum == 1:
                raise self.error(key, "must be a positive integer")
            raise self.error(key, "must be an integer >= {}".format(minimum))
        return value

    def number(self, key: str, default=_MISSING, low: float | None = None, high: float | None = None,
               allow_inf: bool = False) -> float:
        value = self._as_number(key, self.raw(key, default))
        if math.isinf(value) and not allow_inf:
            raise self.error(key, "must be finite")
        if (low is not None and value < low) or (high is not None and value > high):
            raise self.error(key, "must lie in [{}, {}]".format(low, high))
        return value

    def numbers(self, key: str, default=_MISSING, allow_inf: bool = False) -> list[float]:
        value = self.raw(key, default)
        if not isinstance(value, (list, tuple)):
            value = [value]
        out = [self._as_number(key, v) for v in value]
        if not allow_inf and any(math.isinf(v) for v in out):
            raise self.error(key, "must be finite")
        return out

    def choice(self, key: str, options: tuple, default=_MISSING) -> str:
        value = self.raw(key, default)
        if value not in options:
            raise self.error(key, "must be one of {}".format(", ".join(str(o) for o in options)))
        return value

    def flag(self, key: str, default: bool = False) -> bool:
        value = self.raw(key, default)
        if not isinstance(value, bool):
            raise self.error(key, "must be true or false")
        return value

    def path(self, key: str, default=_MISSING, must_exist: bool = True, directory: bool = False) -> str | None:
        value = self.raw(key, default)
        if value is None:
            return None
        if not isinstance(value, str):
            raise self.error(key, "must be a path")
        resolved = os.path.normpath(os.path.join(self.base_dir, os.path.expanduser(value)))
        exists = os.path.isdir(resolved) if directory else os.path.isfile(resolved)
        if must_exist and not exists:
            raise self.error(key, "refers to a missing {}: {}".format(
                "directory" if directory else "file", resolved))
        return resolved

    def _as_number(self, key: str, value) -> float:
        if isinstance(value, str) and value.strip().lower() in ("inf", "+inf", "infinity"):
            return math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(key, "must be a number")
        if math.isnan(value):
            raise self.error(key, "must be a number")
        return float(value)


def load_config(config_path: str) -> RunConfig:
    """Load a YAML run configuration, recording line numbers for validation messages."""
    name = os.path.basename(config_path)
    try:
        with open(config_path, "rb") as f:
            content = f.read()
    except OSError as exc:
        raise ConfigError("{}: cannot read configuration ({})".format(name, exc.strerror))
    try:
        text = content.decode("utf-8")
        data = yaml.safe_load(text) or {}
        lines = _key_lines(yaml.compose(text, Loader=yaml.SafeLoader))
    except UnicodeDecodeError:
        raise ConfigError("{}: not UTF-8 text".format(name))
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = "{}:{}".format(name, mark.line + 1) if mark else name
        raise ConfigError("{}: invalid YAML ({})".format(where, getattr(exc, "problem", exc)))
    if not isinstance(data, dict):
        raise ConfigError("{}: top level must be a mapping".format(name))
    config = RunConfig(data, config_path, lines, hashlib.sha256(content).hexdigest())
    for key in data:
        if key not in TOP_LEVEL_KEYS:
            raise config.error(str(key), "is not a known setting")
    return config


def write_run_manifest(out_dir: str, command: str, config: RunConfig, seed: int,
                       files: list[str]) -> str:
    """Write manifest.yml recording how the outputs in out_dir were produced."""
    path = os.path.join(out_dir, "manifest.yml")
    written = natsorted({os.path.relpath(f, out_dir) for f in files})
    doc = {
        "command": command,
        "version": package_version(),
        "config": os.path.basename(config.file_path) if config.file_path else None,
        "config_sha256": config.digest,
        "seed": seed,
        "files": written,
    }
    with open(path, "w") as f:
        f.write("# Generated by: extremal-partition {}\n".format(command))
        yaml.safe_dump(doc, f, sort_keys=False, default_flow_style=False)
    return path
