"""Pipeline configuration: a small sectioned key = value text format.

Grammar (one construct per line):

    [section]            section header
    key = value          assignment inside the current section
    # comment            full-line comments; blank lines ignored

Values are typed by the schema: integers, reals, booleans (true/false),
names, real vectors (comma separated), and state lists (semicolon separated
vectors). The literal `auto` is accepted where the schema allows it. Unknown
sections or keys are errors, and every parse error carries the offending
line and column.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .system import BoxSet


class ConfigError(Exception):
    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        self.line = line
        self.col = col
        where = f" (line {line}, col {col})" if line is not None else ""
        super().__init__(message + where)


_SECTION_RE = re.compile(r"^\[([a-z_][a-z0-9_]*)\]\s*$")
_KEY_RE = re.compile(r"^[a-z_][a-z0-9_]*$")


def _parse_lines(text: str) -> dict[str, dict[str, tuple[str, int, int]]]:
    """Raw parse: section -> key -> (value string, line, col of value)."""
    sections: dict[str, dict[str, tuple[str, int, int]]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        m = _SECTION_RE.match(line.strip())
        if m:
            current = m.group(1)
            if current in sections:
                raise ConfigError(f"duplicate section [{current}]", lineno, 1)
            sections[current] = {}
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value' or '[section]'", lineno, 1)
        if current is None:
            raise ConfigError("assignment before any section header", lineno, 1)
        key_part, value_part = line.split("=", 1)
        key = key_part.strip()
        if not _KEY_RE.match(key):
            raise ConfigError(f"invalid key {key!r}", lineno, 1 + len(key_part) - len(key_part.lstrip()))
        if key in sections[current]:
            raise ConfigError(f"duplicate key {key!r} in [{current}]", lineno, 1)
        col = len(key_part) + 2
        sections[current][key] = (value_part.strip(), lineno, col)
    return sections


def _convert(kind: str, text: str, line: int, col: int) -> Any:
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "float_or_auto":
            return "auto" if text == "auto" else float(text)
        if kind == "bool":
            if text in ("true", "false"):
                return text == "true"
            raise ValueError("expected true or false")
        if kind == "name":
            if not text:
                raise ValueError("empty value")
            return text
        if kind == "vector":
            return np.array([float(v) for v in text.split(",")], dtype=float)
        if kind == "float_list":
            return [float(v) for v in text.split(",")]
        if kind == "name_list":
            return [v.strip() for v in text.split(",") if v.strip()]
        if kind == "state_list":
            return [np.array([float(v) for v in part.split(",")], dtype=float)
                    for part in text.split(";") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad {kind} value {text!r}: {exc}", line, col) from None
    raise AssertionError(f"unknown schema kind {kind}")


# section -> key -> (kind, default); _REQUIRED marks keys without defaults
_REQUIRED = object()

_SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "system": {"name": ("name", _REQUIRED)},   # extra float params validated below
    "sampling": {
        "lower": ("vector", _REQUIRED),
        "upper": ("vector", _REQUIRED),
        "n_min": ("int", 1000),
        "delta": ("float", 0.001),
        "growth": ("float", 3.0),
        "n_start": ("int", 243),
        "n_max": ("int", 2_000_000),
        "seed": ("int", 0),
        "zero_tol": ("float_or_auto", "auto"),
    },
    "boundary": {
        "epsilon": ("float_or_auto", "auto"),
        "box_face_is_boundary": ("bool", False),
    },
    "fit": {
        "modes": ("name_list", ["uniform", "nonuniform", "multi"]),
        "num_cbfs": ("int", 2),
        "margin": ("float_or_auto", 0.0),   # auto: one boundary-extraction epsilon
        "objective": ("name", "sample_count"),
        "restarts": ("int", 8),
        "iterations": ("int", 300),
        "population": ("int", 32),
        "seed": ("int", 0),
        "probes": ("int", 256),
        "volume_lower": ("vector", None),
        "volume_upper": ("vector", None),
    },
    "simulate": {
        "x_init": ("state_list", _REQUIRED),
        "x_goal": ("vector", _REQUIRED),
        "horizon": ("float", 10.0),
        "dt": ("float", 0.01),
        "kp": ("float", 10.0),
        "kappa": ("float_list", [5.0]),
        "require_safe_start": ("bool", True),
        "spline_t": ("float_or_auto", "auto"),
        "on_infeasible": ("name", "continue"),
    },
    "output": {"dir": ("name", "out")},
}


@dataclass
class PipelineConfig:
    system_name: str
    system_params: dict[str, float]
    sampling: dict[str, Any]
    boundary: dict[str, Any]
    fit: dict[str, Any]
    simulate: dict[str, Any]
    output_dir: str
    raw_sections: dict[str, dict[str, str]] = field(default_factory=dict)

    def section_hash(self, *names: str) -> str:
        """Digest of the given sections' canonical key = value text."""
        parts = []
        for name in names:
            body = self.raw_sections.get(name, {})
            parts.append(f"[{name}]")
            parts.extend(f"{k}={v}" for k, v in sorted(body.items()))
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()

    def sampling_box(self) -> BoxSet:
        return BoxSet(self.sampling["lower"], self.sampling["upper"])

    def volume_region(self) -> BoxSet | None:
        lo, hi = self.fit["volume_lower"], self.fit["volume_upper"]
        if lo is None and hi is None:
            return None
        if lo is None or hi is None:
            raise ConfigError("volume_lower and volume_upper must be given together")
        return BoxSet(lo, hi)


def parse_config(text: str) -> PipelineConfig:
    sections = _parse_lines(text)

    unknown_sections = set(sections) - set(_SCHEMA)
    if unknown_sections:
        name = sorted(unknown_sections)[0]
        _, (_, line, col) = next(iter(sections[name].items()), ("", ("", 1, 1))) \
            if sections[name] else ("", ("", 1, 1))
        raise ConfigError(f"unknown section [{name}]; expected one of {sorted(_SCHEMA)}",
                          line if sections[name] else None)

    typed: dict[str, dict[str, Any]] = {}
    for name, schema in _SCHEMA.items():
        body = sections.get(name, {})
        out: dict[str, Any] = {}
        if name == "system":
            if "name" not in body:
                raise ConfigError("missing required key 'name' in [system]")
            for key, (val, line, col) in body.items():
                if key == "name":
                    out["name"] = _convert("name", val, line, col)
                else:
                    out[key] = _convert("float", val, line, col)
        else:
            for key, (val, line, col) in body.items():
                if key not in schema:
                    raise ConfigError(f"unknown key {key!r} in [{name}]; "
                                      f"accepted: {sorted(schema)}", line, col)
                out[key] = _convert(schema[key][0], val, line, col)
            for key, (kind, default) in schema.items():
                if key not in out:
                    if default is _REQUIRED:
                        raise ConfigError(f"missing required key {key!r} in [{name}]")
                    out[key] = default
        typed[name] = out

    _validate(typed)
    raw = {name: {k: v for k, (v, _, _) in body.items()} for name, body in sections.items()}
    sys_params = {k: v for k, v in typed["system"].items() if k != "name"}
    return PipelineConfig(
        system_name=typed["system"]["name"],
        system_params=sys_params,
        sampling=typed["sampling"],
        boundary=typed["boundary"],
        fit=typed["fit"],
        simulate=typed["simulate"],
        output_dir=typed["output"]["dir"],
        raw_sections=raw,
    )


def _validate(typed: dict[str, dict[str, Any]]) -> None:
    samp = typed["sampling"]
    if samp["lower"].size != samp["upper"].size:
        raise ConfigError("sampling lower/upper dimensions differ")
    if np.any(samp["lower"] > samp["upper"]):
        raise ConfigError("sampling lower exceeds upper")
    if not 0.0 < samp["delta"] <= 1.0:
        raise ConfigError("sampling delta must lie in (0, 1]")
    if samp["growth"] <= 1.0:
        raise ConfigError("sampling growth must exceed 1")
    fit = typed["fit"]
    bad = [m for m in fit["modes"] if m not in ("uniform", "nonuniform", "multi")]
    if bad:
        raise ConfigError(f"unknown fit mode {bad[0]!r}")
    if fit["objective"] not in ("sample_count", "integral"):
        raise ConfigError(f"unknown fit objective {fit['objective']!r}")
    if typed["simulate"]["on_infeasible"] not in ("continue", "stop"):
        raise ConfigError("simulate on_infeasible must be continue or stop")
    for x0 in typed["simulate"]["x_init"]:
        if x0.size != samp["lower"].size:
            raise ConfigError("simulate x_init dimension differs from sampling bounds")


def load_config(path) -> PipelineConfig:
    with open(path, "r") as f:
        return parse_config(f.read())
