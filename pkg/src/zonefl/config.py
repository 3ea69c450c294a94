"""Config and partition file parsing.

Config files are YAML with four optional sections mirroring the runtime
config objects (``scenario``, ``round``, ``zms``, ``zgd``) plus top-level
``rounds`` (required), ``seed``, ``strategy``, ``compare`` and ``output``.
See README.md for the full key list.

Partition files are line oriented::

    # comment
    zone <id> [display name ...]
    edge <id> <id>
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any

import yaml

from .protocol import RoundConfig
from .scenario import ConfigError, ScenarioConfig
from .zgd import ZgdConfig
from .zms import ZmsConfig

SCENARIO_KEYS = {
    "grid", "partition_file", "n_clients", "feature_dim", "task", "heterogeneity", "noise_std",
    "base_scale", "mobility", "zone_weights", "samples_per_zone", "validation_ratio",
    "truth_groups", "initial_merges",
}
SECTIONS = {
    "round": RoundConfig,
    "zms": ZmsConfig,
    "zgd": ZgdConfig,
}
TOP_KEYS = {"rounds", "seed", "strategy", "scenario", "compare", "output", *SECTIONS}
COMPARE_KEYS = {"seeds"}
OUTPUT_KEYS = {"dir", "betas"}


class ConfigFileError(ConfigError):
    """A config problem tied to a location in a file."""

    def __init__(self, message: str, field_name: str | None = None, line: int | None = None, path=None):
        where = []
        if path:
            where.append(str(path))
        if line:
            where.append(f"line {line}")
        prefix = ":".join(where)
        label = f"field '{field_name}': " if field_name else ""
        super().__init__(f"{prefix + ': ' if prefix else ''}{label}{message}", field_name)
        self.line = line


@dataclasses.dataclass(frozen=True)
class RunSettings:
    scenario: ScenarioConfig
    compare_seeds: tuple
    output_dir: str
    write_betas: bool
    raw: dict
    config_hash: str


def _key_lines(node, prefix="", out=None) -> dict:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}{k.value}"
            out[path] = k.start_mark.line + 1
            _key_lines(v, path + ".", out)
    return out


def _fields(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def parse_partition_text(text: str, path=None):
    """Returns (zone ids, edges, display names)."""
    zones, edges, names = [], [], {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0].lower()
        if kind == "zone" and len(parts) >= 2:
            zones.append(parts[1])
            if len(parts) > 2:
                names[parts[1]] = " ".join(parts[2:]).strip('"')
        elif kind == "edge" and len(parts) == 3:
            edges.append((parts[1], parts[2]))
        else:
            raise ConfigFileError(f"cannot parse {raw.strip()!r}; expected 'zone <id> [name]' or 'edge <a> <b>'",
                                  "partition_file", lineno, path)
    if not zones:
        raise ConfigFileError("partition file lists no zones", "partition_file", None, path)
    known = set(zones)
    for a, b in edges:
        for z in (a, b):
            if z not in known:
                raise ConfigFileError(f"edge names unknown zone {z!r}", "partition_file", None, path)
    return tuple(zones), tuple(edges), names


def format_partition(zones, edges, names=None) -> str:
    names = names or {}
    lines = [f"zone {z} {names[z]}".rstrip() if z in names else f"zone {z}" for z in zones]
    lines += [f"edge {a} {b}" for a, b in edges]
    return "\n".join(lines) + "\n"


def _build(cls, values: dict, section: str, lines: dict, path):
    allowed = _fields(cls)
    for k in values:
        if k not in allowed:
            raise ConfigFileError("unknown key", f"{section}.{k}", lines.get(f"{section}.{k}"), path)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        name = getattr(exc, "field_name", None) or next(
            (k for k in values if k in str(exc)), None)
        full = f"{section}.{name}" if name else section
        raise ConfigFileError(str(exc), full, lines.get(full), path) from exc


def _as_tuple(value):
    if isinstance(value, list):
        return tuple(_as_tuple(v) for v in value)
    return value


def settings_from_dict(data: Any, lines: dict | None = None, path=None, base_dir: Path | None = None) -> RunSettings:
    lines = lines or {}
    if not isinstance(data, dict):
        raise ConfigFileError("config must be a mapping of keys to values", None, 1, path)
    for k in data:
        if k not in TOP_KEYS:
            raise ConfigFileError("unknown key", str(k), lines.get(str(k)), path)
    if "rounds" not in data:
        raise ConfigFileError("required field is missing", "rounds", None, path)
    for name in ("rounds", "seed"):
        if name in data and (not isinstance(data[name], int) or isinstance(data[name], bool)):
            raise ConfigFileError("must be an integer", name, lines.get(name), path)

    sections = {}
    for name, cls in SECTIONS.items():
        values = data.get(name) or {}
        if not isinstance(values, dict):
            raise ConfigFileError("must be a mapping", name, lines.get(name), path)
        sections[name] = _build(cls, values, name, lines, path)

    scen = dict(data.get("scenario") or {})
    for k in scen:
        if k not in SCENARIO_KEYS:
            raise ConfigFileError("unknown key", f"scenario.{k}", lines.get(f"scenario.{k}"), path)
    pfile = scen.pop("partition_file", None)
    if pfile is not None:
        ppath = Path(pfile)
        if base_dir is not None and not ppath.is_absolute():
            ppath = base_dir / ppath
        try:
            text = ppath.read_text()
        except OSError as exc:
            raise ConfigFileError(f"cannot read partition file: {exc.strerror}", "scenario.partition_file",
                                  lines.get("scenario.partition_file"), path) from exc
        zones, edges, names = parse_partition_text(text, ppath)
        scen.update(zones=zones, edges=edges, names=names)
        scen.pop("grid", None)
    for k in ("grid", "mobility", "truth_groups", "initial_merges"):
        if k in scen:
            scen[k] = _as_tuple(scen[k])
    try:
        scenario = ScenarioConfig(
            rounds=data["rounds"], seed=data.get("seed", 0), strategy=data.get("strategy", "static"),
            round=sections["round"], zms=sections["zms"], zgd=sections["zgd"], **scen,
        )
    except ConfigError as exc:
        name = exc.field_name
        full = name if name in ("rounds", "seed", "strategy") else f"scenario.{name}" if name else None
        raise ConfigFileError(str(exc), full, lines.get(full or ""), path) from exc
    except TypeError as exc:
        raise ConfigFileError(str(exc), "scenario", lines.get("scenario"), path) from exc

    compare = data.get("compare") or {}
    for k in compare:
        if k not in COMPARE_KEYS:
            raise ConfigFileError("unknown key", f"compare.{k}", lines.get(f"compare.{k}"), path)
    seeds = tuple(compare.get("seeds", range(5)))
    if len(seeds) < 5:
        raise ConfigFileError("at least 5 seeds are required", "compare.seeds", lines.get("compare.seeds"), path)
    output = data.get("output") or {}
    for k in output:
        if k not in OUTPUT_KEYS:
            raise ConfigFileError("unknown key", f"output.{k}", lines.get(f"output.{k}"), path)
    return RunSettings(
        scenario=scenario,
        compare_seeds=seeds,
        output_dir=str(output.get("dir", "results")),
        write_betas=bool(output.get("betas", True)),
        raw=data,
        config_hash=config_hash(data),
    )


def config_hash(data: dict) -> str:
    canon = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()


def set_path(data: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        nxt = node.get(k)
        if nxt is None:
            nxt = node[k] = {}
        if not isinstance(nxt, dict):
            raise ConfigFileError("cannot set a key inside a non-mapping value", dotted)
        node = nxt
    node[keys[-1]] = value


def load_settings(path, overrides: dict | None = None) -> RunSettings:
    """Parse ``path`` and apply dotted-key ``overrides`` (which take precedence)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigFileError(f"cannot read config: {exc.strerror}", None, None, path) from exc
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigFileError(f"invalid YAML: {getattr(exc, 'problem', exc)}", None, line, path) from exc
    lines = _key_lines(node) if node is not None else {}
    data = data if data is not None else {}
    if isinstance(data, dict):
        for dotted, value in (overrides or {}).items():
            set_path(data, dotted, value)
    return settings_from_dict(data, lines, path, path.parent)
