"""INI mission configuration.

Each section maps onto one nested dataclass of ``MissionConfig``; dotted
section names reach deeper (``[vision.rope]``, ``[gains.surge]``).  The
top-level seed, output directory and snapshot count live in ``[run]``.
Defects are listed one per line as ``class x depth width height``.
"""
from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .runner import MissionConfig
from .scene import DefectSpec, build_scene

REQUIRED_SECTIONS = ("scene", "camera", "gains", "mission", "detector", "run")
_RUN_KEYS = ("seed", "out_dir", "max_snapshots")
# settings whose default is None but whose value is numeric
_OPTIONAL_INTS = {"window"}


class ConfigError(ValueError):
    pass


def _parse_value(raw, default, where):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.replace(",", " ").split())
        if default is None or isinstance(default, str):
            return None if raw.lower() in ("", "none") and default is None else raw
    except (KeyError, ValueError):
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None
    raise ConfigError(f"{where}: unsupported setting")


def _format_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_defects(raw, key):
    out = []
    for line in raw.strip().splitlines():
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise ConfigError(f"{where}: expected 'class x depth width height', got {line!r}")
        try:
            x, y, w, h = map(float, parts[1:])
        except ValueError:
            raise ConfigError(f"{where}: bad numbers in {line!r}") from None
        out.append(DefectSpec(parts[0], (x, y), (w, h)))
    return tuple(out)


def _sections(obj, prefix=""):
    """(section name, dataclass instance) for every nested config block."""
    yield prefix, obj
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v) and not isinstance(v, DefectSpec):
            yield from _sections(v, f"{prefix}.{f.name}" if prefix else f.name)


def _apply(obj, path, items):
    """Rebuild ``obj`` with ``items`` applied to the block at dotted ``path``."""
    if not path:
        changes = {}
        names = {f.name for f in dataclasses.fields(obj)}
        for key, raw in items.items():
            if key not in names or dataclasses.is_dataclass(getattr(obj, key)):
                raise ConfigError(f"unknown setting {key!r}")
            if key == "defects":
                changes[key] = _parse_defects(raw, key)
            else:
                default = getattr(obj, key)
                if key in _OPTIONAL_INTS and raw.strip().lower() not in ("", "none"):
                    default = 0
                changes[key] = _parse_value(raw, default, key)
        return dataclasses.replace(obj, **changes)
    head, _, rest = path.partition(".")
    if not hasattr(obj, head) or not dataclasses.is_dataclass(getattr(obj, head)):
        raise ConfigError(f"unknown section {path!r}")
    return dataclasses.replace(obj, **{head: _apply(getattr(obj, head), rest, items)})


def parse_config(text, require=REQUIRED_SECTIONS) -> MissionConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    missing = [s for s in require if not cp.has_section(s)]
    if missing:
        raise ConfigError(f"missing section(s): {', '.join(missing)}")
    if "run" in require and not cp.has_option("run", "seed"):
        raise ConfigError("[run] seed is required")
    base = MissionConfig()
    kwargs = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    for name in cp.sections():
        items = dict(cp.items(name))
        try:
            if name == "run":
                for k in items:
                    if k not in _RUN_KEYS:
                        raise ConfigError(f"unknown setting [run] {k!r}")
                    kwargs[k] = _parse_value(items[k], kwargs[k], f"[run] {k}")
            else:
                head, _, rest = name.partition(".")
                if head not in kwargs or not dataclasses.is_dataclass(kwargs[head]):
                    raise ConfigError(f"unknown section [{name}]")
                kwargs[head] = _apply(kwargs[head], rest, items)
        except ConfigError as e:
            raise ConfigError(f"[{name}]: {e}") from None
        except ValueError as e:  # a dataclass rejected the value
            raise ConfigError(f"[{name}]: {e}") from None
    try:
        cfg = MissionConfig(**kwargs)
        build_scene(cfg.scene)  # catches bad defects before a run starts
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg


def load_config(path) -> MissionConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    return parse_config(text)


def dump_config(cfg: MissionConfig) -> str:
    lines = []
    for name, block in _sections(cfg):
        if not name:
            name = "run"
            keys = _RUN_KEYS
        else:
            keys = [f.name for f in dataclasses.fields(block)
                    if not dataclasses.is_dataclass(getattr(block, f.name))]
        lines.append(f"[{name}]")
        for k in keys:
            v = getattr(block, k)
            if k == "defects":
                body = "".join(f"\n    {d.cls} {d.center[0]!r} {d.center[1]!r} {d.extent[0]!r} {d.extent[1]!r}" for d in v)
                lines.append(f"{k} ={body}")
            else:
                lines.append(f"{k} = {_format_value(v)}")
        lines.append("")
    return "\n".join(lines)
