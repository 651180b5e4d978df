"""Flat key-value config files.

Grammar (one assignment per line)::

    line    := blank | '#' comment | key '=' value
    key     := name ('.' name)*            dotted keys build nested sections
    value   := scalar | '[' [scalar (',' scalar)*] ']'
    scalar  := int | float | true | false | none | "quoted string" | bare string

Example::

    lesion = scar
    epochs = 30
    input_size = [160, 160]
    loss.kind = weighted_bce
    loss.pos_weight = [135.0, 175.0, 386.0, 170.0, 550.0]

A file whose first non-blank character is ``{`` is read as JSON instead.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .trainer import TrainConfig

_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z_][A-Za-z0-9_]*)*$")
_INT = re.compile(r"^[+-]?\d+$")
_FLOAT = re.compile(r"^[+-]?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?$|^[+-]?(inf|nan)$")


class ConfigError(ValueError):
    """Malformed config text or values."""


def _parse_scalar(tok: str, where: str):
    tok = tok.strip()
    if not tok:
        raise ConfigError(f"{where}: empty value")
    if len(tok) >= 2 and tok[0] == tok[-1] == '"':
        return json.loads(tok)
    low = tok.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    if low in ("none", "null"):
        return None
    if _INT.match(tok):
        return int(tok)
    if _FLOAT.match(low):
        return float(tok)
    if any(ch in tok for ch in '[]",='):
        raise ConfigError(f"{where}: cannot parse {tok!r}")
    return tok


def _split_list(body: str, where: str) -> list[str]:
    items, cur, quoted, escaped = [], [], False, False
    for ch in body:
        if escaped:
            escaped = False
        elif quoted and ch == "\\":
            escaped = True
        elif ch == '"':
            quoted = not quoted
        if ch == "," and not quoted:
            items.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if quoted:
        raise ConfigError(f"{where}: unterminated string")
    items.append("".join(cur))
    return items


def parse_value(text: str, where: str = "value"):
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise ConfigError(f"{where}: unterminated list")
        body = text[1:-1].strip()
        if not body:
            return []
        return [_parse_scalar(t, where) for t in _split_list(body, where)]
    return _parse_scalar(text, where)


def parse_kv(text: str) -> dict:
    """Nested dict from flat key-value text."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not _KEY.match(key):
            raise ConfigError(f"line {lineno}: invalid key {key!r}")
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {lineno}: {key!r} extends a non-section value")
        if parts[-1] in node:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        node[parts[-1]] = parse_value(value, f"line {lineno}")
    return out


def _format_scalar(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    s = str(v)
    # quote anything the bare-string rule would read back differently
    try:
        if _parse_scalar(s, "") == s and s.strip() == s:
            return s
    except ConfigError:
        pass
    return json.dumps(s)


def _format_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_format_scalar(x) for x in v) + "]"
    return _format_scalar(v)


def dump_kv(data: dict, prefix: str = "") -> str:
    lines = []
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            if v:
                lines.append(dump_kv(v, key + ".").rstrip("\n"))
        else:
            lines.append(f"{key} = {_format_value(v)}")
    return "\n".join(line for line in lines if line) + "\n"


def parse_config_text(text: str) -> dict:
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("JSON config must be an object")
        return data
    return parse_kv(text)


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

RUN_KEYS = ("data", "out", "weights_file", "lesions", "seeds", "grid", "resume")


@dataclass
class RunConfig:
    """Training settings plus run plumbing shared by ``train`` and ``sweep``.

    ``grid`` maps a loss kind to the values of its swept parameter
    (``tversky`` -> alpha values, ``focal`` -> gamma values; other kinds take
    an empty list and run once).
    """

    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None
    out: str | None = None
    weights_file: str | None = None
    lesions: list[str] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    grid: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = self.train.to_dict()
        for k in ("data", "out", "weights_file"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        if self.lesions:
            d["lesions"] = list(self.lesions)
        if self.seeds:
            d["seeds"] = list(self.seeds)
        if self.grid:
            d["grid"] = {k: list(v) for k, v in self.grid.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        plumbing = {k: d.pop(k) for k in RUN_KEYS if k in d}
        d.pop("resume", None)
        try:
            train = TrainConfig.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid training settings: {exc}") from exc
        grid = plumbing.get("grid") or {}
        if not isinstance(grid, dict):
            raise ConfigError("grid must be a section of loss kinds")
        grid = {k: (v if isinstance(v, list) else [v]) for k, v in grid.items()}
        lesions = plumbing.get("lesions") or []
        seeds = plumbing.get("seeds") or []
        return cls(
            train,
            plumbing.get("data"),
            plumbing.get("out"),
            plumbing.get("weights_file"),
            [str(x) for x in (lesions if isinstance(lesions, list) else [lesions])],
            [int(x) for x in (seeds if isinstance(seeds, list) else [seeds])],
            grid,
        )

    def to_text(self) -> str:
        return dump_kv(self.to_dict())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls.from_dict(parse_config_text(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(load_config(path))
