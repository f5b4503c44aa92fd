"""Run configuration files (TOML, or the JSON echo written next to every run).

Sections and keys are closed: an unknown key is an error that names its
dotted path and, for TOML input, the line it sits on.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .initializers import SCHEMES, LSUVSettings
from .models import ARCHS
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None, source=None):
        self.path, self.line, self.source = path, line, source
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line else f"{source}: "
        elif line:
            where = f"line {line}: "
        field_part = f"[{path}] " if path else ""
        super().__init__(f"{where}{field_part}{message}")


@dataclass
class ModelSection:
    arch: str = "densenet"
    classes: int = 10
    variant: str = "side_tap"
    input_dim: int = 16
    hidden_dims: list[int] = field(default_factory=lambda: [32, 32])


@dataclass
class InitSection:
    scheme: str = "lion-dg"
    seed: int = 42
    lsuv_samples: int = 256
    lsuv_target_var: float = 1.0
    lsuv_tol: float = 0.01
    lsuv_max_iter: int = 10
    lsuv_include_aux: bool = True

    def lsuv(self) -> LSUVSettings:
        return LSUVSettings(self.lsuv_samples, self.lsuv_target_var, self.lsuv_tol,
                            self.lsuv_max_iter, self.lsuv_include_aux)


@dataclass
class DataSection:
    source: str = "cifar10"
    dir: str | None = None  # falls back to $DSLAB_DATA_DIR
    subset: int | None = None  # images per class kept from the training split
    val_subset: int | None = None  # images per class kept from the validation split
    classes: int = 4  # synthetic only
    dim: int = 16
    n: int = 400
    spread: float = 1.0
    seed: int = 0


@dataclass
class OutputSection:
    dir: str = "runs"


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    init: InitSection = field(default_factory=InitSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"]["betas"] = list(d["train"]["betas"])
        return d

    def digest(self) -> str:
        """Hash of everything that affects a run's outcome (output location excluded)."""
        d = self.to_dict()
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, section: str, **changes) -> "RunConfig":
        sec = dataclasses.replace(getattr(self, section), **changes)
        return dataclasses.replace(self, **{section: sec})


_SECTION_TYPES = {
    "model": ModelSection,
    "init": InitSection,
    "train": TrainConfig,
    "data": DataSection,
    "output": OutputSection,
}


def _key_line(text: str | None, section: str, key: str | None) -> int | None:
    """Best-effort line lookup for a dotted key in TOML source."""
    if not text:
        return None
    current = None
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        m = re.fullmatch(r"\[\s*([A-Za-z0-9_.-]+)\s*\]", line)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section and re.match(rf"{re.escape(key)}\s*=", line):
            return i
        if key is None and current is None and re.match(rf"{re.escape(section)}\s*=", line):
            return i
    return None


def _check_type(value, annotation: str, path: str):
    ann = annotation.replace(" ", "")
    optional = ann.endswith("|None")
    base = ann[: -len("|None")] if optional else ann
    if value is None:
        if optional:
            return None
        raise TypeError(f"{path} may not be null")
    if base == "bool":
        if not isinstance(value, bool):
            raise TypeError(f"{path} expects a boolean, got {value!r}")
        return value
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{path} expects an integer, got {value!r}")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{path} expects a number, got {value!r}")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise TypeError(f"{path} expects a string, got {value!r}")
        return value
    if base.startswith(("list[int]", "tuple[float,float]")):
        if not isinstance(value, (list, tuple)):
            raise TypeError(f"{path} expects a list, got {value!r}")
        kind = int if base.startswith("list[int]") else float
        if base.startswith("tuple") and len(value) != 2:
            raise TypeError(f"{path} expects two numbers, got {value!r}")
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and not isinstance(v, int)):
                raise TypeError(f"{path} has a bad element {v!r}")
        return [kind(v) for v in value]
    return value


def from_dict(raw: dict, text: str | None = None, source=None) -> RunConfig:
    def fail(msg, section, key=None):
        path = section if key is None else f"{section}.{key}"
        raise ConfigError(msg, path, _key_line(text, section, key), source)

    sections = {}
    for name, body in raw.items():
        if name not in _SECTION_TYPES:
            fail(f"unknown section; expected one of {sorted(_SECTION_TYPES)}", name)
        if not isinstance(body, dict):
            fail("must be a table", name)
        cls = _SECTION_TYPES[name]
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in body.items():
            if key not in known:
                fail(f"unknown key; expected one of {sorted(known)}", name, key)
            try:
                kwargs[key] = _check_type(value, str(known[key].type), f"{name}.{key}")
            except TypeError as e:
                fail(str(e), name, key)
        try:
            sections[name] = cls(**kwargs)
        except (TypeError, ValueError) as e:
            fail(str(e), name)

    cfg = RunConfig(**sections)
    if cfg.model.arch not in ARCHS:
        fail(f"unknown architecture {cfg.model.arch!r}; expected one of {ARCHS}", "model", "arch")
    if cfg.model.variant not in ("side_tap", "on_path"):
        fail(f"variant must be 'side_tap' or 'on_path', got {cfg.model.variant!r}", "model", "variant")
    if cfg.init.scheme not in SCHEMES:
        fail(f"unknown init scheme {cfg.init.scheme!r}; expected one of {SCHEMES}", "init", "scheme")
    if cfg.data.source not in ("cifar10", "cifar100", "synthetic"):
        fail(f"unknown data source {cfg.data.source!r}", "data", "source")
    if cfg.data.source != "synthetic" and cfg.model.arch == "mlp":
        fail("the MLP model needs synthetic vector data", "model", "arch")
    if cfg.data.source == "synthetic" and cfg.model.arch != "mlp":
        fail("synthetic vector data only fits the MLP model", "model", "arch")
    if not 1 <= cfg.train.batch_size <= 128:
        fail(f"batch_size must be in [1, 128], got {cfg.train.batch_size}", "train", "batch_size")
    return cfg


def loads(text: str, fmt: str = "toml", source=None) -> RunConfig:
    if fmt == "json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(e.msg, line=e.lineno, source=source) from e
        return from_dict(raw, None, source)
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        m = re.search(r"line (\d+)", str(e))
        raise ConfigError(str(e), line=int(m.group(1)) if m else None, source=source) from e
    return from_dict(raw, text, source)


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", source=path) from e
    return loads(text, "json" if path.suffix == ".json" else "toml", source=path)


def dump_json(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
