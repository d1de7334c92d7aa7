"""Run configuration: dataclass <-> dict and INI-style text files.

A run config file has one section per config object::

    [phantom]   PhantomSpec (only needed by ``synth``)
    [augment]   AugmentConfig
    [model]     ModelConfig
    [train]     TrainConfig
    [paths]     data_root, output_dir, checkpoint, weights_cache

Tuples are written comma-separated, ``none`` marks an unset optional value.
"""
import configparser
import dataclasses
import enum
import io
import types
import typing
from pathlib import Path

PATH_KEYS = ("data_root", "output_dir", "checkpoint", "weights_cache")


def config_to_dict(cfg):
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, enum.Enum):
            v = v.value
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def config_from_dict(cls, d):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**kwargs)


def _format(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, enum.Enum):
        return v.value
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    return str(v)


def _number(s):
    try:
        return int(s)
    except ValueError:
        return float(s)


def _parse(raw, typ):
    raw = raw.strip()
    origin = typing.get_origin(typ)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        typ = args[0]
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is tuple:
        return tuple(_number(x) for x in raw.split(","))
    if isinstance(typ, type) and issubclass(typ, enum.Enum):
        return typ(raw.lower())
    return raw


def section_to_config(cls, section):
    types_ = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key not in types_:
            raise KeyError(f"unknown key {key!r} for {cls.__name__}")
        kwargs[key] = _parse(raw, types_[key])
    return cls(**kwargs)


def config_to_section(cfg):
    return {f.name: _format(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}


@dataclasses.dataclass
class RunConfig:
    augment: typing.Any = None
    model: typing.Any = None
    train: typing.Any = None
    phantom: typing.Any = None
    paths: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def defaults(cls):
        from .augmentation import AugmentConfig
        from .models import ModelConfig, TrainConfig
        from .phantom import PhantomSpec

        return cls(AugmentConfig(), ModelConfig(), TrainConfig(), PhantomSpec(), {k: "none" for k in PATH_KEYS})

    def check(self):
        reps = {c.representation for c in (self.augment, self.train) if c is not None}
        if len(reps) > 1:
            raise ValueError("[augment] and [train] disagree on representation")
        return self

    def path(self, key):
        v = self.paths.get(key)
        return None if v in (None, "", "none") else Path(v)


def read_run_config(path):
    from .augmentation import AugmentConfig
    from .models import ModelConfig, TrainConfig
    from .phantom import PhantomSpec

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.read(path, encoding="utf-8")
    known = {"augment": AugmentConfig, "model": ModelConfig, "train": TrainConfig, "phantom": PhantomSpec}
    rc = RunConfig()
    for name in parser.sections():
        if name == "paths":
            rc.paths = dict(parser[name])
        elif name in known:
            setattr(rc, name, section_to_config(known[name], parser[name]))
        else:
            raise KeyError(f"{path}: unknown section [{name}]")
    return rc.check()


def format_run_config(rc):
    parser = configparser.ConfigParser(interpolation=None)
    for name in ("phantom", "augment", "model", "train"):
        cfg = getattr(rc, name)
        if cfg is not None:
            parser[name] = config_to_section(cfg)
    if rc.paths:
        parser["paths"] = {k: str(v) for k, v in rc.paths.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_run_config(rc, path):
    Path(path).write_text(format_run_config(rc), encoding="utf-8")
    return Path(path)
