"""Flat ``key = value`` run configs (``#`` starts a comment).

Static keys::

    seed, output_dir
    model.preset                    desk | full
    model.widths, model.blocks      comma lists, override the preset
    model.stem_width, model.input_channels, model.input_resolution
    model.sharing_mode, model.last_layer_domain_specific, model.dtype
    optim.<phase>.preset            phase is pretrain, finetune or gate
    optim.<phase>.<field>           lr0 momentum weight_decay epochs decay_epochs decay_factor batch_size
    data.base                       name of the base domain
    data.domains                    comma list of target domains
    gate.region, gate.per_example
    score.gamma
    params.new_classes              class count of the hypothetical extra domain in reports

Per-domain keys (``<name>`` is any domain name)::

    data.<name>.manifest            dataset manifest (relative to the config file)
    data.<name>.kind                or a synthetic generator: blobs, stripes, polygons, digits-grid
    data.<name>.classes .train .test .image_size .noise .seed
    data.<name>.weight_decay
    score.error.<name>              explicit test error for scoring
    score.emax.<name>               explicit reference error
    score.baseline.<name>           baseline error; reference error is twice this, capped at 1
"""
from __future__ import annotations

import configparser
import re
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import Dataset, SynthDomainSpec, generate_domain, load_splits
from .errors import ConfigError
from .model import DomainSpec, ModelConfig
from .optim import PRESETS, OptimConfig

PHASES = ("pretrain", "finetune", "gate")
OPTIM_FIELDS = tuple(f.name for f in fields(OptimConfig))
DATA_FIELDS = ("manifest", "kind", "classes", "train", "test", "image_size", "noise", "seed", "weight_decay")

_STATIC = {
    "seed": "0",
    "output_dir": "runs",
    "model.preset": "desk",
    "model.widths": "",
    "model.blocks": "",
    "model.stem_width": "",
    "model.input_channels": "",
    "model.input_resolution": "",
    "model.sharing_mode": "share_pointwise",
    "model.last_layer_domain_specific": "true",
    "model.dtype": "float32",
    "data.base": "",
    "data.domains": "",
    "gate.region": "late",
    "gate.per_example": "false",
    "score.gamma": "2",
    "params.new_classes": "",
}
for _p in PHASES:
    _STATIC[f"optim.{_p}.preset"] = ""
    for _f in OPTIM_FIELDS:
        _STATIC[f"optim.{_p}.{_f}"] = ""

_DYNAMIC = re.compile(r"^(data\.[A-Za-z0-9_-]+\.(%s)|score\.(error|emax|baseline)\.[A-Za-z0-9_-]+)$"
                      % "|".join(DATA_FIELDS))


def _bool(key, v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {v!r}")


def _num(key, v: str, kind=float):
    try:
        return kind(v)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {v!r}") from None


def _ints(key, v: str) -> tuple[int, ...]:
    return tuple(_num(key, p.strip(), int) for p in v.split(",") if p.strip())


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",),
                                       comment_prefixes=("#",), delimiters=("=",), strict=True)
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e.message.splitlines()[0]}") from None
    raw = dict(parser["run"])
    for key in raw:
        if key not in _STATIC and not _DYNAMIC.match(key):
            raise ConfigError(f"{source}: unknown key {key!r}")
    return raw


class RunConfig:
    def __init__(self, raw: dict[str, str], base_dir: Path | str = "."):
        self.raw = dict(raw)
        self.base_dir = Path(base_dir)
        self.values = {**_STATIC, **self.raw}
        # resolve eagerly so bad values fail before any work starts
        self.model_config()
        for p in PHASES:
            self.optim(p)
        if self.get("gate.region") not in ("early", "middle", "late"):
            raise ConfigError(f"gate.region must be early, middle or late, got {self.get('gate.region')!r}")
        _bool("gate.per_example", self.get("gate.per_example"))

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        return cls(parse_text(text, str(path)), path.parent)

    def get(self, key: str, default=None) -> str:
        v = self.values.get(key, default)
        return v if v is not None else default

    def override(self, key: str, value) -> None:
        self.values[key] = str(value)
        self.raw[key] = str(value)

    @property
    def seed(self) -> int:
        return _num("seed", self.get("seed"), int)

    @property
    def per_example(self) -> bool:
        return _bool("gate.per_example", self.get("gate.per_example"))

    def model_config(self) -> ModelConfig:
        preset = self.get("model.preset")
        if preset not in ("desk", "full"):
            raise ConfigError(f"model.preset must be desk or full, got {preset!r}")
        base = ModelConfig.desk() if preset == "desk" else ModelConfig.full()
        widths = _ints("model.widths", self.get("model.widths"))
        blocks = _ints("model.blocks", self.get("model.blocks"))
        macro = base.macro_blocks
        if widths or blocks:
            widths = widths or tuple(w for w, _ in macro)
            blocks = blocks or tuple(n for _, n in macro)
            if len(widths) != len(blocks):
                raise ConfigError(f"model.widths has {len(widths)} entries, model.blocks {len(blocks)}")
            macro = tuple(zip(widths, blocks))
        kw = {"macro_blocks": macro,
              "sharing_mode": self.get("model.sharing_mode"),
              "last_layer_domain_specific": _bool("model.last_layer_domain_specific",
                                                  self.get("model.last_layer_domain_specific"))}
        for k in ("stem_width", "input_channels", "input_resolution"):
            v = self.get(f"model.{k}")
            if v:
                kw[k] = _num(f"model.{k}", v, int)
        return ModelConfig(**{**base.to_dict(), **kw})

    @property
    def dtype(self):
        name = self.get("model.dtype")
        if name not in ("float32", "float64"):
            raise ConfigError(f"model.dtype must be float32 or float64, got {name!r}")
        return np.dtype(name)

    def optim(self, phase: str) -> OptimConfig:
        if phase not in PHASES:
            raise ConfigError(f"unknown optimisation phase {phase!r}")
        preset = self.get(f"optim.{phase}.preset") or f"desk_{phase}"
        if preset not in PRESETS:
            raise ConfigError(f"optim.{phase}.preset: unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        kw = {}
        for f in OPTIM_FIELDS:
            key = f"optim.{phase}.{f}"
            v = self.get(key)
            if not v:
                continue
            if f == "decay_epochs":
                kw[f] = _ints(key, v)
            elif f in ("epochs", "batch_size"):
                kw[f] = _num(key, v, int)
            else:
                kw[f] = _num(key, v, float)
        return PRESETS[preset].with_(**kw)

    # -- domains and data

    @property
    def base_domain(self) -> str:
        name = self.get("data.base")
        if not name:
            raise ConfigError("data.base is not set")
        return name

    @property
    def domains(self) -> list[str]:
        return [d.strip() for d in self.get("data.domains").split(",") if d.strip()]

    def domain_keys(self, name: str) -> dict[str, str]:
        prefix = f"data.{name}."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def synth_spec(self, name: str) -> SynthDomainSpec | None:
        keys = self.domain_keys(name)
        if "kind" not in keys:
            return None
        samples = {s: _num(f"data.{name}.{s}", keys.get(s, d), int) for s, d in (("train", "2000"), ("test", "500"))}
        return SynthDomainSpec(kind=keys["kind"], num_classes=_num(f"data.{name}.classes", keys.get("classes", "10"), int),
                               samples=samples, image_size=_num(f"data.{name}.image_size", keys.get("image_size", "32"), int),
                               noise=_num(f"data.{name}.noise", keys.get("noise", "0.1")),
                               seed=_num(f"data.{name}.seed", keys.get("seed", "0"), int), name=name)

    def datasets(self, name: str) -> dict[str, Dataset]:
        keys = self.domain_keys(name)
        if "manifest" in keys:
            path = Path(keys["manifest"])
            return load_splits(path if path.is_absolute() else self.base_dir / path)
        spec = self.synth_spec(name)
        if spec is None:
            raise ConfigError(f"domain {name!r} needs data.{name}.manifest or data.{name}.kind")
        return generate_domain(spec)

    def domain_spec(self, name: str, num_classes: int) -> DomainSpec:
        wd = self.domain_keys(name).get("weight_decay")
        return DomainSpec(name, num_classes, None if wd is None else _num(f"data.{name}.weight_decay", wd))

    def resolved_text(self) -> str:
        lines = ["# fully resolved run configuration"]
        mc = self.model_config()
        resolved = dict(self.values)
        resolved["model.widths"] = ",".join(str(w) for w, _ in mc.macro_blocks)
        resolved["model.blocks"] = ",".join(str(n) for _, n in mc.macro_blocks)
        resolved["model.stem_width"] = str(mc.stem_width)
        resolved["model.input_channels"] = str(mc.input_channels)
        resolved["model.input_resolution"] = str(mc.input_resolution)
        for p in PHASES:
            oc = self.optim(p)
            resolved[f"optim.{p}.preset"] = self.get(f"optim.{p}.preset") or f"desk_{p}"
            for f in OPTIM_FIELDS:
                v = getattr(oc, f)
                resolved[f"optim.{p}.{f}"] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        for k in sorted(resolved):
            lines.append(f"{k} = {resolved[k]}")
        return "\n".join(lines) + "\n"

    def write_resolved(self, directory) -> Path:
        path = Path(directory) / "config.resolved"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.resolved_text())
        return path
