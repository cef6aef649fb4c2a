"""Multi-domain ResNet built from depthwise-separable convolutions.

Layout: a standard 3x3 stem conv, then macro blocks of residual blocks, each
residual block holding two separable layers (depthwise -> pointwise -> BN).
The first separable layer of every macro block after the first has stride 2,
and a strided 1x1 projection carries the shortcut whenever the shape changes.
Global average pooling feeds a per-domain linear classifier.

Which tensors are shared and which belong to a domain is decided by the
sharing mode:

==================  ==========  =========  ========  ===========  ========
mode                depthwise   pointwise  BN        stem / proj  head
==================  ==========  =========  ========  ===========  ========
share_pointwise     domain      shared*    domain    shared       domain
share_depthwise     shared*     domain     domain    shared       domain
classifier_only     shared      shared     shared    shared       domain
individual          domain      domain     domain    domain       domain
==================  ==========  =========  ========  ===========  ========

``*`` the last separable layer is entirely domain-specific when
``last_layer_domain_specific`` is set.

Domain-owned depthwise filters of one layer live in a single stacked tensor of
shape ``[W, W, M, T]``; domain ``d`` reads the view ``stack[..., d]``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import layers as L
from .errors import ConfigError, FormatError, RegistryError, StateError
from .tensor import checksum, he_init, load_dtb, make_rng, save_dtb

MODES = ("individual", "classifier_only", "share_depthwise", "share_pointwise")
KERNEL = 3
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    macro_blocks: tuple = ((16, 2), (32, 2), (64, 2))
    input_channels: int = 3
    input_resolution: int = 32
    stem_width: int = 16
    sharing_mode: str = "share_pointwise"
    last_layer_domain_specific: bool = True

    def __post_init__(self):
        blocks = tuple((int(w), int(n)) for w, n in self.macro_blocks)
        object.__setattr__(self, "macro_blocks", blocks)
        if not blocks:
            raise ConfigError("macro_blocks must not be empty")
        if any(w < 1 or n < 1 for w, n in blocks):
            raise ConfigError(f"macro block widths and counts must be >= 1, got {list(blocks)}")
        if self.stem_width < 1 or self.input_channels < 1 or self.input_resolution < 1:
            raise ConfigError("stem_width, input_channels and input_resolution must be >= 1")
        if self.sharing_mode not in MODES:
            raise ConfigError(f"unknown sharing_mode {self.sharing_mode!r}; expected one of {MODES}")

    @property
    def num_separable(self) -> int:
        return 2 * sum(n for _, n in self.macro_blocks)

    @property
    def num_layers(self) -> int:
        """Weight layers: stem + separable layers + classifier."""
        return 1 + self.num_separable + 1

    @property
    def feature_width(self) -> int:
        return self.macro_blocks[-1][0]

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        kw.setdefault("macro_blocks", ((96, 4), (192, 4), (384, 4)))
        kw.setdefault("stem_width", 96)
        kw.setdefault("input_resolution", 64)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["macro_blocks"] = [list(b) for b in self.macro_blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["macro_blocks"] = tuple(tuple(b) for b in d["macro_blocks"])
        return cls(**d)


@dataclass(frozen=True)
class SepLayer:
    index: int
    macro: int
    cin: int
    cout: int
    stride: int


@dataclass(frozen=True)
class Projection:
    macro: int
    cin: int
    cout: int
    stride: int


@dataclass(frozen=True)
class Block:
    first: SepLayer
    second: SepLayer
    projection: Projection | None


def plan(config: ModelConfig) -> list[Block]:
    """Residual-block layout implied by the config."""
    blocks, idx, cin = [], 0, config.stem_width
    for m, (width, count) in enumerate(config.macro_blocks):
        for r in range(count):
            stride = 2 if (m > 0 and r == 0) else 1
            a = SepLayer(idx, m, cin, width, stride)
            b = SepLayer(idx + 1, m, width, width, 1)
            proj = Projection(m, cin, width, stride) if (cin != width or stride != 1) else None
            blocks.append(Block(a, b, proj))
            idx += 2
            cin = width
    return blocks


def separable_layers(config: ModelConfig) -> list[SepLayer]:
    return [s for b in plan(config) for s in (b.first, b.second)]


@dataclass
class DomainSpec:
    name: str
    num_classes: int
    weight_decay: float | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"domain {self.name!r}: num_classes must be >= 2")


@dataclass(frozen=True)
class ParamInfo:
    name: str
    shape: tuple
    role: str          # stem, stem_bn, dw, pw, bn, proj, head
    fan_in: int = 0
    init: str = "he"   # he, ones, zeros
    last: bool = False
    buffer: bool = False


def _bn_infos(prefix: str, c: int, role: str, last: bool = False) -> list[ParamInfo]:
    return [
        ParamInfo(f"{prefix}.scale", (c,), role, init="ones", last=last),
        ParamInfo(f"{prefix}.shift", (c,), role, init="zeros", last=last),
        ParamInfo(f"{prefix}.running_mean", (c,), role, init="zeros", last=last, buffer=True),
        ParamInfo(f"{prefix}.running_var", (c,), role, init="ones", last=last, buffer=True),
    ]


def param_infos(config: ModelConfig) -> list[ParamInfo]:
    """Every tensor of the backbone (classifier excluded: its shape is per domain)."""
    k = KERNEL
    out = [ParamInfo("stem.w", (k, k, config.input_channels, config.stem_width), "stem",
                     fan_in=k * k * config.input_channels)]
    out += _bn_infos("stem.bn", config.stem_width, "stem_bn")
    seps = separable_layers(config)
    last = seps[-1].index
    for b in plan(config):
        for s in (b.first, b.second):
            is_last = s.index == last
            out.append(ParamInfo(f"L{s.index:02d}.dw", (k, k, s.cin), "dw", fan_in=k * k, last=is_last))
            out.append(ParamInfo(f"L{s.index:02d}.pw", (s.cin, s.cout), "pw", fan_in=s.cin, last=is_last))
            out += _bn_infos(f"L{s.index:02d}.bn", s.cout, "bn", last=is_last)
        if b.projection is not None:
            p = b.projection
            out.append(ParamInfo(f"proj{p.macro}.w", (p.cin, p.cout), "proj", fan_in=p.cin))
    return out


def head_infos(config: ModelConfig, num_classes: int) -> list[ParamInfo]:
    c = config.feature_width
    return [ParamInfo("head.w", (c, num_classes), "head", fan_in=c),
            ParamInfo("head.b", (num_classes,), "head", init="zeros")]


def owned_by_domain(info: ParamInfo, config: ModelConfig) -> bool:
    mode, role = config.sharing_mode, info.role
    last = info.last and config.last_layer_domain_specific
    if role == "head" or mode == "individual":
        return True
    if mode == "classifier_only":
        return False
    if role in ("stem", "proj"):
        return False
    if role in ("bn", "stem_bn"):
        return True
    if mode == "share_pointwise":
        return role == "dw" or last
    return role == "pw" or last  # share_depthwise


def _init_tensor(info: ParamInfo, rng: np.random.Generator, dtype) -> np.ndarray:
    if info.init == "he":
        return he_init(info.shape, info.fan_in, rng, dtype)
    return np.full(info.shape, 1.0 if info.init == "ones" else 0.0, dtype=dtype)


class SepResNet:
    """Multi-domain separable ResNet with shared and per-domain parameter banks."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.blocks = plan(config)
        self.infos = {i.name: i for i in param_infos(config)}
        self.shared: dict[str, np.ndarray] = {}
        self.stacks: dict[str, np.ndarray] = {}
        self.local: list[dict[str, np.ndarray]] = []
        self.domains: list[DomainSpec] = []
        rng = make_rng(self.seed, 0)
        for info in self.infos.values():
            if not owned_by_domain(info, config):
                self.shared[info.name] = _init_tensor(info, rng, self.dtype)
        self._build_layers()

    # -- layer objects (caches only; parameters live in the banks)

    def _build_layers(self):
        self._stem = (L.Conv2d(1), L.BatchNorm(), L.ReLU())
        self._seps = {}
        self._blk = []
        for b in self.blocks:
            for s in (b.first, b.second):
                self._seps[s.index] = (L.Depthwise(s.stride), L.Pointwise(1), L.BatchNorm())
            proj = L.Pointwise(b.projection.stride) if b.projection else None
            self._blk.append((L.ReLU(), proj, L.ReLU()))
        self._gap = L.GlobalAvgPool()
        self._head = L.Linear()

    # -- registry

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    def domain_index(self, d) -> int:
        if isinstance(d, str):
            for i, spec in enumerate(self.domains):
                if spec.name == d:
                    return i
            raise RegistryError(f"unknown domain {d!r}")
        if not isinstance(d, (int, np.integer)) or not 0 <= d < len(self.domains):
            raise RegistryError(f"unknown domain index {d!r} ({len(self.domains)} registered)")
        return int(d)

    def register_domain(self, spec: DomainSpec, init: str = "from_base") -> int:
        """Allocate the domain-owned tensors for a new domain and return its index."""
        if any(s.name == spec.name for s in self.domains):
            raise RegistryError(f"domain {spec.name!r} already registered")
        if init not in ("from_base", "random"):
            raise ConfigError(f"init must be 'from_base' or 'random', got {init!r}")
        d = len(self.domains)
        rng = make_rng(self.seed, 1, d)
        copy_base = init == "from_base" and d > 0
        bank = {}
        for info in self.infos.values():
            if not owned_by_domain(info, self.config):
                continue
            t = self.tensor(info.name, 0).copy() if copy_base else _init_tensor(info, rng, self.dtype)
            if info.role == "dw":
                prev = self.stacks.get(info.name)
                self.stacks[info.name] = t[..., None] if prev is None else np.concatenate([prev, t[..., None]], axis=-1)
            else:
                bank[info.name] = t
        for info in head_infos(self.config, spec.num_classes):
            bank[info.name] = _init_tensor(info, rng, self.dtype)
        self.local.append(bank)
        self.domains.append(spec)
        return d

    # -- parameter access

    def tensor(self, name: str, d: int | None = None) -> np.ndarray:
        """Array (or stack view) holding ``name`` as seen by domain ``d``."""
        if name in self.shared:
            return self.shared[name]
        if d is None:
            raise RegistryError(f"{name} is domain-specific; a domain is required")
        d = self.domain_index(d)
        if name in self.stacks:
            return self.stacks[name][..., d]
        return self.local[d][name]

    def is_shared(self, name: str) -> bool:
        return name in self.shared

    def _bn(self, prefix: str, d: int) -> L.BatchNormParams:
        t = lambda k: self.tensor(f"{prefix}.{k}", d)  # noqa: E731
        return L.BatchNormParams(t("scale"), t("shift"), t("running_mean"), t("running_var"))

    def shared_refs(self, include_buffers=False) -> list[tuple[str, None]]:
        return [(n, None) for n in self.shared if include_buffers or not self.infos[n].buffer]

    def domain_refs(self, d: int, include_buffers=False) -> list[tuple[str, int]]:
        d = self.domain_index(d)
        names = list(self.stacks) + list(self.local[d])
        return [(n, d) for n in names if include_buffers or not self._is_buffer(n)]

    def _is_buffer(self, name):
        info = self.infos.get(name)
        return info is not None and info.buffer

    def ref_tensor(self, ref) -> np.ndarray:
        name, d = ref
        return self.shared[name] if d is None else self.tensor(name, d)

    def count_parameters(self, include_buffers: bool = False) -> int:
        """Tally of learnable values actually allocated (stacks count every slot)."""
        n = sum(t.size for k, t in self.shared.items() if include_buffers or not self._is_buffer(k))
        n += sum(t.size for t in self.stacks.values())
        for bank in self.local:
            n += sum(t.size for k, t in bank.items() if include_buffers or not self._is_buffer(k))
        return n

    # -- checksums

    def shared_checksums(self) -> dict[str, str]:
        return {f"shared/{k}": checksum(v) for k, v in self.shared.items()}

    def domain_checksums(self, d: int) -> dict[str, str]:
        d = self.domain_index(d)
        out = {f"d{d}/{k}": checksum(s[..., d]) for k, s in self.stacks.items()}
        out.update({f"d{d}/{k}": checksum(v) for k, v in self.local[d].items()})
        return out

    def checksums(self) -> dict[str, str]:
        out = self.shared_checksums()
        for d in range(self.num_domains):
            out.update(self.domain_checksums(d))
        return out

    # -- forward / backward

    def forward(self, x: np.ndarray, d, mode: str = "eval", train_bn=None, gates=None) -> np.ndarray:
        """Logits for domain ``d``.

        In ``train`` mode every BN layer uses batch statistics unless
        ``train_bn`` (a set of BN prefixes) restricts which ones do; the rest
        run on their running estimates. ``gates`` maps separable-layer index
        to a gate that mixes all domains' depthwise outputs.
        """
        feats = self.features(x, d, mode, train_bn, gates)
        d = self.domain_index(d)
        return self._head.forward(feats, self.tensor("head.w", d), self.tensor("head.b", d))

    def features(self, x, d, mode="eval", train_bn=None, gates=None) -> np.ndarray:
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        d = self.domain_index(d)
        c = self.config
        if x.ndim != 4 or x.shape[1] != c.input_channels:
            raise ConfigError(f"input {x.shape} does not match {c.input_channels} input channels")
        self._gates = gates or {}
        bn_on = (lambda p: mode == "train" and (train_bn is None or p in train_bn))
        self._bn_on = bn_on
        conv, bn, relu = self._stem
        h = conv.forward(x.astype(self.dtype, copy=False), self.tensor("stem.w", d))
        h = relu.forward(bn.forward(h, self._bn("stem.bn", d), bn_on("stem.bn")))
        for b, (relu1, proj, relu2) in zip(self.blocks, self._blk):
            a = relu1.forward(self._sep_forward(b.first, h, d))
            a = self._sep_forward(b.second, a, d)
            sc = h if proj is None else proj.forward(h, self.tensor(f"proj{b.projection.macro}.w", d))
            h = relu2.forward(a + sc)
        return self._gap.forward(h)

    def _sep_forward(self, s: SepLayer, x, d):
        dw, pw, bn = self._seps[s.index]
        p = f"L{s.index:02d}"
        gate = self._gates.get(s.index)
        if gate is None:
            h = dw.forward(x, self.tensor(f"{p}.dw", d))
        else:
            h = gate.forward(x, self.stacks[f"{p}.dw"], s.stride)
        h = pw.forward(h, self.tensor(f"{p}.pw", d))
        return bn.forward(h, self._bn(f"{p}.bn", d), self._bn_on(f"{p}.bn"))

    def backward(self, dlogits: np.ndarray, need=None) -> dict[str, np.ndarray]:
        """Gradients of the loss w.r.t. every tensor used in the last forward.

        ``need`` (a set of names) restricts which parameter gradients are
        formed; input gradients always flow so upstream trainables are reached.
        """
        want = (lambda n: need is None or n in need)
        grads = {}
        g, pg = self._head.backward(dlogits, want("head.w") or want("head.b"))
        grads.update({f"head.{'w' if k == 'weights' else 'b'}": v for k, v in pg.items()})
        self._features_backward(self._gap.backward(g)[0], grads, want, self._lowest_block(need))
        return grads

    def features_backward(self, dfeats: np.ndarray, need=None) -> dict[str, np.ndarray]:
        want = (lambda n: need is None or n in need)
        grads = {}
        self._features_backward(dfeats, grads, want, self._lowest_block(need))
        return grads

    def _lowest_block(self, need) -> int:
        """Earliest residual block holding a needed tensor (-1: the stem)."""
        if need is None:
            return -1
        low = len(self.blocks)
        first_of_macro = {}
        for i, b in enumerate(self.blocks):
            first_of_macro.setdefault(b.first.macro, i)
        for name in need:
            base = name[5:] if name.startswith("gate.") else name
            if base.startswith("stem"):
                return -1
            if base.startswith("proj"):
                low = min(low, first_of_macro[int(base[4:].split(".")[0])])
            elif base.startswith("L"):
                low = min(low, int(base[1:3]) // 2)
        return low

    def _features_backward(self, g, grads, want, lowest=-1):
        n = len(self.blocks)
        for i, (b, (relu1, proj, relu2)) in enumerate(zip(reversed(self.blocks), reversed(self._blk))):
            if n - 1 - i < lowest:
                # nothing further down is trainable: drop the remaining caches
                self.clear_caches()
                return None
            g = relu2.backward(g)[0]
            gsc = g
            if proj is not None:
                name = f"proj{b.projection.macro}.w"
                gsc, pg = proj.backward(g, want(name))
                if pg:
                    grads[name] = pg["weights"]
            g = self._sep_backward(b.second, g, grads, want)
            g = relu1.backward(g)[0]
            g = self._sep_backward(b.first, g, grads, want)
            g = g + gsc
        if lowest >= 0:
            self.clear_caches()
            return None
        conv, bn, relu = self._stem
        g = relu.backward(g)[0]
        g, pg = bn.backward(g, want("stem.bn.scale") or want("stem.bn.shift"))
        grads.update({f"stem.bn.{k}": v for k, v in pg.items()})
        if want("stem.w"):
            # the image gradient is never needed
            grads["stem.w"] = conv.backward(g)[1]["weights"]
        else:
            conv._take()
        return g

    def _sep_backward(self, s: SepLayer, g, grads, want):
        dw, pw, bn = self._seps[s.index]
        p = f"L{s.index:02d}"
        g, pg = bn.backward(g, want(f"{p}.bn.scale") or want(f"{p}.bn.shift"))
        grads.update({f"{p}.bn.{k}": v for k, v in pg.items()})
        g, pg = pw.backward(g, want(f"{p}.pw"))
        if pg:
            grads[f"{p}.pw"] = pg["weights"]
        gate = self._gates.get(s.index)
        if gate is None:
            g, pg = dw.backward(g, want(f"{p}.dw"))
            if pg:
                grads[f"{p}.dw"] = pg["weights"]
        else:
            g = gate.backward(g, grads)
        return g

    def clear_caches(self):
        layers = [*self._stem, self._gap, self._head]
        for trio in self._seps.values():
            layers += trio
        for trio in self._blk:
            layers += [t for t in trio if t is not None]
        for layer in layers:
            layer._cache = None

    # -- single-domain export (unstacked copy, used to check stacking)

    def export_domain(self, d) -> "SepResNet":
        d = self.domain_index(d)
        m = SepResNet(self.config, self.seed, self.dtype)
        m.shared = {k: v.copy() for k, v in self.shared.items()}
        m.domains = [self.domains[d]]
        m.stacks = {k: np.ascontiguousarray(v[..., d:d + 1]).copy() for k, v in self.stacks.items()}
        m.local = [{k: v.copy() for k, v in self.local[d].items()}]
        return m


# --------------------------------------------------------------------------
# module-level operations

def build_base(config: ModelConfig, seed: int = 0, dtype=np.float32) -> SepResNet:
    return SepResNet(config, seed, dtype)


def add_domain(model: SepResNet, spec: DomainSpec, init: str = "from_base") -> int:
    if model.num_domains == 0 and init == "from_base":
        raise StateError("add_domain needs a pretrained base domain; call pretrain_base first")
    return model.register_domain(spec, init)


def with_sharing_mode(model: SepResNet, mode: str, last_layer_domain_specific: bool | None = None) -> SepResNet:
    """Copy of a single-domain model re-partitioned under another sharing mode.

    With one domain every mode computes the same function, so the values are
    carried over unchanged; only the shared/domain split differs.
    """
    if model.num_domains != 1:
        raise StateError(f"only a model with exactly one domain can change sharing mode "
                         f"({model.num_domains} registered)")
    lls = model.config.last_layer_domain_specific if last_layer_domain_specific is None else last_layer_domain_specific
    config = replace(model.config, sharing_mode=mode, last_layer_domain_specific=lls)
    out = SepResNet(config, model.seed, model.dtype)
    out.shared, out.stacks = {}, {}
    bank = {k: v.copy() for k, v in model.local[0].items() if k.startswith("head.")}
    for name, info in out.infos.items():
        t = model.tensor(name, 0).copy()
        if not owned_by_domain(info, config):
            out.shared[name] = t
        elif info.role == "dw":
            out.stacks[name] = t[..., None]
        else:
            bank[name] = t
    out.local = [bank]
    out.domains = list(model.domains)
    return out


def forward_domain(model: SepResNet, x: np.ndarray, d, mode: str = "eval") -> np.ndarray:
    return model.forward(x, d, mode)


def save(model: SepResNet, path, extra: dict | None = None) -> Path:
    """Write a bundle: ``manifest.json`` plus one DTB file per tensor."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    files = {}

    def put(rel, t):
        f = root / rel
        f.parent.mkdir(parents=True, exist_ok=True)
        save_dtb(f, t)
        files[rel] = checksum(t)

    for k in sorted(model.shared):
        put(f"shared/{k}.dtb", model.shared[k])
    for k in sorted(model.stacks):
        put(f"stacks/{k}.dtb", model.stacks[k])
    for d, bank in enumerate(model.local):
        for k in sorted(bank):
            put(f"domains/{d}/{k}.dtb", bank[k])
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "dtype": model.dtype.name,
        "domains": [asdict(s) for s in model.domains],
        "files": files,
    }
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def read_manifest(path) -> dict:
    f = Path(path) / "manifest.json"
    try:
        manifest = json.loads(f.read_text())
    except FileNotFoundError:
        raise FormatError(f"no model bundle at {path} (missing manifest.json)") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{f}: invalid JSON ({e})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{f}: unsupported format_version {manifest.get('format_version')}")
    return manifest


def load(path) -> SepResNet:
    root = Path(path)
    manifest = read_manifest(root)
    config = ModelConfig.from_dict(manifest["config"])
    model = SepResNet(config, manifest["seed"], np.dtype(manifest["dtype"]))
    model.domains = [DomainSpec(**s) for s in manifest["domains"]]
    model.local = [{} for _ in model.domains]
    model.shared, model.stacks = {}, {}
    for rel, digest in manifest["files"].items():
        t = load_dtb(root / rel)
        if checksum(t) != digest:
            raise FormatError(f"{root}: checksum mismatch for {rel}")
        parts = rel[:-4].split("/")
        if parts[0] == "shared":
            model.shared[parts[1]] = t
        elif parts[0] == "stacks":
            model.stacks[parts[1]] = t
        elif parts[0] == "domains":
            model.local[int(parts[1])][parts[2]] = t
        else:
            raise FormatError(f"{root}: unexpected file {rel}")
    expected = {i.name for i in model.infos.values() if not owned_by_domain(i, config)}
    if set(model.shared) != expected:
        raise FormatError(f"{root}: shared tensors do not match the config")
    for name, info in model.infos.items():
        t = model.shared.get(name)
        if t is None and name in model.stacks:
            t = model.stacks[name][..., 0]
            if model.stacks[name].shape[-1] != model.num_domains:
                raise FormatError(f"{root}: stack {name} has {model.stacks[name].shape[-1]} slots, "
                                  f"{model.num_domains} domains registered")
        if t is not None and t.shape != info.shape:
            raise FormatError(f"{root}: tensor {name} has shape {list(t.shape)}, expected {list(info.shape)}")
    return model
