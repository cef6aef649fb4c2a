"""Soft sharing of trained depthwise filters through per-layer softmax gates.

A gated separable layer runs every domain's depthwise filter on the same
input and feeds the pointwise conv a convex mixture of the results. The
mixture weights come from a two-layer ReLU network applied to the channel
means of the layer input, followed by a softmax over domains. By default the
per-example softmax outputs are averaged over the batch so each layer uses a
single weight vector per step; ``per_example=True`` mixes each example with
its own weights instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .errors import ConfigError, FormatError, NotApplicableError, RegistryError
from .model import SepResNet, load, read_manifest, save, separable_layers
from .optim import OptimConfig
from .tensor import checksum, he_init, load_dtb, make_rng, save_dtb

REGIONS = ("early", "middle", "late")


class Gate:
    """Gate for one separable layer over ``num_domains`` depthwise branches."""

    def __init__(self, layer_index: int, channels: int, num_domains: int, rng: np.random.Generator,
                 hidden: int | None = None, per_example: bool = False, dtype=np.float32):
        self.layer_index = layer_index
        self.num_domains = num_domains
        self.per_example = per_example
        hidden = hidden or max(4, channels // 4)
        self.params = {
            "fc1_w": he_init((channels, hidden), channels, rng, dtype),
            "fc1_b": np.zeros(hidden, dtype),
            # zero output layer: training starts from the uniform mixture
            "fc2_w": np.zeros((hidden, num_domains), dtype),
            "fc2_b": np.zeros(num_domains, dtype),
        }
        self.last_scales = np.full(num_domains, 1.0 / num_domains)
        self._gap, self._fc1, self._relu, self._fc2 = L.GlobalAvgPool(), L.Linear(), L.ReLU(), L.Linear()
        self._branches: list[L.Depthwise] = []
        self._cache = None

    @property
    def prefix(self) -> str:
        return f"gate.L{self.layer_index:02d}"

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{self.prefix}.{k}": v for k, v in self.params.items()}

    def probs(self, feature_map: np.ndarray) -> np.ndarray:
        """Per-example softmax outputs, shape [N, T]."""
        p = self.params
        m = self._gap.forward(feature_map)
        h = self._relu.forward(self._fc1.forward(m, p["fc1_w"], p["fc1_b"]))
        return L.softmax(self._fc2.forward(h, p["fc2_w"], p["fc2_b"]), axis=1)

    def mix(self, feature_map: np.ndarray, outputs: list[np.ndarray]) -> np.ndarray:
        if len(outputs) != self.num_domains:
            raise RegistryError(f"gate for layer {self.layer_index} expects {self.num_domains} "
                                f"domain outputs, got {len(outputs)}")
        shape = outputs[0].shape
        if any(o.shape != shape for o in outputs):
            raise ConfigError("per-domain outputs must share one shape")
        probs = self.probs(feature_map)
        if self.per_example:
            s = probs
            mixed = sum(s[:, i, None, None, None] * o for i, o in enumerate(outputs))
            self.last_scales = s.mean(axis=0)
        else:
            s = probs.mean(axis=0)
            mixed = sum(s[i] * o for i, o in enumerate(outputs))
            self.last_scales = s
        self._cache = (probs, s, outputs)
        return mixed.astype(outputs[0].dtype, copy=False)

    def forward(self, x: np.ndarray, stack: np.ndarray, stride: int) -> np.ndarray:
        """Run every domain's depthwise slice of ``stack`` on ``x`` and mix."""
        if stack.shape[-1] != self.num_domains:
            raise RegistryError(f"gate for layer {self.layer_index} was built for {self.num_domains} "
                                f"domains, stack holds {stack.shape[-1]}")
        self._branches = [L.Depthwise(stride) for _ in range(self.num_domains)]
        outs = [b.forward(x, stack[..., i]) for i, b in enumerate(self._branches)]
        return self.mix(x, outs)

    def backward(self, grad: np.ndarray, grads: dict) -> np.ndarray:
        """Accumulate gate parameter gradients into ``grads``; return the input gradient."""
        dx, dbranches = self.mix_backward(grad, grads)
        for b, g in zip(self._branches, dbranches):
            dx = dx + b.backward(g, param_grads=False)[0]
        self._branches = []
        return dx

    def mix_backward(self, grad, grads):
        """Gradient through the mixture alone: ``(d feature_map, [d output_i])``."""
        if self._cache is None:
            raise L.StateError("Gate.backward called without a cached forward pass")
        probs, s, outputs = self._cache
        self._cache = None
        n = probs.shape[0]
        if self.per_example:
            ds = np.stack([(grad * o).sum(axis=(1, 2, 3)) for o in outputs], axis=1)
            dprobs = ds
            douts = [s[:, i, None, None, None] * grad for i in range(self.num_domains)]
        else:
            ds = np.array([(grad * o).sum() for o in outputs])
            dprobs = np.broadcast_to(ds / n, probs.shape)
            douts = [s[i] * grad for i in range(self.num_domains)]
        dz = probs * (dprobs - (probs * dprobs).sum(axis=1, keepdims=True))
        dz = dz.astype(probs.dtype, copy=False)
        dh, g2 = self._fc2.backward(dz)
        da, _ = self._relu.backward(dh)
        dm, g1 = self._fc1.backward(da)
        dfeat, _ = self._gap.backward(dm)
        p = self.prefix
        grads[f"{p}.fc1_w"], grads[f"{p}.fc1_b"] = g1["weights"], g1["bias"]
        grads[f"{p}.fc2_w"], grads[f"{p}.fc2_b"] = g2["weights"], g2["bias"]
        return dfeat, douts


def gate_forward(gate: Gate, feature_map: np.ndarray, per_domain_outputs: list[np.ndarray]) -> np.ndarray:
    return gate.mix(feature_map, per_domain_outputs)


@dataclass(frozen=True)
class RegionPlacement:
    region: str

    def __post_init__(self):
        if self.region not in REGIONS:
            raise ConfigError(f"region must be one of {REGIONS}, got {self.region!r}")

    def layers(self, model_or_config) -> list[int]:
        config = getattr(model_or_config, "config", model_or_config)
        if len(config.macro_blocks) != len(REGIONS):
            raise ConfigError(f"gate regions need exactly {len(REGIONS)} macro blocks")
        macro = REGIONS.index(self.region)
        return [s.index for s in separable_layers(config) if s.macro == macro]


@dataclass
class GatedModel:
    model: SepResNet
    domain: int
    placement: RegionPlacement
    gates: dict[int, Gate] = field(default_factory=dict)

    def forward(self, x: np.ndarray, mode: str = "eval") -> np.ndarray:
        # BN stays on running statistics: the backbone is frozen while gates train
        return self.model.forward(x, self.domain, mode, train_bn=set(), gates=self.gates)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for g in self.gates.values():
            out.update(g.named_params())
        return out

    def gate_checksums(self) -> dict[str, str]:
        return {k: checksum(v) for k, v in self.params().items()}

    def scales(self) -> dict[int, np.ndarray]:
        return {i: g.last_scales.copy() for i, g in self.gates.items()}


def attach_gates(model: SepResNet, d, placement: RegionPlacement | str, seed: int = 0,
                 per_example: bool = False) -> GatedModel:
    if isinstance(placement, str):
        placement = RegionPlacement(placement)
    if model.num_domains < 2:
        raise NotApplicableError(f"soft sharing needs at least 2 domains, {model.num_domains} registered")
    d = model.domain_index(d)
    seps = {s.index: s for s in separable_layers(model.config)}
    gates = {}
    for idx in placement.layers(model):
        name = f"L{idx:02d}.dw"
        if name not in model.stacks:
            raise NotApplicableError(f"layer {idx} has shared depthwise filters in "
                                     f"{model.config.sharing_mode!r} mode; nothing to mix")
        gates[idx] = Gate(idx, seps[idx].cin, model.num_domains, make_rng(seed, 3, d, idx),
                          per_example=per_example, dtype=model.dtype)
    return GatedModel(model, d, placement, gates)


def train_gates(gated: GatedModel, train, optim: OptimConfig, *, seed: int = 0, test=None,
                on_scales=None):
    """Train only the gate networks; every backbone tensor stays fixed.

    ``on_scales`` is called after every step with ``{layer: scales}``.
    """
    from .training import fit

    model = gated.model

    def step(epoch):
        if on_scales is not None:
            on_scales(gated.scales())

    return fit(model, gated.domain, train, optim, gated.params(), seed=seed,
               weight_decay=model.domains[gated.domain].weight_decay, gates=gated.gates,
               train_bn=set(), test=test, on_step=step)


# -- persistence: gates live next to the model tensors under gates/<domain>/

def save_bundle(model: SepResNet, path, gated=(), extra: dict | None = None) -> Path:
    """Save ``model`` plus every gated model in ``gated`` as one bundle."""
    root = Path(path)
    entries = {}
    for gm in gated:
        if gm.model is not model:
            raise ConfigError("gated model belongs to a different network")
        name = model.domains[gm.domain].name
        files = {}
        for layer, gate in sorted(gm.gates.items()):
            for k, t in sorted(gate.params.items()):
                rel = f"gates/{gm.domain}/L{layer:02d}.{k}.dtb"
                f = root / rel
                f.parent.mkdir(parents=True, exist_ok=True)
                save_dtb(f, t)
                files[rel] = checksum(t)
        entries[name] = {"region": gm.placement.region, "per_example": gm.gates[min(gm.gates)].per_example,
                         "layers": sorted(gm.gates), "files": files}
    extra = dict(extra or {})
    if entries:
        extra["gates"] = entries
    return save(model, root, extra)


def load_bundle(path) -> tuple[SepResNet, dict[str, GatedModel]]:
    """Model plus its gated variants keyed by domain name."""
    root = Path(path)
    model = load(root)
    gated = {}
    for name, entry in read_manifest(root).get("gates", {}).items():
        try:
            gm = attach_gates(model, name, entry["region"], per_example=entry["per_example"])
        except (KeyError, TypeError) as e:
            raise FormatError(f"{root}: bad gate entry for {name!r} ({e})") from None
        if sorted(gm.gates) != entry["layers"]:
            raise FormatError(f"{root}: gate layers for {name!r} do not match region {entry['region']!r}")
        for rel, digest in entry["files"].items():
            t = load_dtb(root / rel)
            if checksum(t) != digest:
                raise FormatError(f"{root}: checksum mismatch for {rel}")
            layer, key = Path(rel).name[:-4].split(".", 1)
            gate = gm.gates[int(layer[1:])]
            if key not in gate.params or gate.params[key].shape != t.shape:
                raise FormatError(f"{root}: unexpected gate tensor {rel}")
            gate.params[key] = t
        gated[name] = gm
    return model, gated
