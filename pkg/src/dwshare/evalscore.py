"""Test error, decathlon-style scoring and the static parameter accountant."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, InvalidArgumentError, ShapeError
from .model import MODES, ModelConfig

KERNEL = 3
SCORE_COLUMNS = ("domain", "error", "e_max", "alpha", "contribution")
PARAM_COLUMNS = ("layer", "kind", "shape", "count", "owner")


# -- errors and score

def error_rate(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (lowest index on ties) misses the label."""
    logits, labels = np.asarray(logits), np.asarray(labels)
    if len(labels) == 0:
        raise DataError("cannot measure error on an empty dataset")
    if logits.ndim != 2 or len(logits) != len(labels):
        raise ShapeError(f"logits {logits.shape} do not match {len(labels)} labels")
    return float((np.argmax(logits, axis=1) != labels).mean())


def test_error(model, d, dataset, gates=None) -> float:
    from .training import predict

    if len(dataset) == 0:
        raise DataError("cannot measure error on an empty dataset")
    return error_rate(predict(model, d, dataset.images, gates), dataset.labels)


test_error.__test__ = False  # not a pytest test


@dataclass(frozen=True)
class ScoreSpec:
    e_max: tuple[float, ...]
    gamma: tuple[float, ...] = ()
    domains: tuple[str, ...] = ()

    def __post_init__(self):
        e = tuple(float(v) for v in self.e_max)
        g = tuple(float(v) for v in self.gamma) or (2.0,) * len(e)
        names = tuple(self.domains) or tuple(f"domain{i}" for i in range(len(e)))
        if not e:
            raise ConfigError("score spec needs at least one domain")
        if len(g) != len(e) or len(names) != len(e):
            raise ConfigError(f"score spec lengths differ: e_max {len(e)}, gamma {len(g)}, domains {len(names)}")
        for name, v in zip(names, e):
            if not 0 < v <= 1:
                raise ConfigError(f"{name}: e_max must lie in (0, 1], got {v}")
        object.__setattr__(self, "e_max", e)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "domains", names)

    @property
    def alpha(self) -> tuple[float, ...]:
        # a perfect classifier earns exactly 1000 per domain
        return tuple(1000.0 * em ** -g for em, g in zip(self.e_max, self.gamma))


def contributions(errors, spec: ScoreSpec) -> list[float]:
    errors = [float(e) for e in errors]
    if len(errors) != len(spec.e_max):
        raise InvalidArgumentError(f"{len(errors)} errors for {len(spec.e_max)} domains")
    for e in errors:
        if not 0 <= e <= 1:
            raise InvalidArgumentError(f"error rates must lie in [0, 1], got {e}")
    return [a * max(0.0, em - e) ** g for a, em, g, e in zip(spec.alpha, spec.e_max, spec.gamma, errors)]


def decathlon_score(errors, spec: ScoreSpec) -> float:
    return float(sum(contributions(errors, spec)))


def emax_from_baseline(baseline_errors, domains=(), gamma: float = 2.0) -> ScoreSpec:
    """Reference errors at twice the baseline error, capped at 1."""
    errs = [float(e) for e in baseline_errors]
    for e in errs:
        if e <= 0:
            raise ConfigError("baseline error of 0 gives a degenerate score spec")
        if e > 1:
            raise ConfigError(f"baseline error must lie in (0, 1], got {e}")
    return ScoreSpec(tuple(min(1.0, 2 * e) for e in errs), (gamma,) * len(errs), tuple(domains))


def score_rows(errors, spec: ScoreSpec) -> list[dict]:
    contrib = contributions(errors, spec)
    return [dict(domain=n, error=float(e), e_max=em, alpha=a, contribution=c)
            for n, e, em, a, c in zip(spec.domains, errors, spec.e_max, spec.alpha, contrib)]


def write_score_csv(path, errors, spec: ScoreSpec) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for r in score_rows(errors, spec):
            w.writerow([r["domain"], f"{r['error']:.6f}", f"{r['e_max']:.6f}", f"{r['alpha']:.6f}",
                        f"{r['contribution']:.6f}"])
        w.writerow(["total", "", "", "", f"{decathlon_score(errors, spec):.6f}"])
    return path


# -- parameter accountant

def standard_conv_params(c1: int, c2: int, k: int = KERNEL) -> int:
    return k * k * c1 * c2


def depthwise_params(c1: int, k: int = KERNEL) -> int:
    return k * k * c1


def pointwise_params(c1: int, c2: int) -> int:
    return c1 * c2


@dataclass(frozen=True)
class ParamRow:
    layer: str
    kind: str        # conv, dw, pw, proj, bn, head
    shape: tuple
    count: int
    owner: str       # shared or domain


def _architecture(config: ModelConfig):
    """(name, kind, cin, cout, last) for every backbone tensor group, in order."""
    out = [("stem", "conv", config.input_channels, config.stem_width, False)]
    cin, idx = config.stem_width, 0
    total = 2 * sum(n for _, n in config.macro_blocks)
    for m, (width, count) in enumerate(config.macro_blocks):
        for r in range(count):
            down = m > 0 and r == 0
            for c_in in (cin, width):
                out.append((f"L{idx:02d}", "sep", c_in, width, idx == total - 1))
                idx += 1
            if cin != width or down:
                out.append((f"proj{m}", "proj", cin, width, False))
            cin = width
    return out


# which kinds each regime leaves per domain (head is always per domain)
_OWNED = {
    "individual": {"conv", "dw", "pw", "proj", "bn"},
    "classifier_only": set(),
    "share_pointwise": {"dw", "bn"},
    "share_depthwise": {"pw", "bn"},
}


def _owner(kind: str, last: bool, mode: str, last_specific: bool) -> str:
    if kind == "head" or kind in _OWNED[mode]:
        return "domain"
    if mode in ("share_pointwise", "share_depthwise") and last and last_specific:
        return "domain"
    return "shared"


def _rows(config: ModelConfig, mode: str) -> list[ParamRow]:
    """One row per learnable backbone tensor, with its owner under ``mode``."""
    k, ls = KERNEL, config.last_layer_domain_specific
    rows = []
    for name, kind, cin, cout, last in _architecture(config):
        if kind == "conv":
            rows.append(ParamRow(f"{name}.w", "conv", (k, k, cin, cout), standard_conv_params(cin, cout),
                                 _owner("conv", last, mode, ls)))
            rows.append(ParamRow(f"{name}.bn", "bn", (2, cout), 2 * cout, _owner("bn", last, mode, ls)))
        elif kind == "sep":
            rows.append(ParamRow(f"{name}.dw", "dw", (k, k, cin), depthwise_params(cin), _owner("dw", last, mode, ls)))
            rows.append(ParamRow(f"{name}.pw", "pw", (cin, cout), pointwise_params(cin, cout),
                                 _owner("pw", last, mode, ls)))
            rows.append(ParamRow(f"{name}.bn", "bn", (2, cout), 2 * cout, _owner("bn", last, mode, ls)))
        else:
            rows.append(ParamRow(f"{name}.w", "proj", (cin, cout), pointwise_params(cin, cout),
                                 _owner("proj", last, mode, ls)))
    return rows


@dataclass
class ParamReport:
    config: ModelConfig
    mode: str
    num_classes: tuple[int, ...]
    rows: list[ParamRow]
    shared: int
    per_domain: list[int]
    total: int
    buffers: int
    totals_by_mode: dict[str, int] = field(default_factory=dict)
    marginal: int = 0
    pointwise_fraction: float = 0.0
    conv_pointwise_share: float = 0.0
    separable_total: int = 0
    standard_total: int = 0

    @property
    def num_domains(self) -> int:
        return len(self.num_classes)

    @property
    def marginal_fraction(self) -> float:
        return self.marginal / self.total

    @property
    def separable_ratio(self) -> float:
        return self.separable_total / self.standard_total

    def summary(self) -> dict:
        return {
            "mode": self.mode, "domains": self.num_domains, "shared": self.shared,
            "per_domain": list(self.per_domain), "total": self.total, "buffers": self.buffers,
            "marginal": self.marginal, "marginal_fraction": round(self.marginal_fraction, 6),
            "pointwise_fraction": round(self.pointwise_fraction, 6),
            "conv_pointwise_share": round(self.conv_pointwise_share, 6),
            "separable_total": self.separable_total, "standard_total": self.standard_total,
            "separable_ratio": round(self.separable_ratio, 6),
            **{f"total_{m}": v for m, v in self.totals_by_mode.items()},
        }


def _totals(config, mode, classes):
    rows = _rows(config, mode)
    c = config.feature_width
    shared = sum(r.count for r in rows if r.owner == "shared")
    own = sum(r.count for r in rows if r.owner == "domain")
    per_domain = [own + c * k + k for k in classes]
    return rows, shared, per_domain, shared + sum(per_domain)


def count_params(config: ModelConfig, T: int = 1, mode: str | None = None, num_classes=10,
                 new_classes: int | None = None) -> ParamReport:
    """Exact learnable-parameter counts for ``T`` domains under a sharing mode.

    ``num_classes`` is one class count for every domain or a list of ``T``.
    BN contributes its scale and shift; running statistics are reported
    separately as ``buffers``. ``marginal`` is the cost of one more domain
    with ``new_classes`` classes (default: the last domain's).
    """
    mode = mode or config.sharing_mode
    if mode not in MODES:
        raise ConfigError(f"unknown sharing mode {mode!r}")
    if T < 1:
        raise InvalidArgumentError(f"T must be >= 1, got {T}")
    classes = [int(num_classes)] * T if np.isscalar(num_classes) else [int(k) for k in num_classes]
    if len(classes) != T:
        raise InvalidArgumentError(f"{len(classes)} class counts for T={T}")
    rows, shared, per_domain, total = _totals(config, mode, classes)
    head = [ParamRow(f"head[{i}]", "head", (config.feature_width + 1, k), (config.feature_width + 1) * k, "domain")
            for i, k in enumerate(classes)]
    # BN running mean and variance: two buffers per channel per BN copy
    bn = [r for r in rows if r.kind == "bn"]
    buffers = sum(r.count * (T if r.owner == "domain" else 1) for r in bn)
    extra = classes[-1] if new_classes is None else int(new_classes)
    _, _, _, total_next = _totals(config, mode, classes + [extra])
    one_by_one = sum(r.count for r in rows if r.kind in ("pw", "proj"))
    pw = sum(r.count for r in rows if r.kind == "pw")
    dw = sum(r.count for r in rows if r.kind == "dw")
    _, _, _, single = _totals(config, mode, classes[:1])
    sep_layers = [(cin, cout) for _, kind, cin, cout, _ in _architecture(config) if kind == "sep"]
    return ParamReport(
        config=config, mode=mode, num_classes=tuple(classes), rows=rows + head, shared=shared,
        per_domain=per_domain, total=total, buffers=buffers,
        totals_by_mode={m: _totals(config, m, classes)[3] for m in MODES},
        marginal=total_next - total,
        # share of one network's learnable values held in 1x1 convs
        pointwise_fraction=one_by_one / single,
        conv_pointwise_share=pw / (pw + dw),
        separable_total=sum(depthwise_params(a) + pointwise_params(a, b) for a, b in sep_layers),
        standard_total=sum(standard_conv_params(a, b) for a, b in sep_layers),
    )


def write_param_csv(path, report: ParamReport) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PARAM_COLUMNS)
        for r in report.rows:
            w.writerow([r.layer, r.kind, "x".join(map(str, r.shape)), r.count, r.owner])
    return path


def format_report(report: ParamReport) -> str:
    s = report.summary()
    lines = [f"sharing mode      {s['mode']}  ({s['domains']} domain(s))",
             f"shared params     {s['shared']:,}",
             f"per-domain params {', '.join(f'{v:,}' for v in s['per_domain'])}",
             f"total params      {s['total']:,}  (+{s['buffers']:,} BN buffers)",
             f"next domain adds  {s['marginal']:,}  ({100 * s['marginal_fraction']:.1f}% of total)",
             f"1x1 conv share    {100 * s['pointwise_fraction']:.1f}% of one network; "
             f"pointwise vs depthwise {100 * s['conv_pointwise_share']:.1f}%",
             f"separable convs   {s['separable_total']:,} vs {s['standard_total']:,} standard "
             f"({s['separable_ratio']:.3f}x)"]
    lines += [f"total if {m:<19} {v:,}" for m, v in report.totals_by_mode.items()]
    return "\n".join(lines)


# -- op counter

def forward_macs(config: ModelConfig, gated_layers=(), num_domains: int = 1, num_classes: int = 10) -> dict[str, int]:
    """Multiply-accumulates of one forward pass on a single image, by kind.

    Depthwise work in each gated layer is repeated for every domain; the
    mixture and gate network are reported under ``gate``.
    """
    gated = set(gated_layers)
    h = config.input_resolution
    macs = dict(conv=0, dw=0, pw=0, proj=0, gate=0, head=0)
    k2 = KERNEL * KERNEL
    macs["conv"] = k2 * config.input_channels * config.stem_width * h * h
    cin, idx = config.stem_width, 0
    for m, (width, count) in enumerate(config.macro_blocks):
        for r in range(count):
            stride = 2 if (m > 0 and r == 0) else 1
            block_in, h_in = cin, h
            for c_in, s in ((cin, stride), (width, 1)):
                h = -(-h // s)
                branches = num_domains if idx in gated else 1
                macs["dw"] += branches * k2 * c_in * h * h
                if idx in gated:
                    hidden = max(4, c_in // 4)
                    macs["gate"] += c_in * hidden + hidden * num_domains + num_domains * c_in * h * h
                macs["pw"] += c_in * width * h * h
                idx += 1
            if block_in != width or stride != 1:
                macs["proj"] += block_in * width * (-(-h_in // stride)) ** 2
            cin = width
    macs["head"] = config.feature_width * num_classes
    macs["total"] = sum(macs.values())
    return macs
