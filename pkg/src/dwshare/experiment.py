"""The desk-scale multi-domain experiment.

A base network is pretrained on one synthetic domain. Three further synthetic
domains are then learned from it under three regimes: shared pointwise
filters, a frozen feature extractor with new classifiers only, and
individually finetuned networks. Finally, late-region gates are trained for
each target domain on top of the shared-pointwise model.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import SynthDomainSpec, generate_domain
from .evalscore import count_params, test_error
from .gating import attach_gates, save_bundle, train_gates
from .model import DomainSpec, ModelConfig, add_domain, build_base, with_sharing_mode
from .optim import DESK_FINETUNE, DESK_GATE, DESK_PRETRAIN, OptimConfig
from .training import EpochMetrics, finetune_domain, pretrain_base

log = logging.getLogger(__name__)

BASE_KIND = "polygons"
TARGET_KINDS = ("stripes", "blobs", "digits-grid")
COMPARED_MODES = ("share_pointwise", "classifier_only", "individual")


@dataclass
class DeskSettings:
    seed: int = 0
    base_kind: str = BASE_KIND
    target_kinds: tuple = TARGET_KINDS
    num_classes: int = 10
    train: int = 2000
    test: int = 500
    noise: float = 0.1
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    pretrain: OptimConfig = DESK_PRETRAIN
    finetune: OptimConfig = DESK_FINETUNE
    gate: OptimConfig = DESK_GATE
    gate_region: str = "late"


@dataclass
class DeskResult:
    settings: dict
    base_train_accuracy: float
    base_test_accuracy: float
    accuracy: dict          # mode -> domain -> test accuracy
    gated_accuracy: dict    # domain -> test accuracy with gates
    gate_simplex_error: float
    gate_steps: int
    final_scales: dict      # domain -> layer -> scales
    params: dict            # mode -> learnable params serving the target domains
    allocated: dict         # mode -> learnable params held, base domain included
    individual_networks: int
    seconds: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _write_metrics(path: Path, rows: list[EpochMetrics]):
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "split", "loss", "accuracy"])
        for m in rows:
            w.writerow(m.row())


def run_desk(settings: DeskSettings | None = None, out=None) -> DeskResult:
    s = settings or DeskSettings()
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    clock = {}
    t0 = time.perf_counter()

    def spec(i, kind):
        return SynthDomainSpec(kind, s.num_classes, {"train": s.train, "test": s.test}, noise=s.noise,
                               seed=s.seed * 100 + i, name=kind)

    data = {k: generate_domain(spec(i, k)) for i, k in enumerate((s.base_kind, *s.target_kinds))}
    clock["data"] = time.perf_counter() - t0

    def record(name, rows):
        if out is not None:
            _write_metrics(out / f"metrics_{name}.csv", rows)

    t = time.perf_counter()
    base = build_base(replace(s.model, sharing_mode="share_pointwise"), s.seed)
    rows = pretrain_base(base, DomainSpec(s.base_kind, s.num_classes), data[s.base_kind]["train"], s.pretrain,
                         seed=s.seed, test=data[s.base_kind]["test"])
    record("pretrain", rows)
    clock["pretrain"] = time.perf_counter() - t
    log.info("base %s: train acc %.4f test acc %.4f", s.base_kind, rows[-2].accuracy, rows[-1].accuracy)

    accuracy, params, allocated, models = {}, {}, {}, {}
    for mode in COMPARED_MODES:
        t = time.perf_counter()
        m = with_sharing_mode(base, mode)
        accuracy[mode] = {}
        for i, kind in enumerate(s.target_kinds):
            d = add_domain(m, DomainSpec(kind, s.num_classes))
            r = finetune_domain(m, d, data[kind]["train"], s.finetune, seed=s.seed + 1 + i, test=data[kind]["test"])
            record(f"{mode}_{kind}", r)
            accuracy[mode][kind] = r[-1].accuracy
            log.info("%s %s: test acc %.4f", mode, kind, r[-1].accuracy)
        params[mode] = count_params(replace(s.model, sharing_mode=mode), len(s.target_kinds), mode,
                                    s.num_classes).total
        allocated[mode] = m.count_parameters()
        models[mode] = m
        clock[mode] = time.perf_counter() - t

    t = time.perf_counter()
    shared = models["share_pointwise"]
    gated_acc, scales, worst, steps, gated_models = {}, {}, 0.0, 0, []
    for kind in s.target_kinds:
        gm = attach_gates(shared, kind, s.gate_region, seed=s.seed)
        history = []
        train_gates(gm, data[kind]["train"], s.gate, seed=s.seed, on_scales=history.append)
        for step in history:
            for v in step.values():
                v = np.asarray(v, np.float64)
                worst = max(worst, abs(float(v.sum()) - 1.0), float(max(0.0, -v.min())))
        steps += len(history)
        gated_acc[kind] = 1.0 - test_error(shared, kind, data[kind]["test"], gates=gm.gates)
        scales[kind] = {str(k): [float(x) for x in v] for k, v in gm.scales().items()}
        gated_models.append(gm)
        log.info("gated %s: test acc %.4f", kind, gated_acc[kind])
        if out is not None:
            with (out / f"gate_scales_{kind}.csv").open("w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["step", "layer", *[f"s{i}" for i in range(shared.num_domains)]])
                for n, step in enumerate(history):
                    for layer, v in sorted(step.items()):
                        w.writerow([n, layer, *[f"{float(x):.6f}" for x in v]])
    clock["gates"] = time.perf_counter() - t
    clock["total"] = time.perf_counter() - t0

    if out is not None:
        save_bundle(shared, out / "bundle_share_pointwise", gated_models)
    # three stand-alone networks: one full single-domain network per target
    single = count_params(s.model, 1, "individual", s.num_classes).total
    result = DeskResult(
        settings={"seed": s.seed, "base": s.base_kind, "targets": list(s.target_kinds), "train": s.train,
                  "test": s.test, "model": s.model.to_dict(), "pretrain": asdict(s.pretrain),
                  "finetune": asdict(s.finetune), "gate": asdict(s.gate), "gate_region": s.gate_region},
        base_train_accuracy=rows[-2].accuracy, base_test_accuracy=rows[-1].accuracy,
        accuracy=accuracy, gated_accuracy=gated_acc, gate_simplex_error=worst, gate_steps=steps,
        final_scales=scales, params=params, allocated=allocated, individual_networks=len(s.target_kinds) * single, seconds=clock)
    if out is not None:
        (out / "desk_result.json").write_text(result.to_json())
    return result
