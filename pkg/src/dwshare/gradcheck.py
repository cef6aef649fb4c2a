"""Central-difference gradient checks for every layer type and the gate network.

Each case builds a scalar loss ``sum(out * R)`` with a fixed random ``R``
(softmax cross-entropy is already scalar), perturbs inputs and parameters one
element at a time and compares against the analytic backward pass. All
arithmetic is in float64.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .gating import Gate
from .model import DomainSpec, ModelConfig, SepResNet
from .tensor import make_rng

EPS = 1e-4
TOL = 1e-4
# gradients smaller than this are compared in absolute terms
FLOOR = 1e-6


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    checked: int
    seconds: float
    tol: float = TOL

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def line(self) -> str:
        return (f"{'PASS' if self.passed else 'FAIL'} {self.name:<28} max rel err {self.max_rel_error:.2e} "
                f"({self.checked} entries, {self.seconds:.2f}s)")


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = FLOOR) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.size == 0:
        return 0.0
    return float((np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)).max())


def check(name, inputs: dict, forward, backward, rng, eps=EPS, max_entries=None) -> GradResult:
    """``forward(inputs) -> array``; ``backward(R) -> {input name: grad}``.

    ``forward`` must read the arrays in ``inputs`` at call time: they are
    perturbed in place. ``max_entries`` samples that many entries per input.
    """
    t0 = time.perf_counter()
    out = np.asarray(forward(inputs), np.float64)
    r = rng.standard_normal(out.shape) if out.ndim else np.float64(1.0)
    analytic = backward(r)
    worst, checked = 0.0, 0
    for key, arr in inputs.items():
        if key not in analytic:
            continue
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        num = np.empty(len(idx))
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            up = float((np.asarray(forward(inputs)) * r).sum())
            flat[i] = old - eps
            down = float((np.asarray(forward(inputs)) * r).sum())
            flat[i] = old
            num[n] = (up - down) / (2 * eps)
        worst = max(worst, rel_error(np.asarray(analytic[key]).reshape(-1)[idx], num))
        checked += len(idx)
    return GradResult(name, worst, checked, time.perf_counter() - t0)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _layer_case(name, layer, make, call, grad_keys, rng):
    inputs = make(rng)

    def fwd(v):
        return call(layer, v)

    def bwd(r):
        call(layer, inputs)
        dx, pg = layer.backward(r)
        out = {"x": dx}
        out.update({k: pg[k2] for k, k2 in grad_keys.items()})
        return out

    return check(name, inputs, fwd, bwd, rng)


def layer_cases(rng) -> list[GradResult]:
    res = []
    for s in (1, 2):
        res.append(_layer_case(
            f"conv2d stride {s}", L.Conv2d(s),
            lambda g: {"x": g.standard_normal((2, 3, 5, 5)), "w": g.standard_normal((3, 3, 3, 4))},
            lambda layer, v: layer.forward(v["x"], v["w"]), {"w": "weights"}, rng))
        res.append(_layer_case(
            f"depthwise stride {s}", L.Depthwise(s),
            lambda g: {"x": g.standard_normal((2, 3, 6, 5)), "w": g.standard_normal((3, 3, 3))},
            lambda layer, v: layer.forward(v["x"], v["w"]), {"w": "weights"}, rng))
        res.append(_layer_case(
            f"pointwise stride {s}", L.Pointwise(s),
            lambda g: {"x": g.standard_normal((2, 3, 5, 4)), "w": g.standard_normal((3, 4))},
            lambda layer, v: layer.forward(v["x"], v["w"]), {"w": "weights"}, rng))
    for train in (True, False):
        def bn_call(layer, v, train=train):
            p = L.BatchNormParams(v["scale"], v["shift"], np.full(3, 0.2), np.full(3, 1.5))
            return layer.forward(v["x"], p, train, update_stats=False)
        res.append(_layer_case(
            f"batchnorm {'train' if train else 'eval'}", L.BatchNorm(),
            lambda g: {"x": g.standard_normal((4, 3, 3, 2)) * 2 + 1, "scale": g.uniform(0.5, 1.5, 3),
                       "shift": g.standard_normal(3)},
            bn_call, {"scale": "scale", "shift": "shift"}, rng))
    res.append(_layer_case(
        "linear", L.Linear(),
        lambda g: {"x": g.standard_normal((4, 5)), "w": g.standard_normal((5, 3)), "b": g.standard_normal(3)},
        lambda layer, v: layer.forward(v["x"], v["w"], v["b"]), {"w": "weights", "b": "bias"}, rng))
    res.append(_layer_case(
        "relu", L.ReLU(), lambda g: {"x": _away_from_zero(g, (3, 4, 2, 2))},
        lambda layer, v: layer.forward(v["x"]), {}, rng))
    res.append(_layer_case(
        "global average pool", L.GlobalAvgPool(), lambda g: {"x": g.standard_normal((2, 3, 4, 3))},
        lambda layer, v: layer.forward(v["x"]), {}, rng))
    labels = rng.integers(0, 5, 6)
    res.append(_layer_case(
        "softmax cross-entropy", L.SoftmaxXent(), lambda g: {"x": g.standard_normal((6, 5)) * 2},
        lambda layer, v: np.float64(layer.forward(v["x"], labels)[0]), {}, rng))
    return res


def gate_cases(rng) -> list[GradResult]:
    res = []
    for per_example in (False, True):
        for stride in (1, 2):
            gate = Gate(0, 8, 3, rng, per_example=per_example, dtype=np.float64)
            # nonzero output layer so the softmax is not flat
            gate.params["fc2_w"][...] = rng.standard_normal(gate.params["fc2_w"].shape)
            gate.params["fc1_b"][...] = rng.uniform(0.1, 0.5, gate.params["fc1_b"].shape)
            stack = rng.standard_normal((3, 3, 8, 3))
            inputs = {"x": rng.standard_normal((3, 8, 5, 5)), **gate.params}

            def fwd(v, gate=gate, stack=stack, stride=stride):
                return gate.forward(v["x"], stack, stride)

            def bwd(r, gate=gate, inputs=inputs, stack=stack, stride=stride):
                gate.forward(inputs["x"], stack, stride)
                grads = {}
                dx = gate.backward(r, grads)
                out = {k.rsplit(".", 1)[1]: v for k, v in grads.items()}
                out["x"] = dx
                return out

            kind = "per-example" if per_example else "batch-mean"
            res.append(check(f"gate {kind} stride {stride}", inputs, fwd, bwd, rng))
    return res


def _clear_of_kinks(model, gates, rng, shape, margin=2e-3, tries=50):
    """An input whose ReLU pre-activations all stay ``margin`` away from zero.

    Central differences straddling a ReLU kink are meaningless, so draws that
    land too close to one are rejected; the best of ``tries`` draws is kept.
    """
    seen = []
    orig = L.ReLU.forward

    def spy(self, x):
        seen.append(float(np.abs(x).min()))
        return orig(self, x)

    best, best_gap = None, -1.0
    L.ReLU.forward = spy
    try:
        for _ in range(tries):
            x = rng.standard_normal(shape)
            seen.clear()
            model.forward(x, 1, "train", gates=gates)
            gap = min(seen)
            if gap > best_gap:
                best, best_gap = x, gap
            if gap > margin:
                break
    finally:
        L.ReLU.forward = orig
        model.clear_caches()
    return best


def model_case(rng, gated: bool = True, max_entries: int = 12) -> GradResult:
    """End-to-end check through a tiny two-domain network with one gated region."""
    cfg = ModelConfig(macro_blocks=((4, 1), (6, 1), (8, 1)), stem_width=4, input_resolution=6)
    model = SepResNet(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    model.register_domain(DomainSpec("a", 3), init="random")
    model.register_domain(DomainSpec("b", 4), init="random")
    gates = {}
    if gated:
        from .gating import attach_gates
        gm = attach_gates(model, 1, "late", seed=1)
        for g in gm.gates.values():
            g.params["fc2_w"][...] = rng.standard_normal(g.params["fc2_w"].shape)
        gates = gm.gates
    x = _clear_of_kinks(model, gates, rng, (4, 3, 6, 6))
    labels = rng.integers(0, 4, 4)
    inputs = {f"{n}": model.ref_tensor((n, o)) for n, o in model.shared_refs() + model.domain_refs(1)}
    for g in gates.values():
        inputs.update(g.named_params())
    # per-domain stack slices are views; perturb through them in place
    xent = L.SoftmaxXent()

    def fwd(v):
        logits = model.forward(x, 1, "train", gates=gates)
        return np.float64(xent.forward(logits, labels)[0])

    def bwd(r):
        fwd(inputs)
        return model.backward(xent.backward(float(r))[0])

    name = "model (gated late)" if gated else "model"
    res = check(name, inputs, fwd, bwd, rng, max_entries=max_entries)
    model.clear_caches()
    return res


def run_all(seed: int = 0, include_model: bool = True) -> list[GradResult]:
    rng = make_rng(seed, 99)
    res = layer_cases(rng) + gate_cases(rng)
    if include_model:
        res.append(model_case(rng, gated=False))
        res.append(model_case(rng, gated=True))
    return res
