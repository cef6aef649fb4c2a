import numpy as np
import pytest
from hypothesis import given, strategies as st

from dwshare.data import Dataset
from dwshare.errors import ConfigError, NotApplicableError, RegistryError
from dwshare.gating import (Gate, RegionPlacement, attach_gates, gate_forward, load_bundle, save_bundle,
                            train_gates)
from dwshare.model import DomainSpec, ModelConfig, SepResNet
from dwshare.optim import OptimConfig
from dwshare.tensor import make_rng

TINY = ModelConfig(macro_blocks=((4, 1), (6, 1), (8, 1)), stem_width=4, input_resolution=8)


def _model(domains=3, mode="share_pointwise", seed=0):
    m = SepResNet(ModelConfig(**{**TINY.to_dict(), "sharing_mode": mode}), seed)
    for i in range(domains):
        m.register_domain(DomainSpec(f"d{i}", 3), init="random")
    return m


def _x(n=6, seed=2):
    return make_rng(seed).random((n, 3, 8, 8)).astype(np.float32)


def test_zero_init_gives_uniform_mixture(rng):
    gate = Gate(0, 5, 3, rng, dtype=np.float64)
    fmap = rng.standard_normal((4, 5, 6, 6))
    outs = [rng.standard_normal((4, 7, 6, 6)) for _ in range(3)]
    mixed = gate_forward(gate, fmap, outs)
    np.testing.assert_allclose(gate.last_scales, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(mixed, sum(outs) / 3, atol=1e-12)


def test_single_domain_gate_is_identity(rng):
    gate = Gate(0, 5, 1, rng, dtype=np.float64)
    gate.params["fc2_w"][...] = rng.standard_normal(gate.params["fc2_w"].shape)
    out = rng.standard_normal((3, 4, 5, 5))
    np.testing.assert_array_equal(gate_forward(gate, rng.standard_normal((3, 5, 5, 5)), [out]), out)


@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.booleans())
def test_random_gate_is_convex(seed, t, per_example):
    g = make_rng(seed)
    gate = Gate(0, 6, t, g, per_example=per_example, dtype=np.float64)
    for k, v in gate.params.items():
        v[...] = 3 * g.standard_normal(v.shape)
    outs = [g.standard_normal((3, 2, 4, 4)) for _ in range(t)]
    mixed = gate_forward(gate, g.standard_normal((3, 6, 4, 4)), outs)
    s = gate.last_scales
    assert (s >= 0).all() and abs(s.sum() - 1) < 1e-6
    stack = np.stack(outs)
    assert (mixed >= stack.min(axis=0) - 1e-12).all() and (mixed <= stack.max(axis=0) + 1e-12).all()


def test_gate_domain_count_mismatch(rng):
    gate = Gate(0, 5, 3, rng)
    with pytest.raises(RegistryError):
        gate_forward(gate, rng.standard_normal((2, 5, 4, 4)), [np.zeros((2, 5, 4, 4))] * 2)
    with pytest.raises(RegistryError):
        gate.forward(np.zeros((2, 5, 4, 4), np.float32), np.zeros((3, 3, 5, 4), np.float32), 1)


def test_hidden_width():
    assert Gate(0, 64, 3, make_rng(0)).params["fc1_w"].shape == (64, 16)
    assert Gate(0, 8, 3, make_rng(0)).params["fc1_w"].shape == (8, 4)


def test_regions_partition_layers():
    cfg = ModelConfig.desk()
    got = [RegionPlacement(r).layers(cfg) for r in ("early", "middle", "late")]
    assert got == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 10, 11]]
    with pytest.raises(ConfigError):
        RegionPlacement("everywhere")


def test_attach_requires_two_domains_and_own_depthwise():
    with pytest.raises(NotApplicableError):
        attach_gates(_model(domains=1), 0, "late")
    with pytest.raises(NotApplicableError):
        attach_gates(_model(mode="classifier_only"), 0, "late")
    with pytest.raises(NotApplicableError):
        attach_gates(_model(mode="share_depthwise"), 0, "early")
    # only the final layer owns its depthwise filters there; the rest of the region shares them
    with pytest.raises(NotApplicableError):
        attach_gates(_model(mode="share_depthwise"), 0, "late")
    assert len(attach_gates(_model(mode="individual"), 0, "early").gates) == 2


@pytest.mark.parametrize("region", ["early", "middle", "late"])
def test_one_hot_gate_recovers_domain_forward(region):
    m = _model()
    x = _x()
    for d in range(3):
        gm = attach_gates(m, d, region)
        for gate in gm.gates.values():
            b = np.full(3, -1e4, np.float32)
            b[d] = 1e4
            gate.params["fc2_b"][...] = b
        np.testing.assert_allclose(gm.forward(x), m.forward(x, d), atol=1e-5)


def test_zero_init_gated_model_uses_mean_filters():
    m = _model()
    gm = attach_gates(m, 1, "late")
    # uniform mixture of depthwise outputs == depthwise with the mean filter
    ref = SepResNet(m.config, 0)
    ref.shared = m.shared
    ref.domains, ref.local = m.domains, m.local
    ref.stacks = {k: v.copy() for k, v in m.stacks.items()}
    for idx in gm.gates:
        s = ref.stacks[f"L{idx:02d}.dw"]
        s[..., 1] = m.stacks[f"L{idx:02d}.dw"].mean(axis=-1)
    np.testing.assert_allclose(gm.forward(_x()), ref.forward(_x(), 1), atol=1e-5)


def _data(n=24, seed=0):
    g = make_rng(seed)
    return Dataset(g.random((n, 3, 8, 8)).astype(np.float32), g.integers(0, 3, n), 3)


def test_train_gates_touches_only_gates():
    m = _model()
    gm = attach_gates(m, 2, "middle", seed=1)
    before = m.checksums()
    gate_before = gm.gate_checksums()
    history = []
    train_gates(gm, _data(), OptimConfig(lr0=0.5, epochs=3, decay_epochs=(2,), batch_size=8),
                on_scales=history.append)
    assert m.checksums() == before
    assert gm.gate_checksums() != gate_before
    assert len(history) == 9
    for step in history:
        for s in step.values():
            assert (s >= 0).all() and abs(float(s.sum()) - 1) < 1e-6


def test_gates_survive_bundle_round_trip(tmp_path):
    m = _model()
    gm = attach_gates(m, "d1", "late", seed=3)
    for gate in gm.gates.values():
        gate.params["fc2_w"][...] = make_rng(9).standard_normal(gate.params["fc2_w"].shape)
    save_bundle(m, tmp_path / "b", [gm])
    m2, gated = load_bundle(tmp_path / "b")
    assert set(gated) == {"d1"} and gated["d1"].placement.region == "late"
    assert gated["d1"].gate_checksums() == gm.gate_checksums()
    np.testing.assert_array_equal(gated["d1"].forward(_x()), gm.forward(_x()))
