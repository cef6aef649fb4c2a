import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dwshare.data import Dataset
from dwshare.errors import ConfigError, DataError, InvalidArgumentError
from dwshare.evalscore import (ScoreSpec, count_params, decathlon_score, depthwise_params, emax_from_baseline,
                               error_rate, forward_macs, pointwise_params, standard_conv_params, test_error,
                               write_param_csv, write_score_csv)
from dwshare.model import MODES, DomainSpec, ModelConfig, SepResNet
from dwshare.tensor import make_rng
from oracles import argmax_lowest


def test_table_formulas():
    assert standard_conv_params(64, 64) == 36864
    assert depthwise_params(64) == 576
    assert pointwise_params(64, 64) == 4096
    pair = depthwise_params(64) + pointwise_params(64, 64)
    assert pair == 4672
    assert pointwise_params(64, 64) / pair == pytest.approx(0.877, abs=5e-4)


def test_perfect_score_is_1000_per_domain():
    spec = ScoreSpec((0.3,) * 10)
    assert decathlon_score([0.0] * 10, spec) == pytest.approx(10000, abs=1e-9)


def test_error_at_reference_scores_zero():
    spec = ScoreSpec((0.2, 0.5, 0.9))
    assert decathlon_score([0.2, 0.5, 0.9], spec) == 0.0
    assert decathlon_score([0.3, 0.7, 1.0], spec) == 0.0


def test_half_reference_error_is_250():
    assert decathlon_score([0.25], ScoreSpec((0.5,))) == 250.0
    assert decathlon_score([0.4], ScoreSpec((0.8,))) == pytest.approx(250.0, rel=1e-12)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=6), st.data())
def test_score_monotone_and_clamped(errors, data):
    emax = data.draw(st.lists(st.floats(0.01, 1), min_size=len(errors), max_size=len(errors)))
    spec = ScoreSpec(tuple(emax))
    base = decathlon_score(errors, spec)
    i = data.draw(st.integers(0, len(errors) - 1))
    worse = list(errors)
    worse[i] = min(1.0, worse[i] + data.draw(st.floats(0, 1)))
    assert decathlon_score(worse, spec) <= base + 1e-9
    assert 0 <= base <= 1000 * len(errors) + 1e-6


def test_score_length_mismatch():
    with pytest.raises(InvalidArgumentError):
        decathlon_score([0.1, 0.2], ScoreSpec((0.5,)))
    with pytest.raises(ConfigError):
        ScoreSpec((0.0,))


def test_emax_from_baseline():
    spec = emax_from_baseline([0.4, 0.6])
    assert spec.e_max == (0.8, 1.0)
    assert spec.alpha[0] == pytest.approx(1562.5)
    assert decathlon_score([0.0, 0.0], spec) == pytest.approx(2000)
    with pytest.raises(ConfigError):
        emax_from_baseline([0.0])


def test_error_rate_against_loop(rng):
    logits = rng.integers(0, 3, (100, 5)).astype(float)  # plenty of ties
    labels = rng.integers(0, 5, 100)
    wrong = sum(argmax_lowest(r) != y for r, y in zip(logits, labels))
    assert error_rate(logits, labels) == wrong / 100
    assert error_rate(np.eye(4), np.arange(4)) == 0.0
    assert error_rate(np.eye(4), np.array([1, 2, 3, 0])) == 1.0
    with pytest.raises(DataError):
        error_rate(np.zeros((0, 3)), np.zeros(0, int))


def test_test_error_on_model(rng):
    model = SepResNet(ModelConfig(macro_blocks=((4, 1), (6, 1), (8, 1)), stem_width=4), seed=1)
    model.register_domain(DomainSpec("a", 3), init="random")
    images = rng.random((20, 3, 8, 8)).astype(np.float32)
    logits = model.forward(images, 0)
    pred = logits.argmax(axis=1)
    assert test_error(model, "a", Dataset(images, pred, 3, "test")) == 0.0
    assert test_error(model, "a", Dataset(images, (pred + 1) % 3, 3, "test")) == 1.0


def _allocated(config, classes):
    m = SepResNet(config, seed=0)
    for i, k in enumerate(classes):
        m.register_domain(DomainSpec(f"d{i}", k), init="random" if i == 0 else "from_base")
    return m


configs = st.builds(
    lambda widths, blocks, stem, lls: ModelConfig(macro_blocks=tuple(zip(widths, blocks)), stem_width=stem,
                                                  last_layer_domain_specific=lls),
    st.lists(st.integers(2, 12), min_size=1, max_size=3), st.lists(st.integers(1, 2), min_size=3, max_size=3),
    st.integers(2, 8), st.booleans())


@given(configs, st.sampled_from(MODES), st.lists(st.integers(2, 12), min_size=1, max_size=3))
def test_accountant_matches_allocation(config, mode, classes):
    config = ModelConfig(**{**config.to_dict(), "sharing_mode": mode})
    m = _allocated(config, classes)
    r = count_params(config, len(classes), num_classes=classes)
    assert r.total == m.count_parameters()
    assert r.buffers == m.count_parameters(include_buffers=True) - m.count_parameters()
    # one more domain costs exactly the predicted marginal
    before = m.count_parameters()
    m.register_domain(DomainSpec("extra", classes[-1]))
    assert m.count_parameters() - before == r.marginal


def test_mode_ordering():
    config = ModelConfig.desk()
    for t in (2, 3, 5):
        totals = count_params(config, t).totals_by_mode
        assert (totals["classifier_only"] < totals["share_pointwise"] < totals["share_depthwise"]
                < totals["individual"])


def test_full_preset_efficiency():
    r = count_params(ModelConfig.full(), 1, num_classes=1000, new_classes=100)
    assert r.separable_ratio < 0.55
    assert 0.75 <= r.pointwise_fraction <= 0.88
    assert 0.08 <= r.marginal / r.total <= 0.14


@given(st.integers(19, 512), st.integers(19, 512))
def test_separable_ratio_formula(c1, c2):
    ratio = (depthwise_params(c1) + pointwise_params(c1, c2)) / standard_conv_params(c1, c2)
    assert ratio == pytest.approx(1 / c2 + 1 / 9)
    assert ratio < 0.55


def test_gated_macs_scale_with_domains():
    cfg = ModelConfig.desk()
    late = [8, 9, 10, 11]
    plain = forward_macs(cfg)
    gated = forward_macs(cfg, late, num_domains=3)
    late_dw = forward_macs(cfg, late, num_domains=2)["dw"] - plain["dw"]
    assert gated["dw"] - plain["dw"] == 2 * late_dw
    for k in ("conv", "pw", "proj", "head"):
        assert gated[k] == plain[k]
    assert plain["gate"] == 0 < gated["gate"]


def test_csv_outputs(tmp_path):
    spec = ScoreSpec((0.5, 0.8), domains=("a", "b"))
    path = write_score_csv(tmp_path / "s.csv", [0.25, 0.0], spec)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["domain", "error", "e_max", "alpha", "contribution"]
    assert rows[1][0] == "a" and float(rows[1][4]) == 250.0
    assert float(rows[-1][4]) == pytest.approx(1250.0)
    p = write_param_csv(tmp_path / "p.csv", count_params(ModelConfig.desk(), 2))
    rows = list(csv.reader(p.open()))
    assert rows[0] == ["layer", "kind", "shape", "count", "owner"]
    assert sum(int(r[3]) for r in rows[1:] if r[4] == "shared") == count_params(ModelConfig.desk(), 2).shared
