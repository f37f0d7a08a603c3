import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cnds import network as nw
from cnds import supervision as sv
from cnds.data import synthetic_dataset
from cnds.evaluation import strip_branches
from helpers import deep_thin_spec


def test_alpha_examples():
    assert sv.alpha_at(sv.AlphaSchedule(0.3, 10), 0) == 0.3
    assert sv.alpha_at(sv.AlphaSchedule(0.3, 10), 10) == 0.0
    assert sv.alpha_at(sv.AlphaSchedule(0.3, 65), 13) == pytest.approx(0.24, abs=1e-15)


def test_alpha_out_of_range():
    with pytest.raises(ValueError):
        sv.alpha_at(sv.AlphaSchedule(0.3, 5), 6)
    with pytest.raises(ValueError):
        sv.alpha_at(sv.AlphaSchedule(0.3, 5), -1)
    with pytest.raises(ValueError):
        sv.AlphaSchedule(-0.1, 5)
    with pytest.raises(ValueError):
        sv.AlphaSchedule(0.3, 0)


@given(st.floats(0, 5), st.integers(1, 200), st.data())
def test_alpha_is_affine_and_nonincreasing(alpha0, n, data):
    t = data.draw(st.integers(0, n))
    s = sv.AlphaSchedule(alpha0, n)
    assert sv.alpha_at(s, t) == pytest.approx(alpha0 * (1 - t / n), abs=1e-12)
    if t < n:
        assert sv.alpha_at(s, t + 1) <= sv.alpha_at(s, t)


def test_combined_loss_examples():
    assert sv.combined_loss(2.0, [(0.0, 5.0)]) == 2.0
    assert sv.combined_loss(2.0, [(0.3, 1.0)]) == pytest.approx(2.3, abs=1e-15)
    assert sv.combined_loss(1.0, [(0.3, 1.0), (0.3, 2.0), (0.3, 3.0)]) == pytest.approx(2.8, abs=1e-15)


@given(st.floats(0, 10), st.floats(0, 2), st.floats(0, 10), st.floats(0, 10))
def test_combined_loss_is_linear_in_branch_loss(main, alpha, a, b):
    lhs = sv.combined_loss(main, [(alpha, a + b)]) - main
    rhs = (sv.combined_loss(main, [(alpha, a)]) - main) + (sv.combined_loss(main, [(alpha, b)]) - main)
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_attach_then_strip_round_trip():
    spec = deep_thin_spec(depth=4)
    branched = sv.attach_branch(spec, "conv2", sv.BranchTemplate(10), 0.3)
    assert branched.main == spec.main
    assert len(branched.branches) == 1
    assert strip_branches(branched)[0] == spec


def test_default_template_shape():
    spec = sv.attach_branch(deep_thin_spec(depth=4), "conv2", sv.BranchTemplate(10), 0.3)
    conv, fc1, fc2, head = spec.branches[0].blocks
    assert (conv.out, conv.kernel) == (4, 1)
    assert (fc1.out, fc2.out, head.classes) == (64, 64, 10)


def test_thirteen_layer_three_branches():
    spec = deep_thin_spec(depth=13, pools=())
    for point in ("conv10", "conv7", "conv4"):
        spec = sv.attach_branch(spec, point, sv.BranchTemplate(10), 0.3)
    assert [b.attach_after for b in spec.branches] == ["conv10", "conv7", "conv4"]
    assert {b.alpha0 for b in spec.branches} == {0.3}
    nw.build(spec, (1, 8, 8))


def test_attach_rejections():
    spec = deep_thin_spec(depth=3)
    with pytest.raises(nw.SpecError):
        sv.attach_branch(spec, "fc1", sv.BranchTemplate(10), 0.3)
    with pytest.raises(nw.SpecError):
        sv.attach_branch(spec, "nope", sv.BranchTemplate(10), 0.3)
    once = sv.attach_branch(spec, "conv1", sv.BranchTemplate(10), 0.3)
    with pytest.raises(nw.SpecError):
        sv.attach_branch(once, "conv1", sv.BranchTemplate(10), 0.3)
    with pytest.raises(ValueError):
        sv.attach_branch(spec, "conv1", sv.BranchTemplate(10), -1.0)


@pytest.mark.parametrize("final,expected", [
    ([1, 1, 1, 1], []),
    ([0, 0, 1, 1], ["b1"]),
    ([1, 0, 0, 0], ["b3"]),
    ([0, 0, 0, 0, 0, 0, 0], ["b6", "b3", "b0"]),
    ([0, 0, 0, 0, 0, 1, 1], ["b4", "b1"]),
    ([1, 0, 0, 0, 0, 0, 0, 1], ["b6", "b3"]),
])
def test_placement_rule(final, expected):
    blocks = [f"b{i}" for i in range(len(final))]
    mags = [1.0 if f else 1e-9 for f in final]
    assert sv.recommend_attach_points(blocks, mags, 1e-7) == expected


def test_placement_rule_with_spacing_one():
    blocks = [f"b{i}" for i in range(6)]
    assert sv.recommend_attach_points(blocks, [1e-9] * 6, 1e-7, spacing=1) == blocks[::-1]


def _small_data():
    return synthetic_dataset(0, 64, (1, 8, 8), 4)


def _two_conv():
    return nw.NetworkSpec((nw.Conv("conv0", 4, 3, 1, 1), nw.Conv("conv1", 4, 3, 1, 1),
                           nw.SoftmaxHead("head", 4)))


def test_healthy_network_has_no_recommendations():
    cfg = sv.ProbeConfig(iterations=10, batch_size=16, init_std=0.5)
    report = sv.probe_vanishing(_two_conv(), _small_data(), cfg)
    assert np.all(report.magnitudes > 1e-7)
    assert report.recommended_attach_points == []


def test_infinite_threshold_flags_everything():
    cfg = sv.ProbeConfig(iterations=2, batch_size=16, threshold=math.inf)
    report = sv.probe_vanishing(_two_conv(), _small_data(), cfg)
    assert report.flagged == ["conv0", "conv1"]


def test_probe_is_deterministic_and_csv_round_trips():
    cfg = sv.ProbeConfig(iterations=3, batch_size=16)
    a = sv.probe_vanishing(_two_conv(), _small_data(), cfg)
    b = sv.probe_vanishing(_two_conv(), _small_data(), cfg)
    assert a.to_csv() == b.to_csv()
    lines = a.to_csv().splitlines()
    assert lines[0] == "iteration,block,mean_grad_magnitude"
    assert len(lines) == 1 + 3 * 2
    back = sv.ProbeReport.from_csv(a.to_csv())
    assert back.blocks == a.blocks
    np.testing.assert_allclose(back.magnitudes, a.magnitudes, rtol=1e-10)


def test_probe_rejects_branches_and_empty_data():
    spec = sv.attach_branch(_two_conv(), "conv0", sv.BranchTemplate(4), 0.3)
    with pytest.raises(nw.SpecError):
        sv.probe_vanishing(spec, _small_data(), sv.ProbeConfig(iterations=1))
    with pytest.raises(ValueError):
        sv.probe_vanishing(_two_conv(), _small_data().head(0), sv.ProbeConfig(iterations=1))


def test_probe_config_validation():
    with pytest.raises(ValueError):
        sv.ProbeConfig(iterations=0)
    with pytest.raises(ValueError):
        sv.ProbeConfig(threshold=0)


def test_branch_does_not_change_main_output():
    spec = _two_conv()
    branched = sv.attach_branch(spec, "conv0", sv.BranchTemplate(4), 0.3)
    plain_net, br_net = nw.build(spec, (1, 8, 8)), nw.build(branched, (1, 8, 8))
    params = nw.init_params(br_net, 0, 0.3)
    x = _small_data().images[:5]
    a = nw.forward(br_net, params, x).logits[nw.MAIN]
    b = nw.forward(plain_net, strip_branches(branched, params)[1], x).logits[nw.MAIN]
    np.testing.assert_array_equal(a, b)
