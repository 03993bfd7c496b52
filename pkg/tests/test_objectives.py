import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ttkit.errors import ConfigError, GroupTooSmall, MissingTestResult, UncoveredGeneratedToken
from ttkit.objectives import (
    AdvantageMode,
    CurationSample,
    ObjectiveConfig,
    TestOutcomes,
    TrajectoryLogprobs,
    combined_objective,
    f2p_p2p_verify,
    group_advantages,
    grpo_reference,
    gspo_reference,
    opd_loss,
    pass_at_k_filter,
    turn_level_objective,
    turn_ratios,
)
from ttkit.trajectory import Role, TurnSpan

A, T_, U = Role.ASSISTANT, Role.TOOL, Role.USER


def traj(train, rollout, origins, turns):
    rollout = [np.nan if o == 0 else r for r, o in zip(rollout, origins)]
    return TrajectoryLogprobs(np.array(train, float), np.array(rollout, float), np.array(origins), turns)


def two_turn(train):
    # prompt, two generated, tool token, one generated
    return traj(train, [0.0, -1.0, -1.0, 0.0, -2.0], [0, 1, 1, 0, 1],
                [TurnSpan(0, 1, U), TurnSpan(1, 3, A), TurnSpan(3, 4, T_), TurnSpan(4, 5, A)])


def test_group_advantages():
    cfg = ObjectiveConfig()
    adv = group_advantages([1.0, 0.0, 0.0, 1.0], cfg)
    assert adv.tolist() == [0.5 / (0.5 + 1e-8), -0.5 / (0.5 + 1e-8), -0.5 / (0.5 + 1e-8), 0.5 / (0.5 + 1e-8)]
    assert group_advantages([2.0, 2.0, 2.0], cfg).tolist() == [0.0, 0.0, 0.0]
    m = group_advantages([3.0, 1.0], ObjectiveConfig(advantage_mode=AdvantageMode.MEAN_ONLY))
    assert m.tolist() == [1.0, -1.0]
    with pytest.raises(GroupTooSmall):
        group_advantages([1.0], cfg)
    assert ObjectiveConfig.from_dict({"advantage_mode": "MeanOnly"}).advantage_mode is AdvantageMode.MEAN_ONLY
    with pytest.raises(ConfigError):
        ObjectiveConfig(clip_epsilon=1.5)


def test_turn_ratios_by_hand():
    t = two_turn([0.0, -0.9, -0.8, 0.0, -2.5])
    tr = turn_ratios(t)
    # turn 1: (0.1 + 0.2), turn 2: -0.5; the tool turn is not a policy turn
    np.testing.assert_allclose(tr.log_ratios, [0.3, -0.5], rtol=1e-14)
    np.testing.assert_allclose(tr.ratios, [math.exp(0.3), math.exp(-0.5)], rtol=1e-14)


def test_clipped_turn_has_zero_gradient():
    cfg = ObjectiveConfig(clip_epsilon=0.2)
    t = two_turn([0.0, -0.9, -0.8, 0.0, -2.0])  # ratios e^0.3 > 1.2 and 1
    res = turn_level_objective([t], [1.0], cfg)
    assert res.value == pytest.approx((1.2 + 1.0) / 2, abs=1e-15)
    g = res.grads[0]
    assert g[1] == 0.0 and g[2] == 0.0  # clipped turn
    assert g[4] == pytest.approx(0.5)  # A * r / N with r = 1
    assert res.clip_fraction == 0.5


def test_negative_advantage_clips_low_ratios():
    cfg = ObjectiveConfig(clip_epsilon=0.2)
    t = two_turn([0.0, -1.5, -1.0, 0.0, -2.0])  # first ratio e^-0.5 < 0.8
    res = turn_level_objective([t], [-1.0], cfg)
    assert res.value == pytest.approx(-(0.8 + 1.0) / 2, abs=1e-15)
    assert res.grads[0][1] == 0.0 and res.grads[0][4] == pytest.approx(-0.5)


def test_log_ratio_clamp():
    t = two_turn([0.0, 30.0, -1.0, 0.0, -2.0])
    tr = turn_ratios(t)
    assert tr.log_ratios[0] == 20.0 and tr.clamped.tolist() == [True, False]
    res = turn_level_objective([t], [-1.0])
    assert res.grads[0][1] == 0.0


def test_on_policy_fixed_point_exact():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = 5
        roll = -rng.exponential(size=n)
        t = traj(roll, roll, [0, 1, 1, 0, 1], [TurnSpan(0, 1, U), TurnSpan(1, 3, A), TurnSpan(3, 4, T_), TurnSpan(4, 5, A)])
        adv = rng.normal(size=3)
        res = turn_level_objective([t, t, t], adv)
        assert res.value == float(np.mean(adv))
        assert res.per_trajectory.tolist() == adv.tolist()
        assert res.clip_fraction == 0.0


def test_gradient_matches_finite_difference():
    rng = np.random.default_rng(3)
    cfg = ObjectiveConfig(clip_epsilon=0.2)
    base = two_turn([0.0, -1.0, -1.0, 0.0, -2.0])
    for _ in range(20):
        train = base.rollout_logprobs.copy()
        train[[1, 2, 4]] += rng.normal(0, 0.05, 3)
        train[[0, 3]] = 0.0
        t = two_turn(train)
        adv = rng.normal(size=1)
        res = turn_level_objective([t], adv, cfg)
        for i in (1, 2, 4):
            h = 1e-7
            up, dn = train.copy(), train.copy()
            up[i] += h
            dn[i] -= h
            fd = (turn_level_objective([two_turn(up)], adv, cfg).value
                  - turn_level_objective([two_turn(dn)], adv, cfg).value) / (2 * h)
            assert res.grads[0][i] == pytest.approx(fd, abs=1e-7)


def test_uncovered_generated_token_raises():
    t = traj([0.0, -1.0], [0.0, -1.0], [0, 1], [TurnSpan(0, 2, U)])
    with pytest.raises(UncoveredGeneratedToken):
        turn_ratios(t)


def test_icepop_keep_drops_tokens():
    t = two_turn([0.0, -0.9, 5.0, 0.0, -2.0])
    keep = np.array([True, True, False, True, True])
    tr = turn_ratios(t, keep=keep)
    np.testing.assert_allclose(tr.log_ratios, [0.1, 0.0], atol=1e-15)
    all_gone = turn_ratios(t, keep=np.array([True, False, False, True, True]))
    assert len(all_gone.ratios) == 1  # an emptied turn leaves N


def random_traj(rng, n_turns):
    """Alternating tool/assistant turns with random lengths."""
    origins, turns, pos = [], [], 0
    for k in range(n_turns):
        length = int(rng.integers(1, 5))
        role = A if k % 2 == 0 else T_
        turns.append(TurnSpan(pos, pos + length, role))
        origins += [1 if role == A else 0] * length
        pos += length
    origins = np.array(origins)
    roll = np.where(origins == 1, -rng.exponential(size=pos), np.nan)
    train = np.where(origins == 1, roll + rng.normal(0, 0.3, pos), 0.0)
    return TrajectoryLogprobs(train, roll, origins, turns)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_single_turn_equals_gspo(seed):
    rng = np.random.default_rng(seed)
    batch = [random_traj(rng, int(rng.integers(1, 6))).as_single_turn() for _ in range(int(rng.integers(1, 5)))]
    adv = rng.normal(size=len(batch))
    assert abs(turn_level_objective(batch, adv).value - gspo_reference(batch, adv).value) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_token_turns_equal_grpo(seed):
    rng = np.random.default_rng(seed)
    batch = [random_traj(rng, int(rng.integers(1, 6))).as_token_turns() for _ in range(int(rng.integers(1, 5)))]
    adv = rng.normal(size=len(batch))
    lt, ref = turn_level_objective(batch, adv), grpo_reference(batch, adv)
    assert abs(lt.value - ref.value) <= 1e-12
    for a, b in zip(lt.grads, ref.grads):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_pooled_variant_weights_turns_equally():
    t1 = two_turn([0.0, -1.0, -1.0, 0.0, -2.0])
    t2 = traj([0.0, -1.0], [0.0, -1.0], [0, 1], [TurnSpan(0, 1, U), TurnSpan(1, 2, A)])
    res = turn_level_objective([t1, t2], [1.0, -2.0], pooled=True)
    assert res.value == pytest.approx((1.0 * 2 - 2.0 * 1) / 3)


def test_opd_and_combined():
    s = np.array([-1.0, -0.5, -2.0, 0.0])
    t = np.array([-1.5, -0.5, -1.0, np.nan])
    mask = np.array([True, True, True, False])
    res = opd_loss(s, t, mask)
    assert res.value == pytest.approx((0.5 + 0.0 - 1.0) / 3)
    assert res.grads.tolist() == [1 / 3, 1 / 3, 1 / 3, 0.0]
    assert opd_loss(s, t, np.zeros(4, bool)).value == 0.0
    tr = two_turn([0.0, -1.0, -1.0, 0.0, -2.0])
    lt = turn_level_objective([tr], [1.0])
    o = opd_loss(np.zeros(5), np.full(5, -1.0), np.array([0, 1, 1, 0, 1], bool), ObjectiveConfig(opd_lambda=0.5))
    value, grads = combined_objective(lt, o, ObjectiveConfig(opd_lambda=0.5))
    assert value == lt.value - 0.5 * 1.0
    np.testing.assert_allclose(grads, lt.grads[0] - 0.5 * o.grads)


@pytest.mark.parametrize("correct", range(9))
def test_pass_at_k_band(correct):
    s = CurationSample(["ok"] * correct + ["bad"] * (8 - correct), "ok")
    d = pass_at_k_filter(s)
    assert d.r_hat == correct / 8
    assert d.retained == (0 < correct < 8)
    if correct == 0:
        assert d.reason == "intractable"
    if correct == 8:
        assert d.reason == "trivial"


def test_pass_at_k_three_of_eight():
    d = pass_at_k_filter(CurationSample([1, 1, 1, 0, 0, 0, 0, 0], 1))
    assert d.retained and d.r_hat == 0.375
    with pytest.raises(ConfigError):
        CurationSample([1, 0], 1, K=8)


@pytest.mark.parametrize(
    "fail_set,pass_set,retained,reason",
    [
        ({"t1": "Pass"}, {"t2": "Pass"}, True, ""),
        ({"t1": "Fail"}, {"t2": "Pass"}, False, "F2P"),
        ({"t1": "Pass"}, {"t2": "Fail"}, False, "P2P"),
        ({"t1": "Fail"}, {"t2": "Fail"}, False, "F2P+P2P"),
        ({}, {"t2": "Pass"}, True, ""),
    ],
)
def test_f2p_p2p_truth_table(fail_set, pass_set, retained, reason):
    d = f2p_p2p_verify(TestOutcomes(fail_set, pass_set))
    assert (d.retained, d.reason) == (retained, reason)
    assert d.vacuous_f2p == (not fail_set)


def test_verify_input_errors():
    with pytest.raises(MissingTestResult):
        f2p_p2p_verify(TestOutcomes({"t1": None}, {}))
    with pytest.raises(ConfigError):
        TestOutcomes({"t1": "Pass"}, {"t1": "Pass"})
