import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pmisim.bus import InProcessBus
from pmisim.config import ExperimentConfig, RewardConfig, XAppConfig
from pmisim.errors import ActionError, StateError
from pmisim.model import CsiReport
from pmisim.phy import cqi_to_se
from pmisim.rl import A2cConfig
from pmisim.utils import keyed_rng
from pmisim.xapp import (
    STATE_DIM,
    A2cAgent,
    FollowPmiAgent,
    GroupKind,
    InterA2cAgent,
    PolicyOutput,
    PrioritizationGroup,
    RandomAgent,
    XApp,
    XAppAgent,
    build_state,
    cell_interference,
    compute_reward,
    decode_action,
    head_sizes,
    high_interference_count,
    identify_groups,
    make_agent,
    mirror_assignments,
    normalize_interference,
    resolve_assignments,
    reward_total,
    select_target_cell,
)

I_REF = 1e-12


def make_report(ue, pci=0, tti=1, **changes):
    fields = dict(
        ue=ue,
        pci=pci,
        tti=tti,
        ri=1,
        pmi=[4, 4, 7],
        cqi=[9, 9, 9],
        wb_cqi=9,
        rsrp_dbm=-90.0,
        thr_mbps=1.0,
        interf_mw=[0.0],
        prbs=5,
    )
    fields.update(changes)
    return CsiReport(**fields)


class FixedAgent(XAppAgent):
    kind = "fixed"

    def __init__(self, indices, plain=False):
        self.indices = tuple(indices)
        self.plain = plain

    def act(self, ctx, greedy):
        return PolicyOutput(self.indices, 0.0, 0.0)


def make_xapp(agent, reports):
    bus = InProcessBus()
    xapp = XApp(agent, bus, ExperimentConfig(), I_REF, 64, 128)
    ctrl = bus.subscribe("ctrl.>")
    for report in reports:
        bus.publish_payload(report)
    return xapp, ctrl


def test_select_target_cell():
    assert select_target_cell([0.1, 0.5, 0.3]) == 1
    assert select_target_cell([0.2, 0.2, 0.2]) == 0
    assert select_target_cell([0.7]) == 0
    assert select_target_cell({4: 1.0, 2: 1.0, 9: 0.5}) == 2
    with pytest.raises(StateError):
        select_target_cell([])


def test_cell_interference_is_exact():
    reports = [
        make_report(0, pci=1, interf_mw=[0.1, 0.2]),
        make_report(1, pci=1, interf_mw=[0.3]),
        make_report(2, pci=0, interf_mw=[1e-16, 1.0]),
    ]
    assert cell_interference(reports) == {
        0: math.fsum([1e-16, 1.0]),
        1: math.fsum([math.fsum([0.1, 0.2]), 0.3]),
    }


def test_identify_groups():
    reports = [
        make_report(u, rsrp_dbm=-105.0 if u in (2, 5) else -90.0, interf_mw=[u * 1e-12])
        for u in range(10)
    ]
    groups = identify_groups(reports)
    assert groups[GroupKind.EDGE].members == (2, 5)
    assert groups[GroupKind.HIGH_INTERFERENCE].members == (9, 8)
    assert groups[GroupKind.ALL].members == tuple(range(10))
    assert high_interference_count(10, 0.2) == 2
    assert high_interference_count(3, 0.2) == 1
    assert high_interference_count(11, 0.2) == 3

    no_edge = identify_groups([make_report(u) for u in range(4)])
    assert len(no_edge[GroupKind.EDGE]) == 0


def test_normalize_interference():
    assert normalize_interference(0.0, I_REF, 6.0) == 0.0
    assert normalize_interference(I_REF, I_REF, 6.0) == 0.0
    assert normalize_interference(I_REF * 1e3, I_REF, 6.0) == pytest.approx(0.5)
    assert normalize_interference(I_REF * 1e9, I_REF, 6.0) == 1.0
    assert normalize_interference(I_REF * 1e-3, I_REF, 6.0) == 0.0


def test_state_of_a_saturated_cell():
    reports = [
        make_report(u, wb_cqi=15, prbs=0, thr_mbps=5.0, interf_mw=[0.0])
        for u in range(10)
    ]
    everyone = PrioritizationGroup(GroupKind.ALL, tuple(range(10)))
    state = build_state(reports, everyone, I_REF, 52, XAppConfig())
    assert state.degenerate
    assert state.as_array().tolist() == [1.0, 1.0, 0.0, 0.0, 0.1, 0.2]


def test_state_at_reference_interference():
    reports = [make_report(0, interf_mw=[I_REF])]
    empty = PrioritizationGroup(GroupKind.EDGE, ())
    state = build_state(reports, empty, I_REF, 52, XAppConfig())
    assert state.interference == 0.0
    assert not state.degenerate


def test_nu_excludes_the_group():
    reports = [make_report(0, wb_cqi=3), make_report(1, wb_cqi=12)]
    group = PrioritizationGroup(GroupKind.EDGE, (0,))
    state = build_state(reports, group, I_REF, 52, XAppConfig())
    assert state.nu == pytest.approx(12 / 15)
    assert state.cqi_max == pytest.approx(12 / 15)


@given(
    st.lists(
        st.tuples(
            st.integers(0, 15),
            st.integers(0, 52),
            st.floats(0.0, 1e4),
            st.floats(0.0, 1e-3),
        ),
        min_size=1,
        max_size=60,
    )
)
def test_state_is_bounded(rows):
    reports = [
        make_report(u, wb_cqi=c, prbs=p, thr_mbps=t, interf_mw=[i])
        for u, (c, p, t, i) in enumerate(rows)
    ]
    group = PrioritizationGroup(GroupKind.HIGH_INTERFERENCE, (0,))
    values = build_state(reports, group, I_REF, 52, XAppConfig()).as_array()
    assert values.shape == (STATE_DIM,)
    assert np.all((values >= 0.0) & (values <= 1.0))


def test_empty_cell_has_no_state():
    with pytest.raises(StateError):
        build_state([], PrioritizationGroup(GroupKind.ALL, ()), I_REF, 52, XAppConfig())


def test_reward_anchors():
    assert reward_total(2.5, 2.5, 0.7, 0.0, 0.85, 0.85) == 0.0
    assert reward_total(3.5, 2.5, 0.7, 0.5, 0.85, 0.85) == pytest.approx(
        0.65, abs=1e-12
    )
    assert reward_total(2.0, 2.5, 0.7, 1.0, 1.0, 0.85) == pytest.approx(
        -1.35, abs=1e-12
    )


@given(
    st.floats(0.0, 12.0),
    st.floats(0.0, 12.0),
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
)
def test_reward_monotonicity(g1, g2, cost, util):
    lo, hi = sorted((g1, g2))
    assert reward_total(lo, 2.5, 0.7, cost, util, 0.85) <= reward_total(
        hi, 2.5, 0.7, cost, util, 0.85
    )
    assert reward_total(hi, 2.5, 0.7, 1.0, util, 0.85) <= reward_total(
        hi, 2.5, 0.7, cost, util, 0.85
    )


def test_compute_reward():
    breakdown = compute_reward(
        [9, 9], [0.0, 0.0], 0.85, I_REF, RewardConfig(), XAppConfig()
    )
    assert breakdown.gamma_u == pytest.approx(2.4063)
    assert breakdown.interference_cost == 0.0
    assert breakdown.total == pytest.approx(2.4063 - 2.5)
    assert breakdown.recompute() == breakdown.total

    loud = compute_reward(
        [15], [I_REF * 1e9], 0.85, I_REF, RewardConfig(), XAppConfig()
    )
    assert loud.interference_cost == 1.0
    assert loud.total == pytest.approx(5.5547 - 2.5 - 0.7)
    with pytest.raises(StateError):
        compute_reward([], [], 0.5, I_REF, RewardConfig(), XAppConfig())


def test_decode_action():
    action = decode_action([0, 5, 17], 64, 128)
    assert action.group == GroupKind.EDGE
    assert (action.pmi_r1, action.pmi_r2) == (5, 17)
    plain = decode_action([5, 17], 64, 128, plain=True)
    assert plain.group == GroupKind.ALL
    for bad in ([3, 0, 0], [0, 64, 0], [0, 0, 128], [0, 0]):
        with pytest.raises(ActionError):
            decode_action(bad, 64, 128)
    with pytest.raises(ActionError):
        decode_action([1, 2, 3], 64, 128, plain=True)


def test_assignments_follow_reported_rank():
    reports = {0: make_report(0, ri=1), 1: make_report(1, ri=2, pmi=[1, 1, 1])}
    action = decode_action([2, 5, 17], 64, 128)
    group = PrioritizationGroup(GroupKind.ALL, (0, 1))
    assignments = resolve_assignments(action, group, reports)
    assert [(a.ue, a.ri, a.pmi, a.subbands) for a in assignments] == [
        (0, 1, 5, "all"),
        (1, 2, 17, "all"),
    ]


def test_mirror_assignments():
    report = make_report(3, pmi=[4, 4, 7], ri=2)
    mirrored = mirror_assignments(report)
    assert [(a.ri, a.pmi, a.subbands) for a in mirrored] == [
        (2, 4, [0, 1]),
        (2, 7, [2]),
    ]


def test_follow_pmi_mirrors_and_holds():
    agent = FollowPmiAgent()
    first = [make_report(0, pci=0), make_report(1, pci=1, pmi=[1, 2, 3])]
    xapp, ctrl = make_xapp(agent, first)
    decision = xapp.decide(1)
    assert decision.policy is None
    directives = {m.payload.pci: m.payload for m in ctrl.drain()}
    assert sorted(directives) == [0, 1]
    covered = {
        (a.ue, s): a.pmi for d in directives.values() for a in d.assignments
        for s in a.subbands
    }
    assert covered[(1, 0)] == 1 and covered[(1, 2)] == 3
    assert covered[(0, 2)] == 7

    # ue 1 goes quiet: its previous assignment is held
    xapp.bus.publish_payload(make_report(0, pci=0, tti=2, pmi=[9, 9, 9]))
    xapp.decide(2)
    directives = {m.payload.pci: m.payload for m in ctrl.drain()}
    assert [a.pmi for a in directives[1].assignments] == [1, 2, 3]
    assert [a.pmi for a in directives[0].assignments] == [9]


def test_decision_targets_most_interfered_cell():
    reports = [
        make_report(0, pci=0, interf_mw=[1e-12]),
        make_report(1, pci=1, interf_mw=[5e-12], rsrp_dbm=-110.0),
        make_report(2, pci=1, interf_mw=[1e-13]),
    ]
    xapp, ctrl = make_xapp(FixedAgent([0, 5, 17]), reports)
    decision = xapp.decide(1)
    assert decision.pci == 1
    assert decision.group.kind == GroupKind.EDGE
    assert decision.selected == (1,)
    [message] = ctrl.drain()
    assert message.subject == "ctrl.cell.1"
    assert [(a.ue, a.pmi) for a in message.payload.assignments] == [(1, 5)]
    assert xapp.previous_group == GroupKind.EDGE


def test_empty_group_publishes_noop():
    reports = [make_report(u, interf_mw=[1e-12]) for u in range(3)]
    xapp, ctrl = make_xapp(FixedAgent([0, 1, 1]), reports)
    decision = xapp.decide(1)
    assert decision.degenerate
    assert decision.selected == (0, 1, 2)
    [message] = ctrl.drain()
    assert message.payload.is_noop


def test_invalid_action_is_penalized():
    xapp, ctrl = make_xapp(FixedAgent([7, 0, 0]), [make_report(0)])
    decision = xapp.decide(1)
    assert decision.invalid
    assert ctrl.drain() == []
    realized = SimpleNamespace(
        wb_cqi=np.array([9]), i_ue=[0.0], utilization=np.array([0.85])
    )
    breakdown = xapp.score(decision, realized)
    assert breakdown.invalid
    assert breakdown.action_penalty == -10.0
    assert breakdown.total == breakdown.recompute()
    assert breakdown.total == pytest.approx(cqi_to_se(9) - 2.5 - 10.0)


def test_stale_reports_are_ignored():
    xapp, _ = make_xapp(FixedAgent([2, 0, 0]), [make_report(0, tti=1)])
    assert xapp.decide(2) is None


def test_plain_agent_always_selects_everyone():
    reports = [
        make_report(u, rsrp_dbm=-110.0 if u == 0 else -80.0) for u in range(4)
    ]
    agent = make_agent("a2c", 64, 128, A2cConfig(hidden=[8]), keyed_rng(0))
    assert isinstance(agent, A2cAgent) and agent.plain
    xapp, _ = make_xapp(agent, reports)
    for tti in (1, 2, 3):
        if tti > 1:
            for r in reports:
                xapp.bus.publish_payload(r.model_copy(update={"tti": tti}))
        decision = xapp.decide(tti)
        assert decision.group.kind == GroupKind.ALL
        assert len(decision.policy.indices) == 2
        agent.record(0.0, done=False)


def test_make_agent():
    cfg = A2cConfig(hidden=[8])
    rng = keyed_rng(0)
    assert isinstance(make_agent("follow_pmi", 64, 128, cfg, rng), FollowPmiAgent)
    assert isinstance(make_agent("random", 64, 128, cfg, rng), RandomAgent)
    inter = make_agent("inter_a2c", 64, 128, cfg, rng)
    assert isinstance(inter, InterA2cAgent)
    assert inter.net.head_sizes == (3, 64, 128)
    assert head_sizes("a2c", 64, 128) == (64, 128)
    with pytest.raises(ActionError):
        make_agent("oracle", 64, 128, cfg, rng)


def test_policy_agent_learns_every_n_steps():
    cfg = A2cConfig(hidden=[8], n_steps=3)
    agent = make_agent("inter_a2c", 4, 4, cfg, keyed_rng(1))
    reports = [make_report(u, pmi=[0, 0, 0]) for u in range(3)]
    xapp = XApp(agent, InProcessBus(), ExperimentConfig(), I_REF, 4, 4)
    before = agent.net.params.copy()
    for tti in range(1, 5):
        for r in reports:
            xapp.bus.publish_payload(r.model_copy(update={"tti": tti}))
        xapp.decide(tti)
        agent.record(1.0, done=False)
    assert agent.learner.updates == 1
    assert not np.array_equal(agent.net.params, before)
    for r in reports:
        xapp.bus.publish_payload(r.model_copy(update={"tti": 5}))
    xapp.decide(5)
    agent.record(1.0, done=True)
    assert agent.learner.updates == 2
    assert len(agent.trajectory) == 0


def test_greedy_frozen_agent_does_not_learn():
    agent = make_agent("inter_a2c", 4, 4, A2cConfig(hidden=[8]), keyed_rng(2))
    agent.training = False
    xapp, _ = make_xapp(agent, [make_report(0, pmi=[0, 0, 0])])
    before = agent.net.params.copy()
    first = xapp.decide(1, greedy=True)
    agent.record(1.0, done=True)
    assert np.array_equal(agent.net.params, before)
    fp = agent.net.forward(first.state.as_array())
    assert first.policy.indices == tuple(int(np.argmax(z[0])) for z in fp.logits)
