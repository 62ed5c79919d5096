
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reflex.errors import DuplicateAgent, ParseError, UnknownVerb
from reflex.geometry import Pose
from reflex.metacog import build_meta_input
from reflex.plan import (
    GRAMMAR,
    AgentPlan,
    Close,
    JointPlan,
    Move,
    Open,
    Pick,
    Place,
    Twist,
    Wait,
    parse_plan,
    render_observation,
    render_prompt,
    serialize_plan,
)
from reflex.skills import Exemplar, SkillCluster
from reflex.validate import Collision, FailureFeedback
from reflex.world import ArmState, Observation

TWO_AGENT = "PLAN alice: PICK rope HANDLE left_end -> MOVE TO (0.5,0.2,0.4)\nPLAN bob: PICK rope HANDLE right_end -> WAIT"


def test_parse_two_agent_plan():
    plan = parse_plan(TWO_AGENT)
    assert plan.agents == ["alice", "bob"]
    assert len(plan) == 2
    assert plan.plans["alice"].actions == (Pick("rope", handle="left_end"), Move(Pose(0.5, 0.2, 0.4)))
    assert plan.plans["bob"].actions == (Pick("rope", handle="right_end"), Wait())


def test_parse_offset_grasp():
    plan = parse_plan("PLAN alice: PICK rope OFFSET 0.15")
    assert plan.plans["alice"].actions == (Pick("rope", offset=0.15),)


def test_unknown_verb():
    with pytest.raises(UnknownVerb) as err:
        parse_plan("PLAN alice: GRAB rope")
    assert err.value.token == "GRAB"
    assert err.value.line == 1
    assert err.value.column == 13


def test_duplicate_agent():
    with pytest.raises(DuplicateAgent) as err:
        parse_plan("PLAN alice: WAIT\nPLAN alice: OPEN")
    assert err.value.agent_id == "alice" and err.value.line == 2


def test_positioned_error_on_bad_pose():
    with pytest.raises(ParseError) as err:
        parse_plan("note\nPLAN bob: MOVE TO (1,2)")
    assert (err.value.line, err.value.column) == (2, 23)
    assert "3 or 4" in err.value.expected


def test_no_plan_line():
    with pytest.raises(ParseError):
        parse_plan("I would pick up the rope.")


def test_trailing_prose_ignored_and_yaw_defaults():
    plan = parse_plan("Here is the plan.\nPLAN a: PLACE cup AT (1,2,3) -> TWIST -5\nThis should work.")
    assert plan.plans["a"].actions == (Place("cup", Pose(1, 2, 3, 0)), Twist(-5.0))


def test_twist_out_of_range():
    with pytest.raises(ParseError):
        parse_plan("PLAN a: TWIST 200")


def test_padding_with_waits():
    plan = parse_plan("PLAN a: OPEN -> CLOSE -> WAIT -> OPEN\nPLAN b: CLOSE")
    assert len(plan.plans["b"].actions) == 4
    assert plan.plans["b"].actions[1:] == (Wait(),) * 3


def test_round_trip_example():
    plan = parse_plan(TWO_AGENT)
    assert parse_plan(serialize_plan(plan)) == plan


def test_serialize_pads_unequal_lengths():
    plan = JointPlan({"a": AgentPlan("a", (Open(), Close())), "b": AgentPlan("b", (Open(),))})
    assert serialize_plan(plan) == "PLAN a: OPEN -> CLOSE\nPLAN b: OPEN -> WAIT\n"


def test_serialize_refuses_empty_plan():
    with pytest.raises(ValueError):
        serialize_plan(JointPlan({}))


# ------------------------------------------------------------------ properties

ident = st.from_regex(r"[a-z][a-z0-9_]{0,6}", fullmatch=True)
num = st.floats(-5, 5, allow_nan=False).map(lambda v: v + 0.0)
pose = st.builds(Pose, num, num, num, st.floats(-3.1, 3.1))
action = st.one_of(
    st.builds(Pick, ident),
    st.builds(lambda o, h: Pick(o, handle=h), ident, ident),
    st.builds(lambda o, d: Pick(o, offset=d), ident, st.floats(0, 2)),
    st.builds(Place, ident, pose),
    st.builds(Move, pose),
    st.builds(Twist, st.floats(-180, 180)),
    st.just(Open()),
    st.just(Close()),
    st.just(Wait()),
)


@st.composite
def joint_plans(draw):
    agents = draw(st.lists(ident, min_size=1, max_size=3, unique=True))
    return JointPlan({a: AgentPlan(a, tuple(draw(st.lists(action, min_size=1, max_size=5)))) for a in agents})


@settings(max_examples=1000)
@given(joint_plans())
def test_serialize_parse_round_trip(plan):
    back = parse_plan(serialize_plan(plan))
    assert back == plan.padded()
    n = len(plan)
    for a, p in plan.plans.items():
        assert back.plans[a].actions[len(p.actions):] == (Wait(),) * (n - len(p.actions))


@settings(max_examples=10000)
@given(st.text(alphabet=st.sampled_from(list("PLAN alice:PICK->WAIT(0.1,2)e-+ \n\tOFFSETxyz")), max_size=60) | st.text(max_size=40))
def test_parser_is_total(text):
    try:
        plan = parse_plan(text)
    except ParseError as exc:
        assert exc.line >= 1 and exc.column >= 1
    else:
        lengths = {len(p.actions) for p in plan.plans.values()}
        assert len(lengths) == 1


# --------------------------------------------------------------------- prompts


def _obs(objects=()):
    return Observation("alice", tuple(objects), ArmState((0.0, 0.5, -0.25)), 1.125, 0)


def test_observation_formatting():
    text = render_observation(_obs([("rope", Pose(0.1234, 0, 0, 0), "rope")]))
    assert "rope rope at (0.123,0.000,0.000,0.000)" in text


def test_empty_visibility_sentinel():
    assert "no visible objects" in render_observation(_obs())


def test_observation_sorted_by_id():
    a = ("b_obj", Pose(0, 0, 0), "cup")
    b = ("a_obj", Pose(1, 0, 0), "cup")
    one = render_observation(_obs([a, b]))
    assert one == render_observation(_obs([b, a]))
    assert one.index("a_obj") < one.index("b_obj")


def _retrieved():
    ex = Exemplar("drywall-demo", "install the panel", "{}", "PLAN alice: WAIT", "install_drywall")
    return [
        (SkillCluster("c0001", "panel_twisting", ("s00001",), frozenset()), [ex]),
        (SkillCluster("c0002", "synchronized_lifting", ("s00002",), frozenset()), [ex]),
    ]


def test_prompt_is_deterministic_and_sectioned():
    meta = build_meta_input("inference", {"retrieved": _retrieved()})
    p1 = render_prompt("lift the panel", _obs(), meta)
    p2 = render_prompt("lift the panel", _obs(), meta)
    assert p1.rendered == p2.rendered
    assert [label for label, _ in p1.sections] == ["GOAL", "OBSERVATION", "META", "FORMAT"]
    assert p1.sections[0][1] == "lift the panel"
    assert GRAMMAR.strip() in p1.rendered
    assert "respond only with plan lines" in p1.rendered.lower()


def test_inference_meta_lists_retrieved_skills():
    meta = build_meta_input("inference", {"retrieved": _retrieved()})
    meta_text = dict(render_prompt("g", _obs(), meta).sections)["META"]
    assert "panel_twisting" in meta_text and "synchronized_lifting" in meta_text
    assert "PLAN alice: WAIT" in meta_text


def test_reflection_meta_carries_failure_verbatim():
    fb = FailureFeedback(Collision("alice", "bob", Pose(0.1, 0.2, 0.3)), 2, 14)
    meta = build_meta_input("reflection", {"failure": fb, "prior_plan": "PLAN alice: WAIT", "attempt_index": 1})
    meta_text = dict(render_prompt("g", _obs(), meta).sections)["META"]
    assert fb.to_json() in meta_text
    assert "step 2" in meta_text and "Collision" in meta_text
