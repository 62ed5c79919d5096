import json

import pytest

from reflex.errors import NetworkError, PlanSynthesisError
from reflex.geometry import Pose
from reflex.llm import ScriptedBackend, load_fixture
from reflex.metacog import (
    UNAIDED_CUE,
    Construction,
    EpisodeOptions,
    EpisodeResult,
    EpisodeState,
    Inference,
    Reflection,
    _observe_all,
    build_meta_input,
    failure_terms,
    infer_plan,
    reflect,
    replay_episode,
    retrieval_query,
    run_episode,
)
from reflex.plan import parse_plan
from reflex.skills import LibraryStore, retrieve, tokenize
from reflex.validate import Collision, FailureFeedback, IKInfeasible
from reflex.world import reset

from .conftest import FIXTURES, fixture_response, task
from .test_skills import exemplars, reference_library

DRYWALL_OK = fixture_response("drywall_ok.json")
GARBAGE = "I think the arms should cooperate."


def rules(*names):
    out = []
    for n in names:
        out += load_fixture(FIXTURES / n)
    return out


def observations(t):
    return _observe_all(EpisodeState(t, reset(t)), False)


class Spy:
    def __init__(self, inner):
        self.inner = inner
        self.calls = []

    def complete(self, messages, stage="inference"):
        self.calls.append((stage, list(messages)))
        return self.inner.complete(messages, stage)


class Broken:
    def complete(self, messages, stage="inference"):
        raise NetworkError("endpoint unreachable")


# ----------------------------------------------------------------- meta input


def test_inference_with_empty_library():
    meta = build_meta_input("inference", {"retrieved": []})
    assert isinstance(meta, Inference)
    assert meta.retrieved == () and meta.attention_cues == UNAIDED_CUE


def test_reflection_meta_after_collision():
    fb = FailureFeedback(Collision("alice", "bob", Pose(0, 0.5, 0.3)), 2, 5)
    meta = build_meta_input("reflection", {"failure": fb, "prior_plan": parse_plan(DRYWALL_OK), "attempt_index": 1})
    assert isinstance(meta, Reflection)
    assert meta.failure.step_index == 2
    assert "PLAN alice: PICK panel HANDLE left" in meta.prior_plan


def test_construction_lists_its_exemplar():
    ex = exemplars()[0]
    meta = build_meta_input("construction", {"exemplars": [ex]})
    assert isinstance(meta, Construction) and meta.exemplars == (ex,)


def test_meta_input_is_deterministic():
    ctx = {"retrieved": retrieve(reference_library(), "lift panel", 2)}
    assert build_meta_input("inference", ctx) == build_meta_input("inference", ctx)


def test_attempt_index_starts_at_one():
    fb = FailureFeedback(Collision("a", "b", Pose(0, 0, 0)), 0, 0)
    with pytest.raises(ValueError):
        build_meta_input("reflection", {"failure": fb, "prior_plan": "PLAN a: WAIT", "attempt_index": 0})


# ---------------------------------------------------------------- plan synthesis


def test_infer_plan_pass_through():
    t = task("install_drywall")
    plan = infer_plan(t, observations(t), ScriptedBackend(rules("drywall_ok.json")), build_meta_input("inference", {}))
    assert plan == parse_plan(DRYWALL_OK)


def test_prompt_covers_every_agent():
    t = task("install_drywall")
    spy = Spy(ScriptedBackend(rules("drywall_ok.json")))
    infer_plan(t, observations(t), spy, build_meta_input("inference", {}))
    (stage, msgs), = spy.calls
    prompt = msgs[-1].content
    assert stage == "inference"
    for section in ("[GOAL alice]", "[GOAL bob]", "[OBSERVATION alice]", "[OBSERVATION bob]", "[META]", "[FORMAT]"):
        assert section in prompt


def test_garbage_twice_then_valid():
    t = task("install_drywall")
    spy = Spy(ScriptedBackend([("[TASK]", GARBAGE), ("Your answer", GARBAGE), ("Your answer", DRYWALL_OK)]))
    plan = infer_plan(t, observations(t), spy, build_meta_input("inference", {}))
    assert plan == parse_plan(DRYWALL_OK)
    assert len(spy.calls) == 3
    last = spy.calls[-1][1]
    assert [m.role for m in last] == ["system", "user", "assistant", "user", "assistant", "user"]
    assert "line" in last[-1].content


def test_garbage_three_times():
    t = task("install_drywall")
    backend = ScriptedBackend([("[TASK]", GARBAGE), ("Your answer", GARBAGE), ("Your answer", GARBAGE)])
    with pytest.raises(PlanSynthesisError):
        infer_plan(t, observations(t), backend, build_meta_input("inference", {}))


def test_plan_for_wrong_agents_is_reprompted():
    t = task("install_drywall")
    backend = ScriptedBackend([("[TASK]", "PLAN carol: WAIT"), ("Your answer", DRYWALL_OK)])
    assert infer_plan(t, observations(t), backend, build_meta_input("inference", {})).agents == ["alice", "bob"]


# -------------------------------------------------------------------- reflection


def test_ik_failure_terms_raise_spatial_reasoning_rank():
    lib = reference_library()
    fb = FailureFeedback(IKInfeasible("alice", Pose(2, 0, 0.3), "out_of_reach"), 1, 0)
    for name in ("install_drywall", "move_rope", "make_sandwich"):
        t = task(name)
        base = retrieval_query(t, observations(t))
        augmented = f"{base} {failure_terms(fb)}"
        assert {"ik", "infeasible", "out", "reach"} <= tokenize(augmented)
        rank = lambda q: [c.canonical_name for c, _ in retrieve(lib, q, k=100)].index("spatial_reasoning_and_alignment")
        assert rank(augmented) < rank(base)


def test_reflect_increments_attempt_and_lists_suspects():
    t = task("move_rope")
    obs = observations(t)
    lib = reference_library()
    prior = build_meta_input("inference", {"retrieved": retrieve(lib, "rope", 2)})
    plan = parse_plan(fixture_response("move_rope_reflection.json", 0))
    fb = FailureFeedback(Collision("alice", "bob", Pose(0.4, 0.03, 0.02)), 1, 27)
    meta, new_plan = reflect(t, fb, prior, plan, obs, lib, ScriptedBackend(rules("move_rope_reflection.json")))
    assert meta.attempt_index == 1
    assert meta.suspected_skills == tuple(c.cluster_id for c, _ in prior.retrieved)
    assert new_plan == parse_plan(fixture_response("move_rope_reflection.json", 1))


# ---------------------------------------------------------------------- episodes


def test_drywall_episode_succeeds_in_four_steps():
    r = run_episode(task("install_drywall"), None, ScriptedBackend(rules("drywall_ok.json")))
    assert (r.success, r.env_steps, r.replan_attempts, r.reflections) == (True, 4, 0, ())


def test_rope_episode_recovers_by_reflection():
    r = run_episode(task("move_rope"), None, ScriptedBackend(rules("move_rope_reflection.json")))
    assert r.success and r.replan_attempts == 1
    assert len(r.reflections) == 1
    rec = r.reflections[0]
    assert rec.attempt_index == 1 and rec.regenerated_plan_valid
    assert rec.failure.kind == "Collision"


def test_rope_episode_without_reflection_fails():
    opts = EpisodeOptions(reflection_enabled=False)
    r = run_episode(task("move_rope"), None, ScriptedBackend(rules("move_rope_reflection.json")), opts)
    assert not r.success and r.replan_attempts == 0 and r.error is None


def test_ablation_dominance_on_injected_fixtures():
    for name, fixture in [("move_rope", "move_rope_reflection.json"), ("install_drywall", "drywall_ok.json")]:
        on = run_episode(task(name), None, ScriptedBackend(rules(fixture)))
        off = run_episode(task(name), None, ScriptedBackend(rules(fixture)), EpisodeOptions(reflection_enabled=False))
        assert on.success >= off.success


def test_replan_cap_and_attempt_numbering():
    bad = fixture_response("move_rope_reflection.json", 0)
    backend = ScriptedBackend([("[TASK]", bad)] * 10)
    r = run_episode(task("move_rope"), None, backend)
    assert not r.success
    assert r.replan_attempts == 5
    assert [rec.attempt_index for rec in r.reflections] == [1, 2, 3, 4, 5]
    assert not any(rec.regenerated_plan_valid for rec in r.reflections)


def test_synthesis_failure_is_a_plain_failure():
    r = run_episode(task("install_drywall"), None, ScriptedBackend([("[TASK]", GARBAGE), ("Your", GARBAGE), ("Your", GARBAGE)]))
    assert not r.success and r.error is None and r.env_steps == 0


def test_backend_outage_is_annotated():
    r = run_episode(task("install_drywall"), None, Broken())
    assert not r.success and "NetworkError" in r.error


def test_library_unchanged_after_failure():
    store = LibraryStore(reference_library())
    before = store.snapshot.version
    run_episode(task("move_rope"), store, ScriptedBackend(rules("move_rope_reflection.json")), EpisodeOptions(reflection_enabled=False))
    assert store.snapshot.version == before


def test_success_ingests_an_exemplar():
    store = LibraryStore(reference_library())
    before = store.snapshot
    r = run_episode(task("install_drywall"), store, ScriptedBackend(rules("drywall_ok.json", "skills_reference.json")))
    assert r.success
    after = store.snapshot
    assert after.version == before.version + 1
    new = set(after.exemplars) - set(before.exemplars)
    assert new == {"install_drywall-0-5"}
    assert after.exemplars["install_drywall-0-5"].demonstration.startswith("PLAN alice: PICK panel")


def test_frozen_library_is_not_updated():
    store = LibraryStore(reference_library())
    opts = EpisodeOptions(freeze_library=True)
    run_episode(task("install_drywall"), store, ScriptedBackend(rules("drywall_ok.json", "skills_reference.json")), opts)
    assert store.snapshot.version == 4


def test_central_variant_sees_everything():
    t = task("make_sandwich")
    for central, expect in ((False, False), (True, True)):
        spy = Spy(ScriptedBackend(rules("make_sandwich_ok.json")))
        run_episode(t, None, spy, EpisodeOptions(central_full_state=central))
        prompt = spy.calls[0][1][-1].content
        alice_obs = prompt.split("[OBSERVATION alice]")[1].split("[GOAL bob]")[0]
        assert ("ham food_item" in alice_obs) is expect


@pytest.mark.parametrize(
    "name, fixture",
    [("move_rope", "move_rope_reflection.json"), ("make_sandwich", "make_sandwich_ok.json"), ("install_drywall", "bad")],
)
def test_record_replay_closure(tmp_path, name, fixture):
    path = tmp_path / "t.jsonl"
    backend = Broken() if fixture == "bad" else ScriptedBackend(rules(fixture, "skills_reference.json"))
    original = run_episode(task(name), LibraryStore(reference_library()), backend, EpisodeOptions(), path)
    replayed, recorded = replay_episode(path)
    assert replayed == original == recorded


def test_transcript_layout(tmp_path):
    path = tmp_path / "t.jsonl"
    run_episode(task("install_drywall"), None, ScriptedBackend(rules("drywall_ok.json")), EpisodeOptions(), path)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert recs[0]["stage"] == "episode" and recs[-1]["stage"] == "result"
    assert recs[1]["stage"] == "inference" and {"prompt", "response", "timestamp"} <= set(recs[1])
    assert EpisodeResult.from_dict(recs[-1]["result"]).success


def test_episode_is_deterministic():
    runs = [run_episode(task("arrange_cabinet"), None, ScriptedBackend(rules("arrange_cabinet_ok.json"))) for _ in range(2)]
    assert runs[0] == runs[1]
