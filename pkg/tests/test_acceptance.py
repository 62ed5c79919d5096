"""Acceptance criteria, one test each; a summary line per criterion is printed at the end."""

import math
import os
import random
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest

from reflex.bench import (
    RunConfig,
    avg_env_steps,
    avg_replans,
    reflection_success_rate,
    round_half_up,
    run_bench,
    success_rate,
    table_cells,
)
from reflex.collision import Capsule, Entity, capsule_contact, check_collision
from reflex.errors import ParseError, ReplayDivergence
from reflex.geometry import Pose
from reflex.kinematics import IKInfeasibleError, forward_kinematics, interpolate, inverse_kinematics
from reflex.llm import BackendConfig, HttpBackend, ReplayBackend, ScriptedBackend, load_fixture, read_transcript
from reflex.metacog import EpisodeOptions, EpisodeResult, ReflectionRecord, replay_episode, run_episode
from reflex.plan import parse_plan, serialize_plan
from reflex.skills import extract_skills, load, save
from reflex.validate import Collision, FailureFeedback, validate_joint_plan
from reflex.world import reset

from . import conftest
from .conftest import FIXTURES, fixture_response, task, unit_arm
from .test_kinematics import fk_oracle
from .test_skills import REFERENCE_SKILLS, exemplars, reference_library


@contextmanager
def criterion(n: int, title: str, limit: float):
    start = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - start
        assert elapsed < limit, f"took {elapsed:.2f} s, budget {limit} s"
    except BaseException as exc:
        if isinstance(exc, pytest.skip.Exception):
            conftest.ACCEPTANCE.append(f"criterion {n}: SKIP {title} ({exc})")
        else:
            conftest.ACCEPTANCE.append(f"criterion {n}: FAIL {title} ({str(exc).splitlines()[0][:120]})")
        raise
    conftest.ACCEPTANCE.append(f"criterion {n}: PASS {title} ({elapsed:.2f} s)")


def scripted(name):
    return BackendConfig("scripted", fixture_path=str(FIXTURES / name))


OK_FIXTURES = {
    "move_rope": "move_rope_ok.json",
    "arrange_cabinet": "arrange_cabinet_ok.json",
    "make_sandwich": "make_sandwich_ok.json",
    "install_drywall": "drywall_ok.json",
}


def test_1_metric_formulas():
    with criterion(1, "metric formulas match hand-computed values exactly", 1.0):
        fb = FailureFeedback(Collision("alice", "bob", Pose(0, 0, 0)), 1, 0)

        def ep(ok, steps, replans, valid=()):
            recs = tuple(ReflectionRecord(i + 1, fb, v) for i, v in enumerate(valid))
            return EpisodeResult("t", ok, steps, replans, recs)

        results = [
            ep(True, 4, 0),
            ep(True, 4, 2, (False, True)),
            ep(True, 4, 1, (True,)),
            ep(True, 5, 3, (False, True, True)),
            ep(False, 9, 5, (False,) * 5),
        ]
        # hand-computed: 4/5 succeed; steps over successes (4+4+4+5)/4 = 4.25;
        # replans over all runs 11/5 = 2.2; valid regenerations 4 of 6 in successful runs
        assert success_rate(results) == (0.8, 0.18)
        assert avg_env_steps(results) == 4.3
        assert avg_replans(results) == 2.2
        assert reflection_success_rate(results) == 0.67
        assert avg_env_steps([ep(False, 3, 1)]) is None
        assert avg_replans([ep(False, 3, 5), ep(True, 2, 1), ep(True, 2, 0)]) == 2.0


def test_2_stderr_consistency():
    with criterion(2, "binomial stderr reproduces the reported +/- cells", 1.0):
        cells = {0.86: 0.08, 0.95: 0.05, 0.76: 0.10, 1.00: 0.00, 0.62: 0.11, 0.90: 0.07, 0.96: 0.04}
        for p, se in cells.items():
            assert round_half_up(math.sqrt(p * (1 - p) / 20), 2) == se, p


def test_3_scripted_episodes():
    with criterion(3, "four task fixtures succeed over 20 seeded rounds", 10.0):
        for name, fixture in OK_FIXTURES.items():
            cfg = RunConfig((name,), "reflex", scripted(fixture), rounds=20, freeze_library=True)
            summaries, raw = run_bench(cfg, write=False)
            assert len(raw) == 20
            assert all(r.success and r.env_steps <= 10 and r.replan_attempts == 0 for r in raw), name
            assert table_cells(summaries[0])[0] == "1.00 ± 0.00"
            assert run_bench(cfg, write=False)[1] == raw, f"{name} not deterministic"


def test_4_reflection_recovery():
    with criterion(4, "reflection recovers the injected collision; no-reflection variant fails", 5.0):
        cfg = RunConfig(("move_rope",), "reflex", scripted("move_rope_reflection.json"), rounds=1, freeze_library=True)
        summaries, raw = run_bench(cfg, write=False)
        assert raw[0].success and raw[0].replan_attempts == 1
        assert raw[0].reflections[0].failure.kind == "Collision"
        assert summaries[0].reflection_success_rate == 1.0
        cfg = replace(cfg, variant="reflex_no_reflection")
        assert not run_bench(cfg, write=False)[1][0].success


def test_5_inward_grasp():
    with criterion(5, "end grasp collides at a fixed waypoint; inward OFFSET 0.15 grasp completes", 5.0):
        t = task("move_rope")
        end_grasp = fixture_response("move_rope_reflection.json", 0)
        inward = fixture_response("move_rope_reflection.json", 1)
        report, _ = validate_joint_plan(reset(t), t, parse_plan(end_grasp))
        f = report.failure
        assert isinstance(f.nature, Collision) and {f.nature.a, f.nature.b} == {"alice", "bob"}
        assert (f.step_index, f.waypoint_index) == (1, 27)
        # verdict flip frozen from the offset sweep: collides below 0.02 m, clear from 0.02 m
        for off, ok in ((0.0, False), (0.01, False), (0.02, True), (0.03, True)):
            text = end_grasp.replace("PICK rope HANDLE left_end", f"PICK rope OFFSET {off}")
            assert validate_joint_plan(reset(t), t, parse_plan(text))[0].ok is ok, off
        assert "PICK rope OFFSET 0.15" in inward
        assert validate_joint_plan(reset(t), t, parse_plan(inward))[0].ok
        r = run_episode(t, None, ScriptedBackend([("[TASK]", inward)]))
        assert r.success and r.replan_attempts == 0


def fk_batch(q):
    """Unit-link planar-elbow FK for many configurations at once, checked against fk_oracle."""
    reach = np.cos(q[:, 1]) + np.cos(q[:, 1] + q[:, 2])
    z = np.sin(q[:, 1]) + np.sin(q[:, 1] + q[:, 2])
    return np.stack([reach * np.cos(q[:, 0]), reach * np.sin(q[:, 0]), z], axis=1)


def test_6_kinematics_properties():
    with criterion(6, "FK/IK round trip, IK totality and interpolation gap", 5.0):
        rng = random.Random(6)
        arm = unit_arm()
        for _ in range(1000):
            d, az, el = rng.uniform(0.05, 1.95), rng.uniform(-math.pi, math.pi), rng.uniform(-1.4, 1.4)
            target = Pose(d * math.cos(az) * math.cos(el), d * math.sin(az) * math.cos(el), d * math.sin(el))
            q = inverse_kinematics(arm, target)
            assert math.dist(forward_kinematics(arm, q).position, target.position) <= 1e-9
            assert np.allclose(fk_oracle((0, 0, 0, 0), (1, 1), q), target.position, atol=1e-9)
        tight = unit_arm(limits=((-0.5, 0.5), (0.0, 1.0), (0.0, 2.0)))
        for _ in range(1000):
            target = Pose(*(rng.uniform(-3, 3) for _ in range(3)))
            try:
                q = inverse_kinematics(tight, target)
            except IKInfeasibleError as exc:
                assert exc.reason in ("out_of_reach", "joint_limit")
            else:
                assert tight.within_limits(q)
        for _ in range(1000):
            a = tuple(rng.uniform(-3, 3) for _ in range(3))
            b = tuple(rng.uniform(-3, 3) for _ in range(3))
            pts = fk_batch(np.array([q for q, _ in interpolate(a, b, arm)]))
            assert np.linalg.norm(np.diff(pts, axis=0), axis=1).max(initial=0.0) <= 0.05 + 1e-12


def _scene(rng, n):
    out = []
    for i in range(n):
        a = tuple(rng.uniform(-1, 1) for _ in range(3))
        b = a if rng.random() < 0.3 else tuple(rng.uniform(-1, 1) for _ in range(3))
        out.append(Entity(f"e{i}", (Capsule(a, b, rng.uniform(0.01, 0.3)),)))
    return out


def test_7_collision_properties():
    with criterion(7, "collision symmetry, determinism and monotone radius", 10.0):
        rng = random.Random(7)
        for _ in range(1000):
            scene = _scene(rng, rng.randint(2, 6))
            verdict = check_collision(scene)
            assert check_collision(scene) == verdict
            shuffled = scene[:]
            rng.shuffle(shuffled)
            assert check_collision(shuffled) == verdict
            x, y = scene[0].parts[0], scene[1].parts[0]
            pxy, pyx = capsule_contact(x, y), capsule_contact(y, x)
            assert (pxy is None) == (pyx is None)
            if pxy is not None:
                assert np.allclose(pxy, pyx, atol=1e-12)
            grown = [Entity(e.name, tuple(replace(c, radius=c.radius * 1.5) for c in e.parts)) for e in scene]
            if verdict is not None:
                assert check_collision(grown) is not None


def test_8_parser_properties():
    with criterion(8, "plan round trip over 1000 plans and fuzz totality over 10000 inputs", 30.0):
        rng = random.Random(8)

        def num(lo, hi):
            return round(rng.uniform(lo, hi), rng.randint(0, 6)) + 0.0

        def ident():
            return rng.choice("abcdxyz") + "".join(rng.choice("abc019_") for _ in range(rng.randint(0, 5)))

        def pose():
            return f"({num(-2, 2)},{num(-2, 2)},{num(-2, 2)}" + (f",{num(-3, 3)})" if rng.random() < 0.5 else ")")

        def action():
            k = rng.randrange(9)
            return [
                lambda: f"PICK {ident()}",
                lambda: f"PICK {ident()} HANDLE {ident()}",
                lambda: f"PICK {ident()} OFFSET {num(0, 1)}",
                lambda: f"PLACE {ident()} AT {pose()}",
                lambda: f"MOVE TO {pose()}",
                lambda: f"TWIST {num(-180, 180)}",
                lambda: "OPEN",
                lambda: "CLOSE",
                lambda: "WAIT",
            ][k]()

        for _ in range(1000):
            agents = rng.sample(["alice", "bob", "carol", "dave"], rng.randint(1, 3))
            text = "\n".join(f"PLAN {a}: " + " -> ".join(action() for _ in range(rng.randint(1, 6))) for a in agents)
            plan = parse_plan(text)
            assert parse_plan(serialize_plan(plan)) == plan
            assert len({len(p.actions) for p in plan.plans.values()}) == 1

        soup = ["PLAN", " ", "alice", ":", "PICK", "->", "(", ")", ",", "0.5", "-1e3", "WAIT", "\n", "OFFSET", "AT", "TO"]
        # 10000 random byte strings, plus token soup that gets past the first few characters
        inputs = [bytes(rng.randrange(256) for _ in range(rng.randint(0, 80))).decode("utf-8", errors="replace")
                  for _ in range(10000)]
        inputs += ["".join(rng.choice(soup) for _ in range(rng.randint(0, 25))) for _ in range(5000)]
        for text in inputs:
            try:
                parse_plan(text)
            except ParseError as exc:
                assert exc.line >= 1 and exc.column >= 1


def test_9_skill_library(tmp_path):
    with criterion(9, "reference skills extract verbatim and modular skills cluster per task", 2.0):
        backend = ScriptedBackend(load_fixture(FIXTURES / "skills_reference.json"))
        drywall = next(e for e in exemplars() if e.source_task == "install_drywall")
        assert [s.name for s in extract_skills(drywall, backend)][:5] == REFERENCE_SKILLS["install_drywall"][0]
        lib = reference_library()
        for modular in sorted({m for _, mods in REFERENCE_SKILLS.values() for m in mods}):
            owners = [c for c in lib.clusters if any(lib.skills[m].name == modular for m in c.members)]
            assert len(owners) == 1 and owners[0].canonical_name == modular, modular
            served = {lib.exemplars[e].source_task for m in owners[0].members for e in lib.skills[m].exemplar_ids}
            assert served == {t for t, (_, mods) in REFERENCE_SKILLS.items() if modular in mods}, modular
        transfer = next(c for c in lib.clusters if c.canonical_name == "object_manipulation_and_transfer")
        assert len(transfer.members) == 4
        save(lib, tmp_path / "lib.json")
        assert load(tmp_path / "lib.json") == lib


def test_10_replay_closure(tmp_path):
    with criterion(10, "recorded episodes replay field for field; mutations diverge", 2.0):
        path = tmp_path / "rope.jsonl"
        backend = ScriptedBackend(load_fixture(FIXTURES / "move_rope_reflection.json"))
        original = run_episode(task("move_rope"), None, backend, EpisodeOptions(), path)
        replayed, recorded = replay_episode(path)
        assert replayed == original == recorded
        records = read_transcript(path)
        exchanges = [r for r in records if "prompt" in r]
        exchanges[0]["prompt"] = exchanges[0]["prompt"].replace("rope", "cord", 1)
        replay = ReplayBackend(records)
        with pytest.raises(ReplayDivergence):
            run_episode(task("move_rope"), None, replay, EpisodeOptions(), record=False)


LIVE_KEY = "REFLEX_LIVE_API_KEY"


@pytest.mark.live
@pytest.mark.skipif(not os.environ.get(LIVE_KEY), reason=f"set {LIVE_KEY} to run the live smoke test")
def test_11_live_smoke():
    with criterion(11, "live endpoint runs one install_drywall episode", 600.0):
        config = BackendConfig(
            "http",
            endpoint=os.environ.get("REFLEX_LIVE_ENDPOINT", "https://api.openai.com/v1/chat/completions"),
            model=os.environ.get("REFLEX_LIVE_MODEL", "gpt-4"),
            api_key_env=LIVE_KEY,
        )
        r = run_episode(task("install_drywall"), None, HttpBackend(config))
        print(f"live episode success={r.success} steps={r.env_steps} replans={r.replan_attempts}")
        assert r.error is None


def test_11_reported_when_skipped():
    if os.environ.get(LIVE_KEY):
        pytest.skip("live run active")
    conftest.ACCEPTANCE.append(f"criterion 11: SKIP live smoke test (set {LIVE_KEY} to enable)")
