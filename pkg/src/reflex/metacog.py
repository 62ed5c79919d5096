"""Metacognitive planning loop: meta-input construction, plan synthesis, reflection, episodes."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Union

from reflex.errors import (
    BackendError,
    EmptyLibrary,
    ExtractionParseError,
    ParseError,
    PlanSynthesisError,
    ReplayDivergence,
)
from reflex.llm import (
    ChatMessage,
    LlmBackend,
    ReplayBackend,
    TranscriptSink,
    read_transcript,
    record_wrap,
)
from reflex.plan import JointPlan, format_section, parse_plan, render_observation, serialize_plan
from reflex.skills import (
    DEFAULT_K,
    Exemplar,
    LibraryStore,
    SkillCluster,
    SkillLibrary,
    extract_skills,
    library_from_dict,
    library_to_dict,
    retrieve,
)
from reflex.validate import Collision, FailureFeedback, GraspError, IKInfeasible, RopeOverstretch, validate_joint_plan
from reflex.world import (
    Observation,
    TaskSpec,
    apply_joint_step,
    check_success,
    full_observation,
    object_to_dict,
    observe,
    reset,
    task_from_dict,
    task_to_dict,
)

log = logging.getLogger(__name__)

SYSTEM_PROMPT = (
    "You coordinate several robot arms that share one workspace. "
    "Reason about which skills apply, then answer in the requested format only."
)

EXTRACTION_INSTRUCTION = (
    "List the reusable manipulation skills this demonstration relies on, one per line, as\n"
    "SKILL <snake_case_name>: <one sentence description>"
)

PARSE_REPROMPTS = 2

Retrieved = tuple[tuple[SkillCluster, tuple[Exemplar, ...]], ...]


@dataclass(frozen=True)
class Construction:
    exemplars: tuple[Exemplar, ...]
    instruction: str = EXTRACTION_INSTRUCTION


@dataclass(frozen=True)
class Inference:
    attention_cues: str
    retrieved: Retrieved = ()


@dataclass(frozen=True)
class Reflection:
    failure: FailureFeedback
    suspected_skills: tuple[str, ...]
    prior_plan: str
    attempt_index: int
    retrieved: Retrieved = ()

    def __post_init__(self) -> None:
        if self.attempt_index < 1:
            raise ValueError("reflection attempts are numbered from 1")


MetaInput = Union[Construction, Inference, Reflection]

UNAIDED_CUE = "No prior skills are available; plan from the goals and observations alone."
GUIDED_CUE = (
    "Decide which of the retrieved skills apply to this task and adapt their demonstrations. "
    "Keep every arm clear of the others at each step and respect each arm's reach."
)


def build_meta_input(stage: str, context: dict[str, Any]) -> MetaInput:
    """Deterministic meta-input for ``stage`` (construction, inference or reflection)."""
    if stage == "construction":
        return Construction(tuple(context["exemplars"]), context.get("instruction", EXTRACTION_INSTRUCTION))
    retrieved: Retrieved = tuple((c, tuple(exs)) for c, exs in context.get("retrieved", ()))
    if stage == "inference":
        cue = context.get("attention_cues") or (GUIDED_CUE if retrieved else UNAIDED_CUE)
        return Inference(cue, retrieved)
    if stage == "reflection":
        prior = context["prior_plan"]
        return Reflection(
            failure=context["failure"],
            suspected_skills=tuple(context.get("suspected_skills", ())),
            prior_plan=prior if isinstance(prior, str) else serialize_plan(prior),
            attempt_index=context["attempt_index"],
            retrieved=retrieved,
        )
    raise ValueError(f"unknown meta-input stage {stage!r}")


def _render_retrieved(retrieved: Retrieved) -> list[str]:
    lines = []
    for cluster, exemplars in retrieved:
        lines.append(f"skill {cluster.canonical_name} [{cluster.cluster_id}]")
        for ex in exemplars:
            lines.append(f"  exemplar {ex.exemplar_id} ({ex.source_task}): {ex.task_summary}")
            lines.extend("    " + ln for ln in ex.demonstration.splitlines())
    return lines


def render_meta(meta: MetaInput) -> str:
    if isinstance(meta, Construction):
        lines = ["stage: construction", meta.instruction]
        for ex in meta.exemplars:
            lines.append(f"exemplar {ex.exemplar_id} ({ex.source_task})")
            lines.append(f"summary: {ex.task_summary}")
            lines.append(f"scene: {ex.scene_snapshot}")
            lines.append("demonstration:")
            lines.extend(ex.demonstration.splitlines())
        return "\n".join(lines) + "\n"
    if isinstance(meta, Inference):
        lines = ["stage: inference", f"cues: {meta.attention_cues}"]
        lines.extend(_render_retrieved(meta.retrieved))
        return "\n".join(lines) + "\n"
    f = meta.failure
    lines = [
        f"stage: reflection (attempt {meta.attempt_index})",
        f"failure: {f.to_json()}",
        f"meaning: {f.describe()}",
        "suspected skills: " + (", ".join(meta.suspected_skills) or "none"),
        "previous plan:",
        *meta.prior_plan.splitlines(),
        "Find which skills were missing or misapplied and give a revised plan that avoids this failure.",
    ]
    lines.extend(_render_retrieved(meta.retrieved))
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ plan synthesis


def stage_label(meta: MetaInput) -> str:
    if isinstance(meta, Reflection):
        return f"reflection {meta.attempt_index}"
    return "construction" if isinstance(meta, Construction) else "inference"


def central_prompt(task: TaskSpec, observations: dict[str, Observation], meta: MetaInput) -> str:
    """One prompt covering every agent's goal and observation plus the shared meta-input."""
    parts = [
        f"[TASK]\n{task.task_id} {stage_label(meta)}\n{task.summary}\nagents: {', '.join(task.agents)}\n",
    ]
    for agent in task.agents:
        parts.append(f"[GOAL {agent}]\n{task.agent_goals[agent]}\n")
        parts.append(f"[OBSERVATION {agent}]\n{render_observation(observations[agent])}")
    parts.append(f"[META]\n{render_meta(meta)}")
    parts.append(f"[FORMAT]\n{format_section()}")
    return "\n".join(parts)


def _check_agents(plan: JointPlan, task: TaskSpec) -> None:
    if plan.agents != task.agents:
        raise ParseError(
            1, 1, "one PLAN line per agent", f"expected PLAN lines for {task.agents}, got {plan.agents}"
        )


def infer_plan(
    task: TaskSpec, observations: dict[str, Observation], backend: LlmBackend, meta: MetaInput
) -> JointPlan:
    """Prompt the backend and parse its joint plan, re-prompting twice on parse errors."""
    if isinstance(meta, Construction):
        raise ValueError("plans are synthesized from inference or reflection meta-inputs")
    messages = [ChatMessage("system", SYSTEM_PROMPT), ChatMessage("user", central_prompt(task, observations, meta))]
    stage = stage_label(meta).split()[0]
    for attempt in range(PARSE_REPROMPTS + 1):
        text = backend.complete(messages, stage=stage)
        try:
            plan = parse_plan(text)
            _check_agents(plan, task)
            return plan
        except ParseError as exc:
            if attempt == PARSE_REPROMPTS:
                raise PlanSynthesisError(f"no parsable plan after {PARSE_REPROMPTS} re-prompts: {exc}") from exc
            messages = messages + [
                ChatMessage("assistant", text or "(empty)"),
                ChatMessage("user", f"Your answer could not be parsed: {exc}. Reply again with PLAN lines only."),
            ]
    raise AssertionError("unreachable")


def retrieval_query(task: TaskSpec, observations: dict[str, Observation]) -> str:
    goals = " ".join(task.agent_goals[a] for a in task.agents)
    seen = " ".join(render_observation(observations[a]) for a in task.agents)
    return f"{task.summary} {goals} {seen}"


def failure_terms(failure: FailureFeedback) -> str:
    n = failure.nature
    if isinstance(n, Collision):
        return f"collision {n.a} {n.b} clearance path"
    if isinstance(n, IKInfeasible):
        return f"ik infeasible {n.reason}"
    if isinstance(n, RopeOverstretch):
        return f"rope overstretch length {n.object_id}"
    assert isinstance(n, GraspError)
    return f"grasp error {n.object_id}"


def _retrieve(library: SkillLibrary | None, query: str, enabled: bool, k: int) -> Retrieved:
    if not enabled or library is None:
        return ()
    try:
        return tuple((c, tuple(exs)) for c, exs in retrieve(library, query, k))
    except EmptyLibrary:
        return ()


def reflect(
    task: TaskSpec,
    failure: FailureFeedback,
    prior: MetaInput,
    prior_plan: JointPlan,
    observations: dict[str, Observation],
    library: SkillLibrary | None,
    backend: LlmBackend,
    retrieval_enabled: bool = True,
    k: int = DEFAULT_K,
) -> tuple[Reflection, JointPlan]:
    """Build the reflection meta-input for ``failure`` and ask for a revised plan."""
    attempt = prior.attempt_index + 1 if isinstance(prior, Reflection) else 1
    suspected = tuple(c.cluster_id for c, _ in getattr(prior, "retrieved", ()))
    query = f"{retrieval_query(task, observations)} {failure_terms(failure)}"
    meta = build_meta_input(
        "reflection",
        {
            "failure": failure,
            "suspected_skills": suspected,
            "prior_plan": prior_plan,
            "attempt_index": attempt,
            "retrieved": _retrieve(library, query, retrieval_enabled, k),
        },
    )
    assert isinstance(meta, Reflection)
    return meta, infer_plan(task, observations, backend, meta)


# ------------------------------------------------------------------------ episodes


@dataclass(frozen=True)
class ReflectionRecord:
    attempt_index: int
    failure: FailureFeedback
    regenerated_plan_valid: bool
    suspected_skills: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "attempt_index": self.attempt_index,
            "failure": self.failure.to_record(),
            "regenerated_plan_valid": self.regenerated_plan_valid,
            "suspected_skills": list(self.suspected_skills),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ReflectionRecord:
        return cls(
            d["attempt_index"],
            FailureFeedback.from_record(d["failure"]),
            d["regenerated_plan_valid"],
            tuple(d.get("suspected_skills", ())),
        )


@dataclass(frozen=True)
class EpisodeResult:
    task_id: str
    success: bool
    env_steps: int
    replan_attempts: int
    reflections: tuple[ReflectionRecord, ...] = ()
    transcript_path: str | None = None
    seed: int = 0
    error: str | None = None  # infrastructure failure annotation

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["reflections"] = [r.to_dict() for r in self.reflections]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EpisodeResult:
        return cls(
            d["task_id"],
            d["success"],
            d["env_steps"],
            d["replan_attempts"],
            tuple(ReflectionRecord.from_dict(r) for r in d.get("reflections", ())),
            d.get("transcript_path"),
            d.get("seed", 0),
            d.get("error"),
        )


@dataclass(frozen=True)
class EpisodeOptions:
    reflection_enabled: bool = True
    retrieval_enabled: bool = True
    central_full_state: bool = False
    freeze_library: bool = False
    k: int = DEFAULT_K


@dataclass
class EpisodeState:
    task: TaskSpec
    world: Any
    replans_used: int = 0
    env_steps_used: int = 0
    reflection_log: list[ReflectionRecord] = field(default_factory=list)
    status: str = "running"


def _observe_all(state: EpisodeState, full: bool) -> dict[str, Observation]:
    look = full_observation if full else observe
    return {a: look(state.world, state.task, a) for a in state.task.agents}


def _execute(state: EpisodeState, plan: JointPlan, trajs: dict) -> None:
    task = state.task
    for k in range(len(plan)):
        if state.env_steps_used >= task.max_env_steps:
            break
        steps = {a: t.steps[k] for a, t in trajs.items()}
        state.world, outcome = apply_joint_step(state.world, task, plan.step(k), steps)
        state.env_steps_used += 1
        if outcome.done:
            state.status = "success"
            return
    state.status = "success" if check_success(state.world, task) else "failure"


def _ingest(task: TaskSpec, plan: JointPlan, store: LibraryStore, backend: LlmBackend) -> None:
    lib = store.snapshot
    exemplar = Exemplar(
        exemplar_id=f"{task.task_id}-{task.seed}-{lib.version + 1}",
        task_summary=task.summary or task.task_id,
        scene_snapshot=json.dumps([object_to_dict(o) for o in sorted(task.initial_scene, key=lambda o: o.id)]),
        demonstration=serialize_plan(plan),
        source_task=task.task_id,
    )
    try:
        skills = extract_skills(exemplar, backend)
    except ReplayDivergence:
        raise
    except (BackendError, ExtractionParseError) as exc:
        log.info("skipping library update for %s: %s", exemplar.exemplar_id, exc)
        return
    store.add(exemplar, skills)


def _options_dict(o: EpisodeOptions) -> dict[str, Any]:
    return asdict(o)


def run_episode(
    task: TaskSpec,
    library: LibraryStore | SkillLibrary | None,
    backend: LlmBackend,
    options: EpisodeOptions = EpisodeOptions(),
    transcript_path: str | Path | None = None,
    record: bool = True,
) -> EpisodeResult:
    """Observe, plan, validate, reflect and execute until success or a cap is hit.

    With ``record`` set and a transcript path given, every backend exchange is
    written there as JSON lines, preceded by a header and followed by the result.
    """
    store = library if isinstance(library, LibraryStore) else LibraryStore(library)
    start_lib = store.snapshot
    sink = TranscriptSink(transcript_path if record else None)
    if record and transcript_path is not None:
        sink.append(
            {
                "stage": "episode",
                "task": task_to_dict(task),
                "options": _options_dict(options),
                "library": library_to_dict(start_lib),
            }
        )
        backend = record_wrap(backend, sink)
    state = EpisodeState(task, reset(task))
    plan: JointPlan | None = None
    try:
        obs = _observe_all(state, options.central_full_state)
        query = retrieval_query(task, obs)
        meta: MetaInput = build_meta_input(
            "inference", {"retrieved": _retrieve(start_lib, query, options.retrieval_enabled, options.k)}
        )
        plan = infer_plan(task, obs, backend, meta)
        while True:
            report, trajs = validate_joint_plan(state.world, task, plan)
            if isinstance(meta, Reflection):
                state.reflection_log.append(
                    ReflectionRecord(meta.attempt_index, meta.failure, report.ok, meta.suspected_skills)
                )
            if report.ok:
                _execute(state, plan, trajs)
                break
            if not options.reflection_enabled or state.replans_used >= task.max_replans:
                state.status = "failure"
                break
            state.replans_used += 1
            assert report.failure is not None
            try:
                meta, plan = reflect(
                    task, report.failure, meta, plan, obs, start_lib, backend, options.retrieval_enabled, options.k
                )
            except PlanSynthesisError:
                attempt = meta.attempt_index + 1 if isinstance(meta, Reflection) else 1
                state.reflection_log.append(ReflectionRecord(attempt, report.failure, False, ()))
                state.status = "failure"
                break
        error = None
    except PlanSynthesisError as exc:
        state.status = "failure"
        error = None
        log.info("plan synthesis failed: %s", exc)
    except ReplayDivergence:
        raise
    except BackendError as exc:
        state.status = "failure"
        error = f"{type(exc).__name__}: {exc}"
    if state.status == "success" and plan is not None and not options.freeze_library:
        _ingest(task, plan, store, backend)
    result = EpisodeResult(
        task_id=task.task_id,
        success=state.status == "success",
        env_steps=state.env_steps_used,
        replan_attempts=state.replans_used,
        reflections=tuple(state.reflection_log),
        transcript_path=str(transcript_path) if transcript_path is not None else None,
        seed=task.seed,
        error=error,
    )
    if record and transcript_path is not None:
        sink.append({"stage": "result", "result": result.to_dict()})
    return result


def recorded_result(records: list[dict[str, Any]]) -> EpisodeResult | None:
    for r in reversed(records):
        if r.get("stage") == "result":
            return EpisodeResult.from_dict(r["result"])
    return None


def replay_episode(path: str | Path) -> tuple[EpisodeResult, EpisodeResult | None]:
    """Re-run a recorded episode against its own transcript; returns (replayed, recorded)."""
    records = read_transcript(path)
    header = next((r for r in records if r.get("stage") == "episode"), None)
    if header is None:
        raise ValueError(f"{path} has no episode header record")
    task = task_from_dict(header["task"])
    options = EpisodeOptions(**header["options"])
    library = library_from_dict(header["library"])
    result = run_episode(task, LibraryStore(library), ReplayBackend(records), options, path, record=False)
    return result, recorded_result(records)
