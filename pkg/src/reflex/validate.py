"""Pre-execution plan validation: IK feasibility, lockstep collision sweeps, rope limits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Union

from reflex.collision import Capsule, Entity, check_collision, entity_contact
from reflex.errors import InvalidTransition
from reflex.geometry import Pose, wrap_angle
from reflex.kinematics import (
    IKInfeasibleError,
    JointConfig,
    Waypoint,
    forward_kinematics,
    interpolate,
    inverse_kinematics,
    link_points,
)
from reflex.plan import Action, JointPlan, Pick, Place
from reflex.world import (
    HOLD_TOL,
    NON_COLLIDING_KINDS,
    TaskSpec,
    WorldState,
    apply_effects,
    grasp_problem,
    holder_deviation,
    resolve_target,
    rope_span,
    set_arm,
    settle_held,
)


@dataclass(frozen=True)
class Collision:
    a: str
    b: str
    position: Pose


@dataclass(frozen=True)
class IKInfeasible:
    agent_id: str
    target: Pose
    reason: str  # out_of_reach | joint_limit


@dataclass(frozen=True)
class RopeOverstretch:
    object_id: str
    length: float
    max: float


@dataclass(frozen=True)
class GraspError:
    agent_id: str
    object_id: str
    reason: str


FailureNature = Union[Collision, IKInfeasible, RopeOverstretch, GraspError]


def _r(v: float) -> float:
    return round(v, 6) + 0.0


@dataclass(frozen=True)
class FailureFeedback:
    nature: FailureNature
    step_index: int
    waypoint_index: int

    @property
    def kind(self) -> str:
        return type(self.nature).__name__

    def to_record(self) -> dict[str, Any]:
        n = self.nature
        rec: dict[str, Any] = {
            "nature": self.kind,
            "a": None,
            "b": None,
            "position": None,
            "step_index": self.step_index,
            "waypoint_index": self.waypoint_index,
        }
        if isinstance(n, Collision):
            rec.update(a=n.a, b=n.b, position=[_r(v) for v in n.position.to_list()])
        elif isinstance(n, IKInfeasible):
            rec.update(a=n.agent_id, position=[_r(v) for v in n.target.to_list()], reason=n.reason)
        elif isinstance(n, RopeOverstretch):
            rec.update(a=n.object_id, length=_r(n.length), max=_r(n.max))
        else:
            rec.update(a=n.agent_id, b=n.object_id, reason=n.reason)
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> FailureFeedback:
        kind = rec["nature"]
        pos = Pose(*rec["position"]) if rec.get("position") else None
        if kind == "Collision":
            nature: FailureNature = Collision(rec["a"], rec["b"], pos)  # type: ignore[arg-type]
        elif kind == "IKInfeasible":
            nature = IKInfeasible(rec["a"], pos, rec["reason"])  # type: ignore[arg-type]
        elif kind == "RopeOverstretch":
            nature = RopeOverstretch(rec["a"], rec["length"], rec["max"])
        elif kind == "GraspError":
            nature = GraspError(rec["a"], rec["b"], rec["reason"])
        else:
            raise ValueError(f"unknown failure nature {kind!r}")
        return cls(nature, rec["step_index"], rec["waypoint_index"])

    def describe(self) -> str:
        n = self.nature
        where = f"at step {self.step_index}, waypoint {self.waypoint_index}"
        if isinstance(n, Collision):
            p = n.position
            return f"collision between {n.a} and {n.b} near ({p.x:.3f},{p.y:.3f},{p.z:.3f}) {where}"
        if isinstance(n, IKInfeasible):
            t = n.target
            return f"IK infeasible for {n.agent_id} ({n.reason}) targeting ({t.x:.3f},{t.y:.3f},{t.z:.3f}) {where}"
        if isinstance(n, RopeOverstretch):
            return f"{n.object_id} overstretched to {n.length:.3f} m (max {n.max:.3f} m) {where}"
        return f"grasp error for {n.agent_id} on {n.object_id}: {n.reason} {where}"


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    failure: FailureFeedback | None
    checked_steps: int

    def __post_init__(self) -> None:
        if self.ok == (self.failure is not None):
            raise ValueError("a report is either ok or carries a failure")

    def to_record(self) -> dict[str, Any]:
        return {
            "ok": self.ok,
            "checked_steps": self.checked_steps,
            "failure": self.failure.to_record() if self.failure else None,
        }


@dataclass
class Trajectory:
    agent_id: str
    steps: list[list[Waypoint]] = field(default_factory=list)

    @property
    def waypoints(self) -> list[Waypoint]:
        out: list[Waypoint] = []
        for s in self.steps:
            # each step starts where the previous one ended
            out.extend(s[1:] if out and s and s[0] == out[-1] else s)
        return out


def _resample(wps: list[Waypoint], n: int, yaw0: float, yaw1: float) -> list[tuple[JointConfig, float]]:
    """Stretch a waypoint list to ``n`` samples by fractional-index joint interpolation."""
    m = len(wps)
    dyaw = wrap_angle(yaw1 - yaw0)
    out = []
    for i in range(n):
        t = i / (n - 1) if n > 1 else 1.0
        yaw = yaw1 if i == n - 1 else wrap_angle(yaw0 + dyaw * t)
        if m == 1:
            out.append((wps[0][0], yaw))
            continue
        u = t * (m - 1)
        lo = min(int(math.floor(u)), m - 2)
        f = u - lo
        qa, qb = wps[lo][0], wps[lo + 1][0]
        q = qb if f == 1.0 else tuple(a + (b - a) * f for a, b in zip(qa, qb))
        out.append((q, yaw))  # type: ignore[arg-type]
    return out


def _entities(world: WorldState, task: TaskSpec, extra_ignore: dict[str, set[str]]) -> tuple[list[Entity], set[str]]:
    ents: list[Entity] = []
    movers: set[str] = set()
    held: dict[str, str] = {}
    for agent in sorted(world.arm_states):
        arm = task.arm(agent)
        st = world.arm_states[agent]
        s, e, w = link_points(arm, st.joints)
        ignore = set(extra_ignore.get(agent, ()))
        if st.held is not None:
            ignore.add(st.held.object_id)
            held[st.held.object_id] = agent
        r = arm.capsule_radius
        parts = [Capsule(s, e, r), Capsule(e, w, r)]
        if s[2] > 0.0:
            # mounting column from the table surface up to the shoulder
            parts.append(Capsule((s[0], s[1], 0.0), s, r))
        ents.append(Entity(agent, tuple(parts), frozenset(ignore)))
        movers.add(agent)
    for oid in sorted(world.objects):
        obj = world.objects[oid]
        if obj.kind in NON_COLLIDING_KINDS:
            continue
        ents.append(Entity(oid, obj.capsules()))
        if oid in held:
            movers.add(oid)
    return ents, movers


def _resting_contacts(sim: WorldState, task: TaskSpec) -> dict[str, set[str]]:
    """Objects each arm already touches before the step starts; it may move away from them."""
    ents, _ = _entities(sim, task, {})
    arms = [e for e in ents if e.name in sim.arm_states]
    out: dict[str, set[str]] = {}
    for arm in arms:
        for other in ents:
            if other.name in sim.arm_states or other.name in arm.ignore:
                continue
            if entity_contact(arm, other) is not None:
                out.setdefault(arm.name, set()).add(other.name)
    return out


def _qpose(p: Pose) -> Pose:
    q = Pose(*(_r(v) for v in p.to_list()))
    # yaw rounding can cross the wrap boundary; settle on a fixed point
    while q.to_list() != [_r(v) for v in q.to_list()]:
        q = Pose(*(_r(v) for v in q.to_list()))
    return q


def _quantized(n: FailureNature) -> FailureNature:
    # round to the precision of the JSON record so feedback survives serialization unchanged
    if isinstance(n, Collision):
        return Collision(n.a, n.b, _qpose(n.position))
    if isinstance(n, IKInfeasible):
        return IKInfeasible(n.agent_id, _qpose(n.target), n.reason)
    if isinstance(n, RopeOverstretch):
        return RopeOverstretch(n.object_id, _r(n.length), _r(n.max))
    return n


def _report(nature: FailureNature, step: int, wp: int) -> ValidationReport:
    return ValidationReport(False, FailureFeedback(_quantized(nature), step, wp), step)


def validate_joint_plan(
    world: WorldState, task: TaskSpec, plan: JointPlan
) -> tuple[ValidationReport, dict[str, Trajectory]]:
    """Dry-run ``plan`` from ``world`` without mutating it; first failure wins."""
    if set(plan.plans) != set(world.arm_states):
        missing = sorted(set(world.arm_states) - set(plan.plans))
        extra = sorted(set(plan.plans) - set(world.arm_states))
        raise ValueError(f"plan must cover exactly the task agents (missing {missing}, unknown {extra})")
    sim = world.copy()
    trajs = {a: Trajectory(a) for a in sorted(sim.arm_states)}
    for k in range(len(plan)):
        actions = plan.step(k)
        failure = _check_step(sim, task, actions, k, trajs)
        if failure is not None:
            return failure, {}
    return ValidationReport(True, None, len(plan)), trajs


def _check_step(
    sim: WorldState, task: TaskSpec, actions: dict[str, Action], k: int, trajs: dict[str, Trajectory]
) -> ValidationReport | None:
    agents = sorted(actions)
    for agent in agents:
        problem = grasp_problem(sim, agent, actions[agent])
        if problem is not None:
            a = actions[agent]
            return _report(GraspError(agent, getattr(a, "object_id", ""), problem), k, 0)
    for agent in agents:
        a = actions[agent]
        if isinstance(a, Place):
            for other in sim.holders(a.object_id):
                b = actions[other]
                if not (isinstance(b, Place) and b.object_id == a.object_id):
                    return _report(
                        GraspError(other, a.object_id, "every holder must place a shared object in the same step"),
                        k,
                        0,
                    )
    plans: dict[str, list[Waypoint]] = {}
    yaws: dict[str, tuple[float, float]] = {}
    for agent in agents:
        st = sim.arm_states[agent]
        arm = task.arm(agent)
        target = resolve_target(sim, task, agent, actions[agent])
        if target is None:
            plans[agent] = [(st.joints, forward_kinematics(arm, st.joints))]
            yaws[agent] = (st.tool_yaw, st.tool_yaw)
            continue
        pose, tool_yaw = target
        try:
            q = inverse_kinematics(arm, pose)
        except IKInfeasibleError as exc:
            return _report(IKInfeasible(agent, pose, exc.reason), k, 0)
        plans[agent] = interpolate(st.joints, q, arm)
        yaws[agent] = (st.tool_yaw, tool_yaw)
    n = max(len(w) for w in plans.values())
    sampled = {a: _resample(plans[a], n, *yaws[a]) for a in agents}
    ignore = _resting_contacts(sim, task)
    for a in agents:
        if isinstance(actions[a], Pick):
            ignore.setdefault(a, set()).add(actions[a].object_id)  # type: ignore[union-attr]
    for i in range(n):
        for a in agents:
            q, yaw = sampled[a][i]
            set_arm(sim, a, q, yaw)
        settle_held(sim, task)
        for oid in sorted({s.held.object_id for s in sim.arm_states.values() if s.held is not None}):
            span = rope_span(task, sim, oid) if sim.objects[oid].kind == "rope" else None
            if span is not None and span[0] > span[1] + 1e-9:
                return _report(RopeOverstretch(oid, span[0], span[1]), k, i)
        ents, movers = _entities(sim, task, ignore)
        hit = check_collision(ents, movers)
        if hit is not None:
            a_name, b_name, pos = hit
            return _report(Collision(a_name, b_name, Pose.from_position(pos)), k, i)
    for oid in sorted({s.held.object_id for s in sim.arm_states.values() if s.held is not None}):
        dev = holder_deviation(sim, task, oid)
        if dev is not None and dev[1] > HOLD_TOL:
            return _report(
                GraspError(dev[0], oid, f"holders disagree by {dev[1]:.3f} m on a rigid object"), k, n - 1
            )
    try:
        apply_effects(sim, task, actions)
    except InvalidTransition as exc:
        return _report(GraspError(agents[0], "", str(exc)), k, n - 1)
    settle_held(sim, task)
    for a in agents:
        arm = task.arm(a)
        st = sim.arm_states[a]
        wps = []
        for q, yaw in sampled[a]:
            p = forward_kinematics(arm, q)
            wps.append((q, Pose(p.x, p.y, p.z, yaw)))
        # collapse stationary resampling back to a single waypoint
        if all(w[0] == wps[0][0] and w[1] == wps[0][1] for w in wps):
            wps = wps[:1]
        trajs[a].steps.append(wps)
        assert st.joints == sampled[a][-1][0]
    sim.step_count += 1
    return None
