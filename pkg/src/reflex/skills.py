"""Skill library: exemplars, extracted skill descriptors, token-set clustering and retrieval."""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable

from reflex.errors import EmptyLibrary, ExtractionParseError, IntegrityError, ReflexError, SchemaError
from reflex.plan import parse_plan

if TYPE_CHECKING:
    from reflex.llm import LlmBackend

DEFAULT_THRESHOLD = 0.5
DEFAULT_K = 4
EXEMPLARS_PER_CLUSTER = 2

STOP_WORDS = frozenset(
    """a an and are as at be both by each for from in into is it its of on onto or over so
    than that the their then this to under up via when while with without""".split()
)

_SPLIT = re.compile(r"[^a-z0-9]+")
_SKILL_LINE = re.compile(r"^\s*SKILL\s+([a-z][a-z0-9]*(?:_[a-z0-9]+)*)\s*:\s*(\S.*?)\s*$")


def tokenize(text: str) -> frozenset[str]:
    """Lowercased tokens split on underscores, whitespace and punctuation, minus stop words."""
    return frozenset(t for t in _SPLIT.split(text.lower()) if t and t not in STOP_WORDS)


def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 0.0
    return len(a & b) / len(union)


@dataclass(frozen=True)
class Exemplar:
    exemplar_id: str
    task_summary: str
    scene_snapshot: str  # JSON text of the object list
    demonstration: str  # canonical plan text
    source_task: str
    outcome: str = "success"
    # library version at insertion, used to order exemplars by recency
    added_version: int = 0

    def __post_init__(self) -> None:
        if self.outcome != "success":
            raise ValueError("only successful episodes become exemplars")
        parse_plan(self.demonstration)


@dataclass(frozen=True)
class SkillDescriptor:
    skill_id: str
    name: str
    description: str
    exemplar_ids: tuple[str, ...]
    tokens: frozenset[str] = field(default=frozenset())

    def __post_init__(self) -> None:
        if not self.tokens:
            object.__setattr__(self, "tokens", tokenize(f"{self.name} {self.description}"))
        if not self.tokens:
            raise ValueError(f"skill {self.name!r} has no content tokens")
        if not self.exemplar_ids:
            raise ValueError(f"skill {self.name!r} is not linked to any exemplar")


@dataclass(frozen=True)
class SkillCluster:
    cluster_id: str
    canonical_name: str
    members: tuple[str, ...]
    merged_tokens: frozenset[str]


@dataclass(frozen=True)
class SkillLibrary:
    exemplars: dict[str, Exemplar] = field(default_factory=dict)
    skills: dict[str, SkillDescriptor] = field(default_factory=dict)
    clusters: tuple[SkillCluster, ...] = ()
    version: int = 0

    def check_integrity(self) -> None:
        for s in self.skills.values():
            for eid in s.exemplar_ids:
                if eid not in self.exemplars:
                    raise IntegrityError(f"skill {s.skill_id} references missing exemplar {eid}")
        seen: set[str] = set()
        for c in self.clusters:
            for m in c.members:
                if m not in self.skills:
                    raise IntegrityError(f"cluster {c.cluster_id} references missing skill {m}")
                if m in seen:
                    raise IntegrityError(f"skill {m} appears in more than one cluster")
                seen.add(m)
        if seen != set(self.skills):
            raise IntegrityError(f"unclustered skills: {sorted(set(self.skills) - seen)}")

    def clusters_for_exemplar(self, exemplar_id: str) -> list[str]:
        return [
            c.cluster_id
            for c in self.clusters
            if any(exemplar_id in self.skills[m].exemplar_ids for m in c.members)
        ]


# ----------------------------------------------------------------------- extraction


def parse_skill_lines(text: str) -> list[tuple[str, str]]:
    """(name, description) pairs from ``SKILL <snake_case>: <description>`` lines."""
    out = []
    for line in text.splitlines():
        m = _SKILL_LINE.match(line)
        if m:
            out.append((m.group(1), m.group(2)))
    if not out:
        raise ExtractionParseError("response contains no 'SKILL <name>: <description>' lines")
    return out


def extract_skills(exemplar: Exemplar, backend: LlmBackend) -> list[SkillDescriptor]:
    """Ask the backend which reusable skills the exemplar demonstrates."""
    from reflex.llm import ChatMessage
    from reflex.metacog import SYSTEM_PROMPT, build_meta_input, render_meta

    meta = build_meta_input("construction", {"exemplars": [exemplar]})
    prompt = f"[TASK]\n{exemplar.source_task} construction\n\n[META]\n{render_meta(meta)}"
    text = backend.complete(
        [ChatMessage("system", SYSTEM_PROMPT), ChatMessage("user", prompt)], stage="construction"
    )
    return [
        SkillDescriptor(f"{exemplar.exemplar_id}/{i}", name, desc, (exemplar.exemplar_id,))
        for i, (name, desc) in enumerate(parse_skill_lines(text), start=1)
    ]


# ----------------------------------------------------------------------- clustering


def cluster_skills(skills: Iterable[SkillDescriptor], threshold: float = DEFAULT_THRESHOLD) -> list[SkillCluster]:
    """Greedy single-link clustering in skill-id order.

    A skill joins the first cluster holding any member at least ``threshold``
    similar to it; otherwise it opens a new cluster.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    groups: list[list[SkillDescriptor]] = []
    for s in sorted(skills, key=lambda s: s.skill_id):
        for g in groups:
            if any(jaccard(s.tokens, m.tokens) >= threshold for m in g):
                g.append(s)
                break
        else:
            groups.append([s])
    return [
        SkillCluster(
            f"c{i:04d}",
            min(m.name for m in g),
            tuple(m.skill_id for m in g),
            frozenset().union(*(m.tokens for m in g)),
        )
        for i, g in enumerate(groups, start=1)
    ]


# ------------------------------------------------------------------------ retrieval


def retrieve(
    library: SkillLibrary, query: str, k: int = DEFAULT_K
) -> list[tuple[SkillCluster, list[Exemplar]]]:
    """Top-k clusters by (Jaccard score desc, cluster id asc) with their newest exemplars."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if not library.clusters:
        raise EmptyLibrary("the skill library has no clusters to retrieve from")
    q = tokenize(query)
    ranked = sorted(library.clusters, key=lambda c: (-jaccard(c.merged_tokens, q), c.cluster_id))
    out = []
    for c in ranked[:k]:
        ids = {e for m in c.members for e in library.skills[m].exemplar_ids}
        exs = sorted(
            (library.exemplars[e] for e in ids),
            key=lambda e: (-e.added_version, e.exemplar_id),
        )
        out.append((c, exs[:EXEMPLARS_PER_CLUSTER]))
    return out


# --------------------------------------------------------------------------- update


def add_exemplar(
    library: SkillLibrary,
    exemplar: Exemplar,
    extracted: Iterable[SkillDescriptor],
    threshold: float = DEFAULT_THRESHOLD,
) -> SkillLibrary:
    """New library with ``exemplar`` and its skills merged in; duplicates are a no-op.

    Skills are re-keyed onto the library's running sequence so clustering order
    follows insertion order and earlier cluster assignments never change.
    """
    if exemplar.exemplar_id in library.exemplars:
        return library
    if exemplar.outcome != "success":
        raise IntegrityError("only successful exemplars may enter the library")
    version = library.version + 1
    exemplars = dict(library.exemplars)
    exemplars[exemplar.exemplar_id] = replace(exemplar, added_version=version)
    skills = dict(library.skills)
    n = len(skills)
    for s in extracted:
        for eid in s.exemplar_ids:
            if eid not in exemplars:
                raise IntegrityError(f"skill {s.name} references unknown exemplar {eid}")
        n += 1
        sid = f"s{n:05d}"
        skills[sid] = replace(s, skill_id=sid)
    lib = SkillLibrary(exemplars, skills, tuple(cluster_skills(skills.values(), threshold)), version)
    lib.check_integrity()
    return lib


class LibraryStore:
    """Single-writer holder; readers take immutable snapshots."""

    def __init__(self, library: SkillLibrary | None = None, threshold: float = DEFAULT_THRESHOLD) -> None:
        self._lib = library or SkillLibrary()
        self._lock = threading.Lock()
        self.threshold = threshold

    @property
    def snapshot(self) -> SkillLibrary:
        return self._lib

    def add(self, exemplar: Exemplar, extracted: Iterable[SkillDescriptor]) -> SkillLibrary:
        with self._lock:
            self._lib = add_exemplar(self._lib, exemplar, list(extracted), self.threshold)
            return self._lib


# ---------------------------------------------------------------------- persistence


def library_to_dict(library: SkillLibrary) -> dict[str, Any]:
    return {
        "version": library.version,
        "exemplars": [
            {
                "exemplar_id": e.exemplar_id,
                "task_summary": e.task_summary,
                "scene_snapshot": e.scene_snapshot,
                "demonstration": e.demonstration,
                "source_task": e.source_task,
                "outcome": e.outcome,
                "added_version": e.added_version,
            }
            for _, e in sorted(library.exemplars.items())
        ],
        "skills": [
            {
                "skill_id": s.skill_id,
                "name": s.name,
                "description": s.description,
                "tokens": sorted(s.tokens),
                "exemplar_ids": list(s.exemplar_ids),
            }
            for _, s in sorted(library.skills.items())
        ],
        "clusters": [
            {
                "cluster_id": c.cluster_id,
                "canonical_name": c.canonical_name,
                "members": list(c.members),
                "merged_tokens": sorted(c.merged_tokens),
            }
            for c in sorted(library.clusters, key=lambda c: c.cluster_id)
        ],
    }


def _field(d: Any, key: str, path: str, kind: type | tuple[type, ...]) -> Any:
    if not isinstance(d, dict):
        raise SchemaError(path, "expected an object")
    if key not in d:
        raise SchemaError(f"{path}.{key}", "missing field")
    v = d[key]
    if not isinstance(v, kind) or isinstance(v, bool) and kind is int:
        raise SchemaError(f"{path}.{key}", f"expected {getattr(kind, '__name__', kind)}")
    return v


def _strings(v: list, path: str) -> tuple[str, ...]:
    for i, x in enumerate(v):
        if not isinstance(x, str):
            raise SchemaError(f"{path}[{i}]", "expected a string")
    return tuple(v)


def exemplar_from_dict(d: Any, path: str = "$") -> Exemplar:
    version = d.get("added_version", 0) if isinstance(d, dict) else 0
    if isinstance(version, bool) or not isinstance(version, int):
        raise SchemaError(f"{path}.added_version", "expected int")
    try:
        return Exemplar(
            _field(d, "exemplar_id", path, str),
            _field(d, "task_summary", path, str),
            _field(d, "scene_snapshot", path, str),
            _field(d, "demonstration", path, str),
            _field(d, "source_task", path, str),
            _field(d, "outcome", path, str),
            version,
        )
    except SchemaError:
        raise
    except (ValueError, ReflexError) as exc:
        raise SchemaError(path, str(exc)) from exc


def library_from_dict(doc: Any) -> SkillLibrary:
    version = _field(doc, "version", "$", int)
    exemplars: dict[str, Exemplar] = {}
    for i, d in enumerate(_field(doc, "exemplars", "$", list)):
        e = exemplar_from_dict(d, f"exemplars[{i}]")
        exemplars[e.exemplar_id] = e
    skills: dict[str, SkillDescriptor] = {}
    for i, d in enumerate(_field(doc, "skills", "$", list)):
        p = f"skills[{i}]"
        tokens = frozenset(_strings(_field(d, "tokens", p, list), f"{p}.tokens"))
        try:
            s = SkillDescriptor(
                _field(d, "skill_id", p, str),
                _field(d, "name", p, str),
                _field(d, "description", p, str),
                _strings(_field(d, "exemplar_ids", p, list), f"{p}.exemplar_ids"),
                tokens,
            )
        except ValueError as exc:
            raise SchemaError(p, str(exc)) from exc
        skills[s.skill_id] = s
    clusters = []
    for i, d in enumerate(_field(doc, "clusters", "$", list)):
        p = f"clusters[{i}]"
        members = _strings(_field(d, "members", p, list), f"{p}.members")
        if not members:
            raise SchemaError(f"{p}.members", "cluster has no members")
        clusters.append(
            SkillCluster(
                _field(d, "cluster_id", p, str),
                _field(d, "canonical_name", p, str),
                members,
                frozenset(_strings(_field(d, "merged_tokens", p, list), f"{p}.merged_tokens")),
            )
        )
    lib = SkillLibrary(exemplars, skills, tuple(clusters), version)
    try:
        lib.check_integrity()
    except IntegrityError as exc:
        raise SchemaError("$", str(exc)) from exc
    return lib


def load_exemplar(path: str | Path) -> Exemplar:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(str(path), f"invalid JSON: {exc.msg}") from exc
    return exemplar_from_dict(doc, str(path))


def build_library(
    exemplars: Iterable[Exemplar], backend: LlmBackend, threshold: float = DEFAULT_THRESHOLD
) -> SkillLibrary:
    """Extract skills from each exemplar in order and fold them into a fresh library."""
    store = LibraryStore(threshold=threshold)
    for ex in exemplars:
        store.add(ex, extract_skills(ex, backend))
    return store.snapshot


def save(library: SkillLibrary, path: str | Path) -> None:
    text = json.dumps(library_to_dict(library), indent=2, ensure_ascii=False) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def load(path: str | Path) -> SkillLibrary:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return library_from_dict(doc)
