"""Command-line entry point.

Exit codes: 0 success, 1 task failure (or a rejected plan), 2 usage error,
3 infrastructure error (backend, network, replay divergence).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from reflex.bench import VARIANTS, RunConfig, render_report, run_bench
from reflex.errors import BackendError, ParseError, ReflexError, SchemaError
from reflex.llm import make_backend, parse_backend_spec
from reflex.metacog import EpisodeOptions, EpisodeResult, replay_episode, run_episode
from reflex.plan import parse_plan
from reflex.skills import LibraryStore, build_library, library_to_dict, load, load_exemplar, save
from reflex.validate import validate_joint_plan
from reflex.world import load_task, reset

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INFRA = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _emit(payload: dict[str, Any], human: str, as_json: bool) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True) if as_json else human)


def _read(path: str, what: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p.read_text(encoding="utf-8")


def _task(path: str, seed: int | None = None):
    try:
        task = load_task(_read(path, "task file"))
    except SchemaError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    return task.with_seed(seed) if seed is not None else task


def _backend_config(spec: str):
    try:
        return parse_backend_spec(spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _describe_result(r: EpisodeResult) -> str:
    status = "success" if r.success else "failure"
    text = f"{r.task_id} seed {r.seed}: {status} after {r.env_steps} steps, {r.replan_attempts} replans"
    if r.error:
        text += f" ({r.error})"
    return text


def _episode_exit(r: EpisodeResult) -> int:
    if r.error:
        return EXIT_INFRA
    return EXIT_OK if r.success else EXIT_FAIL


# ------------------------------------------------------------------------ commands


def cmd_run(args: argparse.Namespace) -> int:
    task = _task(args.task, args.seed)
    config = _backend_config(args.backend)
    options = VARIANTS[args.variant]
    options = EpisodeOptions(
        reflection_enabled=options.reflection_enabled and not args.no_reflection,
        retrieval_enabled=options.retrieval_enabled and not args.no_retrieval,
        central_full_state=options.central_full_state or args.central,
        freeze_library=args.freeze_library,
    )
    library = None
    if args.library:
        _read(args.library, "library file")
        library = load(args.library)
    store = LibraryStore(library)
    transcript = args.transcript or str(Path(args.out) / f"{task.task_id}-seed{task.seed}.jsonl")
    result = run_episode(task, store, make_backend(config), options, transcript)
    if args.library and not args.freeze_library and store.snapshot is not library:
        save(store.snapshot, args.library)
    _emit(result.to_dict(), _describe_result(result), args.json)
    return _episode_exit(result)


def cmd_bench(args: argparse.Namespace) -> int:
    config = RunConfig(
        tasks=tuple(args.tasks),
        variant=args.variant,
        backend=_backend_config(args.backend),
        rounds=args.rounds,
        base_seed=args.base_seed,
        freeze_library=args.freeze_library,
        output_dir=args.out,
        library_path=args.library,
    )
    summaries, raw = run_bench(config)
    payload = {"summaries": [s.__dict__ for s in summaries], "output_dir": args.out}
    _emit(payload, render_report(summaries), args.json)
    if any(r.error for r in raw):
        return EXIT_INFRA
    return EXIT_OK if all(r.success for r in raw) else EXIT_FAIL


def cmd_skills_build(args: argparse.Namespace) -> int:
    folder = Path(args.exemplars)
    if not folder.is_dir():
        raise UsageError(f"exemplar directory not found: {folder}")
    exemplars = [load_exemplar(p) for p in sorted(folder.glob("*.json"))]
    if not exemplars:
        raise UsageError(f"no exemplar files in {folder}")
    lib = build_library(exemplars, make_backend(_backend_config(args.backend)), args.threshold)
    save(lib, args.out)
    human = f"wrote {args.out}: {len(lib.exemplars)} exemplars, {len(lib.skills)} skills, {len(lib.clusters)} clusters"
    _emit({"path": args.out, "version": lib.version, "clusters": len(lib.clusters)}, human, args.json)
    return EXIT_OK


def cmd_skills_show(args: argparse.Namespace) -> int:
    _read(args.library, "library file")
    lib = load(args.library)
    lines = [f"library version {lib.version}: {len(lib.exemplars)} exemplars, {len(lib.skills)} skills"]
    for c in lib.clusters:
        tasks = sorted({lib.exemplars[e].source_task for m in c.members for e in lib.skills[m].exemplar_ids})
        lines.append(f"{c.cluster_id} {c.canonical_name} ({len(c.members)} members: {', '.join(tasks)})")
    _emit(library_to_dict(lib), "\n".join(lines), args.json)
    return EXIT_OK


def cmd_validate_plan(args: argparse.Namespace) -> int:
    task = _task(args.task, args.seed)
    text = _read(args.plan, "plan file")
    try:
        plan = parse_plan(text)
    except ParseError as exc:
        raise UsageError(f"{args.plan}:{exc.line}:{exc.column}: {exc}") from exc
    try:
        report, _ = validate_joint_plan(reset(task), task, plan)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    human = "plan ok" if report.ok else f"plan rejected: {report.failure.describe()}"  # type: ignore[union-attr]
    _emit(report.to_record(), human, args.json)
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_replay(args: argparse.Namespace) -> int:
    _read(args.transcript, "transcript")
    replayed, recorded = replay_episode(args.transcript)
    if recorded is not None and recorded != replayed:
        print("replayed result differs from the recorded one", file=sys.stderr)
        return EXIT_INFRA
    _emit(replayed.to_dict(), _describe_result(replayed), args.json)
    return _episode_exit(replayed)


# -------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reflex", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--json", action="store_true", help="print a JSON payload")

    r = sub.add_parser("run", help="run one episode")
    r.add_argument("task", help="task JSON file")
    r.add_argument("--backend", required=True, help="kind:detail, e.g. scripted:fixtures/drywall_ok.json")
    r.add_argument("--library", help="skill library JSON (updated in place on success)")
    r.add_argument("--seed", type=int)
    r.add_argument("--variant", choices=sorted(VARIANTS), default="reflex")
    r.add_argument("--no-reflection", action="store_true")
    r.add_argument("--no-retrieval", action="store_true")
    r.add_argument("--central", action="store_true", help="plan from the full world state")
    r.add_argument("--freeze-library", action="store_true")
    r.add_argument("--transcript", help="transcript path (default: <out>/<task>-seed<n>.jsonl)")
    r.add_argument("--out", default=".", help="directory for the transcript")
    common(r)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="run seeded rounds and write metrics")
    b.add_argument("--tasks", nargs="+", required=True, help="task ids or task files")
    b.add_argument("--variant", choices=sorted(VARIANTS), default="reflex")
    b.add_argument("--rounds", type=int, default=20)
    b.add_argument("--base-seed", type=int, default=0)
    b.add_argument("--backend", required=True)
    b.add_argument("--library")
    b.add_argument("--freeze-library", action="store_true")
    b.add_argument("--out", default="results")
    common(b)
    b.set_defaults(func=cmd_bench)

    sb = sub.add_parser("skills-build", help="build a skill library from exemplar files")
    sb.add_argument("exemplars", help="directory of exemplar JSON files")
    sb.add_argument("--backend", required=True)
    sb.add_argument("--out", required=True, help="library JSON to write")
    sb.add_argument("--threshold", type=float, default=0.5)
    common(sb)
    sb.set_defaults(func=cmd_skills_build)

    ss = sub.add_parser("skills-show", help="summarize a skill library")
    ss.add_argument("library")
    common(ss)
    ss.set_defaults(func=cmd_skills_show)

    vp = sub.add_parser("validate-plan", help="validate a plan file against a task")
    vp.add_argument("task")
    vp.add_argument("plan")
    vp.add_argument("--seed", type=int)
    common(vp)
    vp.set_defaults(func=cmd_validate_plan)

    rp = sub.add_parser("replay", help="re-run a recorded episode from its transcript")
    rp.add_argument("transcript")
    common(rp)
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BackendError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFRA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ReflexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFRA


if __name__ == "__main__":
    sys.exit(main())
