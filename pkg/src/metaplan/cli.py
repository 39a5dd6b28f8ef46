"""Command-line entry point.

Exit codes: 0 success, 1 domain failure (invalid plan, unmet threshold, bad
input), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any, Optional, Sequence

from .backends import AuditLog, ChatBackend
from .config import RunConfig, load_config
from .errors import MetaplanError
from .judge import LlmJudge
from .metrics import METRIC_FIELDS, SampleReport, StepScore, align_steps, evaluate_trajectory, format_summary
from .orchestrator import (
    BenchConfig,
    BenchResult,
    ToolRegistry,
    generate_plan,
    load_plan_cache,
    load_tool_registry,
    run_benchmark,
    stub_registry,
    write_outputs,
    write_plan_cache,
    write_report,
)
from .plan_model import (
    MetaPlan,
    TaskRecord,
    Trajectory,
    load_task_records,
    load_trajectory_log,
    parse_meta_plan,
    read_jsonl,
)
from .preference import (
    CandidateScores,
    TRAINER_DEFAULTS,
    PreferencePair,
    add_teacher_anchors,
    build_pairs,
    composite_reward,
    export_dpo_dataset,
    gamma_sweep,
    mix_hybrid,
)
from .prompts import load_template
from .task_library import TaskLibrary, load_library, sample_library, validate_plan

log = logging.getLogger("metaplan")


def _version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


@dataclass
class CliConfig:
    """Global flags resolved against the config file before dispatch."""

    command: str
    run: RunConfig
    library_path: Optional[Path]
    records_path: Optional[Path]
    out: Path
    seed: int
    workers: int
    options: argparse.Namespace
    _library: Optional[TaskLibrary] = field(default=None, repr=False)

    @property
    def library(self) -> TaskLibrary:
        if self._library is None:
            self._library = load_library(self.library_path) if self.library_path else sample_library()
        return self._library

    def records(self) -> list[TaskRecord]:
        if self.records_path is None:
            raise MetaplanError(f"{self.command} needs --records")
        return load_task_records(self.records_path)

    def audit(self) -> Optional[AuditLog]:
        if not self.run.audit_log:
            return None
        self.out.mkdir(parents=True, exist_ok=True)
        return AuditLog(self.out / Path(self.run.audit_log).name)

    def backend(self, role: str) -> ChatBackend:
        spec = getattr(self.run, role)
        if spec is None:
            raise MetaplanError(f"{self.command} needs a {role} backend in --config")
        return spec.build(self.audit(), name=role)

    def judge(self):
        if self.run.judge is None:
            return None
        template = self.run.templates.get("answer_judge")
        return LlmJudge(self.run.judge.build(self.audit(), name="judge"),
                        load_template("answer_judge", template) if template else None)

    def registry(self) -> ToolRegistry:
        return load_tool_registry(self.run.tools) if self.run.tools else stub_registry(self.library)

    def bench_config(self) -> BenchConfig:
        t = self.run.templates
        return BenchConfig(
            gamma=self.run.gamma,
            limits=self.run.limits,
            workers=self.workers,
            replan=self.run.replan or bool(getattr(self.options, "replan", False)),
            planner_template=load_template("planner", t["planner"]) if "planner" in t else None,
            executor_template=load_template("executor", t["executor"]) if "executor" in t else None,
            lexicon=self.run.lexicon,
        )


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    s = argparse.SUPPRESS
    g.add_argument("--config", default=s, help="JSON run configuration")
    g.add_argument("--library", default=s, help="operation library (JSONL); defaults to the bundled sample")
    g.add_argument("--records", default=s, help="task records (JSONL)")
    g.add_argument("--out", default=s, help="output directory (default: out)")
    g.add_argument("--seed", type=int, default=s, help="seed for every stochastic choice (default: 0)")
    g.add_argument("--workers", type=int, default=s, help="records processed in parallel (default: 4)")
    return p


def _float_list(text: str) -> list[float]:
    """``0.1..1.0`` (step 0.1), ``0.1..1.0:0.05`` or ``0.5,0.9,1.0``."""
    if ".." in text:
        span, _, step = text.partition(":")
        lo, hi = (float(x) for x in span.split(".."))
        step_v = float(step) if step else 0.1
        n = int(round((hi - lo) / step_v))
        return [round(lo + i * step_v, 10) for i in range(n + 1)]
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="metaplan", parents=[common],
                                     description="Meta-plan agent pipeline: plan, execute, score, build preferences.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("validate", parents=[common], help="check a plan against the library")
    p.add_argument("--plan", required=True, help="file containing a plan (prose and fences allowed)")
    p.add_argument("--facts", action="append", default=[], help="extra initial fact (repeatable)")

    p = sub.add_parser("plan", parents=[common], help="generate plans for every record")

    p = sub.add_parser("run", parents=[common], help="plan (or load plans) and execute every record")
    p.add_argument("--plans", help="plan cache written by `plan`")
    p.add_argument("--replan", action="store_true", help="regenerate an invalid plan once")

    p = sub.add_parser("evaluate", parents=[common], help="score a trajectory log against the records")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--threshold", action="append", default=[], metavar="METRIC=VALUE")

    p = sub.add_parser("bench", parents=[common], help="plan, execute and score every record")
    p.add_argument("--plans", help="plan cache written by `plan`")
    p.add_argument("--replan", action="store_true")
    p.add_argument("--threshold", action="append", default=[], metavar="METRIC=VALUE")

    p = sub.add_parser("build-prefs", parents=[common], help="build a DPO preference dataset")
    p.add_argument("--candidates", required=True, help="JSONL of candidate plans and their runs")
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--min-runs", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--no-mix", action="store_true", help="keep every pair instead of balancing sources")

    p = sub.add_parser("gamma-sweep", parents=[common], help="pair-set stability across discount factors")
    p.add_argument("--candidates", required=True)
    p.add_argument("--gammas", type=_float_list, default=_float_list("0.1..1.0"))
    p.add_argument("--baseline", type=float, default=0.9)
    p.add_argument("--alpha", type=float)
    p.add_argument("--min-runs", type=int)
    return parser


def _resolve(args: argparse.Namespace) -> CliConfig:
    seed = getattr(args, "seed", 0)
    return CliConfig(
        command=args.command,
        run=load_config(getattr(args, "config", None), seed=seed),
        library_path=Path(args.library) if getattr(args, "library", None) else None,
        records_path=Path(args.records) if getattr(args, "records", None) else None,
        out=Path(getattr(args, "out", "out")),
        seed=seed,
        workers=getattr(args, "workers", 4),
        options=args,
    )


def _thresholds(items: Sequence[str]) -> dict[str, float]:
    out = {}
    for item in items:
        metric, _, value = item.partition("=")
        metric = metric.strip().lower()
        if metric not in METRIC_FIELDS or not value:
            raise MetaplanError(f"bad threshold {item!r}; expected one of {', '.join(METRIC_FIELDS)}=VALUE")
        out[metric] = float(value)
    return out


def _check_thresholds(aggregate: dict[str, Any], thresholds: dict[str, float]) -> int:
    failed = [f"{m} {aggregate['aggregate'][m]:.3f} < {v}" for m, v in thresholds.items() if aggregate["aggregate"][m] < v]
    for line in failed:
        print(f"threshold not met: {line}")
    return 1 if failed else 0


# -- subcommands -------------------------------------------------------------------

def cmd_validate(cfg: CliConfig) -> int:
    plan = parse_meta_plan(Path(cfg.options.plan).read_text(encoding="utf-8"))
    report = validate_plan(plan, cfg.library, cfg.options.facts)
    if report.valid:
        print(f"valid: {len(plan)} steps")
        return 0
    print(f"invalid: {len(report.failures)} failure(s)")
    for f in report.failures:
        print(f"  step {f.step}: {f.kind}: {f.detail}")
    return 1


def cmd_plan(cfg: CliConfig) -> int:
    planner = cfg.backend("planner")
    template = cfg.run.templates.get("planner")
    template_text = load_template("planner", template) if template else None
    plans: dict[str, MetaPlan] = {}
    failed = 0
    for record in cfg.records():
        try:
            plans[record.id] = generate_plan(planner, record.query, cfg.library, record.image_ref,
                                             template_text, record.id)
        except MetaplanError as exc:
            failed += 1
            print(f"{record.id}: {exc}")
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_plan_cache(plans, cfg.out / "plans.jsonl")
    print(f"wrote {len(plans)} plan(s) to {cfg.out / 'plans.jsonl'}; {failed} failed")
    return 1 if failed else 0


def _bench(cfg: CliConfig) -> BenchResult:
    plans = load_plan_cache(cfg.options.plans) if getattr(cfg.options, "plans", None) else None
    planner = cfg.backend("planner") if cfg.run.planner is not None else None
    return run_benchmark(cfg.records(), cfg.library, cfg.registry(), planner, cfg.backend("executor"),
                         cfg.judge(), cfg.bench_config(), None, plans)


def cmd_run(cfg: CliConfig) -> int:
    result = _bench(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / "trajectories.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for o in result.outcomes:
            fh.write(json.dumps(o.log_entry, ensure_ascii=False) + "\n")
    print(f"wrote {len(result.outcomes)} trajectories to {path}")
    return 0


def cmd_evaluate(cfg: CliConfig) -> int:
    thresholds = _thresholds(cfg.options.threshold)
    logged = load_trajectory_log(cfg.options.trajectories)
    judge = cfg.judge()
    reports: list[SampleReport] = []
    for record in cfg.records():
        if record.id not in logged:
            reports.append(SampleReport.zeroed(record.id, len(record.gt_trajectory.steps), ["missing_trajectory"]))
            continue
        _, trajectory = logged[record.id]
        reports.append(evaluate_trajectory(trajectory, record.gt_trajectory, record, cfg.run.gamma, judge,
                                           cfg.run.lexicon))
    cfg.out.mkdir(parents=True, exist_ok=True)
    aggregate = write_report(reports, cfg.out / "report.jsonl")
    print(format_summary(aggregate))
    return _check_thresholds(aggregate, thresholds)


def cmd_bench(cfg: CliConfig) -> int:
    thresholds = _thresholds(cfg.options.threshold)
    result = _bench(cfg)
    write_outputs(result, cfg.out)
    print(format_summary(result.aggregate))
    return _check_thresholds(result.aggregate, thresholds)


# -- candidate files -----------------------------------------------------------------

@dataclass
class _CandidateLine:
    task_id: str
    plan_id: str
    plan: MetaPlan
    teacher: bool
    runs: list[Any]


def _read_candidates(path: str | Path) -> list[_CandidateLine]:
    """Lines of ``{"task_id", "plan_id", "plan", "runs", "teacher"?}``.

    A run is a reward in [0, 1], a trajectory object (scored against the record's
    ground truth) or ``{"step_scores": [[tsa, asf1, acf], ...]}``.
    """
    out = []
    for lineno, obj in read_jsonl(path):
        try:
            plan_obj = obj["plan"]
            plan = parse_meta_plan(plan_obj if isinstance(plan_obj, str) else json.dumps(plan_obj))
            out.append(_CandidateLine(str(obj["task_id"]), str(obj.get("plan_id", "teacher")), plan,
                                      bool(obj.get("teacher", False)), list(obj["runs"])))
        except (KeyError, TypeError, MetaplanError) as exc:
            raise MetaplanError(f"{path}: line {lineno}: {exc}") from None
    return out


def _step_scores(run: Any, record: Optional[TaskRecord]) -> list[StepScore]:
    if isinstance(run, (int, float)):
        raise MetaplanError("per-step scores are needed here; got a scalar reward")
    if isinstance(run, dict) and "step_scores" in run:
        return [StepScore(int(t), float(a), float(c)) for t, a, c in run["step_scores"]]
    if record is None:
        raise MetaplanError("trajectory runs need --records for ground truth")
    return align_steps(Trajectory.from_obj(run), record.gt_trajectory)


def _run_reward(run: Any, record: Optional[TaskRecord], gamma: float, weights) -> float:
    if isinstance(run, (int, float)) and not isinstance(run, bool):
        return float(run)
    return composite_reward(_step_scores(run, record), gamma, weights)


def cmd_build_prefs(cfg: CliConfig) -> int:
    o = cfg.options
    alpha = o.alpha if o.alpha is not None else cfg.run.alpha
    gamma = o.gamma if o.gamma is not None else cfg.run.gamma
    min_runs = o.min_runs if o.min_runs is not None else cfg.run.min_runs
    margin = o.margin if o.margin is not None else cfg.run.margin
    records = {r.id: r for r in cfg.records()}
    lines = _read_candidates(o.candidates)

    sampled: list[CandidateScores] = []
    teachers: dict[str, _CandidateLine] = {}
    for line in lines:
        if line.teacher:
            teachers[line.task_id] = line
            continue
        rewards = tuple(_run_reward(r, records.get(line.task_id), gamma, cfg.run.weights) for r in line.runs)
        sampled.append(CandidateScores(line.task_id, line.plan_id, rewards, line.plan))

    self_pairs = build_pairs(sampled, alpha, min_runs)
    teacher_pairs: list[PreferencePair] = []
    for task_id, t in teachers.items():
        record = records.get(task_id)
        rewards = [_run_reward(r, record, gamma, cfg.run.weights) for r in t.runs]
        group = [c for c in sampled if c.task_id == task_id]
        teacher_pairs += add_teacher_anchors(group, t.plan, rewards, cfg.library,
                                             extra_facts=record.initial_facts if record else (),
                                             margin=margin, teacher_id=t.plan_id)
    if teacher_pairs and not o.no_mix:
        pairs = mix_hybrid(self_pairs, teacher_pairs, seed=cfg.seed)
    else:
        pairs = self_pairs + teacher_pairs
    cfg.out.mkdir(parents=True, exist_ok=True)
    meta = {"gamma": gamma, "weights": list(cfg.run.weights), "alpha": alpha, "seed": cfg.seed,
            **TRAINER_DEFAULTS}
    n = export_dpo_dataset(pairs, records, cfg.out / "dpo.jsonl", meta)
    print(f"self-generated pairs: {len(self_pairs)}; teacher-augmented pairs: {len(teacher_pairs)}")
    print(f"wrote {n} pair(s) to {cfg.out / 'dpo.jsonl'}")
    return 0


def cmd_gamma_sweep(cfg: CliConfig) -> int:
    o = cfg.options
    alpha = o.alpha if o.alpha is not None else cfg.run.alpha
    min_runs = o.min_runs if o.min_runs is not None else cfg.run.min_runs
    records = {r.id: r for r in cfg.records()} if cfg.records_path else {}
    raw: dict[str, dict[str, list[list[StepScore]]]] = {}
    for line in _read_candidates(o.candidates):
        if line.teacher:
            continue
        raw.setdefault(line.task_id, {})[line.plan_id] = [
            _step_scores(r, records.get(line.task_id)) for r in line.runs
        ]
    report = gamma_sweep(raw, o.gammas, o.baseline, alpha, cfg.run.weights, min_runs)
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "sweep.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(report.table())
    return 0


COMMANDS = {
    "validate": cmd_validate,
    "plan": cmd_plan,
    "run": cmd_run,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "build-prefs": cmd_build_prefs,
    "gamma-sweep": cmd_gamma_sweep,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](cfg)
    except (MetaplanError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())

