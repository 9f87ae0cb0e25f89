"""``tipgrade`` command line: validate, run, report, criteria.

Exit codes: 0 success, 1 method-level failures present, 2 input or usage
error, 3 transport error (the run can be resumed).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import __version__
from .client import (
    BASE_URL_ENV,
    DEFAULT_MAX_COMPLETION_TOKENS,
    DEFAULT_TIMEOUT,
    DEFAULT_TEMPERATURE,
    HttpBackend,
    LLMError,
    RecordingBackend,
    ReplayBackend,
    SamplingParams,
    TranscriptStore,
)
from .dataset import DatasetError, attach_human_scores, load_dataset, read_dataset, validate_dataset
from .pipelines import (
    DEFAULT_CONCURRENCY,
    DEFAULT_RETRY_LIMIT,
    Method,
    ModelEntry,
    RubricCache,
    RubricGenerationError,
    RunPlan,
    RunStore,
    generate_rubric,
    run_batch,
)
from .prompts import DEFAULT_COUNTER, DEFAULT_HEADROOM, JUDGELM_TOKEN_LIMIT, PromptError, RubricText, TokenBudget
from .metrics import POPULATION, SAMPLE
from .report import emit_report

EXIT_OK, EXIT_FAILURES, EXIT_INPUT, EXIT_TRANSPORT = 0, 1, 2, 3
MODES = ("live", "record", "replay")

log = logging.getLogger("tipgrade")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    name: str
    role: str = "instruct"
    base_url: str | None = None
    temperature: float = DEFAULT_TEMPERATURE
    max_completion_tokens: int = DEFAULT_MAX_COMPLETION_TOKENS
    token_limit: int | None = None
    completion_headroom: int = DEFAULT_HEADROOM
    timeout: float = DEFAULT_TIMEOUT
    max_retries: int = 3

    def entry(self, counter_id: str) -> ModelEntry:
        limit = self.token_limit
        if limit is None and self.role == "judgelm":
            limit = JUDGELM_TOKEN_LIMIT
        budget = TokenBudget(limit, counter_id, self.completion_headroom) if limit else None
        params = SamplingParams(self.name, self.temperature, self.max_completion_tokens)
        return ModelEntry(params, self.role, budget, self.base_url)


@dataclass
class RunConfig:
    dataset_path: Path | None = None
    methods: list[str] = field(default_factory=lambda: [m.value for m in Method])
    models: list[ModelConfig] = field(default_factory=list)
    retry_limit: int = DEFAULT_RETRY_LIMIT
    concurrency_limit: int = DEFAULT_CONCURRENCY
    transcript_store_path: Path | None = None
    run_store_path: Path | None = None
    counter_id: str = DEFAULT_COUNTER
    output_dir: Path | None = None
    rubrics_path: Path | None = None
    human_scores_path: Path | None = None
    mode: str = "replay"

    def plan(self) -> RunPlan:
        try:
            return RunPlan(
                tuple(Method(m) for m in self.methods),
                tuple(m.entry(self.counter_id) for m in self.models),
                self.retry_limit,
                self.concurrency_limit,
                self.counter_id,
            )
        except (ValueError, PromptError) as exc:
            raise ConfigError(str(exc)) from exc


_PATH_KEYS = {
    "dataset": "dataset_path",
    "transcript_store": "transcript_store_path",
    "run_store": "run_store_path",
    "output_dir": "output_dir",
    "rubrics": "rubrics_path",
    "human_scores": "human_scores_path",
}
_SCALAR_KEYS = {"retry_limit": "retry_limit", "concurrency": "concurrency_limit", "counter_id": "counter_id", "mode": "mode"}


def load_config(path: str | Path | None) -> RunConfig:
    """Read a YAML config. Relative paths resolve against the config's directory."""
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    base = path.parent
    for key, value in raw.items():
        if key in _PATH_KEYS:
            setattr(cfg, _PATH_KEYS[key], base / value if value is not None else None)
        elif key in _SCALAR_KEYS:
            setattr(cfg, _SCALAR_KEYS[key], value)
        elif key == "methods":
            cfg.methods = _split(value)
        elif key == "models":
            try:
                cfg.models = [ModelConfig(**m) for m in value]
            except TypeError as exc:
                raise ConfigError(f"{path}: bad model entry: {exc}") from exc
        else:
            raise ConfigError(f"{path}: unknown config key {key!r}")
    return cfg


def _split(value) -> list[str]:
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return list(value)


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    overrides = {
        "dataset": "dataset_path",
        "transcript_store": "transcript_store_path",
        "run_store": "run_store_path",
        "out": "output_dir",
        "rubrics": "rubrics_path",
        "human_scores": "human_scores_path",
    }
    for flag, attr in overrides.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, Path(value))
    for flag, attr in (("retry_limit", "retry_limit"), ("concurrency", "concurrency_limit"),
                       ("counter_id", "counter_id"), ("mode", "mode")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, value)
    if getattr(args, "methods", None):
        cfg.methods = _split(args.methods)
    return cfg


def _require(cfg: RunConfig, *attrs: str) -> None:
    for attr in attrs:
        if getattr(cfg, attr) is None:
            raise ConfigError(f"missing required setting: {attr}")


def _load_data(cfg: RunConfig):
    dataset = load_dataset(cfg.dataset_path)
    if cfg.human_scores_path is not None:
        dataset = attach_human_scores(dataset, cfg.human_scores_path).dataset
    return dataset


def _backends(cfg: RunConfig, plan: RunPlan):
    """Backend per model name for the configured mode."""
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}")
    if cfg.mode == "replay":
        if cfg.transcript_store_path is None or not cfg.transcript_store_path.exists():
            raise ConfigError("replay mode needs an existing transcript store")
        return ReplayBackend(TranscriptStore(cfg.transcript_store_path)), None
    store = None
    if cfg.mode == "record":
        _require(cfg, "transcript_store_path")
        store = TranscriptStore(cfg.transcript_store_path)
    backends = {}
    by_name = {m.name: m for m in cfg.models}
    for entry in plan.models:
        mc = by_name[entry.name]
        url = mc.base_url or os.environ.get(BASE_URL_ENV)
        if not url:
            raise ConfigError(f"model {entry.name}: no base_url and {BASE_URL_ENV} unset")
        live = HttpBackend(url, api_key=os.environ.get("TIPGRADE_API_KEY"), timeout=mc.timeout,
                           max_retries=mc.max_retries, max_in_flight=cfg.concurrency_limit)
        backends[entry.name] = RecordingBackend(live, store) if store is not None else live
    return backends, store


def read_rubrics(path: Path) -> tuple[dict[tuple[str, str], RubricText], list[dict]]:
    rubrics, failures = {}, []
    if not path.exists():
        return rubrics, failures
    for line in path.read_text(encoding="utf-8").split("\n"):
        if not line.strip():
            continue
        obj = json.loads(line)
        if obj.get("kind") == "rubric":
            rubrics[(obj["question_id"], obj["model_name"])] = RubricText.from_dict(obj)
        elif obj.get("kind") == "failure":
            failures.append(obj)
    return rubrics, failures


def write_rubrics(path: Path, dataset, rubrics: dict, failures: list[dict]) -> None:
    order = {q.question_id: i for i, q in enumerate(dataset.questions)}
    lines = []
    for (qid, model), rubric in sorted(rubrics.items(), key=lambda kv: (order.get(kv[0][0], 1 << 30), kv[0])):
        lines.append({"kind": "rubric", "question_id": qid, "model_name": model, **rubric.to_dict()})
    for f in failures:
        lines.append({"kind": "failure", **f})
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(x, ensure_ascii=False) + "\n" for x in lines), encoding="utf-8")


# -- commands ----------------------------------------------------------------


def cmd_validate(args: argparse.Namespace) -> int:
    path = args.dataset or args.dataset_path
    if path is None:
        print("error: no dataset given", file=sys.stderr)
        return EXIT_INPUT
    try:
        d = read_dataset(Path(path))
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    violations = validate_dataset(d)
    for v in violations:
        print(v)
    return EXIT_FAILURES if violations else EXIT_OK


def _plan_counts(store: RunStore, plan: RunPlan, dataset) -> dict[str, int]:
    counts = {"done": 0, "ok": 0, "overflow": 0, "parse_failed": 0}
    for q, a, method, model in plan.cells(dataset):
        rec = store.get((q.question_id, a.student_id, method.value, model.name))
        if rec is None:
            continue
        counts["done"] += 1
        counts[rec.status.value] += 1
    return counts


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        _require(cfg, "dataset_path", "run_store_path")
        plan = cfg.plan()
        dataset = _load_data(cfg)
        client, _ = _backends(cfg, plan)
        preloaded = read_rubrics(cfg.rubrics_path)[0] if cfg.rubrics_path else {}
        store = RunStore(cfg.run_store_path)
    except (ConfigError, DatasetError, LLMError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    total = len(plan.cells(dataset))

    def progress(s):
        if args.verbose:
            print(f"cells {s.done}/{s.total}", file=sys.stderr)

    ts = TranscriptStore(cfg.transcript_store_path) if cfg.transcript_store_path and cfg.transcript_store_path.exists() else None
    extra = {"mode": cfg.mode, "transcript_store_digest": ts.file_digest() if ts else None}
    summary = run_batch(dataset, plan, store, client, RubricCache(preloaded), extra, progress)

    counts = _plan_counts(store, plan, dataset)
    print(f"cells: {counts['done']}/{total}", file=sys.stderr)
    print(f"ok: {counts['ok']}", file=sys.stderr)
    print(f"overflow: {counts['overflow']}", file=sys.stderr)
    print(f"parse_failed: {counts['parse_failed']}", file=sys.stderr)
    if summary.failures:
        print(f"unfinalized: {len(summary.failures)}", file=sys.stderr)
        for key, msg in summary.failures[:10]:
            print(f"  {'/'.join(key)}: {msg}", file=sys.stderr)
        return EXIT_TRANSPORT
    return EXIT_FAILURES if counts["parse_failed"] else EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        _require(cfg, "dataset_path", "run_store_path", "output_dir")
        if not cfg.run_store_path.exists():
            raise ConfigError(f"run store {cfg.run_store_path} does not exist")
        dataset = _load_data(cfg)
        store = RunStore(cfg.run_store_path)
    except (ConfigError, DatasetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        result = emit_report(store.records(), dataset, cfg.output_dir, std=args.std)
    except OSError as exc:
        print(f"error: cannot write report: {exc}", file=sys.stderr)
        return EXIT_INPUT
    sys.stdout.write(result["summary"])
    return EXIT_OK


def cmd_criteria(args: argparse.Namespace) -> int:
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        _require(cfg, "dataset_path", "rubrics_path")
        plan_cfg = RunConfig(**{**cfg.__dict__, "methods": [Method.ADAPTIVE.value]})
        plan = plan_cfg.plan()
        entries = [m for m in plan.models if m.serves(Method.ADAPTIVE)]
        if args.model:
            entries = [m for m in entries if m.name == args.model]
            if not entries:
                raise ConfigError(f"no instruct model named {args.model!r}")
        model = entries[0]
        dataset = _load_data(cfg)
        client, _ = _backends(cfg, plan)
    except (ConfigError, DatasetError, LLMError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    backend = client[model.name] if isinstance(client, dict) else client
    rubrics, _ = read_rubrics(cfg.rubrics_path)
    failures = []
    for q in dataset.questions:
        key = (q.question_id, model.name)
        if key in rubrics and not args.force:
            continue
        try:
            rubrics[key] = generate_rubric(q, model, backend, cfg.retry_limit)
        except RubricGenerationError as exc:
            rubrics.pop(key, None)
            failures.append({"question_id": q.question_id, "model_name": model.name, "stage": exc.stage})
        except LLMError as exc:
            write_rubrics(cfg.rubrics_path, dataset, rubrics, failures)
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_TRANSPORT
    write_rubrics(cfg.rubrics_path, dataset, rubrics, failures)
    written = sum(1 for (_, m) in rubrics if m == model.name)
    print(f"rubrics: {written}")
    if failures:
        print("failed:")
        for f in failures:
            print(f"  {f['question_id']}: {f['stage']}")
        return EXIT_FAILURES
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tipgrade", description="Grade text-input answers with LLM pipelines.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a dataset file")
    p.add_argument("dataset_path", nargs="?")
    p.add_argument("--dataset")
    p.set_defaults(func=cmd_validate)

    def common(p):
        p.add_argument("--config")
        p.add_argument("--dataset")
        p.add_argument("--human-scores", dest="human_scores")
        p.add_argument("--methods")
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--transcript-store", dest="transcript_store")
        p.add_argument("--run-store", dest="run_store")
        p.add_argument("--rubrics")
        p.add_argument("--concurrency", type=int)
        p.add_argument("--retry-limit", dest="retry_limit", type=int)
        p.add_argument("--counter-id", dest="counter_id")
        p.add_argument("--out")

    p = sub.add_parser("run", help="evaluate every cell of the plan")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="write statistics and agreement tables")
    common(p)
    p.add_argument("--std", choices=(SAMPLE, POPULATION), default=SAMPLE, help="standard deviation convention")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("criteria", help="pre-generate adaptive rubrics, one per question")
    common(p)
    p.add_argument("--model")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_criteria)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "criteria" and args.out and not args.rubrics:
        # for criteria, --out names the rubric file
        args.rubrics, args.out = args.out, None
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
