"""Command-line entry point.

Settings come from (highest first) flags, ``SPARSEVID_<KEY>`` environment
variables, a flat ``key=value`` file given with ``--config``, and defaults.
Every command writes into a fresh timestamped directory under ``--out-dir``
together with the effective configuration.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from .backend import BackendError
from .bench import (EmptyDataset, ManifestError, ablate_components, comparison_table, evaluate,
                    items_from_records, read_manifest, sweep, write_frontier_csv)
from .controller import (EpisodeConfig, EpisodeFailed, PromptTemplate, QAItem, Trajectory,
                         run_episode)
from .grpo import GrpoConfig, train_toy
from .protocol import option_labels
from .reward import RewardWeights, score_trajectory
from .synth import (OracleBackend, OracleRules, SyntheticEnv, SyntheticVideo, export_dataset,
                    generate_task, task_from_record)
from .video import VideoError, open_frame_dir, read_key_values

log = logging.getLogger("sparsevid")

EXIT_OK, EXIT_USAGE, EXIT_BACKEND, EXIT_PROTOCOL, EXIT_DATA = 0, 2, 3, 4, 5
ENV_PREFIX = "SPARSEVID_"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Setting:
    type: Callable[[str], Any]
    default: Any
    help: str


_E = EpisodeConfig()
_W = RewardWeights()
_G = GrpoConfig()

SETTINGS: dict[str, Setting] = {
    "backend": Setting(str, "oracle", "model backend: oracle or http"),
    "endpoint": Setting(str, "", "chat-completions URL for the http backend"),
    "model": Setting(str, "", "model name sent to the endpoint"),
    "api_key_env": Setting(str, "OPENAI_API_KEY", "environment variable holding the API key"),
    "timeout_ms": Setting(int, 30000, "per-attempt request timeout"),
    "max_retries": Setting(int, 3, "retries for transient backend failures"),
    "max_concurrency": Setting(int, 4, "concurrent requests to the endpoint"),
    "debug_log": Setting(str, "", "JSONL file for raw request/response records"),
    "max_rounds": Setting(int, _E.max_rounds, "T: rounds per episode"),
    "max_frames_per_round": Setting(int, _E.max_frames_per_round, "frames admitted per round"),
    "token_budget": Setting(int, _E.token_budget, "K: visual plus prompt token budget"),
    "initial_frame_count": Setting(int, 0, "frames shown in round 1 (0: per-round cap)"),
    "retry_on_invalid": Setting(int, _E.retry_on_invalid, "re-prompts after a malformed reply"),
    "temperature": Setting(float, _E.temperature, "sampling temperature"),
    "top_p": Setting(float, _E.top_p, "nucleus sampling mass"),
    "max_response_tokens": Setting(int, _E.max_response_tokens, "reply length limit"),
    "per_frame_cost": Setting(int, _E.per_frame_cost, "token cost charged per admitted frame"),
    "force_answer_at_end": Setting(_bool, True, "ask for a forced answer when rounds run out"),
    "carry_state": Setting(_bool, True, "carry the summary between rounds"),
    "structured_summary": Setting(_bool, True, "use the five-field summary"),
    "record_scores": Setting(_bool, False, "score options every round (needed for rewards)"),
    "prompt_template": Setting(str, "", "file with a custom prompt template"),
    "seed": Setting(int, 0, "random seed"),
    "parallelism": Setting(int, 1, "episodes evaluated concurrently"),
    "out_dir": Setting(str, "runs", "parent directory for run directories"),
    "lambda1": Setting(float, _W.lambda1, "confidence-gain weight"),
    "lambda2": Setting(float, _W.lambda2, "summary-sufficiency weight"),
    "lambda3": Setting(float, _W.lambda3, "correct-and-early stop weight"),
    "alpha": Setting(float, _W.alpha, "format bonus"),
    "beta": Setting(float, _W.beta, "early-stop slope"),
    "t_stop": Setting(int, _W.t_stop, "latest round that still earns the stop reward"),
    "gamma": Setting(float, _W.gamma, "discount"),
    "iterations": Setting(int, _G.iterations, "training iterations"),
    "learning_rate": Setting(float, _G.learning_rate, "toy-policy learning rate"),
    "group_size": Setting(int, _G.group_size, "trajectories per group"),
    "batch_tasks": Setting(int, _G.batch_tasks, "groups per iteration"),
    "epsilon": Setting(float, _G.epsilon, "ratio clip"),
    "kl_coef": Setting(float, _G.kl_coef, "KL penalty weight"),
}
SECRET_HINTS = ("api_key", "secret", "password", "authorization")


def load_config_file(path: str | Path) -> dict[str, str]:
    try:
        values = read_key_values(Path(path))
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    for key in values:
        if key != "api_key_env" and any(h in key.lower() for h in SECRET_HINTS):
            raise UsageError(f"{path}: secrets belong in environment variables, not in '{key}'")
        if key not in SETTINGS:
            raise UsageError(f"{path}: unknown setting '{key}'")
    return values


def resolve_settings(flags: dict[str, Any], config_file: str | None,
                     environ: dict[str, str] | None = None) -> dict[str, Any]:
    """Merge sources with precedence flags > environment > file > defaults."""
    environ = os.environ if environ is None else environ
    file_values = load_config_file(config_file) if config_file else {}
    out: dict[str, Any] = {}
    for key, setting in SETTINGS.items():
        if key in flags:
            raw, source = flags[key], "flag"
        elif ENV_PREFIX + key.upper() in environ:
            raw, source = environ[ENV_PREFIX + key.upper()], "environment"
        elif key in file_values:
            raw, source = file_values[key], "config file"
        else:
            out[key] = setting.default
            continue
        try:
            out[key] = raw if isinstance(raw, (bool, int, float)) and setting.type is not str \
                else setting.type(raw)
        except ValueError as exc:
            raise UsageError(f"invalid value for {key} from {source}: {raw!r} ({exc})") from exc
    return out


def episode_config(s: dict[str, Any]) -> EpisodeConfig:
    return EpisodeConfig(
        max_rounds=s["max_rounds"], max_frames_per_round=s["max_frames_per_round"],
        token_budget=s["token_budget"], initial_frame_count=s["initial_frame_count"] or None,
        retry_on_invalid=s["retry_on_invalid"], temperature=s["temperature"], top_p=s["top_p"],
        max_response_tokens=s["max_response_tokens"], force_answer_at_end=s["force_answer_at_end"],
        per_frame_cost=s["per_frame_cost"], carry_state=s["carry_state"],
        structured_summary=s["structured_summary"], record_scores=s["record_scores"],
        seed=s["seed"])


def reward_weights(s: dict[str, Any]) -> RewardWeights:
    return RewardWeights(lambda1=s["lambda1"], lambda2=s["lambda2"], lambda3=s["lambda3"],
                         alpha=s["alpha"], beta=s["beta"], t_stop=s["t_stop"], gamma=s["gamma"])


def grpo_config(s: dict[str, Any]) -> GrpoConfig:
    return GrpoConfig(epsilon=s["epsilon"], group_size=s["group_size"],
                      learning_rate=s["learning_rate"], kl_coef=s["kl_coef"],
                      iterations=s["iterations"], batch_tasks=s["batch_tasks"])


def validate(s: dict[str, Any]) -> None:
    try:
        episode_config(s)
        reward_weights(s)
        grpo_config(s)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if s["backend"] not in ("oracle", "http"):
        raise UsageError("backend must be 'oracle' or 'http'")
    if s["backend"] == "http" and not (s["endpoint"] and s["model"]):
        raise UsageError("the http backend needs both endpoint and model")
    if s["parallelism"] < 1:
        raise UsageError("parallelism must be >= 1")
    if s["timeout_ms"] <= 0 or s["max_retries"] < 0 or s["max_concurrency"] < 1:
        raise UsageError("timeout_ms > 0, max_retries >= 0 and max_concurrency >= 1 required")


# -- run directories ------------------------------------------------------------------

def make_run_dir(parent: str | Path, command: str) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    base = Path(parent) / f"{stamp}-{command}"
    path, n = base, 1
    while path.exists():
        path = Path(f"{base}-{n}")
        n += 1
    path.mkdir(parents=True)
    return path


def write_effective_config(run_dir: Path, settings: dict[str, Any], argv: Sequence[str]) -> None:
    lines = [f"{k}={settings[k]}" for k in SETTINGS]
    (run_dir / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (run_dir / "command.json").write_text(json.dumps({"argv": list(argv)}, indent=2) + "\n",
                                          encoding="utf-8")


def make_backend(s: dict[str, Any], tasks: Sequence = ()):
    if s["backend"] == "oracle":
        return OracleBackend(tasks, OracleRules(default_cap=s["max_frames_per_round"]))
    from .http_backend import EndpointConfig, HttpBackend
    return HttpBackend(EndpointConfig(
        endpoint=s["endpoint"], model=s["model"], api_key_env=s["api_key_env"] or None,
        timeout_ms=s["timeout_ms"], max_retries=s["max_retries"],
        max_concurrency=s["max_concurrency"], debug_log=s["debug_log"] or None))


def _template(s: dict[str, Any]) -> PromptTemplate | None:
    if not s["prompt_template"]:
        return None
    try:
        return PromptTemplate.from_file(s["prompt_template"])
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"bad prompt template: {exc}") from exc


def _manifest(path: str | None) -> tuple[list[dict[str, Any]], Path]:
    if not path:
        raise UsageError("--manifest is required")
    try:
        return read_manifest(path), Path(path).parent
    except FileNotFoundError as exc:
        raise DataError(f"manifest not found: {path}") from exc
    except ManifestError as exc:
        raise DataError(str(exc)) from exc


def _oracle_tasks(s: dict[str, Any], records: Sequence[dict[str, Any]]) -> list:
    if s["backend"] != "oracle":
        return []
    tasks = []
    for rec in records:
        try:
            task = task_from_record(rec)
        except (ValueError, KeyError) as exc:
            raise DataError(str(exc)) from exc
        if task is None:
            raise UsageError(f"the oracle backend only handles synthetic items; {rec['id']!r} is not one")
        tasks.append(task)
    return tasks


def _attach_rewards(trajs: Sequence[Trajectory], weights: RewardWeights) -> None:
    for traj in trajs:
        if isinstance(traj, Trajectory) and traj.correct_label is not None:
            try:
                traj.reward = score_trajectory(traj, None, weights)
            except BackendError as exc:
                log.warning("%s: reward not computed (%s)", traj.id, exc)


# -- commands -------------------------------------------------------------------------

def cmd_run(args, s, run_dir: Path) -> int:
    cfg = episode_config(s)
    template = _template(s)
    if args.synth:
        try:
            params = dict(kv.split("=", 1) for kv in args.synth.split(","))
            task = generate_task(int(params.get("seed", s["seed"])), int(params.get("L", 32)),
                                 int(params.get("k", 3)), int(params.get("n", 4)))
        except ValueError as exc:
            raise UsageError(f"--synth expects seed=..,L=..,k=..,n=..: {exc}") from exc
        video, question, options, correct, tasks = (SyntheticVideo(task), task.question,
                                                    task.options, task.correct, [task])
        item_id = task.id
    elif args.manifest:
        records, root = _manifest(args.manifest)
        matches = [r for r in records if str(r["id"]) == args.id]
        if not matches:
            raise DataError(f"id {args.id!r} not in {args.manifest}")
        rec = matches[0]
        tasks = _oracle_tasks(s, [rec])
        item = items_from_records([rec], root)[0]
        try:
            video = item.open_video()
        except VideoError as exc:
            raise DataError(str(exc)) from exc
        question, options, correct, item_id = item.question, item.options, item.answer, item.id
    else:
        if not (args.video and args.question and args.options):
            raise UsageError("give --synth, --manifest with --id, or --video/--question/--options")
        if s["backend"] == "oracle":
            raise UsageError("the oracle backend needs a synthetic task (--synth or --manifest)")
        try:
            video = open_frame_dir(args.video)
        except VideoError as exc:
            raise DataError(str(exc)) from exc
        options = tuple(o.strip() for o in args.options.split("|"))
        if len(options) < 2:
            raise UsageError("--options needs at least two '|'-separated options")
        question, correct, tasks, item_id = args.question, None, [], None
        if args.answer:
            correct = args.answer if args.answer in option_labels(options) else None
    backend = make_backend(s, tasks)
    try:
        traj = run_episode(video, question, options, backend, cfg, item_id=item_id,
                           correct=correct, template=template)
    except EpisodeFailed as exc:
        _write_jsonl(run_dir / "trajectory.jsonl", [exc.trajectory.to_json(include_prompts=True)])
        raise exc.cause from exc
    if cfg.record_scores:
        _attach_rewards([traj], reward_weights(s))
    _write_jsonl(run_dir / "trajectory.jsonl", [traj.to_json(include_prompts=True)])
    if traj.final_answer is None:
        print(f"no answer ({traj.failure})", file=sys.stderr)
        return EXIT_PROTOCOL
    print(traj.final_answer)
    return EXIT_OK


def _write_jsonl(path: Path, records: Sequence[dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _items(s, args) -> tuple[list[QAItem], Any]:
    records, root = _manifest(args.manifest)
    if not records:
        raise DataError(f"{args.manifest} has no items")
    backend = make_backend(s, _oracle_tasks(s, records))
    return items_from_records(records, root), backend


def cmd_evaluate(args, s, run_dir: Path) -> int:
    items, backend = _items(s, args)
    cfg = episode_config(s)
    res = evaluate(items, backend, cfg, parallelism=s["parallelism"], template=_template(s))
    if cfg.record_scores:
        _attach_rewards(res.results, reward_weights(s))
        res.log = [r.to_json() if isinstance(r, Trajectory) else rec
                   for r, rec in zip(res.results, res.log)]
    res.write(run_dir)
    print(res.report.to_text())
    return EXIT_OK


def _parse_grid(text: str) -> list[tuple[int, int]]:
    cells = []
    for part in text.split(","):
        try:
            T, cap = part.lower().split("x")
            cells.append((int(T), int(cap)))
        except ValueError as exc:
            raise UsageError(f"grid cells look like 4x3, got {part!r}") from exc
    if not cells:
        raise UsageError("empty grid")
    return cells


def cmd_sweep(args, s, run_dir: Path) -> int:
    grid = _parse_grid(args.grid)
    for T, cap in grid:
        try:
            EpisodeConfig(max_rounds=T, max_frames_per_round=cap)
        except ValueError as exc:
            raise UsageError(f"grid cell {T}x{cap}: {exc}") from exc
    items, backend = _items(s, args)
    results = sweep(items, backend, grid, episode_config(s), parallelism=s["parallelism"],
                    template=_template(s))
    for r in results:
        r.write(run_dir, stem=f"sweep_{r.report.name}")
    write_frontier_csv(results, run_dir / "frontier.csv")
    print(comparison_table({r.report.name: r.report for r in results}, label="config"))
    return EXIT_OK


def cmd_ablate(args, s, run_dir: Path) -> int:
    items, backend = _items(s, args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    try:
        results = ablate_components(items, backend, episode_config(s), variants,
                                    parallelism=s["parallelism"], template=_template(s))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    for name, r in results.items():
        r.write(run_dir, stem=f"ablate_{name}")
    table = comparison_table({k: v.report for k, v in results.items()})
    (run_dir / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_reward_score(args, s, run_dir: Path) -> int:
    path = Path(args.trajectories)
    if not path.exists():
        raise DataError(f"{path} not found")
    weights = reward_weights(s)
    backend = None
    if args.manifest:
        records, _ = _manifest(args.manifest)
        backend = make_backend(s, _oracle_tasks(s, records))
    out, mismatches, scored = [], 0, 0
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{n}: invalid JSON") from exc
        if "error" in data:
            continue
        traj = Trajectory.from_json(data)
        trace = score_trajectory(traj, backend, weights)
        scored += 1
        stored = data.get("reward")
        same = stored is None or stored == trace.to_json()
        mismatches += not same
        out.append({"id": traj.id, "reward": trace.to_json(), "matches_stored": same})
    _write_jsonl(run_dir / "rewards.jsonl", out)
    print(f"scored {scored} trajectories; {mismatches} differ from stored rewards")
    return EXIT_OK


def cmd_train_toy(args, s, run_dir: Path) -> int:
    result = train_toy(SyntheticEnv(), grpo_config(s), reward_weights(s), seed=s["seed"],
                       on_iteration=lambda row: log.info("iter %(iteration)d return %(mean_return).3f "
                                                         "tau %(mean_tau).2f", row))
    result.write_curve(run_dir / "curve.csv")
    result.policy.save(run_dir / "policy.txt")
    first, last = result.curve[0], result.curve[-1]
    print(f"mean return {first['mean_return']:.3f} -> {last['mean_return']:.3f}; "
          f"mean rounds {first['mean_tau']:.2f} -> {last['mean_tau']:.2f}; "
          f"mean frames {first['mean_frames']:.2f} -> {last['mean_frames']:.2f}")
    return EXIT_OK


def cmd_synth_gen(args, s, run_dir: Path) -> int:
    try:
        ks = [int(k) for k in args.k.split(",")]
    except ValueError as exc:
        raise UsageError("--k takes a comma-separated list of integers") from exc
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    try:
        tasks = [generate_task(s["seed"] * 100_003 + i, args.length, ks[i % len(ks)],
                               args.n_options, args.fps) for i in range(args.count)]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    manifest = export_dataset(tasks, run_dir / "dataset")
    print(manifest)
    return EXIT_OK


COMMANDS: dict[str, Callable[..., int]] = {
    "run": cmd_run, "evaluate": cmd_evaluate, "sweep": cmd_sweep, "ablate": cmd_ablate,
    "reward-score": cmd_reward_score, "train-toy": cmd_train_toy, "synth-gen": cmd_synth_gen,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # exit code 2 with the usage line, like argparse
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", dest="config_file", help="flat key=value settings file")
    common.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING, ...")
    for key, setting in SETTINGS.items():
        flag = "--" + key.replace("_", "-")
        if setting.type is _bool:
            common.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction,
                                help=setting.help)
        else:
            common.add_argument(flag, dest=key, type=setting.type, help=setting.help)

    parser = _Parser(prog="sparsevid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", parents=[common], help="answer one question")
    p.add_argument("--synth", help="synthetic task as seed=..,L=..,k=..,n=..")
    p.add_argument("--manifest")
    p.add_argument("--id")
    p.add_argument("--video", help="frame directory")
    p.add_argument("--question")
    p.add_argument("--options", help="'|'-separated option texts")
    p.add_argument("--answer", help="correct label, if known")

    for name, helptext in (("evaluate", "evaluate a manifest"),
                           ("sweep", "grid over rounds and per-round frame caps"),
                           ("ablate", "summary component ablation")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--manifest", required=True)
        if name == "sweep":
            p.add_argument("--grid", default="1x6,2x4,3x6,4x4", help="cells like 4x3, comma separated")
        if name == "ablate":
            p.add_argument("--variants", default="full,no_state_carryover,no_structured_fields,neither")

    p = sub.add_parser("reward-score", parents=[common], help="re-score logged trajectories")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--manifest", help="needed only to recompute missing scores")

    sub.add_parser("train-toy", parents=[common], help="train the toy policy on the synthetic env")

    p = sub.add_parser("synth-gen", parents=[common], help="export a synthetic dataset")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--length", type=int, default=48)
    p.add_argument("--k", default="2,4,6")
    p.add_argument("--n-options", dest="n_options", type=int, default=4)
    p.add_argument("--fps", type=float, default=2.0)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(args, "log_level", "WARNING").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k in SETTINGS}
    try:
        settings = resolve_settings(flags, getattr(args, "config_file", None))
        validate(settings)
        _template(settings)
    except UsageError as exc:
        print(f"sparsevid: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    run_dir = make_run_dir(settings["out_dir"], args.command)
    write_effective_config(run_dir, settings, argv)
    try:
        code = COMMANDS[args.command](args, settings, run_dir)
    except UsageError as exc:
        print(f"sparsevid: usage error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except BackendError as exc:
        print(f"sparsevid: backend error ({exc.kind}): {exc}", file=sys.stderr)
        code = EXIT_BACKEND
    except (DataError, VideoError, EmptyDataset, ManifestError) as exc:
        print(f"sparsevid: data error: {exc}", file=sys.stderr)
        code = EXIT_DATA
    (run_dir / "exit_code.txt").write_text(f"{code}\n", encoding="utf-8")
    print(f"run directory: {run_dir}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
