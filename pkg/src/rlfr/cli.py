"""Command line: corpus generation, SFT, RL, evaluation, comparison and plot data.

Every subcommand that writes output does so into a fresh run directory
(``--out``) holding a ``config.txt`` snapshot of the resolved settings.
Existing run directories are only ever read.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import time
from pathlib import Path
from typing import Any, Callable, Sequence

from . import config as cfg
from .corpus import (
    ConfigError,
    SyntheticTaskSpec,
    corrupt_corpus,
    generate_corpus,
    load_corpus,
    load_task,
    save_corpus,
    save_task,
    split_corpus,
    TASK_KINDS,
    build_vocab,
)
from .evaluation import compare, comparison_table, evaluate, write_comparison
from .policy import PolicyConfig, PolicyParams, load_checkpoint, save_checkpoint
from .refine import FixedTeacher, OracleTeacher, RefinementCache, RemoteTeacher, TeacherConfig, paraphrase_references
from .reward import ALPHA_PRESETS, ChrFScorer, RemoteScorer
from .rl import MODES, MetricsWriter, TrainConfig, TrainingAborted, baseline_resp_len, read_metrics, train_rl
from .sft import SftConfig, train_sft

log = logging.getLogger("rlfr")

DYNAMICS_COLUMNS = ("step", "reward", "resp_len", "adequacy")


class CliError(Exception):
    """A user-facing failure reported as one line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _choice(options: Sequence[str]) -> Callable[[str], str]:
    def conv(v: str) -> str:
        if v not in options:
            raise ValueError(f"{v!r} is not one of {', '.join(options)}")
        return v

    conv.__name__ = "choice"
    return conv


# name, type, default, help.  The same table drives flags and config-file keys.
Option = tuple[str, Callable[[str], Any], Any, str]

TASK_OPTIONS: list[Option] = [
    ("kind", _choice(TASK_KINDS), "substitution-cipher", "synthetic task kind"),
    ("alphabet_size", int, 12, "ordinary source symbols"),
    ("mapping_seed", int, 0, "seed of the cipher mapping and entity names"),
    ("n_entities", int, 16, "entity table size"),
    ("entity_rate", float, 0.5, "probability that an example carries an entity"),
    ("max_entities", int, 1, "entities per example at most"),
    ("min_len", int, 4, "shortest source, in ordinary tokens"),
    ("max_len", int, 8, "longest source, in ordinary tokens"),
    ("corruption_rate", float, 0.2, "gold-token corruption rate of the SFT training file"),
    ("n_train", int, 1000, "training examples"),
    ("n_dev", int, 100, "development examples (SFT early stopping)"),
    ("n_heldout", int, 300, "held-out test examples"),
    ("seed", int, 0, "corpus sampling seed"),
]

POLICY_OPTIONS: list[Option] = [
    ("d_model", int, 32, "model width"),
    ("hidden", int, 64, "feed-forward width"),
    ("context", int, 64, "context length in tokens"),
]

SFT_OPTIONS: list[Option] = [
    ("corpus", str, None, "gen-corpus output directory"),
    ("epochs", int, 40, "maximum epochs"),
    ("batch_size", int, 32, "examples per step"),
    ("lr", float, 0.5, "learning rate"),
    ("max_grad_norm", float, 1.0, "global gradient-norm clip"),
    ("patience", int, 5, "epochs without dev gain before stopping"),
    ("min_epochs", int, 10, "epochs before early stopping may trigger"),
    ("seed", int, 0, "initialisation and shuffling seed"),
    *POLICY_OPTIONS,
]

RL_OPTIONS: list[Option] = [
    ("init", str, None, "SFT run directory or checkpoint file to start from"),
    ("corpus", str, None, "gen-corpus output directory (prompts and held-out set)"),
    ("mode", _choice(MODES), "rlfr", "rlfr or fixed-ref"),
    ("teacher", _choice(("oracle", "remote", "fixed")), None, "refinement source (default: oracle for rlfr, fixed for fixed-ref)"),
    ("alpha_preset", _choice(tuple(ALPHA_PRESETS)), "balanced", "reward mix"),
    ("seed", int, 0, "sampling seed"),
    ("k", int, 4, "samples per prompt"),
    ("rollout_batch", int, 32, "prompts per iteration"),
    ("beta", float, 0.02, "KL penalty weight"),
    ("eps_clip", float, 0.2, "importance-ratio clip width"),
    ("eps_stat", float, 1e-6, "variance floor of advantage normalisation"),
    ("lr", float, 0.05, "learning rate"),
    ("inner_epochs", int, 1, "gradient steps per rollout"),
    ("iterations", int, 300, "rollout iterations"),
    ("temperature", float, 1.0, "sampling temperature"),
    ("max_grad_norm", float, 1.0, "global gradient-norm clip"),
    ("max_drop_rate", float, 0.5, "abort when more refinements than this fraction fail"),
    ("eval_every", int, 10, "held-out evaluation interval (0 disables)"),
    ("checkpoint_every", int, 0, "checkpoint interval (0 keeps only the final one)"),
    ("endpoint", str, None, "remote teacher base URL"),
    ("model", str, None, "remote teacher model name"),
    ("api_key_env", str, None, "environment variable holding the remote teacher API key"),
    ("timeout", float, 30.0, "remote request timeout in seconds"),
    ("retries", int, 2, "remote retries per request"),
    ("max_concurrency", int, 4, "concurrent remote requests"),
    ("cache", str, None, "existing refinement cache to start from; copied into the run directory"),
    ("paraphrase_seed", int, 0, "seed of the fixed references"),
    ("paraphrase_token_rate", float, 0.2, "token swap rate of the fixed references"),
    ("paraphrase_entity_rate", float, 0.5, "non-canonical entity rate of the fixed references"),
    ("scorer_url", str, None, "remote semantic scorer (default: local chrF)"),
]

EVAL_OPTIONS: list[Option] = [
    ("run", str, None, "run directory to re-evaluate"),
    ("checkpoint", str, None, "checkpoint file (instead of --run)"),
    ("corpus", str, None, "corpus file (instead of --run)"),
    ("scorer_url", str, None, "remote semantic scorer (default: local chrF)"),
]

COMMANDS: dict[str, tuple[list[Option], bool, str]] = {
    # name: (options, needs --out, help)
    "gen-corpus": (TASK_OPTIONS, True, "generate a synthetic parallel corpus"),
    "sft": (SFT_OPTIONS, True, "supervised initialisation"),
    "rl": (RL_OPTIONS, True, "RL fine-tuning (rlfr or fixed-ref)"),
    "eval": (EVAL_OPTIONS, False, "evaluate a checkpoint on a corpus"),
    "compare": ([("corpus", str, None, "corpus file")], True, "compare checkpoints side by side"),
    "plot-data": ([("run", str, None, "rl run directory")], True, "export training-dynamics CSV"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rlfr", description="RL from teacher-model refinement on synthetic translation tasks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)
    for name, (options, needs_out, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value file; flags override it")
        if needs_out:
            p.add_argument("--out", required=True, help="new run directory")
        for key, conv, default, hlp in options:
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=conv, default=argparse.SUPPRESS,
                           help=hlp if "default:" in hlp else f"{hlp} (default: {default})")
        if name == "compare":
            p.add_argument("--checkpoint", action="append", required=True, metavar="NAME=PATH",
                           help="checkpoint file or run directory; repeat for each model")
        if name == "eval":
            p.add_argument("--out", help="optional new directory for eval.json")
    return parser


def _settings(args: argparse.Namespace, options: list[Option]) -> dict[str, Any]:
    keys = {o[0] for o in options}
    flags = {k: v for k, v in vars(args).items() if k in keys}
    file_values = cfg.load_flat(args.config) if args.config else {}
    return cfg.resolve(flags, file_values, {o[0]: o[2] for o in options}, {o[0]: o[1] for o in options})


def _new_run_dir(path: str) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise CliError(f"run directory {out} already exists; choose a new --out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(settings: dict, *keys: str) -> None:
    missing = [k for k in keys if settings.get(k) in (None, "")]
    if missing:
        raise CliError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _resolve_checkpoint(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint.npz"
    if not p.is_file():
        raise CliError(f"checkpoint {p} not found")
    return p


def _corpus_dir(path: str) -> Path:
    p = Path(path)
    for name in ("task.json", "train.jsonl", "dev.jsonl", "heldout.jsonl"):
        if not (p / name).is_file():
            raise CliError(f"{p} is not a gen-corpus directory (missing {name})")
    return p


def _scorer(url: str | None):
    return RemoteScorer(url) if url else ChrFScorer()


# -- subcommands -------------------------------------------------------------


def cmd_gen_corpus(args, s) -> str:
    spec = SyntheticTaskSpec(
        kind=s["kind"],
        alphabet_size=s["alphabet_size"],
        mapping_seed=s["mapping_seed"],
        n_entities=s["n_entities"],
        entity_rate=s["entity_rate"],
        max_entities=s["max_entities"],
        length_range=(s["min_len"], s["max_len"]),
        corruption_rate=s["corruption_rate"],
    )
    if min(s["n_train"], s["n_dev"], s["n_heldout"]) < 1:
        raise ConfigError("n_train, n_dev and n_heldout must all be at least 1")
    data = generate_corpus(spec, s["n_train"] + s["n_dev"] + s["n_heldout"], s["seed"])
    rest, heldout = split_corpus(data, s["n_heldout"])
    train, dev = split_corpus(rest, s["n_dev"])
    out = _new_run_dir(args.out)
    save_task(out / "task.json", spec)
    save_corpus(out / "train_clean.jsonl", train)
    save_corpus(out / "train.jsonl", corrupt_corpus(train, spec, s["seed"]))
    save_corpus(out / "dev.jsonl", dev)
    save_corpus(out / "heldout.jsonl", heldout)
    (out / "config.txt").write_text(cfg.dump_flat(s))
    return f"wrote {len(train)} train / {len(dev)} dev / {len(heldout)} held-out examples to {out}"


def _copy_eval_inputs(corpus_dir: Path, out: Path) -> None:
    shutil.copyfile(corpus_dir / "task.json", out / "task.json")
    shutil.copyfile(corpus_dir / "heldout.jsonl", out / "heldout.jsonl")


def cmd_sft(args, s) -> str:
    _require(s, "corpus")
    corpus_dir = _corpus_dir(s["corpus"])
    task = load_task(corpus_dir / "task.json")
    train, dev = load_corpus(corpus_dir / "train.jsonl"), load_corpus(corpus_dir / "dev.jsonl")
    heldout = load_corpus(corpus_dir / "heldout.jsonl")
    config = SftConfig(
        epochs=s["epochs"], batch_size=s["batch_size"], lr=s["lr"], max_grad_norm=s["max_grad_norm"],
        seed=s["seed"], patience=s["patience"], min_epochs=s["min_epochs"],
    )
    pconf = PolicyConfig(d_model=s["d_model"], hidden=s["hidden"], context=s["context"])
    params = PolicyParams.init(build_vocab(task), pconf, seed=s["seed"])
    out = _new_run_dir(args.out)
    (out / "config.txt").write_text(cfg.dump_flat(s))
    _copy_eval_inputs(corpus_dir, out)
    params, history = train_sft(params, train, config, heldout=dev)
    with open(out / "sft_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "loss", "dev_exact_match"))
        for h in history:
            w.writerow((h.epoch, repr(h.loss), "" if h.heldout_exact_match is None else repr(h.heldout_exact_match)))
    save_checkpoint(out / "checkpoint.npz", params, {"stage": "sft", "epochs": len(history)})
    result = evaluate(params, heldout)
    _write_json(out / "eval.json", result.as_dict())
    return f"sft done after {len(history)} epochs: held-out exact match {result.exact_match:.4f}; run at {out}"


def _make_teacher(s, task, prompts, out: Path):
    if s["teacher"] == "oracle":
        return OracleTeacher(task)
    if s["teacher"] == "fixed":
        refs = paraphrase_references(
            prompts, task, s["paraphrase_seed"], s["paraphrase_token_rate"], s["paraphrase_entity_rate"]
        )
        return FixedTeacher(refs)
    _require(s, "endpoint", "model")
    tconf = TeacherConfig(
        kind="remote", endpoint=s["endpoint"], model=s["model"], api_key_env=s["api_key_env"],
        timeout=s["timeout"], retries=s["retries"], max_concurrency=s["max_concurrency"],
    )
    # a cache given on the command line is copied, never appended to in place
    local = out / "refinements.jsonl"
    if s["cache"]:
        if not Path(s["cache"]).is_file():
            raise CliError(f"refinement cache {s['cache']} not found")
        shutil.copyfile(s["cache"], local)
    cache = RefinementCache(local)
    return RemoteTeacher(tconf, cache=cache)


def cmd_rl(args, s) -> str:
    _require(s, "init", "corpus")
    if s["teacher"] is None:
        s["teacher"] = "fixed" if s["mode"] == "fixed-ref" else "oracle"
    if s["mode"] == "fixed-ref" and s["teacher"] != "fixed":
        raise CliError(f"fixed-ref mode needs --teacher fixed, not {s['teacher']}")
    if s["mode"] == "rlfr" and s["teacher"] == "fixed":
        raise CliError("rlfr mode needs a refining teacher (oracle or remote)")
    if s["teacher"] != "remote" and any(s[k] for k in ("endpoint", "model", "api_key_env")):
        raise CliError("endpoint, model and api_key_env only apply to --teacher remote")
    config = TrainConfig(
        k=s["k"], rollout_batch=s["rollout_batch"], alpha=s["alpha_preset"], beta=s["beta"],
        eps_clip=s["eps_clip"], eps_stat=s["eps_stat"], lr=s["lr"], inner_epochs=s["inner_epochs"],
        iterations=s["iterations"], seed=s["seed"], mode=s["mode"], temperature=s["temperature"],
        max_grad_norm=s["max_grad_norm"], max_drop_rate=s["max_drop_rate"], eval_every=s["eval_every"],
        checkpoint_every=s["checkpoint_every"],
    )
    corpus_dir = _corpus_dir(s["corpus"])
    task = load_task(corpus_dir / "task.json")
    prompts = load_corpus(corpus_dir / "train_clean.jsonl")
    heldout = load_corpus(corpus_dir / "heldout.jsonl")
    init = load_checkpoint(_resolve_checkpoint(s["init"]))
    out = _new_run_dir(args.out)
    (out / "config.txt").write_text(cfg.dump_flat(s))
    _copy_eval_inputs(corpus_dir, out)
    teacher = _make_teacher(s, task, prompts, out)
    scorer = _scorer(s["scorer_url"])
    start = evaluate(init, heldout, scorer)
    _write_json(out / "baseline.json", {
        "init_eval": start.as_dict(),
        "resp_len": baseline_resp_len(init, prompts, config),
    })
    ckpt_dir = out / "checkpoints"
    if config.checkpoint_every:
        ckpt_dir.mkdir()
    params, records = train_rl(
        init, prompts, teacher, config, heldout=heldout, scorer=scorer,
        on_record=MetricsWriter(out), checkpoint_dir=ckpt_dir,
    )
    save_checkpoint(out / "checkpoint.npz", params, {"stage": "rl", "mode": config.mode, "iterations": len(records)})
    result = evaluate(params, heldout, scorer)
    _write_json(out / "eval.json", result.as_dict())
    return (
        f"rl ({config.mode}) done: held-out exact match {start.exact_match:.4f} -> {result.exact_match:.4f}, "
        f"entity accuracy {start.entity_acc} -> {result.entity_acc}; run at {out}"
    )


def cmd_eval(args, s) -> str:
    recorded = None
    if s["run"]:
        if s["checkpoint"] or s["corpus"]:
            raise CliError("use either --run or --checkpoint with --corpus")
        run = Path(s["run"])
        ckpt, corpus_path = _resolve_checkpoint(str(run)), run / "heldout.jsonl"
        if (run / "eval.json").is_file():
            recorded = json.loads((run / "eval.json").read_text())
    else:
        _require(s, "checkpoint", "corpus")
        ckpt, corpus_path = _resolve_checkpoint(s["checkpoint"]), Path(s["corpus"])
    model = load_checkpoint(ckpt)
    result = evaluate(model, load_corpus(corpus_path), _scorer(s["scorer_url"])).as_dict()
    if args.out:
        out = _new_run_dir(args.out)
        (out / "config.txt").write_text(cfg.dump_flat(s))
        _write_json(out / "eval.json", result)
    print(json.dumps(result, sort_keys=True))
    if recorded is not None and recorded != result:
        raise CliError("re-evaluation differs from the recorded eval.json")
    return "matches recorded metrics" if recorded is not None else ""


def cmd_compare(args, s) -> str:
    _require(s, "corpus")
    corpus = load_corpus(s["corpus"])
    checkpoints = []
    for item in args.checkpoint:
        if "=" not in item:
            raise CliError(f"--checkpoint expects NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        checkpoints.append((name, load_checkpoint(_resolve_checkpoint(path))))
    rows = compare(checkpoints, corpus)
    out = _new_run_dir(args.out)
    (out / "config.txt").write_text(cfg.dump_flat({**s, "checkpoint": " ".join(args.checkpoint)}))
    write_comparison(out, rows)
    print(comparison_table(rows), end="")
    return ""


def cmd_plot_data(args, s) -> str:
    _require(s, "run")
    records = read_metrics(Path(s["run"]) / "metrics.jsonl")
    if not records:
        raise CliError(f"{s['run']} has no metrics records")
    out = _new_run_dir(args.out)
    (out / "config.txt").write_text(cfg.dump_flat(s))
    with open(out / "dynamics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DYNAMICS_COLUMNS)
        for r in records:
            w.writerow((r.iteration, repr(r.mean_reward), repr(r.mean_resp_len), repr(r.rollout_adequacy)))
    return f"wrote {len(records)} steps to {out / 'dynamics.csv'}"


HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "sft": cmd_sft,
    "rl": cmd_rl,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "plot-data": cmd_plot_data,
}


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    options = COMMANDS[args.command][0]
    t0 = time.monotonic()
    try:
        settings = _settings(args, options)
        msg = HANDLERS[args.command](args, settings)
    except (CliError, ValueError, TrainingAborted, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if msg:
        print(msg)
    log.info("%s finished in %.1fs", args.command, time.monotonic() - t0)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
