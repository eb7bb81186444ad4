"""
Command-line entry point for personalized re-ranking.
Wires synthetic log generation, ingestion, training, evaluation, re-ranking,
baseline fitting and attention inspection.

Exit codes: 0 success, 1 unexpected failure, 2 usage or validation error,
3 training diverged.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, Optional, Sequence

from core.baselines import BaselineError, TopicModel, fit_ptm
from core.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from core.config import PRESETS, ConfigError, RunConfig, config_from_dict, load_config, preset_model
from core.evaluation import AvgClickMode, EvaluationError, compare_models, full_report, write_query_csv
from core.hrnn import HrnnRanker, ModelParams, ModelVariant, rerank
from core.pipeline import (
    PipelineError, Prepared, evaluate_reranker, hrnn_reranker, load_data, original_reranker,
    pclick_reranker, prepare, ptm_reranker,
)
from core.query_log import QueryLogError, write_log
from core.ranker_training import TrainingDivergedError, TrainingError, train
from core.synthlog import SynthConfigError, write_synthetic
from core.text_repr import TextReprError, build_vocab
from core.utils import (
    check_system_resources, default_thread_count, safe_error_message, sanitize_filename, setup_logging,
    validate_output_dir,
)
from ui.attention_view import attention_dump, render_attention, write_attention
from ui.report_view import render_comparison, write_comparison, write_reports

logger = logging.getLogger("main")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3

BASELINE_MODELS = ("original", "pclick", "ptm")
CHECKPOINT_NAME = "model.ckpt"


class CommandError(Exception):
    """A failure with the exit code the process should end with."""

    def __init__(self, message: str, exit_code: int = EXIT_USAGE):
        super().__init__(message)
        self.exit_code = exit_code


# ---------------------------------------------------------------------------
# argument types
# ---------------------------------------------------------------------------

def probability(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number")
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{value} is not a probability in [0, 1]")
    return value


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value < 1:
        raise argparse.ArgumentTypeError(f"{value} must be >= 1")
    return value


def thread_count(text: str) -> int:
    if text == "auto":
        return default_thread_count()
    return positive_int(text)


def named_path(text: str) -> tuple:
    """NAME=PATH, or PATH with the file stem as the name."""
    if "=" in text:
        name, path = text.split("=", 1)
        if not name:
            raise argparse.ArgumentTypeError(f"empty model name in {text!r}")
        return name, path
    return Path(text).stem, text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; flags override it")
    common.add_argument("--out", help="Output directory (default: out)")
    common.add_argument("--seed", type=int, help="Master seed")
    common.add_argument("--threads", type=thread_count, help="Worker threads, or 'auto' (1 is reproducible)")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR (default: $HRNN_LOG_LEVEL or INFO)")
    common.add_argument("--preset", choices=["full", "desk"], help="Layer widths preset")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--log", help="Click log (JSON-Lines)")
    data.add_argument("--docs", help="Document file (JSON-Lines)")
    data.add_argument("--embeddings", help="word2vec text embedding file")
    data.add_argument("--stopwords", help="Stopword list replacing the bundled one")
    data.add_argument("--segment-sessions", action="store_true", default=None,
                      help="Derive sessions from inactivity gaps when records have no session id")
    data.add_argument("--session-gap", type=positive_int, help="Inactivity gap in seconds (default 1800)")
    data.add_argument("--last-click-scope", choices=["session", "query"])
    data.add_argument("--weighting", choices=["tfidf", "idf", "uniform"])
    data.add_argument("--min-sessions", type=positive_int, help="Drop users with fewer sessions (default 4)")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--checkpoint", help=f"Checkpoint path (default: <out>/{CHECKPOINT_NAME})")

    parser = argparse.ArgumentParser(prog="hrnn-rerank", description="Personalized search re-ranking")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic click log")
    p.add_argument("--users", type=positive_int)
    p.add_argument("--topics", type=positive_int)
    p.add_argument("--repeat-prob", type=probability)
    p.add_argument("--ambiguous-fraction", type=probability)
    p.add_argument("--drift-rate", type=probability)
    p.add_argument("--topics-per-user", type=positive_int)
    p.add_argument("--session-topics", choices=["preference", "blocks"])
    p.add_argument("--no-position-bias", action="store_true", default=None)
    p.add_argument("--binary-relevance", action="store_true", default=None)
    p.add_argument("--prefix", default="synth", help="File name prefix")

    sub.add_parser("ingest", parents=[common, data], help="Ingest, label and split a log")

    p = sub.add_parser("train", parents=[common, data, model], help="Train a ranker")
    p.add_argument("--model", choices=[v.value for v in ModelVariant], help="Model variant (default hrnn-qa)")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=positive_int, help="Maximum epochs (default 20)")
    p.add_argument("--patience", type=positive_int)
    p.add_argument("--pair-cap", type=positive_int)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--delta-positions", choices=["predicted", "original"])
    p.add_argument("--dtype", choices=["float64", "float32"])
    p.add_argument("--no-bias", action="store_true", default=None)
    for width in ("d_e", "d_s1", "d_s2", "d_a", "d_f"):
        p.add_argument(f"--{width.replace('_', '-')}", dest=width, type=positive_int)
    p.add_argument("--resume", action="store_true", help="Continue from the checkpoint's optimizer state")

    p = sub.add_parser("evaluate", parents=[common, data], help="Evaluate baselines and trained models")
    p.add_argument("--checkpoint", action="append", type=named_path, default=[],
                   help="NAME=PATH of a trained model; repeatable")
    p.add_argument("--models", help="Comma-separated subset of models to evaluate")
    p.add_argument("--ptm-model", help="Topic model JSON from the baseline command")
    p.add_argument("--avg-click", choices=["per_query", "per_click"])

    sub.add_parser("rerank", parents=[common, data, model], help="Write personalized rankings for test queries")

    p = sub.add_parser("baseline", parents=[common, data], help="Fit the click store and topic model")
    p.add_argument("--topics", type=positive_int, help="Topic count (default 10)")
    p.add_argument("--iterations", type=positive_int, help="Gibbs sweeps (default 500)")

    p = sub.add_parser("attention", parents=[common, data, model], help="Dump attention weights for one query")
    p.add_argument("--user", required=True)
    p.add_argument("--qid", help="Query id (default: first test query of the user)")
    p.add_argument("--hide-below", action="store_true", help="Hide sessions with weight < 0.01")
    return parser


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _set(obj, **values):
    values = {k: v for k, v in values.items() if v is not None}
    return replace(obj, **values) if values else obj


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """
    Defaults, then the --config file, then explicit flags.

    Raises:
        CommandError: On invalid or unknown settings
    """
    try:
        config = load_config(args.config) if args.config else config_from_dict({})

        def get(name):
            return getattr(args, name, None)

        if get("preset"):
            kept = {k: v for k, v in config.model.to_dict().items() if k not in PRESETS[args.preset]}
            config = replace(config, preset=args.preset, model=preset_model(args.preset, **kept))
        config = _set(
            config,
            out=get("out"), seed=get("seed"), threads=get("threads"),
            log=get("log"), docs=get("docs"), embeddings=get("embeddings"), stopwords=get("stopwords"),
            segment_sessions=get("segment_sessions"), session_gap=get("session_gap"),
            last_click_scope=get("last_click_scope"), weighting=get("weighting"),
            avg_click_mode=get("avg_click"),
        )
        if isinstance(get("checkpoint"), str):
            config = replace(config, checkpoint=args.checkpoint)
        config = replace(config, split=_set(config.split, min_sessions=get("min_sessions")))
        config = replace(config, model=_set(
            config.model, variant=get("model"), dtype=get("dtype"),
            use_bias=False if get("no_bias") else None,
            d_e=get("d_e"), d_s1=get("d_s1"), d_s2=get("d_s2"), d_a=get("d_a"), d_f=get("d_f"),
        ))
        config = replace(config, train=_set(
            config.train, seed=config.seed, lr=get("lr"), max_epochs=get("epochs"), patience=get("patience"),
            pair_cap=get("pair_cap"), optimizer=get("optimizer"), delta_positions=get("delta_positions"),
        ))
        config = replace(config, ptm=_set(config.ptm, n_topics=get("topics") if args.command == "baseline" else None,
                                          iterations=get("iterations")))
        if args.command == "synth":
            config = replace(config, synth=_set(
                config.synth, n_users=get("users"), n_topics=get("topics"), repeat_query_prob=get("repeat_prob"),
                ambiguous_fraction=get("ambiguous_fraction"), drift_rate=get("drift_rate"),
                topics_per_user=get("topics_per_user"), session_topics=get("session_topics"),
                position_bias=False if get("no_position_bias") else None,
                binary_relevance=get("binary_relevance"),
            ))
    except (ConfigError, SynthConfigError, ValueError, TypeError) as e:
        raise CommandError(str(e), EXIT_USAGE)
    return config


def _require_inputs(config: RunConfig):
    for name in ("log", "docs"):
        path = getattr(config, name)
        if not path:
            raise CommandError(f"--{name} is required for this command")
        if not Path(path).is_file():
            raise CommandError(f"--{name} file does not exist: {path}")
    if config.embeddings and not Path(config.embeddings).is_file():
        raise CommandError(f"--embeddings file does not exist: {config.embeddings}")


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# application
# ---------------------------------------------------------------------------

class RerankApp:
    """
    One CLI invocation: a resolved RunConfig plus the subcommand to run.
    """

    def __init__(self, config: RunConfig, args: argparse.Namespace):
        self.config = config
        self.args = args
        self.out = validate_output_dir(config.out)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.config.checkpoint) if self.config.checkpoint else self.out / CHECKPOINT_NAME

    def run(self) -> int:
        handler = getattr(self, f"cmd_{self.args.command}")
        handler()
        return EXIT_OK

    def _prepare(self, encode: bool = True) -> Prepared:
        _require_inputs(self.config)
        return prepare(self.config, encode=encode)

    def _prepare_with_ranker(self) -> tuple:
        """Prepare data at the checkpoint's embedding width and load its ranker."""
        path = self.checkpoint_path
        if not path.is_file():
            raise CommandError(f"Checkpoint does not exist: {path}")
        checkpoint = load_checkpoint(str(path))
        _require_inputs(self.config)
        config = replace(self.config, model=replace(self.config.model, d_e=checkpoint.config.d_e))
        prepared = prepare(config)
        if checkpoint.vocab_hash != prepared.text.vocab.content_hash():
            raise CheckpointError(f"{path}: vocabulary hash does not match the current vocabulary")
        return prepared, HrnnRanker(checkpoint.build_params())

    def cmd_synth(self):
        paths = write_synthetic(str(self.out), self.config.synth, self.config.seed, prefix=self.args.prefix)
        for kind, path in paths.items():
            print(f"{kind}: {path}")

    def cmd_ingest(self):
        _require_inputs(self.config)
        logs, splits, documents = load_data(self.config)
        write_log(logs, str(self.out / "normalized_log.jsonl"))
        vocab = build_vocab((documents[d] for d in sorted(documents)), self.config.min_count)
        vocab.to_tsv(str(self.out / "vocab.tsv"))
        summary = {
            "n_users": len(logs),
            "n_documents": len(documents),
            "vocab_size": len(vocab),
            "vocab_hash": vocab.content_hash(),
            "users": {
                user_id: {
                    "profile": list(s.profile_sessions),
                    "train": list(s.train_sessions),
                    "validation": list(s.validation_sessions),
                    "test": list(s.test_sessions),
                }
                for user_id, s in sorted(splits.items())
            },
        }
        _write_json(self.out / "split_summary.json", summary)
        print(f"Ingested {len(logs)} users into {self.out}")

    def cmd_train(self):
        prepared = self._prepare()
        check_system_resources(str(self.out))
        vocab_hash = prepared.text.vocab.content_hash()
        config = self.config
        resume = {}
        optimizer_state = None
        if self.args.resume:
            if not self.checkpoint_path.is_file():
                raise CommandError(f"--resume needs an existing checkpoint at {self.checkpoint_path}")
            checkpoint = load_checkpoint(str(self.checkpoint_path), expected_vocab_hash=vocab_hash)
            params = checkpoint.build_params()
            optimizer_state = checkpoint.optimizer_state
            extra = checkpoint.extra
            resume = {
                "start_epoch": int(extra.get("epoch", 0)),
                "optimizer_step": int(extra.get("optimizer_step", 0)),
                "best_validation_loss": float(extra.get("best_validation_loss", float("inf"))),
                "epochs_without_improvement": int(extra.get("epochs_without_improvement", 0)),
            }
            logger.info(f"Resuming from epoch {resume['start_epoch']} of {self.checkpoint_path}")
        else:
            params = ModelParams.initialize(config.model, seed=config.seed)
        if params.config.d_e != prepared.text.dim:
            raise CommandError(f"Model expects {params.config.d_e}-dim embeddings, data has {prepared.text.dim}")

        report = train(params, prepared.dataset(), config.train, optimizer_state=optimizer_state, **resume)
        save_checkpoint(
            str(self.checkpoint_path), params, vocab_hash=vocab_hash, seed=config.seed,
            optimizer_state=report.optimizer_state,
            extra={
                "epoch": report.stop_epoch,
                "best_epoch": report.best_epoch,
                "best_validation_loss": report.best_validation_loss,
                "epochs_without_improvement": report.epochs_without_improvement,
                "optimizer_step": report.optimizer_step,
                "train": {k: getattr(v, "value", v) for k, v in vars(config.train).items()},
            },
        )
        data = report.to_dict()
        data["model"] = params.config.to_dict()
        stem = self.checkpoint_path.stem
        _write_json(self.out / f"{stem}_report.json", data)
        _write_json(self.out / f"{stem}_report_timing.json", report.timing())
        print(f"Checkpoint: {self.checkpoint_path} (best epoch {report.best_epoch}, stopped at {report.stop_epoch})")

    def cmd_baseline(self):
        prepared = self._prepare(encode=False)
        prepared.store.to_tsv(str(self.out / "pclick_clicks.tsv"))
        ptm = self.config.ptm
        model = fit_ptm(prepared.logs, prepared.splits, prepared.documents, n_topics=ptm.n_topics,
                        iterations=ptm.iterations, seed=self.config.seed, alpha=ptm.alpha, beta=ptm.beta,
                        lam=ptm.lam, sigma=ptm.sigma, epsilon=ptm.epsilon)
        model.to_json(str(self.out / "ptm_model.json"))
        print(f"Baselines written to {self.out}")

    def _fit_or_load_ptm(self, prepared: Prepared) -> TopicModel:
        if self.args.ptm_model:
            return TopicModel.from_json(self.args.ptm_model)
        ptm = self.config.ptm
        return fit_ptm(prepared.logs, prepared.splits, prepared.documents, n_topics=ptm.n_topics,
                       iterations=ptm.iterations, seed=self.config.seed, alpha=ptm.alpha, beta=ptm.beta,
                       lam=ptm.lam, sigma=ptm.sigma, epsilon=ptm.epsilon)

    def cmd_evaluate(self):
        checkpoints: Dict[str, str] = dict(self.args.checkpoint)
        requested = (
            [m.strip() for m in self.args.models.split(",") if m.strip()]
            if self.args.models else list(BASELINE_MODELS) + list(checkpoints)
        )
        if "original" not in requested:
            requested.insert(0, "original")

        loaded: Dict[str, Checkpoint] = {}
        errors: Dict[str, str] = {}
        for name in requested:
            if name in BASELINE_MODELS:
                continue
            if name not in checkpoints:
                errors[name] = "no checkpoint given (use --checkpoint NAME=PATH)"
                continue
            try:
                loaded[name] = load_checkpoint(checkpoints[name])
            except CheckpointError as e:
                errors[name] = str(e)
        config = self.config
        widths = {c.config.d_e for c in loaded.values()}
        if len(widths) > 1:
            raise CommandError(f"Checkpoints disagree on the embedding width: {sorted(widths)}")
        if widths:
            config = replace(config, model=replace(config.model, d_e=widths.pop()))
        _require_inputs(config)
        prepared = prepare(config)
        vocab_hash = prepared.text.vocab.content_hash()

        mode = AvgClickMode(config.avg_click_mode)
        per_model = {}
        for name in requested:
            if name in errors:
                continue
            try:
                if name == "original":
                    reranker = original_reranker()
                elif name == "pclick":
                    reranker = pclick_reranker(prepared.store)
                elif name == "ptm":
                    reranker = ptm_reranker(self._fit_or_load_ptm(prepared))
                else:
                    checkpoint = loaded[name]
                    if checkpoint.vocab_hash != vocab_hash:
                        raise CheckpointError(f"{checkpoints[name]}: vocabulary hash does not match the data")
                    reranker = hrnn_reranker(HrnnRanker(checkpoint.build_params()), prepared.users)
                per_model[name] = evaluate_reranker(prepared, reranker, threads=config.threads)
            except (CheckpointError, BaselineError, EvaluationError, QueryLogError, ValueError) as e:
                errors[name] = str(e)
        for name, message in errors.items():
            logger.error(f"Model {name} not evaluated: {message}")

        baseline = per_model["original"]
        reports = {name: full_report(results, baseline, mode) for name, results in per_model.items()}
        write_reports(reports, str(self.out))
        for name, results in per_model.items():
            write_query_csv(results, str(self.out / f"queries_{sanitize_filename(name)}.csv"))
        rows = compare_models(per_model, "original", mode)
        write_comparison(rows, str(self.out))
        if errors:
            _write_json(self.out / "errors.json", errors)
        print(render_comparison(rows))
        if errors:
            raise CommandError(f"{len(errors)} model(s) could not be evaluated: {', '.join(errors)}")

    def cmd_rerank(self):
        prepared, ranker = self._prepare_with_ranker()
        path = self.out / "rerank.jsonl"
        count = 0
        with open(path, "w", encoding="utf-8") as f:
            for user_id, s_idx, q_idx in prepared.test_refs():
                user = prepared.users[user_id]
                event = user.sessions[s_idx][q_idx]
                scores = ranker.score_event(user, s_idx, q_idx)
                ranking = rerank(event.doc_ids, scores, event.positions)
                by_doc = dict(zip(event.doc_ids, scores))
                f.write(json.dumps({
                    "user": user_id,
                    "session": user.session_ids[s_idx],
                    "qid": event.query_id,
                    "ranking": ranking,
                    "scores": [round(float(by_doc[d]), 8) for d in ranking],
                }) + "\n")
                count += 1
        print(f"Wrote {count} rankings to {path}")

    def cmd_attention(self):
        prepared, ranker = self._prepare_with_ranker()
        if not ranker.params.config.variant.uses_attention:
            raise CommandError(f"Checkpoint variant {ranker.params.config.variant.value} has no attention")
        user = prepared.users.get(self.args.user)
        if user is None:
            raise CommandError(f"Unknown user {self.args.user!r}")
        s_idx, q_idx = self._locate_query(user, prepared)
        dump = attention_dump(ranker, user, s_idx, q_idx)
        write_attention(dump, str(self.out / f"attention_{sanitize_filename(user.user_id)}.csv"))
        print(render_attention(dump, hide_below_threshold=self.args.hide_below))

    def _locate_query(self, user, prepared: Prepared) -> tuple:
        if self.args.qid:
            for s_idx, session in enumerate(user.sessions):
                for q_idx, event in enumerate(session):
                    if event.query_id == self.args.qid:
                        return s_idx, q_idx
            raise CommandError(f"User {user.user_id} has no query {self.args.qid!r}")
        split = prepared.splits[user.user_id]
        if split.test_sessions:
            return split.test_sessions[0], 0
        return len(user.sessions) - 1, 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        setup_logging(args.log_level)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        config = resolve_config(args)
        return RerankApp(config, args).run()
    except CommandError as e:
        logger.error(str(e))
        return e.exit_code
    except TrainingDivergedError as e:
        logger.error(f"{e}; lower --lr or check the input data")
        return EXIT_DIVERGED
    except (ConfigError, PipelineError, QueryLogError, TextReprError, CheckpointError,
            TrainingError, SynthConfigError, FileNotFoundError, OSError) as e:
        logger.error(safe_error_message(e))
        return EXIT_USAGE
    except Exception as e:
        logger.exception(f"Unexpected failure: {safe_error_message(e)}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
