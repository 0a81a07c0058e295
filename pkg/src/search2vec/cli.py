"""Command-line pipeline: ingest, vocab, train, cold start, match, eval.

One binary with subcommands; every option can also come from a
``key = value`` config file (flags win). All randomized steps take
--seed (default 42), recorded in the training manifest so runs are
reproducible. ``S2V_LOG`` controls log verbosity (DEBUG/INFO/WARNING).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass

from . import coldstart as coldstart_mod
from . import elastic as elastic_mod
from . import evaluation as eval_mod
from .embeddings import VectorSpace, load_vectors, save_table, save_vectors
from .ps import TrainingAborted, run_distributed
from .retrieval import LshIndex, knn_exact, knn_lsh
from .sessions import (
    IngestReport,
    normalize_query,
    read_events,
    read_sessions,
    segment_sessions,
    write_sessions,
)
from .trainer import TrainingConfig, TrainingError, train_embeddings
from .vocab import build_vocabulary, load_vocabulary, save_vocabulary

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    """Every knob of the pipeline; defaults are the published constants."""

    dim: int = 300
    window: int = 5
    negatives: int = 5
    epochs: int = 10
    alpha: float = 0.025
    min_alpha: float = 1e-4
    subsample: float = 1e-5
    min_count: int = 10
    batch_sessions: int = 200
    k: int = 30
    tau: float = 0.65
    tau_c: float = 0.45
    elastic_k: int = 10
    mode: str = "reference"
    shards: int = 4
    clients: int = 1
    transport: str = "memory"
    threads: int = 0
    seed: int = 42
    use_implicit_negatives: bool = True
    negative_sampling: str = "unigram"


def _coerce(value: str, target_type) -> object:
    if target_type is bool:
        lowered = value.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return target_type(value)


def load_config_file(path: str) -> dict[str, str]:
    """``key = value`` lines; # starts a comment."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected 'key = value'")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def build_pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, overridden by the config file, overridden by flags."""
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    unknown = set(file_values) - set(fields)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    resolved = {}
    for name, spec in fields.items():
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            resolved[name] = flag_value
        elif name in file_values:
            resolved[name] = _coerce(file_values[name], type(spec.default))
    return PipelineConfig(**resolved)


def _training_config(config: PipelineConfig) -> TrainingConfig:
    return TrainingConfig(
        dim=config.dim,
        window=config.window,
        negatives=config.negatives,
        epochs=config.epochs,
        alpha=config.alpha,
        min_alpha=config.min_alpha,
        subsample=config.subsample,
        min_count=config.min_count,
        batch_sessions=config.batch_sessions,
        negative_sampling=config.negative_sampling,
        use_implicit_negatives=config.use_implicit_negatives,
        seed=config.seed,
    )


def _load_spaces(vectors_path: str) -> tuple[VectorSpace, VectorSpace, VectorSpace]:
    space = load_vectors(vectors_path)
    return space, space.subspace("q:"), space.subspace("a:")


class CommandError(RuntimeError):
    """User-facing command failure with a diagnostic message."""


# ---------------------------------------------------------------------------
# Subcommands


def cmd_ingest(args: argparse.Namespace, config: PipelineConfig) -> int:
    report = IngestReport()
    with open(args.events, encoding="utf-8") as handle:
        sessions = segment_sessions(read_events(handle, report), report)
    write_sessions(sessions, args.sessions)
    payload = {
        "events": report.events,
        "malformed": report.malformed,
        "sessions": report.sessions,
        "discarded_singletons": report.discarded_singletons,
        "errors": [
            {"line": line, "reason": reason} for line, reason in report.errors[:100]
        ],
    }
    if args.report:
        with open(args.report, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, indent=2, sort_keys=True)
            handle.write("\n")
    print(
        f"ingested {report.events} events -> {report.sessions} sessions "
        f"({report.discarded_singletons} singletons dropped, "
        f"{report.malformed} malformed lines)"
    )
    return 0


def cmd_vocab(args: argparse.Namespace, config: PipelineConfig) -> int:
    sessions = read_sessions(args.sessions)
    vocab = build_vocabulary(sessions, config.min_count)
    save_vocabulary(vocab, args.out)
    print(f"vocabulary: {len(vocab)} tokens (min_count={config.min_count})")
    return 0


def cmd_train(args: argparse.Namespace, config: PipelineConfig) -> int:
    sessions = read_sessions(args.sessions)
    vocab = load_vocabulary(args.vocab) if args.vocab else None
    training = _training_config(config)
    clients = config.clients
    if config.threads > 0:
        clients = min(clients, config.threads)
    try:
        if config.mode == "ps":
            table, vocab, history = run_distributed(
                sessions,
                training,
                n_shards=config.shards,
                n_clients=clients,
                transport=config.transport,
                vocab=vocab,
            )
        elif config.mode == "reference":
            table, vocab, history = train_embeddings(sessions, training, vocab)
        else:
            raise CommandError(f"unknown training mode {config.mode!r}")
    except TrainingAborted as exc:
        if exc.checkpoint is not None:
            save_table(args.out_prefix + ".checkpoint", vocab, exc.checkpoint)
        raise CommandError(
            f"training aborted after epoch {exc.last_completed_epoch}: {exc}"
        ) from exc
    except TrainingError as exc:
        raise CommandError(str(exc)) from exc

    input_path, output_path = save_table(args.out_prefix, vocab, table)
    manifest = {
        "command": "train",
        "config": {
            "mode": config.mode,
            "shards": config.shards if config.mode == "ps" else None,
            "clients": clients if config.mode == "ps" else None,
            **{
                name: getattr(training, name)
                for name in (
                    "dim", "window", "negatives", "epochs", "alpha", "min_alpha",
                    "subsample", "min_count", "batch_sessions",
                    "negative_sampling", "use_implicit_negatives",
                )
            },
        },
        "seed": config.seed,
        "epochs": history,
        "vocabulary_size": len(vocab),
    }
    manifest["config_hash"] = hashlib.sha256(
        json.dumps(manifest["config"], sort_keys=True).encode()
    ).hexdigest()
    with open(args.out_prefix + ".manifest.json", "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    print(
        f"trained {len(vocab)} vectors (d={config.dim}, mode={config.mode}, "
        f"seed={config.seed}) -> {input_path}, {output_path}"
    )
    return 0


def cmd_coldstart_ads(args: argparse.Namespace, config: PipelineConfig) -> int:
    _, queries, _ = _load_spaces(args.vectors)
    creatives, errors = coldstart_mod.read_catalog(args.catalog)
    for line_no, reason in errors:
        logger.warning("catalog line %d skipped: %s", line_no, reason)
    matcher = None
    if args.index:
        matcher = elastic_mod.IndexMatcher(elastic_mod.load_index(args.index), queries)
    vectorizer = coldstart_mod.AnchorPhraseVectorizer(tau_c=config.tau_c).fit(
        queries, matcher
    )
    contents = vectorizer.transform(creatives)
    if not contents:
        raise CommandError("no ad could be cold-started (all anchors unresolvable)")
    save_vectors(
        args.out,
        ["a:" + c.ad_id for c in contents],
        [c.vector for c in contents],
    )
    if args.provenance:
        coldstart_mod.write_provenance(contents, args.provenance)
    print(
        f"cold-started {len(contents)} of {len(creatives)} ads "
        f"(tau_c={config.tau_c}, {len(vectorizer.failures_)} failures)"
    )
    return 0


def _read_head_queries(path: str) -> list[str]:
    with open(path, encoding="utf-8") as handle:
        return [normalize_query(line) for line in handle if line.strip()]


def _read_matches_as_ads(path: str) -> dict[str, list[str]]:
    ads_by_head: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            query, ad = line.rstrip("\n").split("\t")[:2]
            ads_by_head.setdefault(normalize_query(query), []).append(ad)
    return ads_by_head


def cmd_elastic_build(args: argparse.Namespace, config: PipelineConfig) -> int:
    _, queries, _ = _load_spaces(args.vectors)
    heads = _read_head_queries(args.heads) if args.heads else list(queries.tokens)
    ads_by_head = _read_matches_as_ads(args.matches) if args.matches else None
    documents = elastic_mod.build_query_documents(heads, queries, config.elastic_k)
    if not documents:
        raise CommandError("no head query has a vector; nothing to index")
    index = elastic_mod.build_index(documents, ads_by_head, config.elastic_k)
    elastic_mod.save_index(index, args.out)
    if args.dump:
        elastic_mod.dump_index_text(index, args.dump)
    print(
        f"indexed {index.n_docs} head queries "
        f"({len(index.postings)} terms, k={config.elastic_k}) -> {args.out}"
    )
    return 0


def cmd_elastic_match(args: argparse.Namespace, config: PipelineConfig) -> int:
    index = elastic_mod.load_index(args.index)
    matches = elastic_mod.match_tail_query(index, args.query)
    for head, score in matches[: args.top]:
        print(f"{head}\t{score:.6f}")
    if not matches:
        logger.info("no head query shares a term with %r", args.query)
    return 0


def cmd_match(args: argparse.Namespace, config: PipelineConfig) -> int:
    _, queries, ads = _load_spaces(args.vectors)
    if len(ads) == 0:
        raise CommandError("vector file contains no ad vectors")
    index = None
    if args.lsh:
        index = LshIndex(seed=config.seed).build(ads)

    if args.query is not None:
        query_texts = [args.query]
    else:
        with open(args.queries_file, encoding="utf-8") as handle:
            query_texts = [line.strip() for line in handle if line.strip()]

    lines = []
    skipped = 0
    for text in query_texts:
        normalized = normalize_query(text)
        vector = queries.get(normalized)
        if vector is None:
            skipped += 1
            logger.warning("query %r has no vector; skipped", text)
            continue
        if index is not None:
            result = knn_lsh(vector, index, config.k, config.tau, normalized)
        else:
            result = knn_exact(vector, ads, config.k, config.tau, normalized)
        lines.extend(
            f"{normalized}\t{ad}\t{score:.6f}" for ad, score in result.matches
        )
    if args.query is not None and skipped:
        raise CommandError(f"query {args.query!r} has no vector")
    body = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as handle:
            handle.write(body)
        print(f"matched {len(query_texts) - skipped} queries -> {args.out}")
    else:
        sys.stdout.write(body)
    return 0


def cmd_eval(args: argparse.Namespace, config: PipelineConfig) -> int:
    _, queries, ads = _load_spaces(args.vectors)
    pairs = eval_mod.read_judgments(args.judgments)
    content = None
    matcher = None
    if args.mode == "content":
        if not args.content_vectors:
            raise CommandError("--content-vectors is required in content mode")
        content = load_vectors(args.content_vectors).subspace("a:")
    if args.mode == "elastic":
        if not args.index:
            raise CommandError("--index is required in elastic mode")
        matcher = elastic_mod.IndexMatcher(elastic_mod.load_index(args.index), queries)

    scored, coverage = eval_mod.score_dataset(
        pairs, args.mode, queries, ads, content=content, matcher=matcher
    )
    try:
        metric_oauc = eval_mod.oauc(scored)
        metric_ndcg = eval_mod.macro_ndcg(scored)
        curve = eval_mod.ndcg_curve(scored)
    except eval_mod.EvaluationError as exc:
        raise CommandError(f"metrics undefined: {exc}") from exc

    report_lines = [f"mode = {args.mode}"]
    report_lines += [f"{key} = {value}" for key, value in coverage.as_dict().items()]
    report_lines.append(f"oauc = {metric_oauc:.6f}")
    report_lines.append(f"macro_ndcg = {metric_ndcg:.6f}")
    report = "\n".join(report_lines) + "\n"
    if args.report:
        with open(args.report, "w", encoding="utf-8") as handle:
            handle.write(report)
    sys.stdout.write(report)
    if args.curve:
        with open(args.curve, "w", encoding="utf-8") as handle:
            for k, value in curve:
                handle.write(f"{k}\t{value:.6f}\n")
    if args.scored_out:
        with open(args.scored_out, "w", encoding="utf-8") as handle:
            handle.write(eval_mod.format_scored_pairs(scored))
    return 0


def cmd_export_plot(args: argparse.Namespace, config: PipelineConfig) -> int:
    with open(args.scored, encoding="utf-8") as handle:
        pairs = eval_mod.parse_scored_pairs(handle.read())
    if not pairs:
        raise CommandError(f"no scored pairs in {args.scored}")
    table = eval_mod.format_distribution_table(
        eval_mod.grade_score_distribution(pairs)
    )
    with open(args.out, "w", encoding="utf-8") as handle:
        handle.write(table)
    print(f"grade/score distribution -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, help="global random seed (default 42)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="search2vec",
        description="Session embeddings for sponsored-search broad match",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    ingest = commands.add_parser("ingest", help="event log -> session file")
    ingest.add_argument("--events", required=True)
    ingest.add_argument("--sessions", required=True)
    ingest.add_argument("--report")
    _add_common(ingest)
    ingest.set_defaults(handler=cmd_ingest)

    vocab = commands.add_parser("vocab", help="session file -> vocabulary file")
    vocab.add_argument("--sessions", required=True)
    vocab.add_argument("--out", required=True)
    vocab.add_argument("--min-count", dest="min_count", type=int)
    _add_common(vocab)
    vocab.set_defaults(handler=cmd_vocab)

    train = commands.add_parser("train", help="train embeddings")
    train.add_argument("--sessions", required=True)
    train.add_argument("--out-prefix", required=True)
    train.add_argument("--vocab")
    train.add_argument("--mode", choices=["reference", "ps"])
    train.add_argument("--shards", type=int)
    train.add_argument("--clients", type=int)
    train.add_argument("--transport", choices=["memory", "socket"])
    train.add_argument("--threads", type=int)
    train.add_argument("--dim", type=int)
    train.add_argument("--window", type=int)
    train.add_argument("--negatives", type=int)
    train.add_argument("--epochs", type=int)
    train.add_argument("--alpha", type=float)
    train.add_argument("--min-alpha", dest="min_alpha", type=float)
    train.add_argument("--subsample", type=float)
    train.add_argument("--min-count", dest="min_count", type=int)
    train.add_argument("--batch-sessions", dest="batch_sessions", type=int)
    train.add_argument(
        "--uniform-negatives", dest="negative_sampling",
        action="store_const", const="uniform",
    )
    train.add_argument(
        "--no-implicit-negatives", dest="use_implicit_negatives",
        action="store_const", const=False,
    )
    _add_common(train)
    train.set_defaults(handler=cmd_train)

    cold = commands.add_parser("coldstart-ads", help="ad catalog -> content vectors")
    cold.add_argument("--catalog", required=True)
    cold.add_argument("--vectors", required=True)
    cold.add_argument("--out", required=True)
    cold.add_argument("--provenance")
    cold.add_argument("--index", help="elastic index for bid-term fallback")
    cold.add_argument("--tau-c", dest="tau_c", type=float)
    _add_common(cold)
    cold.set_defaults(handler=cmd_coldstart_ads)

    elastic = commands.add_parser("elastic", help="tail-query inverted index")
    elastic_sub = elastic.add_subparsers(dest="elastic_command", required=True)
    build = elastic_sub.add_parser("build")
    build.add_argument("--vectors", required=True)
    build.add_argument("--out", required=True)
    build.add_argument("--heads", help="file of head queries (default: all)")
    build.add_argument("--matches", help="match TSV supplying cached ads per head")
    build.add_argument("--k", dest="elastic_k", type=int)
    build.add_argument("--dump", help="also write a text dump of the index")
    _add_common(build)
    build.set_defaults(handler=cmd_elastic_build)
    match_tail = elastic_sub.add_parser("match")
    match_tail.add_argument("--index", required=True)
    match_tail.add_argument("--query", required=True)
    match_tail.add_argument("--top", type=int, default=10)
    _add_common(match_tail)
    match_tail.set_defaults(handler=cmd_elastic_match)

    match = commands.add_parser("match", help="broad-match ads for queries")
    match.add_argument("--vectors", required=True)
    group = match.add_mutually_exclusive_group(required=True)
    group.add_argument("--query")
    group.add_argument("--queries-file", dest="queries_file")
    match.add_argument("--k", type=int)
    match.add_argument("--tau", type=float)
    match.add_argument("--lsh", action="store_true")
    match.add_argument("--out")
    _add_common(match)
    match.set_defaults(handler=cmd_match)

    evaluate = commands.add_parser("eval", help="score judged pairs and report metrics")
    evaluate.add_argument("--vectors", required=True)
    evaluate.add_argument("--judgments", required=True)
    evaluate.add_argument(
        "--mode", choices=["context", "content", "elastic"], default="context"
    )
    evaluate.add_argument("--content-vectors", dest="content_vectors")
    evaluate.add_argument("--index")
    evaluate.add_argument("--report")
    evaluate.add_argument("--curve")
    evaluate.add_argument("--scored-out", dest="scored_out")
    _add_common(evaluate)
    evaluate.set_defaults(handler=cmd_eval)

    export = commands.add_parser("export-plot", help="grade/score box-plot table")
    export.add_argument("--scored", required=True)
    export.add_argument("--out", required=True)
    _add_common(export)
    export.set_defaults(handler=cmd_export_plot)

    return parser


def _configure_logging() -> None:
    level = os.environ.get("S2V_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        config = build_pipeline_config(args)
        return args.handler(args, config)
    except (CommandError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
