"""Command-line surface: train, evaluate, predict, ood-experiment,
synth-data, convert, analyze.

Every command is reproducible from (config file, seed) alone; logs and
checkpoint sidecars embed the configuration hash. Exit codes: 0 on
success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .context import ConfigError, config_hash, load_checkpoint
from .data import Corpus, DataError, gen_synthetic, load_corpus, ood_split, \
    write_dialogues, write_schemas
from .estimator import SqlParser, predict_corpus
from .evaluation import MetricsReport, apply_annotations, compute_metrics, \
    emit_report, load_annotations
from .grammar import GrammarError, ast_to_sql, sql_to_ast
from .nn import ContractError, TensorError, set_precision
from .schema import SchemaError

logger = logging.getLogger(__name__)

_RUNTIME_ERRORS = (ConfigError, ContractError, DataError, GrammarError,
                   SchemaError, TensorError, OSError, ValueError)

# Estimator parameters a --config file or an override flag may set.
_CONFIG_TYPES = {
    "method": str, "h": int, "embedding_dim": int, "hidden_dim": int,
    "distance_dim": int, "lr": (int, float), "epochs": int,
    "batch_size": int, "clip_norm": (int, float), "max_steps": int,
    "min_freq": int, "embeddings": str, "target_ques_match": (int, float),
    "eval_every": int, "seed": int, "precision": int,
}
_CONFIG_KEYS = tuple(_CONFIG_TYPES)
_OPTIONAL_KEYS = ("embeddings", "target_ques_match")


def _usage_error(message: str) -> "SystemExit":
    print(f"usage error: {message}", file=sys.stderr)
    return SystemExit(2)


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the --config file, then explicit flags."""
    merged = {"precision": 64}
    merged.update(SqlParser().get_params())
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as err:
            raise _usage_error(f"cannot read config file: {err}")
        except json.JSONDecodeError as err:
            raise _usage_error(f"{args.config}: invalid JSON: {err.msg}")
        if not isinstance(loaded, dict):
            raise _usage_error(f"{args.config}: expected a JSON object")
        unknown = set(loaded) - set(_CONFIG_KEYS)
        if unknown:
            raise _usage_error(
                f"{args.config}: unknown config keys {sorted(unknown)}")
        for key, value in loaded.items():
            if value is None and key in _OPTIONAL_KEYS:
                continue
            if isinstance(value, bool) or not isinstance(value, _CONFIG_TYPES[key]):
                raise _usage_error(
                    f"{args.config}: {key} must be "
                    f"{getattr(_CONFIG_TYPES[key], '__name__', 'a number')}")
        merged.update(loaded)
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if merged["precision"] not in (32, 64):
        raise _usage_error("precision must be 32 or 64")
    return merged


def _parser_from(settings: dict) -> SqlParser:
    params = {k: v for k, v in settings.items() if k != "precision"}
    return SqlParser(**params)


def _load_data(args: argparse.Namespace) -> Corpus:
    return load_corpus(args.dialogues, args.schemas)


def _write_train_log(path: Path, parser: SqlParser, settings: dict) -> None:
    rows = ["epoch,loss,ques_match"]
    for entry in parser.history_:
        metric = entry.get("ques_match")
        rows.append(f"{entry['epoch']},{entry['loss']!r},"
                    f"{'' if metric is None else repr(metric)}")
    header = (f"# config_hash={config_hash(parser.model_.config)}"
              f" seed={settings['seed']} precision={settings['precision']}")
    path.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")


def _print_report(report: MetricsReport) -> None:
    print(f"ques_match {report.ques_match.fraction:.4f} "
          f"({report.ques_match.matched}/{report.ques_match.total})")
    print(f"int_match  {report.int_match.fraction:.4f} "
          f"({report.int_match.matched}/{report.int_match.total})")
    for turn in sorted(report.turn_match):
        cell = report.turn_match[turn]
        print(f"turn {turn}     {cell.fraction:.4f} ({cell.matched}/{cell.total})")


def _write_reports(report: MetricsReport, prefix: Path) -> list[Path]:
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = [prefix.with_suffix(".csv"), prefix.with_suffix(".json")]
    for fmt, path in zip(("csv", "json"), paths):
        emit_report(report, fmt, path)
    return paths


# ---------------------------------------------------------------------------
# commands


def cmd_train(args: argparse.Namespace) -> int:
    settings = resolve_config(args)
    set_precision(settings["precision"])
    corpus = _load_data(args)
    parser = _parser_from(settings)
    parser.fit(corpus)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    parser.save(out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    _write_train_log(log_path, parser, settings)
    logger.info("wrote checkpoint %s and training log %s", out, log_path)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    settings = resolve_config(args)
    set_precision(settings["precision"])
    corpus = _load_data(args)
    if args.annotations:
        corpus = apply_annotations(corpus, load_annotations(args.annotations))
    model = load_checkpoint(args.checkpoint)
    logger.info("evaluating checkpoint %s (config %s)", args.checkpoint,
                config_hash(model.config))
    predictions = predict_corpus(model, corpus,
                                 gold_previous_sql=args.gold_previous_sql,
                                 max_steps=settings["max_steps"])
    report = compute_metrics(predictions, corpus)
    for path in _write_reports(report, Path(args.out)):
        logger.info("wrote %s", path)
    _print_report(report)
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    settings = resolve_config(args)
    set_precision(settings["precision"])
    corpus = _load_data(args)
    model = load_checkpoint(args.checkpoint)
    predictions = predict_corpus(model, corpus,
                                 gold_previous_sql=args.gold_previous_sql,
                                 max_steps=settings["max_steps"])
    write_predictions(predictions, corpus, args.out)
    logger.info("wrote predictions for %d turns to %s", len(predictions), args.out)
    return 0


def cmd_ood_experiment(args: argparse.Namespace) -> int:
    settings = resolve_config(args)
    set_precision(settings["precision"])
    corpus = _load_data(args)
    train_corpus, eval_corpus = ood_split(corpus)
    logger.info("ood split: %d training examples, %d evaluation dialogues",
                len(train_corpus.supported_examples()), len(eval_corpus.dialogues))
    parser = _parser_from(settings)
    parser.fit(train_corpus)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parser.save(out_dir / "model.ckpt")
    _write_train_log(out_dir / "train.log.csv", parser, settings)
    predictions = parser.predict(eval_corpus,
                                 gold_previous_sql=args.gold_previous_sql)
    write_predictions(predictions, eval_corpus, out_dir / "predictions.tsv")
    report = compute_metrics(predictions, eval_corpus)
    _write_reports(report, out_dir / "report")
    print("turn  match   matched/total")
    for turn in sorted(report.turn_match):
        cell = report.turn_match[turn]
        print(f"{turn:<5} {cell.fraction:<7.4f} {cell.matched}/{cell.total}")
    _print_report(report)
    return 0


def cmd_synth_data(args: argparse.Namespace) -> int:
    settings = resolve_config(args)
    corpus = gen_synthetic(seed=settings["seed"], n_dialogues=args.n_dialogues,
                           max_turns=args.max_turns, share_prob=args.share_prob)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_dialogues(corpus, out_dir / "dialogues.json")
    write_schemas(corpus.schemas, out_dir / "schemas.json")
    logger.info("wrote %d dialogues (%d turns) to %s", len(corpus.dialogues),
                sum(len(d.turns) for d in corpus.dialogues), out_dir)
    return 0


def cmd_convert(args: argparse.Namespace) -> int:
    n_dialogues, n_turns = convert_public(args.dialogues, args.tables,
                                          Path(args.out_dir), args.prefix)
    logger.info("converted %d dialogues (%d turns) into %s",
                n_dialogues, n_turns, args.out_dir)
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    settings = resolve_config(args)
    set_precision(settings["precision"])
    corpus = _load_data(args)
    corpus = apply_annotations(corpus, load_annotations(args.annotations))
    predictions = read_predictions(args.predictions, corpus)
    report = compute_metrics(predictions, corpus)
    for path in _write_reports(report, Path(args.out)):
        logger.info("wrote %s", path)
    print("phenomenon breakdown:")
    for label in sorted(report.per_phenomenon):
        cell = report.per_phenomenon[label]
        print(f"  {label:<28} {cell.fraction:.4f} ({cell.matched}/{cell.total})")
    return 0


# ---------------------------------------------------------------------------
# prediction files


def write_predictions(predictions: dict, corpus: Corpus, path) -> None:
    """TSV of dialogue_id, turn_index, rendered SQL, validity flag.

    The flag is 1 only when the decode completed and the rendered SQL
    re-parses: the grammar derives columns and tables independently, so
    a tree can name a column outside its FROM clause. Such rows keep
    the rendered text for inspection but are flagged 0 (they can never
    match a gold query either way).
    """
    schemas = {d.dialogue_id: corpus.schemas[d.db_id] for d in corpus.dialogues}
    lines = ["dialogue_id\tturn_index\tsql\tvalid"]
    for d in corpus.dialogues:
        for ex in d.turns:
            ast = predictions.get(ex.key())
            sql, valid = "", 0
            if ast is not None:
                sql = ast_to_sql(ast, schemas[d.dialogue_id])
                try:
                    sql_to_ast(sql, schemas[d.dialogue_id])
                    valid = 1
                except GrammarError:
                    valid = 0
            lines.append(f"{d.dialogue_id}\t{ex.turn_index}\t{sql}\t{valid}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_predictions(path, corpus: Corpus) -> dict:
    """Inverse of write_predictions; invalid rows map to None."""
    schemas = {d.dialogue_id: corpus.schemas[d.db_id] for d in corpus.dialogues}
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != "dialogue_id\tturn_index\tsql\tvalid":
        raise DataError(f"{path}: not a prediction file (bad header)")
    out: dict = {}
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path} line {n}: expected 4 tab-separated fields")
        dialogue_id, turn, sql, valid = parts
        if dialogue_id not in schemas:
            raise DataError(f"{path} line {n}: unknown dialogue {dialogue_id!r}")
        if valid not in ("0", "1"):
            raise DataError(f"{path} line {n}: validity flag must be 0 or 1")
        key = (dialogue_id, int(turn))
        if valid == "0":
            out[key] = None
            continue
        try:
            out[key] = sql_to_ast(sql, schemas[dialogue_id])
        except GrammarError as err:
            raise DataError(f"{path} line {n}: unparseable SQL: {err}") from err
    return out


# ---------------------------------------------------------------------------
# public-release conversion


def convert_public(dialogues_path, tables_path, out_dir: Path,
                   prefix: str) -> tuple[int, int]:
    """Reshape a SParC/CoSQL release (interactions + tables.json) into the
    native dialogue and schema JSON files.

    Each interaction entry becomes one dialogue: database_id maps to
    db_id and every interaction item contributes one turn (utterance ->
    question, query -> sql). The goal-oriented "final" entry is dropped;
    it restates the interaction, it is not an extra turn.
    """
    try:
        raw_tables = json.loads(Path(tables_path).read_text(encoding="utf-8"))
        raw_dialogues = json.loads(Path(dialogues_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise DataError(f"invalid JSON at line {err.lineno}: {err.msg}") from err

    schemas = []
    known = set()
    for entry in raw_tables:
        db_id = entry["db_id"]
        tables: list[dict] = [{"name": name, "columns": []}
                              for name in entry["table_names_original"]]
        columns = entry["column_names_original"]
        types = entry["column_types"]
        if len(columns) != len(types):
            raise DataError(f"{db_id}: column_names_original and column_types"
                            " lengths differ")
        for (table_idx, column), kind in zip(columns, types):
            if table_idx == -1:                  # the "*" pseudo-column
                continue
            tables[table_idx]["columns"].append({"name": column, "type": kind})
        qualified = {}
        for (table_idx, column), _ in zip(columns, types):
            qualified[len(qualified)] = (
                None if table_idx == -1
                else f"{entry['table_names_original'][table_idx]}.{column}")
        foreign_keys = []
        for here, there in entry.get("foreign_keys", []):
            if qualified[here] is None or qualified[there] is None:
                raise DataError(f"{db_id}: foreign key references the * column")
            foreign_keys.append([qualified[here], qualified[there]])
        schemas.append({"db_id": db_id, "tables": tables,
                        "foreign_keys": foreign_keys})
        known.add(db_id)

    records = []
    n_turns = 0
    for i, entry in enumerate(raw_dialogues):
        db_id = entry["database_id"]
        if db_id not in known:
            raise DataError(f"dialogue {i}: unknown database_id {db_id!r}")
        turns = []
        for item in entry["interaction"]:
            turns.append({"question": item["utterance"].strip(),
                          "sql": item["query"].strip()})
            n_turns += 1
        if not turns:
            continue
        records.append({"dialogue_id": f"{prefix}-{i:04d}", "db_id": db_id,
                        "turns": turns})

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "dialogues.json").write_text(
        json.dumps(records, indent=2) + "\n", encoding="utf-8")
    (out_dir / "schemas.json").write_text(
        json.dumps(schemas, indent=2) + "\n", encoding="utf-8")
    return len(records), n_turns


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(cmd: argparse.ArgumentParser) -> None:
    cmd.add_argument("--config", help="JSON file of configuration overrides")
    cmd.add_argument("--method", help="context method name")
    cmd.add_argument("--h", type=int, help="recent-question window size")
    cmd.add_argument("--embedding-dim", type=int, dest="embedding_dim")
    cmd.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    cmd.add_argument("--distance-dim", type=int, dest="distance_dim")
    cmd.add_argument("--lr", type=float, help="Adam learning rate")
    cmd.add_argument("--epochs", type=int)
    cmd.add_argument("--batch-size", type=int, dest="batch_size")
    cmd.add_argument("--clip-norm", type=float, dest="clip_norm")
    cmd.add_argument("--max-steps", type=int, dest="max_steps",
                     help="decode step budget per turn")
    cmd.add_argument("--min-freq", type=int, dest="min_freq",
                     help="vocabulary frequency cutoff")
    cmd.add_argument("--embeddings", help="pretrained embedding text file")
    cmd.add_argument("--target-ques-match", type=float, dest="target_ques_match",
                     help="stop early once training accuracy reaches this")
    cmd.add_argument("--eval-every", type=int, dest="eval_every")
    cmd.add_argument("--seed", type=int)
    cmd.add_argument("--precision", type=int, choices=(32, 64))


def _add_data_flags(cmd: argparse.ArgumentParser) -> None:
    cmd.add_argument("--dialogues", required=True, help="dialogue JSON file")
    cmd.add_argument("--schemas", required=True, help="schema JSON file")


def build_arg_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="dialsql",
                                  description=__doc__.split("\n")[0])
    sub = top.add_subparsers(dest="command", required=True)

    cmd = sub.add_parser("train", help="fit a model and write a checkpoint")
    _add_data_flags(cmd)
    _add_config_flags(cmd)
    cmd.add_argument("--out", required=True, help="checkpoint path")
    cmd.add_argument("--log", help="per-epoch CSV log path "
                                   "(default: checkpoint with .log.csv)")
    cmd.set_defaults(run=cmd_train)

    cmd = sub.add_parser("evaluate", help="score a checkpoint on a corpus")
    _add_data_flags(cmd)
    _add_config_flags(cmd)
    cmd.add_argument("--checkpoint", required=True)
    cmd.add_argument("--out", required=True,
                     help="report path prefix (.csv and .json are written)")
    cmd.add_argument("--annotations", help="phenomenon annotation JSON")
    cmd.add_argument("--gold-previous-sql", action="store_true",
                     help="feed gold previous queries instead of predictions")
    cmd.set_defaults(run=cmd_evaluate)

    cmd = sub.add_parser("predict", help="write per-turn predictions as TSV")
    _add_data_flags(cmd)
    _add_config_flags(cmd)
    cmd.add_argument("--checkpoint", required=True)
    cmd.add_argument("--out", required=True, help="prediction TSV path")
    cmd.add_argument("--gold-previous-sql", action="store_true")
    cmd.set_defaults(run=cmd_predict)

    cmd = sub.add_parser("ood-experiment",
                         help="train on turns 1-2, evaluate on turns 3+")
    _add_data_flags(cmd)
    _add_config_flags(cmd)
    cmd.add_argument("--out-dir", required=True, dest="out_dir")
    cmd.add_argument("--gold-previous-sql", action="store_true")
    cmd.set_defaults(run=cmd_ood_experiment)

    cmd = sub.add_parser("synth-data", help="generate a synthetic corpus")
    cmd.add_argument("--out-dir", required=True, dest="out_dir")
    cmd.add_argument("--n-dialogues", type=int, default=20, dest="n_dialogues")
    cmd.add_argument("--max-turns", type=int, default=4, dest="max_turns")
    cmd.add_argument("--share-prob", type=float, default=0.5, dest="share_prob")
    cmd.add_argument("--config")
    cmd.add_argument("--seed", type=int)
    cmd.add_argument("--precision", type=int, choices=(32, 64))
    cmd.set_defaults(run=cmd_synth_data)

    cmd = sub.add_parser("convert",
                         help="reshape a public SParC/CoSQL release into "
                              "native dialogue and schema files")
    cmd.add_argument("--dialogues", required=True,
                     help="public interaction JSON (e.g. train.json)")
    cmd.add_argument("--tables", required=True, help="public tables.json")
    cmd.add_argument("--out-dir", required=True, dest="out_dir")
    cmd.add_argument("--prefix", default="dlg",
                     help="dialogue_id prefix for converted records")
    cmd.set_defaults(run=cmd_convert)

    cmd = sub.add_parser("analyze",
                         help="per-phenomenon breakdown of a prediction file")
    _add_data_flags(cmd)
    _add_config_flags(cmd)
    cmd.add_argument("--predictions", required=True, help="prediction TSV")
    cmd.add_argument("--annotations", required=True,
                     help="phenomenon annotation JSON")
    cmd.add_argument("--out", required=True, help="report path prefix")
    cmd.set_defaults(run=cmd_analyze)
    return top


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_arg_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.run(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except _RUNTIME_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
