"""Scikit-learn style estimator wrapping model building, training, and
sequential per-dialogue prediction."""

from __future__ import annotations

import logging
import time

import numpy as np

from .context import (
    SQL_METHODS,
    ModelBundle,
    build_model,
    config_hash,
    load_checkpoint,
    method_config,
    prepare_inputs,
    save_checkpoint,
)
from .data import Corpus, build_vocab, load_embeddings
from .decoder import encode_turn, greedy_parse, teacher_forced_loss
from .evaluation import compute_metrics
from .grammar import AST, Grammar, actions_to_ast, build_grammar
from .nn import Adam, ContractError, Tape, clip_global_norm, ops

logger = logging.getLogger(__name__)

__all__ = ["SqlParser", "predict_corpus"]


def _grammars(corpus: Corpus) -> dict[str, Grammar]:
    return {db_id: build_grammar(schema) for db_id, schema in corpus.schemas.items()}


def predict_corpus(model: ModelBundle, corpus: Corpus,
                   gold_previous_sql: bool = False,
                   max_steps: int = 200) -> dict[tuple[str, int], AST | None]:
    """Greedy-decode every turn, dialogues in order, turns sequentially.

    The precedent query fed to copy mechanisms is the model's own
    previous prediction unless ``gold_previous_sql`` asks for teacher
    forcing. Incomplete decodes yield None (scored as wrong).
    """
    grammars = _grammars(corpus)
    out: dict[tuple[str, int], AST | None] = {}
    for dialogue in corpus.dialogues:
        grammar = grammars[dialogue.db_id]
        own: dict[int, tuple | None] = {}
        for ex in dialogue.turns:
            inputs = prepare_inputs(dialogue, ex.turn_index, model.config,
                                    gold_mode=gold_previous_sql, predictions=own)
            encoded = encode_turn(model, inputs.segments, inputs.distances,
                                  inputs.precedent)
            result = greedy_parse(model, encoded, grammar, max_steps=max_steps)
            own[ex.turn_index] = result.actions if result.complete else None
            out[ex.key()] = (actions_to_ast(list(result.actions), grammar)
                             if result.complete else None)
    return out


class SqlParser:
    """Context-dependent text-to-SQL parser with a fit/predict surface.

    Constructor arguments are stored verbatim (get_params/set_params
    compatible); fitted state lives in ``model_`` and ``history_``.
    """

    _PARAM_NAMES = ("method", "h", "embedding_dim", "hidden_dim", "distance_dim",
                    "lr", "epochs", "batch_size", "clip_norm", "seed", "max_steps",
                    "min_freq", "embeddings", "target_ques_match", "eval_every")

    def __init__(self, method: str = "none", h: int = 5,
                 embedding_dim: int = 100, hidden_dim: int = 200,
                 distance_dim: int = 100, lr: float = 1e-3, epochs: int = 50,
                 batch_size: int = 16, clip_norm: float = 5.0, seed: int = 0,
                 max_steps: int = 200, min_freq: int = 1,
                 embeddings: str | None = None,
                 target_ques_match: float | None = None, eval_every: int = 1):
        self.method = method
        self.h = h
        self.embedding_dim = embedding_dim
        self.hidden_dim = hidden_dim
        self.distance_dim = distance_dim
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.seed = seed
        self.max_steps = max_steps
        self.min_freq = min_freq
        self.embeddings = embeddings
        self.target_ques_match = target_ques_match
        self.eval_every = eval_every

    # -- sklearn-style parameter plumbing ---------------------------------

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._PARAM_NAMES}

    def set_params(self, **params) -> "SqlParser":
        for name, value in params.items():
            if name not in self._PARAM_NAMES:
                raise ContractError(f"unknown parameter {name!r}")
            setattr(self, name, value)
        return self

    # -- fitting -----------------------------------------------------------

    def _config(self):
        return method_config(self.method, h=self.h,
                             dims={"embedding": self.embedding_dim,
                                   "hidden": self.hidden_dim,
                                   "distance": self.distance_dim})

    def fit(self, corpus: Corpus) -> "SqlParser":
        """Teacher-forced training with Adam and global-norm clipping."""
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        config = self._config()
        vocab = build_vocab(corpus, min_freq=self.min_freq)
        model = build_model(config, vocab, self.seed)
        if self.embeddings:
            coverage = load_embeddings(self.embeddings, vocab,
                                       model.params["word_emb"].values)
            logger.info("pretrained embeddings cover %.1f%% of the vocabulary",
                        100.0 * coverage)
        grammars = _grammars(corpus)
        items = [(d, ex) for d in corpus.dialogues for ex in d.turns if ex.supported]
        if not items:
            raise ContractError("corpus has no supported examples to train on")

        rng = np.random.default_rng(self.seed)
        optimizer = Adam(model.parameters(), lr=self.lr)
        history: list[dict] = []
        logger.info("training %s (config %s) on %d examples",
                    self.method, config_hash(config), len(items))
        for epoch in range(1, self.epochs + 1):
            started = time.perf_counter()
            order = rng.permutation(len(items))
            epoch_loss = 0.0
            for lo in range(0, len(order), self.batch_size):
                batch = [items[i] for i in order[lo:lo + self.batch_size]]
                optimizer.zero_grad()
                with Tape() as tape:
                    total = None
                    for dialogue, ex in batch:
                        inputs = prepare_inputs(dialogue, ex.turn_index, config)
                        encoded = encode_turn(model, inputs.segments,
                                              inputs.distances, inputs.precedent)
                        loss = teacher_forced_loss(model, encoded,
                                                   grammars[dialogue.db_id],
                                                   list(ex.gold_actions))
                        total = loss if total is None else ops.add(total, loss)
                    tape.backward(ops.affine(total, 1.0 / len(batch)))
                clip_global_norm(model.parameters(), self.clip_norm)
                optimizer.step()
                epoch_loss += float(total.values)
            row = {"epoch": epoch, "loss": epoch_loss / len(items),
                   "seconds": time.perf_counter() - started}
            if self.target_ques_match is not None and epoch % self.eval_every == 0:
                self.model_ = model
                row["ques_match"] = self.score(corpus, gold_previous_sql=True)
            history.append(row)
            logger.info("epoch %d loss %.4f%s", epoch, row["loss"],
                        f" ques_match {row['ques_match']:.3f}"
                        if "ques_match" in row else "")
            if (self.target_ques_match is not None
                    and row.get("ques_match", -1.0) >= self.target_ques_match):
                break
        self.model_ = model
        self.history_ = history
        return self

    # -- inference ----------------------------------------------------------

    def _fitted(self) -> ModelBundle:
        model = getattr(self, "model_", None)
        if model is None:
            raise ContractError("parser is not fitted; call fit() or load()")
        return model

    def predict(self, corpus: Corpus,
                gold_previous_sql: bool = False) -> dict[tuple[str, int], AST | None]:
        return predict_corpus(self._fitted(), corpus,
                              gold_previous_sql=gold_previous_sql,
                              max_steps=self.max_steps)

    def score(self, corpus: Corpus, gold_previous_sql: bool = False) -> float:
        """Question-level exact set match accuracy."""
        report = compute_metrics(self.predict(corpus, gold_previous_sql), corpus)
        return report.ques_match.fraction

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(self._fitted(), path)

    @classmethod
    def load(cls, path) -> "SqlParser":
        model = load_checkpoint(path)
        config = model.config
        dims = dict(config.dims)
        parts = ([config.question_method] if config.question_method != "none"
                 else [])
        parts += [m for m in SQL_METHODS if m in config.sql_methods]
        parser = cls(
            method="+".join(parts) or "none",
            h=config.h,
            embedding_dim=dims["embedding"],
            hidden_dim=dims["hidden"],
            distance_dim=dims["distance"],
        )
        parser.model_ = model
        parser.history_ = []
        return parser
