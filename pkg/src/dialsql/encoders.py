"""Recurrent encoders feeding the decoder.

All functions take already-embedded inputs (lists of vectors) so the
embedding lookup policy stays with the model. Question and action
encoders are bidirectional; the turn-level and schema-name encoders run
one direction only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ContractError, LSTMCellParams, Tensor, lstm_cell, ops, run_bilstm, softmax

__all__ = [
    "QuestionEncoding",
    "SqlEncoding",
    "encode_question",
    "encode_actions",
    "encode_name",
    "TurnState",
    "turn_state_init",
    "turn_state_update",
    "gate_importances",
]


@dataclass
class QuestionEncoding:
    """Per-token states plus the two summary vectors the model needs."""

    states: list[Tensor]          # per token: [forward; backward]
    question_vector: Tensor       # [backward at first token; forward at last]
    final_state: Tensor           # state at the last token, initializes the decoder


@dataclass
class SqlEncoding:
    states: list[Tensor]          # per action: [forward; backward]
    final_state: Tensor           # [forward at last; backward at first]


def _bi_states(fwd: LSTMCellParams, bwd: LSTMCellParams,
               inputs: list[Tensor]) -> tuple[list[Tensor], list[Tensor]]:
    if not inputs:
        raise ContractError("encoder needs a non-empty sequence")
    return run_bilstm(fwd, bwd, inputs)


def encode_question(embedded: list[Tensor], fwd: LSTMCellParams,
                    bwd: LSTMCellParams, turn_vec: Tensor | None = None) -> QuestionEncoding:
    """BiLSTM over token embeddings.

    With ``turn_vec`` (the turn-level state), each step's input is the
    embedding concatenated with that vector, in both directions.
    """
    if turn_vec is not None:
        embedded = [ops.concat([e, turn_vec]) for e in embedded]
    f_states, b_states = _bi_states(fwd, bwd, embedded)
    states = [ops.concat([f, b]) for f, b in zip(f_states, b_states)]
    question_vector = ops.concat([b_states[0], f_states[-1]])
    return QuestionEncoding(states, question_vector, states[-1])


def encode_actions(embedded: list[Tensor], fwd: LSTMCellParams,
                   bwd: LSTMCellParams) -> SqlEncoding:
    """BiLSTM over action embeddings.

    ``final_state`` concatenates the two directions' final states and
    doubles as the subtree embedding when the input is one subtree's
    action sequence.
    """
    f_states, b_states = _bi_states(fwd, bwd, embedded)
    states = [ops.concat([f, b]) for f, b in zip(f_states, b_states)]
    return SqlEncoding(states, ops.concat([f_states[-1], b_states[0]]))


def encode_name(embedded: list[Tensor], cell: LSTMCellParams) -> Tensor:
    """Final hidden state of a one-direction LSTM over name tokens."""
    if not embedded:
        raise ContractError("schema name produced no tokens")
    h = Tensor(np.zeros(cell.hidden_size))
    c = Tensor(np.zeros(cell.hidden_size))
    for x in embedded:
        h, c = lstm_cell(cell, x, h, c)
    return h


@dataclass
class TurnState:
    h: Tensor
    c: Tensor


def turn_state_init(hidden_size: int) -> TurnState:
    return TurnState(Tensor(np.zeros(hidden_size)), Tensor(np.zeros(hidden_size)))


def turn_state_update(prev_qvec: Tensor, state: TurnState,
                      cell: LSTMCellParams) -> TurnState:
    """Advance the turn-level encoder by one question vector."""
    if prev_qvec.shape != (cell.input_size,):
        raise ContractError(
            f"turn encoder expects input of dim {cell.input_size}, got {prev_qvec.shape}")
    h, c = lstm_cell(cell, prev_qvec, state.h, state.c)
    return TurnState(h, c)


def gate_importances(history_qvecs: list[Tensor], current_qvec: Tensor,
                     u: Tensor, w: Tensor, v: Tensor) -> Tensor:
    """Softmax importance of each recent question.

    Scores follow g = v . tanh(U q_hist + W q_cur); the history list
    must include the current question itself.
    """
    if not history_qvecs:
        raise ContractError("gate needs at least one question vector")
    anchor = ops.matmul(w, current_qvec)
    scores = [ops.dot(v, ops.tanh(ops.add(ops.matmul(u, q), anchor)))
              for q in history_qvecs]
    return softmax(ops.stack_scalars(scores))
