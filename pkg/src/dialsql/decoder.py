"""Grammar-constrained decoding.

The decoder expands one nonterminal per step. Its output distribution
ranges over the frontier's legal productions, optionally mixed with
copies of actions or whole subtrees from the previous turn's query.

Functions here take the assembled model bundle (parameter dict plus
config and vocabulary) rather than owning parameters, so the same code
drives every method configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import (
    QuestionEncoding,
    encode_actions,
    encode_name,
    encode_question,
    gate_importances,
    turn_state_init,
    turn_state_update,
)
from .grammar import (
    Derivation,
    DerivationError,
    Grammar,
    GrammarError,
    IncompleteSequenceError,
    NonTerminal,
    Production,
    extract_subtrees,
)
from .nn import ContractError, LSTMCellParams, Tensor, lstm_cell, ops
from .schema import linking_features, name_tokens

__all__ = [
    "FrontierError",
    "AttentionContext",
    "CopyContext",
    "DecoderState",
    "EncodedTurn",
    "OutputDistribution",
    "ParseResult",
    "SubtreeCandidate",
    "ActionEmbedder",
    "attention_context",
    "attend",
    "decode_step",
    "initial_state",
    "advance_state",
    "encode_turn",
    "encode_precedent",
    "output_distribution",
    "greedy_parse",
    "teacher_forced_loss",
]


class FrontierError(GrammarError):
    """No legal candidate exists for the current frontier."""


# ---------------------------------------------------------------------------
# Embeddings


def word_vector(model, token: str) -> Tensor:
    return ops.row(model.params["word_emb"], model.vocab.index(token))


class ActionEmbedder:
    """Production embeddings with per-call caching.

    Schema-agnostic productions index a learned table; schema-specific
    ones (column and table rules) are encoded from their name tokens, so
    unseen schemas need no new parameters.
    """

    def __init__(self, model):
        self.model = model
        self._cache: dict[Production, Tensor] = {}

    def __call__(self, production: Production) -> Tensor:
        hit = self._cache.get(production)
        if hit is not None:
            return hit
        model = self.model
        if production.schema_specific:
            tokens = name_tokens(production.rhs[0])
            cell = _cell(model, "schema_enc")
            emb = encode_name([word_vector(model, t) for t in tokens], cell)
        else:
            emb = ops.row(model.params["action_emb"], model.agnostic_index[production])
        self._cache[production] = emb
        return emb


def _cell(model, prefix: str) -> LSTMCellParams:
    p = model.params
    return LSTMCellParams(p[f"{prefix}.w_ih"], p[f"{prefix}.w_hh"], p[f"{prefix}.b"])


# ---------------------------------------------------------------------------
# Attention


@dataclass
class AttentionContext:
    """Attendable memory over one or more encoded questions."""

    memory: Tensor                 # rows: encoder state, distance-augmented if used
    tokens: list[str]              # aligned with memory rows, for linking scores
    gate_coeffs: Tensor | None = None  # per-row coefficients, constant within a question


def attention_context(segment_states: list[list[Tensor]], tokens: list[str],
                      distances: list[int] | None = None,
                      distance_table: Tensor | None = None,
                      gate_weights: Tensor | None = None) -> AttentionContext:
    """Assemble the attention memory from per-question state lists.

    With a distance table, each row becomes [state; distance_embedding]
    using that question's relative distance. Gate weights (one per
    question) are expanded to one coefficient per row.
    """
    if not segment_states or not any(segment_states):
        raise ContractError("attention needs at least one encoder state")
    rows: list[Tensor] = []
    for seg_idx, states in enumerate(segment_states):
        if distance_table is not None:
            d = ops.row(distance_table, distances[seg_idx])
            rows.extend(ops.concat([s, d]) for s in states)
        else:
            rows.extend(states)
    memory = ops.stack_rows(rows)
    if len(tokens) != memory.shape[0]:
        raise ContractError("token list must align with attention rows")
    coeffs = None
    if gate_weights is not None:
        counts = [len(s) for s in segment_states]
        coeffs = ops.expand_by_counts(gate_weights, counts)
    return AttentionContext(memory, tokens, coeffs)


def attend(ctx: AttentionContext, dec_state: Tensor, w_e: Tensor) -> tuple[Tensor, Tensor]:
    """Bilinear attention; returns (weights, context vector).

    Gate coefficients, when present, scale the softmax weights and the
    result is renormalized.
    """
    if w_e.shape != (ctx.memory.shape[1], dec_state.shape[0]):
        raise ContractError(
            f"attention matrix {w_e.shape} does not bridge memory width "
            f"{ctx.memory.shape[1]} and decoder dim {dec_state.shape[0]}")
    scores = ops.matmul(ctx.memory, ops.matmul(w_e, dec_state))
    a = ops.softmax(scores)
    if ctx.gate_coeffs is not None:
        weighted = ops.mul(a, ctx.gate_coeffs)
        a = ops.div_by(weighted, ops.reduce_sum(weighted))
    c = ops.matmul(ops.transpose(ctx.memory), a)
    return a, c


# ---------------------------------------------------------------------------
# Per-turn encoding


@dataclass
class CopyContext:
    """The previous turn's query, prepared for copying."""

    actions: tuple[Production, ...]
    states: Tensor | None                    # per-action encoder states, one row each
    subtrees: list[tuple[NonTerminal, tuple[Production, ...], Tensor]]

    @property
    def empty(self) -> bool:
        return not self.actions


EMPTY_COPY_CONTEXT = CopyContext((), None, [])


@dataclass
class EncodedTurn:
    attention: AttentionContext
    init_state: Tensor             # decoder hidden initialization
    copy: CopyContext


def encode_precedent(model, actions: tuple[Production, ...],
                     embedder: ActionEmbedder,
                     with_subtrees: bool) -> CopyContext:
    """Encode the previous turn's action sequence for copy mechanisms."""
    if not actions:
        return EMPTY_COPY_CONTEXT
    fwd = _cell(model, "sql_enc.fwd")
    bwd = _cell(model, "sql_enc.bwd")
    encoded = encode_actions([embedder(a) for a in actions], fwd, bwd)
    states = ops.stack_rows(encoded.states)
    subtrees = []
    if with_subtrees:
        for root, seq in extract_subtrees(list(actions)):
            phi = encode_actions([embedder(a) for a in seq], fwd, bwd).final_state
            subtrees.append((root, seq, phi))
    return CopyContext(tuple(actions), states, subtrees)


def encode_turn(model, segments: list[list[str]], distances: list[int],
                precedent: tuple[Production, ...] | None,
                embedder: ActionEmbedder | None = None) -> EncodedTurn:
    """Encode the attention window and precedent query for one turn.

    ``segments`` lists token sequences oldest-first, the current
    question last; ``distances`` gives each segment's turn offset from
    the current one (0 for the current question).
    """
    if embedder is None:
        embedder = ActionEmbedder(model)
    config = model.config
    if len(segments) != len(distances):
        raise ContractError("one distance per question segment")
    fwd = _cell(model, "q_enc.fwd")
    bwd = _cell(model, "q_enc.bwd")

    encodings: list[QuestionEncoding] = []
    if config.question_method == "turn":
        turn_cell = _cell(model, "turn_enc")
        state = turn_state_init(turn_cell.hidden_size)
        for tokens in segments:
            enc = encode_question([word_vector(model, t) for t in tokens], fwd, bwd,
                                  turn_vec=state.h)
            encodings.append(enc)
            state = turn_state_update(enc.question_vector, state, turn_cell)
    else:
        for tokens in segments:
            encodings.append(encode_question([word_vector(model, t) for t in tokens],
                                             fwd, bwd))

    gate_weights = None
    if config.question_method == "gate" and len(encodings) > 1:
        gate_weights = gate_importances(
            [e.question_vector for e in encodings],
            encodings[-1].question_vector,
            model.params["gate.u"], model.params["gate.w"], model.params["gate.v"])

    dist_table = model.params.get("dist_emb") if config.question_method == "turn" else None
    flat_tokens = [t for seg in segments for t in seg]
    ctx = attention_context([e.states for e in encodings], flat_tokens,
                            distances=distances, distance_table=dist_table,
                            gate_weights=gate_weights)

    copy_ctx = EMPTY_COPY_CONTEXT
    if config.sql_methods and precedent:
        copy_ctx = encode_precedent(model, tuple(precedent), embedder,
                                    with_subtrees="tree_copy" in config.sql_methods)
    return EncodedTurn(ctx, encodings[-1].final_state, copy_ctx)


# ---------------------------------------------------------------------------
# Decoder state


@dataclass
class DecoderState:
    h: Tensor
    cell: Tensor
    context: Tensor                 # attention context from the previous step
    sql_context: Tensor | None      # previous step's precedent-query context


def initial_state(model, encoded: EncodedTurn) -> DecoderState:
    """Hidden state starts at the final encoder state; contexts at zero."""
    hidden = model.config.hidden_dim
    context = Tensor(np.zeros(encoded.attention.memory.shape[1]))
    sql_context = None
    if "sql_attn" in model.config.sql_methods:
        sql_context = Tensor(np.zeros(hidden))
    return DecoderState(encoded.init_state, Tensor(np.zeros(hidden)), context, sql_context)


def decode_step(prev_action_embed: Tensor, prev_context: Tensor,
                state: DecoderState, cell: LSTMCellParams,
                sql_context: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """One LSTM step on [previous action; previous context(s)]."""
    parts = [prev_action_embed, prev_context]
    if sql_context is not None:
        parts.append(sql_context)
    x = ops.concat(parts)
    return lstm_cell(cell, x, state.h, state.cell)


def advance_state(model, encoded: EncodedTurn, state: DecoderState,
                  prev_embed: Tensor) -> tuple[DecoderState, Tensor]:
    """LSTM update then attention; returns the new state and the
    question-attention weights (reused by linking scores)."""
    h, cell_state = decode_step(prev_embed, state.context, state,
                                _cell(model, "dec"), state.sql_context)
    a, c = attend(encoded.attention, h, model.params["attn.we"])
    sql_c = state.sql_context
    if sql_c is not None and encoded.copy.states is not None:
        sql_ctx = AttentionContext(encoded.copy.states,
                                   [""] * encoded.copy.states.shape[0])
        _, sql_c = attend(sql_ctx, h, model.params["sql_attn.we"])
    return DecoderState(h, cell_state, c, sql_c), a


# ---------------------------------------------------------------------------
# Output distribution


@dataclass
class SubtreeCandidate:
    root: NonTerminal
    actions: tuple[Production, ...]


@dataclass
class OutputDistribution:
    """Probabilities over every legal candidate at one step."""

    support: list                  # Production and SubtreeCandidate entries
    probs: Tensor
    gen_probs: Tensor
    copy_probs: Tensor | None
    p_copy: Tensor | None

    def index_of(self, production: Production) -> int | None:
        for k, cand in enumerate(self.support):
            if isinstance(cand, Production) and cand == production:
                return k
        return None


def _generation_logits(model, frontier: NonTerminal, productions: list[Production],
                       h: Tensor, c: Tensor, a: Tensor,
                       tokens: list[str], embedder: ActionEmbedder) -> Tensor:
    if productions[0].schema_specific:
        exact = np.zeros((len(tokens), len(productions)))
        partial = np.zeros_like(exact)
        for i, tok in enumerate(tokens):
            for j, prod in enumerate(productions):
                exact[i, j], partial[i, j] = linking_features(tok, prod.rhs[0])
        rule_embs = ops.stack_rows([embedder(p) for p in productions])
        tok_embs = ops.take_rows(model.params["word_emb"],
                                 [model.vocab.index(t) for t in tokens])
        link = ops.add(
            ops.add(ops.scale_by(Tensor(exact), model.params["link.w_exact"]),
                    ops.scale_by(Tensor(partial), model.params["link.w_partial"])),
            ops.matmul(tok_embs, ops.transpose(rule_embs)))
        return ops.matmul(a, link)
    proj = ops.tanh(ops.matmul(ops.concat([h, c]), model.params["out.wo"]))
    cand = ops.take_rows(model.params["action_emb"],
                         [model.agnostic_index[p] for p in productions])
    return ops.matmul(cand, proj)


def output_distribution(model, grammar: Grammar, frontier: NonTerminal,
                        state: DecoderState, a: Tensor,
                        encoded: EncodedTurn,
                        embedder: ActionEmbedder) -> OutputDistribution:
    """Distribution over the frontier's productions plus any copyable
    subtrees, mixed with the action-copy distribution when enabled."""
    productions = grammar.expansions(frontier)
    if not productions:
        raise FrontierError(f"no production expands {frontier}")

    config = model.config
    copy_ctx = encoded.copy
    support: list = list(productions)
    logits = _generation_logits(model, frontier, productions, state.h, state.context,
                                a, encoded.attention.tokens, embedder)

    if "tree_copy" in config.sql_methods and copy_ctx.subtrees:
        tree_rows = [(seq, phi) for root, seq, phi in copy_ctx.subtrees
                     if root == frontier]
        if tree_rows:
            support.extend(SubtreeCandidate(frontier, seq) for seq, _ in tree_rows)
            v = ops.matmul(state.h, model.params["tree.wt"])
            tree_logits = ops.matmul(ops.stack_rows([phi for _, phi in tree_rows]), v)
            logits = ops.concat([logits, tree_logits])

    gen_probs = ops.softmax(logits)

    copy_probs = None
    p_copy = None
    final = gen_probs
    if "action_copy" in config.sql_methods and not copy_ctx.empty:
        mask = np.array([act.lhs == frontier for act in copy_ctx.actions])
        if mask.any():
            v = ops.matmul(state.h, model.params["copy.wl"])
            pos_scores = ops.matmul(copy_ctx.states, v)
            pos_probs = ops.softmax_masked(pos_scores, mask)
            agg = np.zeros((len(support), len(copy_ctx.actions)))
            for m, act in enumerate(copy_ctx.actions):
                if mask[m]:
                    agg[support.index(act), m] = 1.0
            copy_probs = ops.matmul(Tensor(agg), pos_probs)
            p_copy = ops.sigmoid(ops.add(ops.dot(model.params["copy.wc"], state.h),
                                         model.params["copy.bc"]))
            final = ops.add(ops.scale_by(copy_probs, p_copy),
                            ops.scale_by(gen_probs, ops.affine(p_copy, -1.0, 1.0)))

    return OutputDistribution(support, final, gen_probs, copy_probs, p_copy)


# ---------------------------------------------------------------------------
# Greedy inference and training loss


@dataclass
class ParseResult:
    actions: tuple[Production, ...]
    complete: bool                 # frontier emptied before hitting max_steps
    steps: int                     # distribution evaluations performed


def greedy_parse(model, encoded: EncodedTurn, grammar: Grammar,
                 max_steps: int = 200,
                 embedder: ActionEmbedder | None = None) -> ParseResult:
    """Argmax decoding; ties go to the lowest candidate index.

    A chosen subtree appends its whole action sequence in one step.
    """
    if max_steps < 1:
        raise ContractError("max_steps must be positive")
    if embedder is None:
        embedder = ActionEmbedder(model)
    deriv = Derivation(grammar)
    state = initial_state(model, encoded)
    prev = model.params["bos_emb"]
    steps = 0
    while not deriv.is_complete and len(deriv.actions) < max_steps:
        state, a = advance_state(model, encoded, state, prev)
        dist = output_distribution(model, grammar, deriv.frontier(), state, a,
                                   encoded, embedder)
        chosen = dist.support[int(np.argmax(dist.probs.values))]
        if isinstance(chosen, SubtreeCandidate):
            deriv.apply_sequence(list(chosen.actions))
            prev = embedder(chosen.actions[-1])
        else:
            deriv.apply(chosen)
            prev = embedder(chosen)
        steps += 1
    return ParseResult(tuple(deriv.actions), deriv.is_complete, steps)


def teacher_forced_loss(model, encoded: EncodedTurn, grammar: Grammar,
                        gold: list[Production],
                        embedder: ActionEmbedder | None = None) -> Tensor:
    """Sum of -log P(gold action), feeding gold actions back in."""
    if embedder is None:
        embedder = ActionEmbedder(model)
    deriv = Derivation(grammar)
    state = initial_state(model, encoded)
    prev = model.params["bos_emb"]
    total: Tensor | None = None
    for step, action in enumerate(gold, start=1):
        if deriv.is_complete:
            raise DerivationError("derivation already complete", step=step)
        state, a = advance_state(model, encoded, state, prev)
        dist = output_distribution(model, grammar, deriv.frontier(), state, a,
                                   encoded, embedder)
        idx = dist.index_of(action)
        if idx is None:
            raise DerivationError(f"gold action {action} is illegal here", step=step)
        nll = ops.neg(ops.log(ops.pick(dist.probs, idx)))
        total = nll if total is None else ops.add(total, nll)
        deriv.apply(action)
        prev = embedder(action)
    if not deriv.is_complete:
        raise IncompleteSequenceError("gold sequence leaves the derivation open")
    return total
