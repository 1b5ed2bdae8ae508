"""LSTM cells and sequence encoders on top of the tensor tape.

The cell step is fused: one tape entry covers the full gate algebra,
with a hand-derived backward pass. This keeps tapes short for long
dialogues without changing any gradient.
"""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, _active_tape, _out_grad

__all__ = ["LSTMCellParams", "lstm_cell", "run_lstm", "run_bilstm"]


class LSTMCellParams:
    """Weights of one LSTM direction.

    Gate blocks are stacked in i, f, g, o order along the first axis of
    ``w_ih``/``w_hh`` and of ``b``.
    """

    def __init__(self, w_ih: Tensor, w_hh: Tensor, b: Tensor):
        hidden4 = w_ih.shape[0]
        if hidden4 % 4 != 0:
            raise DimensionError(f"gate weight rows must be 4*hidden, got {hidden4}")
        if w_hh.shape != (hidden4, hidden4 // 4) or b.shape != (hidden4,):
            raise DimensionError("inconsistent LSTM parameter shapes")
        self.w_ih = w_ih
        self.w_hh = w_hh
        self.b = b
        self.hidden_size = hidden4 // 4
        self.input_size = w_ih.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.w_ih, self.w_hh, self.b]


def _gate_split(z: np.ndarray, h: int):
    return z[:h], z[h:2 * h], z[2 * h:3 * h], z[3 * h:]


def lstm_cell(params: LSTMCellParams, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step; returns (h', c')."""
    if x.shape != (params.input_size,):
        raise DimensionError(f"lstm_cell: input shape {x.shape}, expected ({params.input_size},)")
    if h.shape != (params.hidden_size,) or c.shape != (params.hidden_size,):
        raise DimensionError("lstm_cell: state shapes do not match hidden size")

    hs = params.hidden_size
    z = params.w_ih.values @ x.values + params.w_hh.values @ h.values + params.b.values
    zi, zf, zg, zo = _gate_split(z, hs)
    i = 1.0 / (1.0 + np.exp(-zi))
    f = 1.0 / (1.0 + np.exp(-zf))
    g = np.tanh(zg)
    o = 1.0 / (1.0 + np.exp(-zo))
    c_new = f * c.values + i * g
    h_new = o * np.tanh(c_new)

    out_h = Tensor(h_new)
    out_c = Tensor(c_new)

    tape = _active_tape()
    inputs = [params.w_ih, params.w_hh, params.b, x, h, c]
    if tape is not None and any(t.requires_grad for t in inputs):
        out_h.requires_grad = True
        out_c.requires_grad = True

        def bwd():
            dh = _out_grad(out_h)
            dc_in = _out_grad(out_c)
            t = np.tanh(c_new)
            do = dh * t
            dc = dc_in + dh * o * (1.0 - t * t)
            di = dc * g
            df = dc * c.values
            dg = dc * i
            dc_prev = dc * f
            dzi = di * i * (1.0 - i)
            dzf = df * f * (1.0 - f)
            dzg = dg * (1.0 - g * g)
            dzo = do * o * (1.0 - o)
            dz = np.concatenate([dzi, dzf, dzg, dzo])
            if params.w_ih.requires_grad:
                params.w_ih.accumulate_grad(np.outer(dz, x.values))
            if params.w_hh.requires_grad:
                params.w_hh.accumulate_grad(np.outer(dz, h.values))
            if params.b.requires_grad:
                params.b.accumulate_grad(dz)
            if x.requires_grad:
                x.accumulate_grad(params.w_ih.values.T @ dz)
            if h.requires_grad:
                h.accumulate_grad(params.w_hh.values.T @ dz)
            if c.requires_grad:
                c.accumulate_grad(dc_prev)

        tape.record([out_h, out_c], inputs, bwd)
    return out_h, out_c


def run_lstm(params: LSTMCellParams, xs: list[Tensor],
             h0: Tensor | None = None, c0: Tensor | None = None) -> list[Tensor]:
    """Run a sequence through one direction; returns hidden states.

    Initial state defaults to zeros. The caller keeps (h, c) threading
    to itself when it needs the final cell state.
    """
    hs = params.hidden_size
    h = h0 if h0 is not None else Tensor(np.zeros(hs))
    c = c0 if c0 is not None else Tensor(np.zeros(hs))
    states = []
    for x in xs:
        h, c = lstm_cell(params, x, h, c)
        states.append(h)
    return states


def run_bilstm(fwd: LSTMCellParams, bwd: LSTMCellParams,
               xs: list[Tensor]) -> tuple[list[Tensor], list[Tensor]]:
    """Run both directions over the sequence from zero states.

    Returns (forward_states, backward_states), both indexed by input
    position, so ``backward_states[0]`` has consumed the whole sequence.
    """
    forward = run_lstm(fwd, xs)
    backward = list(reversed(run_lstm(bwd, list(reversed(xs)))))
    return forward, backward
