"""The two recurrence primitives: a language LSTM cell and the convolutional
multimodal LSTM that applies the same cell at every grid location via a 1x1
convolution.

Gate blocks are ordered (input, forget, output, candidate) along the rows of
the weight matrix and stay in that order everywhere, including checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class LstmParams:
    """Gate weights M of shape (4n, d_in + n) plus a 4n bias vector."""

    M: Tensor
    bias: Tensor
    n: int
    d_in: int

    def __post_init__(self):
        if self.M.shape != (4 * self.n, self.d_in + self.n):
            raise ShapeError(f"M shape {self.M.shape} != (4*{self.n}, {self.d_in}+{self.n})")
        if self.bias.shape != (4 * self.n,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({4 * self.n},)")

    @classmethod
    def init(cls, d_in: int, n: int, rng: np.random.Generator) -> "LstmParams":
        """Uniform [-s, s] weights with s = 1/sqrt(d_in + n); zero bias except
        the forget-gate block, which starts at 1.0 to ease gradient flow."""
        s = 1.0 / np.sqrt(d_in + n)
        m = rng.uniform(-s, s, size=(4 * n, d_in + n))
        bias = np.zeros(4 * n)
        bias[n : 2 * n] = 1.0
        return cls(M=Tensor(m, requires_grad=True), bias=Tensor(bias, requires_grad=True), n=n, d_in=d_in)


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, n: int) -> "LstmState":
        return cls(h=Tensor(np.zeros(n)), c=Tensor(np.zeros(n)))


@dataclass
class GridState:
    """One LSTM state per spatial cell: h and c are (H, W, n)."""

    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, height: int, width: int, n: int) -> "GridState":
        return cls(h=Tensor(np.zeros((height, width, n))), c=Tensor(np.zeros((height, width, n))))


def _gates(pre, n: int, axis: int):
    i = T.sigmoid(T.slice_axis(pre, axis, 0, n))
    f = T.sigmoid(T.slice_axis(pre, axis, n, 2 * n))
    o = T.sigmoid(T.slice_axis(pre, axis, 2 * n, 3 * n))
    g = T.tanh(T.slice_axis(pre, axis, 3 * n, 4 * n))
    return i, f, o, g


def lstm_step(x: Tensor, state: LstmState, params: LstmParams) -> LstmState:
    """One step of the plain cell: gates from M @ [x; h] + bias, then
    c' = f*c + i*g and h' = o*tanh(c').

    The preactivation is evaluated block-wise, input columns then state
    columns, in the same [+] grouping the grid cell uses; with the
    fixed-order contraction in matmul/conv1x1 this makes a zeroed column
    block drop out of the result exactly.
    """
    if x.shape != (params.d_in,):
        raise ShapeError(f"input shape {x.shape} != ({params.d_in},)")
    if state.h.shape != (params.n,) or state.c.shape != (params.n,):
        raise ShapeError(f"state shapes {state.h.shape}/{state.c.shape} != ({params.n},)")
    m_input = T.slice_axis(params.M, 1, 0, params.d_in)
    m_state = T.slice_axis(params.M, 1, params.d_in, params.d_in + params.n)
    pre = T.matmul(m_input, x) + (T.matmul(m_state, state.h) + params.bias)
    i, f, o, g = _gates(pre, params.n, axis=0)
    c_new = f * state.c + i * g
    h_new = o * T.tanh(c_new)
    return LstmState(h=h_new, c=c_new)


def mlstm_step(l_t: Tensor, visual: Tensor, state: GridState, params: LstmParams) -> GridState:
    """One multimodal step over the whole grid.

    At every cell (i, j) this equals lstm_step([l_t; visual[i,j]], state[i,j],
    params): the language term is one shared matrix-vector product tiled over
    the grid, and the visual and state terms are 1x1 convolutions, so the
    same weights apply at every location. The (language + visual) + state
    grouping matches lstm_step's, so masked visual weights reduce to the
    language-only cell bit for bit.
    """
    if l_t.ndim != 1 or visual.ndim != 3:
        raise ShapeError(f"expected vector and (H, W, C) map, got {l_t.shape}, {visual.shape}")
    height, width, c_vis = visual.shape
    d_lang = l_t.shape[0]
    if d_lang + c_vis != params.d_in:
        raise ShapeError(f"language {d_lang} + visual {c_vis} channels != d_in {params.d_in}")
    if state.h.shape != (height, width, params.n):
        raise ShapeError(f"state grid {state.h.shape} != {(height, width, params.n)}")
    m_lang = T.slice_axis(params.M, 1, 0, d_lang)
    m_vis = T.slice_axis(params.M, 1, d_lang, params.d_in)
    m_state = T.slice_axis(params.M, 1, params.d_in, params.d_in + params.n)
    lang = T.tile_to_grid(T.matmul(m_lang, l_t), height, width)
    vis = T.conv1x1(visual, m_vis, Tensor(np.zeros(4 * params.n)))
    pre = (lang + vis) + T.conv1x1(state.h, m_state, params.bias)
    i, f, o, g = _gates(pre, params.n, axis=2)
    c_new = f * state.c + i * g
    h_new = o * T.tanh(c_new)
    return GridState(h=h_new, c=c_new)


def mask_visual_weights(params: LstmParams, d_language: int) -> LstmParams:
    """Copy of the parameters with the visual input columns of M zeroed.

    Columns [d_language, d_in) feed the visual channels; zeroing them makes
    the cell ignore the visual part of its input entirely.
    """
    if d_language >= params.d_in:
        raise ShapeError(f"d_language {d_language} >= d_in {params.d_in}")
    m = np.array(params.M.data)
    m[:, d_language : params.d_in] = 0.0
    return LstmParams(
        M=Tensor(m, requires_grad=params.M.requires_grad),
        bias=params.bias,
        n=params.n,
        d_in=params.d_in,
    )


def run_language_lstm(embeddings, params: LstmParams) -> list:
    """Fold lstm_step over a word sequence from the all-zero state.

    Returns all T states: the final one is the sentence vector, the full
    list feeds the word-level model.
    """
    if not embeddings:
        raise ValueError("empty embedding sequence")
    state = LstmState.zeros(params.n)
    states = []
    for emb in embeddings:
        state = lstm_step(emb, state, params)
        states.append(state)
    return states
