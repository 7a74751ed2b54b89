"""Text side of the model: vocabulary, token embedding, LSTM sequence
encoding, question-conditioned history attention, and the per-step
word-level question commands that steer the graph."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

Drop = Callable[[Tensor], Tensor]
_identity: Drop = lambda x: x


@dataclass
class Vocab:
    """Token <-> id mapping with reserved PAD=0 and UNK=1."""

    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    PAD = 0
    UNK = 1

    def __post_init__(self) -> None:
        if self.id_to_token[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocab must reserve id 0 for PAD and id 1 for UNK")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("vocab tokens must be unique")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], min_count: int = 1) -> "Vocab":
        counts = Counter(tok for sent in sentences for tok in sent)
        kept = sorted(tok for tok, c in counts.items() if c >= min_count)
        return cls([PAD_TOKEN, UNK_TOKEN] + kept)

    def encode(self, tokens: Sequence[str], max_len: int | None = None) -> list[int]:
        if max_len is not None:
            tokens = tokens[:max_len]
        return [self.token_to_id.get(tok, self.UNK) for tok in tokens]


def embed_tokens(ids: Sequence[int], table: Tensor) -> Tensor:
    """(d_w, m) column per token id; PAD columns are zero."""
    return T.embedding_cols(table, ids, pad_id=Vocab.PAD)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


@dataclass
class LSTMParams:
    """Single-layer LSTM with stacked gates, order [input, forget, cell, output]."""

    w_x: Tensor  # (4d, d_in)
    w_h: Tensor  # (4d, d)
    b: Tensor    # (4d, 1)

    @property
    def hidden_size(self) -> int:
        return self.w_h.data.shape[1]

    @classmethod
    def init(cls, d_in: int, d: int, rng: np.random.Generator) -> "LSTMParams":
        s = 1.0 / np.sqrt(d)
        return cls(
            w_x=T.parameter((4 * d, d_in), rng, s),
            w_h=T.parameter((4 * d, d), rng, s),
            b=T.parameter((4 * d, 1), rng, s),
        )

    def named(self, prefix: str):
        yield f"{prefix}.w_x", self.w_x
        yield f"{prefix}.w_h", self.w_h
        yield f"{prefix}.b", self.b


def lstm_encode(seq: Tensor, params: LSTMParams, valid: np.ndarray | None = None) -> Tensor:
    """Hidden sequence (d, m) for an input sequence (d_in, m).

    Initial hidden and cell states are zero. Positions where ``valid`` is
    False (padding) carry the previous state forward unchanged.
    """
    d = params.hidden_size
    m = seq.data.shape[1]
    if m < 1:
        raise T.ShapeError("lstm_encode: empty sequence")
    if valid is None:
        valid = np.ones(m, dtype=bool)
    h = T.constant(np.zeros((d, 1)))
    c = T.constant(np.zeros((d, 1)))
    cols = []
    for t in range(m):
        if valid[t]:
            x = T.take_col(seq, t)
            pre = params.w_x @ x + params.w_h @ h + params.b
            i = T.sigmoid(T.take_rows(pre, 0, d))
            f = T.sigmoid(T.take_rows(pre, d, 2 * d))
            g = T.tanh(T.take_rows(pre, 2 * d, 3 * d))
            o = T.sigmoid(T.take_rows(pre, 3 * d, 4 * d))
            c = f * c + i * g
            h = o * T.tanh(c)
        cols.append(h)
    return T.concat(cols, axis=1) if m > 1 else cols[0]


def last_valid_column(hiddens: Tensor, valid: np.ndarray) -> Tensor:
    """Sentence vector: hidden state at the last non-PAD position."""
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        raise ValueError("sequence has no valid (non-PAD) position")
    return T.take_col(hiddens, int(idx[-1]))


@dataclass
class EncodedQuestion:
    word_embs: Tensor   # (d_w, m)
    hiddens: Tensor     # (d, m)
    sentence: Tensor    # (d, 1), hidden state at the last valid position
    valid: np.ndarray   # (m,) bool


@dataclass
class EncodedHistory:
    rounds: Tensor  # (d, num_rounds); column 0 is the caption encoding
    count: int


def encode_question(ids: Sequence[int], table: Tensor, params: LSTMParams) -> EncodedQuestion:
    ids = list(ids)
    valid = np.array([i != Vocab.PAD for i in ids], dtype=bool)
    embs = embed_tokens(ids, table)
    hid = lstm_encode(embs, params, valid)
    return EncodedQuestion(embs, hid, last_valid_column(hid, valid), valid)


def encode_history(round_ids: Sequence[Sequence[int]], table: Tensor,
                   params: LSTMParams) -> EncodedHistory:
    """Encode caption plus each ``q a`` round into one column per round."""
    if not round_ids:
        raise ValueError("history must contain at least the caption round")
    cols = []
    for ids in round_ids:
        ids = list(ids)
        valid = np.array([i != Vocab.PAD for i in ids], dtype=bool)
        hid = lstm_encode(embed_tokens(ids, table), params, valid)
        cols.append(last_valid_column(hid, valid))
    rounds = T.concat(cols, axis=1) if len(cols) > 1 else cols[0]
    return EncodedHistory(rounds, len(cols))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def history_attention(q_sent: Tensor, history: EncodedHistory, w_q: Tensor,
                      w_h: Tensor, p_score: Tensor, drop: Drop = _identity
                      ) -> tuple[Tensor, Tensor]:
    """Question-conditioned convex combination of history round vectors.

    z = tanh(w_q q_sent broadcast + w_h H); alpha = softmax(p_score z);
    returns (u, alpha) with u = H alpha^T.
    """
    ell = history.count
    z = T.tanh(T.broadcast_cols(w_q @ q_sent, ell) + w_h @ history.rounds)
    alpha = T.softmax(p_score @ drop(z), axis=1)
    u = history.rounds @ T.transpose(alpha)
    return u, alpha


@dataclass
class QuestionCommand:
    step: int
    alpha: Tensor   # (1, m) word attention, PAD positions exactly zero
    vector: Tensor  # (d_w, 1) attention-weighted word embedding


@dataclass
class StepAttentionParams:
    """Word-attention parameters owned by one inference step."""

    gate_tanh: Tensor  # (d, d)
    gate_sig: Tensor   # (d, d)
    score: Tensor      # (1, d)

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "StepAttentionParams":
        s = 1.0 / np.sqrt(d)
        return cls(T.parameter((d, d), rng, s), T.parameter((d, d), rng, s),
                   T.parameter((1, d), rng, s))

    def named(self, prefix: str):
        yield f"{prefix}.gate_tanh", self.gate_tanh
        yield f"{prefix}.gate_sig", self.gate_sig
        yield f"{prefix}.score", self.score


def question_command(question: EncodedQuestion, step: int, total_steps: int,
                     params: StepAttentionParams, drop: Drop = _identity
                     ) -> QuestionCommand:
    """Step-specific word attention over the question.

    A tanh/sigmoid gate pair re-embeds the hidden sequence, each word's
    feature column is scaled to unit norm, and the resulting scores are
    softmaxed over non-PAD words. The command vector is the attention-
    weighted sum of the raw word embeddings.
    """
    if not (1 <= step <= total_steps):
        raise ValueError(f"step {step} outside [1, {total_steps}]")
    gated = T.tanh(params.gate_tanh @ question.hiddens) * T.sigmoid(
        params.gate_sig @ question.hiddens)
    z = T.l2_normalize(gated, axis=0)
    scores = params.score @ drop(z)
    alpha = T.masked_softmax(scores, question.valid[None, :], axis=1)
    vector = question.word_embs @ T.transpose(alpha)
    return QuestionCommand(step=step, alpha=alpha, vector=vector)
