"""Full model: every learnable weight, instance encoding, and the forward
pass from raw object features and token ids to candidate logits."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import (MAX_ANSWER_TOKENS, MAX_CAPTION_TOKENS,
                     MAX_QUESTION_TOKENS, RunConfig)
from .decoder import score_candidates
from .encoders import (LSTMParams, QuestionCommand, StepAttentionParams,
                       Vocab, encode_history, encode_question,
                       history_attention, question_command)
from .graph import (AttentionTrace, GraphParams, ModeFlags, fuse,
                    graph_attention, iterate)
from .synthdial import DialogInstance, token_sentences
from .tensor import Tensor


@dataclass
class ModelParams:
    """Every trainable weight, addressable by stable dotted names."""

    embedding: Tensor                 # (vocab, d_w), uniform(-0.08, 0.08)
    question_lstm: LSTMParams         # d_w -> d
    history_lstm: LSTMParams          # d_w -> d; also encodes candidates
    hist_att_q: Tensor                # (d, d)
    hist_att_mem: Tensor              # (d, d)
    hist_att_score: Tensor            # (1, d)
    step_attention: list[StepAttentionParams]  # one per inference step
    cmd_from_sentence: Tensor         # (d_w, d) shared projection (no_q_att)
    graph: GraphParams
    visual_proj: Tensor               # (d, d_v)
    visual_bias: Tensor               # (d, 1)

    @classmethod
    def init(cls, cfg: RunConfig, vocab_size: int,
             rng: np.random.Generator | None = None) -> "ModelParams":
        """Fresh parameters; rng=None builds zero-filled shells (checkpoint
        loading fills them in).

        Embeddings draw from uniform(-0.8, 0.8): roughly the magnitude of
        pretrained word vectors. At much smaller scales the text pathway
        stalls for many epochs before the co-reference signal appears.
        """
        d, d_w = cfg.d, cfg.d_w

        def u(rows, cols, scale=None):
            if rng is None:
                return Tensor(np.zeros((rows, cols)), requires_grad=True)
            return T.parameter((rows, cols), rng, scale or 1.0 / np.sqrt(cols))

        def lstm(d_in):
            if rng is None:
                return LSTMParams(
                    Tensor(np.zeros((4 * d, d_in)), requires_grad=True),
                    Tensor(np.zeros((4 * d, d)), requires_grad=True),
                    Tensor(np.zeros((4 * d, 1)), requires_grad=True))
            return LSTMParams.init(d_in, d, rng)

        def step_att():
            if rng is None:
                return StepAttentionParams(
                    Tensor(np.zeros((d, d)), requires_grad=True),
                    Tensor(np.zeros((d, d)), requires_grad=True),
                    Tensor(np.zeros((1, d)), requires_grad=True))
            return StepAttentionParams.init(d, rng)

        graph = (GraphParams.init(d, d_w, rng) if rng is not None else GraphParams(
            *[Tensor(np.zeros(s), requires_grad=True) for s in (
                (d, 2 * d), (d, 2 * d), (d, d_w), (d, d_w), (d, 2 * d),
                (d, d_w), (d, 2 * d), (d, d), (d, 2 * d), (1, d), (d, 4 * d))]))

        return cls(
            embedding=u(vocab_size, d_w, scale=0.8),
            question_lstm=lstm(d_w),
            history_lstm=lstm(d_w),
            hist_att_q=u(d, d),
            hist_att_mem=u(d, d),
            hist_att_score=u(1, d),
            step_attention=[step_att() for _ in range(cfg.steps)],
            cmd_from_sentence=u(d_w, d),
            graph=graph,
            visual_proj=u(d, cfg.d_v),
            visual_bias=u(d, 1, scale=1.0 / np.sqrt(d)),
        )

    def named(self) -> list[tuple[str, Tensor]]:
        out = [("embedding", self.embedding)]
        out += list(self.question_lstm.named("question_lstm"))
        out += list(self.history_lstm.named("history_lstm"))
        out += [("history_attention.q_proj", self.hist_att_q),
                ("history_attention.mem_proj", self.hist_att_mem),
                ("history_attention.score", self.hist_att_score)]
        for t, sp in enumerate(self.step_attention, start=1):
            out += list(sp.named(f"step_attention.{t}"))
        out.append(("command_from_sentence", self.cmd_from_sentence))
        out += list(self.graph.named("graph"))
        out += [("visual.proj", self.visual_proj), ("visual.bias", self.visual_bias)]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ValueError(f"parameter names differ: missing={sorted(missing)} "
                             f"unexpected={sorted(extra)}")
        for name, t in own.items():
            if state[name].shape != t.data.shape:
                raise ValueError(
                    f"parameter {name}: stored shape {state[name].shape} does not "
                    f"match expected {t.data.shape}")
            t.data = np.array(state[name], dtype=np.float64)


# ---------------------------------------------------------------------------
# instance encoding
# ---------------------------------------------------------------------------


@dataclass
class EncodedInstance:
    dialog_id: int
    features: np.ndarray              # (d_v, n)
    caption_ids: list[int]
    round_ids: list[list[int]]        # one 'q a' id stream per history round
    question_ids: list[int]
    candidate_ids: list[tuple[int, ...]]
    gt: int


def encode_instance(inst: DialogInstance, vocab: Vocab) -> EncodedInstance:
    rounds = []
    for r in inst.history:
        rounds.append(vocab.encode(r.question, MAX_QUESTION_TOKENS)
                      + vocab.encode([r.answer], MAX_ANSWER_TOKENS))
    return EncodedInstance(
        dialog_id=inst.dialog_id,
        features=inst.scene.features(),
        caption_ids=vocab.encode(inst.caption, MAX_CAPTION_TOKENS),
        round_ids=rounds,
        question_ids=vocab.encode(inst.current.question, MAX_QUESTION_TOKENS),
        candidate_ids=[tuple(vocab.encode([c], MAX_ANSWER_TOKENS))
                       for c in inst.candidates],
        gt=inst.gt,
    )


def build_vocab(instances: Sequence[DialogInstance], min_count: int = 1) -> Vocab:
    return Vocab.build(
        (sent for inst in instances for sent in token_sentences(inst)),
        min_count=min_count)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    logits: Tensor                    # (1, C)
    trace: AttentionTrace | None = None
    q_sentence: np.ndarray | None = None
    fused: np.ndarray | None = None   # (d, 1) multimodal embedding (trace mode)


class Model:
    """Parameters plus configuration, runnable on encoded instances."""

    def __init__(self, params: ModelParams, cfg: RunConfig,
                 flags: ModeFlags | None = None):
        self.params = params
        self.cfg = cfg
        self.flags = flags if flags is not None else ModeFlags.from_config(cfg)
        if self.flags.steps > len(params.step_attention):
            raise ValueError(
                f"configured {self.flags.steps} steps but parameters cover "
                f"{len(params.step_attention)}")

    def forward(self, enc: EncodedInstance, training: bool = False,
                drop_rng: np.random.Generator | None = None,
                want_trace: bool = False,
                candidate_cache: dict | None = None) -> ForwardResult:
        p, flags = self.params, self.flags
        keep = 1.0 - self.cfg.dropout
        if training and keep < 1.0:
            if drop_rng is None:
                raise ValueError("training forward needs a dropout rng")
            drop = lambda x: T.dropout(x, keep, drop_rng, training=True)
        else:
            drop = lambda x: x

        feats = T.constant(enc.features)
        n = feats.data.shape[1]
        visual = T.tanh(p.visual_proj @ feats
                        + T.broadcast_cols(p.visual_bias, n))

        question = encode_question(enc.question_ids, p.embedding, p.question_lstm)

        alpha_h = None
        if flags.no_u:
            # history only enters through u; skip the encoder unless tracing
            context = T.constant(np.zeros((self.cfg.d, 1)))
            if want_trace:
                history = encode_history([enc.caption_ids] + enc.round_ids,
                                         p.embedding, p.history_lstm)
                _, alpha_h = history_attention(
                    question.sentence, history, p.hist_att_q, p.hist_att_mem,
                    p.hist_att_score)
        else:
            history = encode_history([enc.caption_ids] + enc.round_ids,
                                     p.embedding, p.history_lstm)
            context, alpha_h = history_attention(
                question.sentence, history, p.hist_att_q, p.hist_att_mem,
                p.hist_att_score, drop)

        total_steps = flags.effective_steps
        if flags.no_q_att:
            shared = p.cmd_from_sentence @ question.sentence
            uniform = question.valid / question.valid.sum()

            def command_fn(t: int) -> QuestionCommand:
                return QuestionCommand(t, T.constant(uniform[None, :]), shared)
        else:
            def command_fn(t: int) -> QuestionCommand:
                return question_command(question, t, total_steps,
                                        p.step_attention[t - 1], drop)

        state, records = iterate(visual, context, command_fn, p.graph, flags,
                                 record_trace=want_trace)
        graph_emb, alpha_g = graph_attention(state.nodes, question.sentence,
                                             p.graph, flags.no_g_att, drop)
        fused = fuse(graph_emb, context, question.sentence, p.graph, drop)

        cols = []
        for ids in enc.candidate_ids:
            if candidate_cache is not None and ids in candidate_cache:
                cols.append(T.constant(candidate_cache[ids]))
                continue
            hid = encode_history([list(ids)], p.embedding, p.history_lstm).rounds
            cols.append(hid)
            if candidate_cache is not None:
                candidate_cache[ids] = hid.data.copy()
        candidates = T.concat(cols, axis=1) if len(cols) > 1 else cols[0]
        logits = score_candidates(fused, candidates)

        trace = None
        q_sent = fused_out = None
        if want_trace:
            trace = AttentionTrace(
                steps=records,
                alpha_h=alpha_h.data.reshape(-1).copy() if alpha_h is not None else None,
                alpha_g=alpha_g.data.reshape(-1).copy(),
            )
            q_sent = question.sentence.data.copy()
            fused_out = fused.data.copy()
        return ForwardResult(logits=logits, trace=trace, q_sentence=q_sent,
                             fused=fused_out)


def step_node_attention(nodes: np.ndarray, q_sentence: np.ndarray,
                        graph_params: GraphParams) -> np.ndarray:
    """Diagnostic: the graph-attention head applied to an intermediate node
    matrix (trace export only; the model itself attends once, at the end)."""
    z = np.tanh(graph_params.att_q_proj.data @ q_sentence
                + graph_params.att_node_proj.data @ nodes)
    s = (graph_params.att_score.data @ z).reshape(-1)
    e = np.exp(s - s.max())
    return e / e.sum()


def top_attended(alpha: np.ndarray, k: int = 2) -> list[int]:
    """Most-attended object ids, strongest first, ties to the lowest id."""
    alpha = np.asarray(alpha).reshape(-1)
    order = sorted(range(alpha.size), key=lambda j: (-alpha[j], j))
    return [int(i) for i in order[: min(k, alpha.size)]]
