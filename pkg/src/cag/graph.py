"""Context-aware graph over visual objects: construction, question-commanded
adjacency learning, adaptive top-K message passing, node updates, graph
attention, and the final multimodal fusion.

Nodes are (2d, n) columns [v_i; c_i]: a fixed visual half and a learned
context half. Each inference step recomputes the directed adjacency under
that step's question command, routes messages from each node's top-K
in-neighbors only, and rewrites the context half. Gradients flow through
the selected adjacency entries and messages, never through the discrete
neighbor choice itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .encoders import Drop, QuestionCommand, _identity
from .tensor import Tensor


@dataclass
class GraphParams:
    """Weights shared by every inference step, plus attention and fusion."""

    edge_dst_proj: Tensor      # (d, 2d) receiving-node projection
    edge_src_proj: Tensor      # (d, 2d) distributing-node projection
    edge_cmd_gate: Tensor      # (d, d_w) command gate on the distributing side
    edge_dst_cmd_gate: Tensor  # (d, d_w) extra gate on the receiving side (dualq)
    msg_node_proj: Tensor      # (d, 2d)
    msg_cmd_gate: Tensor       # (d, d_w)
    ctx_update: Tensor         # (d, 2d) maps [context; message] to new context
    att_q_proj: Tensor         # (d, d)
    att_node_proj: Tensor      # (d, 2d)
    att_score: Tensor          # (1, d)
    fusion: Tensor             # (d, 4d)

    @classmethod
    def init(cls, d: int, d_w: int, rng: np.random.Generator) -> "GraphParams":
        def u(rows, cols, gain=1.0):
            return T.parameter((rows, cols), rng, gain / np.sqrt(cols))

        # the edge projections feed a product of two projected node sets;
        # plain 1/sqrt(fan-in) leaves the adjacency so close to zero that
        # early top-K routing is pure noise, hence the larger gain
        return cls(
            edge_dst_proj=u(d, 2 * d, gain=4.0),
            edge_src_proj=u(d, 2 * d, gain=4.0),
            edge_cmd_gate=u(d, d_w, gain=4.0),
            edge_dst_cmd_gate=u(d, d_w, gain=4.0),
            msg_node_proj=u(d, 2 * d),
            msg_cmd_gate=u(d, d_w),
            ctx_update=u(d, 2 * d),
            att_q_proj=u(d, d),
            att_node_proj=u(d, 2 * d),
            att_score=u(1, d),
            fusion=u(d, 4 * d),
        )

    def named(self, prefix: str = "graph"):
        for f_ in ("edge_dst_proj", "edge_src_proj", "edge_cmd_gate",
                   "edge_dst_cmd_gate", "msg_node_proj", "msg_cmd_gate",
                   "ctx_update", "att_q_proj", "att_node_proj", "att_score",
                   "fusion"):
            yield f"{prefix}.{f_}", getattr(self, f_)


@dataclass
class ModeFlags:
    """Variant switch, ablation toggles, and the two inference knobs."""

    variant: str = "cag"  # "cag" or "dualq"
    no_infer: bool = False
    no_u: bool = False
    no_q_att: bool = False
    no_g_att: bool = False
    k_neighbors: int = 8
    steps: int = 3

    def __post_init__(self) -> None:
        if self.variant not in ("cag", "dualq"):
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def effective_steps(self) -> int:
        return 0 if self.no_infer else self.steps

    @classmethod
    def from_config(cls, cfg) -> "ModeFlags":
        return cls(
            variant=cfg.variant,
            no_infer="no_infer" in cfg.ablations,
            no_u="no_u" in cfg.ablations,
            no_q_att="no_q_att" in cfg.ablations,
            no_g_att="no_g_att" in cfg.ablations,
            k_neighbors=cfg.k_neighbors,
            steps=cfg.steps,
        )


@dataclass
class GraphState:
    """Node matrix at step t plus the edge data that produced it."""

    step: int
    nodes: Tensor                       # (2d, n)
    adjacency: Tensor | None = None     # (n, n); row i holds weights of edges into i
    neighbors: np.ndarray | None = None  # (n, K) selected in-neighbor indices
    weights: np.ndarray | None = None    # (n, K) softmax-normalized edge weights
    messages: Tensor | None = None       # (d, n)

    @property
    def num_nodes(self) -> int:
        return self.nodes.data.shape[1]


@dataclass
class StepRecord:
    """Numpy snapshot of one inference step, for trace export."""

    step: int
    alpha_q: np.ndarray
    adjacency: np.ndarray
    neighbors: np.ndarray
    weights: np.ndarray
    messages: np.ndarray
    nodes_after: np.ndarray


@dataclass
class AttentionTrace:
    steps: list[StepRecord] = field(default_factory=list)
    alpha_h: np.ndarray | None = None
    alpha_g: np.ndarray | None = None


# ---------------------------------------------------------------------------
# per-step operations
# ---------------------------------------------------------------------------


def init_graph(visual: Tensor, context: Tensor, no_context: bool = False) -> GraphState:
    """Step-1 graph: every node column is [v_i; u].

    With ``no_context`` the textual half is all zeros (graph describes the
    visual scene only).
    """
    d, n = visual.data.shape
    if n < 1:
        raise T.ShapeError("init_graph: need at least one object node")
    if no_context:
        ctx = T.constant(np.zeros((d, n)))
    else:
        if context.data.shape != (d, 1):
            raise T.ShapeError(
                f"init_graph: context shape {context.data.shape} does not match ({d}, 1)")
        ctx = T.broadcast_cols(context, n)
    return GraphState(step=1, nodes=T.concat([visual, ctx], axis=0))


def adjacency(nodes: Tensor, command: Tensor, params: GraphParams,
              variant: str = "cag") -> Tensor:
    """Directed adjacency (n, n): row i holds the weights of edges into node i.

    The question command gates the distributing side; the dualq variant
    gates both sides symmetrically. The diagonal is not masked: self-edges
    compete for selection like any other edge.
    """
    n = nodes.data.shape[1]
    src = (params.edge_src_proj @ nodes) * T.broadcast_cols(
        params.edge_cmd_gate @ command, n)
    dst = params.edge_dst_proj @ nodes
    if variant == "dualq":
        dst = dst * T.broadcast_cols(params.edge_dst_cmd_gate @ command, n)
    elif variant != "cag":
        raise ValueError(f"unknown variant {variant!r}")
    return T.transpose(dst) @ src


def select_neighbors(adj: np.ndarray, k: int) -> np.ndarray:
    """Row-independent top-K selection: neighbors[i] are the indices of the
    K strongest incoming edges of node i. Rows are independent, so the
    structure is an asymmetric directed graph."""
    if k < 1:
        raise ValueError(f"select_neighbors: k must be >= 1, got {k}")
    n = adj.shape[0]
    return np.stack([T.topk_indices(adj[i], min(k, n)) for i in range(n)])


def message_passing(nodes: Tensor, adj: Tensor, neighbors: np.ndarray,
                    command: Tensor, params: GraphParams
                    ) -> tuple[Tensor, np.ndarray, Tensor]:
    """Aggregate command-gated messages from each node's selected neighbors.

    Returns (routing, weights, messages): routing is the (n, n) matrix of
    softmax-normalized edge weights with zeros off the selected entries,
    weights is its (n, K) compaction, and messages is (d, n) with column i
    the weighted sum over selected in-neighbors of node i.
    """
    n = nodes.data.shape[1]
    mask = np.zeros((n, n), dtype=bool)
    rows = np.repeat(np.arange(n), neighbors.shape[1])
    mask[rows, neighbors.reshape(-1)] = True
    routing = T.masked_softmax(adj, mask, axis=1)
    per_node = (params.msg_node_proj @ nodes) * T.broadcast_cols(
        params.msg_cmd_gate @ command, n)
    messages = per_node @ T.transpose(routing)
    weights = routing.data[np.arange(n)[:, None], neighbors]
    return routing, weights, messages


def update_nodes(state: GraphState, messages: Tensor, params: GraphParams) -> GraphState:
    """Rewrite each node's context half from [old context; message]; the
    visual half passes through bitwise untouched."""
    two_d, n = state.nodes.data.shape
    d = two_d // 2
    visual = T.take_rows(state.nodes, 0, d)
    ctx = T.take_rows(state.nodes, d, two_d)
    new_ctx = params.ctx_update @ T.concat([ctx, messages], axis=0)
    nodes = T.concat([visual, new_ctx], axis=0)
    if not np.array_equal(nodes.data[:d], state.nodes.data[:d]):
        raise RuntimeError("visual half of the node matrix changed during update")
    return GraphState(step=state.step + 1, nodes=nodes)


CommandFn = Callable[[int], QuestionCommand]


def iterate(visual: Tensor, context: Tensor, command_fn: CommandFn,
            params: GraphParams, flags: ModeFlags,
            record_trace: bool = False,
            start_state: GraphState | None = None,
            num_steps: int | None = None,
            ) -> tuple[GraphState, list[StepRecord]]:
    """Run the inference loop: command -> adjacency -> top-K -> messages ->
    update, for the configured number of steps.

    Zero steps returns the constructed graph untouched. ``start_state``
    resumes from a saved state (step counting continues), which makes the
    loop composable: T steps equal T-1 steps plus one manual step.
    """
    state = start_state if start_state is not None else init_graph(
        visual, context, no_context=flags.no_u)
    records: list[StepRecord] = []
    total = flags.effective_steps if num_steps is None else num_steps
    v_data = visual.data
    d = v_data.shape[0]
    for _ in range(total):
        t = state.step
        cmd = command_fn(t)
        adj = adjacency(state.nodes, cmd.vector, params, flags.variant)
        neighbors = select_neighbors(adj.data, flags.k_neighbors)
        routing, weights, messages = message_passing(
            state.nodes, adj, neighbors, cmd.vector, params)
        nxt = update_nodes(state, messages, params)
        if not np.array_equal(nxt.nodes.data[:d], v_data):
            raise RuntimeError(f"visual features drifted at step {t}")
        state.adjacency, state.neighbors = adj, neighbors
        state.weights, state.messages = weights, messages
        if record_trace:
            records.append(StepRecord(
                step=t,
                alpha_q=cmd.alpha.data.reshape(-1).copy(),
                adjacency=adj.data.copy(),
                neighbors=neighbors.copy(),
                weights=weights.copy(),
                messages=messages.data.copy(),
                nodes_after=nxt.nodes.data.copy(),
            ))
        state = nxt
    return state, records


# ---------------------------------------------------------------------------
# readout
# ---------------------------------------------------------------------------


def graph_attention(nodes: Tensor, q_sent: Tensor, params: GraphParams,
                    average_pool: bool = False, drop: Drop = _identity
                    ) -> tuple[Tensor, Tensor]:
    """Question-conditioned attention over final nodes -> (2d, 1) embedding.

    ``average_pool`` (the no-graph-attention ablation) replaces the learned
    weights with a uniform 1/n combination.
    """
    n = nodes.data.shape[1]
    if average_pool:
        alpha = T.constant(np.full((1, n), 1.0 / n))
    else:
        z = T.tanh(T.broadcast_cols(params.att_q_proj @ q_sent, n)
                   + params.att_node_proj @ nodes)
        alpha = T.softmax(params.att_score @ drop(z), axis=1)
    return nodes @ T.transpose(alpha), alpha


def fuse(graph_emb: Tensor, context: Tensor, q_sent: Tensor, params: GraphParams,
         drop: Drop = _identity) -> Tensor:
    """tanh(W [graph embedding; history context; question sentence]) -> (d, 1)."""
    return drop(T.tanh(params.fusion @ T.concat([graph_emb, context, q_sent], axis=0)))
