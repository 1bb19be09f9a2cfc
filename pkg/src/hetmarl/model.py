"""HMAGQ-Net: per-class encoders, relational message passing, per-class Q-heads.

Parameters live in a flat ``dict[str, Tensor]`` so the optimizer, the target
network copy and checkpoints all deal with one registry. Graphs are batched
by disjoint union; every layer runs once over the whole batch.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .graph import ClassTable, StateGraph, disjoint_union, validate
from .numerics import Tensor

Params = dict[str, Tensor]
MAGIC = b"HMAGQ1"
NEG_INF = float(np.finfo(np.float32).min)


@dataclass(frozen=True)
class ModelConfig:
    class_table: ClassTable
    comms: str = "rgcn"
    frf: bool = False
    num_bases: int = 4
    embed_dim: int = 64
    encoder_hidden: int = 128
    comm_dims: tuple[int, ...] = (128, 128, 128, 64)
    head_hidden: int = 128
    gat_heads: int = 4

    def __post_init__(self):
        if self.comms not in ("rgcn", "gat"):
            raise ConfigError(f"comms must be 'rgcn' or 'gat', got {self.comms!r}")
        if not self.class_table.agent_classes:
            raise ConfigError("class table has no agent classes")
        if self.comms == "rgcn" and not 1 <= self.num_bases <= self.num_relations:
            raise ConfigError(f"num_bases must be in [1, {self.num_relations}]")
        if self.comms == "gat" and any(d % self.gat_heads for d in self.comm_dims):
            raise ConfigError("communication widths must divide by the number of heads")

    @property
    def num_relations(self) -> int:
        return len(self.class_table.agent_classes) * len(self.class_table)

    @property
    def observation_dim(self) -> int:
        return sum(self.comm_dims) if self.frf else self.comm_dims[-1]

    def layer_dims(self) -> list[tuple[int, int]]:
        ins = (self.embed_dim,) + tuple(self.comm_dims[:-1])
        return list(zip(ins, self.comm_dims))


# ---------------------------------------------------------------- batching


class GraphBatch:
    """Index arrays for a disjoint union of state graphs."""

    def __init__(self, graphs: Sequence[StateGraph], table: ClassTable, check: bool = True):
        if check:
            for i, g in enumerate(graphs):
                problems = validate(g, table)
                if problems:
                    raise ContractError(f"graph {i} is invalid: " + "; ".join(problems))
        self.table = table
        self.graphs = list(graphs)
        union, offsets = disjoint_union(self.graphs)
        self.union = union
        self.offsets = offsets
        self.num_nodes = union.num_nodes
        self.num_relations = len(table.agent_classes) * len(table)
        classes = union.node_classes
        self.class_rows = {c: np.flatnonzero(classes == c) for c in range(len(table))}
        order = np.concatenate([self.class_rows[c] for c in range(len(table))])
        self.restore = np.empty_like(order)
        self.restore[order] = np.arange(len(order))
        self.is_agent = np.array([table[c].is_agent for c in classes], dtype=bool)
        arcs = union.arcs
        self.src = arcs[:, 0].copy()
        self.dst = arcs[:, 1].copy()
        self.rel = arcs[:, 2].copy()
        if len(arcs):
            key = self.dst * self.num_relations + self.rel
            _, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
            self.norm = 1.0 / counts[inverse]
        else:
            self.norm = np.zeros(0)
        self.targets = np.unique(self.dst)
        # relation-major so per-relation aggregates reshape to (R, targets * width)
        self.slot = self.rel * len(self.targets) + np.searchsorted(self.targets, self.dst)
        n = self.num_nodes
        self.seg_src = nx.Segments(self.src, n)
        self.seg_slot = nx.Segments(self.slot, len(self.targets) * self.num_relations)
        self.seg_targets = nx.Segments(self.targets, n)
        self.seg_restore = nx.Segments(self.restore, n)
        loops = np.arange(n, dtype=np.int64)
        self.member_src = np.concatenate([self.src, loops])
        self.member_dst = np.concatenate([self.dst, loops])
        self.seg_member_src = nx.Segments(self.member_src, n)
        self.seg_member_dst = nx.Segments(self.member_dst, n)
        # live agents, grouped by class; ``agent_graph`` and ``agent_local``
        # locate each row back in its source graph
        self.agent_rows: dict[int, np.ndarray] = {}
        self.seg_agents: dict[int, nx.Segments] = {}
        self.agent_graph: dict[int, np.ndarray] = {}
        self.agent_local: dict[int, np.ndarray] = {}
        owners = np.concatenate([[gi] * len(g.agent_ids) for gi, g in enumerate(self.graphs)]
                                ).astype(np.int64) if self.graphs else np.zeros(0, np.int64)
        ids = np.asarray(union.agent_ids, dtype=np.int64)
        for c in table.agent_classes:
            sel = classes[ids] == c if len(ids) else np.zeros(0, bool)
            self.agent_rows[c] = ids[sel]
            self.agent_graph[c] = owners[sel]
            self.agent_local[c] = ids[sel] - offsets[owners[sel]]
            self.seg_agents[c] = nx.Segments(self.agent_rows[c], self.num_nodes)

    def features(self, c: int) -> np.ndarray:
        width = self.table[c].feature_width
        rows = self.class_rows[c]
        if not len(rows):
            return np.zeros((0, width), dtype=nx.default_dtype())
        return np.stack([self.union.features[i] for i in rows]).astype(nx.default_dtype())


def as_batch(graphs, table: ClassTable, check: bool = True) -> GraphBatch:
    if isinstance(graphs, GraphBatch):
        return graphs
    if isinstance(graphs, StateGraph):
        graphs = [graphs]
    return GraphBatch(graphs, table, check=check)


# ---------------------------------------------------------------- parameters


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def _mlp_params(out: Params, prefix: str, dims: Sequence[int], rng: np.random.Generator):
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        out[f"{prefix}.{i}.W"] = nx.param(_glorot(rng, (b, a), a, b), f"{prefix}.{i}.W")
        out[f"{prefix}.{i}.b"] = nx.param(np.zeros(b), f"{prefix}.{i}.b")


def init_params(cfg: ModelConfig, rng: np.random.Generator | int = 0) -> Params:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    table = cfg.class_table
    p: Params = {}
    for c, nc in enumerate(table.classes):
        _mlp_params(p, f"enc.{nc.name}",
                    (nc.feature_width, cfg.encoder_hidden, cfg.encoder_hidden, cfg.embed_dim), rng)
    R, B = cfg.num_relations, cfg.num_bases
    for k, (din, dout) in enumerate(cfg.layer_dims()):
        pre = f"comm.{k}"
        if cfg.comms == "rgcn":
            p[f"{pre}.self"] = nx.param(_glorot(rng, (dout, din), din, dout), f"{pre}.self")
            p[f"{pre}.basis"] = nx.param(_glorot(rng, (B, dout, din), din, dout), f"{pre}.basis")
            p[f"{pre}.coef"] = nx.param(_glorot(rng, (R, B), R, B), f"{pre}.coef")
        else:
            H = cfg.gat_heads
            dh = dout // H
            p[f"{pre}.proj"] = nx.param(_glorot(rng, (dout, din), din, dout), f"{pre}.proj")
            p[f"{pre}.att_src"] = nx.param(_glorot(rng, (H, dh), dh, 1), f"{pre}.att_src")
            p[f"{pre}.att_dst"] = nx.param(_glorot(rng, (H, dh), dh, 1), f"{pre}.att_dst")
    for c in table.agent_classes:
        nc = table[c]
        _mlp_params(p, f"head.{nc.name}",
                    (cfg.observation_dim, cfg.head_hidden, cfg.head_hidden, nc.action_count), rng)
    return p


def cast_params(params: Mapping[str, Tensor], dtype) -> Params:
    return {k: Tensor(v.data.astype(dtype), name=k) for k, v in params.items()}


def parameter_count(params: Mapping[str, Tensor], prefix: str = "") -> int:
    return int(sum(v.size for k, v in params.items() if k.startswith(prefix)))


# ---------------------------------------------------------------- building blocks


def mlp(params: Mapping[str, Tensor], prefix: str, x: Tensor, layers: int,
        final_sigmoid: bool = True) -> Tensor:
    for i in range(layers):
        x = nx.affine(params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"], x)
        if i < layers - 1 or final_sigmoid:
            x = nx.sigmoid(x)
    return x


def encode(batch: GraphBatch, params: Mapping[str, Tensor]) -> Tensor:
    """Encoded node matrix; row i is the class-specific encoder of node i."""
    parts = []
    for c, nc in enumerate(batch.table.classes):
        rows = batch.class_rows[c]
        if not len(rows):
            continue
        x = batch.features(c)
        if x.shape[1] != params[f"enc.{nc.name}.0.W"].shape[1]:
            raise ContractError(f"class {nc.name!r}: feature width {x.shape[1]} does not match encoder")
        parts.append(mlp(params, f"enc.{nc.name}", Tensor(x), 3))
    return nx.gather_rows(nx.concat(parts, axis=0), batch.seg_restore)


def compose_weight(coefs, basis) -> Tensor:
    """Relation weight ``sum_b coefs[b] * basis[b]``.

    ``coefs`` may be a vector (one relation) or an ``(R, B)`` matrix, giving
    an ``(R, out, in)`` stack.
    """
    coefs, basis = nx.as_tensor(coefs), nx.as_tensor(basis)
    if basis.data.ndim != 3 or coefs.shape[-1] != basis.shape[0]:
        raise ContractError(f"coefficients {coefs.shape} do not match basis {basis.shape}")
    B, dout, din = basis.shape
    flat = nx.reshape(basis, (B, dout * din))
    if coefs.data.ndim == 1:
        return nx.reshape(nx.matmul(nx.reshape(coefs, (1, B)), flat), (dout, din))
    R = coefs.shape[0]
    return nx.reshape(nx.matmul(coefs, flat), (R, dout, din))


def _combine(batch: GraphBatch, agent_out: Tensor, features_in: Tensor) -> Tensor:
    # non-agent nodes keep their features when the width is unchanged
    mask = batch.is_agent.astype(agent_out.data.dtype)[:, None]
    return agent_out * mask + features_in * (1.0 - mask)


def rgcn_layer(batch: GraphBatch, features_in: Tensor, params: Mapping[str, Tensor],
               prefix: str) -> Tensor:
    """Relational graph convolution with basis-decomposed relation weights.

    Agent node i gets ``sigmoid(sum_r sum_{j in N_i^r} W_r v_j / |N_i^r| + W_0 v_i)``
    with ``W_r = sum_b coef[r, b] basis[b]``.
    """
    W0, basis, coef = params[f"{prefix}.self"], params[f"{prefix}.basis"], params[f"{prefix}.coef"]
    B, dout, din = basis.shape
    R = coef.shape[0]
    n = batch.num_nodes
    if features_in.shape != (n, din):
        raise DimensionError(f"layer {prefix}: features {features_in.shape}, expected {(n, din)}")
    pre = nx.matmul(features_in, nx.transpose(W0))
    if len(batch.src):
        # W_r is linear, so average neighbours per (relation, target) first,
        # mix relations into bases, then apply each basis once
        nt = len(batch.targets)
        dt = features_in.data.dtype
        msg = nx.gather_rows(features_in, batch.seg_src) * batch.norm.astype(dt)[:, None]
        agg = nx.reshape(nx.segment_sum(msg, batch.seg_slot, R * nt), (R, nt * din))
        mixed = nx.reshape(nx.matmul(nx.transpose(coef), agg), (B, nt, din))
        per_basis = nx.batched_matmul(mixed, nx.permute(basis, (0, 2, 1)))
        pre = pre + nx.segment_sum(nx.sum(per_basis, 0), batch.seg_targets, n)
    out = nx.sigmoid(pre)
    return _combine(batch, out, features_in) if din == dout else out


def rgcn_layer_dense(batch: GraphBatch, features_in: Tensor, weights: Sequence[Tensor],
                     W0: Tensor) -> Tensor:
    """The same convolution with one independent matrix per relation."""
    n = batch.num_nodes
    din = W0.shape[1]
    pre = nx.matmul(features_in, nx.transpose(W0))
    dt = features_in.data.dtype
    for r, Wr in enumerate(weights):
        sel = batch.rel == r
        if not sel.any():
            continue
        msg = nx.matmul(nx.gather_rows(features_in, batch.src[sel]), nx.transpose(Wr))
        msg = msg * batch.norm[sel].astype(dt)[:, None]
        pre = pre + nx.segment_sum(msg, batch.dst[sel], n)
    out = nx.sigmoid(pre)
    return _combine(batch, out, features_in) if din == W0.shape[0] else out


@dataclass
class Attention:
    """Attention weights of one layer over (source, target) member pairs."""
    src: np.ndarray
    dst: np.ndarray
    weights: Tensor  # (members, heads)


def gat_layer(batch: GraphBatch, features_in: Tensor, params: Mapping[str, Tensor],
              prefix: str) -> tuple[Tensor, Attention]:
    """Multi-head graph attention over in-neighbours plus self; heads concatenated."""
    proj = params[f"{prefix}.proj"]
    a_src, a_dst = params[f"{prefix}.att_src"], params[f"{prefix}.att_dst"]
    H, dh = a_src.shape
    dout, din = proj.shape
    n = batch.num_nodes
    if features_in.shape != (n, din):
        raise DimensionError(f"layer {prefix}: features {features_in.shape}, expected {(n, din)}")
    z = nx.reshape(nx.matmul(features_in, nx.transpose(proj)), (n, H, dh))
    s_src = nx.sum(z * a_src, axis=2)
    s_dst = nx.sum(z * a_dst, axis=2)
    src, dst = batch.seg_member_src, batch.seg_member_dst
    logits = nx.leaky_relu(nx.gather_rows(s_dst, dst) + nx.gather_rows(s_src, src))
    alpha = nx.segment_softmax(logits, dst, n)
    msg = nx.gather_rows(z, src) * nx.reshape(alpha, (len(src), H, 1))
    out = nx.sigmoid(nx.reshape(nx.segment_sum(msg, dst, n), (n, dout)))
    if din == dout:
        out = _combine(batch, out, features_in)
    return out, Attention(batch.member_src, batch.member_dst, alpha)


# ---------------------------------------------------------------- full network


@dataclass
class ForwardOutput:
    batch: GraphBatch
    q: dict[int, Tensor]  # agent class -> (agents of that class, actions)
    attention: list[Attention]

    def per_agent(self, graph_index: int = 0) -> dict[int, np.ndarray]:
        """Q vectors of one graph's agents keyed by their node id."""
        out = {}
        for c, q in self.q.items():
            sel = self.batch.agent_graph[c] == graph_index
            for local, row in zip(self.batch.agent_local[c][sel], q.data[sel]):
                out[int(local)] = row
        return out


def forward(graphs, params: Mapping[str, Tensor], cfg: ModelConfig,
            check: bool = True) -> ForwardOutput:
    batch = as_batch(graphs, cfg.class_table, check=check)
    h = encode(batch, params)
    outputs, attention = [], []
    for k in range(len(cfg.comm_dims)):
        if cfg.comms == "rgcn":
            h = rgcn_layer(batch, h, params, f"comm.{k}")
        else:
            h, att = gat_layer(batch, h, params, f"comm.{k}")
            attention.append(att)
        outputs.append(h)
    obs = nx.concat(outputs, axis=1) if cfg.frf else h
    q = {}
    for c in cfg.class_table.agent_classes:
        rows = batch.agent_rows[c]
        if not len(rows):
            continue
        name = cfg.class_table[c].name
        q[c] = mlp(params, f"head.{name}", nx.gather_rows(obs, batch.seg_agents[c]), 3,
                   final_sigmoid=False)
    return ForwardOutput(batch, q, attention)


def select_actions(q_vectors: Mapping[int, np.ndarray], masks: Mapping[int, np.ndarray],
                   epsilon: float, rng: np.random.Generator) -> dict[int, int]:
    """Epsilon-greedy over valid actions; greedy ties go to the lowest id."""
    out = {}
    for a in sorted(q_vectors):
        q, m = np.asarray(q_vectors[a]), np.asarray(masks[a], dtype=bool)
        if q.shape != m.shape:
            raise ContractError(f"agent {a}: {q.shape[0]} Q values for a mask of {m.shape[0]}")
        valid = np.flatnonzero(m)
        if not valid.size:
            raise ContractError(f"agent {a} has no valid action")
        if rng.random() < epsilon:
            out[a] = int(valid[rng.integers(valid.size)])
        else:
            out[a] = int(np.argmax(np.where(m, q, NEG_INF)))
    return out


def infer_config(params: Mapping[str, Tensor], table: ClassTable) -> ModelConfig:
    """Recover the architecture from a parameter registry."""
    comms = "rgcn" if "comm.0.basis" in params else "gat"
    k = 0
    dims = []
    while f"comm.{k}.self" in params or f"comm.{k}.proj" in params:
        w = params[f"comm.{k}.self"] if comms == "rgcn" else params[f"comm.{k}.proj"]
        dims.append(w.shape[0])
        k += 1
    first = table[0].name
    head = table[table.agent_classes[0]].name
    head_in = params[f"head.{head}.0.W"].shape[1]
    kw = dict(class_table=table, comms=comms, comm_dims=tuple(dims),
              embed_dim=params[f"enc.{first}.2.W"].shape[0],
              encoder_hidden=params[f"enc.{first}.0.W"].shape[0],
              head_hidden=params[f"head.{head}.0.W"].shape[0],
              frf=head_in != dims[-1])
    if comms == "rgcn":
        kw["num_bases"] = params["comm.0.basis"].shape[0]
    else:
        kw["gat_heads"] = params["comm.0.att_src"].shape[0]
    return ModelConfig(**kw)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor]) -> None:
    chunks = [MAGIC]
    for name, t in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Params:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise FormatError("missing HMAGQ1 magic", 0)
    pos = len(MAGIC)
    params: Params = {}

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        start = pos
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("name is not utf-8", start + 4) from None
        (rank,) = struct.unpack("<I", take(4, "rank"))
        if rank > 8:
            raise FormatError(f"implausible rank {rank}", pos - 4)
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * count, "tensor data"), dtype="<f4").reshape(dims)
        if name in params:
            raise FormatError(f"duplicate parameter {name!r}", start)
        with nx.precision(np.float32):
            params[name] = Tensor(data.astype(np.float32), name=name)
    return params


def clone_params(params: Mapping[str, Tensor]) -> Params:
    return {k: Tensor(v.data.copy(), name=k) for k, v in params.items()}


def network_gradient_error(graphs: Sequence[StateGraph], cfg: ModelConfig,
                           rng: np.random.Generator, max_entries: int | None = 4) -> float:
    """Worst relative gradient error of the whole network, checked per graph in float64.

    The scalar under test is a fixed random projection of every Q value, so
    no parameter's gradient cancels by symmetry.
    """
    worst = 0.0
    with nx.precision(np.float64):
        for g in graphs:
            params = cast_params(init_params(cfg, rng), np.float64)
            probe = forward(g, params, cfg)
            proj = {c: rng.normal(size=q.shape) for c, q in probe.q.items()}

            def loss(p, g=g, proj=proj):
                out = forward(g, p, cfg)
                terms = [nx.sum(out.q[c] * proj[c]) for c in proj]
                total = terms[0]
                for t in terms[1:]:
                    total = total + t
                return total

            worst = max(worst, nx.check_gradients(loss, params, max_entries=max_entries,
                                                  rng=rng))
    return worst
