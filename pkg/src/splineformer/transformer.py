"""Attention modules, feed-forward networks, and encoder/decoder stacks.

All evaluation is pure: parameter containers are frozen dataclasses and
may be shared freely across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Sequence

from .tensor import (FLOAT, RATIONAL, BackendError, Mat, ShapeError, add,
                     apply_mask, broadcast_cols, mat_from_json, mat_to_json,
                     matmul, relu, scale, softmax_columns, softplus_beta,
                     stack_rows, transpose)


@dataclass(frozen=True)
class Activation:
    kind: str  # "relu" | "softmax" | "softplus"
    beta: float | None = None

    def __post_init__(self):
        if self.kind not in ("relu", "softmax", "softplus"):
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "softplus" and (self.beta is None or self.beta <= 0):
            raise ValueError("softplus needs a positive beta")


RELU = Activation("relu")
SOFTMAX = Activation("softmax")


def softplus(beta: float) -> Activation:
    return Activation("softplus", float(beta))


@dataclass(frozen=True)
class AttentionHead:
    """Affine query/key/value maps: the head computes
    V(X) . act(K(X)^T Q(Y)) with Y = X for self-attention."""

    a_q: Mat
    b_q: Mat
    a_k: Mat
    b_k: Mat
    a_v: Mat
    b_v: Mat
    activation: Activation = RELU
    masked: bool = False
    scaled: bool = False  # optional 1/sqrt(d) score scaling, off by default

    def __post_init__(self):
        d = self.a_q.rows
        if self.a_k.rows != d or self.b_q.rows != d or self.b_k.rows != d:
            raise ShapeError("query/key maps must share the head dimension d")
        p = self.b_q.cols
        if self.b_k.cols != p or self.b_v.cols != p:
            raise ShapeError("bias matrices must share the sequence length p")
        if self.a_v.rows != self.b_v.rows:
            raise ShapeError("value map rows inconsistent")
        if self.a_k.cols != self.a_v.cols:
            raise ShapeError("key and value maps must read the same input rows")

    @property
    def d(self) -> int:
        return self.a_q.rows

    @property
    def n(self) -> int:
        return self.a_k.cols

    @property
    def n_q(self) -> int:
        return self.a_q.cols

    @property
    def m(self) -> int:
        return self.a_v.rows

    @property
    def p(self) -> int:
        return self.b_q.cols


def _affine(a: Mat, x: Mat, b: Mat) -> Mat:
    return add(matmul(a, x), b)


def _activate(activation: Activation, scores):
    if activation.kind == "relu":
        return relu(scores)
    if activation.kind == "softmax":
        return softmax_columns(scores)
    return softplus_beta(scores, activation.beta)


def _scores(head: AttentionHead, kx: Mat, qy: Mat):
    s = matmul(transpose(kx), qy)
    if head.scaled:
        if s.backend != FLOAT:
            raise BackendError("score scaling needs the float backend (1/sqrt(d) is irrational)")
        s = scale(s, 1.0 / math.sqrt(head.d))
    if head.masked:
        s = apply_mask(s)
    return s


def eval_attention(head: AttentionHead, x: Mat) -> Mat:
    """Self-attention on an n x p input; masking happens before the activation."""
    if x.shape != (head.n, head.p):
        raise ShapeError(f"attention input {x.shape}, head expects {(head.n, head.p)}")
    if head.n_q != head.n:
        raise ShapeError("head has distinct query input size; use eval_encdec_attention")
    if x.backend == RATIONAL and head.activation.kind != "relu":
        raise BackendError(f"{head.activation.kind} attention needs the float backend")
    q = _affine(head.a_q, x, head.b_q)
    k = _affine(head.a_k, x, head.b_k)
    v = _affine(head.a_v, x, head.b_v)
    return matmul(v, _activate(head.activation, _scores(head, k, q)))


def eval_encdec_attention(head: AttentionHead, x: Mat, y: Mat) -> Mat:
    """Cross-attention: keys and values from x, queries from y."""
    if x.rows != head.n or y.rows != head.n_q:
        raise ShapeError(f"cross-attention inputs {x.shape}/{y.shape}, "
                         f"head expects rows {head.n}/{head.n_q}")
    if x.cols != head.p or y.cols != head.p:
        raise ShapeError("cross-attention inputs must share the sequence length")
    if x.backend == RATIONAL and head.activation.kind != "relu":
        raise BackendError(f"{head.activation.kind} attention needs the float backend")
    q = _affine(head.a_q, y, head.b_q)
    k = _affine(head.a_k, x, head.b_k)
    v = _affine(head.a_v, x, head.b_v)
    return matmul(v, _activate(head.activation, _scores(head, k, q)))


@dataclass(frozen=True)
class MultiheadAttention:
    heads: tuple

    def __post_init__(self):
        if not self.heads:
            raise ValueError("multihead attention needs at least one head")
        h0 = self.heads[0]
        for h in self.heads[1:]:
            if (h.n, h.n_q, h.p, h.m) != (h0.n, h0.n_q, h0.p, h0.m):
                raise ShapeError("heads must share input shape and output rows")

    @property
    def n(self) -> int:
        return self.heads[0].n

    @property
    def p(self) -> int:
        return self.heads[0].p

    @property
    def out_rows(self) -> int:
        return sum(h.m for h in self.heads)


def eval_multihead(mh: MultiheadAttention, x: Mat) -> Mat:
    return stack_rows([eval_attention(h, x) for h in mh.heads])


def eval_multihead_encdec(mh: MultiheadAttention, x: Mat, y: Mat) -> Mat:
    return stack_rows([eval_encdec_attention(h, x, y) for h in mh.heads])


@dataclass(frozen=True)
class FeedForwardNet:
    """Chain of affine layers (A, column-vector b) with ReLU in between;
    the final layer is affine with no activation.  Applied columnwise."""

    layers: tuple

    def __post_init__(self):
        if not self.layers:
            raise ValueError("feed-forward net needs at least one layer")
        for a, b in self.layers:
            if b.rows != a.rows or b.cols != 1:
                raise ShapeError(f"bias {b.shape} does not fit layer of {a.rows} rows")
        for (a1, _), (a2, _) in zip(self.layers, self.layers[1:]):
            if a2.cols != a1.rows:
                raise ShapeError(f"layer chain mismatch: {a1.shape} then {a2.shape}")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].cols

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].rows

    @property
    def hidden_layers(self) -> int:
        return len(self.layers) - 1

    @property
    def depth(self) -> int:
        """Number of affine layers."""
        return len(self.layers)


def eval_ffn(ffn: FeedForwardNet, x: Mat) -> Mat:
    if x.rows != ffn.in_dim:
        raise ShapeError(f"ffn expects {ffn.in_dim} input rows, got {x.rows}")
    p = x.cols
    out = x
    last = len(ffn.layers) - 1
    for idx, (a, b) in enumerate(ffn.layers):
        out = add(matmul(a, out), broadcast_cols(b, p))
        if idx != last:
            out = relu(out)
    return out


@dataclass(frozen=True)
class EncoderBlock:
    attn: MultiheadAttention
    ffn: FeedForwardNet
    residual: bool = False

    def __post_init__(self):
        if self.ffn.in_dim != self.attn.out_rows:
            raise ShapeError(f"ffn reads {self.ffn.in_dim} rows but attention emits "
                             f"{self.attn.out_rows}")
        if self.residual and self.ffn.out_dim != self.attn.n:
            raise ShapeError("residual connection needs output shape = input shape")

    @property
    def masked(self) -> bool:
        return all(h.masked for h in self.attn.heads)


@dataclass(frozen=True)
class DecoderBlock(EncoderBlock):
    def __post_init__(self):
        super().__post_init__()
        if not all(h.masked for h in self.attn.heads):
            raise ValueError("decoder blocks require every head to be masked")


def eval_encoder(blocks: Sequence[EncoderBlock], x: Mat) -> Mat:
    """Compose blocks left to right; an empty list is the identity."""
    out = x
    for i, blk in enumerate(blocks):
        try:
            y = eval_ffn(blk.ffn, eval_multihead(blk.attn, out))
            out = add(y, out) if blk.residual else y
        except ShapeError as exc:
            raise ShapeError(f"block {i}: {exc}") from exc
    return out


@dataclass(frozen=True)
class EncDecStage:
    """One decoder-side stage: masked self-attention, cross-attention
    reading the encoder output, then a feed-forward net."""

    self_attn: MultiheadAttention
    cross_attn: MultiheadAttention
    ffn: FeedForwardNet
    residual: bool = False

    def __post_init__(self):
        if not all(h.masked for h in self.self_attn.heads):
            raise ValueError("stage self-attention must be masked")


@dataclass(frozen=True)
class EncDecStack:
    encoder: tuple  # EncoderBlock chain
    stages: tuple   # EncDecStage chain


def eval_encdec(stack: EncDecStack, x: Mat, y: Mat) -> Mat:
    """Recursive evaluation: stage i maps t to ffn(cross(enc(x), self(t))),
    starting from t = y; the encoder output is computed once and reused."""
    memo = eval_encoder(stack.encoder, x)
    t = y
    for i, stage in enumerate(stack.stages):
        try:
            s = eval_multihead(stage.self_attn, t)
            c = eval_multihead_encdec(stage.cross_attn, memo, s)
            out = eval_ffn(stage.ffn, c)
            t = add(out, t) if stage.residual else out
        except ShapeError as exc:
            raise ShapeError(f"stage {i}: {exc}") from exc
    return t


# -- convenience models ------------------------------------------------------

class EncoderModel:
    """Callable wrapper around a block chain with inferred input shape."""

    def __init__(self, blocks: Sequence[EncoderBlock]):
        if not blocks:
            raise ValueError("need at least one block")
        self.blocks = tuple(blocks)
        head = self.blocks[0].attn.heads[0]
        self.n = head.n
        self.p = head.p

    def __call__(self, x: Mat) -> Mat:
        return eval_encoder(self.blocks, x)


def identity_ffn(dim: int) -> FeedForwardNet:
    """x = relu(x) - relu(-x) as a one-hidden-layer net."""
    i = Mat.identity(dim)
    a1 = stack_rows([i, scale(i, Fraction(-1))])
    a2 = Mat(RATIONAL, tuple(row_a + row_b for row_a, row_b in
                             zip(i.data, scale(i, Fraction(-1)).data)))
    return FeedForwardNet(((a1, Mat.zeros(2 * dim, 1)), (a2, Mat.zeros(dim, 1))))


def blocks_to_float(blocks: Sequence[EncoderBlock]) -> tuple:
    out = []
    for blk in blocks:
        heads = tuple(replace(h, a_q=h.a_q.to_float(), b_q=h.b_q.to_float(),
                              a_k=h.a_k.to_float(), b_k=h.b_k.to_float(),
                              a_v=h.a_v.to_float(), b_v=h.b_v.to_float())
                      for h in blk.attn.heads)
        ffn = FeedForwardNet(tuple((a.to_float(), b.to_float()) for a, b in blk.ffn.layers))
        out.append(EncoderBlock(MultiheadAttention(heads), ffn, blk.residual))
    return tuple(out)


# -- JSON wire format ----------------------------------------------------------

def _head_to_json(h: AttentionHead):
    obj = {"A_Q": mat_to_json(h.a_q), "B_Q": mat_to_json(h.b_q),
           "A_K": mat_to_json(h.a_k), "B_K": mat_to_json(h.b_k),
           "A_V": mat_to_json(h.a_v), "B_V": mat_to_json(h.b_v),
           "masked": h.masked, "activation": h.activation.kind}
    if h.activation.kind == "softplus":
        obj["beta"] = h.activation.beta
    if h.scaled:
        obj["scaled"] = True
    return obj


def _head_from_json(obj) -> AttentionHead:
    act = Activation(obj.get("activation", "relu"),
                     obj.get("beta") if obj.get("activation") == "softplus" else None)
    return AttentionHead(
        a_q=mat_from_json(obj["A_Q"]), b_q=mat_from_json(obj["B_Q"]),
        a_k=mat_from_json(obj["A_K"]), b_k=mat_from_json(obj["B_K"]),
        a_v=mat_from_json(obj["A_V"]), b_v=mat_from_json(obj["B_V"]),
        activation=act, masked=bool(obj.get("masked", False)),
        scaled=bool(obj.get("scaled", False)))


def blocks_to_json(blocks: Sequence[EncoderBlock]):
    return {"blocks": [
        {"heads": [_head_to_json(h) for h in blk.attn.heads],
         "ffn": {"layers": [{"A": mat_to_json(a), "b": mat_to_json(b)}
                            for a, b in blk.ffn.layers]},
         "residual": blk.residual}
        for blk in blocks]}


def blocks_from_json(obj) -> tuple:
    out = []
    for b in obj["blocks"]:
        heads = MultiheadAttention(tuple(_head_from_json(h) for h in b["heads"]))
        ffn = FeedForwardNet(tuple((mat_from_json(l["A"]), mat_from_json(l["b"]))
                                   for l in b["ffn"]["layers"]))
        out.append(EncoderBlock(heads, ffn, bool(b.get("residual", False))))
    return tuple(out)
