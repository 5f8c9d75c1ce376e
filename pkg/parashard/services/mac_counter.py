"""Instrumented tiny forward passes that count FLOPs by executing them.

Every contraction adds 2 FLOPs per multiply-add, i.e. twice the product of all
index sizes of the einsum. Elementwise work is tallied separately as vector
FLOPs. Tensors are random; only shapes matter for the count.
"""
from __future__ import annotations

import re
from typing import Dict, Optional

import numpy as np

from ..config import ModelSpec, WorkloadSpec, derive_dims
from ..mamba_costs import PARALLEL_SCAN

_OPERAND = re.compile(r"[a-zA-Z]+")


class MacCounter:
    def __init__(self) -> None:
        self.cube = 0
        self.vector = 0
        self.by_label: Dict[str, int] = {}

    def _add(self, label: str, flops: int, vector: bool = False) -> None:
        if vector:
            self.vector += flops
        else:
            self.cube += flops
        self.by_label[label] = self.by_label.get(label, 0) + flops

    def einsum(self, label: str, subscripts: str, *operands: np.ndarray) -> np.ndarray:
        inputs = subscripts.split("->")[0].split(",")
        sizes: Dict[str, int] = {}
        for spec, operand in zip(inputs, operands):
            for letter, size in zip(_OPERAND.fullmatch(spec.strip()).group(), operand.shape):  # type: ignore[union-attr]
                sizes[letter] = size
        macs = int(np.prod(list(sizes.values()), dtype=np.int64))
        self._add(label, 2 * macs)
        return np.einsum(subscripts, *operands)

    def matmul(self, label: str, x: np.ndarray, weight: np.ndarray) -> np.ndarray:
        flat = self.einsum(label, "zi,ij->zj", x.reshape(-1, x.shape[-1]), weight)
        return flat.reshape(*x.shape[:-1], weight.shape[-1])

    def softmax(self, label: str, scores: np.ndarray, axis: int = -1) -> np.ndarray:
        # max, subtract, exp, sum, divide
        self._add(label, 5 * scores.size, vector=True)
        shifted = scores - scores.max(axis=axis, keepdims=True)
        weights = np.exp(shifted)
        return weights / weights.sum(axis=axis, keepdims=True)

    def swiglu(self, label: str, gate: np.ndarray, up: np.ndarray) -> np.ndarray:
        # sigmoid (3), gate multiply, up multiply
        self._add(label, 5 * gate.size, vector=True)
        return gate / (1.0 + np.exp(-gate)) * up

    def scale(self, label: str, x: np.ndarray, factor: np.ndarray) -> np.ndarray:
        out = x * factor
        self._add(label, out.size, vector=True)
        return out

    def carry(self, label: str, decay: np.ndarray, state: np.ndarray, update: np.ndarray) -> np.ndarray:
        out = decay * state + update
        self._add(label, 2 * out.size, vector=True)
        return out


def _rng(rng: Optional[np.random.Generator]) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(0)


def count_gqa(m: ModelSpec, w: WorkloadSpec, rng: Optional[np.random.Generator] = None) -> MacCounter:
    rng = _rng(rng)
    b, s, d, a, k, d_h = w.b, w.s, m.d, m.a, m.k, m.d_h
    counter = MacCounter()
    x = rng.standard_normal((b, s, d))
    q = counter.matmul("q_proj", x, rng.standard_normal((d, a * d_h))).reshape(b, s, a, d_h)
    key = counter.matmul("k_proj", x, rng.standard_normal((d, k * d_h))).reshape(b, s, k, d_h)
    value = counter.matmul("v_proj", x, rng.standard_normal((d, k * d_h))).reshape(b, s, k, d_h)
    # each KV head serves a/k query heads
    key = np.repeat(key, a // k, axis=2)
    value = np.repeat(value, a // k, axis=2)
    scores = counter.einsum("scores", "bqhe,bkhe->bhqk", q, key)
    probs = counter.softmax("softmax", scores)
    context = counter.einsum("context", "bhqk,bkhe->bqhe", probs, value)
    counter.matmul("o_proj", context.reshape(b, s, a * d_h), rng.standard_normal((a * d_h, d)))
    return counter


def count_mlp(m: ModelSpec, w: WorkloadSpec, rng: Optional[np.random.Generator] = None) -> MacCounter:
    rng = _rng(rng)
    counter = MacCounter()
    x = rng.standard_normal((w.b, w.s, m.d))
    gate = counter.matmul("gate_proj", x, rng.standard_normal((m.d, m.I)))
    up = counter.matmul("up_proj", x, rng.standard_normal((m.d, m.I)))
    hidden = counter.swiglu("swiglu", gate, up)
    counter.matmul("down_proj", hidden, rng.standard_normal((m.I, m.d)))
    return counter


def count_mamba(
    m: ModelSpec,
    w: WorkloadSpec,
    scan_mode: str = PARALLEL_SCAN,
    rng: Optional[np.random.Generator] = None,
) -> MacCounter:
    """Projections plus the five SSD contractions; labels ssd_1 .. ssd_5 and decay."""
    rng = _rng(rng)
    dims = derive_dims(m)
    b, s, d, h, p, n, l = w.b, w.s, m.d, m.h, m.p, m.n, m.l
    c = s // l
    counter = MacCounter()

    x = rng.standard_normal((b, s, d))
    counter.matmul("in_proj", x, rng.standard_normal((d, dims.d_inproj)))

    X = rng.standard_normal((b, c, l, h, p))
    B = rng.standard_normal((b, c, l, h, n))
    C = rng.standard_normal((b, c, l, h, n))
    mask = np.tril(rng.uniform(0.5, 1.0, (b, h, c, l, l)))
    decay_states = rng.uniform(0.5, 1.0, (b, c, l, h, 1))
    decay_out = rng.uniform(0.5, 1.0, (b, c, l, h, 1))
    chunk_decay = rng.uniform(0.5, 1.0, (b, h, c))

    scores = counter.einsum("ssd_1", "bclhn,bcshn->bhcls", C, B)
    scores = counter.scale("decay", scores, mask)
    y_diag = counter.einsum("ssd_2", "bhcls,bcshp->bclhp", scores, X)

    B_decayed = counter.scale("decay", B, np.broadcast_to(decay_states, B.shape))
    states = counter.einsum("ssd_3", "bclhn,bclhp->bchpn", B_decayed, X)

    if scan_mode == PARALLEL_SCAN:
        # linear prefix over chunks: one multiply-add per chunk boundary
        carried = np.zeros((b, c + 1, h, p, n))
        for chunk in range(c):
            decay = chunk_decay[:, :, chunk, None, None]
            carried[:, chunk + 1] = counter.carry("ssd_4", decay, carried[:, chunk], states[:, chunk])
        prev_states = carried[:, :c]
    else:
        # weight of chunk i in the state entering chunk z, zero for i >= z
        weights = np.tril(rng.uniform(0.5, 1.0, (b, h, c + 1, c)), k=-1)
        carried = counter.einsum("ssd_4", "bhzc,bchpn->bzhpn", weights, states)
        prev_states = carried[:, :c]

    y_off = counter.einsum("ssd_5", "bclhn,bchpn->bclhp", C, prev_states)
    y_off = counter.scale("decay", y_off, np.broadcast_to(decay_out, y_off.shape))

    y = (y_diag + y_off).reshape(b, s, h * p)
    counter.matmul("out_proj", np.resize(y, (b, s, dims.d_inner)), rng.standard_normal((dims.d_inner, d)))
    return counter


__all__ = ["MacCounter", "count_gqa", "count_mamba", "count_mlp"]
