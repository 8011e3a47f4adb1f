"""Neural processor: enricher, static/dynamic contextualizers, fuser.

Every function operates on the trailing ``(C, features)`` axes and
broadcasts over any leading axes, so a ``(B, n, C, d)`` tensor of split
blocks is processed split-by-split in a single call.  Nothing couples two
splits here; cross-split information only arrives through the ranker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .numerics import ConfigurationError, Matrix, Rng, glorot_uniform


@dataclass
class LayerSpec:
    """One processor layer; ``V`` exists for static and coupled layers only."""

    kind: str  # "static" | "dynamic" | "coupled"
    U: Matrix
    b: Matrix | None
    O: Matrix
    V: Matrix | None = None
    b_mix: Matrix | None = None
    m_h: int = 0

    def params(self, prefix: str) -> dict[str, Matrix]:
        out = {f"{prefix}.U": self.U, f"{prefix}.O": self.O}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        if self.V is not None:
            out[f"{prefix}.V"] = self.V
        if self.b_mix is not None:
            out[f"{prefix}.b_mix"] = self.b_mix
        return out


@dataclass
class SimilarityPair:
    raw: Matrix
    normalized: Matrix


@dataclass
class LayerTrace:
    """Intermediate activations of one layer, kept for introspection."""

    kind: str
    mixed: Matrix | None = None
    output: Matrix | None = None
    similarity: SimilarityPair | None = None


def init_layer(rng: Rng, kind: str, cfg: ModelConfig, C: int | None = None) -> LayerSpec:
    C = C or cfg.context_width
    d, m, dc = cfg.d, cfg.m, cfg.d_ctx
    dt = np.dtype(cfg.dtype)
    U = Matrix.param(glorot_uniform(rng.child("U"), d, m).astype(dt))
    O = Matrix.param(glorot_uniform(rng.child("O"), cfg.m_h + dc, d).astype(dt))
    b = Matrix.param(np.zeros((1, m), dtype=dt)) if cfg.bias_on else None
    V = None
    if kind in ("static", "coupled"):
        V = Matrix.param(glorot_uniform(rng.child("V"), C, C).astype(dt))
    b_mix = Matrix.param(np.zeros((C, dc), dtype=dt)) if cfg.bias_on else None
    return LayerSpec(kind, U, b, O, V, b_mix, m_h=cfg.m_h)


def enrich(x: Matrix, layer: LayerSpec) -> tuple[Matrix, Matrix, Matrix]:
    """ReLU^2 expansion split into bypass head, gate half and contextual half."""
    z = x @ layer.U
    if layer.b is not None:
        z = z + layer.b
    z = nx.relu_squared(z)
    tail = z.cols - layer.m_h
    half = tail // 2
    if layer.m_h:
        z_h, z_tl, z_tr = nx.split_cols(z, [layer.m_h, half, half])
    else:
        z_h = None
        z_tl, z_tr = nx.split_cols(z, [half, half])
    return z_h, z_tl, z_tr


def static_mix(z_tr: Matrix, V: Matrix, b_s: Matrix | None = None) -> Matrix:
    if V.shape[-1] != z_tr.rows:
        raise ConfigurationError(f"static mixing matrix {V.shape} does not match C={z_tr.rows}")
    pre = V @ z_tr
    if b_s is not None:
        pre = pre + b_s
    return nx.relu(pre)


def normalize_similarity(S: Matrix, scheme: str = "divide_by_sum", eps: float = 1e-6,
                         temperature: float = 1.0) -> Matrix:
    """Row-wise normalisation of a similarity matrix.

    ``temperature`` only affects ``scaled_softmax``, which computes
    ``softmax(S / temperature)``.
    """
    if scheme == "divide_by_sum":
        return S / (S.sum(axis=-1, keepdims=True) + eps)
    if scheme == "rms":
        ms = nx.reduce_mean(S * S, axis=-1, keepdims=True)
        return S / (nx.sqrt(ms + eps * eps) + eps)
    if scheme == "softmax":
        return nx.softmax(S, axis=-1)
    if scheme == "scaled_softmax":
        return nx.softmax(S * (1.0 / temperature), axis=-1)
    if scheme == "none":
        return S
    raise ConfigurationError(f"unknown normalization {scheme!r}")


def _temperature(z_tr: Matrix) -> float:
    # cosines are already length-normalised; 1/sqrt(d') sharpens them the way
    # a dot-product temperature would
    return 1.0 / math.sqrt(z_tr.cols)


def cosine_similarity(z_tr: Matrix) -> Matrix:
    unit = nx.row_l2_normalize(z_tr)
    return unit @ nx.transpose(unit)


def dynamic_mix(z_tr: Matrix, b_d: Matrix | None = None, eps: float = 1e-6,
                scheme: str = "divide_by_sum") -> tuple[Matrix, SimilarityPair]:
    S = cosine_similarity(z_tr)
    S_tilde = normalize_similarity(S, scheme, eps, _temperature(z_tr))
    pre = S_tilde @ z_tr
    if b_d is not None:
        pre = pre + b_d
    return nx.relu(pre), SimilarityPair(S, S_tilde)


def coupled_mix(z_tr: Matrix, V: Matrix, b: Matrix | None = None, eps: float = 1e-6,
                scheme: str = "divide_by_sum") -> tuple[Matrix, SimilarityPair]:
    """Element-wise coupling ``(V * S~) @ z_tr`` (the original Avey contextualizer)."""
    S = cosine_similarity(z_tr)
    S_tilde = normalize_similarity(S, scheme, eps, _temperature(z_tr))
    pre = (V * S_tilde) @ z_tr
    if b is not None:
        pre = pre + b
    return nx.relu(pre), SimilarityPair(S, S_tilde)


def gate(z_tl: Matrix, mixed: Matrix) -> Matrix:
    if z_tl.shape != mixed.shape:
        raise ConfigurationError(f"gate shapes differ: {z_tl.shape} vs {mixed.shape}")
    return z_tl * mixed


def fuse(z_h: Matrix | None, ctx: Matrix, O: Matrix) -> Matrix:
    feats = ctx if z_h is None or z_h.cols == 0 else nx.concat([z_h, ctx], axis=-1)
    if feats.cols != O.rows:
        raise ConfigurationError(f"fuser expects {O.rows} input features, got {feats.cols}")
    return feats @ O


def layer_forward(x: Matrix, layer: LayerSpec, cfg: ModelConfig,
                  trace: LayerTrace | None = None) -> Matrix:
    z_h, z_tl, z_tr = enrich(x, layer)
    sim = None
    with nx.flop_scope("mixing"):
        if layer.kind == "static":
            mixed = static_mix(z_tr, layer.V, layer.b_mix)
        elif layer.kind == "dynamic":
            mixed, sim = dynamic_mix(z_tr, layer.b_mix, cfg.eps_sim, cfg.normalization)
        elif layer.kind == "coupled":
            mixed, sim = coupled_mix(z_tr, layer.V, layer.b_mix, cfg.eps_sim, cfg.normalization)
        else:
            raise ConfigurationError(f"unknown layer kind {layer.kind!r}")
    ctx = gate(z_tl, mixed) if cfg.gate_on else mixed
    out = x + fuse(z_h, ctx, layer.O)
    if trace is not None:
        trace.mixed, trace.output, trace.similarity = mixed, out, sim
    return out


def stack_forward(blocks: Matrix, layers: list[LayerSpec], cfg: ModelConfig,
                  traces: list[LayerTrace] | None = None) -> Matrix:
    """Run every split block ``(..., C, d)`` through all layers independently."""
    if not layers:
        raise ConfigurationError("layer pattern must be nonempty")
    x = blocks
    with nx.flop_scope("processor"):
        for layer in layers:
            tr = LayerTrace(layer.kind) if traces is not None else None
            x = layer_forward(x, layer, cfg, tr)
            if traces is not None:
                traces.append(tr)
    return x


def layer_param_count(kind: str, cfg: ModelConfig, C: int | None = None) -> int:
    C = C or cfg.context_width
    n = cfg.d * cfg.m + (cfg.m_h + cfg.d_ctx) * cfg.d
    if cfg.bias_on:
        n += cfg.m + C * cfg.d_ctx
    if kind in ("static", "coupled"):
        n += C * C
    return n
