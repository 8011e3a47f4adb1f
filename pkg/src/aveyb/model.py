"""End-to-end masked-language model: embed -> rank/compress -> process -> tied head."""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from . import ranker as rk
from .config import ModelConfig
from .numerics import Matrix, Rng, glorot_uniform
from .processor import LayerSpec, LayerTrace, init_layer, layer_param_count, stack_forward
from .tokenizer import MASK_ID, PAD_ID

MAGIC = b"AVYB"
FORMAT_VERSION = 1


class InputError(ValueError):
    """Token ids or batch contents the model cannot accept."""


class CheckpointFormatError(ValueError):
    """A checkpoint file that does not parse; the message names the failing section."""


class EmptyMaskWarning(UserWarning):
    pass


@dataclass
class MaskedBatch:
    input_ids: np.ndarray          # (B, N) with [MASK] substituted
    target_ids: np.ndarray         # (M,) original ids at the masked positions
    mask_positions: tuple[np.ndarray, np.ndarray]  # (row, column) index arrays, length M

    @property
    def num_masked(self) -> int:
        return int(self.target_ids.size)


def apply_masking(ids, rate: float, rng: Rng, pad_id: int = PAD_ID,
                  mask_id: int = MASK_ID) -> MaskedBatch:
    """Replace ``round(rate * non_pad)`` random positions per row with ``[MASK]``."""
    if not 0.0 < rate < 1.0:
        raise InputError(f"mask rate must lie in (0, 1), got {rate}")
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    masked = ids.copy()
    rows, cols = [], []
    for r in range(ids.shape[0]):
        real = np.flatnonzero(ids[r] != pad_id)
        count = int(np.floor(rate * real.size + 0.5))
        if count == 0:
            continue
        pick = np.sort(real[rng.choice(real.size, count, replace=False)])
        rows.append(np.full(count, r))
        cols.append(pick)
    if rows:
        pos = (np.concatenate(rows), np.concatenate(cols))
    else:
        pos = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    targets = ids[pos].copy()
    masked[pos] = mask_id
    return MaskedBatch(masked, targets, pos)


def mlm_loss(logits: Matrix, batch: MaskedBatch) -> Matrix:
    """Mean cross-entropy over masked positions only (0 with a warning when none)."""
    if batch.num_masked == 0:
        warnings.warn("no masked positions; loss defined as 0", EmptyMaskWarning, stacklevel=2)
        return Matrix(np.zeros((1, 1)))
    if logits.data.ndim == 2:
        picked = logits[batch.mask_positions[1]]
    else:
        picked = logits[batch.mask_positions]
    return cross_entropy(picked, batch.target_ids)


def cross_entropy(logits: Matrix, targets: np.ndarray) -> Matrix:
    """Mean of ``-log softmax(logits)[target]`` over rows of an ``(M, V)`` matrix."""
    lsm = nx.log_softmax(logits, axis=-1)
    picked = lsm[(np.arange(targets.size), np.asarray(targets))]
    return -picked.mean()


@dataclass
class ForwardTrace:
    """Activations recorded by :meth:`AveyB.forward` for inspection and diffing."""

    embeddings: Matrix | None = None
    plan: rk.SplitPlan | None = None
    table: np.ndarray | None = None
    blocks: Matrix | None = None
    processor_in: Matrix | None = None
    layers: list[LayerTrace] = field(default_factory=list)
    processor_out: Matrix | None = None
    hidden: Matrix | None = None
    logits: Matrix | None = None


class AveyB:
    """Bidirectional attention-free encoder with an MLM head.

    Parameters are initialised from per-name child streams of the config
    seed, so toggling one component leaves every other parameter identical.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.layers: list[LayerSpec] = []
        self.params: dict[str, Matrix] = {}
        self._build()
        if params is not None:
            self.load_state(params)

    def _build(self) -> None:
        cfg = self.config
        rng = Rng(cfg.seed, "init")
        dt = np.dtype(cfg.dtype)
        self.embedding = Matrix.param(
            glorot_uniform(rng.child("embedding"), cfg.vocab_size, cfg.d).astype(dt))
        self.params["embedding"] = self.embedding
        self.output = None
        if not cfg.tie_embeddings:
            self.output = Matrix.param(
                glorot_uniform(rng.child("output"), cfg.d, cfg.vocab_size).astype(dt))
            self.params["output"] = self.output
        self.P = None
        if cfg.uses_compressor:
            width = (cfg.k + 1) * cfg.S
            self.P = Matrix.param(glorot_uniform(rng.child("compressor"), cfg.S, width).astype(dt))
            self.params["compressor.P"] = self.P
        for i, kind in enumerate(cfg.layer_kinds):
            layer = init_layer(rng.child("layer", i), kind, cfg)
            self.layers.append(layer)
            self.params.update(layer.params(f"layer{i}"))
        for name, p in self.params.items():
            p.name = name

    # -- state ---------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(state))
        if missing:
            raise CheckpointFormatError(f"tensor table: missing parameters {missing}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.size != p.data.size:
                raise CheckpointFormatError(
                    f"tensor '{name}': expected {p.data.shape}, got {arr.shape}")
            p.data[...] = arr.reshape(p.data.shape).astype(p.data.dtype)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- forward -------------------------------------------------------------

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.dtype.kind not in "iu":
            raise InputError(f"token ids must be integers, got dtype {ids.dtype}")
        ids = np.atleast_2d(ids.astype(np.int64))
        if ids.size == 0:
            raise InputError("empty input")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise InputError(
                f"token id out of range [0, {self.config.vocab_size}): "
                f"min {ids.min()}, max {ids.max()}")
        return ids

    def embed(self, ids) -> Matrix:
        ids = self._check_ids(ids)
        return nx.take(self.embedding, ids, axis=0)

    def predict(self, hidden: Matrix) -> Matrix:
        if self.output is not None:
            return hidden @ self.output
        return hidden @ nx.transpose(self.embedding)

    def contextualize(self, x: Matrix, trace: ForwardTrace | None = None) -> Matrix:
        """Hidden states ``(B, N, d)`` from embeddings ``(B, N, d)``."""
        cfg = self.config
        plan, splits = rk.partition(x, cfg.S)
        if cfg.ranker_mode == "off":
            table = np.zeros(splits.shape[:2] + (0,), dtype=np.int64)
            blocks = splits
            proc_in = splits
        else:
            table = rk.retrieval_table(splits.data, cfg.k, cfg.ranker_mode)
            blocks = rk.weighted_blocks(splits, table)
            if cfg.compression_on:
                with nx.flop_scope("compressor"):
                    proc_in = self.P @ blocks
                    if cfg.residual_on:
                        proc_in = proc_in + splits
            else:
                proc_in = blocks
        layer_traces = trace.layers if trace is not None else None
        out = stack_forward(proc_in, self.layers, cfg, layer_traces)
        if out.rows > cfg.S:
            # uncompressed blocks end with the current split
            out = out[(Ellipsis, slice(out.rows - cfg.S, None), slice(None))]
        hidden = rk.unpartition(out, plan)
        if trace is not None:
            trace.plan, trace.table, trace.blocks = plan, table, blocks
            trace.processor_in, trace.processor_out, trace.hidden = proc_in, out, hidden
        return hidden

    def hidden(self, ids, trace: ForwardTrace | None = None) -> Matrix:
        x = self.embed(ids)
        if trace is not None:
            trace.embeddings = x
        return self.contextualize(x, trace)

    def forward(self, ids, trace: ForwardTrace | None = None) -> Matrix:
        """Logits ``(B, N, vocab)`` for every input position."""
        logits = self.predict(self.hidden(ids, trace))
        if trace is not None:
            trace.logits = logits
        return logits

    __call__ = forward

    def masked_loss(self, batch: MaskedBatch) -> tuple[Matrix, Matrix | None]:
        """Loss and masked-position logits, projecting only the masked rows."""
        if batch.num_masked == 0:
            return mlm_loss(Matrix(np.zeros((1, 1))), batch), None
        h = self.hidden(batch.input_ids)
        logits = self.predict(h[batch.mask_positions])
        return cross_entropy(logits, batch.target_ids), logits


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of :class:`AveyB` for ``cfg``."""
    n = cfg.vocab_size * cfg.d * (1 if cfg.tie_embeddings else 2)
    if cfg.uses_compressor:
        n += cfg.S * (cfg.k + 1) * cfg.S
    return n + sum(layer_param_count(kind, cfg) for kind in cfg.layer_kinds)


# ---------------------------------------------------------------------------
# checkpoint files
#
#   "AVYB" | u32 version | u32 len | JSON header | u32 count |
#   count x (u32 len | name | u32 rows | u32 cols | rows*cols float64 LE)


def write_checkpoint(path, config: ModelConfig, tensors: dict[str, np.ndarray],
                     meta: dict | None = None) -> None:
    header = json.dumps({"model_config": config.to_dict(), "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(header)), header,
              struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim != 2:
            arr = arr.reshape(-1, arr.shape[-1]) if arr.ndim > 2 else arr.reshape(1, -1)
        raw = name.encode("utf-8")
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<II", *arr.shape),
                   np.ascontiguousarray(arr).tobytes()]
    Path(path).write_bytes(b"".join(chunks))


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    meta: dict

    def model(self) -> AveyB:
        params = {k: v for k, v in self.tensors.items() if not k.startswith("optim.")}
        return AveyB(self.config, params)


def read_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, section: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"{section}: file truncated at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise CheckpointFormatError("magic: expected b'AVYB'")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"version: unsupported format version {version}")
    (hlen,) = struct.unpack("<I", take(4, "header"))
    try:
        header = json.loads(take(hlen, "header").decode("utf-8"))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            config = ModelConfig.from_dict(header["model_config"])
    except CheckpointFormatError:
        raise
    except Exception as exc:
        raise CheckpointFormatError(f"header: {exc}") from exc
    (count,) = struct.unpack("<I", take(4, "tensor table"))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "tensor table"))
        name = take(nlen, "tensor table").decode("utf-8", errors="replace")
        rows, cols = struct.unpack("<II", take(8, f"tensor '{name}'"))
        data = take(rows * cols * 8, f"tensor '{name}'")
        tensors[name] = np.frombuffer(data, dtype="<f8").reshape(rows, cols).astype(np.float64)
    if pos != len(buf):
        raise CheckpointFormatError(f"tensor table: {len(buf) - pos} trailing bytes")
    return Checkpoint(config, tensors, header.get("meta", {}))


def save_model(path, model: AveyB, extra: dict[str, np.ndarray] | None = None,
               meta: dict | None = None) -> None:
    tensors = model.state_dict()
    if extra:
        tensors.update(extra)
    write_checkpoint(path, model.config, tensors, meta)


def load_model(path) -> AveyB:
    return read_checkpoint(path).model()
