"""Desk-scale MLM pretraining: corpora, AdamW, LR schedule and the training loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .model import AveyB, ForwardTrace, apply_masking, read_checkpoint, save_model
from .numerics import ConfigurationError, NonFiniteError, Rng, Tape
from .tokenizer import BYTE_OFFSET, ByteTokenizer

log = logging.getLogger(__name__)

SCHEDULES = ("cosine_to_zero", "constant", "linear_decay")

# peak rate for the desk-scale runs; 5e-4 is tuned for large batches and
# leaves a 500-step, batch-8 run near chance on the key-value corpus
DESK_LR_PEAK = 3e-3


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    lr_peak: float = 5e-4
    warmup_frac: float = 0.10
    schedule: str = "cosine_to_zero"
    betas: tuple[float, float] = (0.95, 0.95)
    eps_opt: float = 1e-18
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigurationError(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")
        if self.lr_peak <= 0 or self.eps_opt <= 0 or self.grad_clip <= 0 or self.weight_decay < 0:
            raise ConfigurationError("rates must be positive")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate after ``step`` updates: linear warmup then the chosen decay."""
    if cfg.schedule == "constant":
        return cfg.lr_peak
    warm = cfg.warmup_frac * cfg.steps
    if step < warm:
        return cfg.lr_peak * step / warm
    span = cfg.steps - warm
    progress = 1.0 if span <= 0 else min(1.0, (step - warm) / span)
    if cfg.schedule == "linear_decay":
        return cfg.lr_peak * (1.0 - progress)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global l2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{k}": a for k, a in self.m.items()}
        out.update({f"optim.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_tensors(cls, step: int, tensors: dict[str, np.ndarray]) -> "AdamWState":
        st = cls(step)
        for k, a in tensors.items():
            if k.startswith("optim.m."):
                st.m[k[len("optim.m."):]] = a.copy()
            elif k.startswith("optim.v."):
                st.v[k[len("optim.v."):]] = a.copy()
        return st


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, cfg: TrainConfig) -> float:
    """Clip, then apply one decoupled-weight-decay Adam update in place.

    Returns the pre-clip gradient norm.  Raises :class:`NonFiniteError`
    naming the offending parameter before touching any weights.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    grads, norm = clip_grads(grads, cfg.grad_clip)
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name].reshape(p.shape)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps_opt)
    return norm


# ---------------------------------------------------------------------------
# corpora


@dataclass
class Corpus:
    """Packed token sequences of exactly ``seq_len`` ids, served round-robin."""

    source: str
    documents: list[np.ndarray]
    seq_len: int
    sequences: np.ndarray = field(init=False)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sequences = pack(self.documents, self.seq_len)

    def __len__(self) -> int:
        return len(self.sequences)

    def batch(self, step: int, batch_size: int) -> np.ndarray:
        """Batch number ``step``; the packing cursor is ``step * batch_size``."""
        rows = (np.arange(batch_size) + step * batch_size) % len(self.sequences)
        return self.sequences[rows]


def pack(documents: list[np.ndarray], seq_len: int, pad_id: int = 0) -> np.ndarray:
    stream = np.concatenate([np.asarray(d, dtype=np.int64) for d in documents]) \
        if documents else np.zeros(0, dtype=np.int64)
    if stream.size == 0:
        raise ConfigurationError("corpus is empty")
    n = stream.size // seq_len
    if n == 0:
        # a lone short document still yields one padded sequence
        out = np.full((1, seq_len), pad_id, dtype=np.int64)
        out[0, : stream.size] = stream
        return out
    return stream[: n * seq_len].reshape(n, seq_len)


@dataclass(frozen=True)
class KVDictionary:
    keys: np.ndarray
    values: np.ndarray

    @property
    def mapping(self) -> dict[int, int]:
        return dict(zip(self.keys.tolist(), self.values.tolist()))


def make_kv_dictionary(rng: Rng, vocab_size: int, n_pairs: int) -> KVDictionary:
    """Disjoint key and value id ranges; values are distinct so keys are recoverable too."""
    text = vocab_size - BYTE_OFFSET
    half = text // 2
    if n_pairs > half:
        raise ConfigurationError(f"at most {half} pairs fit in a vocabulary of {vocab_size}")
    keys = BYTE_OFFSET + rng.choice(half, n_pairs)
    values = BYTE_OFFSET + half + rng.choice(text - half, n_pairs)
    return KVDictionary(keys.astype(np.int64), values.astype(np.int64))


def synthetic_kv_corpus(rng: Rng, vocab_size: int, n_pairs: int, seq_len: int,
                        n_sequences: int = 256) -> Corpus:
    """Sequences of ``key value`` bigrams drawn from one fixed random dictionary."""
    kv = make_kv_dictionary(rng.child("dictionary"), vocab_size, n_pairs)
    n_bigrams = -(-seq_len // 2)
    draws = rng.child("draws").integers(0, n_pairs, (n_sequences, n_bigrams))
    seqs = np.empty((n_sequences, 2 * n_bigrams), dtype=np.int64)
    seqs[:, 0::2] = kv.keys[draws]
    seqs[:, 1::2] = kv.values[draws]
    docs = [s[:seq_len] for s in seqs]
    return Corpus("synthetic_kv", docs, seq_len,
                  info={"keys": kv.keys.tolist(), "values": kv.values.tolist()})


def text_file_corpus(path, seq_len: int, tokenizer=None) -> Corpus:
    tok = tokenizer or ByteTokenizer()
    text = Path(path).read_text(encoding="utf-8")
    docs = [tok.encode(chunk) for chunk in text.split("\n\n") if chunk.strip()]
    return Corpus("text_file", docs, seq_len, info={"path": str(path)})


def value_chance(corpus: Corpus) -> float:
    """Accuracy of guessing value tokens uniformly from the values seen in the corpus."""
    vals = set(corpus.info.get("values", []))
    seen = np.unique(corpus.sequences[:, 1::2])
    seen = [v for v in seen.tolist() if v in vals] or seen.tolist()
    return 1.0 / len(seen)


# ---------------------------------------------------------------------------
# loop


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``diagnostics`` holds per-layer activation norms."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainResult:
    model: AveyB
    state: AdamWState
    metrics: list[dict]
    timings: list[dict]


def activation_norms(model: AveyB, ids: np.ndarray) -> dict[str, float]:
    trace = ForwardTrace()
    prev = nx.CHECK_FINITE
    nx.CHECK_FINITE = False
    try:
        with nx.no_grad(), np.errstate(all="ignore"):
            model.forward(ids, trace)
    finally:
        nx.CHECK_FINITE = prev
    out = {"embeddings": float(np.linalg.norm(trace.embeddings.data))}
    for i, lt in enumerate(trace.layers):
        out[f"layer{i}.{lt.kind}"] = float(np.linalg.norm(lt.output.data))
    out["logits"] = float(np.linalg.norm(trace.logits.data))
    return out


def train(model: AveyB, corpus: Corpus, cfg: TrainConfig, out_dir=None,
          state: AdamWState | None = None, stop_at: int | None = None) -> TrainResult:
    """Run MLM updates ``state.step + 1 .. min(stop_at, cfg.steps)``.

    Writes ``metrics.jsonl`` (deterministic fields only), ``timing.jsonl``
    (wall-clock) and ``checkpoint.avyb`` under ``out_dir`` when given.
    """
    state = state or AdamWState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics: list[dict] = []
    timings: list[dict] = []
    names = list(model.params)
    last = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    root = Rng(cfg.seed, "train")
    mode = "a" if state.step > 0 else "w"
    mfile = open(out / "metrics.jsonl", mode) if out is not None else None
    tfile = open(out / "timing.jsonl", mode) if out is not None else None
    try:
        while state.step < last:
            step = state.step + 1
            t0 = time.perf_counter()
            ids = corpus.batch(step - 1, cfg.batch_size)
            batch = apply_masking(ids, model.config.mask_rate, root.child("mask", step))
            try:
                # non-finite values are caught explicitly below
                with Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
                    loss, logits = model.masked_loss(batch)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise NonFiniteError("loss is not finite")
                with np.errstate(over="ignore", invalid="ignore"):
                    grads = tape.backward(loss, [model.params[n] for n in names])
            except NonFiniteError as exc:
                raise TrainingDiverged(f"step {step}: {exc}", activation_norms(model, ids)) from exc
            grads = {n: grads[model.params[n]] for n in names}
            lr = lr_at(step, cfg)
            params = {n: model.params[n].data for n in names}
            gnorm = adamw_step(params, grads, state, lr, cfg)
            acc = float(np.mean(np.argmax(logits.data, axis=-1) == batch.target_ids)) \
                if logits is not None else 0.0
            dt = time.perf_counter() - t0
            rec = {"step": step, "loss": loss_val, "lr": lr, "masked_acc": acc,
                   "grad_norm": gnorm, "masked": batch.num_masked}
            timing = {"step": step, "seconds": dt, "tokens_per_sec": ids.size / dt}
            metrics.append(rec)
            timings.append(timing)
            if mfile is not None:
                mfile.write(json.dumps(rec) + "\n")
                tfile.write(json.dumps(timing) + "\n")
            if step % 50 == 0 or step == 1:
                log.info("step %d loss %.4f acc %.3f lr %.2e", step, loss_val, acc, lr)
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_training_checkpoint(out / f"checkpoint_{step:06d}.avyb", model, state, cfg)
    finally:
        if mfile is not None:
            mfile.close()
            tfile.close()
    if out is not None:
        save_training_checkpoint(out / "checkpoint.avyb", model, state, cfg)
    return TrainResult(model, state, metrics, timings)


def save_training_checkpoint(path, model: AveyB, state: AdamWState, cfg: TrainConfig) -> None:
    save_model(path, model, extra=state.tensors(),
               meta={"step": state.step, "train_config": cfg.to_dict()})


def resume(path) -> tuple[AveyB, AdamWState, TrainConfig]:
    ck = read_checkpoint(path)
    tc = ck.meta.get("train_config")
    cfg = TrainConfig(**tc) if tc else TrainConfig()
    return ck.model(), AdamWState.from_tensors(int(ck.meta.get("step", 0)), ck.tensors), cfg


def evaluate_masked_accuracy(model: AveyB, corpus: Corpus, n_batches: int = 4, batch_size: int = 8,
                             seed: int = 12345) -> float:
    """Masked-token accuracy on freshly masked corpus batches (no gradient)."""
    rng = Rng(seed, "eval")
    hits = total = 0
    with nx.no_grad():
        for i in range(n_batches):
            ids = corpus.batch(i, batch_size)
            batch = apply_masking(ids, model.config.mask_rate, rng.child(i))
            _, logits = model.masked_loss(batch)
            if logits is None:
                continue
            hits += int(np.sum(np.argmax(logits.data, axis=-1) == batch.target_ids))
            total += batch.num_masked
    return hits / max(total, 1)
