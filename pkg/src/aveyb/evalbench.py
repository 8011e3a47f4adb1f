"""Scaling benchmarks, power-law fits, needle-in-a-haystack data and weight statistics."""

from __future__ import annotations

import csv
import json
import string
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import numerics as nx
from .config import ModelConfig
from .model import AveyB, Checkpoint, InputError, read_checkpoint
from .numerics import NonFiniteError, Rng
from .ranker import plan_splits
from .tokenizer import MASK_ID, ByteTokenizer

MODES = ("compressed", "uncompressed", "quadratic")
DEFAULT_MEMORY_BUDGET = 2 * 1024**3


# ---------------------------------------------------------------------------
# power laws


@dataclass(frozen=True)
class PowerLawFit:
    exponent: float
    intercept: float
    r2: float
    n_points: int

    def predict(self, n) -> np.ndarray:
        return np.exp(self.intercept) * np.asarray(n, dtype=float) ** self.exponent


def fit_power_law(lengths: Sequence[float], values: Sequence[float]) -> PowerLawFit:
    """Least squares of ``ln value = exponent * ln N + intercept``.

    The exponent is signed: a decaying throughput ``T ~ N^-a`` returns ``-a``.
    Non-positive points are dropped with a warning.
    """
    x = np.asarray(lengths, dtype=float)
    y = np.asarray(values, dtype=float)
    keep = (x > 0) & (y > 0) & np.isfinite(y)
    if not keep.all():
        warnings.warn(f"excluding {int((~keep).sum())} non-positive point(s) from the fit",
                      RuntimeWarning, stacklevel=2)
    x, y = np.log(x[keep]), np.log(y[keep])
    if x.size < 3:
        raise ValueError(f"need at least 3 positive points, got {x.size}")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return PowerLawFit(float(slope), float(intercept), r2, int(x.size))


# ---------------------------------------------------------------------------
# scaling runs


@dataclass
class ScalingPoint:
    N: int
    latency_s: float | None = None
    tokens_per_sec: float | None = None
    flops: int | None = None              # multiplications inside the layer stack
    mixing_flops: int | None = None       # of which cross-token mixing
    total_flops: int | None = None        # whole forward pass
    contextualized_tokens: int | None = None
    absent_reason: str | None = None

    @property
    def present(self) -> bool:
        return self.absent_reason is None


@dataclass
class ScalingRun:
    mode: str
    batch: int
    repeats: int
    points: list[ScalingPoint] = field(default_factory=list)

    @property
    def lengths(self) -> list[int]:
        return [p.N for p in self.points]

    def fit(self, metric: str = "flops") -> PowerLawFit:
        pts = [p for p in self.points if p.present and getattr(p, metric) is not None]
        return fit_power_law([p.N for p in pts], [getattr(p, metric) for p in pts])


def bench_config(base: ModelConfig, mode: str, N: int) -> ModelConfig:
    """Model config for one scaling mode at sequence length ``N``."""
    if mode == "compressed":
        return base.replace(compression_on=True)
    if mode == "uncompressed":
        return base.replace(compression_on=False)
    if mode == "quadratic":
        # one split spanning the whole sequence: V and S~ become N x N
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return base.replace(ranker_mode="off", S=N, N=N)
    raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")


def contextualized_tokens(cfg: ModelConfig, N: int) -> int:
    """Rows the processor contextualizes for one length-``N`` sequence."""
    return plan_splits(N, cfg.S).num_splits * cfg.context_width


def estimate_forward_bytes(cfg: ModelConfig, N: int, batch: int) -> int:
    n = plan_splits(N, cfg.S).num_splits
    C = cfg.context_width
    per_block = 3 * C * C + 6 * C * cfg.m + (cfg.k + 1) * cfg.S * cfg.d
    params = sum(C * C for kind in cfg.layer_kinds if kind != "dynamic")
    return int(np.dtype(cfg.dtype).itemsize * (batch * n * per_block + params))


def measure_scaling(model: AveyB, lengths: Sequence[int], batch: int = 8, mode: str = "compressed",
                    repeats: int = 5, timed: bool = True, seed: int = 0,
                    memory_budget: int = DEFAULT_MEMORY_BUDGET) -> ScalingRun:
    """Latency, throughput and multiplication counts over a ladder of lengths.

    ``compressed``/``uncompressed`` reuse the model's architecture with the
    compressor toggled; ``quadratic`` builds a single-split model per length.
    Lengths whose estimated footprint exceeds ``memory_budget`` are recorded
    as absent points instead of running.
    """
    lengths = [int(n) for n in lengths]
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("lengths must be strictly increasing")
    if timed and repeats < 5:
        raise ValueError("timed measurements need at least 5 repeats")
    run = ScalingRun(mode, batch, repeats if timed else 0)
    shared = None
    for N in lengths:
        cfg = bench_config(model.config, mode, N)
        point = ScalingPoint(N, contextualized_tokens=contextualized_tokens(cfg, N))
        run.points.append(point)
        need = estimate_forward_bytes(cfg, N, batch)
        if need > memory_budget:
            point.absent_reason = f"allocation refused: needs ~{need / 2**20:.0f} MiB"
            continue
        try:
            if mode == "quadratic":
                m = AveyB(cfg)
            elif cfg == model.config:
                m = model
            else:
                shared = shared or AveyB(cfg)
                m = shared
            ids = Rng(seed, "bench", N).integers(2, cfg.vocab_size, (batch, N))
            with nx.no_grad():
                with nx.count_flops() as fc:
                    m.forward(ids)
                point.flops = fc["processor"]
                point.mixing_flops = fc["mixing"]
                point.total_flops = fc.total
                if timed:
                    times = []
                    with threadpool_limits(1):
                        for _ in range(repeats):
                            t0 = time.perf_counter()
                            m.forward(ids)
                            times.append(time.perf_counter() - t0)
                    point.latency_s = float(np.median(times))
                    point.tokens_per_sec = batch * N / point.latency_s
        except MemoryError:
            point.absent_reason = "allocation refused: MemoryError"
    return run


def write_scaling_csv(run: ScalingRun, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "tokens_per_sec", "latency_s", "flops"])
        for p in run.points:
            w.writerow([p.N, "" if p.tokens_per_sec is None else f"{p.tokens_per_sec:.6g}",
                        "" if p.latency_s is None else f"{p.latency_s:.6g}",
                        "" if p.flops is None else p.flops])


def scaling_summary(runs: Sequence[ScalingRun]) -> dict:
    out = {}
    for run in runs:
        entry = {"points": [asdict(p) for p in run.points]}
        for metric, key in [("flops", "processor_flop_exponent"),
                            ("mixing_flops", "mixing_flop_exponent"),
                            ("tokens_per_sec", "throughput_exponent"),
                            ("latency_s", "latency_exponent")]:
            try:
                fit = run.fit(metric)
                entry[key] = fit.exponent
                entry[key.replace("exponent", "r2")] = fit.r2
            except ValueError:
                entry[key] = None
        out[run.mode] = entry
    return out


# ---------------------------------------------------------------------------
# needle in a haystack

_DISTRACTOR_ALPHABET = string.ascii_lowercase + " "
_KEY_ALPHABET = string.ascii_uppercase
_VALUE_ALPHABETS = {"alphanumeric": string.ascii_lowercase + string.digits,
                    "numeric": string.digits}


@dataclass
class NiahInstance:
    ids: np.ndarray                          # full model input, answer slots hold [MASK]
    passage_len: int
    needles: list[tuple[str, str, int]]      # (key, value, position of value in ids)
    query_key: str
    ordinal: int
    answer: str
    answer_positions: list[int]
    variant: str
    mode: str

    @property
    def passage(self) -> np.ndarray:
        return self.ids[: self.passage_len]

    def to_json(self) -> str:
        d = asdict(self)
        d["ids"] = self.ids.tolist()
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "NiahInstance":
        d = json.loads(line)
        d["ids"] = np.asarray(d["ids"], dtype=np.int64)
        d["needles"] = [tuple(n) for n in d["needles"]]
        return cls(**d)


def _rand_text(rng: Rng, alphabet: str, n: int) -> str:
    return "".join(alphabet[i] for i in rng.integers(0, len(alphabet), n))


def niah_overhead(mode: str, key_len: int = 4, value_len: int = 6) -> int:
    needles = 1 if mode == "single" else 2
    return needles * (key_len + value_len + 2) + (key_len + 3) + value_len


def generate_niah(length: int, mode: str, variant: str, rng: Rng, key_len: int = 4,
                  value_len: int = 6, positions: Sequence[int] | None = None,
                  tokenizer=None) -> NiahInstance:
    """One instance whose total token count is ``length``.

    Layout: distractor passage with ``KEY=value;`` needles, then the query
    ``?<ordinal>KEY=`` and ``value_len`` masked answer slots.  In two-needle
    mode both needles share the key and the query names the occurrence.
    """
    tok = tokenizer or ByteTokenizer()
    if mode not in ("single", "two_needle"):
        raise InputError(f"mode must be 'single' or 'two_needle', got {mode!r}")
    if variant not in _VALUE_ALPHABETS:
        raise InputError(f"variant must be one of {sorted(_VALUE_ALPHABETS)}")
    if length < niah_overhead(mode, key_len, value_len):
        raise InputError(f"length {length} is below the minimum "
                         f"{niah_overhead(mode, key_len, value_len)} for mode {mode!r}")
    n_needles = 1 if mode == "single" else 2
    key = _rand_text(rng, _KEY_ALPHABET, key_len)
    values = [_rand_text(rng, _VALUE_ALPHABETS[variant], value_len)]
    while len(values) < n_needles:
        v = _rand_text(rng, _VALUE_ALPHABETS[variant], value_len)
        if v not in values:
            values.append(v)
    ordinal = 1 if mode == "single" else int(rng.integers(1, 3))
    query = f"?{ordinal}{key}="
    needle_len = key_len + value_len + 2
    passage_len = length - len(query) - value_len
    free = passage_len - n_needles * needle_len
    if positions is None:
        # choose gaps so needles never overlap
        cuts = np.sort(rng.integers(0, free + 1, n_needles))
        starts = [int(c) + i * needle_len for i, c in enumerate(cuts)]
    else:
        starts = sorted(int(p) for p in positions)
        if len(starts) != n_needles or any(b - a < needle_len for a, b in zip(starts, starts[1:])) \
                or starts[0] < 0 or starts[-1] + needle_len > passage_len:
            raise InputError(f"needle positions {list(positions)} do not fit the passage")
    chars = list(_rand_text(rng, _DISTRACTOR_ALPHABET, passage_len))
    needles = []
    for s, v in zip(starts, values):
        chars[s: s + needle_len] = list(f"{key}={v};")
        needles.append((key, v, s + key_len + 1))
    text = "".join(chars) + query
    ids = np.concatenate([tok.encode(text), np.full(value_len, MASK_ID, dtype=np.int64)])
    answer_positions = list(range(len(text), len(text) + value_len))
    return NiahInstance(ids, passage_len, needles, key, ordinal, values[ordinal - 1],
                        answer_positions, variant, mode)


def locate_needles(inst: NiahInstance, tokenizer=None) -> list[int]:
    """Re-parse the passage: value positions following each ``KEY=`` marker."""
    tok = tokenizer or ByteTokenizer()
    text = tok.decode(inst.passage)
    marker = f"{inst.query_key}="
    found, start = [], text.find(marker)
    while start >= 0:
        found.append(start + len(marker))
        start = text.find(marker, start + 1)
    return found


def generate_niah_dataset(n: int, length: int, variant: str, rng: Rng,
                          single_frac: float = 0.4, **kwargs) -> list[NiahInstance]:
    """``round(single_frac * n)`` single-needle instances, the rest two-needle, shuffled."""
    n_single = int(round(single_frac * n))
    modes = ["single"] * n_single + ["two_needle"] * (n - n_single)
    order = rng.child("order").permutation(n)
    return [generate_niah(length, modes[i], variant, rng.child("instance", int(j)), **kwargs)
            for j, i in enumerate(order)]


def write_niah_jsonl(instances: Sequence[NiahInstance], path) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(inst.to_json() + "\n")


def read_niah_jsonl(path) -> list[NiahInstance]:
    with open(path) as fh:
        return [NiahInstance.from_json(line) for line in fh if line.strip()]


@dataclass
class NiahScore:
    accuracy: float
    instances: int
    non_finite: int  # forwards that overflowed; scored as misses


def niah_report(model: AveyB, instances: Sequence[NiahInstance]) -> NiahScore:
    """Exact-match scoring that survives activations overflowing on unfamiliar bytes."""
    tok = ByteTokenizer()
    hits = bad = 0
    with nx.no_grad(), np.errstate(all="ignore"):
        for inst in instances:
            try:
                logits = model.forward(inst.ids).data[0]
            except NonFiniteError:
                bad += 1
                continue
            pred = np.argmax(logits[inst.answer_positions], axis=-1)
            hits += int(np.array_equal(pred, tok.encode(inst.answer)))
    n = len(instances)
    return NiahScore(hits / n if n else 0.0, n, bad)


def score_niah(model: AveyB, instances: Sequence[NiahInstance]) -> float:
    """Fraction of instances whose every answer slot is predicted exactly."""
    return niah_report(model, instances).accuracy


# ---------------------------------------------------------------------------
# weight statistics

STAT_COLUMNS = ("Layer", "Mean", "Std", "Min", "Median", "Max", "Abs. Mean",
                "L1 Norm", "L2 Norm", "Frac. Pos.", "Frac. Neg.")


def matrix_stats(w: np.ndarray) -> dict[str, float]:
    w = np.asarray(w, dtype=np.float64).ravel()
    return {
        "Mean": float(w.mean()),
        "Std": float(w.std()),
        "Min": float(w.min()),
        "Median": float(np.median(w)),
        "Max": float(w.max()),
        "Abs. Mean": float(np.abs(w).mean()),
        "L1 Norm": float(np.abs(w).sum()),
        "L2 Norm": float(np.sqrt(np.sum(w * w))),
        "Frac. Pos.": float(np.mean(w > 0)),
        "Frac. Neg.": float(np.mean(w < 0)),
    }


def weight_stats(source) -> list[dict]:
    """One row per cross-token mixing matrix ``V`` (static or coupled layers)."""
    if isinstance(source, (str, Path)):
        source = read_checkpoint(source)
    if isinstance(source, Checkpoint):
        tensors = source.tensors
    elif isinstance(source, AveyB):
        tensors = source.state_dict()
    else:
        tensors = dict(source)
    rows = []
    names = [n for n in tensors if n.startswith("layer") and n.endswith(".V")]
    for name in sorted(names, key=lambda n: int(n[len("layer"):].split(".")[0])):
        rows.append({"Layer": name[: -len(".V")], **matrix_stats(tensors[name])})
    return rows


def format_stats_table(rows: Sequence[dict]) -> str:
    lines = ["  ".join(f"{c:>11}" for c in STAT_COLUMNS)]
    for r in rows:
        cells = [f"{r['Layer']:>11}"]
        for c in STAT_COLUMNS[1:]:
            cells.append(f"{r[c]:>11.4f}")
        lines.append("  ".join(cells))
    return "\n".join(lines)
