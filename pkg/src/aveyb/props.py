"""Executable invariant suite.

Each check draws its own random inputs from a named child stream and
returns a :class:`PropertyResult`; :func:`run_suite` runs them all.  The
same checkers back the test suite, which adds independent oracles on top.
"""

from __future__ import annotations

import math
import tempfile
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from . import ranker as rk
from .config import ModelConfig
from .evalbench import contextualized_tokens, fit_power_law, generate_niah, locate_needles, measure_scaling
from .model import AveyB, apply_masking, read_checkpoint, save_model
from .numerics import Matrix, Rng, Tape
from .processor import cosine_similarity, normalize_similarity


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def __post_init__(self):
        self.passed = bool(self.passed)  # checkers often hand back np.bool_


# ---------------------------------------------------------------------------
# contextualizer inputs


def random_contextualizer_input(rng: Rng, max_c: int = 32, max_d: int = 16) -> np.ndarray:
    """Nonnegative ``C x d'`` block, as produced by the ReLU^2 enricher.

    Some draws include exact zeros, duplicated rows or a degenerate all-zero row.
    """
    C = int(rng.integers(2, max_c + 1))
    d = int(rng.integers(1, max_d + 1))
    z = rng.uniform(-1.0, 1.0, (C, d))
    z = np.maximum(z, 0.0) ** 2
    flavour = int(rng.integers(0, 4))
    if flavour == 1:
        z[int(rng.integers(0, C))] = z[int(rng.integers(0, C))]
    elif flavour == 2 and C > 2:
        z[int(rng.integers(0, C))] = 0.0
    return z


def similarity_pair(z: np.ndarray, eps: float = 1e-6, scheme: str = "divide_by_sum"):
    S = cosine_similarity(Matrix(z)).data
    return S, normalize_similarity(Matrix(S), scheme, eps).data


def order_violations(S: np.ndarray, St: np.ndarray) -> int:
    """Row pairs with ``S[i,a] >= S[i,b]`` but ``St[i,a] < St[i,b]``."""
    bad = 0
    for i in range(S.shape[0]):
        order = np.lexsort((St[i], S[i]))
        s, t = S[i][order], St[i][order]
        # after sorting by S, St must be non-decreasing and equal on S-ties
        bad += int(np.sum(np.diff(t) < 0))
        same = np.diff(s) == 0
        bad += int(np.sum(same & (np.diff(t) != 0)))
    return bad


def perturbation_violations(S: np.ndarray, delta: float, eps: float = 1e-6) -> int:
    """Raise each ``S[i,j]`` by ``delta`` alone; count sign violations in row ``i`` of S~."""
    C = S.shape[0]
    bad = 0
    base = normalize_similarity(Matrix(S), "divide_by_sum", eps).data
    eye = np.eye(C, dtype=bool)
    for i in range(C):
        bumped = np.repeat(S[i][None, :], C, axis=0) + delta * eye   # row j bumps entry j
        new = normalize_similarity(Matrix(bumped), "divide_by_sum", eps).data
        up = new[eye] < base[i]
        down = (new > base[i][None, :]) & ~eye
        bad += int(up.sum() + down.sum())
    return bad


def check_monotonicity(rng: Rng, trials: int = 1000, deltas=(1e-3, 1e-2)) -> PropertyResult:
    order_bad = pert_bad = 0
    for t in range(trials):
        S, St = similarity_pair(random_contextualizer_input(rng.child(t)))
        order_bad += order_violations(S, St)
        for delta in deltas:
            pert_bad += perturbation_violations(S, delta)
    ok = order_bad == 0 and pert_bad == 0
    return PropertyResult("monotonicity", ok,
                          f"{trials} inputs: {order_bad} order / {pert_bad} perturbation violations")


def check_row_stochastic(rng: Rng, trials: int = 1000, eps: float = 1e-6) -> PropertyResult:
    lo, hi, lo_nondegen = np.inf, -np.inf, np.inf
    for t in range(trials):
        z = random_contextualizer_input(rng.child(t))
        _, St = similarity_pair(z, eps)
        sums = St.sum(axis=1)
        lo, hi = min(lo, sums.min()), max(hi, sums.max())
        live = np.linalg.norm(z, axis=1) >= nx.EPS_NORM
        if live.any():
            lo_nondegen = min(lo_nondegen, sums[live].min())
    ok = lo >= 0.0 and hi <= 1.0 and lo_nondegen >= 1.0 - 1e-4
    return PropertyResult("row_stochastic", ok,
                          f"row sums in [{lo:.6g}, {hi:.6g}], non-degenerate rows >= {lo_nondegen:.8f}")


def check_gain_bound(rng: Rng, trials: int = 200) -> PropertyResult:
    worst = -np.inf
    for t in range(trials):
        z = random_contextualizer_input(rng.child(t))
        _, St = similarity_pair(z)
        lhs = np.abs(St @ z).max(axis=0)
        rhs = np.abs(z).max(axis=0)
        worst = max(worst, float(np.max(lhs - rhs)))
    return PropertyResult("gain_bound", worst <= 1e-12, f"max excess {worst:.3g}")


# ---------------------------------------------------------------------------
# model-level structure


def small_config(**kw) -> ModelConfig:
    base = dict(d=8, m=24, m_h=8, m_t=16, L=2, N=32, S=8, k=3, seed=7)
    base.update(kw)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return ModelConfig(**base)


def check_static_non_violation(rng: Rng) -> PropertyResult:
    cfg = small_config(L=2, pattern="interleaved_ds")
    ids = rng.integers(2, cfg.vocab_size, (2, cfg.N))

    def first_similarity(model):
        from .model import ForwardTrace
        tr = ForwardTrace()
        with nx.no_grad():
            model.forward(ids, tr)
        return tr.layers[0].similarity.normalized.data.copy()

    a = AveyB(cfg)
    before = first_similarity(a)
    static = a.layers[1]
    static.V.data[...] = rng.normal(static.V.shape)
    static.U.data[...] = rng.normal(static.U.shape)
    after = first_similarity(a)
    ok = np.array_equal(before, after)
    return PropertyResult("static_non_violation", ok, "S~ of the dynamic layer is bit-identical"
                          if ok else "S~ changed when the static layer was randomized")


def check_split_independence(rng: Rng) -> PropertyResult:
    from .processor import stack_forward
    cfg = small_config(ranker_mode="off")
    model = AveyB(cfg)
    blocks = rng.normal((1, 4, cfg.S, cfg.d))
    edited = blocks.copy()
    edited[0, 2] = rng.normal((cfg.S, cfg.d))
    with nx.no_grad():
        a = stack_forward(Matrix(blocks), model.layers, cfg).data
        b = stack_forward(Matrix(edited), model.layers, cfg).data
    keep = [0, 1, 3]
    ok = np.array_equal(a[0, keep], b[0, keep]) and not np.array_equal(a[0, 2], b[0, 2])
    return PropertyResult("split_independence", ok, "only the edited split's output moved"
                          if ok else "edit leaked across splits")


def brute_force_topk(splits: np.ndarray, target: int, k: int, mode: str) -> list[int]:
    """Loop-level oracle: score every candidate token by token, sort by (-score, index)."""
    n, S, _ = splits.shape

    def cos(a, b):
        na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
        return float(a @ b) / (na * nb)

    def live(v):
        return math.sqrt(float(v @ v)) >= nx.EPS_NORM

    pool = range(target) if mode == "unidirectional" else [c for c in range(n) if c != target]
    scored = []
    for c in pool:
        total = 0.0
        for q in splits[target]:
            if not live(q):
                continue
            best = max((cos(q, r) for r in splits[c] if live(r)), default=None)
            total += 0.0 if best is None else best
        scored.append((-total, c))
    return [c for _, c in sorted(scored)[:k]]


def check_topk_oracle(rng: Rng, trials: int = 100) -> PropertyResult:
    mismatches = 0
    for t in range(trials):
        r = rng.child(t)
        n = int(r.integers(1, 9))
        S = int(r.integers(1, 6))
        d = int(r.integers(1, 6))
        k = int(r.integers(1, 5))
        mode = ("unidirectional", "bidirectional")[int(r.integers(0, 2))]
        splits = r.normal((n, S, d))
        if int(r.integers(0, 3)) == 0:
            splits[-1, int(r.integers(0, S)):] = 0.0      # tail padding
        scores = rk.maxsim_matrix(splits, causal=mode == "unidirectional")
        for target in range(n):
            got = list(rk.select_topk(target, scores[target], k, mode).retrieved_indices)
            if got != brute_force_topk(splits, target, k, mode):
                mismatches += 1
    return PropertyResult("topk_oracle", mismatches == 0, f"{trials} trials, {mismatches} mismatches")


def check_linear_cost(rng: Rng) -> PropertyResult:
    cfg = small_config(N=256, S=32, k=3, d=16, m=64, m_h=32, m_t=32)
    run = measure_scaling(AveyB(cfg), [256, 512], batch=1, timed=False, seed=int(rng.integers(0, 2**31)))
    ratio = run.points[1].flops / run.points[0].flops
    return PropertyResult("linear_cost", 1.9 <= ratio <= 2.1, f"cost(2N)/cost(N) = {ratio:.4f}")


def check_compression_ratio() -> PropertyResult:
    on = small_config(N=256, S=32, k=3)
    off = on.replace(compression_on=False)
    ratio = contextualized_tokens(off, 256) / contextualized_tokens(on, 256)
    return PropertyResult("compression_ratio", ratio == on.k + 1, f"ratio {ratio} (k+1 = {on.k + 1})")


def check_power_law(rng: Rng) -> PropertyResult:
    N = np.array([256, 512, 1024, 2048, 4096], dtype=float)
    exact = fit_power_law(N, 100.0 * N ** -0.5)
    noisy_err = 0.0
    for t in range(20):
        noise = 1.0 + 0.05 * rng.child(t).uniform(-1.0, 1.0, N.size)
        noisy_err = max(noisy_err, abs(fit_power_law(N, 3.0 * N ** 1.3 * noise).exponent - 1.3))
    ok = abs(exact.exponent + 0.5) <= 1e-9 and noisy_err <= 0.05
    return PropertyResult("power_law_fit", ok,
                          f"noiseless error {abs(exact.exponent + 0.5):.2e}, 5% noise error {noisy_err:.4f}")


def check_niah_roundtrip(rng: Rng, trials: int = 50) -> PropertyResult:
    bad = 0
    for t in range(trials):
        r = rng.child(t)
        mode = ("single", "two_needle")[t % 2]
        inst = generate_niah(int(r.integers(40, 400)), mode, ("alphanumeric", "numeric")[t % 3 % 2], r)
        if locate_needles(inst) != [p for _, _, p in inst.needles]:
            bad += 1
    return PropertyResult("niah_roundtrip", bad == 0, f"{trials} instances, {bad} failures")


def check_checkpoint_roundtrip(rng: Rng) -> PropertyResult:
    model = AveyB(small_config(seed=int(rng.integers(0, 2**31))))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.avyb"
        save_model(path, model)
        back = read_checkpoint(path)
    ok = back.config == model.config and all(
        np.array_equal(back.tensors[k], v.reshape(back.tensors[k].shape))
        for k, v in model.state_dict().items())
    return PropertyResult("checkpoint_roundtrip", ok, "bit-exact" if ok else "tensors differ")


# ---------------------------------------------------------------------------
# gradient check


def gradient_check(model: AveyB, ids: np.ndarray, rng: Rng, n_samples: int = 200,
                   h: float = 1e-4) -> tuple[float, int]:
    """Max relative error between tape gradients and central differences.

    The loss is the masked-token cross entropy on a fixed masking of ``ids``.
    Parameters are sampled uniformly across all tensors.
    """
    batch = apply_masking(ids, 0.25, rng.child("mask"))

    def loss_value() -> float:
        with nx.no_grad():
            return model.masked_loss(batch)[0].item()

    with Tape() as tape:
        loss, _ = model.masked_loss(batch)
    names = list(model.params)
    grads = tape.backward(loss, [model.params[n] for n in names])
    sizes = np.array([model.params[n].data.size for n in names])
    flat_ids = rng.child("pick").choice(int(sizes.sum()), min(n_samples, int(sizes.sum())))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for fid in flat_ids:
        t = int(np.searchsorted(offsets, fid, side="right") - 1)
        p = model.params[names[t]]
        flat = p.data.reshape(-1)
        j = int(fid - offsets[t])
        orig = flat[j]
        flat[j] = orig + h
        up = loss_value()
        flat[j] = orig - h
        down = loss_value()
        flat[j] = orig
        numeric = (up - down) / (2 * h)
        analytic = float(grads[p].reshape(-1)[j])
        scale = max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst, len(flat_ids)


def gradcheck_config(seed: int = 3) -> ModelConfig:
    """2-layer [S, D] stack with compression and residual at 64-bit."""
    return small_config(L=2, pattern="interleaved_sd", compression_on=True, residual_on=True,
                        dtype="float64", N=32, S=8, k=2, seed=seed)


def check_gradients(rng: Rng, n_samples: int = 200) -> PropertyResult:
    cfg = gradcheck_config()
    model = AveyB(cfg)
    # zero-initialised biases put ReLU pre-activations exactly on the kink
    # wherever a Z_tr column is all zero; a nonzero draw moves off it
    for name, p in model.params.items():
        if name.endswith((".b", ".b_mix")):
            p.data[...] = rng.child("bias", name).normal(p.shape, 0.1)
    ids = rng.integers(2, cfg.vocab_size, (2, cfg.N))
    worst, n = gradient_check(model, ids, rng, n_samples)
    return PropertyResult("gradient_check", worst < 1e-4, f"{n} parameters, max rel. error {worst:.2e}")


# ---------------------------------------------------------------------------


def suite(seed: int = 0) -> list[tuple[str, Callable[[], PropertyResult]]]:
    root = Rng(seed, "props")
    return [
        ("monotonicity", lambda: check_monotonicity(root.child("mono"))),
        ("row_stochastic", lambda: check_row_stochastic(root.child("mono"))),
        ("gain_bound", lambda: check_gain_bound(root.child("gain"))),
        ("static_non_violation", lambda: check_static_non_violation(root.child("static"))),
        ("split_independence", lambda: check_split_independence(root.child("split"))),
        ("topk_oracle", lambda: check_topk_oracle(root.child("topk"))),
        ("linear_cost", lambda: check_linear_cost(root.child("cost"))),
        ("compression_ratio", check_compression_ratio),
        ("power_law_fit", lambda: check_power_law(root.child("fit"))),
        ("niah_roundtrip", lambda: check_niah_roundtrip(root.child("niah"))),
        ("checkpoint_roundtrip", lambda: check_checkpoint_roundtrip(root.child("ckpt"))),
        ("gradient_check", lambda: check_gradients(root.child("grad"))),
    ]


def run_suite(seed: int = 0, only: set[str] | None = None) -> list[PropertyResult]:
    results = []
    for name, fn in suite(seed):
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        try:
            res = fn()
        except Exception as exc:  # a crashing check is a failing check
            res = PropertyResult(name, False, f"{type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results


def format_results(results: list[PropertyResult]) -> str:
    width = max(len(r.name) for r in results)
    return "\n".join(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.seconds:6.2f}s  {r.detail}"
                     for r in results)
