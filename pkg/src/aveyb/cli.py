"""Command-line entry point.

Configuration is one JSON object with sections ``model``, ``train``,
``data``, ``bench`` and ``niah``.  ``--override key=value`` accepts dotted
keys (``model.d=32``) or bare keys when the name is unique across
sections (``steps=10``).  The effective configuration is echoed to
``<out>/effective_config.json`` and can be fed back through ``--config``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import os
import sys
import warnings
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import evalbench as eb
from .config import ModelConfig
from .model import AveyB, CheckpointFormatError, InputError, param_count, read_checkpoint
from .numerics import ConfigurationError, NonFiniteError, Rng, UsageError
from .props import format_results, run_suite
from .training import (DESK_LR_PEAK, TrainConfig, TrainingDiverged, evaluate_masked_accuracy,
                       resume, synthetic_kv_corpus, text_file_corpus, train, value_chance)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

DEFAULTS = {
    "model": ModelConfig().to_dict(),
    "train": TrainConfig(lr_peak=DESK_LR_PEAK).to_dict(),
    "data": {"corpus": "synthetic_kv", "path": None, "n_pairs": 16, "n_sequences": 256},
    "bench": {"lengths": [256, 512, 1024, 2048, 4096], "batch": 8, "repeats": 5,
              "modes": ["compressed", "uncompressed", "quadratic"], "memory_budget_mb": 2048},
    "niah": {"n": 100, "length": 512, "variant": "alphanumeric", "single_frac": 0.4},
    "ablation": {"run_steps": 100, "length": 1024},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration


def valid_keys() -> list[str]:
    return [f"{sec}.{k}" for sec, body in DEFAULTS.items() for k in body]


def example_config() -> str:
    return json.dumps(DEFAULTS, indent=2)


def _parse_value(raw: str, default):
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    if isinstance(default, list) and isinstance(val, str):
        val = [json.loads(v) if v.strip().lstrip("-").isdigit() else v.strip() for v in val.split(",")]
    if isinstance(default, float) and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    return val


def _resolve_key(key: str) -> tuple[str, str]:
    if "." in key:
        sec, name = key.split(".", 1)
        if sec in DEFAULTS and name in DEFAULTS[sec]:
            return sec, name
    else:
        hits = [sec for sec, body in DEFAULTS.items() if key in body]
        if len(hits) == 1:
            return hits[0], key
        if len(hits) > 1:
            raise UsageError(f"key {key!r} is ambiguous; qualify it as one of "
                             f"{[f'{h}.{key}' for h in hits]}")
    raise UsageError(f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}")


def load_config(path: str | None, overrides: list[str], seed: int | None) -> dict:
    """Defaults, then the file, then ``--override`` pairs, then ``--seed``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file {path!r} not found; example config:\n{example_config()}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path!r} is not valid JSON: {exc}") from exc
        for sec, body in data.items():
            if not isinstance(body, dict):
                raise UsageError(f"config section {sec!r} must be an object")
            for key, val in body.items():
                s, k = _resolve_key(f"{sec}.{key}")
                cfg[s][k] = val
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        sec, name = _resolve_key(key.strip())
        cfg[sec][name] = _parse_value(raw.strip(), DEFAULTS[sec][name])
    if seed is not None:
        cfg["model"]["seed"] = seed
        cfg["train"]["seed"] = seed
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig.from_dict(cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def echo_config(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def build_corpus(cfg: dict, mcfg: ModelConfig):
    data = cfg["data"]
    if data["corpus"] == "synthetic_kv":
        return synthetic_kv_corpus(Rng(mcfg.seed, "corpus"), mcfg.vocab_size, int(data["n_pairs"]),
                                   mcfg.N, int(data["n_sequences"]))
    if data["corpus"] == "text_file":
        if not data.get("path"):
            raise UsageError("data.corpus=text_file needs data.path")
        return text_file_corpus(data["path"], mcfg.N)
    raise UsageError(f"data.corpus must be 'synthetic_kv' or 'text_file', got {data['corpus']!r}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args, cfg: dict, out: Path) -> int:
    if args.resume:
        model, state, tcfg = resume(args.resume)
        tcfg = dataclasses.replace(tcfg, steps=int(cfg["train"]["steps"]))
        mcfg = model.config
    else:
        mcfg, tcfg = model_config(cfg), train_config(cfg)
        model, state = AveyB(mcfg), None
    corpus = build_corpus(cfg, mcfg)
    res = train(model, corpus, tcfg, out, state)
    summary = {"steps": res.state.step, "parameters": model.num_parameters()}
    if res.metrics:
        summary.update(initial_loss=res.metrics[0]["loss"], final_loss=res.metrics[-1]["loss"])
    summary["eval_masked_accuracy"] = evaluate_masked_accuracy(model, corpus)
    if corpus.source == "synthetic_kv":
        summary["value_chance"] = value_chance(corpus)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _load_or_build(path: str | None, cfg: dict) -> AveyB:
    return read_checkpoint(path).model() if path else AveyB(model_config(cfg))


def cmd_bench(args, cfg: dict, out: Path) -> int:
    b = cfg["bench"]
    modes = args.modes.split(",") if args.modes else list(b["modes"])
    for mode in modes:
        if mode not in eb.MODES:
            raise UsageError(f"unknown mode {mode!r}; choose from {', '.join(eb.MODES)}")
    model = _load_or_build(args.checkpoint, cfg)
    runs = []
    for mode in modes:
        run = eb.measure_scaling(model, b["lengths"], batch=int(b["batch"]), mode=mode,
                                 repeats=int(b["repeats"]), seed=model.config.seed,
                                 memory_budget=int(b["memory_budget_mb"]) * 2**20)
        eb.write_scaling_csv(run, out / f"bench_{mode}.csv")
        runs.append(run)
    summary = eb.scaling_summary(runs)
    (out / "bench_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for mode, entry in summary.items():
        absent = [p["N"] for p in entry["points"] if p["absent_reason"]]
        fmt = lambda v: "n/a" if v is None else f"{v:+.3f}"  # noqa: E731
        print(f"{mode:>13}: processor flops N^{fmt(entry['processor_flop_exponent'])}  "
              f"mixing flops N^{fmt(entry['mixing_flop_exponent'])}  "
              f"throughput N^{fmt(entry['throughput_exponent'])}"
              + (f"  absent at N={absent}" if absent else ""))
    return EXIT_OK


def cmd_niah_gen(args, cfg: dict, out: Path) -> int:
    n = cfg["niah"]
    insts = eb.generate_niah_dataset(int(n["n"]), int(n["length"]), n["variant"],
                                     Rng(cfg["model"]["seed"], "niah"), float(n["single_frac"]))
    bad = [i for i, inst in enumerate(insts) if eb.locate_needles(inst) != [p for _, _, p in inst.needles]]
    if bad:
        raise RuntimeError(f"instances {bad} failed the re-parse check")
    path = out / "niah.jsonl"
    eb.write_niah_jsonl(insts, path)
    singles = sum(inst.mode == "single" for inst in insts)
    print(f"wrote {len(insts)} instances ({singles} single, {len(insts) - singles} two-needle) to {path}")
    return EXIT_OK


def cmd_niah_eval(args, cfg: dict, out: Path) -> int:
    if not args.checkpoint:
        raise UsageError("niah-eval needs --checkpoint")
    model = read_checkpoint(args.checkpoint).model()
    report = {}
    for path in args.data:
        insts = eb.read_niah_jsonl(path)
        report[str(path)] = dataclasses.asdict(eb.niah_report(model, insts))
    (out / "niah_eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_props(args, cfg: dict, out: Path) -> int:
    only = set(args.only.split(",")) if args.only else None
    results = run_suite(cfg["model"]["seed"], only)
    print(format_results(results))
    rows = [dataclasses.asdict(r) for r in results]
    (out / "props.json").write_text(json.dumps(rows, indent=2) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def inspect_text(path) -> str:
    ck = read_checkpoint(path)
    model = ck.model()
    lines = [f"checkpoint: {path}", "config:"]
    lines += [f"  {k} = {v}" for k, v in ck.config.to_dict().items()]
    if ck.meta:
        lines.append(f"meta: {json.dumps(ck.meta, sort_keys=True)}")
    lines.append(f"parameters: {model.num_parameters()} (analytic {param_count(ck.config)})")
    for name, p in model.params.items():
        lines.append(f"  {name:<16} {'x'.join(map(str, p.shape)):>10}  {p.data.size}")
    rows = eb.weight_stats(ck)
    lines.append("mixing matrices:" if rows else "mixing matrices: none (all layers dynamic)")
    if rows:
        lines.append(eb.format_stats_table(rows))
    return "\n".join(lines)


def cmd_inspect(args, cfg: dict, out: Path) -> int:
    print(inspect_text(args.checkpoint))
    return EXIT_OK


def cmd_compress_ablation(args, cfg: dict, out: Path) -> int:
    """Same seed, compressor on vs off: token budget, FLOPs, throughput and short-run loss."""
    base = model_config(cfg)
    steps, length = int(cfg["ablation"]["run_steps"]), int(cfg["ablation"]["length"])
    tcfg = dataclasses.replace(train_config(cfg), steps=steps)
    report = {}
    for label, on in (("compressed", True), ("uncompressed", False)):
        mcfg = base.replace(compression_on=on)
        model = AveyB(mcfg)
        run = eb.measure_scaling(model, [length], batch=int(cfg["bench"]["batch"]), mode=label,
                                 repeats=int(cfg["bench"]["repeats"]), seed=mcfg.seed)
        pt = run.points[0]
        res = train(model, build_corpus(cfg, mcfg), tcfg, out / label)
        report[label] = {"contextualized_tokens": pt.contextualized_tokens, "processor_flops": pt.flops,
                         "tokens_per_sec": pt.tokens_per_sec,
                         "final_loss": res.metrics[-1]["loss"] if res.metrics else None}
    on, off = report["compressed"], report["uncompressed"]
    report["token_ratio"] = off["contextualized_tokens"] / on["contextualized_tokens"]
    report["flop_ratio"] = off["processor_flops"] / on["processor_flops"]
    if on["tokens_per_sec"] and off["tokens_per_sec"]:
        report["throughput_ratio"] = on["tokens_per_sec"] / off["tokens_per_sec"]
    (out / "compress_ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "bench": cmd_bench,
    "niah-gen": cmd_niah_gen,
    "niah-eval": cmd_niah_eval,
    "props": cmd_props,
    "inspect": cmd_inspect,
    "compress-ablation": cmd_compress_ablation,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--out", default="runs/latest", help="output directory")
    common.add_argument("--seed", type=int, help="seed for model, data and training")

    parser = _Parser(prog="aveyb", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("train", parents=[common], help="MLM pretraining")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a training checkpoint")
    p = sub.add_parser("bench", parents=[common], help="throughput and FLOP scaling")
    p.add_argument("--modes", help="comma-separated subset of compressed,uncompressed,quadratic")
    p.add_argument("--checkpoint")
    sub.add_parser("niah-gen", parents=[common], help="generate a needle-in-a-haystack set")
    p = sub.add_parser("niah-eval", parents=[common], help="score a checkpoint on NIAH files")
    p.add_argument("--checkpoint")
    p.add_argument("data", nargs="+")
    p = sub.add_parser("props", parents=[common], help="run the invariant suite")
    p.add_argument("--only", help="comma-separated property names")
    p = sub.add_parser("inspect", parents=[common], help="summarize a checkpoint")
    p.add_argument("checkpoint")
    sub.add_parser("compress-ablation", parents=[common], help="compressor on vs off")
    return parser


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "train" and args.config is None and args.resume is None:
            raise UsageError(f"train needs --config; example config:\n{example_config()}")
        cfg = load_config(args.config, args.override, args.seed)
        out = Path(args.out)
        if args.command != "inspect":
            echo_config(cfg, out)
        threads = os.environ.get("AVEYB_THREADS")
        if threads is not None and not threads.isdigit():
            raise UsageError(f"AVEYB_THREADS must be a positive integer, got {threads!r}")
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            with threadpool_limits(int(threads) if threads else None):
                return COMMANDS[args.command](args, cfg, out)
    except (UsageError, ConfigurationError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("activation norms:", file=sys.stderr)
        for name, val in exc.diagnostics.items():
            print(f"  {name}: {val:.6g}", file=sys.stderr)
        return EXIT_RUNTIME
    except (NonFiniteError, MemoryError, CheckpointFormatError, InputError, OSError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
