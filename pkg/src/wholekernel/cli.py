"""Command-line entry point: plan | render | decode | simulate | calibrate | tune | sweep.

Exit codes: 0 success, 1 usage, 2 invalid configuration, 3 oracle or verification failure.
Machine-readable outputs are CSV with a leading ``#`` metadata block, written atomically.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import os
import sys
import tempfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .autotuner import TuneError, TuneSpace, tune
from .config import (ALL_MODES, KB, ConfigError, ModelConfig, PipelineConfig, RunConfig, RunMode, config_from_dict,
                     config_to_dict, load_config, tomllib)
from .kernelgen import EmitError, emit_programs, render_listing, verify_programs
from .numerics import MemoryOrderError, execute_program, greedy_token, reference_forward
from .partitioner import PartitionError, build_plan, plan_report
from .simulator import (DEFAULT_COST, REFERENCE_STACKED_MS, CalibrationError, CalibrationTarget, DeadlockError,
                        calibrate_report, load_cost_model, predict_tps, reference_targets, save_cost_model, simulate)
from .tensorstore import CapacityError, fill_random_prefill, init_weights

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_CHECK = 0, 1, 2, 3
TPS_WINDOW = 128


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _modes(text: str) -> list[RunMode]:
    if text == "all":
        return list(ALL_MODES)
    try:
        return [RunMode(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown mode in {text!r}") from None


# ------------------------------------------------------------------ output

def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def render_csv(header: Sequence[str], rows: Sequence[Sequence], meta: dict) -> str:
    buf = io.StringIO()
    buf.write(f"# tool: wholekernel {__version__}\n")
    for k, v in meta.items():
        buf.write(f"# {k}: {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x) if np.isfinite(x) else "nan"
    if isinstance(x, (np.floating,)):
        return _fmt(float(x))
    return str(x)


def _emit(args, header, rows, meta):
    text = render_csv(header, rows, meta)
    if args.out:
        write_atomic(Path(args.out), text)
    return text


# ------------------------------------------------------------------ config

def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def resolve_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config, args.preset)
        doc = config_to_dict(cfg)
        doc["model"].pop("preset", None)
    else:
        doc = {"model": {"preset": args.preset or "llama31_8b-toy"}}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.field=value, got {item!r}")
        doc.setdefault(section, {})[name] = _parse_value(value)
    if args.seed is not None:
        doc.setdefault("run", {})["seed"] = args.seed
    if getattr(args, "mode", None):
        doc.setdefault("run", {})["mode"] = args.mode
    if getattr(args, "seq_len", None) is not None:
        doc.setdefault("run", {})["seq_len"] = args.seq_len
    return config_from_dict(doc)


def _meta(cfg: Optional[RunConfig], command: str, **extra) -> dict:
    meta = {"command": command}
    if cfg is not None:
        meta["config"] = cfg.digest()
    meta.update(extra)
    return meta


def _cost(args):
    return load_cost_model(args.cost_model) if getattr(args, "cost_model", None) else DEFAULT_COST


# ---------------------------------------------------------------- commands

def cmd_plan(args) -> int:
    cfg = resolve_config(args)
    plan = build_plan(cfg.model, cfg.hardware, cfg.pipeline, cfg.seq_len, cfg.mode, cfg.attn_group_size)
    rep = plan_report(plan)
    print(f"blocks={plan.num_blocks} epochs={len(plan.epochs)} barriers={len(rep['barriers'])} "
          f"weight_bytes={rep['weight_bytes']} kv_bytes={rep['kv_bytes']} sync_bytes={rep['sync_bytes']}")
    counts = [b["chunks"] for b in rep["blocks"]]
    print(f"chunks per block: min={min(counts)} max={max(counts)} total={sum(counts)}")
    rows = [(b["block"], b["chunks"], b["bytes"]) for b in rep["blocks"]]
    _emit(args, ("block", "chunks", "bytes"), rows, _meta(cfg, "plan"))
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = resolve_config(args)
    plan = build_plan(cfg.model, cfg.hardware, cfg.pipeline, cfg.seq_len, cfg.mode, cfg.attn_group_size)
    programs = emit_programs(plan)
    diags = verify_programs(programs, cfg.hardware)
    if diags:
        for d in diags[:20]:
            print(d, file=sys.stderr)
        raise CheckFailed(f"{len(diags)} verification diagnostic(s)")
    if not 0 <= args.block < len(programs):
        raise ConfigError(f"block {args.block} outside 0..{len(programs) - 1}")
    text = render_listing(programs[args.block])
    if args.out:
        write_atomic(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _checksum(logits: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(logits, dtype=np.float32).tobytes()).hexdigest()[:16]


def cmd_decode(args) -> int:
    cfg = resolve_config(args)
    m = cfg.model
    if m.kind != "llama_decoder":
        raise ConfigError("decode needs a llama_decoder model")
    acc = np.float64 if args.acc == "f64" else np.float32
    tol = 1e-9 if args.acc == "f64" else 1e-4
    store = init_weights(m, cfg.seed, cfg.hardware)
    fill_random_prefill(store, args.prefill, cfg.seed + 1)
    token = args.token
    rows = []
    worst = 0.0
    for step in range(args.tokens):
        pos = args.prefill + step
        plan = build_plan(m, cfg.hardware, cfg.pipeline, pos, cfg.mode, cfg.attn_group_size)
        programs = emit_programs(plan)
        ref = reference_forward(store, token, pos) if args.check_oracle else None
        logits = execute_program(programs, store, token, pos, acc_dtype=acc)
        err = float(np.max(np.abs(logits - ref)) / np.max(np.abs(ref))) if ref is not None else float("nan")
        worst = max(worst, err) if ref is not None else worst
        nxt = greedy_token(logits)
        rows.append((step, pos, token, nxt, _checksum(logits), err))
        line = f"step {step} pos {pos} token {token} -> {nxt} checksum {_checksum(logits)}"
        if ref is not None:
            line += f" max_rel_err {err:.3e}"
        print(line)
        token = nxt
    _emit(args, ("step", "pos", "token", "next_token", "checksum", "max_rel_err"), rows,
          _meta(cfg, "decode", prefill=args.prefill, acc=args.acc))
    if args.check_oracle:
        status = "ok" if worst <= tol else "MISMATCH"
        print(f"oracle: max relative error {worst:.3e} (tolerance {tol:g}) {status}")
        if worst > tol:
            raise CheckFailed(f"oracle mismatch: {worst:.3e} > {tol:g}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    cost = _cost(args)
    seq_len = cfg.seq_len if args.prefill is None else args.prefill + TPS_WINDOW // 2
    plan = build_plan(cfg.model, cfg.hardware, cfg.pipeline, seq_len, cfg.mode, cfg.attn_group_size)
    programs = emit_programs(plan)
    diags = verify_programs(programs, cfg.hardware)
    if diags:
        raise CheckFailed(f"program verification failed: {diags[0]}")
    res = simulate(programs, cost, cfg.hardware, timeline=bool(args.timeline), batch=cfg.model.batch)
    print(f"mode={cfg.mode.value} seq_len={seq_len} latency={res.latency * 1e3:.4f} ms "
          f"bandwidth={res.achieved_bandwidth / 1e12:.3f} TB/s tps={res.tokens_per_second:.2f}")
    for k, v in res.breakdown.items():
        print(f"  {k:12s} {v * 1e3:.4f} ms")
    rows = [("latency_s", res.latency), ("weight_bytes", res.weight_bytes), ("kv_bytes", res.kv_bytes),
            ("sync_bytes", res.sync_bytes), ("achieved_bandwidth", res.achieved_bandwidth),
            ("barrier_stall_s", res.barrier_stall), ("launches", res.launches), ("barriers", res.barriers),
            ("tokens_per_second", res.tokens_per_second)]
    rows += [(f"breakdown.{k}", v) for k, v in res.breakdown.items()]
    _emit(args, ("metric", "value"), rows, _meta(cfg, "simulate", seq_len=seq_len))
    if args.timeline:
        text = render_csv(("block", "t_start", "t_end", "kind"), res.timeline, _meta(cfg, "simulate-timeline"))
        write_atomic(Path(args.timeline), text)
    return EXIT_OK


def _read_targets(path: str) -> list[CalibrationTarget]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(line for line in f if not line.startswith("#")):
            try:
                model = ModelConfig(kind="stacked_linear", d_model=int(row["dim"]), layers=int(row["layers"]))
                out.append(CalibrationTarget(model, PipelineConfig(), RunMode.parse(row["mode"]),
                                             float(row["latency_ms"]) * 1e-3))
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"bad target row {row}: {exc}") from None
    return out


def cmd_calibrate(args) -> int:
    cfg = resolve_config(args) if args.config else None
    hw = cfg.hardware if cfg else config_from_dict({}).hardware
    targets = _read_targets(args.targets) if args.targets else reference_targets()
    base = _cost(args)
    rep = calibrate_report(targets, hw, base, args.params.split(","))
    for k, v in rep.params.items():
        print(f"{k} = {v:.6g}")
    for t, r in zip(targets, rep.residuals):
        print(f"  dim={t.model.d_model} layers={t.model.layers} mode={t.mode.value} residual={r:+.4f}")
    if args.out:
        buf = Path(args.out)
        tmp = buf.with_name(f".{buf.name}.tmp")
        save_cost_model(rep.cost, tmp)
        os.replace(tmp, buf)
    return EXIT_OK


def cmd_tune(args) -> int:
    cfg = resolve_config(args)
    space = TuneSpace(tuple(args.stages), tuple(args.depths), tuple(args.warps))
    print(f"grid size {space.size}", file=sys.stderr)
    res = tune(cfg.model, cfg.hardware, cfg.mode, cfg.seq_len, space, _cost(args))
    rows = [(g.stage_size, g.depth, g.consumer_warps, g.latency, int(g.feasible), g.reason) for g in res.grid]
    text = _emit(args, ("stage_size", "depth", "warps", "latency", "feasible", "reason"), rows,
                 _meta(cfg, "tune", seq_len=cfg.seq_len))
    if not args.out:
        sys.stdout.write(text)
    b = res.best
    print(f"best: stage_size={b.stage_size} depth={b.depth} warps={b.consumer_warps} "
          f"latency={res.best_latency * 1e3:.4f} ms", file=sys.stderr)
    return EXIT_OK


SWEEP_PRESETS = {"stacked_linear": "stacked_linear_4k", "llama_decoder": "llama31_8b"}


def cmd_sweep(args) -> int:
    if not args.config and not args.preset:
        args.preset = SWEEP_PRESETS[args.kind]
    base = resolve_config(args)
    cost = _cost(args)
    hw = base.hardware
    rows = []
    if args.kind == "stacked_linear":
        grid = [(d, l, md) for d in args.dims for l in args.layers for md in args.modes]
        print(f"grid size {len(grid)}", file=sys.stderr)
        for d, l, md in grid:
            model = dataclasses.replace(base.model, kind="stacked_linear", d_model=d, layers=l, quant=None)
            plan = build_plan(model, hw, base.pipeline, 0, md)
            res = simulate(emit_programs(plan), cost, hw)
            ref = REFERENCE_STACKED_MS.get((d, l))
            ref_ms = ref[list(RunMode).index(md)] if ref and base.pipeline.stage_size == 64 * KB else float("nan")
            rows.append((d, l, md.value, res.latency * 1e3, ref_ms, res.achieved_bandwidth))
        header = ("dim", "layers", "mode", "latency_ms", "reference_ms", "achieved_bandwidth")
    else:
        grid = [(p, md) for p in args.prefills for md in args.modes]
        print(f"grid size {len(grid)}", file=sys.stderr)
        for p, md in grid:
            tps = predict_tps(base.model, hw, base.pipeline, md, p, cost, TPS_WINDOW)
            rows.append((p, md.value, base.pipeline.stage_size, base.pipeline.depth, tps))
        header = ("prefill", "mode", "stage_size", "depth", "tokens_per_second")
    text = _emit(args, header, rows, _meta(base, "sweep", kind=args.kind))
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run config TOML file")
    common.add_argument("--preset", help="model preset (replaces the config's model base)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="machine-readable output path")
    common.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE", help="override one config field")

    def mode_flags(p, seq=True):
        p.add_argument("--mode", choices=[m.value for m in RunMode])
        if seq:
            p.add_argument("--seq-len", type=int, help="cached positions before the decoded token")

    ap = _Parser(prog="wholekernel", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("plan", parents=[common], help="partition report")
    mode_flags(p)
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("render", parents=[common], help="print one block's program listing")
    mode_flags(p)
    p.add_argument("--block", type=int, default=0)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("decode", parents=[common], help="interpret programs for greedy decode steps")
    mode_flags(p, seq=False)
    p.add_argument("--prefill", type=int, default=0)
    p.add_argument("--tokens", type=int, default=1)
    p.add_argument("--token", type=int, default=1, help="first input token id")
    p.add_argument("--check-oracle", action="store_true")
    p.add_argument("--acc", choices=("f32", "f64"), default="f32")
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("simulate", parents=[common], help="time one decode step")
    mode_flags(p)
    p.add_argument("--prefill", type=int, help=f"time at prefill + {TPS_WINDOW // 2} cached positions")
    p.add_argument("--cost-model")
    p.add_argument("--timeline", help="write per-block timeline CSV here")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("calibrate", parents=[common], help="fit cost-model parameters to measured latencies")
    p.add_argument("--targets", help="CSV with dim,layers,mode,latency_ms (default: single-layer reference rows)")
    p.add_argument("--params", default="kernel_launch_overhead,efficiency.matvec")
    p.add_argument("--cost-model", help="starting cost model")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("tune", parents=[common], help="grid-search pipeline configuration")
    mode_flags(p)
    p.add_argument("--stages", type=_int_list, default=[32 * KB, 64 * KB])
    p.add_argument("--depths", type=_int_list, default=[2, 3, 4, 5])
    p.add_argument("--warps", type=_int_list, default=[4])
    p.add_argument("--cost-model")
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("sweep", parents=[common], help="simulate a grid of workloads")
    p.add_argument("--kind", choices=("stacked_linear", "llama_decoder"), default="stacked_linear")
    p.add_argument("--dims", type=_int_list, default=[2048, 4096, 8192])
    p.add_argument("--layers", type=_int_list, default=[1, 4, 32])
    p.add_argument("--prefills", type=_int_list, default=[128, 1024, 3072, 6144])
    p.add_argument("--modes", type=_modes, default=list(ALL_MODES))
    p.add_argument("--cost-model")
    p.set_defaults(fn=cmd_sweep)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, PartitionError, CapacityError, TuneError, CalibrationError, OSError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CheckFailed, DeadlockError, MemoryOrderError, EmitError) as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
