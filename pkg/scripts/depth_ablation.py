"""Decode-step latency of the 8B decoder across stage sizes and pipeline depths."""
import argparse

from wholekernel.autotuner import TuneSpace, tune
from wholekernel.config import KB, HardwareConfig, RunMode, preset
from wholekernel.simulator import DEFAULT_COST


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seq-len", type=int, default=3072)
    ap.add_argument("--stages", default="32,64", help="stage sizes in KB")
    ap.add_argument("--depths", default="2,3,4,5")
    args = ap.parse_args()

    space = TuneSpace(stage_sizes=tuple(int(k) * KB for k in args.stages.split(",")),
                      depths=tuple(int(d) for d in args.depths.split(",")))
    res = tune(preset("llama31_8b"), HardwareConfig(), RunMode.FUSED_OVERLAP, args.seq_len, space, DEFAULT_COST)
    print("stage_kb,depth,latency_ms,note")
    for g in res.grid:
        print(f"{g.stage_size // KB},{g.depth},{'' if not g.feasible else f'{g.latency * 1e3:.4f}'},{g.reason}")
    print(f"# best: {res.best.stage_size // KB} KB depth {res.best.depth}")


if __name__ == "__main__":
    main()
