"""Regenerate the frozen program listings under tests/golden/.

Only rerun after an intentional change to emission; review the diff before committing.
"""
import argparse
from pathlib import Path

from wholekernel.config import HardwareConfig, PipelineConfig, RunMode, TOY_PIPELINE, preset, stacked_linear
from wholekernel.kernelgen import emit_programs, render_listing
from wholekernel.partitioner import build_plan

# (file stem, model, pipeline, seq_len, mode, block)
CASES = [
    ("toy_s300_overlap_b7", preset("llama31_8b-toy"), TOY_PIPELINE, 300, RunMode.FUSED_OVERLAP, 7),
    ("toy_s300_baseline_b7", preset("llama31_8b-toy"), TOY_PIPELINE, 300, RunMode.BASELINE, 7),
    ("toy_s0_fused_b0", preset("llama31_8b-toy"), TOY_PIPELINE, 0, RunMode.FUSED, 0),
    ("linear2k_x2_overlap_b0", stacked_linear(2048, 2), PipelineConfig(), 0, RunMode.FUSED_OVERLAP, 0),
]


def listing(model, pipeline, seq_len, mode, block, hw=None) -> str:
    plan = build_plan(model, hw or HardwareConfig(), pipeline, seq_len, mode)
    return render_listing(emit_programs(plan)[block])


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dir", default=str(Path(__file__).resolve().parents[1] / "tests" / "golden"))
    args = ap.parse_args()
    out = Path(args.dir)
    out.mkdir(parents=True, exist_ok=True)
    for stem, *case in CASES:
        text = listing(*case)
        (out / f"{stem}.lst").write_text(text)
        print(f"{stem}: {text.count(chr(10)) - 1} instructions")


if __name__ == "__main__":
    main()
