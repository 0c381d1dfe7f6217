"""Predicted 8B decode throughput against prefill length, next to the reference measurements."""
import argparse

from wholekernel.config import HardwareConfig, default_pipeline, preset
from wholekernel.simulator import DEFAULT_COST, REFERENCE_TPS_8B, predict_tps


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--mode", default="fused_overlap")
    args = ap.parse_args()

    hw, model = HardwareConfig(), preset("llama31_8b")
    pipe = default_pipeline(model, hw)
    print("prefill,predicted_tps,reference_tps,rel_err")
    for prefill, ref in sorted(REFERENCE_TPS_8B.items()):
        tps = predict_tps(model, hw, pipe, args.mode, prefill, DEFAULT_COST)
        print(f"{prefill},{tps:.1f},{ref:.1f},{tps / ref - 1:+.3f}")


if __name__ == "__main__":
    main()
