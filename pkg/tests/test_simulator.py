import dataclasses
import math

import numpy as np
import pytest

from wholekernel.config import ConfigError, HardwareConfig, PipelineConfig, RunMode, TOY_PIPELINE, stacked_linear
from wholekernel.kernelgen import (AsyncLoad, AwaitStage, Compute, DeviceProgram, GlobalBarrier, LaunchMarker,
                                   ReleaseStage, emit_programs)
from wholekernel.partitioner import ChunkDescriptor, build_plan
from wholekernel.simulator import (CalibrationError, CalibrationTarget, CostModel, DEFAULT_COST, DeadlockError,
                                   calibrate_report, load_cost_model, plan_bytes, reference_targets, save_cost_model,
                                   simulate)

from conftest import H100, toy_programs

# no ramp, no per-load cap, no issue cost: hand-computable
FLAT = CostModel(peak_bandwidth=1e12, efficiency={"matvec": 0.5, "glu": 1.0, "attn": 1.0}, ramp_chunks=0.0,
                 compute_throughput_per_sm=1e9, kernel_launch_overhead=1e-6, barrier_latency=2e-7,
                 load_latency=1e-7, load_rate_cap=math.inf)


def chunk(nbytes, index=0, op="linear"):
    return ChunkDescriptor(0, op, index, index * nbytes, nbytes, 0, 1, "bf16", "weight")


def program(block, body, depth=2):
    return DeviceProgram(block, [LaunchMarker(0), *body], 64 * 1024, depth, 0)


def load_compute(c, work, slot=0):
    return [AsyncLoad(c, slot), AwaitStage(slot), Compute("matvec_linear", 0, (slot,), (c,), work), ReleaseStage(slot)]


def test_single_load_hand_value():
    r = simulate([program(0, load_compute(chunk(10**6), 1000))], FLAT)
    # launch + bytes / (peak * eff) + load latency + work / compute
    assert r.latency == pytest.approx(1e-6 + 1e6 / 0.5e12 + 1e-7 + 1e-6, rel=1e-12)
    assert r.weight_bytes == 10**6 and r.launches == 1 and r.barriers == 0
    assert r.busy[0] == pytest.approx(1e-6)


def test_equal_share_between_blocks():
    progs = [program(b, load_compute(chunk(10**6, b), 0)) for b in range(4)]
    r = simulate(progs, FLAT)
    # four concurrent loads share peak * eff equally, so all finish together
    assert r.latency == pytest.approx(1e-6 + 4e6 / 0.5e12 + 1e-7, rel=1e-12)
    assert r.achieved_bandwidth <= FLAT.peak_bandwidth


def test_per_load_rate_cap():
    capped = dataclasses.replace(FLAT, load_rate_cap=1e11)
    r = simulate([program(0, load_compute(chunk(10**6), 0))], capped)
    assert r.latency == pytest.approx(1e-6 + 1e6 / 1e11 + 1e-7, rel=1e-12)


def test_ramp_efficiency():
    ramped = dataclasses.replace(FLAT, ramp_chunks=1.0)
    r = simulate([program(0, load_compute(chunk(10**6), 0))], ramped)
    # one load in the sublayer: efficiency halves
    assert r.latency == pytest.approx(1e-6 + 1e6 / 0.25e12 + 1e-7, rel=1e-12)


def test_barrier_waits_for_slowest():
    progs = [program(b, [Compute("glu_reduce", 0, work=1000 * (b + 1)), GlobalBarrier(1, "L0.linear")])
             for b in range(3)]
    r = simulate(progs, FLAT)
    assert r.latency == pytest.approx(1e-6 + 3e-6 + 2e-7, rel=1e-12)
    assert r.barrier_stall == pytest.approx((3e-6 + 2e-7) + (2e-6 + 2e-7) + (1e-6 + 2e-7), rel=1e-9)
    assert r.barriers == 1


def test_issue_cost_occupies_producer():
    c = dataclasses.replace(FLAT, load_issue_cost=1e-6)
    one = [program(0, load_compute(chunk(1000), 0), depth=d) for d in (2, 5)]
    # a lone load starts at once; issuing only delays the producer's next load
    assert simulate([one[0]], c).latency == simulate([one[1]], c).latency == simulate([one[0]], FLAT).latency

    def two(depth):
        body = [AsyncLoad(chunk(1000, 0), 0), AsyncLoad(chunk(1000, 1), 1), AwaitStage(0), AwaitStage(1),
                Compute("matvec_linear", 0, (0, 1), (chunk(1000, 0), chunk(1000, 1)), 0), ReleaseStage(0),
                ReleaseStage(1)]
        return simulate([program(0, body, depth=depth)], c).latency

    assert two(5) - two(2) == pytest.approx(3e-6, rel=1e-9)
    assert two(2) == pytest.approx(1e-6 + 2e-6 + 1000 / 0.5e12 + 1e-7, rel=1e-9)


def test_deadlock_on_mismatched_barriers():
    progs = [program(0, [GlobalBarrier(1)]), program(1, [])]
    with pytest.raises(DeadlockError) as e:
        simulate(progs, FLAT)
    assert 0 in e.value.stuck


def test_empty_and_too_many_programs():
    assert simulate([], FLAT).latency == 0.0
    with pytest.raises(ConfigError):
        simulate([program(b, []) for b in range(3)], FLAT, HardwareConfig(num_sms=2))


def test_overlap_then_fused_then_baseline_on_toy():
    lat = {m: simulate(toy_programs(300, m), DEFAULT_COST, H100).latency for m in RunMode}
    assert lat[RunMode.FUSED_OVERLAP] <= lat[RunMode.FUSED] < lat[RunMode.BASELINE]


def test_breakdown_sums_to_latency():
    r = simulate(toy_programs(300, RunMode.BASELINE), DEFAULT_COST, H100, timeline=True)
    assert sum(r.breakdown.values()) == pytest.approx(r.latency, rel=1e-12)
    assert {"qkv", "attn", "glu", "launch"} <= set(r.breakdown)
    assert r.timeline and all(t1 >= t0 for _, t0, t1, _ in r.timeline)
    assert np.all(r.idle >= -1e-15)


def test_deterministic():
    progs = toy_programs(300, RunMode.FUSED_OVERLAP)
    a, b = simulate(progs, DEFAULT_COST, H100), simulate(progs, DEFAULT_COST, H100)
    assert a.latency == b.latency and a.breakdown == b.breakdown


def test_bytes_account_matches_plan():
    plan = build_plan(stacked_linear(4096, 2), H100, PipelineConfig(), 0)
    progs = emit_programs(plan)
    r = simulate(progs, DEFAULT_COST, H100)
    assert r.weight_bytes == plan.weight_bytes() == plan_bytes(progs)
    assert r.latency >= r.bytes_moved / DEFAULT_COST.peak_bandwidth


def test_cost_model_validation_and_io(tmp_path):
    with pytest.raises(ConfigError, match="efficiency"):
        CostModel(efficiency={"matvec": 1.5, "glu": 1, "attn": 1})
    with pytest.raises(ConfigError, match="non-negative"):
        CostModel(barrier_latency=-1)
    p = tmp_path / "cost.toml"
    save_cost_model(DEFAULT_COST, p)
    assert load_cost_model(p) == DEFAULT_COST
    save_cost_model(FLAT, p)  # infinite cap is dropped and comes back as the default
    assert load_cost_model(p).load_rate_cap == CostModel().load_rate_cap
    p.write_text("bogus = 1\n")
    with pytest.raises(ConfigError, match="unknown cost model"):
        load_cost_model(p)


def test_with_params_tracks_provenance():
    c = DEFAULT_COST.with_params({"efficiency.glu": 0.7, "barrier_latency": 1e-6}, provenance="calibrated")
    assert c.get("efficiency.glu") == 0.7 and c.barrier_latency == 1e-6
    assert c.provenance["barrier_latency"] == "calibrated"
    assert DEFAULT_COST.efficiency["glu"] == 0.90


def test_calibration_recovers_known_parameters():
    truth = DEFAULT_COST.with_params({"kernel_launch_overhead": 5e-6, "efficiency.matvec": 0.7})
    targets = []
    for dim in (2048, 4096, 8192):
        m = stacked_linear(dim, 1)
        lat = simulate(emit_programs(build_plan(m, H100, PipelineConfig(), 0, RunMode.BASELINE)), truth, H100).latency
        targets.append(CalibrationTarget(m, PipelineConfig(), RunMode.BASELINE, lat))
    rep = calibrate_report(targets, H100, DEFAULT_COST)
    assert rep.params["kernel_launch_overhead"] == pytest.approx(5e-6, rel=1e-4)
    assert rep.params["efficiency.matvec"] == pytest.approx(0.7, rel=1e-4)
    assert rep.max_residual < 1e-6
    assert rep.cost.provenance["kernel_launch_overhead"] == "calibrated"


def test_calibration_underdetermined():
    t = reference_targets()
    with pytest.raises(CalibrationError, match="underdetermined"):
        calibrate_report(t[:1], H100)
    same = [t[0], dataclasses.replace(t[0], latency=t[0].latency * 1.1)]
    with pytest.raises(CalibrationError, match="workload sizes"):
        calibrate_report(same, H100)


def test_reference_targets_shape():
    t = reference_targets()
    assert len(t) == 3 and all(x.mode is RunMode.BASELINE and x.model.layers == 1 for x in t)
    assert len(reference_targets(layers=(1, 4, 32), modes=list(RunMode))) == 27
