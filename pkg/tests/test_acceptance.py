"""End-to-end acceptance checks, one recorded PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
"acceptance criteria" section of the terminal summary.
"""

import math
import random
import time
from fractions import Fraction

import numpy as np

from mixstream.cli import headline
from mixstream.costmodel import dram_access, layer_time, sram_size
from mixstream.dse import (
    InfeasibleSeedError,
    TilingPlan,
    evaluate_plan,
    main_tile_candidates,
    optimize_dataflow,
    propagate_group1_tilings,
    seed_space,
)
from mixstream.errors import InfeasibleError
from mixstream.execsim import traffic_sim, verify_conv
from mixstream.gp import GPState, grid_argmax, iterations_to_reach, optimize, posterior, synthetic_objective
from mixstream.netmodel import chain, reference_network
from mixstream.quantizer import avg_bits, compression_rate, layer_bits, quantize_layer
from mixstream.sparsefmt import decode, encode, encoded_size

from oracles import random_chain
from test_quantizer import TABLE_PROPOSED

MIB = 1 << 20


def test_1_cost_model_matches_loop_nest_counter(criterion):
    start = time.perf_counter()
    rng = random.Random(1)
    mismatches = []
    for case in range(100):
        net = random_chain(rng, max_convs=6, max_h=64)
        convs = net.conv_layers
        i = rng.randint(0, len(convs))
        t_i = tuple(rng.randint(1, l.n) for l in convs)
        t_o = tuple(rng.randint(1, l.m) for l in convs)
        for on_chip in (False, True):
            plan = TilingPlan(i, t_i, t_o, on_chip)
            rep = traffic_sim(net, plan)
            if (rep.totals.dram_weight_bytes != dram_access(net, i, on_chip)
                    or rep.totals.sram_peak_bits != sram_size(net, i, plan, on_chip)):
                mismatches.append((case, on_chip))
    elapsed = time.perf_counter() - start
    ok = not mismatches and elapsed < 10
    criterion("1", ok, f"200 net/setting pairs, {len(mismatches)} mismatches, {elapsed:.2f}s")
    assert not mismatches
    assert elapsed < 10


def test_2_balanced_pipeline(criterion):
    rng = random.Random(2)
    unequal = 0
    checked = 0
    while checked < 50:
        net = random_chain(rng, max_convs=6)
        convs = net.conv_layers
        seed = (rng.choice([1, 2, 4]), rng.choice([1, 2, 4, 8]))
        try:
            g = propagate_group1_tilings(net, len(convs), *seed)
        except InfeasibleSeedError:
            continue
        checked += 1
        times = {Fraction(l.h_out * l.w_out * l.n * l.m) / (a * b) for l, (a, b) in zip(convs, g.ideal)}
        unequal += len(times) != 1
    worked = chain("w", 416, 3, [("conv", 3, 1, 32), ("maxpool", 2, 2, 32), ("conv", 3, 1, 64)])
    g = propagate_group1_tilings(worked, 2, 3, 4)
    l1, l2 = worked.conv_layers
    t1 = layer_time(l1, g.rounded[0][0] * g.rounded[0][1])
    t2 = layer_time(l2, g.rounded[1][0] * g.rounded[1][1])
    ok = unequal == 0 and t1 == t2 == 1_384_448
    criterion("2", ok, f"{checked} chains, {unequal} unbalanced; worked example t1={t1} t2={t2}")
    assert ok


def _brute_force_rate(net, alpha):
    """Best frame rate over every boundary, group-1 seed and main tile."""
    convs = net.conv_layers
    best = None
    for i in range(len(convs) + 1):
        g1_options = [()]
        if i:
            g1_options = []
            for seed in seed_space(net):
                try:
                    g1_options.append(propagate_group1_tilings(net, i, *seed).rounded)
                except InfeasibleSeedError:
                    pass
        for g1 in g1_options:
            for t in main_tile_candidates(net, i) or [None]:
                rest = len(convs) - i
                plan = TilingPlan(i, tuple(a for a, _ in g1) + (t,) * rest,
                                  tuple(b for _, b in g1) + (t,) * rest, False, t)
                rep = evaluate_plan(net, plan)
                if rep.sram_bits <= alpha and (best is None or rep.frame_rate > best):
                    best = rep.frame_rate
    return best


def test_3_dataflow_search_matches_brute_force(criterion):
    rng = random.Random(3)
    wrong = []
    infeasible = 0
    for case in range(50):
        net = random_chain(rng, max_convs=6, max_ch=32)
        sizes = sorted(evaluate_plan(net, p).sram_bits for p in optimize_dataflow(net).plans.values())
        alpha = rng.choice(sizes) + rng.randint(0, sizes[-1] // 4)
        want = _brute_force_rate(net, alpha)
        try:
            got = optimize_dataflow(net, alpha).report.frame_rate
        except InfeasibleError:
            got = None
        infeasible += want is None
        if got != want:
            wrong.append(case)
    criterion("3", not wrong, f"50 instances ({infeasible} infeasible), {len(wrong)} disagreements")
    assert not wrong


def test_4a_compression_endpoints_and_headline(criterion):
    net = reference_network("simyolov2")
    ids = [l.id for l in net.conv_layers if l.quantize]
    avg = avg_bits(net, dict(zip(ids, TABLE_PROPOSED)))
    endpoints = compression_rate(0, 1, 1) == 32 and compression_rate(1, 1, 1) == 4
    text = headline(1.148)
    ok = endpoints and abs(avg - 1.148) <= 0.01 and "compression 27.87x" in text
    criterion("4a", ok, f"C(0)=32 C(1)=4: {endpoints}; table ratios give avg_bits {avg:.4f}; "
                        f"headline at 1.148: {text.splitlines()[1]}")
    assert ok


def test_4b_serialized_size_tracks_avg_bits(criterion):
    # Every layer of the reference net with >= 1e4 parameters at its table ratio.
    net = reference_network("simyolov2")
    ids = [l.id for l in net.conv_layers if l.quantize]
    ratios = dict(zip(ids, TABLE_PROPOSED))
    rng = np.random.default_rng(4)
    worst = (0.0, None)
    for l in net.conv_layers:
        n = l.k * l.k * l.n * l.m
        if not l.quantize or n < 10_000:
            continue
        w = rng.normal(size=(l.m, l.n, l.k, l.k)).astype(np.float32)
        enc = encode(quantize_layer(w, ratios[l.id]), 16, 16)
        err = encoded_size(enc).total * 8 / (n * layer_bits(ratios[l.id])) - 1
        if abs(err) > abs(worst[0]):
            worst = (err, l.id)
    ok = abs(worst[0]) <= 0.01
    criterion("4b", ok, f"worst layer {worst[1]}: serialized size {worst[0]:+.1%} vs 1+7p bits "
                        f"(each residual entry is 20 bits, not 8)")
    assert ok


def test_4b_companion_size_reconciles_exactly():
    # What the format does cost: 1 sign bit per weight, 20 bits per residual,
    # a 16-bit count per block, a 32-bit alpha per filter and a fixed header.
    w = np.random.default_rng(5).normal(size=(64, 32, 3, 3)).astype(np.float32)
    for p in (0.0, 0.0154, 0.0808):
        q = quantize_layer(w, p)
        enc = encode(q, 16, 16)
        sign_bytes = 64 * math.ceil(32 * 9 / 8)
        expected = 44 + 64 * 4 + sign_bytes + math.ceil(q.nnz * 20 / 8) + 2 * enc.blocks
        assert encoded_size(enc).total == expected


def test_5_mixed_conv_bit_exact(criterion):
    start = time.perf_counter()
    res = verify_conv(200, seed=5)
    elapsed = time.perf_counter() - start
    ok = res.passed == 200 and res.first_failure is None and elapsed < 30
    criterion("5", ok, f"{res.passed}/{res.total} exact, {elapsed:.2f}s")
    assert ok


def test_6_sparse_round_trip_and_size(criterion):
    rng = np.random.default_rng(6)
    bad_decode = bad_size = 0
    for _ in range(1000):
        m, n = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        k = int(rng.choice([1, 3, 5]))
        t_i, t_o = int(rng.choice([1, 2, 4, 8])), int(rng.choice([1, 2, 4, 8]))
        if k * k * t_i * t_o > 4096:
            t_i = 4
        q = quantize_layer(rng.normal(size=(m, n, k, k)), float(rng.uniform(0, 1)))
        enc = encode(q, t_i, t_o)
        bad_decode += not decode(enc).equals(q)
        bad_size += encoded_size(enc).sparse != math.ceil(q.nnz * 20 / 8) + 2 * enc.blocks
    ok = bad_decode == 0 and bad_size == 0
    criterion("6", ok, f"1000 layers, {bad_decode} round-trip and {bad_size} size mismatches")
    assert ok


def test_7_gp_interpolates_and_converges(criterion):
    x = (0.0, 0.13, 0.4, 0.77, 1.0)
    y = (0.3, -0.2, 0.9, 0.1, 0.5)
    m, _ = posterior(GPState(x, y, noise=1e-10), np.array(x))
    interp = float(np.max(np.abs(m - np.array(y))))

    hits, iters = 0, []
    for seed in range(50):
        r = np.random.default_rng(seed)
        f = synthetic_objective(r.uniform(0.5, 0.8), r.uniform(0.05, 0.4), r.uniform(5, 100), 0.01,
                                n_i=1, n_total=int(r.integers(5, 40)))
        target = grid_argmax(f)
        res = optimize(f, 30, seed=seed)
        hits += abs(res.best_p - target) <= 0.02
        it = iterations_to_reach(res.trace, target)
        iters.append(math.inf if it is None else it)
    median = float(np.median(iters))
    ok = interp < 1e-6 and hits >= 45 and median <= 15
    criterion("7", ok, f"interpolation error {interp:.1e}; {hits}/50 within 0.02; "
                       f"median iterations {median:g}")
    assert ok


def test_8a_all_pipelined_dram_per_frame(criterion):
    net = reference_network("simyolov2")
    L = len(net.conv_layers)
    got = dram_access(net, L, params_on_chip=False)
    err = got / (191 * MIB) - 1
    ok = abs(err) <= 0.10
    criterion("8a", ok, f"boundary={L}, params off-chip: {got / MIB:.1f} MiB vs 191 MB ({err:+.1%}); "
                        f"weights re-read once per output row")
    assert ok


def test_8b_conv7_boundary_dram_per_frame(criterion):
    net = reference_network("simyolov2")
    got = dram_access(net, 7, params_on_chip=True)
    err = got / (14 * MIB) - 1
    ok = abs(err) <= 0.10
    criterion("8b", ok, f"boundary=7, group-1 params on-chip: {got / MIB:.2f} MiB vs 14 MB ({err:+.1%})")
    assert ok
