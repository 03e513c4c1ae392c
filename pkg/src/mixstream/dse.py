"""Tiling selection and group-boundary search for the two-group dataflow."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .costmodel import (
    Bits,
    CostReport,
    MAIN,
    PIPELINED,
    buffer_sizes,
    dram_access,
    group_times,
    layer_time,
    shortcut_elems,
    sram_size,
    weight_bits,
)
from .errors import InfeasibleError, SchemaError
from .netmodel import NetworkDesc


class InfeasibleSeedError(InfeasibleError):
    pass


def is_pow2(x: int) -> bool:
    return x >= 1 and x & (x - 1) == 0


def pow2_floor(x: int) -> int:
    return 1 << (x.bit_length() - 1)


def pow2_upto(limit: int) -> list[int]:
    out, v = [], 1
    while v <= limit:
        out.append(v)
        v <<= 1
    return out


def round_pow2(x: Fraction) -> int:
    """Nearest power of two (linear distance), ties rounding up.  Requires ``x >= 1``."""
    if x < 1:
        raise ValueError("round_pow2 needs x >= 1")
    lo = pow2_floor(int(x))
    hi = lo * 2
    return lo if x - lo < hi - x else hi


@dataclass(frozen=True)
class TilingPlan:
    """Per-conv-layer tiles plus the group boundary.

    ``t_i``/``t_o`` are indexed by conv ordinal; layers at or after ``boundary``
    all carry the main-layer tile ``main_tile``.
    """

    boundary: int
    t_i: tuple[int, ...]
    t_o: tuple[int, ...]
    params_on_chip: bool = False
    main_tile: int | None = None

    @property
    def pf(self) -> tuple[int, ...]:
        return tuple(a * b for a, b in zip(self.t_i, self.t_o))

    def to_dict(self, net: NetworkDesc | None = None) -> dict:
        layers = []
        for j, (a, b) in enumerate(zip(self.t_i, self.t_o)):
            entry = {"t_i": a, "t_o": b}
            if net is not None:
                entry = {"id": net.conv_layers[j].id, **entry}
            layers.append(entry)
        out = {"boundary": self.boundary, "params_on_chip": self.params_on_chip,
               "main_tile": self.main_tile, "layers": layers}
        if net is not None:
            out = {"network": net.name, **out}
        return out

    @classmethod
    def from_dict(cls, doc: Mapping) -> "TilingPlan":
        try:
            layers = doc["layers"]
            return cls(
                boundary=int(doc["boundary"]),
                t_i=tuple(int(e["t_i"]) for e in layers),
                t_o=tuple(int(e["t_o"]) for e in layers),
                params_on_chip=bool(doc.get("params_on_chip", False)),
                main_tile=doc.get("main_tile"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed plan document: {exc}") from exc


def plan_violations(net: NetworkDesc, plan: TilingPlan) -> list[str]:
    """Every broken TilingPlan invariant, as readable strings (empty when valid)."""
    convs = net.conv_layers
    errs = []
    if len(plan.t_i) != len(convs) or len(plan.t_o) != len(convs):
        return [f"plan covers {len(plan.t_i)} layers, network has {len(convs)} conv layers"]
    i = plan.boundary
    if not 0 <= i <= len(convs):
        return [f"boundary {i} outside [0, {len(convs)}]"]
    for j, layer in enumerate(convs):
        a, b = plan.t_i[j], plan.t_o[j]
        if not 1 <= a <= layer.n:
            errs.append(f"layer {layer.id}: t_i={a} outside [1, {layer.n}]")
        if not 1 <= b <= layer.m:
            errs.append(f"layer {layer.id}: t_o={b} outside [1, {layer.m}]")
        if j < i:
            if not is_pow2(a * b):
                errs.append(f"layer {layer.id}: group-1 PF={a * b} is not a power of two")
            if j + 1 < i and plan.t_i[j + 1] != b:
                errs.append(f"layer {convs[j + 1].id}: t_i={plan.t_i[j + 1]} does not chain from t_o={b}")
        else:
            if a != b or a != plan.main_tile:
                errs.append(f"layer {layer.id}: main-layer tiles ({a}, {b}) differ from main_tile={plan.main_tile}")
            elif not is_pow2(a):
                errs.append(f"layer {layer.id}: main tile {a} is not a power of two")
    if i == len(convs) and plan.main_tile is not None:
        errs.append("main_tile set but the main group is empty")
    return errs


def validate_plan(net: NetworkDesc, plan: TilingPlan) -> TilingPlan:
    errs = plan_violations(net, plan)
    if errs:
        raise SchemaError("invalid tiling plan: " + "; ".join(errs))
    return plan


@dataclass(frozen=True)
class Group1Tiling:
    ideal: tuple[tuple[Fraction, Fraction], ...]
    rounded: tuple[tuple[int, int], ...]

    def imbalance(self, net: NetworkDesc) -> Fraction:
        """max(t_l) / min(t_l) over the rounded tiles (1 means perfectly balanced)."""
        times = [layer_time(net.conv_layers[j], a * b) for j, (a, b) in enumerate(self.rounded)]
        return max(times) / min(times) if times else Fraction(1)


def propagate_group1_tilings(net: NetworkDesc, i: int, t_i1: int, t_o1: int) -> Group1Tiling:
    """Chain tiles through the first ``i`` conv layers so every layer takes the same time.

    The next layer's input tile equals this layer's output tile; its output tile
    scales with the ratio of work.  The ideal chain is kept exact; the rounded
    chain snaps each output tile to a power of two not exceeding the layer width.
    """
    convs = net.conv_layers
    if not 1 <= i <= len(convs):
        raise ValueError(f"group 1 needs 1 <= i <= {len(convs)}, got {i}")
    if t_i1 < 1 or t_o1 < 1:
        raise InfeasibleSeedError(f"seed tiles must be >= 1, got ({t_i1}, {t_o1})")
    ideal = [(Fraction(t_i1), Fraction(t_o1))]
    rounded = [(t_i1, t_o1)]
    for j in range(1, i):
        prev, cur = convs[j - 1], convs[j]
        work_ratio = Fraction(cur.h_out * cur.w_out * cur.m, prev.h_out * prev.w_out * prev.n)
        ideal.append((ideal[-1][1], work_ratio * ideal[-1][0]))
        t_i = rounded[-1][1]
        raw = work_ratio * rounded[-1][0]
        if raw < 1:
            raise InfeasibleSeedError(
                f"seed ({t_i1}, {t_o1}) gives t_o={float(raw):.4g} < 1 at layer {cur.id}",
                {cur.id: "tiling"},
            )
        rounded.append((t_i, min(round_pow2(raw), pow2_floor(cur.m))))
    return Group1Tiling(ideal=tuple(ideal), rounded=tuple(rounded))


def main_tile_candidates(net: NetworkDesc, i: int) -> list[int]:
    rest = net.conv_layers[i:]
    if not rest:
        return []
    return pow2_upto(min(min(l.n, l.m) for l in rest))


@dataclass
class MultiplierModel:
    """Multiplier-equivalent budget model.

    Dense kernels cost ``K^2 * PF`` multipliers scaled by ``weight_table[bits]``
    (binary weights need none).  ``sparse`` adds per-layer sparse-kernel
    multipliers keyed by layer id; the main layer takes the max over its layers.
    """

    weight_table: Mapping[int, Fraction | int] = field(default_factory=dict)
    dense_bits: Mapping[int, int] = field(default_factory=dict)
    sparse: Mapping[int, int] = field(default_factory=dict)

    def _weight(self, net: NetworkDesc, layer_id: int) -> Fraction:
        bits = self.dense_bits.get(layer_id, net.precision.q_w)
        if bits in self.weight_table:
            return Fraction(self.weight_table[bits])
        return Fraction(0 if bits == 1 else 1)

    def group1(self, net: NetworkDesc, tiles: Sequence[tuple[int, int]]) -> Fraction:
        total = Fraction(0)
        for layer, (a, b) in zip(net.conv_layers, tiles):
            total += layer.k ** 2 * a * b * self._weight(net, layer.id) + self.sparse.get(layer.id, 0)
        return total

    def main(self, net: NetworkDesc, i: int, tile: int | None) -> Fraction:
        rest = net.conv_layers[i:]
        if not rest or tile is None:
            return Fraction(0)
        dense = max(l.k ** 2 * tile * tile * self._weight(net, l.id) for l in rest)
        return dense + max(self.sparse.get(l.id, 0) for l in rest)

    def total(self, net: NetworkDesc, plan: TilingPlan) -> int:
        g1 = list(zip(plan.t_i, plan.t_o))[: plan.boundary]
        v = self.group1(net, g1) + self.main(net, plan.boundary, plan.main_tile)
        return -(-v.numerator // v.denominator)


def _as_fraction(x) -> Fraction:
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


def evaluate_plan(net: NetworkDesc, plan: TilingPlan, clock=200e6, *,
                  mult_model: MultiplierModel | None = None,
                  weight_overrides: Mapping[int, Bits] | None = None) -> CostReport:
    mult_model = mult_model or MultiplierModel()
    t_g1, t_g2 = group_times(net, plan.boundary, plan)
    uneven = tuple(j + 1 for j, (l, pf) in enumerate(zip(net.conv_layers, plan.pf))
                   if layer_time(l, pf).denominator != 1)
    return CostReport(
        boundary=plan.boundary,
        sram_bits=sram_size(net, plan.boundary, plan, plan.params_on_chip, weight_overrides),
        dram_bytes_per_frame=dram_access(net, plan.boundary, plan.params_on_chip, weight_overrides),
        t_g1=t_g1,
        t_g2=t_g2,
        frame_rate=_as_fraction(clock) / max(t_g1, t_g2),
        multipliers=mult_model.total(net, plan),
        fractional_time_layers=uneven,
    )


def _main_time(net: NetworkDesc, i: int, tile: int) -> Fraction:
    return sum((Fraction(l.h_out * l.w_out * l.n * l.m, tile * tile) for l in net.conv_layers[i:]),
               Fraction(0))


def select_main_tiling(net: NetworkDesc, i: int, t_g1: Fraction, *,
                       max_multipliers=None, mult_model: MultiplierModel | None = None) -> int | None:
    """Main-layer tile minimising ``|t_g1 - t_g2|``; ties go to the smaller tile.

    Returns ``None`` when the main group is empty.
    """
    cands = main_tile_candidates(net, i)
    if not cands:
        if i < len(net.conv_layers):
            raise InfeasibleError("no main-layer tile candidates", {i: "tiling"})
        return None
    mult_model = mult_model or MultiplierModel()
    if max_multipliers is not None:
        cands = [t for t in cands if mult_model.main(net, i, t) <= max_multipliers]
        if not cands:
            raise InfeasibleError(f"no main-layer tile fits {max_multipliers} multipliers",
                                  {i: "multipliers"})
    return min(cands, key=lambda t: (abs(t_g1 - _main_time(net, i, t)), t))


def seed_space(net: NetworkDesc) -> list[tuple[int, int]]:
    """Group-1 seeds in reduction order: largest first, halving t_o before t_i."""
    first = net.conv_layers[0]
    return [(a, b) for a in reversed(pow2_upto(first.n)) for b in reversed(pow2_upto(first.m))]


@dataclass(frozen=True)
class SweepRow:
    boundary: int
    sram_bits: int
    dram_bytes: int
    t_g1: Fraction
    t_g2: Fraction
    frame_rate: Fraction
    feasible: bool


@dataclass
class DseResult:
    plan: TilingPlan | None
    report: CostReport | None
    rows: list[SweepRow]
    plans: dict[int, TilingPlan]
    reasons: dict[int, str]


class _SramParts:
    """Boundary-wise decomposition of ``sram_size`` for fast candidate scoring."""

    def __init__(self, net: NetworkDesc, i: int, params_on_chip: bool, weight_overrides):
        prec = net.precision
        rest = net.conv_layers[i:]
        self.fixed = 0
        self.out_unit = 0
        for l in rest:
            b = buffer_sizes(l, prec, 1, MAIN, shortcut_elems=shortcut_elems(net, l))
            self.fixed = max(self.fixed, b.in_frame_buff)
            self.out_unit = max(self.out_unit, b.frame_out_buff)
        self.fixed *= 3
        self.fixed += max((shortcut_elems(net, l) * prec.q_a for l in rest), default=0)
        self.row = []
        for l in net.conv_layers[:i]:
            b = buffer_sizes(l, prec, 1, PIPELINED, bits=weight_bits(net, l, weight_overrides))
            self.row.append((b.row_buff + (b.param_store if params_on_chip else 0), b.line_out_buff))

    def total(self, g1_tiles, tile) -> int:
        s = self.fixed + (tile or 0) * self.out_unit
        for (base, unit), (_, t_o) in zip(self.row, g1_tiles):
            s += base + unit * t_o
        return s


def _group1_time(net: NetworkDesc, tiles) -> Fraction:
    i = len(tiles)
    if i == 0:
        return Fraction(0)
    convs, delays = net.conv_layers, net.conv_delays
    t = Fraction(0)
    for j in range(i - 1):
        t += delays[j] * layer_time(convs[j], tiles[j][0] * tiles[j][1]) / convs[j].h_out
    return t + layer_time(convs[i - 1], tiles[i - 1][0] * tiles[i - 1][1])


def _make_plan(net, i, g1_tiles, tile, params_on_chip) -> TilingPlan:
    rest = len(net.conv_layers) - i
    return TilingPlan(
        boundary=i,
        t_i=tuple(a for a, _ in g1_tiles) + (tile,) * rest,
        t_o=tuple(b for _, b in g1_tiles) + (tile,) * rest,
        params_on_chip=params_on_chip,
        main_tile=tile if rest else None,
    )


def optimize_dataflow(net: NetworkDesc, alpha_bits: int | None = None, mult_budget=None,
                      clock=200e6, *, params_on_chip: bool = False,
                      mult_model: MultiplierModel | None = None,
                      weight_overrides: Mapping[int, Bits] | None = None,
                      main_rule: str = "throughput") -> DseResult:
    """Pick the boundary and tiles with the highest frame rate under SRAM/multiplier budgets.

    For each boundary every group-1 seed is tried in reduction order and
    propagated through group 1.  With ``main_rule="throughput"`` the main tile
    is the feasible one with the best frame rate (ties: smaller SRAM, then
    smaller ``|t_g1 - t_g2|``, then fewer multipliers); ``main_rule="balance"``
    takes the tile minimising ``|t_g1 - t_g2|`` first and only then checks the
    SRAM budget.  Winner: highest frame rate, then smaller SRAM, then smaller
    boundary.  Raises :class:`InfeasibleError` when nothing fits.
    """
    if main_rule not in ("throughput", "balance"):
        raise ValueError(f"unknown main_rule {main_rule!r}")
    mult_model = mult_model or MultiplierModel()
    clock_f = _as_fraction(clock)
    convs = net.conv_layers
    alpha = float("inf") if alpha_bits is None else alpha_bits
    budget = float("inf") if mult_budget is None else mult_budget

    best_by_i: dict[int, tuple] = {}
    fallback: dict[int, tuple] = {}
    reasons: dict[int, str] = {}
    for i in range(len(convs) + 1):
        parts = _SramParts(net, i, params_on_chip, weight_overrides)
        mains = main_tile_candidates(net, i) or [None]
        t_g2_of = {t: (_main_time(net, i, t) if t else Fraction(0)) for t in mains}
        if i == 0:
            g1_options = [()]
        else:
            g1_options = []
            for seed in seed_space(net):
                try:
                    g1_options.append(propagate_group1_tilings(net, i, *seed).rounded)
                except InfeasibleSeedError:
                    continue
        any_sram = any_mult = False
        best = None
        for order, g1 in enumerate(g1_options):
            t_g1 = _group1_time(net, g1)
            m1 = mult_model.group1(net, g1)
            if main_rule == "balance" and mains != [None]:
                try:
                    tiles = [select_main_tiling(net, i, t_g1, max_multipliers=budget - m1,
                                                mult_model=mult_model)]
                except InfeasibleError:
                    tiles = []
            else:
                tiles = mains
            for t in tiles:
                sram = parts.total(g1, t)
                mults = m1 + mult_model.main(net, i, t)
                t_g2 = t_g2_of[t]
                cand = (sram, g1, t)
                if i not in fallback or sram < fallback[i][0]:
                    fallback[i] = cand
                ok_sram, ok_mult = sram <= alpha, mults <= budget
                any_sram |= ok_sram
                any_mult |= ok_mult
                if not (ok_sram and ok_mult):
                    continue
                fr = clock_f / max(t_g1, t_g2)
                key = (-fr, sram, abs(t_g1 - t_g2), mults, order)
                if best is None or key < best[0]:
                    best = (key, g1, t)
        if best is not None:
            best_by_i[i] = best
        elif not g1_options:
            reasons[i] = "tiling"
        elif not any_sram:
            reasons[i] = "sram"
        elif not any_mult:
            reasons[i] = "multipliers"
        else:
            reasons[i] = "sram+multipliers"

    plans: dict[int, TilingPlan] = {}
    for i in range(len(convs) + 1):
        if i in best_by_i:
            _, g1, t = best_by_i[i]
        elif i in fallback:
            _, g1, t = fallback[i]
        else:
            continue
        plans[i] = _make_plan(net, i, g1, t, params_on_chip)

    rows = sweep(net, params_on_chip, plans, clock=clock, alpha_bits=alpha_bits,
                 mult_budget=mult_budget, mult_model=mult_model,
                 weight_overrides=weight_overrides)

    if not best_by_i:
        raise InfeasibleError(
            "no feasible group boundary: " + ", ".join(f"i={i}: {r}" for i, r in sorted(reasons.items())),
            reasons,
        )
    win = min(best_by_i, key=lambda i: (best_by_i[i][0][0], best_by_i[i][0][1], i))
    plan = plans[win]
    report = evaluate_plan(net, plan, clock, mult_model=mult_model, weight_overrides=weight_overrides)
    return DseResult(plan=plan, report=report, rows=rows, plans=plans, reasons=reasons)


def sweep(net: NetworkDesc, params_on_chip: bool, plans: Mapping[int, TilingPlan] | Iterable[TilingPlan],
          *, clock=200e6, alpha_bits: int | None = None, mult_budget=None,
          mult_model: MultiplierModel | None = None,
          weight_overrides: Mapping[int, Bits] | None = None) -> list[SweepRow]:
    """One row per supplied boundary plan, ordered by boundary."""
    if not isinstance(plans, Mapping):
        plans = {p.boundary: p for p in plans}
    rows = []
    for i in sorted(plans):
        plan = plans[i]
        if plan.params_on_chip != params_on_chip:
            plan = TilingPlan(plan.boundary, plan.t_i, plan.t_o, params_on_chip, plan.main_tile)
        rep = evaluate_plan(net, plan, clock, mult_model=mult_model, weight_overrides=weight_overrides)
        feasible = ((alpha_bits is None or rep.sram_bits <= alpha_bits)
                    and (mult_budget is None or rep.multipliers <= mult_budget))
        rows.append(SweepRow(i, rep.sram_bits, rep.dram_bytes_per_frame, rep.t_g1, rep.t_g2,
                             rep.frame_rate, feasible))
    return rows


SWEEP_HEADER = ("boundary", "sram_bits", "dram_bytes", "t_g1", "t_g2", "frame_rate", "feasible")


def _sig6(x) -> str:
    return f"{float(x):.6g}"


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([r.boundary, r.sram_bits, r.dram_bytes, _sig6(r.t_g1), _sig6(r.t_g2),
                    _sig6(r.frame_rate), str(r.feasible).lower()])
    return buf.getvalue()
