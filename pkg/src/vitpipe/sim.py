"""Deterministic tile-level simulator of the mixed-granularity pipeline.

Stages fire one iteration at a time: a firing consumes tiles from every
input channel, occupies the stage for its per-iteration cost, and delivers
tiles to every output channel when it completes.  A stage fires only when
all inputs can supply and all outputs can accept (reserved at fire time), so
handshakes carry no cost of their own; all cost lives in the stage.

Channel kinds:
  fifo         tile queue of fixed depth (None = unbounded)
  pipo         two banks of one full tensor each; the consumer sees a tensor
               only once it is completely written
  deep_buffer  one readable tensor replayed by the consumer for a whole
               image, plus a staging area that accepts the next image's
               tiles while the current one is being read; the moment the
               last read of image k completes, a fully staged image k+1
               becomes readable

Scheduling is a fixed point per timestamp over stages in declaration order;
channels have a single producer and a single consumer, so a firing never
revokes another stage's eligibility and the trace is order-independent.
"""

from __future__ import annotations

import csv
import heapq
import json
from dataclasses import dataclass, field, replace
from pathlib import Path


@dataclass(frozen=True)
class InPort:
    channel: str
    count: int = 1
    gated: bool = False     # deep-buffer read: needs the sealed image


@dataclass(frozen=True)
class OutPort:
    channel: str
    count: int = 1


@dataclass(frozen=True)
class StageSpec:
    name: str
    cost: int               # cycles per iteration
    trips: int              # iterations per image
    inputs: tuple[InPort, ...] = ()
    outputs: tuple[OutPort, ...] = ()

    def __post_init__(self):
        if self.cost < 0 or self.trips < 1:
            raise ValueError(f"stage {self.name}: bad cost/trips")


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    kind: str = "fifo"          # fifo | pipo | deep_buffer
    depth: int | None = 2       # fifo only; None = unbounded
    groups: int = 1             # tiles per tensor (pipo / deep_buffer)
    reads_per_image: int = 1    # deep_buffer: consumer iterations per image
    tile_bits: int = 0          # informational, for cost reports

    def __post_init__(self):
        if self.kind not in ("fifo", "pipo", "deep_buffer"):
            raise ValueError(f"channel {self.name}: unknown kind {self.kind}")
        if self.kind == "fifo" and self.depth is not None and self.depth < 0:
            raise ValueError(f"channel {self.name}: negative depth")


@dataclass
class PipelineGraph:
    stages: list[StageSpec]
    channels: list[ChannelSpec]

    def __post_init__(self):
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise ValueError("duplicate channel names")
        chan = set(names)
        producers: dict[str, str] = {}
        consumers: dict[str, str] = {}
        for s in self.stages:
            for p in s.inputs:
                if p.channel not in chan:
                    raise ValueError(f"stage {s.name}: unknown channel {p.channel}")
                if p.channel in consumers:
                    raise ValueError(f"channel {p.channel} has two consumers")
                consumers[p.channel] = s.name
            for p in s.outputs:
                if p.channel not in chan:
                    raise ValueError(f"stage {s.name}: unknown channel {p.channel}")
                if p.channel in producers:
                    raise ValueError(f"channel {p.channel} has two producers")
                producers[p.channel] = s.name
        for c in self.channels:
            if c.name not in producers or c.name not in consumers:
                raise ValueError(f"channel {c.name} is dangling")

    def channel(self, name: str) -> ChannelSpec:
        for c in self.channels:
            if c.name == name:
                return c
        raise KeyError(name)

    def with_fifo_depth(self, name: str, depth: int | None) -> "PipelineGraph":
        out = []
        for c in self.channels:
            if c.name == name:
                if c.kind != "fifo":
                    raise ValueError(f"{name} is not a fifo")
                c = replace(c, depth=depth)
            out.append(c)
        return PipelineGraph(self.stages, out)

    @property
    def sink(self) -> str:
        sinks = [s.name for s in self.stages if not s.outputs]
        if len(sinks) != 1:
            raise ValueError(f"need exactly one sink stage, found {sinks}")
        return sinks[0]

    @property
    def sources(self) -> list[str]:
        return [s.name for s in self.stages if not s.inputs]


# --- channel runtime --------------------------------------------------------

class _Fifo:
    def __init__(self, spec: ChannelSpec):
        self.depth = spec.depth
        self.stored = 0
        self.reserved = 0
        self.pushed = 0
        self.popped = 0
        self.highwater = 0

    def can_push(self, n: int) -> bool:
        return self.depth is None or self.stored + self.reserved + n <= self.depth

    def reserve(self, n: int):
        self.reserved += n
        self.highwater = max(self.highwater, self.stored + self.reserved)

    def commit(self, n: int):
        self.reserved -= n
        self.stored += n
        self.pushed += n

    def can_pop(self, n: int) -> bool:
        return self.stored >= n

    def pop(self, n: int):
        self.stored -= n
        self.popped += n


class _Pipo:
    """Two banks of `groups` tiles; a bank is readable once fully written."""

    def __init__(self, spec: ChannelSpec):
        self.groups = spec.groups
        self.fill = 0
        self.reserved = 0
        self.sealed = 0          # complete banks not yet drained
        self.drained = 0         # tiles consumed from the front bank
        self.pushed = 0
        self.popped = 0
        self.highwater = 0

    def can_push(self, n: int) -> bool:
        banks_needed = 1 if (self.fill + self.reserved + n) > 0 else 0
        if self.sealed + banks_needed > 2:
            return False
        return self.fill + self.reserved + n <= self.groups

    def reserve(self, n: int):
        self.reserved += n
        self.highwater = max(self.highwater,
                             self.sealed * self.groups + self.fill + self.reserved)

    def commit(self, n: int):
        self.reserved -= n
        self.fill += n
        self.pushed += n
        if self.fill == self.groups and self.reserved == 0:
            self.sealed += 1
            self.fill = 0

    def can_pop(self, n: int) -> bool:
        return self.sealed >= 1 and self.drained + n <= self.groups

    def pop(self, n: int):
        self.drained += n
        self.popped += n
        if self.drained == self.groups:
            self.sealed -= 1
            self.drained = 0


class _DeepBuffer:
    """One readable tensor per image plus staging for the next image."""

    def __init__(self, spec: ChannelSpec):
        self.groups = spec.groups
        self.reads_per_image = spec.reads_per_image
        self.staged = 0
        self.reserved = 0
        self.sealed_image = -1   # image id readable now, -1 = none
        self.next_image = 0      # image id currently being staged
        self.reads_done = 0
        self.pushed = 0
        self.popped = 0
        self.highwater = 0

    def can_push(self, n: int) -> bool:
        return self.staged + self.reserved + n <= self.groups

    def reserve(self, n: int):
        self.reserved += n
        occupied = self.staged + self.reserved + (self.groups if self.sealed_image >= 0 else 0)
        self.highwater = max(self.highwater, occupied)

    def commit(self, n: int):
        self.reserved -= n
        self.staged += n
        self.pushed += n
        self._promote()

    def _promote(self):
        if self.sealed_image < 0 and self.staged == self.groups and self.reserved == 0:
            self.sealed_image = self.next_image
            self.next_image += 1
            self.staged = 0

    def can_read(self, image: int) -> bool:
        return self.sealed_image == image

    def read(self, image: int):
        self.popped += 1
        self.reads_done += 1

    def finish_read(self):
        """Called when a read firing completes; releases after the last one."""
        if self.reads_done == self.reads_per_image:
            self.reads_done = 0
            self.sealed_image = -1
            self._promote()


_KINDS = {"fifo": _Fifo, "pipo": _Pipo, "deep_buffer": _DeepBuffer}


# --- simulation -------------------------------------------------------------

@dataclass
class Firing:
    start: int
    end: int
    image: int
    iteration: int


@dataclass
class SimTrace:
    firings: dict[str, list[Firing]]
    channel_highwater: dict[str, int]
    channel_flow: dict[str, tuple[int, int]]    # pushed, popped
    source_first_fire: dict[int, int]           # image -> cycle
    sink_last_end: dict[int, int]               # image -> cycle

    def stable_ii(self, warmup_images: int = 2) -> int | None:
        """Sink inter-image interval after the warm-up images; None if unsteady."""
        imgs = sorted(self.sink_last_end)
        gaps = [self.sink_last_end[b] - self.sink_last_end[a]
                for a, b in zip(imgs, imgs[1:]) if b >= warmup_images]
        if not gaps:
            return None
        return gaps[-1] if all(g == gaps[-1] for g in gaps) else None

    def intervals(self) -> list[int]:
        imgs = sorted(self.sink_last_end)
        return [self.sink_last_end[b] - self.sink_last_end[a]
                for a, b in zip(imgs, imgs[1:])]

    def fill_latency(self, image: int) -> int:
        return self.sink_last_end[image] - self.source_first_fire[image]

    def overlapped(self) -> bool:
        """Does image k+1 enter before image k fully leaves?"""
        for k in sorted(self.sink_last_end)[:-1]:
            nxt = self.source_first_fire.get(k + 1)
            if nxt is not None and nxt < self.sink_last_end[k]:
                return True
        return False


@dataclass
class SimResult:
    status: str                  # ok | deadlock | horizon
    cycles: int
    trace: SimTrace
    blocked: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status == "ok"


class _StageState:
    __slots__ = ("spec", "image", "iteration", "busy")

    def __init__(self, spec: StageSpec):
        self.spec = spec
        self.image = 0
        self.iteration = 0
        self.busy = False

    def done(self, images: int) -> bool:
        return self.image >= images


def simulate(graph: PipelineGraph, images: int = 1,
             horizon: int = 100_000_000) -> SimResult:
    """Run the pipeline for `images` inputs or until deadlock/horizon."""
    if images < 1 or horizon <= 0:
        raise ValueError("images and horizon must be positive")
    chans = {c.name: _KINDS[c.kind](c) for c in graph.channels}
    states = [_StageState(s) for s in graph.stages]
    sink = graph.sink
    sources = set(graph.sources)
    firings: dict[str, list[Firing]] = {s.name: [] for s in graph.stages}
    source_first: dict[int, int] = {}
    sink_last: dict[int, int] = {}
    heap: list[tuple[int, int]] = []    # (end_time, stage_index)
    now = 0

    def eligible(st: _StageState) -> bool:
        if st.busy or st.done(images):
            return False
        for p in st.spec.inputs:
            ch = chans[p.channel]
            if p.gated:
                if not ch.can_read(st.image):
                    return False
            elif not ch.can_pop(p.count):
                return False
        for p in st.spec.outputs:
            if not chans[p.channel].can_push(p.count):
                return False
        return True

    def fire(idx: int, st: _StageState):
        spec = st.spec
        for p in spec.inputs:
            ch = chans[p.channel]
            if p.gated:
                ch.read(st.image)
            else:
                ch.pop(p.count)
        for p in spec.outputs:
            chans[p.channel].reserve(p.count)
        end = now + spec.cost
        firings[spec.name].append(Firing(now, end, st.image, st.iteration))
        if spec.name in sources and st.iteration == 0:
            source_first.setdefault(st.image, now)
        st.busy = True
        heapq.heappush(heap, (end, idx))

    def complete(idx: int, st: _StageState):
        spec = st.spec
        for p in spec.outputs:
            chans[p.channel].commit(p.count)
        for p in spec.inputs:
            if p.gated:
                chans[p.channel].finish_read()
        if spec.name == sink:
            sink_last[st.image] = now
        st.busy = False
        st.iteration += 1
        if st.iteration == spec.trips:
            st.iteration = 0
            st.image += 1

    while True:
        progress = True
        while progress:
            progress = False
            while heap and heap[0][0] == now:
                _, idx = heapq.heappop(heap)
                complete(idx, states[idx])
                progress = True
            for idx, st in enumerate(states):
                if eligible(st):
                    fire(idx, st)
                    progress = True
        trace = SimTrace(firings,
                         {n: c.highwater for n, c in chans.items()},
                         {n: (c.pushed, c.popped) for n, c in chans.items()},
                         source_first, sink_last)
        if all(st.done(images) for st in states):
            return SimResult("ok", now, trace)
        if not heap:
            blocked = tuple(sorted(st.spec.name for st in states if not st.done(images)))
            return SimResult("deadlock", now, trace, blocked)
        nxt = heap[0][0]
        if nxt > horizon:
            blocked = tuple(sorted(st.spec.name for st in states if not st.done(images)))
            return SimResult("horizon", now, trace, blocked)
        now = nxt


def min_fifo_depth(graph: PipelineGraph, channel: str, lo: int, hi: int,
                   images: int = 3, horizon: int = 100_000_000) -> int:
    """Smallest fifo depth completing the run; binary search on monotone depth."""
    if lo < 0 or hi < lo:
        raise ValueError("need 0 <= lo <= hi")
    if not simulate(graph.with_fifo_depth(channel, hi), images, horizon).ok:
        raise RuntimeError(f"no deadlock-free depth for {channel} up to {hi}")
    while lo < hi:
        mid = (lo + hi) // 2
        if simulate(graph.with_fifo_depth(channel, mid), images, horizon).ok:
            hi = mid
        else:
            lo = mid + 1
    return hi


# --- graph construction -----------------------------------------------------

DEEP_FIFO_DEPTH = 512
COUPLE_FIFO_DEPTH = 2


def build_attention_graph(trips: int, costs: dict[str, int],
                          deep_depth: int = DEEP_FIFO_DEPTH,
                          couple_depth: int = COUPLE_FIFO_DEPTH,
                          source_cost: int = 0,
                          transpose_cost: int | None = None) -> PipelineGraph:
    """One MHA + MLP block pair with the four-branch attention layout.

    The LayerNorm fan-out feeds the residual deep fifo and the Q/K/V
    generators; K and V land in deep buffers (V through the transpose
    stage), the Q branch waits in a deep fifo, and the QK / RV matmuls gate
    on the buffers being full for the current image.

    `costs` maps the eleven pipeline-balance stage names to cycles per
    iteration; `trips` is the iteration count per image for every stage.
    """
    required = ["layernorm_mha", "qkv_gen", "qk_matmul", "softmax", "rv_matmul",
                "output_proj", "residual_add", "layernorm_mlp", "matmul1",
                "gelu", "matmul2"]
    missing = [k for k in required if k not in costs]
    if missing:
        raise ValueError(f"missing stage costs: {missing}")
    if transpose_cost is None:
        transpose_cost = max(1, costs["qkv_gen"] // 8)

    channels = [
        ChannelSpec("c_in", "fifo", couple_depth),
        ChannelSpec("c_res", "fifo", deep_depth),
        ChannelSpec("c_q_in", "fifo", couple_depth),
        ChannelSpec("c_k_in", "fifo", couple_depth),
        ChannelSpec("c_v_in", "fifo", couple_depth),
        ChannelSpec("c_q", "fifo", deep_depth),
        ChannelSpec("c_kbuf", "deep_buffer", groups=trips, reads_per_image=trips),
        ChannelSpec("c_vt", "fifo", couple_depth),
        ChannelSpec("c_vbuf", "deep_buffer", groups=trips, reads_per_image=trips),
        ChannelSpec("c_scores", "fifo", couple_depth),
        ChannelSpec("c_probs", "fifo", couple_depth),
        ChannelSpec("c_attn", "fifo", couple_depth),
        ChannelSpec("c_proj", "fifo", couple_depth),
        ChannelSpec("c_y1", "fifo", couple_depth),
        ChannelSpec("c_res2", "fifo", deep_depth),
        ChannelSpec("c_mm1_in", "fifo", couple_depth),
        ChannelSpec("c_h", "fifo", couple_depth),
        ChannelSpec("c_g", "fifo", couple_depth),
        ChannelSpec("c_mm2", "fifo", couple_depth),
        ChannelSpec("c_out", "fifo", couple_depth),
    ]
    stages = [
        StageSpec("source", source_cost, trips, (), (OutPort("c_in"),)),
        StageSpec("layernorm_mha", costs["layernorm_mha"], trips,
                  (InPort("c_in"),),
                  (OutPort("c_res"), OutPort("c_q_in"), OutPort("c_k_in"),
                   OutPort("c_v_in"))),
        StageSpec("q_gen", costs["qkv_gen"], trips, (InPort("c_q_in"),),
                  (OutPort("c_q"),)),
        StageSpec("k_gen", costs["qkv_gen"], trips, (InPort("c_k_in"),),
                  (OutPort("c_kbuf"),)),
        StageSpec("v_gen", costs["qkv_gen"], trips, (InPort("c_v_in"),),
                  (OutPort("c_vt"),)),
        StageSpec("transpose", transpose_cost, trips, (InPort("c_vt"),),
                  (OutPort("c_vbuf"),)),
        StageSpec("qk_matmul", costs["qk_matmul"], trips,
                  (InPort("c_q"), InPort("c_kbuf", gated=True)),
                  (OutPort("c_scores"),)),
        StageSpec("softmax", costs["softmax"], trips, (InPort("c_scores"),),
                  (OutPort("c_probs"),)),
        StageSpec("rv_matmul", costs["rv_matmul"], trips,
                  (InPort("c_probs"), InPort("c_vbuf", gated=True)),
                  (OutPort("c_attn"),)),
        StageSpec("output_proj", costs["output_proj"], trips, (InPort("c_attn"),),
                  (OutPort("c_proj"),)),
        StageSpec("residual_add", costs["residual_add"], trips,
                  (InPort("c_proj"), InPort("c_res")), (OutPort("c_y1"),)),
        StageSpec("layernorm_mlp", costs["layernorm_mlp"], trips, (InPort("c_y1"),),
                  (OutPort("c_res2"), OutPort("c_mm1_in"))),
        StageSpec("matmul1", costs["matmul1"], trips, (InPort("c_mm1_in"),),
                  (OutPort("c_h"),)),
        StageSpec("gelu", costs["gelu"], trips, (InPort("c_h"),),
                  (OutPort("c_g"),)),
        StageSpec("matmul2", costs["matmul2"], trips, (InPort("c_g"),),
                  (OutPort("c_mm2"),)),
        StageSpec("residual_add_mlp", costs["residual_add"], trips,
                  (InPort("c_mm2"), InPort("c_res2")), (OutPort("c_out"),)),
        StageSpec("sink", 0, trips, (InPort("c_out"),), ()),
    ]
    return PipelineGraph(stages, channels)


# --- persistence / export ---------------------------------------------------

def save_graph(graph: PipelineGraph, path: str | Path) -> None:
    doc = {
        "stages": [{
            "name": s.name, "cost": s.cost, "trips": s.trips,
            "inputs": [{"channel": p.channel, "count": p.count, "gated": p.gated}
                       for p in s.inputs],
            "outputs": [{"channel": p.channel, "count": p.count}
                        for p in s.outputs],
        } for s in graph.stages],
        "channels": [{
            "name": c.name, "kind": c.kind, "depth": c.depth, "groups": c.groups,
            "reads_per_image": c.reads_per_image, "tile_bits": c.tile_bits,
        } for c in graph.channels],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_graph(path: str | Path) -> PipelineGraph:
    with open(path) as fh:
        doc = json.load(fh)
    stages = [StageSpec(
        s["name"], s["cost"], s["trips"],
        tuple(InPort(p["channel"], p.get("count", 1), p.get("gated", False))
              for p in s.get("inputs", ())),
        tuple(OutPort(p["channel"], p.get("count", 1))
              for p in s.get("outputs", ())),
    ) for s in doc["stages"]]
    channels = [ChannelSpec(
        c["name"], c.get("kind", "fifo"), c.get("depth", 2), c.get("groups", 1),
        c.get("reads_per_image", 1), c.get("tile_bits", 0),
    ) for c in doc["channels"]]
    return PipelineGraph(stages, channels)


def export_timeline(trace: SimTrace, path: str | Path) -> None:
    """One row per stage event: compute at start, write at end, stalls between."""
    rows = []
    for name, fs in trace.firings.items():
        prev_end = None
        for f in fs:
            if prev_end is not None and f.start > prev_end:
                rows.append((prev_end, name, f.image, f.iteration, "stall",
                             f.start - prev_end))
            rows.append((f.start, name, f.image, f.iteration, "compute",
                         f.end - f.start))
            rows.append((f.end, name, f.image, f.iteration, "write", 0))
            prev_end = f.end
    rows.sort(key=lambda r: (r[0], r[1], r[4]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "stage", "image", "tile", "action", "duration"])
        w.writerows(rows)


def summary_dict(result: SimResult, warmup_images: int = 2) -> dict:
    trace = result.trace
    imgs = sorted(trace.sink_last_end)
    return {
        "status": result.status,
        "cycles": result.cycles,
        "blocked": list(result.blocked),
        "stable_ii": trace.stable_ii(warmup_images),
        "sink_intervals": trace.intervals(),
        "fill_latency": {str(k): trace.fill_latency(k) for k in imgs
                         if k in trace.source_first_fire},
        "overlapped": trace.overlapped(),
        "channel_highwater": dict(sorted(trace.channel_highwater.items())),
    }
