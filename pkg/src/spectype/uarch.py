"""Deterministic microarchitectural simulator.

In-order fetch with two-level conditional branch prediction (PHT of 2-bit
saturating counters indexed by folded PC XOR GHR), bounded transient
execution of mispredicted arms, a flushable ideal cache with hit/miss
latencies, a cycle clock, and a configurable squash policy.

The final architectural state of a run never depends on prediction state,
cache contents, the speculation window, or the squash policy; those affect
only the trace and the cache/BPU side effects.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from . import isa
from .engine import encoding as E
from .engine import get_backend


class SquashPolicy(enum.IntEnum):
    IMMEDIATE = 0
    DELAYED_UNTIL_ELDER_RESOLVED = 1


@dataclass
class BpuConfig:
    pht_entries: int = 1 << 14
    ghr_bits: int = 16
    pc_fold_bits: int = 12  # low PC bits folded into the index

    def __post_init__(self):
        if self.pht_entries & (self.pht_entries - 1):
            raise ValueError("pht_entries must be a power of two")


def pht_index(pc: int, ghr: int, cfg: BpuConfig) -> int:
    """Index = (pc low bits XOR ghr) modulo the table size."""
    fold = pc & ((1 << cfg.pc_fold_bits) - 1)
    return (fold ^ (ghr & ((1 << cfg.ghr_bits) - 1))) & (cfg.pht_entries - 1)


class BpuState:
    """Pattern history table of 2-bit counters plus a global history register.

    Counters start at 1 (weakly not-taken); predict taken iff counter >= 2.
    """

    def __init__(self, cfg: BpuConfig | None = None, init_counter: int = 1):
        self.cfg = cfg or BpuConfig()
        if not 0 <= init_counter <= 3:
            raise ValueError("counter out of range")
        self.pht = bytearray([init_counter] * self.cfg.pht_entries)
        self.ghr = 0

    def predict(self, pc: int) -> bool:
        return self.pht[pht_index(pc, self.ghr, self.cfg)] >= 2

    def update(self, pc: int, outcome: bool) -> None:
        """Train the counter for (pc, current GHR) and shift the outcome in."""
        idx = pht_index(pc, self.ghr, self.cfg)
        c = self.pht[idx]
        self.pht[idx] = min(c + 1, 3) if outcome else max(c - 1, 0)
        self.ghr = ((self.ghr << 1) | (1 if outcome else 0)) & ((1 << self.cfg.ghr_bits) - 1)


class CacheState:
    """Ideal fully-shared cache: a set of resident 64-byte lines."""

    def __init__(self, hit_latency: int = 1, miss_latency: int = 100):
        if hit_latency <= 0 or miss_latency <= hit_latency:
            raise ValueError("need 0 < hit_latency < miss_latency")
        self.hit_latency = hit_latency
        self.miss_latency = miss_latency
        self.resident = bytearray(E.N_LINES)

    def flush(self, addr: int) -> None:
        self.resident[(addr % E.MEM_SIZE) >> 6] = 0

    def is_resident(self, addr: int) -> bool:
        return bool(self.resident[(addr % E.MEM_SIZE) >> 6])

    def access_timed(self, addr: int) -> int:
        """Return the access latency and fill the line."""
        line = (addr % E.MEM_SIZE) >> 6
        if self.resident[line]:
            return self.hit_latency
        self.resident[line] = 1
        return self.miss_latency


@dataclass
class MachineConfig:
    bpu: BpuConfig = field(default_factory=BpuConfig)
    hit_latency: int = 1
    miss_latency: int = 100
    spec_window: int = 64
    squash_policy: SquashPolicy = SquashPolicy.IMMEDIATE

    @classmethod
    def from_dict(cls, d: dict) -> "MachineConfig":
        bpu = BpuConfig(**d.get("bpu", {}))
        policy = d.get("squash_policy", "IMMEDIATE")
        if isinstance(policy, str):
            policy = SquashPolicy[policy]
        return cls(bpu=bpu, hit_latency=d.get("hit_latency", 1),
                   miss_latency=d.get("miss_latency", 100),
                   spec_window=d.get("spec_window", 64),
                   squash_policy=SquashPolicy(policy))


@dataclass(frozen=True)
class TraceEvent:
    kind: str
    pc: int = -1
    addr: int = -1
    cycle: int = 0
    transient: bool = False
    predicted: bool | None = None
    actual: bool | None = None

    def to_json(self) -> str:
        d = {"kind": self.kind, "cycle": self.cycle, "transient": self.transient}
        if self.pc >= 0:
            d["pc"] = self.pc
        if self.addr >= 0:
            d["addr"] = self.addr
        if self.predicted is not None:
            d["predicted"] = self.predicted
        if self.actual is not None:
            d["actual"] = self.actual
        return json.dumps(d, sort_keys=True)


@dataclass(frozen=True)
class Violation:
    kind: str
    pc: int
    addr: int
    transient: bool


_VIOLATION_NAMES = {
    E.V_SCALAR_OPERAND: "scalar-operand",
    E.V_OUT_OF_OBJECT: "out-of-object",
    E.V_UNWRITTEN_READ: "unwritten-stack-read",
    E.V_POINTER_RETURN: "pointer-return",
    E.V_FAULT: "fault",
}


@dataclass
class RunResult:
    r0: int
    fault: bool
    cycles: int
    committed: int
    transient: int
    trace: list
    violations: list
    r0_is_pointer: bool

    @property
    def committed_pcs(self):
        return [ev.pc for ev in self.trace if ev.kind == "exec" and not ev.transient]

    @property
    def transient_pcs(self):
        return [ev.pc for ev in self.trace if ev.kind == "exec" and ev.transient]


def _decode_events(raw, base: int) -> list:
    out = []
    for ev in raw:
        k = ev[0]
        if k == "exec":
            out.append(TraceEvent("exec", pc=ev[1], cycle=ev[2], transient=bool(ev[3])))
        elif k in ("load", "store"):
            out.append(TraceEvent(k, pc=ev[1], addr=ev[2], cycle=ev[3], transient=bool(ev[4])))
        elif k == "fill":
            out.append(TraceEvent("fill", addr=ev[1], cycle=ev[2], transient=bool(ev[3])))
        elif k == "predict":
            out.append(TraceEvent("predict", pc=ev[1], cycle=ev[3], predicted=bool(ev[2])))
        elif k == "resolve":
            out.append(TraceEvent("resolve", pc=ev[1], cycle=ev[4],
                                  predicted=bool(ev[2]), actual=bool(ev[3])))
        elif k == "squash":
            out.append(TraceEvent("squash", pc=ev[1], addr=ev[2], cycle=ev[3], transient=True))
    return out


class Machine:
    """A machine instance: memory, maps, cache, BPU, and loaded programs.

    Cache, BPU, map contents, context and secret memory persist across runs;
    registers and the stack are fresh per invocation.
    """

    def __init__(self, config: MachineConfig | None = None, backend: str | None = None):
        self.config = config or MachineConfig()
        self.bpu = BpuState(self.config.bpu)
        self.cache = CacheState(self.config.hit_latency, self.config.miss_latency)
        self.mem = bytearray(E.MEM_SIZE)
        self.maps_tab = np.zeros((0, 4), dtype=np.int64)
        self.map_specs: tuple = ()
        self.programs: dict[int, tuple] = {}  # base -> (program, code array, prepared)
        self._backend, self.backend_name = get_backend(backend)
        self._next_base = 1 << 20

    # --- program management ---

    def load_program(self, program: isa.Program, base: int | None = None) -> int:
        """Place a program at a code address; its maps are allocated on first load."""
        if base is None:
            base = self._next_base
            self._next_base += 1 << 16
        if program.map_specs:
            if self.map_specs and self.map_specs != program.map_specs:
                raise ValueError("conflicting map declarations across programs")
            self.map_specs = program.map_specs
            self.maps_tab = E.build_map_table(program.map_specs)
        code = E.encode_program(program)
        self.programs[base] = (program, code, self._backend.prepare(code))
        return base

    # --- data-space accessors ---

    def write_ctx(self, data: bytes, warm: bool = True) -> None:
        if len(data) > E.CTX_SIZE:
            raise ValueError("context block is 64 bytes")
        buf = data + bytes(E.CTX_SIZE - len(data))
        self.mem[E.CTX_BASE:E.CTX_BASE + E.CTX_SIZE] = buf
        if warm:
            self.cache.resident[E.CTX_BASE >> 6] = 1

    def write_kmem(self, offset: int, data: bytes) -> None:
        """Plant bytes in the simulated privileged region (not cached)."""
        if offset < 0 or offset + len(data) > E.KMEM_SIZE:
            raise ValueError("outside privileged region")
        a = E.KMEM_BASE + offset
        self.mem[a:a + len(data)] = data

    def read_kmem(self, offset: int, n: int) -> bytes:
        return bytes(self.mem[E.KMEM_BASE + offset:E.KMEM_BASE + offset + n])

    def kmem_addr(self, offset: int = 0) -> int:
        return E.KMEM_BASE + offset

    def map_value_addr(self, map_id: int, key: int = 0, offset: int = 0) -> int:
        row = self.maps_tab[map_id]
        return int(row[E.M_BASE]) + key * int(row[E.M_STRIDE]) + offset

    def map_write(self, map_id: int, data: bytes, key: int = 0, offset: int = 0,
                  warm: bool = True) -> None:
        a = self.map_value_addr(map_id, key, offset)
        self.mem[a:a + len(data)] = data
        if warm:
            for line in range(a >> 6, (a + len(data) - 1 >> 6) + 1):
                self.cache.resident[line] = 1

    def map_read(self, map_id: int, n: int, key: int = 0, offset: int = 0) -> bytes:
        a = self.map_value_addr(map_id, key, offset)
        return bytes(self.mem[a:a + n])

    def invalidate(self, addr: int) -> None:
        """Evict the line holding addr (models a remote agent's write-invalidate)."""
        self.cache.flush(addr)

    def access_timed(self, addr: int) -> int:
        return self.cache.access_timed(addr)

    # --- execution ---

    def run(self, base: int, ctx: bytes | None = None, *, trace: bool = False,
            monitor: bool = False, forced_predictions: dict[int, bool] | None = None,
            warm_ctx: bool = True) -> RunResult:
        """Execute the program loaded at ``base`` once."""
        program, code, prepared = self.programs[base]
        if ctx is not None:
            self.write_ctx(ctx, warm=warm_ctx)

        cfg = np.zeros(E.CFG_LEN, dtype=np.int64)
        cfg[E.CFG_PHT_MASK] = self.config.bpu.pht_entries - 1
        cfg[E.CFG_FOLD_MASK] = (1 << self.config.bpu.pc_fold_bits) - 1
        cfg[E.CFG_GHR_BITS] = self.config.bpu.ghr_bits
        cfg[E.CFG_HIT_LAT] = self.config.hit_latency
        cfg[E.CFG_MISS_LAT] = self.config.miss_latency
        cfg[E.CFG_SPEC_WINDOW] = self.config.spec_window
        cfg[E.CFG_DELAYED] = int(self.config.squash_policy)
        cfg[E.CFG_MONITOR] = 1 if monitor else 0
        cfg[E.CFG_TRACE] = 1 if trace else 0
        cfg[E.CFG_BASE] = base

        io = np.zeros(E.IO_LEN, dtype=np.int64)
        io[E.IO_GHR_IN] = self.bpu.ghr

        forced = np.full(len(code), -1, dtype=np.int8)
        if forced_predictions:
            for idx, taken in forced_predictions.items():
                forced[idx] = 1 if taken else 0

        raw_trace: list | None = [] if trace else None
        raw_viol: list | None = [] if monitor else None

        self._backend.execute(prepared, self.mem, self.cache.resident, self.bpu.pht,
                              self.maps_tab, io, cfg, forced, raw_trace, raw_viol)

        self.bpu.ghr = int(io[E.IO_GHR_OUT])
        violations = [Violation(_VIOLATION_NAMES[c], pc, addr, bool(t))
                      for c, pc, addr, t in (raw_viol or [])]
        return RunResult(
            r0=int(io[E.IO_R0]) & E.MASK64,
            fault=bool(io[E.IO_FAULT]),
            cycles=int(io[E.IO_CYCLES]),
            committed=int(io[E.IO_COMMITTED]),
            transient=int(io[E.IO_TRANSIENT]),
            trace=_decode_events(raw_trace or [], base),
            violations=violations,
            r0_is_pointer=int(io[E.IO_R0_TAG]) != E.TAG_SCALAR,
        )


def run_interpreter(program: isa.Program, ctx: bytes = b"", *, monitor: bool = True,
                    machine: Machine | None = None, warm_ctx: bool = True) -> RunResult:
    """Concrete architectural interpreter: the simulator with speculation off."""
    m = machine or Machine(MachineConfig(spec_window=0))
    base = m.load_program(program)
    return m.run(base, ctx, monitor=monitor, warm_ctx=warm_ctx)


def trace_to_jsonl(trace: list) -> str:
    return "\n".join(ev.to_json() for ev in trace) + ("\n" if trace else "")
