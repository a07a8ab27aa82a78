"""Architectural verifier: abstract interpretation over all feasible paths.

Tracks a type for every register and stack slot (uninitialized, scalar with
an interval plus power-of-two alignment, or pointer with region / offset
range / nullability) and enforces the safety rules:

  (i)   every memory operand is a non-null pointer staying inside its object
        (size-aligned accesses only),
  (ii)  stack reads only touch previously written bytes,
  (iii) pointer values are never stored to a map or returned in r0 at EXIT.

Branch refinement deliberately narrows only to exact values or one
contiguous range: the false arm of ``x != c`` pins ``x`` to ``c``, while the
false arm of ``x == c`` learns nothing.  That asymmetry is load-bearing: it
is exactly what makes the mutually-exclusive-branch gadget verify while its
inverted twin is rejected.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from . import isa
from .isa import Cond, Helper, Op

U64 = (1 << 64) - 1
HUGE_MULT = 1 << 62
PATH_BUDGET = 100_000

REGION_STACK = "stack"
REGION_CTX = "ctx"
REGION_MAP = "map_value"

ORIGIN_STACK = 0
ORIGIN_CTX = 1

RULE_MEM_OPERAND = "memory-operand"          # rule (i)
RULE_UNWRITTEN = "unwritten-stack-read"      # rule (ii)
RULE_POINTER_LEAK = "pointer-leak"           # rule (iii)
RULE_HELPER = "helper-argument"
RULE_MIXED_STACK = "stack-mixed-load"
RULE_BUDGET = "BudgetExceeded"
RULE_SPEC_BUDGET = "SpecBudgetExceeded"


def _tz_pow2(v: int) -> int:
    if v == 0:
        return HUGE_MULT
    return v & -v if (v & -v) <= HUGE_MULT else HUGE_MULT


@dataclass(frozen=True)
class AbstractValue:
    """One register/slot type; scalar bounds live in Z, wrapped at use sites."""

    kind: str  # 'uninit' | 'scalar' | 'pointer'
    lo: int = 0
    hi: int = 0
    mult: int = 1  # power of two dividing every possible value/offset
    region: str | None = None
    map_id: int = -1
    maybe_null: bool = False
    origin: int = -1  # identity of the defining base (one per lookup)

    # --- constructors ---

    @staticmethod
    def uninit() -> "AbstractValue":
        return AbstractValue("uninit")

    @staticmethod
    def exact(v: int) -> "AbstractValue":
        v &= U64
        return AbstractValue("scalar", v, v, _tz_pow2(v))

    @staticmethod
    def unknown() -> "AbstractValue":
        return AbstractValue("scalar", 0, U64, 1)

    @staticmethod
    def srange(lo: int, hi: int, mult: int = 1) -> "AbstractValue":
        lo = (lo + mult - 1) // mult * mult
        hi = hi // mult * mult
        if lo > hi:
            raise ValueError("empty scalar range")
        if lo == hi:
            return AbstractValue("scalar", lo, lo, max(mult, _tz_pow2(lo)))
        return AbstractValue("scalar", lo, hi, mult)

    @staticmethod
    def pointer(region: str, lo: int, hi: int, mult: int = 1, map_id: int = -1,
                maybe_null: bool = False, origin: int = -1) -> "AbstractValue":
        if lo == hi:
            mult = max(mult, _tz_pow2(lo))
        return AbstractValue("pointer", lo, hi, mult, region, map_id, maybe_null, origin)

    # --- queries ---

    @property
    def is_exact(self) -> bool:
        return self.kind == "scalar" and self.lo == self.hi

    def as_scalar(self) -> "AbstractValue":
        """Uninitialized registers read as arbitrary scalars (they hold 0
        concretely, which the unknown range covers)."""
        if self.kind == "uninit":
            return AbstractValue.unknown()
        return self

    def render(self) -> str:
        if self.kind == "uninit":
            return "uninit"
        if self.kind == "scalar":
            if self.is_exact:
                return f"scalar({self.lo})"
            if self.lo == 0 and self.hi == U64:
                return "scalar[?]"
            m = f"%{self.mult}" if self.mult > 1 else ""
            return f"scalar[{self.lo},{self.hi}]{m}"
        reg = self.region if self.region != REGION_MAP else f"map{self.map_id}"
        off = f"+{self.lo}" if self.lo == self.hi else f"[{self.lo},{self.hi}]"
        nul = ", maybe-null" if self.maybe_null else ""
        return f"ptr({reg}{off}{nul})"


def _norm_range(lo: int, hi: int, mult: int) -> AbstractValue:
    if hi - lo >= (1 << 64):
        lo, hi = 0, U64
    if lo == hi:
        return AbstractValue("scalar", lo, lo, max(mult, _tz_pow2(lo)))
    lo2 = (lo + mult - 1) // mult * mult
    hi2 = hi // mult * mult
    if lo2 > hi2:  # mult rounding emptied the interval: fall back
        return AbstractValue("scalar", lo, hi, 1)
    return AbstractValue("scalar", lo2, hi2, mult)


def _nonneg(v: AbstractValue) -> AbstractValue:
    """Clamp to the u64 view for non-linear ops (wrapped ranges widen)."""
    if v.lo < 0 or v.hi > U64:
        return AbstractValue("scalar", 0, U64 // v.mult * v.mult, v.mult)
    return v


def alu_transfer(op: Op, dst: AbstractValue, src: AbstractValue) -> AbstractValue:
    """Abstract ALU semantics; any combination not listed degrades to an
    unknown scalar (matching the concrete machine's provenance rules)."""
    a, b = dst.as_scalar(), src.as_scalar()

    if op is Op.MOV:
        return b

    a_ptr, b_ptr = a.kind == "pointer", b.kind == "pointer"
    if op is Op.ADD:
        if a_ptr and not b_ptr:
            return replace(a, lo=a.lo + b.lo, hi=a.hi + b.hi, mult=min(a.mult, b.mult))
        if b_ptr and not a_ptr:
            return replace(b, lo=b.lo + a.lo, hi=b.hi + a.hi, mult=min(a.mult, b.mult))
        if not a_ptr and not b_ptr:
            return _norm_range(a.lo + b.lo, a.hi + b.hi, min(a.mult, b.mult))
        return AbstractValue.unknown()
    if op is Op.SUB:
        if a_ptr and not b_ptr:
            return replace(a, lo=a.lo - b.hi, hi=a.hi - b.lo, mult=min(a.mult, b.mult))
        if a_ptr and b_ptr:
            if a.region == b.region and a.map_id == b.map_id and a.origin == b.origin:
                return _norm_range(a.lo - b.hi, a.hi - b.lo, min(a.mult, b.mult))
            return AbstractValue.unknown()
        if not a_ptr and not b_ptr:
            return _norm_range(a.lo - b.hi, a.hi - b.lo, min(a.mult, b.mult))
        return AbstractValue.unknown()

    if a_ptr or b_ptr:
        return AbstractValue.unknown()
    a, b = _nonneg(a), _nonneg(b)

    if op is Op.MUL:
        if b.is_exact:
            m = min(a.mult * _tz_pow2(b.lo), HUGE_MULT)
            return _norm_range(a.lo * b.lo, a.hi * b.lo, max(m, 1))
        if a.is_exact:
            m = min(b.mult * _tz_pow2(a.lo), HUGE_MULT)
            return _norm_range(b.lo * a.lo, b.hi * a.lo, max(m, 1))
        return AbstractValue.unknown()
    if op is Op.AND:
        if b.is_exact:
            c = b.lo
            return _norm_range(0, min(a.hi, c), max(min(a.mult, HUGE_MULT), _tz_pow2(c))
                               if c else HUGE_MULT)
        if a.is_exact:
            c = a.lo
            return _norm_range(0, min(b.hi, c), max(b.mult, _tz_pow2(c)) if c else HUGE_MULT)
        return _norm_range(0, min(a.hi, b.hi), max(a.mult, b.mult))
    if op is Op.OR:
        hi = max(a.hi, b.hi)
        cap = 1
        while cap <= hi:
            cap <<= 1
        return _norm_range(max(a.lo, b.lo), min(cap - 1, U64), min(a.mult, b.mult))
    if op is Op.LSH:
        if b.is_exact:
            k = b.lo & 63
            return _norm_range(a.lo << k, a.hi << k, min(a.mult << k, HUGE_MULT))
        return AbstractValue.unknown()
    if op is Op.RSH:
        if b.is_exact:
            k = b.lo & 63
            return _norm_range(a.lo >> k, a.hi >> k, max(a.mult >> k, 1))
        return _norm_range(0, a.hi, 1)
    raise AssertionError(op)


N_SLOTS = isa.STACK_SIZE // 8


@dataclass
class VerifierState:
    """Abstract machine state: registers, stack slots, and the path so far."""

    regs: list  # 11 AbstractValue (r0..r9, fp)
    slots: list  # 64 AbstractValue
    written: list  # 64 byte-granular bitmasks (0..255)
    path: tuple = ()

    @staticmethod
    def entry() -> "VerifierState":
        regs = [AbstractValue.uninit() for _ in range(11)]
        regs[isa.FP] = AbstractValue.pointer(REGION_STACK, isa.STACK_SIZE, isa.STACK_SIZE,
                                             mult=HUGE_MULT, origin=ORIGIN_STACK)
        regs[1] = AbstractValue.pointer(REGION_CTX, 0, 0, mult=HUGE_MULT, origin=ORIGIN_CTX)
        return VerifierState(regs,
                             [AbstractValue.uninit() for _ in range(N_SLOTS)],
                             [0] * N_SLOTS)

    def clone(self) -> "VerifierState":
        return VerifierState(self.regs[:], self.slots[:], self.written[:], self.path)

    def snapshot(self) -> dict:
        return {isa.REG_NAMES[i]: v.render() for i, v in enumerate(self.regs)
                if v.kind != "uninit"}


INFEASIBLE = "infeasible"


def _refine_scalar(v: AbstractValue, cond: Cond, c: int, holds: bool):
    """Narrow scalar v under '(v cond c) == holds'; returns value or INFEASIBLE.

    Only exact values and single contiguous ranges are representable; a
    disequality that cannot be expressed as one range leaves v unchanged.
    """
    v = v.as_scalar()
    lo, hi = v.lo, v.hi
    if lo < 0 or hi > U64:
        return v  # wrapped view: no reliable narrowing
    eff = cond
    if not holds:
        eff = {Cond.EQ: Cond.NE, Cond.NE: Cond.EQ, Cond.LT: Cond.GE,
               Cond.GE: Cond.LT, Cond.GT: Cond.LE, Cond.LE: Cond.GT}[cond]
    if eff is Cond.EQ:
        if lo <= c <= hi:
            return AbstractValue.exact(c)
        return INFEASIBLE
    if eff is Cond.NE:
        if v.is_exact and lo == c:
            return INFEASIBLE
        return v  # not representable as a single range: over-approximate
    if eff is Cond.LT:
        new_hi = min(hi, c - 1)
        if new_hi < lo:
            return INFEASIBLE
        return _norm_range(lo, new_hi, v.mult)
    if eff is Cond.LE:
        new_hi = min(hi, c)
        if new_hi < lo:
            return INFEASIBLE
        return _norm_range(lo, new_hi, v.mult)
    if eff is Cond.GT:
        new_lo = max(lo, c + 1)
        if new_lo > hi:
            return INFEASIBLE
        return _norm_range(new_lo, hi, v.mult)
    new_lo = max(lo, c)
    if new_lo > hi:
        return INFEASIBLE
    return _norm_range(new_lo, hi, v.mult)


def refine_on_branch(state: VerifierState, ins: isa.Instruction, taken: bool):
    """Return the state narrowed by the branch outcome, or INFEASIBLE."""
    lhs = state.regs[ins.dst]
    same_reg = (not ins.src_is_imm) and ins.src == ins.dst
    if same_reg:
        truth = ins.cond in (Cond.EQ, Cond.LE, Cond.GE)
        return state if taken == truth else INFEASIBLE

    rhs = AbstractValue.exact(ins.imm) if ins.src_is_imm else state.regs[ins.src].as_scalar()

    # null checks on maybe-null pointers
    if lhs.kind == "pointer" and rhs.kind == "scalar" and rhs.is_exact and rhs.lo == 0 \
            and ins.cond in (Cond.EQ, Cond.NE):
        is_null_arm = (ins.cond is Cond.EQ) == taken
        out = state.clone()
        if lhs.maybe_null:
            out.regs[ins.dst] = AbstractValue.exact(0) if is_null_arm \
                else replace(lhs, maybe_null=False)
            return out
        return INFEASIBLE if is_null_arm else state

    if lhs.kind == "pointer" or (not ins.src_is_imm and state.regs[ins.src].kind == "pointer"):
        return state  # pointer comparisons: feasible both ways, no narrowing

    lhs = lhs.as_scalar()
    if lhs.is_exact and rhs.is_exact:
        concrete = {Cond.EQ: lhs.lo == rhs.lo, Cond.NE: lhs.lo != rhs.lo,
                    Cond.LT: lhs.lo < rhs.lo, Cond.GT: lhs.lo > rhs.lo,
                    Cond.LE: lhs.lo <= rhs.lo, Cond.GE: lhs.lo >= rhs.lo}[ins.cond]
        return state if concrete == taken else INFEASIBLE

    out = state.clone()
    if rhs.is_exact:
        n = _refine_scalar(lhs, ins.cond, rhs.lo, taken)
        if n is INFEASIBLE:
            return INFEASIBLE
        out.regs[ins.dst] = n
        return out
    if lhs.is_exact and not ins.src_is_imm:
        mirror = {Cond.EQ: Cond.EQ, Cond.NE: Cond.NE, Cond.LT: Cond.GT,
                  Cond.GT: Cond.LT, Cond.LE: Cond.GE, Cond.GE: Cond.LE}[ins.cond]
        n = _refine_scalar(rhs, mirror, lhs.lo, taken)
        if n is INFEASIBLE:
            return INFEASIBLE
        out.regs[ins.src] = n
        return out
    return state


def object_size(v: AbstractValue, map_specs) -> int:
    if v.region == REGION_STACK:
        return isa.STACK_SIZE
    if v.region == REGION_CTX:
        return isa.CTX_SIZE
    for m in map_specs:
        if m.id == v.map_id:
            return m.value_size
    return 0


def check_access(v: AbstractValue, size: int, map_specs, off: int = 0,
                 null_ok: bool = False):
    """None if the access is provably safe, else (sub-rule, message)."""
    v = v.as_scalar() if v.kind == "uninit" else v
    if v.kind != "pointer":
        return ("not-a-pointer", f"memory operand is {v.render()}")
    if v.maybe_null and not null_ok:
        return ("null-check-missing", "pointer may be NULL")
    lo, hi = v.lo + off, v.hi + off
    objsz = object_size(v, map_specs)
    if lo < 0 or hi + size > objsz:
        return ("out-of-bounds", f"offsets [{lo},{hi}]+{size} exceed object size {objsz}")
    mult = min(v.mult, _tz_pow2(off) if off else HUGE_MULT)
    if lo == hi:
        if lo % size:
            return ("misaligned", f"offset {lo} not {size}-byte aligned")
    elif mult % size or lo % size:
        return ("misaligned", f"offset range [{lo},{hi}]%{mult} not {size}-byte aligned")
    return None


@dataclass(frozen=True)
class Finding:
    index: int
    rule: str
    message: str
    state: dict = field(default_factory=dict)
    speculative: bool = False
    mispredicted_branches: tuple = ()

    def to_dict(self) -> dict:
        d = {"index": self.index, "rule": self.rule, "message": self.message,
             "state": self.state}
        if self.speculative:
            d["speculative"] = True
            d["mispredicted_branches"] = list(self.mispredicted_branches)
        return d


@dataclass
class VerdictReport:
    verdict: str  # 'ACCEPT' | 'REJECT'
    findings: list
    paths_explored: int

    @property
    def accepted(self) -> bool:
        return self.verdict == "ACCEPT"

    def to_dict(self) -> dict:
        return {"verdict": self.verdict,
                "findings": [f.to_dict() for f in self.findings],
                "paths_explored": self.paths_explored}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


class _Explorer:
    """Shared worklist engine for the architectural and speculative verifiers."""

    def __init__(self, program: isa.Program, *, spec_depth: int = 0, spec_nesting: int = 0,
                 budget: int = PATH_BUDGET, record_states: bool = False):
        self.p = program
        self.spec_depth = spec_depth
        self.spec_nesting = spec_nesting
        self.budget = budget
        self.findings: dict = {}
        self.paths = 0
        self.states = 0
        self.next_origin = 2
        self.record_states = record_states
        self.reg_joins: dict[int, list] = {}  # instr index -> per-reg joined values

    def add(self, idx: int, rule: str, msg: str, state: VerifierState, chain=()):
        key = (idx, rule, tuple(chain))
        if key not in self.findings:
            self.findings[key] = Finding(idx, rule, msg, state.snapshot(),
                                         bool(chain), tuple(chain))

    def _join_record(self, idx: int, state: VerifierState):
        cur = self.reg_joins.get(idx)
        if cur is None:
            self.reg_joins[idx] = [v for v in state.regs]
            return
        for i, v in enumerate(state.regs):
            cur[i] = join_values(cur[i], v)

    def run(self) -> VerdictReport:
        stack = [(0, VerifierState.entry(), (), self.spec_depth)]
        while stack:
            if self.states >= self.budget:
                rule = RULE_SPEC_BUDGET if self.spec_depth else RULE_BUDGET
                self.add(-1, rule, f"state budget {self.budget} exhausted",
                         VerifierState.entry())
                break
            self.states += 1
            pc, state, chain, depth = stack.pop()
            in_spec = bool(chain)
            if in_spec:
                if depth <= 0:
                    continue
                depth -= 1
            if pc >= len(self.p.instructions):
                continue  # structurally prevented architecturally
            ins = self.p.instructions[pc]
            state.path = state.path + (pc,)
            if self.record_states and not in_spec:
                self._join_record(pc, state)

            if ins.op is Op.JMP:
                arms = []
                for taken in (True, False):
                    nxt = ins.target if taken else pc + 1
                    if not in_spec:
                        refined = refine_on_branch(state, ins, taken)
                        if refined is not INFEASIBLE:
                            arms.append((nxt, refined.clone(), chain, depth))
                        if self.spec_depth > 0 and len(chain) < self.spec_nesting:
                            arms.append((nxt, state.clone(), chain + (pc,), self.spec_depth))
                    else:
                        if len(chain) < self.spec_nesting:
                            arms.append((nxt, state.clone(), chain + (pc,), depth))
                stack.extend(arms)
                continue

            if ins.op is Op.EXIT:
                if not in_spec:
                    self.paths += 1
                    if state.regs[0].kind == "pointer":
                        self.add(pc, RULE_POINTER_LEAK,
                                 f"r0 holds {state.regs[0].render()} at EXIT", state, chain)
                continue

            nxt_state = self.step(pc, ins, state, chain)
            if nxt_state is not None:
                stack.append((pc + 1, nxt_state, chain, depth))

        findings = sorted(self.findings.values(),
                          key=lambda f: (f.index, f.rule, f.mispredicted_branches))
        verdict = "REJECT" if findings else "ACCEPT"
        return VerdictReport(verdict, findings, self.paths)

    def step(self, pc: int, ins: isa.Instruction, state: VerifierState, chain):
        """Non-branch transfer; returns successor state or None to cut the path."""
        in_spec = bool(chain)
        s = state.clone()

        if ins.op in isa.ALU_OPS:
            src = AbstractValue.exact(ins.imm) if ins.src_is_imm else s.regs[ins.src]
            s.regs[ins.dst] = alu_transfer(ins.op, s.regs[ins.dst], src)
            return s

        if ins.op is Op.LDX or ins.op is Op.STX or ins.op is Op.ST:
            base = s.regs[ins.dst if ins.op is not Op.LDX else ins.src]
            err = check_access(base, ins.size, self.p.map_specs, ins.off, null_ok=in_spec)
            if err:
                self.add(pc, RULE_MEM_OPERAND, f"{err[0]}: {err[1]}", state, chain)
                return None
            lo, hi = base.lo + ins.off, base.hi + ins.off
            if ins.op is Op.LDX:
                val = _norm_range(0, 0xFF, 1) if ins.size == 1 else AbstractValue.unknown()
                if base.region == REGION_STACK:
                    cover = list(range(lo // 8, (hi + ins.size - 1) // 8 + 1))
                    if lo == hi:
                        need = 0xFF if ins.size == 8 else (1 << (lo % 8))
                        if (s.written[cover[0]] & need) != need:
                            self.add(pc, RULE_UNWRITTEN,
                                     f"read of unwritten stack bytes at offset {lo}",
                                     state, chain)
                            return None
                        if ins.size == 8:
                            val = s.slots[cover[0]]
                    else:
                        unwritten = sum(1 for b in cover if s.written[b] != 0xFF)
                        # architectural reads must be fully written; transient
                        # reads only flag when definitely unwritten
                        if (not in_spec and unwritten) or (in_spec and unwritten == len(cover)):
                            self.add(pc, RULE_UNWRITTEN,
                                     "read range covers unwritten stack bytes", state, chain)
                            return None
                        if not in_spec and any(s.slots[b].kind == "pointer" for b in cover):
                            self.add(pc, RULE_MIXED_STACK,
                                     "variable-offset read over a spilled pointer",
                                     state, chain)
                            return None
                s.regs[ins.dst] = val
                return s
            # stores
            stored = AbstractValue.exact(ins.imm) if ins.op is Op.ST \
                else s.regs[ins.src].as_scalar()
            if stored.kind == "pointer" and base.region in (REGION_MAP, REGION_CTX):
                if not in_spec:  # transient stores are not architecturally visible
                    self.add(pc, RULE_POINTER_LEAK,
                             f"{stored.render()} stored to {base.region}", state, chain)
                    return None
            if base.region == REGION_STACK:
                if lo == hi:
                    first = lo // 8
                    if ins.size == 8:
                        s.written[first] = 0xFF
                        s.slots[first] = stored
                    else:
                        s.written[first] |= 1 << (lo % 8)
                        s.slots[first] = AbstractValue.unknown()
                else:
                    # may-write: degrade covered values, leave written bits alone
                    for b in range(lo // 8, (hi + ins.size - 1) // 8 + 1):
                        s.slots[b] = AbstractValue.unknown()
            return s

        if ins.op is Op.CALL:
            if ins.helper is Helper.MAP_LOOKUP:
                mid = s.regs[1].as_scalar()
                if not (mid.is_exact and self.p.map_by_id(mid.lo)):
                    self.add(pc, RULE_HELPER,
                             f"map_lookup needs an exact valid map id in r1, got {mid.render()}",
                             state, chain)
                    return None
                key = s.regs[2]
                if key.kind == "uninit":
                    self.add(pc, RULE_HELPER, "map_lookup key r2 is uninitialized",
                             state, chain)
                    return None
                origin = self.next_origin
                self.next_origin += 1
                s.regs[0] = AbstractValue.pointer(REGION_MAP, 0, 0, mult=HUGE_MULT,
                                                  map_id=mid.lo, maybe_null=True,
                                                  origin=origin)
            else:
                s.regs[0] = AbstractValue.unknown()
            for r in range(1, 6):
                s.regs[r] = AbstractValue.uninit()
            return s

        raise AssertionError(ins.op)


def join_values(a: AbstractValue | None, b: AbstractValue | None):
    """Join for per-instruction state summaries (None is top)."""
    if a is None or b is None:
        return None
    if a.kind != b.kind:
        return None
    if a.kind == "uninit":
        return a
    if a.kind == "pointer":
        if (a.region, a.map_id, a.origin) != (b.region, b.map_id, b.origin):
            return None
        return AbstractValue.pointer(a.region, min(a.lo, b.lo), max(a.hi, b.hi),
                                     min(a.mult, b.mult), a.map_id,
                                     a.maybe_null or b.maybe_null, a.origin)
    lo, hi = min(a.lo, b.lo), max(a.hi, b.hi)
    m = min(a.mult, b.mult)
    if a.lo % m or b.lo % m:
        m = 1
    return _norm_range(lo, hi, m)


def verify_architectural(p: isa.Program, *, budget: int = PATH_BUDGET,
                         record_states: bool = False):
    """Explore every feasible path; REJECT iff a safety rule can be violated.

    Returns the VerdictReport (and the explorer when record_states is set,
    for transforms that need per-instruction register summaries).
    """
    isa.validate_structure(p)
    ex = _Explorer(p, budget=budget, record_states=record_states)
    report = ex.run()
    if record_states:
        return report, ex
    return report
