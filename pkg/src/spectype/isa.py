"""Miniature 64-bit load/store bytecode: registers, instructions, maps, stack.

The machine has ten general registers r0..r9 plus a read-only frame pointer
``fp`` addressing a fixed 512-byte stack (valid offsets are negative,
``[fp-512, fp)``).  Programs may declare statically sized maps and call a
fixed pair of helpers.  All arithmetic is unsigned 64-bit with wraparound;
shift counts are masked to 6 bits; comparisons are unsigned.

Assembly format (one instruction per line, ``;`` comments)::

    .map ID VALUE_SIZE N_ENTRIES [shared]
    label:
        MOV  r1, r2          ; or MOV r1, 42
        ADD  r1, r2          ; ADD/SUB/MUL/AND/OR/LSH/RSH, reg or imm rhs
        LDX  r1, [r2+8], 8   ; load, size 1 or 8
        STX  [fp-8], r1, 8   ; store register
        ST   [fp-8], 7, 8    ; store immediate
        JMP  EQ r0, 0, label ; conds: EQ NE LT GT LE GE (unsigned), rhs reg|imm
        JA   label           ; sugar for JMP EQ fp, fp, label
        CALL map_lookup      ; helpers: map_lookup, ktime_get_ns
        EXIT
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

MAX_PROGRAM_SIZE = 4096
STACK_SIZE = 512
CTX_SIZE = 64
NUM_REGS = 10
FP = 10  # register index of the frame pointer

U64 = (1 << 64) - 1


class Op(enum.IntEnum):
    MOV = 0
    ADD = 1
    SUB = 2
    MUL = 3
    AND = 4
    OR = 5
    LSH = 6
    RSH = 7
    LDX = 8
    STX = 9
    ST = 10
    JMP = 11
    CALL = 12
    EXIT = 13


ALU_OPS = {Op.MOV, Op.ADD, Op.SUB, Op.MUL, Op.AND, Op.OR, Op.LSH, Op.RSH}


class Cond(enum.IntEnum):
    EQ = 0
    NE = 1
    LT = 2
    GT = 3
    LE = 4
    GE = 5


class Helper(enum.IntEnum):
    MAP_LOOKUP = 1
    KTIME_GET_NS = 2


HELPER_NAMES = {Helper.MAP_LOOKUP: "map_lookup", Helper.KTIME_GET_NS: "ktime_get_ns"}
HELPER_BY_NAME = {v: k for k, v in HELPER_NAMES.items()}

REG_NAMES = {i: f"r{i}" for i in range(NUM_REGS)}
REG_NAMES[FP] = "fp"
REG_BY_NAME = {v: k for k, v in REG_NAMES.items()}


class AsmError(ValueError):
    """Parse failure; carries the offending line/column."""

    def __init__(self, message: str, line: int, col: int = 0):
        super().__init__(f"line {line}:{col}: {message}")
        self.line = line
        self.col = col


class StructureError(ValueError):
    """Structural validation failure (loops, size, missing exit)."""

    def __init__(self, kind: str, detail):
        super().__init__(f"{kind}: {detail}")
        self.kind = kind
        self.detail = detail


@dataclass(frozen=True)
class Instruction:
    """One decoded instruction; unused fields stay at their defaults."""

    op: Op
    dst: int = -1            # destination / lhs register
    src: int = -1            # source register, -1 when src_imm is used
    imm: int = 0             # immediate (normalized to unsigned 64-bit)
    src_is_imm: bool = False
    off: int = 0             # signed 16-bit memory offset
    size: int = 0            # 1 or 8 for memory ops
    cond: Cond | None = None
    target: int = -1         # resolved jump target index
    helper: Helper | None = None

    def is_jump(self) -> bool:
        return self.op is Op.JMP

    def reads_regs(self) -> tuple[int, ...]:
        if self.op in ALU_OPS:
            srcs = () if self.src_is_imm else (self.src,)
            return srcs if self.op is Op.MOV else (self.dst,) + srcs
        if self.op is Op.LDX:
            return (self.src,)
        if self.op is Op.STX:
            return (self.dst, self.src)
        if self.op is Op.ST:
            return (self.dst,)
        if self.op is Op.JMP:
            return (self.dst,) if self.src_is_imm else (self.dst, self.src)
        if self.op is Op.CALL:
            return (1, 2) if self.helper is Helper.MAP_LOOKUP else ()
        return ()

    def writes_reg(self) -> int:
        if self.op in ALU_OPS or self.op is Op.LDX:
            return self.dst
        return -1


@dataclass(frozen=True)
class MapSpec:
    id: int
    value_size: int
    n_entries: int
    shared: bool = False

    def __post_init__(self):
        if self.value_size <= 0 or self.n_entries <= 0:
            raise ValueError("map value_size and n_entries must be positive")


@dataclass(frozen=True, eq=False)
class Program:
    """An assembled program: label names are kept only for printing."""

    instructions: tuple[Instruction, ...]
    map_specs: tuple[MapSpec, ...] = ()
    labels: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Program):
            return NotImplemented
        return (self.instructions, self.map_specs) == (other.instructions, other.map_specs)

    def __len__(self):
        return len(self.instructions)

    def map_by_id(self, map_id: int) -> MapSpec | None:
        for m in self.map_specs:
            if m.id == map_id:
                return m
        return None


def _norm_imm(v: int) -> int:
    return v & U64


def _parse_reg(tok: str, lineno: int, writable: bool = False) -> int:
    r = REG_BY_NAME.get(tok)
    if r is None:
        raise AsmError(f"bad register name '{tok}'", lineno)
    if writable and r == FP:
        raise AsmError("fp is read-only", lineno)
    return r


def _parse_int(tok: str, lineno: int) -> int:
    try:
        v = int(tok, 0)
    except ValueError:
        raise AsmError(f"bad integer '{tok}'", lineno) from None
    if v < -(1 << 63) or v > U64:
        raise AsmError(f"immediate out of range: {tok}", lineno)
    return v


def _parse_mem(tok: str, lineno: int) -> tuple[int, int]:
    """Parse '[reg+off]' / '[reg-off]' / '[reg]' into (reg, off)."""
    if not (tok.startswith("[") and tok.endswith("]")):
        raise AsmError(f"expected memory operand, got '{tok}'", lineno)
    body = tok[1:-1].strip()
    for i, ch in enumerate(body):
        if ch in "+-" and i > 0:
            reg = _parse_reg(body[:i].strip(), lineno)
            off = _parse_int(body[i:].replace(" ", ""), lineno)
            break
    else:
        reg, off = _parse_reg(body, lineno), 0
    if off < -(1 << 15) or off >= (1 << 15):
        raise AsmError(f"offset out of signed 16-bit range: {off}", lineno)
    return reg, off


def _split_operands(rest: str, lineno: int) -> list[str]:
    # Split on commas not inside a [..] operand.
    parts, depth, cur = [], 0, []
    for ch in rest:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    tail = "".join(cur).strip()
    if tail:
        parts.append(tail)
    if depth != 0:
        raise AsmError("unbalanced brackets", lineno)
    return parts


def parse_program(text: str, max_size: int = MAX_PROGRAM_SIZE) -> Program:
    """Assemble source text into a Program, resolving labels and maps."""
    instructions: list = []  # (lineno, mnemonic, operand list, pending label ref)
    labels: dict[str, int] = {}
    maps: list[MapSpec] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith(".map"):
            toks = line.split()
            if len(toks) not in (4, 5):
                raise AsmError(".map needs: .map id value_size n_entries [shared]", lineno)
            shared = len(toks) == 5 and toks[4] == "shared"
            if len(toks) == 5 and not shared:
                raise AsmError(f"unknown map flag '{toks[4]}'", lineno)
            mid = _parse_int(toks[1], lineno)
            if any(m.id == mid for m in maps):
                raise AsmError(f"duplicate map id {mid}", lineno)
            try:
                maps.append(MapSpec(mid, _parse_int(toks[2], lineno), _parse_int(toks[3], lineno), shared))
            except ValueError as e:
                raise AsmError(str(e), lineno) from None
            continue
        while ":" in line.split()[0] if line else False:
            name, _, line = line.partition(":")
            name = name.strip()
            if not name.isidentifier():
                raise AsmError(f"bad label '{name}'", lineno)
            if name in labels:
                raise AsmError(f"duplicate label '{name}'", lineno)
            labels[name] = len(instructions)
            line = line.strip()
            if not line:
                break
        if not line:
            continue
        toks = line.split(None, 1)
        mnem = toks[0].upper()
        rest = toks[1] if len(toks) > 1 else ""
        ops = _split_operands(rest, lineno) if rest else []
        instructions.append((lineno, mnem, ops))

    out: list[Instruction] = []
    pending: list[tuple[int, int, str]] = []  # (index, lineno, label)

    def resolve_target(tok: str, lineno: int) -> int:
        pending.append((len(out), lineno, tok))
        return -1

    for lineno, mnem, ops in instructions:
        if mnem in ("MOV", "ADD", "SUB", "MUL", "AND", "OR", "LSH", "RSH"):
            if len(ops) != 2:
                raise AsmError(f"{mnem} needs 2 operands", lineno)
            dst = _parse_reg(ops[0], lineno, writable=True)
            if ops[1] in REG_BY_NAME:
                out.append(Instruction(Op[mnem], dst=dst, src=_parse_reg(ops[1], lineno)))
            else:
                out.append(Instruction(Op[mnem], dst=dst, imm=_norm_imm(_parse_int(ops[1], lineno)),
                                       src_is_imm=True))
        elif mnem == "LDX":
            if len(ops) != 3:
                raise AsmError("LDX needs: LDX rd, [rb+off], size", lineno)
            dst = _parse_reg(ops[0], lineno, writable=True)
            base, off = _parse_mem(ops[1], lineno)
            size = _parse_int(ops[2], lineno)
            if size not in (1, 8):
                raise AsmError(f"bad access size {size} (must be 1 or 8)", lineno)
            out.append(Instruction(Op.LDX, dst=dst, src=base, off=off, size=size))
        elif mnem == "STX":
            if len(ops) != 3:
                raise AsmError("STX needs: STX [rb+off], rs, size", lineno)
            base, off = _parse_mem(ops[0], lineno)
            src = _parse_reg(ops[1], lineno)
            size = _parse_int(ops[2], lineno)
            if size not in (1, 8):
                raise AsmError(f"bad access size {size} (must be 1 or 8)", lineno)
            out.append(Instruction(Op.STX, dst=base, src=src, off=off, size=size))
        elif mnem == "ST":
            if len(ops) != 3:
                raise AsmError("ST needs: ST [rb+off], imm, size", lineno)
            base, off = _parse_mem(ops[0], lineno)
            imm = _norm_imm(_parse_int(ops[1], lineno))
            size = _parse_int(ops[2], lineno)
            if size not in (1, 8):
                raise AsmError(f"bad access size {size} (must be 1 or 8)", lineno)
            out.append(Instruction(Op.ST, dst=base, imm=imm, src_is_imm=True, off=off, size=size))
        elif mnem == "JMP":
            if not ops:
                raise AsmError("JMP needs: JMP COND lhs, rhs, target", lineno)
            head = ops[0].split(None, 1)
            sub = ([head[1]] if len(head) > 1 else []) + ops[1:]
            if head[0].upper() not in Cond.__members__ or len(sub) != 3:
                raise AsmError("JMP needs: JMP COND lhs, rhs, target", lineno)
            cond = Cond[head[0].upper()]
            lhs = _parse_reg(sub[0], lineno)
            if sub[1] in REG_BY_NAME:
                rhs_reg, rhs_imm, is_imm = _parse_reg(sub[1], lineno), 0, False
            else:
                rhs_reg, rhs_imm, is_imm = -1, _norm_imm(_parse_int(sub[1], lineno)), True
            tgt = resolve_target(sub[2], lineno)
            out.append(Instruction(Op.JMP, dst=lhs, src=rhs_reg, imm=rhs_imm,
                                   src_is_imm=is_imm, cond=cond, target=tgt))
        elif mnem == "JA":
            if len(ops) != 1:
                raise AsmError("JA needs a target label", lineno)
            tgt = resolve_target(ops[0], lineno)
            out.append(Instruction(Op.JMP, dst=FP, src=FP, cond=Cond.EQ, target=tgt))
        elif mnem == "CALL":
            if len(ops) != 1 or ops[0] not in HELPER_BY_NAME:
                known = ", ".join(sorted(HELPER_BY_NAME))
                raise AsmError(f"CALL needs a helper name ({known})", lineno)
            out.append(Instruction(Op.CALL, helper=HELPER_BY_NAME[ops[0]]))
        elif mnem == "EXIT":
            if ops:
                raise AsmError("EXIT takes no operands", lineno)
            out.append(Instruction(Op.EXIT))
        else:
            raise AsmError(f"unknown opcode '{mnem}'", lineno)

    for name, idx in labels.items():
        if idx > len(out):
            raise AsmError(f"label '{name}' past end of program", 0)

    resolved = list(out)
    for idx, lineno, name in pending:
        if name not in labels:
            raise AsmError(f"unresolved label '{name}'", lineno)
        tgt = labels[name]
        if tgt >= len(out):
            raise AsmError(f"label '{name}' does not address an instruction", lineno)
        ins = resolved[idx]
        resolved[idx] = Instruction(ins.op, dst=ins.dst, src=ins.src, imm=ins.imm,
                                    src_is_imm=ins.src_is_imm, off=ins.off, size=ins.size,
                                    cond=ins.cond, target=tgt, helper=ins.helper)

    if len(resolved) > max_size:
        raise AsmError(f"program too large ({len(resolved)} > {max_size})", 0)
    return Program(tuple(resolved), tuple(sorted(maps, key=lambda m: m.id)), dict(labels))


def _fmt_imm(v: int) -> str:
    return str(v - (1 << 64)) if v >= (1 << 63) else str(v)


def print_program(p: Program) -> str:
    """Render a Program back to canonical assembly (labels are synthesized)."""
    targets = {ins.target for ins in p.instructions if ins.op is Op.JMP}
    names = {}
    by_index = {idx: name for name, idx in p.labels.items()}
    for t in sorted(targets):
        names[t] = by_index.get(t, f"L{t}")
    lines = [f".map {m.id} {m.value_size} {m.n_entries}" + (" shared" if m.shared else "")
             for m in p.map_specs]
    for i, ins in enumerate(p.instructions):
        prefix = f"{names[i]}:\n" if i in names else ""
        if ins.op in ALU_OPS:
            rhs = _fmt_imm(ins.imm) if ins.src_is_imm else REG_NAMES[ins.src]
            body = f"{ins.op.name} {REG_NAMES[ins.dst]}, {rhs}"
        elif ins.op is Op.LDX:
            body = f"LDX {REG_NAMES[ins.dst]}, [{REG_NAMES[ins.src]}{ins.off:+d}], {ins.size}"
        elif ins.op is Op.STX:
            body = f"STX [{REG_NAMES[ins.dst]}{ins.off:+d}], {REG_NAMES[ins.src]}, {ins.size}"
        elif ins.op is Op.ST:
            body = f"ST [{REG_NAMES[ins.dst]}{ins.off:+d}], {_fmt_imm(ins.imm)}, {ins.size}"
        elif ins.op is Op.JMP:
            rhs = _fmt_imm(ins.imm) if ins.src_is_imm else REG_NAMES[ins.src]
            body = f"JMP {ins.cond.name} {REG_NAMES[ins.dst]}, {rhs}, {names[ins.target]}"
        elif ins.op is Op.CALL:
            body = f"CALL {HELPER_NAMES[ins.helper]}"
        else:
            body = "EXIT"
        lines.append(f"{prefix}    {body}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class BasicBlock:
    index: int
    start: int  # first instruction index
    end: int    # one past the last instruction index


@dataclass(frozen=True)
class ControlFlowGraph:
    blocks: tuple[BasicBlock, ...]
    edges: tuple[tuple[int, int, str], ...]  # (src block, dst block, kind)

    def block_of(self, ins_index: int) -> BasicBlock:
        for b in self.blocks:
            if b.start <= ins_index < b.end:
                return b
        raise IndexError(ins_index)

    def successors(self, block_index: int):
        return [(d, k) for s, d, k in self.edges if s == block_index]


def build_cfg(p: Program) -> ControlFlowGraph:
    """Partition into basic blocks: leaders are entry, jump targets, and
    fall-throughs of jumps; edges follow opcode semantics."""
    n = len(p.instructions)
    leaders = {0}
    for i, ins in enumerate(p.instructions):
        if ins.op is Op.JMP:
            leaders.add(ins.target)
            if i + 1 < n:
                leaders.add(i + 1)
    ordered = sorted(leaders)
    blocks = []
    for bi, start in enumerate(ordered):
        end = ordered[bi + 1] if bi + 1 < len(ordered) else n
        blocks.append(BasicBlock(bi, start, end))
    block_at = {b.start: b.index for b in blocks}

    edges = []
    for b in blocks:
        last = p.instructions[b.end - 1]
        if last.op is Op.JMP:
            edges.append((b.index, block_at[last.target], "taken"))
            if b.end < n:
                edges.append((b.index, block_at[b.end], "fallthrough"))
        elif last.op is Op.EXIT:
            pass  # terminal: modeled as an 'exit' edge to nowhere
        elif b.end < n:
            kind = "call" if last.op is Op.CALL else "fallthrough"
            edges.append((b.index, block_at[b.end], kind))
    return ControlFlowGraph(tuple(blocks), tuple(edges))


def validate_structure(p: Program, max_size: int = MAX_PROGRAM_SIZE) -> ControlFlowGraph:
    """Check the program is acyclic, bounded, and every path reaches EXIT.

    Returns the CFG on success; raises StructureError otherwise.
    """
    if len(p.instructions) > max_size:
        raise StructureError("TooLarge", len(p.instructions))
    if not p.instructions:
        raise StructureError("NoExit", "empty program")
    cfg = build_cfg(p)

    # Cycle detection via DFS colors.
    color = [0] * len(cfg.blocks)  # 0 white, 1 grey, 2 black

    def dfs(b: int):
        color[b] = 1
        for d, _ in cfg.successors(b):
            if color[d] == 1:
                raise StructureError("LoopDetected", d)
            if color[d] == 0:
                dfs(d)
        color[b] = 2

    dfs(0)

    # Every block reachable from entry must have a path to an EXIT block.
    exits = {b.index for b in cfg.blocks if p.instructions[b.end - 1].op is Op.EXIT}
    if not exits:
        raise StructureError("NoExit", "no EXIT instruction")
    reaches: set[int] = set(exits)
    changed = True
    while changed:
        changed = False
        for b in cfg.blocks:
            if b.index not in reaches and any(d in reaches for d, _ in cfg.successors(b.index)):
                reaches.add(b.index)
                changed = True
    reachable = {b for b in range(len(cfg.blocks)) if color[b] == 2}
    dead = reachable - reaches
    if dead:
        raise StructureError("NoExit", f"block {min(dead)} cannot reach EXIT")
    return cfg


def all_paths(cfg: ControlFlowGraph):
    """Yield every entry-to-exit block path (finite: CFG must be acyclic)."""
    stack = [(0, (0,))]
    while stack:
        b, path = stack.pop()
        succ = cfg.successors(b)
        if not succ:
            yield path
            continue
        for d, _ in reversed(succ):
            stack.append((d, path + (d,)))
