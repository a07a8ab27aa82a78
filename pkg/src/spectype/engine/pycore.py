"""Pure-Python stepping core.

Semantics (mirrored exactly by the compiled core):

* Values are computed eagerly; a separate per-register ready-time schedule
  models data latency.  Branches never stall: they are predicted at fetch and
  resolve when their operands' ready time arrives.
* A conditional branch pushes a resolution frame.  Mispredicted frames carry
  a checkpoint (registers, tags, ready times, GHR, store-undo watermark).
  When a mispredicted frame fires, everything younger is squashed and fetch
  resumes at the correct target.  IMMEDIATE policy fires a frame at its own
  operand-ready time; DELAYED defers a frame while an elder frame is still
  unresolved (the elder's remaining latency extends the transient window).
* Each misprediction may shadow at most ``spec_window`` executed
  instructions; when the cap is hit, fetch stalls until the squash.
* Cache residency updates at access time; a miss charges ``miss_lat`` to the
  loaded value only.  Transient accesses perform their fill only when their
  address resolves before the squash horizon; transient stores are applied
  to memory through an undo log and rolled back on squash.
* The optional monitor tags every value with its provenance (scalar or
  pointer-into-object) and records scalar-operand dereferences,
  out-of-object accesses, unwritten stack reads, and pointer returns.
"""
from __future__ import annotations

from . import encoding as E

MASK64 = E.MASK64
SIGN = 1 << 63

# Op/cond/helper numbering is fixed by spectype.isa; restated here as plain
# ints so the hot loop never touches enum objects.
OP_MOV, OP_ADD, OP_SUB, OP_MUL, OP_AND, OP_OR, OP_LSH, OP_RSH = range(8)
OP_LDX, OP_STX, OP_ST, OP_JMP, OP_CALL, OP_EXIT = range(8, 14)
COND_EQ, COND_NE, COND_LT, COND_GT, COND_LE, COND_GE = range(6)
HELPER_MAP_LOOKUP, HELPER_KTIME = 1, 2

INF = 1 << 62


def prepare(code) -> tuple:
    """Convert the int64 instruction table to tuples for fast stepping."""
    return tuple(tuple(int(v) for v in row) for row in code)


def _cond_eval(cond: int, a: int, b: int) -> bool:
    if cond == COND_EQ:
        return a == b
    if cond == COND_NE:
        return a != b
    if cond == COND_LT:
        return a < b
    if cond == COND_GT:
        return a > b
    if cond == COND_LE:
        return a <= b
    return a >= b


def execute(code, mem: bytearray, resident: bytearray, pht: bytearray,
            maps_tab, io, cfg, forced, trace, violations) -> int:
    """Run one program invocation; returns 0, or 1 on architectural fault."""
    n = len(code)
    fold_mask = int(cfg[E.CFG_FOLD_MASK])
    pht_mask = int(cfg[E.CFG_PHT_MASK])
    ghr_bits = int(cfg[E.CFG_GHR_BITS])
    ghr_mask = (1 << ghr_bits) - 1
    hit_lat = int(cfg[E.CFG_HIT_LAT])
    miss_lat = int(cfg[E.CFG_MISS_LAT])
    spec_window = int(cfg[E.CFG_SPEC_WINDOW])
    delayed = int(cfg[E.CFG_DELAYED])
    monitor = int(cfg[E.CFG_MONITOR])
    tracing = trace is not None and int(cfg[E.CFG_TRACE])
    base = int(cfg[E.CFG_BASE])

    ghr = int(io[E.IO_GHR_IN]) & ghr_mask
    cycle = 0
    committed = 0
    transient = 0

    regs = [0] * 11
    tagk = [E.TAG_SCALAR] * 11
    tagb = [0] * 11
    tags = [0] * 11
    ready = [0] * 11

    regs[10] = E.STACK_BASE + E.STACK_SIZE
    tagk[10] = E.TAG_STACK
    tagb[10] = E.STACK_BASE
    tags[10] = E.STACK_SIZE
    regs[1] = E.CTX_BASE
    tagk[1] = E.TAG_CTX
    tagb[1] = E.CTX_BASE
    tags[1] = E.CTX_SIZE

    # fresh stack per invocation
    mem[E.STACK_BASE:E.STACK_BASE + E.STACK_SIZE] = bytes(E.STACK_SIZE)
    written = bytearray(E.STACK_SIZE)
    slot_tagk = [E.TAG_SCALAR] * (E.STACK_SIZE // 8)
    slot_tagb = [0] * (E.STACK_SIZE // 8)
    slot_tags = [0] * (E.STACK_SIZE // 8)

    # store undo log: (addr, old bytes, old written bytes|None, [(slot, old tag)])
    undo: list = []
    # frames: [t_resolve, mispredicted, correct_pc, pht_idx, actual, pc, count,
    #          checkpoint|None, undo_mark, ghr_ckpt]
    frames: list = []

    pc = 0
    fault = 0

    def mispredicted_present() -> bool:
        for f in frames:
            if f[1]:
                return True
        return False

    def squash_horizon() -> int:
        """Earliest effective fire time among mispredicted frames."""
        h = INF
        running = -1
        for f in frames:
            eff = f[0] if not delayed else max(f[0], running)
            running = max(running, eff)
            if f[1] and eff < h:
                h = eff
        return h

    def rollback_stores(mark: int):
        while len(undo) > mark:
            addr, old, oldw, slot_tags_saved = undo.pop()
            mem[addr:addr + len(old)] = old
            if oldw is not None:
                soff = addr - E.STACK_BASE
                written[soff:soff + len(oldw)] = oldw
            for slot, (ok, ob, os_) in slot_tags_saved:
                slot_tagk[slot], slot_tagb[slot], slot_tags[slot] = ok, ob, os_

    def record(code_v: int, at_pc: int, addr: int, trans: int):
        if violations is not None:
            violations.append((code_v, at_pc, addr, trans))

    def mem_read(addr: int, size: int) -> int:
        if addr < 0 or addr + size > E.MEM_SIZE:
            return 0
        return int.from_bytes(mem[addr:addr + size], "little")

    def mem_write(addr: int, size: int, value: int, trans: bool) -> None:
        if addr < 0 or addr + size > E.MEM_SIZE:
            return
        if trans:
            old = bytes(mem[addr:addr + size])
            oldw = None
            slot_saves = []
            if E.STACK_BASE <= addr and addr + size <= E.STACK_BASE + E.STACK_SIZE:
                soff = addr - E.STACK_BASE
                oldw = bytes(written[soff:soff + size])
                for slot in range(soff // 8, (soff + size - 1) // 8 + 1):
                    slot_saves.append((slot, (slot_tagk[slot], slot_tagb[slot], slot_tags[slot])))
            undo.append((addr, old, oldw, slot_saves))
        mem[addr:addr + size] = value.to_bytes(size, "little")

    while True:
        # --- resolve / squash outstanding branches ---
        i = 0
        running = -1
        squashed = False
        while i < len(frames):
            f = frames[i]
            eff = f[0] if not delayed else max(f[0], running)
            running = max(running, eff)
            if eff <= cycle:
                ctr = pht[f[3]]
                pht[f[3]] = min(ctr + 1, 3) if f[4] else max(ctr - 1, 0)
                if tracing:
                    trace.append(("resolve", base + f[5], f[10], f[4], eff))
                if f[1]:
                    # squash: restore checkpoint, drop this frame and younger
                    cp = f[7]
                    regs[:] = cp[0]
                    tagk[:] = cp[1]
                    tagb[:] = cp[2]
                    tags[:] = cp[3]
                    ready[:] = cp[4]
                    ghr = ((f[9] << 1) | (1 if f[4] else 0)) & ghr_mask
                    rollback_stores(f[8])
                    pc = f[2]
                    cycle = max(cycle, eff)
                    if tracing:
                        trace.append(("squash", base + f[5], len(frames) - i, cycle))
                    del frames[i:]
                    squashed = True
                    break
                del frames[i]
            else:
                i += 1
        if squashed:
            continue

        # --- speculation-window stall ---
        stall = False
        if frames:
            for f in frames:
                if f[1] and f[6] >= spec_window:
                    stall = True
                    break
            if not stall and (pc < 0 or pc >= n) and mispredicted_present():
                stall = True  # transient runaway / transient EXIT handled below
        if stall:
            nxt = INF
            running = -1
            for f in frames:
                eff = f[0] if not delayed else max(f[0], running)
                running = max(running, eff)
                nxt = min(nxt, eff)
            cycle = nxt
            continue

        if pc < 0 or pc >= n:
            fault = 1  # architectural runaway; validated programs never get here
            break

        row = code[pc]
        op = row[E.C_OP]
        in_spec = mispredicted_present()
        cycle += 1
        if in_spec:
            transient += 1
            for f in frames:
                if f[1]:
                    f[6] += 1
        else:
            committed += 1
        if tracing:
            trace.append(("exec", base + pc, cycle, 1 if in_spec else 0))

        if op <= OP_RSH:  # ALU
            a = row[E.C_A]
            if row[E.C_SRCIMM]:
                bval = row[E.C_IMM] & MASK64
                bk, bb, bs, brdy = E.TAG_SCALAR, 0, 0, 0
            else:
                b = row[E.C_B]
                bval = regs[b]
                bk, bb, bs, brdy = tagk[b], tagb[b], tags[b], ready[b]
            av = regs[a]
            if op == OP_MOV:
                res, rk, rb, rs = bval, bk, bb, bs
                rdy = max(cycle, brdy)
            else:
                rdy = max(cycle, ready[a], brdy)
                ak = tagk[a]
                if op == OP_ADD:
                    res = (av + bval) & MASK64
                    if ak != E.TAG_SCALAR and bk == E.TAG_SCALAR:
                        rk, rb, rs = ak, tagb[a], tags[a]
                    elif ak == E.TAG_SCALAR and bk != E.TAG_SCALAR:
                        rk, rb, rs = bk, bb, bs
                    else:
                        rk, rb, rs = E.TAG_SCALAR, 0, 0
                elif op == OP_SUB:
                    res = (av - bval) & MASK64
                    if ak != E.TAG_SCALAR and bk == E.TAG_SCALAR:
                        rk, rb, rs = ak, tagb[a], tags[a]
                    else:
                        rk, rb, rs = E.TAG_SCALAR, 0, 0
                else:
                    if op == OP_MUL:
                        res = (av * bval) & MASK64
                    elif op == OP_AND:
                        res = av & bval
                    elif op == OP_OR:
                        res = av | bval
                    elif op == OP_LSH:
                        res = (av << (bval & 63)) & MASK64
                    else:
                        res = av >> (bval & 63)
                    rk, rb, rs = E.TAG_SCALAR, 0, 0
            regs[a] = res
            tagk[a], tagb[a], tags[a] = rk, rb, rs
            ready[a] = rdy
            pc += 1

        elif op == OP_LDX or op == OP_STX or op == OP_ST:
            breg = row[E.C_B] if op == OP_LDX else row[E.C_A]
            addr = (regs[breg] + row[E.C_OFF]) & MASK64
            size = row[E.C_SIZE]
            addr_ready = max(cycle, ready[breg])
            horizon = squash_horizon() if in_spec else INF
            issues = addr_ready < horizon
            if monitor and issues:
                bk = tagk[breg]
                if bk == E.TAG_SCALAR:
                    record(E.V_SCALAR_OPERAND, pc, addr, 1 if in_spec else 0)
                elif addr < tagb[breg] or addr + size > tagb[breg] + tags[breg]:
                    record(E.V_OUT_OF_OBJECT, pc, addr, 1 if in_spec else 0)
                elif op == OP_LDX and bk == E.TAG_STACK:
                    soff = addr - E.STACK_BASE
                    if any(written[soff + j] == 0 for j in range(size)):
                        record(E.V_UNWRITTEN_READ, pc, addr, 1 if in_spec else 0)
            if not in_spec and (addr + size > E.MEM_SIZE):
                fault = 1
                record(E.V_FAULT, pc, addr, 0)
                break
            if op == OP_LDX:
                a = row[E.C_A]
                val = mem_read(addr, size)
                lat = miss_lat
                if issues:
                    line = addr >> 6
                    if 0 <= addr and addr + size <= E.MEM_SIZE:
                        if resident[line]:
                            lat = hit_lat
                        else:
                            resident[line] = 1
                            if tracing:
                                trace.append(("fill", line << 6, cycle, 1 if in_spec else 0))
                        if tracing:
                            trace.append(("load", base + pc, addr, cycle, 1 if in_spec else 0))
                regs[a] = val
                ready[a] = addr_ready + lat
                # loaded value provenance: full aligned stack slot reads recover
                # a spilled tag, everything else is a scalar
                rk, rb, rs = E.TAG_SCALAR, 0, 0
                if (size == 8 and E.STACK_BASE <= addr
                        and addr + 8 <= E.STACK_BASE + E.STACK_SIZE
                        and (addr - E.STACK_BASE) % 8 == 0):
                    slot = (addr - E.STACK_BASE) // 8
                    rk, rb, rs = slot_tagk[slot], slot_tagb[slot], slot_tags[slot]
                tagk[a], tagb[a], tags[a] = rk, rb, rs
            else:
                if op == OP_STX:
                    val = regs[row[E.C_B]]
                    vk, vb, vs = tagk[row[E.C_B]], tagb[row[E.C_B]], tags[row[E.C_B]]
                else:
                    val = row[E.C_IMM] & MASK64
                    vk, vb, vs = E.TAG_SCALAR, 0, 0
                if issues:
                    mem_write(addr, size, val, in_spec)
                    if E.STACK_BASE <= addr and addr + size <= E.STACK_BASE + E.STACK_SIZE:
                        soff = addr - E.STACK_BASE
                        for j in range(size):
                            written[soff + j] = 1
                        for slot in range(soff // 8, (soff + size - 1) // 8 + 1):
                            slot_tagk[slot], slot_tagb[slot], slot_tags[slot] = E.TAG_SCALAR, 0, 0
                        if size == 8 and soff % 8 == 0:
                            slot = soff // 8
                            slot_tagk[slot], slot_tagb[slot], slot_tags[slot] = vk, vb, vs
                    if 0 <= addr and addr + size <= E.MEM_SIZE:
                        line = addr >> 6
                        if not resident[line]:
                            resident[line] = 1
                            if tracing:
                                trace.append(("fill", line << 6, cycle, 1 if in_spec else 0))
                        if tracing:
                            trace.append(("store", base + pc, addr, cycle, 1 if in_spec else 0))
            pc += 1

        elif op == OP_JMP:
            lhs = row[E.C_A]
            if row[E.C_SRCIMM]:
                rhs_v = row[E.C_IMM] & MASK64
                rhs_ready = 0
            else:
                rhs_v = regs[row[E.C_B]]
                rhs_ready = ready[row[E.C_B]]
            actual = _cond_eval(row[E.C_COND], regs[lhs], rhs_v)
            t_resolve = max(cycle, ready[lhs], rhs_ready)
            idx = ((base + pc) & fold_mask) ^ (ghr & ghr_mask)
            idx &= pht_mask
            if forced is not None and forced[pc] >= 0:
                predicted = bool(forced[pc])
            else:
                predicted = pht[idx] >= 2
            if tracing:
                trace.append(("predict", base + pc, 1 if predicted else 0, cycle))
            mis = predicted != actual
            cp = None
            if mis:
                cp = (regs[:], tagk[:], tagb[:], tags[:], ready[:])
            frames.append([t_resolve, mis, (row[E.C_TGT] if actual else pc + 1),
                           idx, actual, pc, 0, cp, len(undo), ghr, 1 if predicted else 0])
            ghr = ((ghr << 1) | (1 if predicted else 0)) & ghr_mask
            pc = row[E.C_TGT] if predicted else pc + 1

        elif op == OP_CALL:
            helper = row[E.C_HELPER]
            if helper == HELPER_MAP_LOOKUP:
                mid = regs[1]
                key = regs[2]
                rdy = max(cycle, ready[1], ready[2])
                ok = 0 <= mid < len(maps_tab) and maps_tab[mid][E.M_NENT] > 0 \
                    and key < maps_tab[mid][E.M_NENT]
                if ok:
                    mrow = maps_tab[mid]
                    vbase = int(mrow[E.M_BASE]) + int(key) * int(mrow[E.M_STRIDE])
                    regs[0] = vbase
                    tagk[0], tagb[0], tags[0] = E.TAG_MAP, vbase, int(mrow[E.M_VSIZE])
                else:
                    regs[0] = 0
                    tagk[0], tagb[0], tags[0] = E.TAG_SCALAR, 0, 0
                ready[0] = rdy + 1
            else:  # ktime_get_ns: the cycle clock
                regs[0] = cycle
                tagk[0], tagb[0], tags[0] = E.TAG_SCALAR, 0, 0
                ready[0] = cycle
            for r in range(1, 6):
                regs[r] = 0
                tagk[r], tagb[r], tags[r] = E.TAG_SCALAR, 0, 0
                ready[r] = cycle
            pc += 1

        else:  # EXIT
            if in_spec:
                # transient exit: nothing further can fetch; wait for squash
                nxt = INF
                running = -1
                for f in frames:
                    eff = f[0] if not delayed else max(f[0], running)
                    running = max(running, eff)
                    nxt = min(nxt, eff)
                cycle = nxt
                continue
            # drain correctly-predicted frames (their counters still train)
            running = -1
            for f in frames:
                eff = f[0] if not delayed else max(f[0], running)
                running = max(running, eff)
                ctr = pht[f[3]]
                pht[f[3]] = min(ctr + 1, 3) if f[4] else max(ctr - 1, 0)
                if tracing:
                    trace.append(("resolve", base + f[5], f[10], f[4], eff))
                cycle = max(cycle, eff)
            frames.clear()
            if monitor and tagk[0] != E.TAG_SCALAR:
                record(E.V_POINTER_RETURN, pc, regs[0], 0)
            break

    io[E.IO_GHR_OUT] = ghr
    io[E.IO_R0] = regs[0] - (1 << 64) if regs[0] >= SIGN else regs[0]
    io[E.IO_FAULT] = fault
    io[E.IO_COMMITTED] = committed
    io[E.IO_TRANSIENT] = transient
    io[E.IO_CYCLES] = cycle
    io[E.IO_R0_TAG] = tagk[0]
    return fault
