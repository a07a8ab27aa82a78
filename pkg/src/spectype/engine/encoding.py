"""Flat program/machine encoding shared by the pure and compiled cores.

Programs are lowered to one int64 row per instruction so both cores can step
them without touching Python objects; the compiled core re-checks these
constants at import time.
"""
from __future__ import annotations

import numpy as np

from .. import isa

# code row columns
C_OP, C_A, C_B, C_SIZE, C_IMM, C_OFF, C_TGT, C_COND, C_SRCIMM, C_HELPER = range(10)
CODE_COLS = 10

# memory layout (data space; program counters live in a separate code space)
CTX_BASE = 0x1000
CTX_SIZE = isa.CTX_SIZE
STACK_BASE = 0x2000
STACK_SIZE = isa.STACK_SIZE
KMEM_BASE = 0x4000
KMEM_SIZE = 0x4000
MAP_REGION_BASE = 0x10000
MEM_SIZE = 0x100000
LINE = 64
N_LINES = MEM_SIZE // LINE

# value provenance tags
TAG_SCALAR = 0
TAG_STACK = 1
TAG_CTX = 2
TAG_MAP = 3

# config vector indices (cfg int64 array)
CFG_PHT_MASK, CFG_FOLD_MASK, CFG_GHR_BITS, CFG_HIT_LAT, CFG_MISS_LAT, \
    CFG_SPEC_WINDOW, CFG_DELAYED, CFG_MONITOR, CFG_TRACE, CFG_BASE = range(10)
CFG_LEN = 10

# i/o scalar vector indices (io int64 array)
IO_GHR_IN, IO_GHR_OUT, IO_R0, IO_FAULT, IO_COMMITTED, IO_TRANSIENT, \
    IO_CYCLES, IO_R0_TAG = range(8)
IO_LEN = 8

# monitor violation codes
V_SCALAR_OPERAND = 1
V_OUT_OF_OBJECT = 2
V_UNWRITTEN_READ = 3
V_POINTER_RETURN = 4
V_FAULT = 5

# map table columns: (base, stride, n_entries, value_size)
M_BASE, M_STRIDE, M_NENT, M_VSIZE = range(4)

MASK64 = (1 << 64) - 1


def pow2ceil(n: int) -> int:
    p = 1
    while p < n:
        p <<= 1
    return p


def encode_program(p: isa.Program) -> np.ndarray:
    """Lower a Program into the flat int64 instruction table."""
    code = np.zeros((len(p.instructions), CODE_COLS), dtype=np.int64)
    for i, ins in enumerate(p.instructions):
        row = code[i]
        row[C_OP] = int(ins.op)
        row[C_A] = ins.dst
        row[C_B] = ins.src
        row[C_SIZE] = ins.size
        # store immediates as the signed-two's-complement view of the u64
        imm = ins.imm
        row[C_IMM] = imm - (1 << 64) if imm >= (1 << 63) else imm
        row[C_OFF] = ins.off
        row[C_TGT] = ins.target
        row[C_COND] = -1 if ins.cond is None else int(ins.cond)
        row[C_SRCIMM] = 1 if ins.src_is_imm else 0
        row[C_HELPER] = 0 if ins.helper is None else int(ins.helper)
    return code


def build_map_table(map_specs) -> np.ndarray:
    """Assign deterministic backing storage to maps.

    Per-entry stride is the value size rounded up to a power of two, sized so
    masked index arithmetic can never escape a map's own storage.
    """
    tab = np.zeros((max((m.id for m in map_specs), default=-1) + 1, 4), dtype=np.int64)
    tab[:, M_NENT] = 0
    base = MAP_REGION_BASE
    for m in sorted(map_specs, key=lambda s: s.id):
        stride = pow2ceil(m.value_size)
        total = stride * pow2ceil(m.n_entries)
        base = (base + stride - 1) // stride * stride  # align storage to the stride
        if base + total > MEM_SIZE:
            raise ValueError(f"map {m.id} does not fit in machine memory")
        tab[m.id] = (base, stride, m.n_entries, m.value_size)
        base += total
    return tab
