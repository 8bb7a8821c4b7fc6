"""Compile a :class:`ModelGraph` into flat integer/float arrays for the sampler.

The compiled form is a small register machine: every node, intermediate
result and constant owns a slot in a float64 value vector. Deterministic
nodes become short instruction sequences, stochastic and observed nodes
become log-density factors. For every update unit (a single stochastic node
or a block) the compiler precomputes which instructions must be re-run and
which factors change, so a Metropolis step touches only its Markov blanket.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import graph as gr

# instruction opcodes
OP_COPY, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_NEG, OP_LOG, OP_EXP, OP_LOGIT, OP_ILOGIT, OP_IND = range(11)
_OPCODE = {"add": OP_ADD, "sub": OP_SUB, "mul": OP_MUL, "div": OP_DIV, "neg": OP_NEG,
           "log": OP_LOG, "exp": OP_EXP, "logit": OP_LOGIT, "ilogit": OP_ILOGIT,
           "indicator": OP_IND}

# factor kinds
(F_BINOMIAL, F_POISSON, F_NORMAL, F_UNIFORM, F_BETA, F_LOGNORMAL, F_BERNOULLI,
 F_JPROP, F_JRATE, F_FLAT) = range(10)
_FACTOR = {"binomial": F_BINOMIAL, "poisson": F_POISSON, "normal": F_NORMAL,
           "uniform": F_UNIFORM, "beta": F_BETA, "lognormal": F_LOGNORMAL,
           "bernoulli": F_BERNOULLI, "jeffreys_proportion": F_JPROP,
           "jeffreys_rate": F_JRATE, "flat": F_FLAT}

# sampling-scale transforms
T_IDENTITY, T_LOG, T_LOGIT = 0, 1, 2
_TRANSFORM = {gr.REAL: T_IDENTITY, gr.POSITIVE: T_LOG, gr.UNIT: T_LOGIT}

LOG_2PI = math.log(2.0 * math.pi)
LOG_PI = math.log(math.pi)


@dataclass
class Tape:
    names: list            # node names, index == slot
    slot: dict             # node name -> slot
    n_slots: int
    init_values: np.ndarray  # constants and observed values filled in
    ins: np.ndarray        # (n_ins, 5): op, out, a, b, c
    det_range: np.ndarray  # per node: (start, end) into ins (deterministic only)
    fac: np.ndarray        # (n_fac, 5): kind, x, p1, p2, transform
    node_fac: dict         # node name -> factor index
    stochastic: list       # stochastic node names in topological order
    transform: dict        # node -> transform code
    units: list            # list of tuples of node names
    unit_ptr: np.ndarray
    unit_slots: np.ndarray
    unit_tr: np.ndarray
    ins_ptr: np.ndarray
    ins_idx: np.ndarray
    det_ptr: np.ndarray
    det_slots: np.ndarray
    fac_ptr: np.ndarray
    fac_idx: np.ndarray
    all_ins: np.ndarray    # every instruction in order
    all_fac: np.ndarray    # every factor
    keep_names: list       # unobserved nodes stored in draws
    keep_slots: np.ndarray


def compile_graph(g: gr.ModelGraph) -> Tape:
    gr.check(g)
    order = list(g.topological_order())
    slot = {n: i for i, n in enumerate(order)}
    values = [math.nan] * len(order)
    const_slot = {}

    def constant(v):
        v = float(v)
        if v not in const_slot:
            const_slot[v] = len(values)
            values.append(v)
        return const_slot[v]

    for k, v in g.constants.items():
        slot[k] = len(values)
        values.append(float(v))

    def operand(e):
        if e[0] == "const":
            return constant(e[1])
        if e[0] == "ref":
            return slot[e[1]]
        raise AssertionError

    ins = []
    det_range = np.zeros((len(order), 2), dtype=np.int64)

    def emit(e, out=None):
        if e[0] in ("const", "ref"):
            src = operand(e)
            if out is None:
                return src
            ins.append((OP_COPY, out, src, 0, 0))
            return out
        args = [emit(a) for a in e[1:]] + [0, 0]
        if out is None:
            out = len(values)
            values.append(math.nan)
        ins.append((_OPCODE[e[0]], out, args[0], args[1], args[2]))
        return out

    fac = []
    node_fac = {}
    for n in order:
        nd = g[n]
        if nd.role == gr.DETERMINISTIC:
            start = len(ins)
            emit(nd.expr, out=slot[n])
            det_range[slot[n]] = (start, len(ins))
            continue
        if nd.role == gr.OBSERVED:
            values[slot[n]] = float(nd.value)
        params = [operand(p) for p in nd.dist.params] + [0, 0]
        node_fac[n] = len(fac)
        fac.append((_FACTOR[nd.dist.kind], slot[n], params[0], params[1],
                    _TRANSFORM.get(nd.support, T_IDENTITY)))

    ins_arr = np.array(ins, dtype=np.int64).reshape(-1, 5)
    fac_arr = np.array(fac, dtype=np.int64).reshape(-1, 5)

    stoch = [n for n in order if g[n].stochastic]
    transform = {n: _TRANSFORM[g[n].support] for n in stoch}
    in_block = {x for b in g.blocks for x in b}
    units = [tuple(b) for b in g.blocks] + [(n,) for n in stoch if n not in in_block]
    units.sort(key=lambda u: min(slot[x] for x in u))

    children = {n: [] for n in order}
    for n in order:
        for p in g[n].parents():
            if p in children:
                children[p].append(n)

    unit_ptr, unit_slots, unit_tr = [0], [], []
    ins_ptr, ins_idx = [0], []
    det_ptr, det_slots = [0], []
    fac_ptr, fac_idx = [0], []
    for u in units:
        dets, facs = set(), {node_fac[x] for x in u}
        stack = list(u)
        while stack:
            n = stack.pop()
            for c in children[n]:
                if g[c].role == gr.DETERMINISTIC:
                    if c not in dets:
                        dets.add(c)
                        stack.append(c)
                else:
                    facs.add(node_fac[c])
        dets = sorted(dets, key=slot.get)
        for x in u:
            unit_slots.append(slot[x])
            unit_tr.append(transform[x])
        unit_ptr.append(len(unit_slots))
        for d in dets:
            a, b = det_range[slot[d]]
            ins_idx.extend(range(a, b))
            det_slots.append(slot[d])
        ins_ptr.append(len(ins_idx))
        det_ptr.append(len(det_slots))
        fac_idx.extend(sorted(facs))
        fac_ptr.append(len(fac_idx))

    keep = [n for n in order if g[n].role != gr.OBSERVED]
    i64 = lambda x: np.asarray(x, dtype=np.int64)
    return Tape(
        names=order, slot=slot, n_slots=len(values), init_values=np.array(values, dtype=float),
        ins=ins_arr, det_range=det_range, fac=fac_arr, node_fac=node_fac, stochastic=stoch,
        transform=transform, units=units,
        unit_ptr=i64(unit_ptr), unit_slots=i64(unit_slots), unit_tr=i64(unit_tr),
        ins_ptr=i64(ins_ptr), ins_idx=i64(ins_idx), det_ptr=i64(det_ptr), det_slots=i64(det_slots),
        fac_ptr=i64(fac_ptr), fac_idx=i64(fac_idx),
        all_ins=np.arange(len(ins_arr), dtype=np.int64),
        all_fac=np.arange(len(fac_arr), dtype=np.int64),
        keep_names=keep, keep_slots=i64([slot[n] for n in keep]),
    )


# ---------------------------------------------------------------------------
# numba kernels


@njit(cache=True, error_model="numpy", nogil=True)
def run_instructions(val, ins, idx):
    for t in range(idx.shape[0]):
        i = idx[t]
        op = ins[i, 0]
        a = val[ins[i, 2]]
        if op == OP_COPY:
            r = a
        elif op == OP_ADD:
            r = a + val[ins[i, 3]]
        elif op == OP_SUB:
            r = a - val[ins[i, 3]]
        elif op == OP_MUL:
            r = a * val[ins[i, 3]]
        elif op == OP_DIV:
            r = a / val[ins[i, 3]]
        elif op == OP_NEG:
            r = -a
        elif op == OP_LOG:
            r = np.log(a) if a > 0 else (-np.inf if a == 0 else np.nan)
        elif op == OP_EXP:
            r = np.exp(a)
        elif op == OP_LOGIT:
            r = np.log(a) - np.log1p(-a)
        elif op == OP_ILOGIT:
            if a >= 0:
                r = 1.0 / (1.0 + np.exp(-a))
            else:
                z = np.exp(a)
                r = z / (1.0 + z)
        else:
            x = val[ins[i, 3]]
            r = 1.0 if (a <= x and x <= val[ins[i, 4]]) else 0.0
        val[ins[i, 1]] = r


@njit(cache=True, nogil=True)
def _lg(x):
    return math.lgamma(x)


@njit(cache=True, error_model="numpy", nogil=True)
def factor_logp(kind, x, p1, p2, tr):
    if kind == F_BINOMIAL:
        if p2 < 0.0 or p2 > 1.0 or x < 0 or x > p1:
            return -np.inf
        lp = _lg(p1 + 1.0) - _lg(x + 1.0) - _lg(p1 - x + 1.0)
        if x > 0:
            lp += x * np.log(p2)
        if p1 - x > 0:
            lp += (p1 - x) * np.log1p(-p2)
        return lp
    if kind == F_POISSON:
        if p1 < 0.0:
            return -np.inf
        if p1 == 0.0:
            return 0.0 if x == 0 else -np.inf
        return x * np.log(p1) - p1 - _lg(x + 1.0)
    if kind == F_NORMAL:
        if not p2 > 0.0:
            return -np.inf
        z = (x - p1) / p2
        return -0.5 * LOG_2PI - np.log(p2) - 0.5 * z * z
    if kind == F_UNIFORM:
        if p1 <= x and x <= p2 and p1 < p2:
            return -np.log(p2 - p1)
        return -np.inf
    if kind == F_BETA:
        if not (x > 0.0 and x < 1.0):
            return -np.inf
        return ((p1 - 1.0) * np.log(x) + (p2 - 1.0) * np.log1p(-x)
                - (_lg(p1) + _lg(p2) - _lg(p1 + p2)))
    if kind == F_LOGNORMAL:
        if not x > 0.0 or not p2 > 0.0:
            return -np.inf
        lx = np.log(x)
        z = (lx - p1) / p2
        return -lx - np.log(p2) - 0.5 * LOG_2PI - 0.5 * z * z
    if kind == F_BERNOULLI:
        if p1 < 0.0 or p1 > 1.0:
            return -np.inf
        if x == 1.0:
            return np.log(p1) if p1 > 0 else -np.inf
        return np.log1p(-p1) if p1 < 1 else -np.inf
    if kind == F_JPROP:
        if not (x > 0.0 and x < 1.0):
            return -np.inf
        return -0.5 * np.log(x) - 0.5 * np.log1p(-x) - LOG_PI
    if kind == F_JRATE:
        if not x > 0.0:
            return -np.inf
        return -0.5 * np.log(x)
    # flat on the sampling scale
    if tr == T_LOG:
        return -np.log(x) if x > 0.0 else -np.inf
    if tr == T_LOGIT:
        if not (x > 0.0 and x < 1.0):
            return -np.inf
        return -np.log(x) - np.log1p(-x)
    return 0.0


@njit(cache=True, error_model="numpy", nogil=True)
def sum_factors(val, fac, idx):
    s = 0.0
    for t in range(idx.shape[0]):
        f = idx[t]
        s += factor_logp(fac[f, 0], val[fac[f, 1]], val[fac[f, 2]], val[fac[f, 3]], fac[f, 4])
        if s == -np.inf:
            return s
    return s


@njit(cache=True, error_model="numpy", nogil=True)
def full_logp(val, ins, all_ins, fac, all_fac):
    run_instructions(val, ins, all_ins)
    return sum_factors(val, fac, all_fac)


@njit(cache=True, error_model="numpy", nogil=True)
def to_sampling(x, tr):
    if tr == T_LOG:
        return np.log(x)
    if tr == T_LOGIT:
        return np.log(x) - np.log1p(-x)
    return x


@njit(cache=True, error_model="numpy", nogil=True)
def from_sampling(u, tr):
    if tr == T_LOG:
        return np.exp(u)
    if tr == T_LOGIT:
        if u >= 0:
            return 1.0 / (1.0 + np.exp(-u))
        z = np.exp(u)
        return z / (1.0 + z)
    return u


@njit(cache=True, error_model="numpy", nogil=True)
def log_jacobian(u, tr):
    """log |dx/du| for x = from_sampling(u)."""
    if tr == T_LOG:
        return u
    if tr == T_LOGIT:
        # log(sigmoid(u)) + log(1 - sigmoid(u))
        a = -np.abs(u)
        return a - 2.0 * np.log1p(np.exp(a))
    return 0.0
