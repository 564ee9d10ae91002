"""Shared operation cost model.

One place defines what each operation "costs" so the static analyzer and the
runtime instrumentation counter can never disagree.  Counts follow the
multiply-accumulate convention used by deep-learning profilers: a conv or
matmul contributes one unit per MAC, and the columns usually labelled
"FLOPs" in model-size tables are these MAC counts.  Normalizations,
activations, and elementwise arithmetic are charged small fixed per-element
costs so non-conv work is visible without dominating anything.
"""

from __future__ import annotations

# Per-element charges for non-GEMM work.
NORM_COST_PER_ELEM = 8
ACT_COST_PER_ELEM = 8
ELEMWISE_COST_PER_ELEM = 1


def conv3x3_macs(n: int, cin: int, cout: int, hout: int, wout: int) -> int:
    return n * hout * wout * cin * cout * 9


def conv_patchify2_macs(n: int, cin: int, cout: int, hout: int, wout: int) -> int:
    return n * hout * wout * cin * cout * 4


def linear_macs(rows: int, din: int, dout: int) -> int:
    return rows * din * dout


def norm_cost(numel: int) -> int:
    return NORM_COST_PER_ELEM * numel


def act_cost(numel: int) -> int:
    return ACT_COST_PER_ELEM * numel


def elemwise_cost(numel: int, nops: int = 1) -> int:
    return ELEMWISE_COST_PER_ELEM * numel * nops


def winograd_conv3x3_macs(n: int, cin: int, cout: int, hout: int, wout: int) -> int:
    """Multiplication count of F(2x2,3x3): 16 products per 2x2 output tile per
    channel pair, with odd extents rounded up to whole tiles."""
    th = (hout + 1) // 2
    tw = (wout + 1) // 2
    return n * th * tw * 16 * cin * cout
