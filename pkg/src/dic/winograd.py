"""Winograd F(2x2,3x3) fast convolution and its multiplication accounting.

A 3x3 stride-1 convolution computed directly needs 9 multiplications per
output element.  F(2x2,3x3) produces each 2x2 output tile from a 4x4 input
tile with 16 elementwise products in a transformed domain, i.e. 16/36 = 4/9
of the multiplications (a 5/9 saving).  The transform matrices contain only
0, +-1 and +-1/2, so the transforms themselves cost additions and shifts,
not multiplications; `mult_count` therefore charges the elementwise-product
stage only.

This path is inference-only: training always runs the direct convolution.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .engine import Tensor, conv3x3_direct
from .errors import ShapeError

# Filter transform G (4x3):  U = G g G^T
G = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.5, 0.5, 0.5],
        [0.5, -0.5, 0.5],
        [0.0, 0.0, 1.0],
    ]
)

# Input transform B^T (4x4):  V = B^T d B
BT = np.array(
    [
        [1.0, 0.0, -1.0, 0.0],
        [0.0, 1.0, 1.0, 0.0],
        [0.0, -1.0, 1.0, 0.0],
        [0.0, 1.0, 0.0, -1.0],
    ]
)

# Output transform A^T (2x4):  Y = A^T (U * V) A
AT = np.array(
    [
        [1.0, 1.0, 1.0, 0.0],
        [0.0, 1.0, -1.0, -1.0],
    ]
)


@dataclass(frozen=True)
class MultCount:
    """Multiplication counts for one stride-1 3x3 conv layer."""

    direct_mults: int
    winograd_mults: int

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.winograd_mults, self.direct_mults)

    @property
    def saving(self) -> Fraction:
        return 1 - self.ratio


def winograd_mult_count(h: int, w: int, cin: int, cout: int) -> MultCount:
    """Count multiplications for an HxW stride-1 3x3 conv layer, direct vs
    F(2x2,3x3).  Odd extents tile with padding, so their winograd count
    includes partially-used tiles; even extents give a ratio of exactly 4/9.
    """
    direct = h * w * cin * cout * 9
    tiles = ((h + 1) // 2) * ((w + 1) // 2)
    wino = tiles * 16 * cin * cout
    return MultCount(direct_mults=direct, winograd_mults=wino)


def transform_filter(weight: np.ndarray) -> np.ndarray:
    """Precompute U = G g G^T for every (cout, cin) pair.

    Returns [16, Cout, Cin] in the weight's dtype, laid out so each of the 16
    transform points is a contiguous GEMM operand.  Cache the result across
    forwards of a frozen layer.
    """
    wd = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    cout, cin = wd.shape[:2]
    # One transpose makes every tap a contiguous [O, C] plane; the transform
    # rows of G are [g0, (g0+g1+g2)/2, (g0-g1+g2)/2, g2], all adds and halves.
    wp = np.ascontiguousarray(wd.transpose(2, 3, 0, 1))  # [3, 3, O, C]
    u = np.empty((16, cout, cin), dtype=wd.dtype)
    t = np.empty((4, 3, cout, cin), dtype=wd.dtype)
    for k in range(3):
        w0, w1, w2 = wp[0, k], wp[1, k], wp[2, k]
        s = 0.5 * (w0 + w2)
        t[0, k] = w0
        t[1, k] = s + 0.5 * w1
        t[2, k] = s - 0.5 * w1
        t[3, k] = w2
    for i in range(4):
        c0, c1, c2 = t[i, 0], t[i, 1], t[i, 2]
        sc = 0.5 * (c0 + c2)
        u[4 * i + 0] = c0
        u[4 * i + 1] = sc + 0.5 * c1
        u[4 * i + 2] = sc - 0.5 * c1
        u[4 * i + 3] = c2
    return u


def winograd_conv3x3(
    x: Tensor | np.ndarray,
    weight: Tensor | np.ndarray,
    bias: Tensor | np.ndarray | None = None,
    filter_transform: np.ndarray | None = None,
) -> Tensor:
    """Stride-1, padding-1 3x3 convolution via F(2x2,3x3).

    Numerically equivalent to `conv3x3_direct` up to transform rounding; odd
    extents are handled by padding the tile grid and cropping the result.
    Forward-only: the output never joins an autodiff tape.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    wd = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    bd = None if bias is None else (bias.data if isinstance(bias, Tensor) else np.asarray(bias))

    if xd.ndim != 4:
        raise ShapeError("winograd_conv3x3", f"input must be NCHW, got {xd.shape}")
    if wd.ndim != 4 or wd.shape[2:] != (3, 3):
        raise ShapeError("winograd_conv3x3", f"weight must be [Cout,Cin,3,3], got {wd.shape}")
    n, cin, h, w = xd.shape
    cout, cin_w = wd.shape[:2]
    if cin != cin_w:
        raise ShapeError("winograd_conv3x3", f"input channels {cin} != weight channels {cin_w}")
    if h < 2 or w < 2:
        raise ShapeError("winograd_conv3x3", f"extents must be >= 2, got {h}x{w}")

    th, tw = (h + 1) // 2, (w + 1) // 2
    # Pad: 1 halo on top/left, 1 halo plus tile-grid rounding on bottom/right.
    xpad = np.pad(xd, ((0, 0), (0, 0), (1, 2 * th + 1 - h), (1, 2 * tw + 1 - w)))

    # Input transform V = B^T d B.  B's entries are 0/+-1, so both passes are
    # plain adds; tiles are never materialized.  Channel goes out front once
    # so every combined slice lands contiguous in the GEMM operand layout.
    xcp = np.ascontiguousarray(xpad.transpose(1, 0, 2, 3))  # [C, N, Hp, Wp]
    r = [xcp[:, :, i : i + 2 * th : 2, :] for i in range(4)]
    rows = (r[0] - r[2], r[1] + r[2], r[2] - r[1], r[1] - r[3])
    nt = n * th * tw
    v = np.empty((16, cin, nt), dtype=xd.dtype)
    for k in range(4):
        ck = [rows[k][:, :, :, j : j + 2 * tw : 2] for j in range(4)]
        np.subtract(ck[0], ck[2], out=v[4 * k + 0].reshape(cin, n, th, tw))
        np.add(ck[1], ck[2], out=v[4 * k + 1].reshape(cin, n, th, tw))
        np.subtract(ck[2], ck[1], out=v[4 * k + 2].reshape(cin, n, th, tw))
        np.subtract(ck[1], ck[3], out=v[4 * k + 3].reshape(cin, n, th, tw))

    u = filter_transform if filter_transform is not None else transform_filter(wd)
    if u.shape != (16, cout, cin):
        raise ShapeError(
            "winograd_conv3x3",
            f"filter transform shape {u.shape} != (16, {cout}, {cin})",
        )
    u = u.astype(xd.dtype, copy=False)

    # Elementwise-product stage as 16 GEMMs: M[p] = U[p] @ V[p].
    m = np.empty((16, cout, nt), dtype=xd.dtype)
    for p in range(16):
        np.matmul(u[p], v[p], out=m[p])
    m = m.reshape(4, 4, cout, n, th, tw)

    # Output transform Y = A^T M A, again all adds.
    b0 = m[0] + m[1] + m[2]
    b1 = m[1] - m[2] - m[3]
    y00 = b0[0] + b0[1] + b0[2]
    y01 = b0[1] - b0[2] - b0[3]
    y10 = b1[0] + b1[1] + b1[2]
    y11 = b1[1] - b1[2] - b1[3]

    y = np.empty((cout, n, 2 * th, 2 * tw), dtype=xd.dtype)
    y[:, :, 0::2, 0::2] = y00
    y[:, :, 0::2, 1::2] = y01
    y[:, :, 1::2, 0::2] = y10
    y[:, :, 1::2, 1::2] = y11
    y = y.transpose(1, 0, 2, 3)[:, :, :h, :w]
    if bd is not None:
        y = y + bd[None, :, None, None]
    return Tensor(np.ascontiguousarray(y))


@dataclass
class BenchRow:
    n: int
    cin: int
    cout: int
    h: int
    w: int
    direct_ms: float
    winograd_ms: float

    @property
    def speedup(self) -> float:
        return self.direct_ms / self.winograd_ms if self.winograd_ms > 0 else float("inf")


def bench_conv(
    shapes: list[tuple[int, int, int, int, int]],
    dtype=np.float32,
    repeats: int = 3,
    seed: int = 0,
) -> list[BenchRow]:
    """Time direct vs Winograd forward for (n, cin, cout, h, w) shapes.

    Reports full wall time, so transform overhead is included even though it
    is excluded from the multiplication counts.
    """
    rows = []
    rng = np.random.default_rng(seed)
    for n, cin, cout, h, w in shapes:
        x = Tensor(rng.standard_normal((n, cin, h, w)).astype(dtype))
        wt = Tensor((rng.standard_normal((cout, cin, 3, 3)) / np.sqrt(9 * cin)).astype(dtype))
        conv3x3_direct(x, wt)  # warm both paths before timing
        winograd_conv3x3(x, wt)
        direct = min(_timed(conv3x3_direct, x, wt) for _ in range(repeats))
        wino = min(_timed(winograd_conv3x3, x, wt) for _ in range(repeats))
        rows.append(BenchRow(n, cin, cout, h, w, direct * 1e3, wino * 1e3))
    return rows


def format_bench_table(rows: list[BenchRow]) -> str:
    lines = [
        f"{'shape (NxCinxHxW -> Cout)':<30} {'direct ms':>10} {'winograd ms':>12} "
        f"{'speedup':>8} {'mult ratio':>11}"
    ]
    for r in rows:
        ratio = winograd_mult_count(r.h, r.w, r.cin, r.cout).ratio
        shape = f"{r.n}x{r.cin}x{r.h}x{r.w} -> {r.cout}"
        lines.append(
            f"{shape:<30} {r.direct_ms:>10.2f} {r.winograd_ms:>12.2f} "
            f"{r.speedup:>8.2f} {str(ratio):>11}"
        )
    return "\n".join(lines)


def _timed(fn, *args) -> float:
    t0 = time.perf_counter()
    fn(*args)
    return time.perf_counter() - t0
