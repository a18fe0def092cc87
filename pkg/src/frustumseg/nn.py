"""Minimal reverse-mode kernels on double-precision dense arrays.

Every operation builds a node in a lightweight tape: the output tensor
keeps a closure that routes upstream gradients to its parents. Calling
``backward()`` on a scalar walks the tape once in reverse topological
order. Parameter gradients accumulate additively until ``zero_grad``.

Kernels: dense (matmul + bias), 3x3 convolution (stride 1 or 2, zero pad
1), pixelwise channel projection, relu, sigmoid, row softmax, scatter-max
from points onto a frustum grid, gather from the grid back to points,
bilinear upsampling (align-corners false), concatenation, elementwise add
and multiply, and scalar helpers. ``grad_check`` verifies any of them
against central finite differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, FormatError, NumericError
from .geometry import FrustumIndex


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward: Optional[Callable[[], None]] = None
        self._parents: Tuple["Tensor", ...] = ()
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Reverse-propagate from this tensor (scalar unless a seed is given)."""
        if seed is None:
            if self.data.size != 1:
                raise DataError("backward() without a seed needs a scalar")
            seed = np.ones_like(self.data)
        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(seed)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def __repr__(self) -> str:
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, grad={'yes' if self.grad is not None else 'no'})"


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _node(data: np.ndarray, parents: Sequence[Tensor],
          backward: Optional[Callable[[], None]]) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Row-wise affine map: (N, Cin) @ (Cin, Cout) + (Cout,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise DataError(f"dense shape mismatch: {x.shape} @ {weight.shape}")
    if bias.data.shape != (weight.data.shape[1],):
        raise DataError(f"dense bias shape {bias.shape} != ({weight.data.shape[1]},)")
    out_data = x.data @ weight.data + bias.data

    def backward():
        g = out.grad
        if x.requires_grad:
            x.accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight.accumulate(x.data.T @ g)
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=0))

    out = _node(out_data, (x, weight, bias), backward)
    return out


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation with a 3x3 kernel, zero padding 1, stride 1 or 2.

    Output spatial size is ceil(H / stride) x ceil(W / stride).
    """
    if stride not in (1, 2):
        raise DataError("conv3x3 stride must be 1 or 2")
    cin, h, w = x.data.shape
    cout = weight.data.shape[0]
    if weight.data.shape != (cout, cin, 3, 3):
        raise DataError(f"conv3x3 weight shape {weight.shape} incompatible with input {x.shape}")
    if bias.data.shape != (cout,):
        raise DataError("conv3x3 bias shape mismatch")
    hout = (h - 1) // stride + 1
    wout = (w - 1) // stride + 1
    padded = np.zeros((cin, h + 2, w + 2), dtype=np.float64)
    padded[:, 1:h + 1, 1:w + 1] = x.data

    out_data = np.empty((cout, hout, wout), dtype=np.float64)
    out_data[:] = bias.data[:, None, None]
    for dy in range(3):
        for dx in range(3):
            patch = padded[:, dy:dy + stride * (hout - 1) + 1:stride,
                           dx:dx + stride * (wout - 1) + 1:stride]
            out_data += np.einsum("oc,chw->ohw", weight.data[:, :, dy, dx], patch)

    def backward():
        g = out.grad
        gpad = np.zeros_like(padded) if x.requires_grad else None
        gw = np.empty_like(weight.data) if weight.requires_grad else None
        for dy in range(3):
            for dx in range(3):
                if gw is not None:
                    patch = padded[:, dy:dy + stride * (hout - 1) + 1:stride,
                                   dx:dx + stride * (wout - 1) + 1:stride]
                    gw[:, :, dy, dx] = np.einsum("ohw,chw->oc", g, patch)
                if gpad is not None:
                    gpad[:, dy:dy + stride * (hout - 1) + 1:stride,
                         dx:dx + stride * (wout - 1) + 1:stride] += np.einsum(
                        "oc,ohw->chw", weight.data[:, :, dy, dx], g)
        if gw is not None:
            weight.accumulate(gw)
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=(1, 2)))
        if gpad is not None:
            x.accumulate(gpad[:, 1:h + 1, 1:w + 1])

    out = _node(out_data, (x, weight, bias), backward)
    return out


def channel_dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Pixelwise linear map over the channel axis of a (Cin, H, W) grid."""
    cin = x.data.shape[0]
    if weight.data.shape[0] != cin:
        raise DataError(f"channel_dense weight {weight.shape} vs input {x.shape}")
    out_data = np.einsum("io,ihw->ohw", weight.data, x.data) + bias.data[:, None, None]

    def backward():
        g = out.grad
        if x.requires_grad:
            x.accumulate(np.einsum("io,ohw->ihw", weight.data, g))
        if weight.requires_grad:
            weight.accumulate(np.einsum("ihw,ohw->io", x.data, g))
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=(1, 2)))

    out = _node(out_data, (x, weight, bias), backward)
    return out


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def backward():
        if x.requires_grad:
            x.accumulate(out.grad * (x.data > 0.0))

    out = _node(out_data, (x,), backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    # Two-branch form keeps exp() off large-magnitude inputs.
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward():
        if x.requires_grad:
            x.accumulate(out.grad * out_data * (1.0 - out_data))

    out = _node(out_data, (x,), backward)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of an (M, C) tensor."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def backward():
        if x.requires_grad:
            g = out.grad
            dot = (g * p).sum(axis=1, keepdims=True)
            x.accumulate(p * (g - dot))

    out = _node(p, (x,), backward)
    return out


def scatter_max(point_feats: Tensor, index: FrustumIndex) -> Tuple[Tensor, np.ndarray]:
    """Per-pixel, per-channel max over member point features.

    Returns the (C, H, W) grid plus the argmax record: the winning point
    index per (channel, pixel), -1 on empty pixels. Ties go to the
    smallest point index; the backward pass routes gradients to winners
    only.
    """
    n, c = point_feats.data.shape
    if n != len(index):
        raise DataError(f"scatter_max: {n} feature rows vs {len(index)} indexed points")
    h, w = index.height, index.width
    grid = np.zeros((c, h, w), dtype=np.float64)
    winners = np.full((c, h, w), -1, dtype=np.int64)
    data = point_feats.data
    for (pv, pu), pts in index.members.items():
        sub = data[pts]                      # (k, C); pts ascend
        am = sub.argmax(axis=0)              # first max -> smallest index
        grid[:, pv, pu] = sub[am, np.arange(c)]
        winners[:, pv, pu] = np.asarray(pts, dtype=np.int64)[am]

    def backward():
        if point_feats.requires_grad:
            g = out.grad
            mask = winners >= 0
            rows = winners[mask]
            chans = np.nonzero(mask)[0]
            gp = np.zeros_like(data)
            np.add.at(gp, (rows, chans), g[mask])
            point_feats.accumulate(gp)

    out = _node(grid, (point_feats,), backward)
    return out, winners


def gather(grid: Tensor, index: FrustumIndex) -> Tensor:
    """Copy each point's pixel feature vector: (C, H, W) -> (N, C)."""
    c = grid.data.shape[0]
    if grid.data.shape[1] != index.height or grid.data.shape[2] != index.width:
        raise DataError(f"gather: grid {grid.shape} vs index {index.height}x{index.width}")
    out_data = grid.data[:, index.v, index.u].T.copy()

    def backward():
        if grid.requires_grad:
            g = out.grad
            gg = np.zeros_like(grid.data)
            np.add.at(gg, (np.arange(c)[:, None], index.v[None, :], index.u[None, :]), g.T)
            grid.accumulate(gg)

    out = _node(out_data, (grid,), backward)
    return out


def _bilinear_axis(src_len: int, dst_len: int):
    pos = (np.arange(dst_len) + 0.5) * (src_len / dst_len) - 0.5
    pos = np.maximum(pos, 0.0)
    i0 = np.minimum(pos.astype(np.int64), src_len - 1)
    i1 = np.minimum(i0 + 1, src_len - 1)
    t = pos - i0
    return i0, i1, t


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear interpolation to (out_h, out_w), align-corners false."""
    c, h, w = x.data.shape
    if out_h < h or out_w < w:
        raise DataError("upsample_bilinear only enlarges")
    y0, y1, ty = _bilinear_axis(h, out_h)
    x0, x1, tx = _bilinear_axis(w, out_w)
    wy0, wy1 = (1.0 - ty)[:, None], ty[:, None]
    wx0, wx1 = (1.0 - tx)[None, :], tx[None, :]
    d = x.data
    out_data = (d[:, y0][:, :, x0] * (wy0 * wx0)
                + d[:, y0][:, :, x1] * (wy0 * wx1)
                + d[:, y1][:, :, x0] * (wy1 * wx0)
                + d[:, y1][:, :, x1] * (wy1 * wx1))

    def backward():
        if x.requires_grad:
            g = out.grad
            gx = np.zeros_like(x.data)
            cc = np.arange(c)[:, None, None]
            yy0 = y0[None, :, None]
            yy1 = y1[None, :, None]
            xx0 = x0[None, None, :]
            xx1 = x1[None, None, :]
            np.add.at(gx, (cc, yy0, xx0), g * (wy0 * wx0))
            np.add.at(gx, (cc, yy0, xx1), g * (wy0 * wx1))
            np.add.at(gx, (cc, yy1, xx0), g * (wy1 * wx0))
            np.add.at(gx, (cc, yy1, xx1), g * (wy1 * wx1))
            x.accumulate(gx)

    out = _node(out_data, (x,), backward)
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        g = out.grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate(g[tuple(sl)])

    out = _node(out_data, tuple(tensors), backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DataError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward():
        if a.requires_grad:
            a.accumulate(out.grad)
        if b.requires_grad:
            b.accumulate(out.grad)

    out = _node(a.data + b.data, (a, b), backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DataError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def backward():
        if a.requires_grad:
            a.accumulate(out.grad * b.data)
        if b.requires_grad:
            b.accumulate(out.grad * a.data)

    out = _node(a.data * b.data, (a, b), backward)
    return out


def scale(x: Tensor, factor: float) -> Tensor:
    def backward():
        if x.requires_grad:
            x.accumulate(out.grad * factor)

    out = _node(x.data * factor, (x,), backward)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum every element into a scalar (loss-head helper)."""
    def backward():
        if x.requires_grad:
            x.accumulate(np.full_like(x.data, float(out.grad)))

    out = _node(np.float64(x.data.sum()), (x,), backward)
    return out


def reshape_to_rows(x: Tensor) -> Tensor:
    """View a (C, H, W) grid as (H*W, C) rows (pixel-major)."""
    c = x.data.shape[0]
    out_data = x.data.reshape(c, -1).T.copy()

    def backward():
        if x.requires_grad:
            x.accumulate(out.grad.T.reshape(x.data.shape))

    out = _node(out_data, (x,), backward)
    return out


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_tensor: Dict[str, float]
    skipped: List[str] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def grad_check(loss_fn: Callable[[], Tensor], tensors: Dict[str, Tensor],
               eps: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` must rebuild the graph and return the scalar loss;
    ``tensors`` maps names to the leaves being checked. Relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). Frozen leaves
    (requires_grad false) are reported as skipped.
    """
    for t in tensors.values():
        t.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    loss.backward()
    analytic = {}
    for name, t in tensors.items():
        if t.requires_grad:
            analytic[name] = (t.grad.copy() if t.grad is not None
                              else np.zeros_like(t.data))

    report = GradCheckReport(max_rel_err=0.0, per_tensor={}, tolerance=tolerance)
    for name, t in tensors.items():
        if not t.requires_grad:
            report.skipped.append(name)
            continue
        worst = 0.0
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(loss_fn().data)
            flat[i] = keep - eps
            lo = float(loss_fn().data)
            flat[i] = keep
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"non-finite loss while probing {name}[{i}]")
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        report.per_tensor[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"FRNK"


def save_checkpoint(params: Dict[str, Tensor], path: str | Path) -> None:
    """Serialize named parameters: magic, then (name, rank, dims, f64 data)."""
    from .scan_io import atomic_write_bytes

    chunks = [_MAGIC]
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        dims = tensor.data.shape
        chunks.append(struct.pack("<I", len(dims)))
        chunks.append(struct.pack(f"<{len(dims)}I", *dims) if dims else b"")
        chunks.append(tensor.data.astype("<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_checkpoint(path: str | Path) -> Dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    out: Dict[str, np.ndarray] = {}
    pos = 4
    try:
        while pos < len(raw):
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos) if rank else ()
            pos += 4 * rank
            count = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
            out[name] = arr.reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return out
