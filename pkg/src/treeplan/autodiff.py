"""Dense tensors with tape-based reverse-mode differentiation.

The op set is deliberately small: exactly what the networks in this
package need (affine maps, attention with masked softmax, layer norm,
embeddings, reductions and the two loss primitives). Arrays are plain
numpy; a ComputationTape records one entry per primitive op, and
``Tape.gradient`` replays the records once, in reverse order, so two
replays of the same tape are bit-identical.

Float64 is the default dtype and what the test suite runs at; float32
is supported for training throughput. Binary ops require both operands
to share a dtype so silent promotion cannot mix precisions.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import MaskError, ShapeError, TrainError, UsageError

_FLOAT_DTYPES = (np.float32, np.float64)

# When enabled, every op asserts its output is finite. Cheap at the
# array sizes this package uses; the test suite switches it on.
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


_node_ids = itertools.count()


class Tensor:
    """Immutable value wrapper around a numpy array.

    The only sanctioned mutation is the optimizer writing new parameter
    values between forward passes; everything produced by an op is
    treated as frozen.
    """

    __slots__ = ("data", "node_id")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.node_id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


@dataclass
class _Record:
    out_id: int
    # (input node id, vjp) pairs; each vjp maps the output adjoint to
    # that input's adjoint contribution.
    inputs: list


@dataclass
class Tape:
    """Ordered record of primitive ops, enough to replay adjoints.

    Single-owner: create one per forward pass, never share across
    threads. ``gradient`` visits each record exactly once in reverse
    record order, so accumulation order (and therefore bit pattern) is
    fixed.
    """

    records: list = field(default_factory=list)

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack.pop()
        return False

    def gradient(self, target: Tensor, sources) -> list:
        """Adjoints of ``target`` (a scalar) w.r.t. each source tensor."""
        if target.data.size != 1:
            raise ShapeError(
                f"gradient target must be a scalar, got shape {target.data.shape}"
            )
        grads = {target.node_id: np.ones_like(target.data)}
        for rec in reversed(self.records):
            g = grads.pop(rec.out_id, None)
            if g is None:
                continue
            for in_id, vjp in rec.inputs:
                contrib = vjp(g)
                prev = grads.get(in_id)
                grads[in_id] = contrib if prev is None else prev + contrib
        return [
            grads.get(s.node_id, np.zeros_like(s.data)) for s in sources
        ]


_tape_stack: list = []


def _record(out: Tensor, inputs) -> None:
    if _tape_stack:
        _tape_stack[-1].records.append(_Record(out.node_id, inputs))


def _finish(arr: np.ndarray, inputs) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise TrainError("non-finite value produced by a forward op")
    out = Tensor(arr)
    _record(out, inputs)
    return out


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(
            f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}"
        )


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}")
    ash, bsh = a.shape, b.shape
    return _finish(out, [
        (a.node_id, lambda g: _unbroadcast(g, ash)),
        (b.node_id, lambda g: _unbroadcast(g, bsh)),
    ])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}")
    ash, bsh = a.shape, b.shape
    return _finish(out, [
        (a.node_id, lambda g: _unbroadcast(g, ash)),
        (b.node_id, lambda g: _unbroadcast(-g, bsh)),
    ])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}")
    ad, bd = a.data, b.data
    return _finish(out, [
        (a.node_id, lambda g: _unbroadcast(g * bd, ad.shape)),
        (b.node_id, lambda g: _unbroadcast(g * ad, bd.shape)),
    ])


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _finish(a.data * s, [(a.node_id, lambda g: g * s)])


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _finish(out, [(a.node_id, lambda g: -g * out * out)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with numpy batch broadcasting."""
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul requires ndim >= 2, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: cannot broadcast {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def d_a(g):
        return _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)

    def d_b(g):
        return _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)

    return _finish(out, [(a.node_id, d_a), (b.node_id, d_b)])


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _finish(out, [(a.node_id, lambda g: np.transpose(g, inverse))])


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {old} incompatible with {shape}")
    return _finish(out, [(a.node_id, lambda g: g.reshape(old))])


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t, "concat")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            "concat: incompatible shapes "
            + ", ".join(str(t.shape) for t in tensors)
        )
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    inputs = []
    for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
        def vjp(g, start=int(start), stop=int(stop)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            return g[tuple(index)]
        inputs.append((t.node_id, vjp))
    return _finish(out, inputs)


def gather(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; the embedding primitive."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"gather: id out of range for table with {table.shape[0]} rows"
        )
    out = table.data[ids]
    tshape = table.data.shape
    tdtype = table.data.dtype

    def vjp(g):
        acc = np.zeros(tshape, dtype=tdtype)
        np.add.at(acc, ids, g)
        return acc

    return _finish(out, [(table.node_id, vjp)])


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Smooth tanh-form gelu; smoothness keeps finite differences honest."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner)

    return _finish(out, [(a.node_id, vjp)])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    if x.ndim < 2:
        raise ShapeError(f"layer_norm input must have ndim >= 2, got {x.shape}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got "
            f"{gain.shape} and {bias.shape}"
        )
    _check_same_dtype(x, gain, "layer_norm")
    _check_same_dtype(x, bias, "layer_norm")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def d_x(g):
        dxhat = g * gd
        dvar = (dxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
        dmu = (-inv) * dxhat.sum(axis=-1, keepdims=True) \
            + dvar * (-2.0 / d) * xc.sum(axis=-1, keepdims=True)
        return dxhat * inv + dvar * (2.0 / d) * xc + dmu / d

    def d_gain(g):
        return _unbroadcast(g * xhat, (d,))

    def d_bias(g):
        return _unbroadcast(g, (d,))

    return _finish(out, [
        (x.node_id, d_x), (gain.node_id, d_gain), (bias.node_id, d_bias),
    ])


def masked_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask``.

    ``mask`` is a boolean array broadcastable to the logits; disallowed
    entries come out exactly 0.0 and receive exactly zero gradient. Max
    subtraction is over allowed entries only. A row with no allowed
    entry is a structural error.
    """
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        raise MaskError(f"mask must be boolean, got dtype {mask.dtype}")
    if not np.all(mask.any(axis=-1)):
        raise MaskError("masked_softmax: fully masked row")
    x = np.where(mask, logits.data, -np.inf)
    x = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=-1, keepdims=True)
    lshape = logits.data.shape

    def vjp(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return _unbroadcast(p * (g - dot), lshape)

    return _finish(p, [(logits.node_id, vjp)])


def log_softmax(logits: Tensor) -> Tensor:
    x = logits.data
    shifted = x - np.max(x, axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def vjp(g):
        return g - p * g.sum(axis=-1, keepdims=True)

    return _finish(out, [(logits.node_id, vjp)])


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    ashape = a.data.shape

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, ashape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, ashape).copy()

    return _finish(np.asarray(out), [(a.node_id, vjp)])


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _argmax_onehot(x, axis, largest):
    idx = (np.argmax if largest else np.argmin)(x, axis=axis, keepdims=True)
    oh = np.zeros_like(x)
    np.put_along_axis(oh, idx, 1.0, axis=axis)
    return oh


def reduce_max(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    out = a.data.max(axis=axis, keepdims=keepdims)
    oh = _argmax_onehot(a.data, axis, largest=True)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return oh * g

    return _finish(np.asarray(out), [(a.node_id, vjp)])


def reduce_min(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    out = a.data.min(axis=axis, keepdims=keepdims)
    oh = _argmax_onehot(a.data, axis, largest=False)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return oh * g

    return _finish(np.asarray(out), [(a.node_id, vjp)])


# ---------------------------------------------------------------------------
# losses


def mse(pred: Tensor, target: Tensor, weight: Tensor = None,
        normalizer: float = None) -> Tensor:
    """Mean of squared error, optionally weighted elementwise.

    ``normalizer`` overrides the default division by the element count,
    so callers can keep the denominator independent of mask content.
    """
    diff = sub(pred, target)
    sq = mul(diff, diff)
    if weight is not None:
        sq = mul(sq, weight)
    total = reduce_sum(sq)
    n = pred.data.size if normalizer is None else normalizer
    return scale(total, 1.0 / n)


def cross_entropy(logits: Tensor, target_probs: Tensor, weight: Tensor = None,
                  normalizer: float = None) -> Tensor:
    """Mean cross-entropy between target distributions and logits."""
    lp = log_softmax(logits)
    contrib = mul(lp, target_probs)
    if weight is not None:
        contrib = mul(contrib, weight)
    total = reduce_sum(contrib)
    rows = logits.data.size // logits.data.shape[-1]
    n = rows if normalizer is None else normalizer
    return scale(total, -1.0 / n)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be a pure function
    of its argument (plus closed-over constants). Error per coordinate
    is |analytic - cd| / (|analytic| + |cd| + 1e-8); the max over all
    coordinates is returned. Use float64 inputs.
    """
    with Tape() as tape:
        y = f(x)
    if y.data.size != 1:
        raise ShapeError("finite_diff_check expects a scalar-valued function")
    analytic = tape.gradient(y, [x])[0]
    worst = 0.0
    flat = x.data.ravel()
    for i in range(flat.size):
        bumped = x.data.copy().ravel()
        bumped[i] = flat[i] + eps
        fp = f(Tensor(bumped.reshape(x.data.shape))).data.item()
        bumped[i] = flat[i] - eps
        fm = f(Tensor(bumped.reshape(x.data.shape))).data.item()
        cd = (fp - fm) / (2.0 * eps)
        a = analytic.ravel()[i]
        err = abs(a - cd) / (abs(a) + abs(cd) + 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict


def init_adam_state(params: dict) -> AdamState:
    return AdamState(
        step=0,
        m={k: np.zeros_like(t.data) for k, t in params.items()},
        v={k: np.zeros_like(t.data) for k, t in params.items()},
    )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One Adam update, in place on the parameter tensors."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient for parameter '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoint serialization

_CKPT_MAGIC = b"TPCK"
_CKPT_VERSION = 1


def save_checkpoint(path, params: dict, config_hash: str) -> None:
    """Write parameters as (name, shape, float32 little-endian) records.

    Records are sorted by name so the byte layout is a pure function of
    the contents; save(load(path)) reproduces the file bit for bit.
    """
    names = sorted(params)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<H", _CKPT_VERSION))
        hash_bytes = config_hash.encode("utf-8")
        fh.write(struct.pack("<H", len(hash_bytes)))
        fh.write(hash_bytes)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(params[name].data, dtype="<f4")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns ({name: float32 array}, config_hash)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CKPT_MAGIC:
        raise UsageError(f"not a checkpoint file: {path}")
    off = 4
    try:
        (version,) = struct.unpack_from("<H", raw, off); off += 2
        if version != _CKPT_VERSION:
            raise UsageError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack_from("<H", raw, off); off += 2
        config_hash = raw[off:off + hlen].decode("utf-8"); off += hlen
        (count,) = struct.unpack_from("<I", raw, off); off += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off); off += 2
            name = raw[off:off + nlen].decode("utf-8"); off += nlen
            (ndim,) = struct.unpack_from("<B", raw, off); off += 1
            shape = []
            for _ in range(ndim):
                (dim,) = struct.unpack_from("<I", raw, off); off += 4
                shape.append(dim)
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off)
            off += size * 4
            params[name] = arr.reshape(shape).copy()
    except (struct.error, ValueError) as exc:
        raise UsageError(f"truncated checkpoint file: {path}") from exc
    return params, config_hash
