"""
Numerics - dense float64 tensors with tape-based reverse-mode autodiff

Every primitive computes its numpy result, checks it is finite and records
itself (inputs, output, local gradient rule) on the active Tape. backward()
replays the tape in reverse recording order, which is a reverse topological
order because primitives can only consume tensors that already exist.
"""

import threading
from dataclasses import dataclass, field

import numpy as np

from error_handler import ErrorCategory, SGRError, non_finite_error, shape_error

DTYPE = np.float64
CHECKPOINT_MAGIC = "SGR-CKPT-1"


class Tensor:
    """
    A float64 array that may take part in autodiff

    Args:
        data: Array-like values (copied to float64)
        name (str): Parameter name, None for intermediates
        requires_grad (bool): True for parameters and anything computed from them
    """

    __slots__ = ("data", "name", "requires_grad")

    def __init__(self, data, name=None, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise SGRError("item() needs a single-element tensor", ErrorCategory.SHAPE_MISMATCH,
                           shape=self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape}>"

    # Operator sugar for the common binary primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data):
    """Wrap data as a tensor that never receives gradient"""
    return data if isinstance(data, Tensor) else Tensor(data)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: Tensor
    backward: object


class Tape:
    """
    Ordered record of the primitives executed while the tape is active

    Use as a context manager; tapes nest per thread, so concurrent workers
    each own their tape.
    """

    def __init__(self):
        self.entries = []
        self._outputs = set()

    def record(self, op, inputs, output, backward):
        self.entries.append(TapeEntry(op, inputs, output, backward))
        self._outputs.add(id(output))

    def produced(self, tensor):
        return id(tensor) in self._outputs

    def __len__(self):
        return len(self.entries)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


_local = threading.local()


def _tape_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape():
    """The innermost active tape of this thread, or None"""
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(op, inputs, out, backward):
    if not np.all(np.isfinite(out)):
        raise non_finite_error(op)
    requires_grad = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=requires_grad)
    tape = active_tape()
    if tape is not None and requires_grad:
        tape.record(op, inputs, result, backward)
    return result


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back to the operand shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise shape_error(op, a.shape, b.shape)


# ── forward primitives ───────────────────────────────────────────────

def add(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape("add", a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, backward)


def sub(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape("sub", a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _record("sub", (a, b), out, backward)


def mul(a, b):
    """Elementwise product with broadcasting"""
    a, b = constant(a), constant(b)
    _broadcast_shape("mul", a, b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), out, backward)


def scale(x, factor):
    x = constant(x)
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _record("scale", (x,), x.data * factor, backward)


def matmul(a, b):
    """
    Matrix product a @ b

    a may have any rank >= 1 (leading axes are batch axes); b must be a
    matrix (k, n) or a vector (k,).
    """
    a, b = constant(a), constant(b)
    if b.data.ndim not in (1, 2) or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise shape_error("matmul", a.shape, b.shape)
    A, B = a.data, b.data
    out = A @ B

    def backward(g):
        Bm = B if B.ndim == 2 else B[:, None]
        gm = g if B.ndim == 2 else g[..., None]
        if A.ndim == 1:
            Am, gm = A[None, :], gm[None, ...]
        else:
            Am = A
        ga = (gm @ Bm.T).reshape(A.shape)
        gb = (Am.reshape(-1, Bm.shape[0]).T @ gm.reshape(-1, Bm.shape[1])).reshape(B.shape)
        return ga, gb

    return _record("matmul", (a, b), out, backward)


def transpose(x):
    x = constant(x)
    if x.data.ndim != 2:
        raise shape_error("transpose", x.shape)

    def backward(g):
        return (g.T,)

    return _record("transpose", (x,), x.data.T, backward)


def reshape(x, shape):
    x = constant(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise shape_error("reshape", x.shape, shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _record("reshape", (x,), out, backward)


def concat(tensors, axis=-1):
    tensors = [constant(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise shape_error("concat", *[t.shape for t in tensors])
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", tuple(tensors), out, backward)


def stack(tensors):
    """Stack equally shaped tensors along a new leading axis"""
    tensors = [constant(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise shape_error("stack", *[t.shape for t in tensors])
    out = np.stack([t.data for t in tensors], axis=0)

    def backward(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _record("stack", tuple(tensors), out, backward)


def narrow(x, start, stop):
    """Slice [start, stop) of the last axis"""
    x = constant(x)
    if not 0 <= start < stop <= x.shape[-1]:
        raise shape_error("narrow", x.shape, (start, stop))

    def backward(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        full[..., start:stop] = g
        return (full,)

    return _record("narrow", (x,), x.data[..., start:stop], backward)


def take_rows(x, index):
    """
    Gather rows of a matrix

    An int index returns one row (vector); a sequence returns a matrix.
    Repeated indices accumulate gradient.
    """
    x = constant(x)
    idx = np.asarray(index, dtype=np.int64)
    if x.data.ndim < 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise shape_error("take_rows", x.shape, idx.shape)
    out = x.data[idx]

    def backward(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _record("take_rows", (x,), out, backward)


def embedding(table, token_ids):
    """Embedding lookup: rows of table for each token id"""
    table = constant(table)
    if table.data.ndim != 2:
        raise shape_error("embedding", table.shape)
    return take_rows(table, list(token_ids))


def sum_all(x):
    x = constant(x)

    def backward(g):
        return (np.full(x.shape, float(g), dtype=DTYPE),)

    return _record("sum", (x,), np.asarray(x.data.sum()), backward)


def sigmoid(x):
    x = constant(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (x,), out, backward)


def tanh(x):
    x = constant(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", (x,), out, backward)


def leaky_relu(x, slope=0.2):
    x = constant(x)
    out = np.where(x.data > 0, x.data, slope * x.data)

    def backward(g):
        return (g * np.where(x.data > 0, 1.0, slope),)

    return _record("leaky_relu", (x,), out, backward)


def elu(x, alpha=1.0):
    x = constant(x)
    neg = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(x.data > 0, x.data, alpha * neg)

    def backward(g):
        return (g * np.where(x.data > 0, 1.0, alpha * (neg + 1.0)),)

    return _record("elu", (x,), out, backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """tanh approximation of GELU"""
    x = constant(x)
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _record("gelu", (x,), out, backward)


def masked_softmax(x, mask=None):
    """
    Softmax over the last axis with an additive mask

    mask holds 0 for allowed slots and -inf for excluded ones; excluded
    slots come out as exactly 0. A row with every slot excluded is an error.
    """
    x = constant(x)
    z = x.data if mask is None else x.data + np.asarray(mask, dtype=DTYPE)
    if mask is not None and z.shape != x.shape:
        raise shape_error("masked_softmax", x.shape, np.shape(mask))
    row_max = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise SGRError("softmax row has no unmasked slot", ErrorCategory.CONTRACT,
                       op="masked_softmax")
    e = np.exp(z - row_max)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("masked_softmax", (x,), out, backward)


def softmax(x):
    return masked_softmax(x, None)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis, then scale by gamma and shift by beta"""
    x, gamma, beta = constant(x), constant(gamma), constant(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise shape_error("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", (x, gamma, beta), out, backward)


def binary_cross_entropy(probs, targets):
    """
    Summed binary cross-entropy of probabilities against 0/1 targets

    Only the log of the probability assigned to the target is taken, so a
    probability of exactly 1 on the target costs exactly 0.
    """
    probs = constant(probs)
    y = np.asarray(targets, dtype=DTYPE)
    if y.shape != probs.shape:
        raise shape_error("binary_cross_entropy", probs.shape, y.shape)
    p = probs.data
    on_target = np.where(y > 0.5, p, 1.0 - p)
    with np.errstate(divide="ignore"):
        out = np.asarray(-np.log(on_target).sum())

    def backward(g):
        with np.errstate(divide="ignore"):
            local = np.where(y > 0.5, -1.0 / p, 1.0 / (1.0 - p))
        return (g * local,)

    return _record("binary_cross_entropy", (probs,), out, backward)


def cross_entropy(probs, rows, targets):
    """
    Summed categorical cross-entropy -log probs[row, target]

    Args:
        probs (Tensor): (n, k) rows of probabilities
        rows (list): Row indices that are supervised
        targets (list): Target column for each supervised row
    """
    probs = constant(probs)
    rows = np.asarray(rows, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if probs.data.ndim != 2 or rows.shape != targets.shape:
        raise shape_error("cross_entropy", probs.shape, rows.shape, targets.shape)
    if rows.size and (targets.min() < 0 or targets.max() >= probs.shape[1]
                      or rows.min() < 0 or rows.max() >= probs.shape[0]):
        raise shape_error("cross_entropy", probs.shape, (int(rows.max()), int(targets.max())))
    picked = probs.data[rows, targets]
    with np.errstate(divide="ignore"):
        out = np.asarray(-np.log(picked).sum())

    def backward(g):
        full = np.zeros(probs.shape, dtype=DTYPE)
        np.add.at(full, (rows, targets), -1.0 / picked)
        return (g * full,)

    return _record("cross_entropy", (probs,), out, backward)


def binary_cross_entropy_with_logits(logits, targets):
    """
    Summed binary cross-entropy of sigmoid(logits) against 0/1 targets

    Uses max(x, 0) - x*y + log1p(exp(-|x|)), finite for any finite logit.
    """
    logits = constant(logits)
    y = np.asarray(targets, dtype=DTYPE)
    if y.shape != logits.shape:
        raise shape_error("binary_cross_entropy_with_logits", logits.shape, y.shape)
    x = logits.data
    e = np.exp(-np.abs(x))
    out = np.asarray((np.maximum(x, 0.0) - x * y + np.log1p(e)).sum())

    def backward(g):
        p = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * (p - y),)

    return _record("binary_cross_entropy_with_logits", (logits,), out, backward)


def cross_entropy_with_logits(logits, rows, targets):
    """
    Summed categorical cross-entropy of row-softmaxed logits

    Same row/target selection as cross_entropy, computed as
    logsumexp(row) - logits[row, target].
    """
    logits = constant(logits)
    rows = np.asarray(rows, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or rows.shape != targets.shape:
        raise shape_error("cross_entropy_with_logits", logits.shape, rows.shape, targets.shape)
    if rows.size and (targets.min() < 0 or targets.max() >= logits.shape[1]
                      or rows.min() < 0 or rows.max() >= logits.shape[0]):
        raise shape_error("cross_entropy_with_logits", logits.shape, (int(rows.max()), int(targets.max())))
    z = logits.data
    row_max = z.max(axis=-1, keepdims=True)
    shifted = z - row_max
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    out = np.asarray(-log_probs[rows, targets].sum())

    def backward(g):
        probs = np.exp(log_probs)
        full = np.zeros(logits.shape, dtype=DTYPE)
        np.add.at(full, rows, probs[rows])
        np.add.at(full, (rows, targets), -1.0)
        return (g * full,)

    return _record("cross_entropy_with_logits", (logits,), out, backward)


# ── reverse mode ─────────────────────────────────────────────────────

def backward(tape, loss):
    """
    Reverse-mode gradient of a scalar loss

    Args:
        tape (Tape): The tape the loss was computed on
        loss (Tensor): Scalar output of a recorded primitive

    Returns:
        dict: Parameter name -> gradient array, for every named leaf that
        received gradient
    """
    if loss.size != 1:
        raise SGRError("loss must be a scalar", ErrorCategory.GRADIENT, shape=loss.shape)
    if not tape.produced(loss):
        raise SGRError("loss tensor is not on this tape", ErrorCategory.GRADIENT)

    grads = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves = {}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for tensor, local in zip(entry.inputs, entry.backward(g)):
            if local is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + local
            else:
                grads[key] = local
            if not tape.produced(tensor):
                leaves[key] = tensor

    result = {}
    for key, tensor in leaves.items():
        name = tensor.name if tensor.name is not None else f"<leaf {key}>"
        result[name] = grads[key]
    return result


# ── parameters and checkpoints ───────────────────────────────────────

class Parameters:
    """
    Ordered collection of named trainable tensors
    """

    def __init__(self):
        self._tensors = {}

    def add(self, name, data):
        if name in self._tensors:
            raise SGRError("duplicate parameter name", ErrorCategory.CONTRACT, name=name)
        tensor = Tensor(np.array(data, dtype=DTYPE), name=name, requires_grad=True)
        self._tensors[name] = tensor
        return tensor

    def uniform(self, name, shape, rng, fan_in=None):
        """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization"""
        fan_in = fan_in if fan_in is not None else shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape, dtype=DTYPE))

    def ones(self, name, shape):
        return self.add(name, np.ones(shape, dtype=DTYPE))

    def __getitem__(self, name):
        try:
            return self._tensors[name]
        except KeyError:
            raise SGRError("unknown parameter", ErrorCategory.MISSING_FIELD, name=name)

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors)

    def num_values(self):
        return int(sum(t.size for t in self._tensors.values()))

    def snapshot(self):
        """Copy of every parameter array"""
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def restore(self, snapshot):
        for name, array in snapshot.items():
            self[name].data = np.array(array, dtype=DTYPE)


def save_checkpoint(path, params, meta=None):
    """
    Write parameters as a versioned text manifest

    Layout: magic line, one "meta<TAB>json" line, then one line per tensor
    "tensor<TAB>name<TAB>d1,d2<TAB>v1 v2 ..." with shortest round-trip floats.
    """
    import json

    with open(path, "w", encoding="utf-8") as f:
        f.write(CHECKPOINT_MAGIC + "\n")
        f.write("meta\t" + json.dumps(meta or {}, sort_keys=True) + "\n")
        for name, tensor in params.items():
            dims = ",".join(str(d) for d in tensor.shape)
            values = " ".join(repr(float(v)) for v in tensor.data.reshape(-1))
            f.write(f"tensor\t{name}\t{dims}\t{values}\n")


def load_checkpoint(path):
    """
    Read a checkpoint written by save_checkpoint

    Returns:
        tuple: (Parameters, meta dict)
    """
    import json

    params = Parameters()
    meta = {}
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header != CHECKPOINT_MAGIC:
            raise SGRError("not an SGR checkpoint", ErrorCategory.MALFORMED_INPUT,
                           path=path, header=header[:20])
        for line_no, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if parts[0] == "meta" and len(parts) == 2:
                meta = json.loads(parts[1])
            elif parts[0] == "tensor" and len(parts) == 4:
                shape = tuple(int(d) for d in parts[2].split(",") if d)
                values = np.array([float(v) for v in parts[3].split()], dtype=DTYPE)
                if values.size != int(np.prod(shape)):
                    raise SGRError("tensor size does not match its shape", ErrorCategory.MALFORMED_INPUT,
                                   path=path, line=line_no, name=parts[1])
                params.add(parts[1], values.reshape(shape))
            else:
                raise SGRError("malformed checkpoint line", ErrorCategory.MALFORMED_INPUT,
                               path=path, line=line_no)
    return params, meta


# ── finite-difference gradient check ─────────────────────────────────

@dataclass
class GradCheckReport:
    """Per-parameter max relative error between autodiff and central differences"""
    errors: dict = field(default_factory=dict)
    checked_entries: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return all(err < self.tolerance for err in self.errors.values())

    def failures(self):
        return {name: err for name, err in self.errors.items() if err >= self.tolerance}


def relative_error(analytic, numeric, floor=1e-4):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients absolute"""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(model_fn, params, tolerance=1e-4, eps=1e-5, max_entries=None, seed=0):
    """
    Compare autodiff gradients against central finite differences

    Args:
        model_fn (callable): params -> scalar loss Tensor, deterministic
        params (Parameters): Parameters to check (perturbed in place, restored after)
        tolerance (float): Pass threshold on the relative error
        eps (float): Finite-difference step
        max_entries (int): Entries sampled per parameter; None checks all
        seed (int): Sampling seed

    Returns:
        GradCheckReport: Per-parameter max relative error
    """
    with Tape() as tape:
        loss = model_fn(params)
    reference = loss.item()
    grads = backward(tape, loss)

    if model_fn(params).item() != reference:
        raise SGRError("model_fn is not deterministic: two forward passes disagree",
                       ErrorCategory.GRADIENT)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, tensor in params.items():
        analytic = grads.get(name, np.zeros(tensor.shape)).reshape(-1)
        if max_entries is not None and tensor.size > max_entries:
            positions = np.sort(rng.choice(tensor.size, size=max_entries, replace=False))
        else:
            positions = np.arange(tensor.size)
        worst = 0.0
        for pos in positions:
            index = np.unravel_index(pos, tensor.shape)
            original = tensor.data[index]
            tensor.data[index] = original + eps
            plus = model_fn(params).item()
            tensor.data[index] = original - eps
            minus = model_fn(params).item()
            tensor.data[index] = original
            numeric = (plus - minus) / (2 * eps)
            worst = max(worst, relative_error(analytic[pos], numeric))
        report.errors[name] = worst
        report.checked_entries[name] = int(len(positions))
    return report
