"""
Float64 tensor primitives on top of torch autograd.

Every primitive checks its shapes and raises ShapeError naming itself and
the offending shapes; the reverse-mode graph is torch's own. The
finite-difference checkers are the oracle for every gradient in the lab.
"""
import math
from contextlib import contextmanager

import torch
import torch.nn.functional as F

from errors import ShapeError

DTYPE = torch.float64
LAYER_NORM_EPS = 1e-5
IGNORE_INDEX = -100


def tensor(data, requires_grad=False):
    return torch.tensor(data, dtype=DTYPE, requires_grad=requires_grad)


@contextmanager
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(DTYPE)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def evaluate(build, *args, **kwargs):
    """
    Run a graph-building closure with gradients enabled and float64 as the
    default dtype.
    """
    with float64(), torch.enable_grad():
        return build(*args, **kwargs)


def _shapes(*tensors):
    return ', '.join(str(tuple(t.shape)) for t in tensors)


def _require(condition, op, *tensors):
    if not condition:
        raise ShapeError(f'{op}: incompatible shapes {_shapes(*tensors)}')


def _trailing(a, b):
    """
    b may broadcast over a's leading axes only.
    """
    return a.shape[a.dim() - b.dim():] == b.shape if b.dim() <= a.dim() else False


def matmul(a, b):
    _require(a.dim() >= 1 and b.dim() >= 1 and a.shape[-1] == b.shape[-2 if b.dim() > 1 else -1], 'matmul', a, b)
    return torch.matmul(a, b)


def add(a, b):
    _require(_trailing(a, b) or _trailing(b, a), 'add', a, b)
    return a + b


def multiply(a, b):
    _require(_trailing(a, b) or _trailing(b, a), 'multiply', a, b)
    return a * b


def divide(a, scalar):
    return a / scalar


def transpose(x, dim0=-2, dim1=-1):
    _require(x.dim() >= 2, 'transpose', x)
    return x.transpose(dim0, dim1)


def reshape(x, *shape):
    _require(math.prod(s for s in shape if s != -1) != 0 or x.numel() == 0, 'reshape', x)
    try:
        return x.reshape(*shape)
    except RuntimeError as e:
        raise ShapeError(f'reshape: cannot view {tuple(x.shape)} as {shape}') from e


def concat(tensors, dim=-1):
    first = tensors[0]
    for other in tensors[1:]:
        same = other.dim() == first.dim() and all(
            a == b for i, (a, b) in enumerate(zip(first.shape, other.shape))
            if i != dim % first.dim()
        )
        _require(same, 'concat', first, other)
    return torch.cat(tensors, dim=dim)


def slice(x, dim, start, end):
    _require(0 <= start <= end <= x.shape[dim], 'slice', x)
    return x.narrow(dim, start, end - start)


def embedding(ids, table):
    _require(table.dim() == 2, 'embedding', table)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(f'embedding: ids outside [0, {table.shape[0]}) for table {tuple(table.shape)}')
    return F.embedding(ids, table)


def softmax(x):
    return torch.softmax(x, dim=-1)


def log_softmax(x):
    return torch.log_softmax(x, dim=-1)


def layer_norm(x, weight=None, bias=None, eps=LAYER_NORM_EPS):
    for param in (weight, bias):
        if param is not None:
            _require(param.shape == x.shape[-1:], 'layer_norm', x, param)
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def gelu(x):
    # erf form, not the tanh approximation
    return F.gelu(x)


def tanh(x):
    return torch.tanh(x)


def cross_entropy(logits, targets, ignore_index=IGNORE_INDEX):
    """
    Mean cross-entropy over non-ignored targets.
    """
    _require(logits.shape[:-1] == targets.shape, 'cross_entropy', logits, targets)
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=ignore_index
    )


def dropout(x, rate, train, generator=None):
    """
    Inverted dropout; identity at inference or when rate is 0.
    """
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f'dropout rate must lie in [0, 1), got {rate}')
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def masked_fill(x, mask, value):
    try:
        torch.broadcast_shapes(mask.shape, x.shape)
    except RuntimeError as e:
        raise ShapeError(f'masked_fill: incompatible shapes {_shapes(x, mask)}') from e
    return x.masked_fill(mask, value)


def backward(loss, retain_graph=False):
    """
    Accumulate gradients of a scalar loss into every requires_grad leaf.
    """
    if loss.numel() != 1:
        raise ShapeError(f'backward: loss must be a scalar, got shape {tuple(loss.shape)}')
    loss.backward(retain_graph=retain_graph)


def trace(loss):
    """
    Topologically ordered graph nodes (inputs before outputs) behind `loss`.
    """
    order = []
    visited = set()

    def visit(node):
        if node is None or node in visited:
            return
        visited.add(node)
        for parent, _ in node.next_functions:
            visit(parent)
        order.append(node)

    visit(loss.grad_fn)
    return order


def _relative_error(analytic, numeric):
    scale = torch.maximum(torch.ones_like(analytic), torch.maximum(analytic.abs(), numeric.abs()))
    return float(((analytic - numeric).abs() / scale).max()) if analytic.numel() else 0.0


def finite_difference_check(f, x, h=1e-5):
    """
    Largest relative disagreement between backward's gradient of f at x and
    central differences (f(x+h e_i) - f(x-h e_i)) / 2h.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f'step h must lie in [1e-7, 1e-3], got {h}')

    point = x.detach().clone().to(DTYPE).requires_grad_(True)
    value = f(point)
    (analytic,) = torch.autograd.grad(value, point, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(point)

    numeric = torch.zeros_like(point)
    flat = numeric.view(-1)
    with torch.no_grad():
        base = point.detach().clone()
        probe = base.view(-1)
        for i in range(probe.numel()):
            original = probe[i].item()
            probe[i] = original + h
            upper = float(f(base))
            probe[i] = original - h
            lower = float(f(base))
            probe[i] = original
            flat[i] = (upper - lower) / (2 * h)
    return _relative_error(analytic.detach(), numeric)


def parameter_gradient_check(loss_fn, parameters, h=1e-5, entries_per_tensor=None, generator=None):
    """
    finite_difference_check over a set of named parameters perturbed in place.

    `loss_fn()` rebuilds the scalar loss from the current parameter values.
    With `entries_per_tensor`, only that many randomly chosen entries of each
    tensor are perturbed. Returns {name: max relative error}.
    """
    parameters = dict(parameters)
    for param in parameters.values():
        param.grad = None
    loss = loss_fn()
    backward(loss)

    errors = {}
    with torch.no_grad():
        for name, param in parameters.items():
            grad = param.grad if param.grad is not None else torch.zeros_like(param)
            flat_param = param.view(-1)
            flat_grad = grad.reshape(-1)
            if entries_per_tensor is None or entries_per_tensor >= flat_param.numel():
                indices = range(flat_param.numel())
            else:
                indices = torch.randperm(flat_param.numel(), generator=generator)[:entries_per_tensor].tolist()

            analytic, numeric = [], []
            for i in indices:
                original = flat_param[i].item()
                flat_param[i] = original + h
                upper = float(loss_fn())
                flat_param[i] = original - h
                lower = float(loss_fn())
                flat_param[i] = original
                analytic.append(flat_grad[i].item())
                numeric.append((upper - lower) / (2 * h))
            errors[name] = _relative_error(tensor(analytic), tensor(numeric))
    return errors
