"""
数值计算核心模块
基于 numpy 的稠密张量与反向模式自动微分 (tape)

每个运算产生一个新的 Tensor，并在需要梯度时记录父节点和反向函数；
backward() 按拓扑逆序把伴随量 (adjoint) 累加回各个叶子参数。
"""
import contextlib
import logging
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NonFinite, NotScalarLoss, ShapeMismatch

logger = logging.getLogger(__name__)

_state = {
    'dtype': np.float32,
    'debug': False,
    'grad_enabled': True,
}

ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence]


def get_default_dtype():
    return _state['dtype']


@contextlib.contextmanager
def precision(dtype):
    """临时切换默认精度，梯度检查时使用 float64"""
    previous = _state['dtype']
    _state['dtype'] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state['dtype'] = previous


def set_debug(enabled: bool):
    """调试模式：每个运算后检查 NaN/Inf"""
    _state['debug'] = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """推理时不记录计算图"""
    previous = _state['grad_enabled']
    _state['grad_enabled'] = False
    try:
        yield
    finally:
        _state['grad_enabled'] = previous


class Tensor:
    """带梯度的稠密张量"""

    __slots__ = ('data', 'grad', 'requires_grad', '_parents', '_backward', 'name')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_state['dtype'])
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def T(self) -> 'Tensor':
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalarLoss(f"item() 需要单元素张量，当前形状为 {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self, retain_graph: bool = False):
        backward(self, retain_graph=retain_graph)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _state['grad_enabled'] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    if _state['debug'] and not np.all(np.isfinite(out.data)):
        raise NonFinite(f"{op} 产生了非有限值")
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和回原始形状"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape)


# ---------------------------------------------------------------- 基本运算

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('add', a, b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.data + b.data, (a, b), _bw, 'add')


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('sub', a, b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _result(a.data - b.data, (a, b), _bw, 'sub')


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('mul', a, b)

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _result(a.data * b.data, (a, b), _bw, 'mul')


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('div', a, b)

    def _bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _result(a.data / b.data, (a, b), _bw, 'div')


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch('matmul', a.shape, b.shape)

    def _bw(g):
        return g @ b.data.T, a.data.T @ g
    return _result(a.data @ b.data, (a, b), _bw, 'matmul')


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch('transpose', a.shape)
    return _result(a.data.T, (a,), lambda g: (g.T,), 'transpose')


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch('reshape', a.shape, shape)
    return _result(data, (a,), lambda g: (g.reshape(a.shape),), 'reshape')


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeMismatch('concat')
    ndim = parts[0].ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim or any(p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeMismatch('concat', *[q.shape for q in parts])
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def _bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(parts)))
    return _result(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), _bw, 'concat')


def slice_(a: ArrayLike, key) -> Tensor:
    """任意 numpy 下标 (切片或整数数组)，反向时按下标累加"""
    a = as_tensor(a)

    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)
    return _result(a.data[key], (a,), _bw, 'slice')


def gather_rows(a: ArrayLike, index: np.ndarray) -> Tensor:
    """按行取值，index 可重复"""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return _result(a.data[index], (a,), _bw, 'gather_rows')


def segment_sum(a: ArrayLike, segment: np.ndarray, n_segments: int) -> Tensor:
    """把第 i 行累加到 segment[i] 行，输出 n_segments 行"""
    a = as_tensor(a)
    segment = np.asarray(segment, dtype=np.int64)
    if a.ndim != 2 or segment.shape[0] != a.shape[0]:
        raise ShapeMismatch('segment_sum', a.shape, segment.shape)
    out = np.zeros((n_segments, a.shape[1]), dtype=a.data.dtype)
    np.add.at(out, segment, a.data)
    return _result(out, (a,), lambda g: (g[segment],), 'segment_sum')


def sum(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def _bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), _bw, 'sum')


def mean(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


# ---------------------------------------------------------------- 逐元素非线性

def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    # 数值稳定写法
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), 'sigmoid')


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), 'tanh')


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0).astype(a.data.dtype), (a,), lambda g: (g * mask,), 'relu')


def softplus(a: ArrayLike) -> Tensor:
    """log(1 + e^x)，用于带 logits 的二元交叉熵"""
    a = as_tensor(a)
    y = np.logaddexp(0.0, a.data)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(y, (a,), lambda g: (g * s,), 'softplus')


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), 'exp')


def log(a: ArrayLike, floor: float = 1e-12) -> Tensor:
    """截断对数：log(max(x, floor))，截断处梯度为0"""
    a = as_tensor(a)
    inside = a.data > floor
    safe = np.where(inside, a.data, floor)
    return _result(np.log(safe), (a,), lambda g: (np.where(inside, g / safe, 0.0),), 'log')


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return _result(y, (a,), lambda g: (g * 0.5 / np.where(y > 0, y, np.inf),), 'sqrt')


def clamp(a: ArrayLike, low: float, high: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)
    return _result(np.clip(a.data, low, high), (a,), lambda g: (g * inside,), 'clamp')


def maximum_scalar(a: ArrayLike, value: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data > value
    return _result(np.where(mask, a.data, value).astype(a.data.dtype), (a,), lambda g: (g * mask,), 'maximum')


def arccos(a: ArrayLike) -> Tensor:
    """输入需已截断到 [-1, 1]；端点处梯度按 1e-7 的余量计算"""
    a = as_tensor(a)
    x = np.clip(a.data, -1.0, 1.0)
    denom = np.sqrt(np.maximum(1.0 - x * x, 1e-14))
    return _result(np.arccos(x), (a,), lambda g: (-g / denom,), 'arccos')


def softmax(a: ArrayLike) -> Tensor:
    """沿最后一维"""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return _result(y, (a,), _bw, 'softmax')


def log_softmax(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def _bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)
    return _result(y, (a,), _bw, 'log_softmax')


def l2_normalize(a: ArrayLike, eps: float = 1e-12) -> Tensor:
    """沿最后一维归一化；零向量输出零向量"""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    safe = np.maximum(norm, eps)
    y = a.data / safe

    def _bw(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(norm > eps, (g - y * proj) / safe, g / safe),)
    return _result(y, (a,), _bw, 'l2_normalize')


def layer_norm(a: ArrayLike, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """沿最后一维的层归一化"""
    a = as_tensor(a)
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        raise ShapeMismatch('layer_norm', a.shape, gamma.shape, beta.shape)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    width = a.shape[-1]

    def _bw(g):
        dxhat = g * gamma.data
        dx = inv / width * (width * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _result(xhat * gamma.data + beta.data, (a, gamma, beta), _bw, 'layer_norm')


def dropout(a: ArrayLike, p: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    """
    反向缩放 dropout：训练时以概率 p 置零并除以保留率 1-p；
    p=0 或推理模式下为恒等映射
    """
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("训练模式下的 dropout 需要随机数生成器")
    keep = 1.0 - p
    mask = (rng.random(a.shape) < keep).astype(a.data.dtype) / keep
    return _result(a.data * mask, (a,), lambda g: (g * mask,), 'dropout')


def one_hot(indices: Union[int, Sequence[int], np.ndarray], n_classes: int) -> Tensor:
    idx = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    if np.any(idx < 0) or np.any(idx >= n_classes):
        raise ShapeMismatch('one_hot', idx.shape, (n_classes,))
    out = np.zeros((idx.shape[0], n_classes), dtype=_state['dtype'])
    out[np.arange(idx.shape[0]), idx] = 1.0
    return Tensor(out)


# ---------------------------------------------------------------- 反向传播

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False):
    """
    从标量损失反向传播，叶子张量的 .grad 累加梯度
    retain_graph=False 时释放中间节点的反向闭包
    """
    if loss.size != 1:
        raise NotScalarLoss(f"backward 需要标量损失，当前形状为 {loss.shape}")
    if not loss.requires_grad:
        return

    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # 叶子节点
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
        if not retain_graph:
            node._parents = ()
            node._backward = None
            node.requires_grad = False


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-4) -> np.ndarray:
    """中心差分数值梯度，用于梯度检查"""
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = float(fn().data)
            flat[i] = original - h
            minus = float(fn().data)
            flat[i] = original
            out[i] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(diff / scale)) if diff.size else 0.0


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None
