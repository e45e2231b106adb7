"""
特征提取网络模块
S 个阶段 (GraphConv 块 -> LinearOnly 块 -> 共享 LSTM) 之后接 T 个 Transformer 块，
输出每个节点的特征以及 CLS 图特征

权重统一存放在 {参数路径: Tensor} 字典中，参数形状由 parameter_shapes() 一处给出，
初始化、加载校验和参数计数都以它为准
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeMismatch
from .html_graph import EDGE_TYPES, PageGraph
from .numerics import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    S: int = 5
    T: int = 5
    K: int = 256
    N_h: int = 4
    dropout: float = 0.0
    input_width: int = 1703
    input_hidden: int = 1024
    use_lstm: bool = True
    use_residual: bool = True

    def __post_init__(self):
        if self.S < 1:
            raise ConfigError(f"S 必须 >= 1，当前为 {self.S}")
        if self.T < 0:
            raise ConfigError(f"T 必须 >= 0，当前为 {self.T}")
        if self.K < 1 or self.N_h < 1 or self.K % self.N_h != 0:
            raise ConfigError(f"K ({self.K}) 必须能被 N_h ({self.N_h}) 整除")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout 必须在 [0, 1) 内，当前为 {self.dropout}")
        if self.input_hidden < 0:
            raise ConfigError("input_hidden 不能为负数")

    @classmethod
    def from_dict(cls, cfg: Dict[str, Any]) -> 'ModelConfig':
        known = {k: cfg[k] for k in cls.__dataclass_fields__ if k in cfg}
        return cls(**known)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ExtractorOutput:
    node_features: Tensor            # N x K
    cls_feature: Optional[Tensor]    # K，仅 T >= 1 时存在


# ---------------------------------------------------------------- 参数

def _linear_shapes(prefix: str, n_in: int, n_out: int) -> Dict[str, Tuple[int, ...]]:
    return {f"{prefix}.W": (n_in, n_out), f"{prefix}.b": (n_out,)}


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """参数路径 -> 形状"""
    K = config.K
    shapes: Dict[str, Tuple[int, ...]] = {}

    if config.input_hidden > 0:
        shapes.update(_linear_shapes('input.hidden', config.input_width, config.input_hidden))
        shapes.update(_linear_shapes('input.out', config.input_hidden, K))
    else:
        shapes.update(_linear_shapes('input.out', config.input_width, K))
    if config.use_residual:
        shapes.update(_linear_shapes('input.skip', config.input_width, K))

    for s in range(config.S):
        for kind in EDGE_TYPES:
            p = f"stage{s}.conv.{kind}"
            shapes[f"{p}.W"] = (K, K)
            shapes[f"{p}.b"] = (K,)
            shapes[f"{p}.B"] = (K, K)
            shapes[f"{p}.C"] = (K, K)
        shapes.update(_linear_shapes(f"stage{s}.linear", K, K))

    if config.use_lstm:
        shapes['lstm.W_ih'] = (K, 4 * K)
        shapes['lstm.W_hh'] = (K, 4 * K)
        shapes['lstm.b'] = (4 * K,)

    if config.T > 0:
        shapes['cls'] = (K,)
    for t in range(config.T):
        p = f"block{t}"
        shapes[f"{p}.attn.Wq"] = (K, K)
        shapes[f"{p}.attn.Wk"] = (K, K)
        shapes[f"{p}.attn.Wv"] = (K, K)
        shapes.update(_linear_shapes(f"{p}.attn.out", K, K))
        shapes.update(_linear_shapes(f"{p}.ffn.hidden", K, 4 * K))
        shapes.update(_linear_shapes(f"{p}.ffn.out", 4 * K, K))
        shapes[f"{p}.ln1.gamma"] = (K,)
        shapes[f"{p}.ln1.beta"] = (K,)
        shapes[f"{p}.ln2.gamma"] = (K,)
        shapes[f"{p}.ln2.beta"] = (K,)
    return shapes


def param_count(config: ModelConfig) -> int:
    """可训练参数总数"""
    return int(sum(int(np.prod(shape)) for shape in parameter_shapes(config).values()))


def _init_array(name: str, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit('.', 1)[-1]
    if leaf == 'gamma':
        return np.ones(shape)
    if leaf in ('b', 'beta'):
        if name == 'lstm.b':
            # 遗忘门偏置初始化为 1
            bias = np.zeros(shape)
            k = shape[0] // 4
            bias[k:2 * k] = 1.0
            return bias
        return np.zeros(shape)
    if name == 'cls':
        return rng.normal(0.0, 0.02, size=shape)
    # Glorot 均匀初始化
    fan_in, fan_out = shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_weights(config: ModelConfig, rng: np.random.Generator) -> Dict[str, Tensor]:
    """按参数名排序依次初始化，同一种子得到相同权重"""
    shapes = parameter_shapes(config)
    return {name: nx.parameter(_init_array(name, shapes[name], rng), name=name) for name in sorted(shapes)}


def weights_from_arrays(config: ModelConfig, arrays: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    """从检查点数组恢复权重，名称与形状必须与配置完全一致"""
    shapes = parameter_shapes(config)
    missing = sorted(set(shapes) - set(arrays))
    if missing:
        raise ShapeMismatch(f"load_weights: 缺少参数 {missing[:3]}")
    for name, shape in shapes.items():
        if tuple(arrays[name].shape) != shape:
            raise ShapeMismatch(f"load_weights:{name}", arrays[name].shape, shape)
    return {name: nx.parameter(np.array(arrays[name]), name=name) for name in sorted(shapes)}


# ---------------------------------------------------------------- 层

def linear_layer(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """X W + b，逐行"""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch('linear_layer', x.shape, w.shape, b.shape)
    return nx.add(nx.matmul(x, w), b)


def graph_conv_gated(x: Tensor, edges: Dict[str, np.ndarray], weights: Dict[str, Tensor],
                     prefix: str) -> Tensor:
    """
    门控图卷积
    X_i = Σ_k Σ_{j∈N_k(i)} η_ijk ⊙ (X_j W_k + b_k)，η_ijk = sigmoid(X_i B_k + X_j C_k)
    边 (i, j) 表示 A[k][i][j] = 1，消息由 j 流向 i；不做度归一化
    """
    n = x.shape[0]
    out = None
    for kind in EDGE_TYPES:
        W = weights[f"{prefix}.{kind}.W"]
        b = weights[f"{prefix}.{kind}.b"]
        B = weights[f"{prefix}.{kind}.B"]
        C = weights[f"{prefix}.{kind}.C"]
        if x.ndim != 2 or x.shape[1] != W.shape[0]:
            raise ShapeMismatch('graph_conv_gated', x.shape, W.shape)
        e = np.asarray(edges[kind], dtype=np.int64).reshape(-1, 2)
        dst, src = e[:, 0], e[:, 1]
        gate = nx.sigmoid(nx.add(nx.gather_rows(nx.matmul(x, B), dst), nx.gather_rows(nx.matmul(x, C), src)))
        message = nx.mul(gate, nx.gather_rows(linear_layer(x, W, b), src))
        part = nx.segment_sum(message, dst, n)
        out = part if out is None else nx.add(out, part)
    return out


def edge_gates(x: np.ndarray, edges: Dict[str, np.ndarray], weights: Dict[str, Tensor], prefix: str,
               kind: str) -> np.ndarray:
    """某一类边上每条边的门控值，供诊断使用"""
    e = np.asarray(edges[kind], dtype=np.int64).reshape(-1, 2)
    B = weights[f"{prefix}.{kind}.B"].data
    C = weights[f"{prefix}.{kind}.C"].data
    z = x[e[:, 0]] @ B + x[e[:, 1]] @ C
    return 1.0 / (1.0 + np.exp(-z))


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, weights: Dict[str, Tensor]) -> Tuple[Tensor, Tensor]:
    """逐节点的 LSTM 单步，门顺序为 输入/遗忘/候选/输出"""
    K = h.shape[1]
    z = nx.add(nx.add(nx.matmul(x, weights['lstm.W_ih']), nx.matmul(h, weights['lstm.W_hh'])),
               weights['lstm.b'])
    i = nx.sigmoid(z[:, 0:K])
    f = nx.sigmoid(z[:, K:2 * K])
    g = nx.tanh(z[:, 2 * K:3 * K])
    o = nx.sigmoid(z[:, 3 * K:4 * K])
    c_next = nx.add(nx.mul(f, c), nx.mul(i, g))
    h_next = nx.mul(o, nx.tanh(c_next))
    return h_next, c_next


def multihead_attention(h: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, n_heads: int) -> Tensor:
    """
    多头自注意力，H 的最后一行是 CLS
    每个头 softmax(H W_q_i (H W_k_i)^T / sqrt(K_in)) H W_v_i，缩放使用输入宽度 K_in，无掩码
    """
    if h.ndim != 2 or h.shape[1] != w_q.shape[0] or w_q.shape != w_k.shape or w_q.shape != w_v.shape:
        raise ShapeMismatch('multihead_attention', h.shape, w_q.shape, w_k.shape, w_v.shape)
    if w_q.shape[1] % n_heads != 0:
        raise ShapeMismatch('multihead_attention', w_q.shape, (n_heads,))
    scale = 1.0 / math.sqrt(h.shape[1])
    d = w_q.shape[1] // n_heads
    q, k, v = nx.matmul(h, w_q), nx.matmul(h, w_k), nx.matmul(h, w_v)
    heads = []
    for i in range(n_heads):
        cols = slice(i * d, (i + 1) * d)
        scores = nx.mul(nx.matmul(q[:, cols], nx.transpose(k[:, cols])), scale)
        heads.append(nx.matmul(nx.softmax(scores), v[:, cols]))
    return heads[0] if n_heads == 1 else nx.concat(heads, axis=1)


def transformer_block(h: Tensor, weights: Dict[str, Tensor], prefix: str, n_heads: int,
                      dropout: float = 0.0, rng: Optional[np.random.Generator] = None,
                      training: bool = False) -> Tensor:
    """前置归一化：LN -> MHA -> 输出投影 -> 残差；LN -> FFN(ReLU) -> 残差"""
    w = weights
    a = nx.layer_norm(h, w[f"{prefix}.ln1.gamma"], w[f"{prefix}.ln1.beta"])
    a = multihead_attention(a, w[f"{prefix}.attn.Wq"], w[f"{prefix}.attn.Wk"], w[f"{prefix}.attn.Wv"], n_heads)
    a = linear_layer(a, w[f"{prefix}.attn.out.W"], w[f"{prefix}.attn.out.b"])
    h = nx.add(h, nx.dropout(a, dropout, rng, training))
    f = nx.layer_norm(h, w[f"{prefix}.ln2.gamma"], w[f"{prefix}.ln2.beta"])
    f = nx.relu(linear_layer(f, w[f"{prefix}.ffn.hidden.W"], w[f"{prefix}.ffn.hidden.b"]))
    f = linear_layer(f, w[f"{prefix}.ffn.out.W"], w[f"{prefix}.ffn.out.b"])
    return nx.add(h, nx.dropout(f, dropout, rng, training))


def _input_block(x: Tensor, config: ModelConfig, w: Dict[str, Tensor]) -> Tensor:
    if config.input_hidden > 0:
        y = nx.relu(linear_layer(x, w['input.hidden.W'], w['input.hidden.b']))
        y = nx.relu(linear_layer(y, w['input.out.W'], w['input.out.b']))
    else:
        y = nx.relu(linear_layer(x, w['input.out.W'], w['input.out.b']))
    if config.use_residual:
        y = nx.add(y, linear_layer(x, w['input.skip.W'], w['input.skip.b']))
    return y


def run_stage(x: Tensor, state: Optional[Tuple[Tensor, Tensor]], edges: Dict[str, np.ndarray],
              config: ModelConfig, weights: Dict[str, Tensor], stage: int,
              rng: Optional[np.random.Generator] = None,
              training: bool = False) -> Tuple[Tensor, Optional[Tuple[Tensor, Tensor]]]:
    """单个阶段：GraphConv 块 -> dropout -> LinearOnly 块 -> dropout -> LSTM"""
    p = f"stage{stage}"
    y = nx.relu(graph_conv_gated(x, edges, weights, f"{p}.conv"))
    if config.use_residual:
        y = nx.add(y, x)
    y = nx.dropout(y, config.dropout, rng, training)

    z = nx.relu(linear_layer(y, weights[f"{p}.linear.W"], weights[f"{p}.linear.b"]))
    if config.use_residual:
        z = nx.add(z, y)
    z = nx.dropout(z, config.dropout, rng, training)

    if not config.use_lstm:
        return z, None
    h, c = state
    h, c = lstm_cell(z, h, c, weights)
    return h, (h, c)


def forward_extractor(graph: PageGraph, config: ModelConfig, weights: Dict[str, Tensor],
                      mode: str = 'eval', rng: Optional[np.random.Generator] = None) -> ExtractorOutput:
    """
    完整前向：输入投影 -> S 个阶段 -> 追加 CLS -> T 个 Transformer 块 -> 拆分节点行与 CLS 行
    LSTM 状态在同一次前向的各阶段间传递，每个页面从零开始
    """
    if mode not in ('train', 'eval'):
        raise ValueError(f"未知的模式: {mode}")
    training = mode == 'train'
    if graph.features.ndim != 2 or graph.features.shape[1] != config.input_width:
        raise ShapeMismatch('forward_extractor', graph.features.shape, (graph.n_nodes, config.input_width))

    n = graph.n_nodes
    x = _input_block(nx.Tensor(graph.features), config, weights)
    state = None
    if config.use_lstm:
        zeros = np.zeros((n, config.K))
        state = (nx.Tensor(zeros), nx.Tensor(zeros))
    for s in range(config.S):
        x, state = run_stage(x, state, graph.edges, config, weights, s, rng, training)

    if config.T == 0:
        return ExtractorOutput(node_features=x, cls_feature=None)

    h = nx.concat([x, nx.reshape(weights['cls'], (1, config.K))], axis=0)
    for t in range(config.T):
        h = transformer_block(h, weights, f"block{t}", config.N_h, config.dropout, rng, training)
    return ExtractorOutput(node_features=h[0:n], cls_feature=nx.reshape(h[n:n + 1], (config.K,)))


class FeatureExtractor:
    """持有配置与权重的特征提取器"""

    def __init__(self, config: ModelConfig, weights: Optional[Dict[str, Tensor]] = None,
                 seed: int = 0):
        self.logger = logging.getLogger(__name__)
        self.config = config
        self.weights = weights if weights is not None else init_weights(config, np.random.default_rng(seed))
        self.logger.debug(f"特征提取器就绪: {config.to_dict()}, 参数量 {param_count(config):,}")

    def __call__(self, graph: PageGraph, mode: str = 'eval',
                 rng: Optional[np.random.Generator] = None) -> ExtractorOutput:
        return forward_extractor(graph, self.config, self.weights, mode, rng)

    def parameters(self) -> List[Tensor]:
        return [self.weights[name] for name in sorted(self.weights)]

    def manifest(self, **extra: Any) -> Dict[str, Any]:
        info = {'model_config': self.config.to_dict(), 'param_count': param_count(self.config)}
        info.update(extra)
        return info

    @classmethod
    def from_checkpoint(cls, state: Dict[str, Any], prefix: str = 'extractor/') -> 'FeatureExtractor':
        """从 load_checkpoint() 的结果恢复"""
        manifest = state.get('manifest') or {}
        if 'model_config' not in manifest:
            raise ConfigError("检查点清单缺少 model_config")
        config = ModelConfig.from_dict(manifest['model_config'])
        arrays = {k[len(prefix):]: v for k, v in state['params'].items() if k.startswith(prefix)}
        return cls(config, weights_from_arrays(config, arrays))
