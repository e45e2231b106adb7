"""
网页图构建模块
把 HTML 解析为 DOM 树，并输出带特征的 PageGraph：
每个节点 1703 维特征（文本/class/id 句向量、标签类型、字体、子节点数、子序号、拉普拉斯位置编码）
以及三种有向边 (parent / child / self)
"""
import hashlib
import logging
import math
import os
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from bs4 import BeautifulSoup, CData, Comment, Declaration, Doctype, NavigableString, ProcessingInstruction, Tag
from scipy import sparse
from scipy.sparse.linalg import eigsh

from .errors import ConfigError, EmptyDocument
from .text_encoder import TEXT_DIM, TextEncoder

logger = logging.getLogger(__name__)

EDGE_TYPES = ('parent', 'child', 'self')
NON_VISIBLE_TAGS = frozenset({'script', 'style', 'noscript', 'template'})
COMMENT_TAG = '#comment'
TAG_VOCAB_VERSION = 'v1'
DEFAULT_TAG_VOCAB_FILE = os.path.join(os.path.dirname(__file__), 'data', f'tag_vocab_{TAG_VOCAB_VERSION}.txt')

FONT_WEIGHTS = ('normal', 'bold', 'unknown')
FONT_STYLES = ('normal', 'italic', 'oblique', 'unknown')
FONT_SIZES = ('smaller', 'larger', 'xx-small', 'x-small', 'small', 'medium', 'large', 'x-large', 'xx-large', 'unknown')
CHILD_INDEX_CLASSES = 32


@dataclass(frozen=True)
class FeatureSchema:
    """节点特征各分段的 (名称, 偏移, 宽度)"""
    slices: Tuple[Tuple[str, int, int], ...] = (
        ('text', 0, 513),
        ('class', 513, 512),
        ('id', 1025, 512),
        ('tag_type', 1537, 84),
        ('font_weight', 1621, 3),
        ('font_style', 1624, 4),
        ('font_size', 1628, 10),
        ('num_child', 1638, 1),
        ('child_index', 1639, 32),
        ('pos_encoding', 1671, 32),
    )
    total_size: int = 1703

    def __post_init__(self):
        offset = 0
        for name, start, size in self.slices:
            if start != offset:
                raise ConfigError(f"特征分段 {name} 偏移 {start} 不连续，应为 {offset}")
            offset += size
        if offset != self.total_size:
            raise ConfigError(f"特征总宽度 {offset} 与声明的 {self.total_size} 不一致")

    def span(self, name: str) -> slice:
        for slice_name, start, size in self.slices:
            if slice_name == name:
                return slice(start, start + size)
        raise KeyError(name)

    def schema_hash(self, tag_vocab: Sequence[str] = (), encoder_name: str = '') -> str:
        """特征布局、标签词表与文本编码器共同决定的指纹，图记录和检查点据此判断是否兼容"""
        h = hashlib.sha256()
        h.update(f"encoder:{encoder_name};".encode('utf-8'))
        for name, start, size in self.slices:
            h.update(f"{name}:{start}:{size};".encode('utf-8'))
        h.update(('|'.join(tag_vocab)).encode('utf-8'))
        return h.hexdigest()[:16]


SCHEMA = FeatureSchema()


def load_tag_vocab(path: Optional[str] = None) -> Tuple[str, ...]:
    """读取标签词表：必须恰好 83 个不重复的标签，# 开头为注释"""
    path = path or DEFAULT_TAG_VOCAB_FILE
    try:
        with open(path, 'r', encoding='utf-8') as f:
            tags = [line.strip().lower() for line in f if line.strip() and not line.lstrip().startswith('#')]
    except OSError as e:
        raise ConfigError(f"读取标签词表失败: {path} - {e}")
    if len(tags) != 83 or len(set(tags)) != 83:
        raise ConfigError(f"标签词表必须恰好包含 83 个不重复的标签，{path} 中有 {len(set(tags))} 个")
    return tuple(tags)


@dataclass(eq=False)
class DomNode:
    """DOM 树节点"""
    tag_name: str
    attributes: Dict[str, str] = field(default_factory=dict)
    direct_text: str = ''
    children: List['DomNode'] = field(default_factory=list)
    child_index: int = 0
    parent: Optional['DomNode'] = field(default=None, repr=False)

    def append(self, child: 'DomNode') -> 'DomNode':
        child.child_index = len(self.children)
        child.parent = self
        self.children.append(child)
        return child

    def iter_preorder(self):
        """文档顺序遍历（非递归，深层 DOM 不会爆栈）"""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def ancestors(self):
        node = self
        while node is not None:
            yield node
            node = node.parent


@dataclass(frozen=True)
class NodeMeta:
    tag_name: str
    has_text: bool
    text: str
    source_span: str  # 从根出发的子序号路径，如 "0/1/0"


@dataclass(frozen=True)
class PageGraph:
    """一个网页的图表示，构建后不可变"""
    features: np.ndarray
    edges: Dict[str, np.ndarray]
    node_meta: Tuple[NodeMeta, ...]
    page_id: str = ''
    schema_hash: str = ''

    def __post_init__(self):
        self.features.setflags(write=False)
        for arr in self.edges.values():
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return int(self.features.shape[0])

    def adjacency(self, kind: str) -> np.ndarray:
        """稠密布尔邻接矩阵，A[i, j] = 1 表示存在 i -> j 的 kind 类型边"""
        n = self.n_nodes
        dense = np.zeros((n, n), dtype=bool)
        e = self.edges[kind]
        if len(e):
            dense[e[:, 0], e[:, 1]] = True
        return dense

    def text_node_indices(self) -> List[int]:
        return [i for i, m in enumerate(self.node_meta) if m.has_text]

    def with_features(self, features: np.ndarray) -> 'PageGraph':
        """返回替换特征后的新图（用于遮蔽、符号翻转）"""
        return PageGraph(features=np.array(features, dtype=np.float32), edges=self.edges,
                         node_meta=self.node_meta, page_id=self.page_id, schema_hash=self.schema_hash)

    def permuted(self, perm: Sequence[int]) -> 'PageGraph':
        """按 perm 重新编号：新节点 i 对应旧节点 perm[i]"""
        perm = np.asarray(perm, dtype=np.int64)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        edges = {k: (inverse[v].astype(np.int32) if len(v) else v.copy()) for k, v in self.edges.items()}
        return PageGraph(features=np.array(self.features[perm]), edges=edges,
                         node_meta=tuple(self.node_meta[i] for i in perm), page_id=self.page_id,
                         schema_hash=self.schema_hash)


# ---------------------------------------------------------------- 解析

def _attr_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ' '.join(str(v) for v in value)
    return '' if value is None else str(value)


def parse_html(source: bytes) -> DomNode:
    """
    容错解析 HTML，编码由声明或自动检测决定

    script/style/注释保留为节点，但其文本不计入 direct_text
    """
    if isinstance(source, str):
        source = source.encode('utf-8')
    if not source or not source.strip():
        raise EmptyDocument("HTML 内容为空")

    soup = BeautifulSoup(source, 'lxml')
    top = next((c for c in soup.children if isinstance(c, Tag)), None)
    if top is None:
        raise EmptyDocument("无法从 HTML 中恢复任何元素")

    root = DomNode(tag_name=top.name.lower(), attributes={k: _attr_value(v) for k, v in top.attrs.items()})
    stack = [(top, root)]
    while stack:
        tag, node = stack.pop()
        visible = node.tag_name not in NON_VISIBLE_TAGS
        pieces = []
        pending = []
        for child in tag.children:
            if isinstance(child, Tag):
                child_node = node.append(DomNode(
                    tag_name=child.name.lower(),
                    attributes={k: _attr_value(v) for k, v in child.attrs.items()},
                ))
                pending.append((child, child_node))
            elif isinstance(child, Comment):
                node.append(DomNode(tag_name=COMMENT_TAG))
            elif isinstance(child, (CData, ProcessingInstruction, Declaration, Doctype)):
                continue
            elif isinstance(child, NavigableString) and visible:
                pieces.append(str(child))
        node.direct_text = ' '.join(' '.join(pieces).split())
        stack.extend(reversed(pending))
    return root


# ---------------------------------------------------------------- 字体特征

_STYLE_RE = re.compile(r'\s*([-a-zA-Z]+)\s*:\s*([^;]+)')
_BOLD_TAGS = frozenset({'b', 'strong', 'h1', 'h2', 'h3', 'h4', 'h5', 'h6', 'th'})
_ITALIC_TAGS = frozenset({'i', 'em', 'cite', 'var', 'dfn', 'address'})
_TAG_SIZES = {'small': 'smaller', 'big': 'larger', 'h1': 'xx-large', 'h2': 'x-large', 'h3': 'large',
              'h4': 'medium', 'h5': 'small', 'h6': 'x-small'}
_FONT_ATTR_SIZES = {'1': 'x-small', '2': 'small', '3': 'medium', '4': 'large', '5': 'x-large',
                    '6': 'xx-large', '7': 'xx-large'}


def _inline_style(node: DomNode) -> Dict[str, str]:
    style = node.attributes.get('style', '')
    props = {}
    for m in _STYLE_RE.finditer(style):
        props[m.group(1).lower()] = m.group(2).replace('!important', '').strip().lower()
    return props


def _parse_weight(value: str) -> str:
    if value in ('bold', 'bolder'):
        return 'bold'
    if value in ('normal', 'lighter'):
        return 'normal'
    if value.isdigit():
        return 'bold' if int(value) >= 600 else 'normal'
    return 'unknown'


def _parse_style(value: str) -> str:
    head = value.split()[0] if value.split() else ''
    return head if head in ('normal', 'italic', 'oblique') else 'unknown'


def _parse_size(value: str) -> str:
    if value in FONT_SIZES[:-1]:
        return value
    m = re.fullmatch(r'([0-9]*\.?[0-9]+)\s*(px|pt|em|rem|%)', value)
    if not m:
        return 'unknown'
    amount, unit = float(m.group(1)), m.group(2)
    if unit in ('em', 'rem', '%'):
        ratio = amount / 100.0 if unit == '%' else amount
        if math.isclose(ratio, 1.0):
            return 'medium'
        return 'smaller' if ratio < 1.0 else 'larger'
    px = amount * 4.0 / 3.0 if unit == 'pt' else amount
    for limit, name in ((9, 'xx-small'), (10, 'x-small'), (13, 'small'), (16, 'medium'),
                        (18, 'large'), (24, 'x-large')):
        if px <= limit:
            return name
    return 'xx-large'


def _font_attr_size(value: str) -> str:
    value = value.strip()
    if value.startswith('+'):
        return 'larger'
    if value.startswith('-'):
        return 'smaller'
    return _FONT_ATTR_SIZES.get(value, 'unknown')


def _node_font(node: DomNode) -> Tuple[Optional[str], Optional[str], Optional[str]]:
    """节点自身设置的字体属性，None 表示未设置"""
    props = _inline_style(node)
    weight = style = size = None
    if 'font-weight' in props:
        weight = _parse_weight(props['font-weight'])
    elif node.tag_name in _BOLD_TAGS:
        weight = 'bold'
    if 'font-style' in props:
        style = _parse_style(props['font-style'])
    elif node.tag_name in _ITALIC_TAGS:
        style = 'italic'
    if 'font-size' in props:
        size = _parse_size(props['font-size'])
    elif node.tag_name == 'font' and 'size' in node.attributes:
        size = _font_attr_size(node.attributes['size'])
    elif node.tag_name in _TAG_SIZES:
        size = _TAG_SIZES[node.tag_name]
    return weight, style, size


def extract_font_features(node: DomNode) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    静态推断字体粗细/样式/大小（不渲染）
    由节点自身或最近的设置了该属性的祖先决定，均未设置时为 unknown
    """
    weight = style = size = None
    for current in node.ancestors():
        w, s, z = _node_font(current)
        weight = weight or w
        style = style or s
        size = size or z
        if weight and style and size:
            break
    out = []
    for value, names in ((weight, FONT_WEIGHTS), (style, FONT_STYLES), (size, FONT_SIZES)):
        vec = np.zeros(len(names), dtype=np.float32)
        vec[names.index(value or 'unknown')] = 1.0
        out.append(vec)
    return out[0], out[1], out[2]


# ---------------------------------------------------------------- 位置编码

def laplacian_pe_from_edges(n: int, parent_edges: np.ndarray, dim: int = 32) -> np.ndarray:
    """
    在无向父子骨架（不含自环）上计算对称归一化拉普拉斯 L = I − D^(−1/2) A D^(−1/2)，
    返回最小的 dim 个非平凡特征值对应的特征向量（按特征值升序），不足时补零。
    符号约定：每列绝对值最大的第一个分量为正。
    """
    pe = np.zeros((n, dim), dtype=np.float64)
    if n <= 1 or dim <= 0:
        return pe.astype(np.float32)

    if len(parent_edges):
        rows = np.concatenate([parent_edges[:, 0], parent_edges[:, 1]])
        cols = np.concatenate([parent_edges[:, 1], parent_edges[:, 0]])
        adj = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
        adj.data[:] = 1.0
    else:
        adj = sparse.csr_matrix((n, n))
    degree = np.asarray(adj.sum(axis=1)).reshape(-1)
    inv_sqrt = sparse.diags(np.where(degree > 0, 1.0 / np.sqrt(np.maximum(degree, 1e-12)), 0.0))
    lap = sparse.identity(n, format='csr') - inv_sqrt @ adj @ inv_sqrt

    k = min(dim + 1, n)
    if n <= 2000 or k >= n - 1:
        values, vectors = np.linalg.eigh(lap.toarray())
    else:
        values, vectors = eigsh(lap.tocsc(), k=k, sigma=-1e-2, which='LM', v0=np.ones(n))
    order = np.argsort(values, kind='stable')
    vectors = vectors[:, order[1:k]]

    for c in range(vectors.shape[1]):
        col = vectors[:, c]
        pivot = int(np.argmax(np.abs(col)))
        if col[pivot] < 0:
            vectors[:, c] = -col
    pe[:, :vectors.shape[1]] = vectors
    return pe.astype(np.float32)


def laplacian_pe(graph: PageGraph, dim: int = 32) -> np.ndarray:
    return laplacian_pe_from_edges(graph.n_nodes, graph.edges['parent'], dim)


def flip_pe_signs(graph: PageGraph, rng: np.random.Generator) -> PageGraph:
    """训练时的增强：位置编码每列随机翻转符号"""
    span = SCHEMA.span('pos_encoding')
    if graph.features.shape[1] != SCHEMA.total_size:
        return graph
    signs = rng.choice(np.array([-1.0, 1.0], dtype=np.float32), size=span.stop - span.start)
    features = np.array(graph.features)
    features[:, span] *= signs
    return graph.with_features(features)


# ---------------------------------------------------------------- 图构建

def _scaled_log(count: int, cap: int) -> float:
    return float(min(max(math.log1p(count) / math.log1p(cap), 0.0), 1.0))


def _encode_all(encoder: TextEncoder, texts: List[str]) -> np.ndarray:
    batch = getattr(encoder, 'encode_batch', None)
    if batch is not None:
        return np.asarray(batch(texts), dtype=np.float32)
    out = np.zeros((len(texts), TEXT_DIM), dtype=np.float32)
    cache: Dict[str, np.ndarray] = {}
    for i, text in enumerate(texts):
        if text not in cache:
            cache[text] = encoder.encode(text)
        out[i] = cache[text]
    return out


def build_graph(root: DomNode, encoder: TextEncoder, tag_vocab: Optional[Sequence[str]] = None,
                page_id: str = '') -> PageGraph:
    """按特征表组装每个节点的 1703 维特征与三类邻接"""
    tag_vocab = tuple(tag_vocab) if tag_vocab is not None else load_tag_vocab()
    tag_index = {t: i for i, t in enumerate(tag_vocab)}
    catch_all = len(tag_vocab)

    nodes = list(root.iter_preorder())
    n = len(nodes)
    position = {id(node): i for i, node in enumerate(nodes)}

    parent_edges = np.array([(position[id(node)], position[id(node.parent)])
                             for node in nodes if node.parent is not None], dtype=np.int32).reshape(-1, 2)
    edges = {
        'parent': parent_edges,
        'child': parent_edges[:, ::-1].copy(),
        'self': np.repeat(np.arange(n, dtype=np.int32)[:, None], 2, axis=1),
    }

    features = np.zeros((n, SCHEMA.total_size), dtype=np.float32)
    text_span = SCHEMA.span('text')
    features[:, text_span.start:text_span.start + TEXT_DIM] = _encode_all(encoder, [nd.direct_text for nd in nodes])
    features[:, SCHEMA.span('class')] = _encode_all(encoder, [nd.attributes.get('class', '') for nd in nodes])
    features[:, SCHEMA.span('id')] = _encode_all(encoder, [nd.attributes.get('id', '') for nd in nodes])

    tag_start = SCHEMA.span('tag_type').start
    child_start = SCHEMA.span('child_index').start
    num_child_col = SCHEMA.span('num_child').start
    length_col = text_span.start + TEXT_DIM
    meta = []
    paths: Dict[int, str] = {}
    for i, node in enumerate(nodes):
        features[i, length_col] = _scaled_log(len(node.direct_text), 10000)
        features[i, tag_start + tag_index.get(node.tag_name, catch_all)] = 1.0
        weight, style, size = extract_font_features(node)
        features[i, SCHEMA.span('font_weight')] = weight
        features[i, SCHEMA.span('font_style')] = style
        features[i, SCHEMA.span('font_size')] = size
        features[i, num_child_col] = _scaled_log(len(node.children), 100)
        features[i, child_start + min(node.child_index, CHILD_INDEX_CLASSES - 1)] = 1.0

        if node.parent is None:
            paths[id(node)] = '0'
        else:
            paths[id(node)] = f"{paths[id(node.parent)]}/{node.child_index}"
        meta.append(NodeMeta(tag_name=node.tag_name, has_text=bool(node.direct_text.strip()),
                             text=node.direct_text, source_span=paths[id(node)]))

    pe_span = SCHEMA.span('pos_encoding')
    features[:, pe_span] = laplacian_pe_from_edges(n, parent_edges, pe_span.stop - pe_span.start)
    return PageGraph(features=features, edges=edges, node_meta=tuple(meta), page_id=page_id,
                     schema_hash=SCHEMA.schema_hash(tag_vocab, encoder.name))


class Featurizer:
    """HTML -> PageGraph 的特征化器，无副作用，可在多线程中共享"""

    def __init__(self, encoder: TextEncoder, tag_vocab: Optional[Sequence[str]] = None):
        self.logger = logging.getLogger(__name__)
        self.encoder = encoder
        self.tag_vocab = tuple(tag_vocab) if tag_vocab is not None else load_tag_vocab()
        self.schema_hash = SCHEMA.schema_hash(self.tag_vocab, encoder.name)

    def featurize_bytes(self, source: bytes, page_id: str = '') -> PageGraph:
        root = parse_html(source)
        graph = build_graph(root, self.encoder, self.tag_vocab, page_id=page_id)
        self.logger.debug(f"页面特征化完成: {page_id or '<bytes>'}, 节点数 {graph.n_nodes}")
        return graph

    def featurize_file(self, path: str, page_id: Optional[str] = None) -> PageGraph:
        with open(path, 'rb') as f:
            source = f.read()
        return self.featurize_bytes(source, page_id=page_id or os.path.splitext(os.path.basename(path))[0])
