"""
语料与数据集模块
按网站分组的预训练语料、正文抽取数据集、体裁分类数据集的加载，
PageGraph 的二进制序列化，以及目录级的并行特征化
"""
import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, TypeVar
from urllib.parse import urlsplit

import numpy as np
import tldextract

from .errors import ConfigError, CorruptRecord, MalformedUrl, MissingGold, SchemaMismatch, SplitMismatch
from .html_graph import EDGE_TYPES, Featurizer, NodeMeta, PageGraph
from .records import Reader, Writer, pack_record, unpack_record

logger = logging.getLogger(__name__)

# 只用随包发布的公共后缀表快照，不联网、不写缓存
_DOMAIN_EXTRACT = tldextract.TLDExtract(cache_dir=None, suffix_list_urls=())

GRAPH_MAGIC = b'GUPGRAPH'
GRAPH_VERSION = 2
GRAPH_SUFFIX = '.graph'
HTML_SUFFIXES = ('.html', '.htm')
SPLITS = ('train', 'dev', 'test')
SPLIT_MANIFEST = 'split.tsv'

T = TypeVar('T')


# ---------------------------------------------------------------- 网站分组

def site_key_for_url(url: str) -> str:
    """
    可注册域名 (按公共后缀表归并子域名，去掉端口) + 第一级路径，小写；
    不在公共后缀表中的主机名 (内网、保留域名、IP) 原样保留，只去掉 www.
    """
    try:
        parts = urlsplit(url.strip())
    except ValueError as e:
        raise MalformedUrl(f"URL 无法解析: {url!r} ({e})")
    if parts.scheme not in ('http', 'https') or not parts.hostname:
        raise MalformedUrl(f"URL 缺少协议或域名: {url!r}")
    host = parts.hostname.lower()
    if host.startswith('www.'):
        host = host[4:]
    parsed = _DOMAIN_EXTRACT(host)
    if parsed.domain and parsed.suffix:
        host = f"{parsed.domain}.{parsed.suffix}"
    segments = [s for s in parts.path.split('/') if s]
    return f"{host}/{segments[0].lower()}" if segments else host


def pair_by_url_subpath(urls: Sequence[str]) -> List[str]:
    """为每个 URL 计算网站键，键相同的页面视为同一网站"""
    return [site_key_for_url(u) for u in urls]


@dataclass(frozen=True)
class SitePage:
    page_id: str
    html_path: str
    site_key: str


@dataclass
class SiteGroupedCorpus:
    pages: List[SitePage]

    def by_site(self) -> Dict[str, List[SitePage]]:
        groups: Dict[str, List[SitePage]] = {}
        for page in self.pages:
            groups.setdefault(page.site_key, []).append(page)
        return groups

    @property
    def n_sites(self) -> int:
        return len({p.site_key for p in self.pages})


def _html_files(root: str) -> List[str]:
    found = []
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            if name.lower().endswith(HTML_SUFFIXES):
                found.append(os.path.join(dirpath, name))
    return sorted(found)


def _page_id(root: str, path: str) -> str:
    rel = os.path.relpath(path, root)
    return os.path.splitext(rel)[0].replace(os.sep, '/')


def load_site_corpus(path: str) -> SiteGroupedCorpus:
    """
    加载按网站分组的语料

    Args:
        path: 目录 (每个子目录是一个网站) 或清单文件
              (每行 `<html 相对路径><TAB><URL 或网站键>`)
    """
    if os.path.isdir(path):
        pages = []
        for html in _html_files(path):
            rel = os.path.relpath(html, path)
            site = rel.split(os.sep)[0] if os.sep in rel else '_root'
            pages.append(SitePage(_page_id(path, html), html, site))
    elif os.path.isfile(path):
        base = os.path.dirname(os.path.abspath(path))
        pages = []
        with open(path, 'r', encoding='utf-8') as f:
            for lineno, line in enumerate(f, start=1):
                line = line.rstrip('\n')
                if not line.strip() or line.startswith('#'):
                    continue
                cols = line.split('\t')
                if len(cols) != 2:
                    raise ConfigError(f"{path}:{lineno} 应为两列 (路径<TAB>URL)")
                rel, origin = cols[0].strip(), cols[1].strip()
                html = os.path.join(base, rel)
                if not os.path.exists(html):
                    raise SplitMismatch(f"{path}:{lineno} 指向的文件不存在: {rel}")
                site = site_key_for_url(origin) if '://' in origin else origin.lower()
                pages.append(SitePage(os.path.splitext(rel)[0], html, site))
    else:
        raise ConfigError(f"语料路径不存在: {path}")

    pages.sort(key=lambda p: p.page_id)
    corpus = SiteGroupedCorpus(pages)
    logger.info(f"语料加载完成: {len(pages)} 个页面，{corpus.n_sites} 个网站")
    return corpus


def split_train_dev(items: Sequence[T], ratio: float, rng: np.random.Generator) -> Tuple[List[T], List[T]]:
    """随机划分出比例为 ratio 的验证集，例如 100 个页面、0.1 -> 90/10"""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"验证集比例必须在 [0, 1) 内，当前为 {ratio}")
    order = rng.permutation(len(items))
    n_dev = int(round(len(items) * ratio))
    dev = [items[i] for i in sorted(order[:n_dev])]
    train = [items[i] for i in sorted(order[n_dev:])]
    return train, dev


# ---------------------------------------------------------------- 正文抽取数据集

@dataclass(frozen=True)
class BoilerplatePage:
    page_id: str
    html_path: str
    gold_text: str


@dataclass
class BoilerplateDataset:
    train: List[BoilerplatePage] = field(default_factory=list)
    dev: List[BoilerplatePage] = field(default_factory=list)
    test: List[BoilerplatePage] = field(default_factory=list)

    def split(self, name: str) -> List[BoilerplatePage]:
        if name not in SPLITS:
            raise ConfigError(f"未知的数据划分: {name}")
        return getattr(self, name)


_CLEANEVAL_URL_LINE = re.compile(r'^\s*URL:\s*\S*\s*$', re.IGNORECASE)
_MARKUP = re.compile(r'<[^<>\n]{0,40}>')


def clean_cleaneval_gold(text: str) -> str:
    """去掉 CleanEval 标注开头的 URL 行以及 <p> <h> <l> 等段落标记"""
    lines = text.splitlines()
    while lines and not lines[0].strip():
        lines.pop(0)
    if lines and _CLEANEVAL_URL_LINE.match(lines[0]):
        lines.pop(0)
    cleaned = [_MARKUP.sub(' ', line) for line in lines]
    return '\n'.join(' '.join(line.split()) for line in cleaned if line.strip())


def read_split_manifest(path: str) -> Dict[str, str]:
    """`<page_id><TAB><train|dev|test>` 每行一个，同一页面不得出现在两个划分中"""
    assignment: Dict[str, str] = {}
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            cols = line.split('\t')
            if len(cols) != 2 or cols[1].strip() not in SPLITS:
                raise SplitMismatch(f"{path}:{lineno} 格式错误: {line!r}")
            page_id, split = cols[0].strip(), cols[1].strip()
            if assignment.get(page_id, split) != split:
                raise SplitMismatch(f"页面 {page_id} 同时出现在 {assignment[page_id]} 和 {split} 中")
            assignment[page_id] = split
    return assignment


def load_boilerplate_dataset(directory: str, split_manifest: Optional[str] = None,
                             cleaneval_gold: bool = False) -> BoilerplateDataset:
    """
    加载 `<name>.html` / `<name>.txt` 成对的数据集

    划分清单缺省时读取目录下的 split.tsv，都没有则全部归入 train
    """
    if not os.path.isdir(directory):
        raise ConfigError(f"数据集目录不存在: {directory}")
    htmls = {_page_id(directory, p): p for p in _html_files(directory)}

    manifest = split_manifest or os.path.join(directory, SPLIT_MANIFEST)
    if os.path.exists(manifest):
        assignment = read_split_manifest(manifest)
        missing = sorted(set(assignment) - set(htmls))
        if missing:
            raise SplitMismatch(f"划分清单中的 {len(missing)} 个页面不存在，例如 {missing[0]}")
        unlisted = len(set(htmls) - set(assignment))
        if unlisted:
            logger.warning(f"{unlisted} 个页面不在划分清单中，已忽略")
    elif split_manifest:
        raise ConfigError(f"划分清单不存在: {split_manifest}")
    else:
        assignment = {pid: 'train' for pid in htmls}

    dataset = BoilerplateDataset()
    for page_id in sorted(assignment):
        html = htmls[page_id]
        gold_path = os.path.splitext(html)[0] + '.txt'
        if not os.path.exists(gold_path):
            raise MissingGold(f"页面 {page_id} 缺少标注文件 {gold_path}")
        with open(gold_path, 'r', encoding='utf-8', errors='replace') as f:
            gold = f.read()
        if cleaneval_gold:
            gold = clean_cleaneval_gold(gold)
        dataset.split(assignment[page_id]).append(BoilerplatePage(page_id, html, gold))

    logger.info(f"正文抽取数据集: train {len(dataset.train)} / dev {len(dataset.dev)} / test {len(dataset.test)}")
    return dataset


# ---------------------------------------------------------------- 体裁数据集

@dataclass(frozen=True)
class GenrePage:
    page_id: str
    html_path: str
    label: int


def load_genre_dataset(directory: str) -> Tuple[List[GenrePage], List[str]]:
    """每个子目录是一个类别；返回 (页面列表, 按名称排序的类别名)"""
    if not os.path.isdir(directory):
        raise ConfigError(f"数据集目录不存在: {directory}")
    classes = sorted(d for d in os.listdir(directory) if os.path.isdir(os.path.join(directory, d)))
    if len(classes) < 2:
        raise ConfigError(f"体裁数据集至少需要 2 个类别目录: {directory}")
    pages = []
    for label, name in enumerate(classes):
        for html in _html_files(os.path.join(directory, name)):
            pages.append(GenrePage(_page_id(directory, html), html, label))
    pages.sort(key=lambda p: p.page_id)
    logger.info(f"体裁数据集: {len(pages)} 个页面，{len(classes)} 个类别")
    return pages, classes


# ---------------------------------------------------------------- 图序列化

def _encode_graph(graph: PageGraph) -> bytes:
    w = Writer()
    w.text(graph.page_id)
    w.text(graph.schema_hash)
    features = np.ascontiguousarray(graph.features, dtype='<f4')
    w.u32(features.shape[0])
    w.u32(features.shape[1])
    w.raw(features.tobytes())
    for kind in EDGE_TYPES:
        e = np.ascontiguousarray(graph.edges[kind], dtype='<i4').reshape(-1, 2)
        w.u64(e.shape[0])
        w.raw(e.tobytes())
    for meta in graph.node_meta:
        w.text(meta.tag_name)
        w.u32(1 if meta.has_text else 0)
        w.text(meta.text)
        w.text(meta.source_span)
    return w.getvalue()


def _decode_graph(body: bytes) -> PageGraph:
    r = Reader(body)
    page_id = r.text()
    schema_hash = r.text()
    n, width = r.u32(), r.u32()
    features = np.frombuffer(r.raw(n * width * 4), dtype='<f4').reshape(n, width).astype(np.float32)
    edges = {}
    for kind in EDGE_TYPES:
        count = r.u64()
        edges[kind] = np.frombuffer(r.raw(count * 8), dtype='<i4').reshape(count, 2).astype(np.int32)
    meta = tuple(NodeMeta(tag_name=r.text(), has_text=bool(r.u32()), text=r.text(), source_span=r.text())
                 for _ in range(n))
    if not r.done():
        raise CorruptRecord("图记录末尾有多余数据")
    return PageGraph(features=features, edges=edges, node_meta=meta, page_id=page_id, schema_hash=schema_hash)


def graph_to_bytes(graph: PageGraph) -> bytes:
    return pack_record(GRAPH_MAGIC, GRAPH_VERSION, _encode_graph(graph))


def graph_from_bytes(raw: bytes, expected_schema: Optional[str] = None) -> PageGraph:
    """expected_schema 不为空时，记录中的特征指纹必须与之相同"""
    graph = _decode_graph(unpack_record(raw, GRAPH_MAGIC, GRAPH_VERSION))
    if expected_schema and graph.schema_hash != expected_schema:
        raise SchemaMismatch(f"图记录 {graph.page_id or '<unnamed>'} 的特征指纹 {graph.schema_hash or '<none>'} "
                             f"与当前特征配置 {expected_schema} 不一致，请重新特征化")
    return graph


def save_graph(graph: PageGraph, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as f:
        f.write(graph_to_bytes(graph))
    return path


def load_graph(path: str, expected_schema: Optional[str] = None) -> PageGraph:
    with open(path, 'rb') as f:
        return graph_from_bytes(f.read(), expected_schema)


def graph_roundtrip(graph: PageGraph) -> PageGraph:
    """序列化后立即反序列化"""
    return graph_from_bytes(graph_to_bytes(graph))


def graphs_equal(a: PageGraph, b: PageGraph) -> bool:
    """逐位比较特征、边与节点元数据"""
    if a.page_id != b.page_id or a.schema_hash != b.schema_hash or a.node_meta != b.node_meta:
        return False
    if a.features.shape != b.features.shape or a.features.tobytes() != b.features.tobytes():
        return False
    return all(np.array_equal(a.edges[k], b.edges[k]) for k in EDGE_TYPES)


def dump_graph_jsonl(graph: PageGraph, path: str) -> str:
    """人工检查用：每个节点一行 JSON (元数据与非零特征下标)"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for i, meta in enumerate(graph.node_meta):
            row = graph.features[i]
            nonzero = np.flatnonzero(row)
            record = {
                'index': i,
                'tag': meta.tag_name,
                'path': meta.source_span,
                'has_text': meta.has_text,
                'text': meta.text[:200],
                'nonzero': nonzero.tolist(),
                'children': graph.edges['child'][graph.edges['child'][:, 0] == i, 1].tolist(),
            }
            f.write(json.dumps(record, ensure_ascii=False) + '\n')
    return path


def load_graph_dir(directory: str, expected_schema: Optional[str] = None) -> List[PageGraph]:
    """按 page_id 顺序读取目录下全部 .graph 文件"""
    paths = []
    for dirpath, _, filenames in os.walk(directory):
        paths.extend(os.path.join(dirpath, n) for n in filenames if n.endswith(GRAPH_SUFFIX))
    return [load_graph(p, expected_schema) for p in sorted(paths)]


# ---------------------------------------------------------------- 并行特征化

def featurize_pages(featurizer: Featurizer, items: Iterable[Tuple[str, str]],
                    jobs: int = 1) -> Tuple[Dict[str, PageGraph], List[str]]:
    """
    并发特征化 (page_id, html 路径)
    解析失败的页面记录警告并跳过；返回 (page_id -> 图, 失败的 page_id 列表)
    """
    items = list(items)
    graphs: Dict[str, PageGraph] = {}
    failed: List[str] = []
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        future_to_id = {executor.submit(featurizer.featurize_file, path, page_id): page_id
                        for page_id, path in items}
        for future in as_completed(future_to_id):
            page_id = future_to_id[future]
            try:
                graphs[page_id] = future.result()
            except Exception as e:
                logger.warning(f"页面特征化失败，已跳过: {page_id} - {e}")
                failed.append(page_id)
    return graphs, sorted(failed)


def html_page_items(directory: str) -> List[Tuple[str, str]]:
    """目录下所有 HTML 的 (page_id, 路径)，page_id 为去掉扩展名的相对路径"""
    if not os.path.isdir(directory):
        raise ConfigError(f"输入目录不存在: {directory}")
    return [(_page_id(directory, p), p) for p in _html_files(directory)]


def featurize_directory(in_dir: str, out_dir: str, featurizer: Featurizer, jobs: int = 1) -> Dict:
    """
    把目录下所有 HTML 特征化为 .graph 文件，保持相对路径

    Returns:
        {'pages': 成功数, 'failed': 失败的 page_id, 'out_dir': 输出目录}
    """
    items = html_page_items(in_dir)
    logger.info(f"开始特征化 {len(items)} 个页面，并发数 {jobs}")
    graphs, failed = featurize_pages(featurizer, items, jobs)
    for page_id in sorted(graphs):
        save_graph(graphs[page_id], os.path.join(out_dir, page_id + GRAPH_SUFFIX))
    logger.info(f"特征化完成: 成功 {len(graphs)} 个，失败 {len(failed)} 个")
    return {'pages': len(graphs), 'failed': failed, 'out_dir': out_dir}
