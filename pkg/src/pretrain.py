"""
自监督预训练模块
遮蔽节点特征预测 + 同网站判别，两个目标同时优化
"""
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .checkpoint import save_checkpoint
from .errors import ConfigError, SingleSiteBatch
from .html_graph import CHILD_INDEX_CLASSES, SCHEMA, TAG_VOCAB_VERSION, PageGraph, flip_pe_signs, load_tag_vocab
from .logger import MetricsWriter
from .model import ExtractorOutput, FeatureExtractor, ModelConfig
from .numerics import Tensor
from .optim import OptimizerState, adamw_step
from .text_encoder import TEXT_DIM

logger = logging.getLogger(__name__)

FEATURE_TARGETS = ('tag', 'child', 'text', 'class', 'id')
TAG_CLASSES = SCHEMA.span('tag_type').stop - SCHEMA.span('tag_type').start
SIM_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    sim: float = 0.05
    tag: float = 0.2
    text: float = 0.5
    id: float = 0.05
    class_: float = 0.1
    child: float = 0.1

    @classmethod
    def from_dict(cls, values: Dict[str, float]) -> 'LossWeights':
        values = dict(values)
        if 'class' in values:
            values['class_'] = values.pop('class')
        return cls(**values)

    def coefficient(self, name: str) -> float:
        return self.class_ if name == 'class' else getattr(self, name)

    def as_vector(self) -> Tuple[float, ...]:
        """(sim, tag, text, id, class, child)"""
        return self.sim, self.tag, self.text, self.id, self.class_, self.child


@dataclass
class MaskPlan:
    selected: np.ndarray                 # M 个互不相同的节点下标
    masked: np.ndarray                   # 每个被选节点是否被置零
    ground_truth: Dict[str, np.ndarray]  # 遮蔽前的目标

    def __len__(self):
        return int(self.selected.shape[0])


@dataclass
class PagePair:
    page_a: PageGraph
    page_b: PageGraph
    site_a: str
    site_b: str
    label: int = 1


def _num_children(graph: PageGraph) -> np.ndarray:
    counts = np.zeros(graph.n_nodes, dtype=np.int64)
    child = graph.edges['child']
    if len(child):
        np.add.at(counts, child[:, 0].astype(np.int64), 1)
    return counts


def select_and_mask(graph: PageGraph, M: int = 16, rng: Optional[np.random.Generator] = None,
                    mask_prob: float = 0.85) -> Tuple[PageGraph, MaskPlan]:
    """
    均匀选取 min(M, N) 个节点，每个以 mask_prob 的概率整行置零 (含位置编码)；
    未被置零的节点保持原样，所有被选节点都参与预测损失
    """
    rng = rng if rng is not None else np.random.default_rng()
    n = graph.n_nodes
    m = max(0, min(M, n))
    selected = np.sort(rng.choice(n, size=m, replace=False)) if m else np.zeros(0, dtype=np.int64)
    masked = rng.random(m) < mask_prob

    rows = graph.features[selected]
    text_span = SCHEMA.span('text')
    truth = {
        'tag': np.argmax(rows[:, SCHEMA.span('tag_type')], axis=1) if m else np.zeros(0, dtype=np.int64),
        'child': np.minimum(_num_children(graph)[selected], CHILD_INDEX_CLASSES - 1),
        'text': rows[:, text_span.start:text_span.start + TEXT_DIM].copy(),
        'class': rows[:, SCHEMA.span('class')].copy(),
        'id': rows[:, SCHEMA.span('id')].copy(),
    }
    features = np.array(graph.features)
    features[selected[masked]] = 0.0
    return graph.with_features(features), MaskPlan(selected=selected, masked=masked, ground_truth=truth)


# ---------------------------------------------------------------- 损失

def cross_entropy(x: Tensor, y) -> Tensor:
    """L = -Σ y log x，x 为 softmax 输出，log 截断在 1e-12；多行时逐行求和"""
    return nx.mul(nx.sum(nx.mul(nx.as_tensor(y), nx.log(x, floor=1e-12))), -1.0)


def cosine_loss(x: Tensor, y) -> Tensor:
    """
    逐行 1 - cos(x, y) 之和；任一侧为零向量时该行记为 1
    """
    x = nx.as_tensor(x)
    y_data = np.asarray(nx.as_tensor(y).data)
    if x.ndim == 1:
        x = nx.reshape(x, (1, -1))
        y_data = y_data.reshape(1, -1)
    norms = np.sqrt((y_data * y_data).sum(axis=1, keepdims=True))
    zero_rows = int((norms.reshape(-1) == 0).sum() + (np.abs(x.data).sum(axis=1) == 0).sum())
    if zero_rows:
        logger.debug(f"cosine_loss: {zero_rows} 行为零向量，按正交处理")
    y_unit = np.where(norms > 0, y_data / np.where(norms > 0, norms, 1.0), 0.0)
    cos = nx.sum(nx.mul(nx.l2_normalize(x), y_unit), axis=1)
    return nx.sub(float(x.shape[0]), nx.sum(cos))


@dataclass
class PretrainHeads:
    """遮蔽特征的重投影头与同网站相似度投影"""
    weights: Dict[str, Tensor]
    k_sim: int

    @classmethod
    def create(cls, K: int, k_sim: int, rng: np.random.Generator) -> 'PretrainHeads':
        k_sim = k_sim or K
        shapes = {
            'tag': (K, TAG_CLASSES), 'child': (K, CHILD_INDEX_CLASSES),
            'text': (K, TEXT_DIM), 'class': (K, TEXT_DIM), 'id': (K, TEXT_DIM), 'sim': (K, k_sim),
        }
        weights = {}
        for name in sorted(shapes):
            fan_in, fan_out = shapes[name]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights[f"{name}.W"] = nx.parameter(rng.uniform(-limit, limit, size=shapes[name]), name=f"{name}.W")
            weights[f"{name}.b"] = nx.parameter(np.zeros(fan_out), name=f"{name}.b")
        return cls(weights=weights, k_sim=k_sim)

    def project(self, name: str, x: Tensor) -> Tensor:
        return nx.add(nx.matmul(x, self.weights[f"{name}.W"]), self.weights[f"{name}.b"])


def masked_feature_losses(output: ExtractorOutput, plan: MaskPlan, heads: PretrainHeads) -> Dict[str, Tensor]:
    """
    每类目标在被选节点上的损失之和 (不取平均)
    tag/child 用 softmax 交叉熵，text/class/id 用 tanh 输出的余弦损失
    """
    if len(plan) == 0:
        return {name: nx.Tensor(0.0) for name in FEATURE_TARGETS}
    x = nx.gather_rows(output.node_features, plan.selected)
    losses = {}
    for name, n_classes in (('tag', TAG_CLASSES), ('child', CHILD_INDEX_CLASSES)):
        probs = nx.softmax(heads.project(name, x))
        losses[name] = cross_entropy(probs, nx.one_hot(plan.ground_truth[name], n_classes))
    for name in ('text', 'class', 'id'):
        losses[name] = cosine_loss(nx.tanh(heads.project(name, x)), plan.ground_truth[name])
    return losses


def readout(output: ExtractorOutput, mode: str = 'mean') -> Tensor:
    """图级读出：节点均值或 CLS 行"""
    if mode == 'cls':
        if output.cls_feature is None:
            raise ConfigError("cls 读出需要 T >= 1")
        return output.cls_feature
    if mode != 'mean':
        raise ConfigError(f"未知的读出方式: {mode}")
    return nx.mean(output.node_features, axis=0)


def site_embedding(output: ExtractorOutput, heads: PretrainHeads, mode: str = 'mean') -> Tensor:
    """x̂ = tanh(readout · W + b)"""
    r = nx.reshape(readout(output, mode), (1, -1))
    return nx.reshape(nx.tanh(heads.project('sim', r)), (-1,))


def similarity_probability(xa: Tensor, xb: Tensor) -> Tensor:
    """z = max(cos(x̂₁, x̂₂), 0)，截断到 [1e-7, 1 - 1e-7]"""
    cos = nx.sum(nx.mul(nx.l2_normalize(xa), nx.l2_normalize(xb)))
    return nx.clamp(nx.maximum_scalar(cos, 0.0), SIM_CLAMP, 1.0 - SIM_CLAMP)


def similarity_bce(xa: Tensor, xb: Tensor, y: int) -> Tensor:
    z = similarity_probability(xa, xb)
    if y:
        return nx.mul(nx.log(z), -1.0)
    return nx.mul(nx.log(nx.sub(1.0, z)), -1.0)


def same_site_loss(out_a: ExtractorOutput, out_b: ExtractorOutput, y: int, heads: PretrainHeads,
                   mode: str = 'mean') -> Tensor:
    """L = -y log z - (1-y) log(1-z)"""
    return similarity_bce(site_embedding(out_a, heads, mode), site_embedding(out_b, heads, mode), y)


def joint_loss(sim_loss, losses_a: Dict[str, Any], losses_b: Dict[str, Any], weights: LossWeights) -> Tensor:
    """两页的各项特征损失与相似度损失按系数线性组合"""
    total = nx.mul(nx.as_tensor(sim_loss), weights.sim)
    for name in FEATURE_TARGETS:
        pair = nx.add(nx.as_tensor(losses_a[name]), nx.as_tensor(losses_b[name]))
        total = nx.add(total, nx.mul(pair, weights.coefficient(name)))
    return total


def permute_pairs(batch: Sequence[PagePair], rng: np.random.Generator,
                  pool: Optional[Sequence[PagePair]] = None) -> List[PagePair]:
    """
    批内负采样：随机保留 ⌊B/2⌋ 个正样本对，其余对的 page_b 换成批内其他网站的页面。
    批内只有一个网站时 (某个网站占语料绝大多数)，负样本页面改从 pool (本轮全部页面对) 中抽取；
    pool 中也只有这一个网站时抛出 SingleSiteBatch
    """
    donors: Sequence[PagePair] = batch
    if len({p.site_a for p in batch}) < 2:
        donors = [p for p in (pool or ()) if p.site_b != batch[0].site_a]
        if not donors:
            raise SingleSiteBatch(f"批次中的 {len(batch)} 个页面对都来自同一网站，无法构造负样本")
    B = len(batch)
    order = rng.permutation(B)
    positives = set(order[:B // 2].tolist())
    out = []
    for i, pair in enumerate(batch):
        if i in positives:
            out.append(PagePair(pair.page_a, pair.page_b, pair.site_a, pair.site_b, 1))
            continue
        candidates = [d for d in donors if d.site_b != pair.site_a]
        donor = candidates[int(rng.integers(len(candidates)))]
        out.append(PagePair(pair.page_a, donor.page_b, pair.site_a, donor.site_b, 0))
    return out


# ---------------------------------------------------------------- 训练

@dataclass
class SitePageGraph:
    page_id: str
    site_key: str
    graph: PageGraph


def make_site_pairs(pages: Sequence[SitePageGraph], rng: np.random.Generator,
                    partners: Optional[Sequence[SitePageGraph]] = None) -> List[PagePair]:
    """每个页面与同网站的另一个页面组成正样本对；partners 缺省时在 pages 内部找"""
    pool = list(partners) if partners is not None else list(pages)
    by_site: Dict[str, List[SitePageGraph]] = {}
    for p in pool:
        by_site.setdefault(p.site_key, []).append(p)
    pairs = []
    for page in pages:
        others = [p for p in by_site.get(page.site_key, []) if p.page_id != page.page_id]
        if not others:
            continue
        other = others[int(rng.integers(len(others)))]
        pairs.append(PagePair(page.graph, other.graph, page.site_key, other.site_key, 1))
    return pairs


def split_pages_by_site(pages: Sequence[SitePageGraph], ratio: float,
                        rng: np.random.Generator) -> Tuple[List[SitePageGraph], List[SitePageGraph]]:
    """按网站分层划分验证集：每个网站约取 ratio 的页面，训练集中每个网站至少留 2 页用于配对"""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"验证集比例必须在 [0, 1) 内，当前为 {ratio}")
    by_site: Dict[str, List[SitePageGraph]] = {}
    for p in pages:
        by_site.setdefault(p.site_key, []).append(p)
    dev_ids = set()
    for site in sorted(by_site):
        group = by_site[site]
        n_dev = min(int(round(len(group) * ratio)), max(len(group) - 2, 0))
        order = rng.permutation(len(group))
        dev_ids.update(group[i].page_id for i in order[:n_dev])
    train = [p for p in pages if p.page_id not in dev_ids]
    dev = [p for p in pages if p.page_id in dev_ids]
    return train, dev


def _chunk_pairs(pairs: List[PagePair], size: int) -> List[List[PagePair]]:
    """按批次切分，只含一个网站的尾批并入前一批"""
    batches = [pairs[i:i + size] for i in range(0, len(pairs), size)]
    if len(batches) > 1 and len({p.site_a for p in batches[-1]}) < 2:
        batches[-2].extend(batches.pop())
    return batches


@dataclass
class PretrainResult:
    checkpoint: Optional[str]
    best_epoch: int
    best_dev_loss: float
    history: List[Dict[str, Any]] = field(default_factory=list)


class Pretrainer:
    """预训练流程：同网站配对、遮蔽、联合损失、按验证集损失保存最优权重"""

    def __init__(self, model_config: ModelConfig, optimizer_config: Dict[str, Any],
                 pretrain_config: Dict[str, Any], seed: int = 0,
                 metrics: Optional[MetricsWriter] = None):
        self.logger = logging.getLogger(__name__)
        self.model_config = model_config
        self.optimizer_config = optimizer_config
        self.cfg = pretrain_config
        self.seed = seed
        self.metrics = metrics or MetricsWriter()
        self.loss_weights = LossWeights.from_dict(pretrain_config.get('loss_weights', {}))
        if pretrain_config.get('readout', 'mean') == 'cls' and model_config.T == 0:
            raise ConfigError("pretrain.readout=cls 需要 model.T >= 1")

        self.rng = np.random.default_rng(seed)
        self.extractor = FeatureExtractor(model_config, seed=seed)
        self.schema_hash = SCHEMA.schema_hash(load_tag_vocab(), 'hashed')
        self.heads = PretrainHeads.create(model_config.K, pretrain_config.get('k_sim', 0), self.rng)
        self.optimizer = OptimizerState.from_config(optimizer_config)

    def parameters(self) -> Dict[str, Tensor]:
        params = {f"extractor/{k}": v for k, v in self.extractor.weights.items()}
        params.update({f"heads/{k}": v for k, v in self.heads.weights.items()})
        return params

    def _pair_loss(self, pair: PagePair, rng: np.random.Generator, training: bool) -> Tuple[Tensor, Dict[str, float], float]:
        mode = 'train' if training else 'eval'
        outputs, component_sums = [], {name: 0.0 for name in FEATURE_TARGETS}
        losses = []
        for page in (pair.page_a, pair.page_b):
            if training and self.cfg.get('pe_sign_flip', False):
                page = flip_pe_signs(page, rng)
            masked, plan = select_and_mask(page, self.cfg['mask_nodes'], rng, self.cfg['mask_prob'])
            out = self.extractor(masked, mode, rng)
            parts = masked_feature_losses(out, plan, self.heads)
            for name in FEATURE_TARGETS:
                component_sums[name] += parts[name].item()
            outputs.append(out)
            losses.append(parts)

        if self.cfg.get('objective', 'joint') == 'mask_only':
            sim = nx.Tensor(0.0)
            weights = LossWeights(**{**asdict(self.loss_weights), 'sim': 0.0})
            z = 0.0
        else:
            readout_mode = self.cfg.get('readout', 'mean')
            xa = site_embedding(outputs[0], self.heads, readout_mode)
            xb = site_embedding(outputs[1], self.heads, readout_mode)
            z = similarity_probability(xa, xb).item()
            sim = similarity_bce(xa, xb, pair.label)
            weights = self.loss_weights
        component_sums['sim'] = sim.item()
        return joint_loss(sim, losses[0], losses[1], weights), component_sums, z

    def _train_epoch(self, train_pages: List[SitePageGraph], epoch: int) -> Dict[str, float]:
        pairs = make_site_pairs(train_pages, self.rng)
        if not pairs:
            raise SingleSiteBatch("训练集中没有任何网站包含 2 个以上页面，无法构造正样本对")
        order = self.rng.permutation(len(pairs))
        pairs = [pairs[i] for i in order]
        totals: Dict[str, float] = {}
        count = 0
        params = self.parameters()
        for batch in _chunk_pairs(pairs, self.cfg['batch_pairs']):
            if self.cfg.get('objective', 'joint') != 'mask_only':
                batch = permute_pairs(batch, self.rng, pool=pairs)
            nx.zero_grads(params.values())
            for pair in batch:
                loss, parts, _ = self._pair_loss(pair, self.rng, training=True)
                value = loss.item()
                nx.backward(nx.mul(loss, 1.0 / len(batch)))
                totals['joint'] = totals.get('joint', 0.0) + value
                for name, v in parts.items():
                    totals[name] = totals.get(name, 0.0) + v
                count += 1
            adamw_step(self.optimizer, params)
        return {k: v / max(count, 1) for k, v in totals.items()}

    def _dev_pairs(self, dev_pages: List[SitePageGraph], all_pages: List[SitePageGraph]) -> List[PagePair]:
        rng = np.random.default_rng(self.seed + 1)
        pairs = make_site_pairs(dev_pages, rng, partners=all_pages)
        if len({p.site_a for p in pairs}) >= 2 and self.cfg.get('objective', 'joint') != 'mask_only':
            pairs = permute_pairs(pairs, rng)
        return pairs

    def evaluate(self, pairs: List[PagePair]) -> Dict[str, float]:
        """验证集上的平均联合损失与同网站判别准确率 (z > 0.5 判为同网站)"""
        rng = np.random.default_rng(self.seed + 2)
        totals: Dict[str, float] = {}
        correct = 0
        with nx.no_grad():
            for pair in pairs:
                loss, parts, z = self._pair_loss(pair, rng, training=False)
                totals['joint'] = totals.get('joint', 0.0) + loss.item()
                for name, v in parts.items():
                    totals[name] = totals.get(name, 0.0) + v
                correct += int((z > 0.5) == bool(pair.label))
        n = max(len(pairs), 1)
        result = {k: v / n for k, v in totals.items()}
        result['same_site_accuracy'] = correct / n
        return result

    def run(self, pages: Sequence[SitePageGraph], out_path: Optional[str] = None,
            provenance: Optional[Dict[str, Any]] = None) -> PretrainResult:
        """
        按网站分层划分训练/验证集，训练 epochs 轮，验证损失最优时写出检查点
        """
        pages = sorted(pages, key=lambda p: p.page_id)
        self.schema_hash = next((p.graph.schema_hash for p in pages if p.graph.schema_hash), self.schema_hash)
        train_pages, dev_pages = split_pages_by_site(pages, self.cfg['dev_ratio'], self.rng)
        dev_pairs = self._dev_pairs(dev_pages, pages) if dev_pages else []
        if not dev_pairs:
            self.logger.warning("验证集无法构造页面对，改用训练损失选择模型")
        self.logger.info(f"预训练开始: 训练 {len(train_pages)} 页，验证 {len(dev_pages)} 页 "
                         f"({len(dev_pairs)} 对)，共 {self.cfg['epochs']} 轮")

        result = PretrainResult(checkpoint=None, best_epoch=-1, best_dev_loss=float('inf'))
        for epoch in range(1, self.cfg['epochs'] + 1):
            train_stats = self._train_epoch(train_pages, epoch)
            dev_stats = self.evaluate(dev_pairs) if dev_pairs else {}
            selection = dev_stats.get('joint', train_stats['joint'])
            record = self.metrics.write(
                'pretrain_epoch', epoch=epoch,
                train={k: round(v, 6) for k, v in train_stats.items()},
                dev={k: round(v, 6) for k, v in dev_stats.items()},
            )
            result.history.append(record)
            if selection < result.best_dev_loss:
                result.best_dev_loss = selection
                result.best_epoch = epoch
                if out_path:
                    result.checkpoint = self.save(out_path, provenance, epoch, selection)

        self.logger.info(f"预训练结束: 最优轮次 {result.best_epoch}，验证损失 {result.best_dev_loss:.4f}")
        return result

    def save(self, path: str, provenance: Optional[Dict[str, Any]], epoch: int, dev_loss: float) -> str:
        manifest = self.extractor.manifest(
            stage='pretrain',
            schema_hash=self.schema_hash,
            tag_vocab_version=TAG_VOCAB_VERSION,
            provenance={**(provenance or {}), 'epoch': epoch, 'best_dev_loss': dev_loss, 'seed': self.seed,
                        'pretrain_config': self.cfg},
        )
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        return save_checkpoint(path, self.parameters(), manifest=manifest, optimizer=self.optimizer, rng=self.rng)


def pretrain_run(pages: Sequence[SitePageGraph], model_config: ModelConfig, optimizer_config: Dict[str, Any],
                 pretrain_config: Dict[str, Any], seed: int = 0, out_path: Optional[str] = None,
                 metrics: Optional[MetricsWriter] = None,
                 provenance: Optional[Dict[str, Any]] = None) -> PretrainResult:
    return Pretrainer(model_config, optimizer_config, pretrain_config, seed, metrics).run(pages, out_path, provenance)
