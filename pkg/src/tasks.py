"""
下游任务模块
  正文抽取：标注对齐、节点二分类微调、按阈值抽取文本
  体裁分类：Li-ArcFace 角度间隔 logits、分层 K 折交叉验证
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.model_selection import StratifiedKFold

from . import numerics as nx
from .errors import ClassTooSmall, ConfigError, ZeroEmbedding
from .eval_metrics import corpus_f1, lcs_alignment, lcs_precision_recall, tokenize
from .html_graph import PageGraph
from .logger import MetricsWriter
from .model import ExtractorOutput, FeatureExtractor, ModelConfig, weights_from_arrays
from .numerics import Tensor
from .optim import OptimizerState, adamw_step, scheduled_lr, smooth_binary_labels
from .pretrain import readout

logger = logging.getLogger(__name__)


def _snapshot(params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def _restore(params: Dict[str, Tensor], arrays: Dict[str, np.ndarray]):
    for k, v in params.items():
        v.data[...] = arrays[k]


# ================================================================ 正文抽取

def align_ground_truth(page: PageGraph, gold_text: str, ratio: float = 0.5) -> Dict[int, int]:
    """
    把标注文本与页面文本节点对齐

    各文本节点的 token 按文档顺序拼接后与标注 token 求 LCS，
    节点中超过 ratio 的 token 落在 LCS 上即标为正文 (1)；没有 token 的节点不参与

    Returns:
        节点下标 -> 0/1，按文档顺序
    """
    nodes, owner, tokens = [], [], []
    for i in page.text_node_indices():
        node_tokens = tokenize(page.node_meta[i].text)
        if not node_tokens:
            continue
        nodes.append(i)
        owner.extend([len(nodes) - 1] * len(node_tokens))
        tokens.extend(node_tokens)
    gold = tokenize(gold_text)
    if not gold:
        return {i: 0 for i in nodes}

    matched = lcs_alignment(tokens, gold)
    hits = np.zeros(len(nodes), dtype=np.int64)
    sizes = np.zeros(len(nodes), dtype=np.int64)
    np.add.at(hits, owner, matched.astype(np.int64))
    np.add.at(sizes, owner, 1)
    return {node: int(hits[k] > ratio * sizes[k]) for k, node in enumerate(nodes)}


@dataclass
class BoilerplateHead:
    """K -> 1 线性投影 + sigmoid"""
    weights: Dict[str, Tensor]
    threshold: float = 0.5

    @classmethod
    def create(cls, K: int, rng: np.random.Generator, threshold: float = 0.5) -> 'BoilerplateHead':
        limit = math.sqrt(6.0 / (K + 1))
        return cls(weights={'bp.W': nx.parameter(rng.uniform(-limit, limit, size=(K, 1)), name='bp.W'),
                            'bp.b': nx.parameter(np.zeros(1), name='bp.b')},
                   threshold=threshold)

    def logits(self, node_features: Tensor) -> Tensor:
        return nx.reshape(nx.add(nx.matmul(node_features, self.weights['bp.W']), self.weights['bp.b']), (-1,))


def node_scores(page: PageGraph, extractor: FeatureExtractor, head: BoilerplateHead) -> np.ndarray:
    """每个节点的 sigmoid 分数 (推理模式)"""
    with nx.no_grad():
        out = extractor(page, 'eval')
        return nx.sigmoid(head.logits(out.node_features)).data.astype(np.float64)


def select_text(page: PageGraph, scores: np.ndarray, threshold: float = 0.5) -> str:
    """分数高于阈值的文本节点按文档顺序以单个空格连接"""
    return ' '.join(page.node_meta[i].text for i in page.text_node_indices() if scores[i] > threshold)


def extract_text(page: PageGraph, extractor: FeatureExtractor, head: BoilerplateHead) -> str:
    return select_text(page, node_scores(page, extractor, head), head.threshold)


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """mean(softplus(z) - y z)"""
    y = nx.Tensor(targets)
    return nx.mean(nx.sub(nx.softplus(logits), nx.mul(y, logits)))


@dataclass
class LabeledPage:
    page_id: str
    graph: PageGraph
    gold_text: str
    labels: Dict[int, int] = field(default_factory=dict)


@dataclass
class BoilerplateResult:
    extractor: FeatureExtractor
    head: BoilerplateHead
    best_epoch: int
    best_dev_f1: float
    history: List[Dict[str, Any]] = field(default_factory=list)


class BoilerplateTrainer:
    """
    正文抽取微调
    每批 batch_nodes 个跨页面抽样的文本节点，批内每个页面只前向一次；
    每轮结束在验证集上计算 LCS F1，保留最优权重
    """

    def __init__(self, extractor: FeatureExtractor, optimizer_config: Dict[str, Any],
                 task_config: Dict[str, Any], seed: int = 0, metrics: Optional[MetricsWriter] = None):
        self.logger = logging.getLogger(__name__)
        self.extractor = extractor
        self.cfg = task_config
        self.rng = np.random.default_rng(seed)
        self.head = BoilerplateHead.create(extractor.config.K, self.rng, task_config.get('threshold', 0.5))
        self.optimizer = OptimizerState.from_config(optimizer_config)
        self.metrics = metrics or MetricsWriter()

    def parameters(self) -> Dict[str, Tensor]:
        params = {f"extractor/{k}": v for k, v in self.extractor.weights.items()}
        params.update({f"head/{k}": v for k, v in self.head.weights.items()})
        return params

    def label(self, pages: Sequence[LabeledPage]) -> List[LabeledPage]:
        ratio = self.cfg.get('align_ratio', 0.5)
        for page in pages:
            if not page.labels:
                page.labels = align_ground_truth(page.graph, page.gold_text, ratio)
        return list(pages)

    def evaluate(self, pages: Sequence[LabeledPage]) -> Dict[str, float]:
        """LCS 指标，同时给出节点分类准确率 (仅用于诊断)"""
        per_page, correct, total = [], 0, 0
        for page in pages:
            scores = node_scores(page.graph, self.extractor, self.head)
            per_page.append(lcs_precision_recall(select_text(page.graph, scores, self.head.threshold), page.gold_text))
            for i, y in page.labels.items():
                correct += int((scores[i] > self.head.threshold) == bool(y))
                total += 1
        report = corpus_f1(per_page, [p.page_id for p in pages])
        return {'precision': report.corpus_precision, 'recall': report.corpus_recall, 'f1': report.corpus_f1,
                'node_accuracy': correct / total if total else 0.0}

    def _train_epoch(self, train: List[LabeledPage]) -> float:
        samples = [(p, i) for p, page in enumerate(train) for i in sorted(page.labels)]
        if not samples:
            raise ConfigError("训练集中没有任何带文本的节点")
        order = self.rng.permutation(len(samples))
        batch_nodes = self.cfg.get('batch_nodes', 128)
        alpha = self.cfg.get('label_smoothing', 0.01)
        dropout_mode = 'train'
        params = self.parameters()
        losses = []
        for start in range(0, len(order), batch_nodes):
            batch = [samples[k] for k in order[start:start + batch_nodes]]
            by_page: Dict[int, List[int]] = {}
            for p, i in batch:
                by_page.setdefault(p, []).append(i)
            nx.zero_grads(params.values())
            logits, targets = [], []
            for p in sorted(by_page):
                out = self.extractor(train[p].graph, dropout_mode, self.rng)
                nodes = np.asarray(by_page[p], dtype=np.int64)
                logits.append(nx.gather_rows(self.head.logits(out.node_features), nodes))
                targets.append([train[p].labels[i] for i in by_page[p]])
            z = logits[0] if len(logits) == 1 else nx.concat(logits, axis=0)
            y = smooth_binary_labels(np.concatenate([np.asarray(t, dtype=np.float64) for t in targets]), alpha)
            loss = binary_cross_entropy_with_logits(z, y)
            losses.append(loss.item())
            nx.backward(loss)
            adamw_step(self.optimizer, params)
        return float(np.mean(losses))

    def fit(self, train: Sequence[LabeledPage], dev: Sequence[LabeledPage]) -> BoilerplateResult:
        train, dev = self.label(train), self.label(dev)
        selection_set = dev if dev else train
        if not dev:
            self.logger.warning("没有验证页面，改用训练集 F1 选择模型")
        self.logger.info(f"正文抽取微调: 训练 {len(train)} 页 / 验证 {len(dev)} 页, "
                         f"lr {self.optimizer.lr}, dropout {self.extractor.config.dropout}")
        params = self.parameters()
        best = _snapshot(params)
        result = BoilerplateResult(self.extractor, self.head, best_epoch=0, best_dev_f1=-1.0)
        for epoch in range(1, self.cfg.get('epochs', 40) + 1):
            train_loss = self._train_epoch(train)
            dev_stats = self.evaluate(selection_set)
            record = self.metrics.write('boilerplate_epoch', epoch=epoch, train_loss=round(train_loss, 6),
                                        dev={k: round(v, 6) for k, v in dev_stats.items()})
            result.history.append(record)
            if dev_stats['f1'] > result.best_dev_f1:
                result.best_dev_f1 = dev_stats['f1']
                result.best_epoch = epoch
                best = _snapshot(params)
        _restore(params, best)
        self.logger.info(f"最优轮次 {result.best_epoch}，验证 F1 {result.best_dev_f1:.4f}")
        return result


def finetune_boilerplate(extractor: FeatureExtractor, train: Sequence[LabeledPage], dev: Sequence[LabeledPage],
                         optimizer_config: Dict[str, Any], task_config: Dict[str, Any], seed: int = 0,
                         metrics: Optional[MetricsWriter] = None) -> Tuple[BoilerplateTrainer, BoilerplateResult]:
    """训练后返回 (持有最佳模型与分类头的 trainer, 训练结果)"""
    trainer = BoilerplateTrainer(extractor, optimizer_config, task_config, seed, metrics)
    return trainer, trainer.fit(train, dev)


# ================================================================ 体裁分类

@dataclass
class GenreHead:
    """类别权重 K x C，使用时按列归一化"""
    weights: Dict[str, Tensor]
    n_classes: int
    scale: float = 5.0
    margin: float = 0.3
    readout: str = 'cls'

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigError("scale 必须为正数")
        if not 0.0 <= self.margin < math.pi / 2:
            raise ConfigError("margin 必须在 [0, π/2) 内")

    @classmethod
    def create(cls, K: int, n_classes: int, rng: np.random.Generator, scale: float = 5.0,
               margin: float = 0.3, readout: str = 'cls') -> 'GenreHead':
        W = rng.normal(0.0, 1.0 / math.sqrt(K), size=(K, n_classes))
        return cls(weights={'genre.W': nx.parameter(W, name='genre.W')}, n_classes=n_classes,
                   scale=scale, margin=margin, readout=readout)


def genre_logits(out: ExtractorOutput, head: GenreHead, target: Optional[int] = None) -> Tensor:
    """
    Li-ArcFace 线性角度 logits
    θ_c = arccos(ê·ŵ_c)，非目标类 s(π - 2θ_c)/π，目标类 s(π - 2(θ_y + m))/π；
    target 为 None (推理) 时不加间隔
    """
    e = readout(out, head.readout)
    if not np.any(e.data):
        raise ZeroEmbedding("读出向量范数为 0")
    e_hat = nx.l2_normalize(e)
    w_hat = nx.l2_normalize(nx.transpose(head.weights['genre.W']))
    cos = nx.reshape(nx.matmul(w_hat, nx.reshape(e_hat, (-1, 1))), (-1,))
    theta = nx.arccos(nx.clamp(cos, -1.0, 1.0))
    logits = nx.mul(nx.sub(math.pi, nx.mul(theta, 2.0)), head.scale / math.pi)
    if target is not None and head.margin:
        shift = np.zeros(head.n_classes)
        shift[target] = 2.0 * head.scale * head.margin / math.pi
        logits = nx.sub(logits, shift)
    return logits


def genre_loss(out: ExtractorOutput, head: GenreHead, target: int) -> Tensor:
    log_p = nx.log_softmax(genre_logits(out, head, target))
    return nx.mul(log_p[target], -1.0)


def predict_genre(page: PageGraph, extractor: FeatureExtractor, head: GenreHead) -> int:
    with nx.no_grad():
        return int(np.argmax(genre_logits(extractor(page, 'eval'), head).data))


@dataclass
class FoldSpec:
    n_folds: int
    folds: List[List[int]]
    seed: int

    def split(self, k: int) -> Tuple[List[int], List[int]]:
        """第 k 折作为测试集"""
        test = list(self.folds[k])
        train = sorted(i for j, fold in enumerate(self.folds) if j != k for i in fold)
        return train, test


def stratified_folds(labels: Sequence[int], n_folds: int = 10, seed: int = 0) -> FoldSpec:
    """分层 K 折 (StratifiedKFold，按 seed 打乱)，各类在每折中的数量最多相差 1"""
    labels = np.asarray(labels, dtype=np.int64)
    if n_folds < 2:
        raise ConfigError("n_folds 必须 >= 2")
    classes, counts = np.unique(labels, return_counts=True)
    small = [int(c) for c, n in zip(classes, counts) if n < n_folds]
    if small:
        raise ClassTooSmall(f"类别 {small} 的样本数少于折数 {n_folds}")
    splitter = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=seed)
    folds = [sorted(int(i) for i in test) for _, test in splitter.split(np.zeros((len(labels), 1)), labels)]
    return FoldSpec(n_folds=n_folds, folds=folds, seed=seed)


class GenreTrainer:
    """体裁分类训练：AdamW + 余弦热重启 (按轮次小数推进)"""

    def __init__(self, extractor: FeatureExtractor, head: GenreHead, optimizer_config: Dict[str, Any],
                 genre_config: Dict[str, Any], rng: np.random.Generator):
        self.logger = logging.getLogger(__name__)
        self.extractor = extractor
        self.head = head
        self.cfg = genre_config
        self.rng = rng
        self.optimizer = OptimizerState.from_config(optimizer_config)

    def parameters(self) -> Dict[str, Tensor]:
        params = {f"head/{k}": v for k, v in self.head.weights.items()}
        if not self.cfg.get('freeze_backbone', False):
            params.update({f"extractor/{k}": v for k, v in self.extractor.weights.items()})
        return params

    def _output(self, graph: PageGraph) -> ExtractorOutput:
        if not self.cfg.get('freeze_backbone', False):
            return self.extractor(graph, 'train', self.rng)
        with nx.no_grad():
            out = self.extractor(graph, 'eval')
        cls = None if out.cls_feature is None else nx.Tensor(out.cls_feature.data)
        return ExtractorOutput(node_features=nx.Tensor(out.node_features.data), cls_feature=cls)

    def fit(self, graphs: Sequence[PageGraph], labels: Sequence[int]) -> List[float]:
        params = self.parameters()
        batch_pages = max(1, self.cfg.get('batch_pages', 16))
        epochs = self.cfg.get('epochs', 35)
        n_batches = max(1, math.ceil(len(graphs) / batch_pages))
        history = []
        for epoch in range(epochs):
            order = self.rng.permutation(len(graphs))
            total = 0.0
            for b in range(n_batches):
                idx = order[b * batch_pages:(b + 1) * batch_pages]
                if len(idx) == 0:
                    continue
                nx.zero_grads(params.values())
                for i in idx:
                    loss = genre_loss(self._output(graphs[i]), self.head, int(labels[i]))
                    total += loss.item()
                    nx.backward(nx.mul(loss, 1.0 / len(idx)))
                adamw_step(self.optimizer, params, lr=scheduled_lr(self.optimizer, epoch + b / n_batches))
            history.append(total / max(len(graphs), 1))
        return history

    def accuracy(self, graphs: Sequence[PageGraph], labels: Sequence[int]) -> float:
        if not graphs:
            return 0.0
        hits = sum(int(predict_genre(g, self.extractor, self.head) == int(y)) for g, y in zip(graphs, labels))
        return hits / len(graphs)


def _fresh_extractor(model_config: ModelConfig, init_arrays: Optional[Dict[str, np.ndarray]],
                     seed: int) -> FeatureExtractor:
    if init_arrays is None:
        return FeatureExtractor(model_config, seed=seed)
    return FeatureExtractor(model_config, weights_from_arrays(model_config, init_arrays))


@dataclass
class CVReport:
    folds: pd.DataFrame
    mean_accuracy: float
    std_accuracy: float

    def to_dict(self, dataset: str = '') -> Dict[str, Any]:
        return {
            'kind': 'cv',
            'dataset': dataset,
            'mean_accuracy': self.mean_accuracy,
            'std_accuracy': self.std_accuracy,
            'scores': self.folds['accuracy'].tolist(),
            'n_train': int(self.folds['n_train'].mean()) if len(self.folds) else 0,
            'n_test': int(self.folds['n_test'].mean()) if len(self.folds) else 0,
            'folds': self.folds.to_dict(orient='records'),
        }


def kfold_cv(graphs: Sequence[PageGraph], labels: Sequence[int], n_classes: int, model_config: ModelConfig,
             optimizer_config: Dict[str, Any], genre_config: Dict[str, Any], seed: int = 0,
             init_arrays: Optional[Dict[str, np.ndarray]] = None,
             metrics: Optional[MetricsWriter] = None) -> CVReport:
    """
    重复 repeats 次的分层 K 折交叉验证，每次重复使用不同的折划分；
    每折从同一初始权重 (预训练或随机) 重新训练
    """
    metrics = metrics or MetricsWriter()
    n_folds = genre_config.get('n_folds', 10)
    repeats = genre_config.get('repeats', 3)
    if genre_config.get('readout', 'cls') == 'cls' and model_config.T == 0:
        raise ConfigError("genre.readout=cls 需要 model.T >= 1")
    rows = []
    for repeat in range(repeats):
        spec = stratified_folds(labels, n_folds, seed + repeat)
        for k in range(n_folds):
            run_seed = seed + 1000 * repeat + k
            rng = np.random.default_rng(run_seed)
            extractor = _fresh_extractor(model_config, init_arrays, run_seed)
            head = GenreHead.create(model_config.K, n_classes, rng, genre_config.get('scale', 5.0),
                                    genre_config.get('margin', 0.3), genre_config.get('readout', 'cls'))
            trainer = GenreTrainer(extractor, head, optimizer_config, genre_config, rng)
            train_idx, test_idx = spec.split(k)
            trainer.fit([graphs[i] for i in train_idx], [labels[i] for i in train_idx])
            acc = trainer.accuracy([graphs[i] for i in test_idx], [labels[i] for i in test_idx])
            row = {'repeat': repeat, 'fold': k, 'accuracy': acc, 'n_train': len(train_idx), 'n_test': len(test_idx)}
            metrics.write('cv_fold', **row)
            rows.append(row)
    frame = pd.DataFrame(rows, columns=['repeat', 'fold', 'accuracy', 'n_train', 'n_test'])
    mean = float(frame['accuracy'].mean())
    std = float(frame['accuracy'].std(ddof=1)) if len(frame) > 1 else 0.0
    logger.info(f"交叉验证完成: {len(frame)} 折，准确率 {mean:.4f} ± {std:.4f}")
    return CVReport(folds=frame, mean_accuracy=mean, std_accuracy=std)
