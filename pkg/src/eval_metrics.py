"""
评估指标模块
基于最长公共子序列 (LCS) 的正文抽取准确率/召回率，以及显著性检验工具
"""
import logging
import unicodedata
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from .errors import DegenerateSample, EmptyCorpus, InvalidP, MissingGold, SplitMismatch

logger = logging.getLogger(__name__)


def tokenize(text: str) -> List[str]:
    """NFC 归一化后按空白切分，不做大小写与标点处理"""
    if not text:
        return []
    return unicodedata.normalize('NFC', text).split()


def _as_ids(a: Sequence[str], b: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    vocab: Dict[str, int] = {}
    ids_a = np.array([vocab.setdefault(t, len(vocab)) for t in a], dtype=np.int64)
    ids_b = np.array([vocab.setdefault(t, len(vocab)) for t in b], dtype=np.int64)
    return ids_a, ids_b


def _next_row(prev: np.ndarray, token: int, ids_b: np.ndarray) -> np.ndarray:
    # L[i][j] = max(L[i-1][j], L[i-1][j-1] + match, L[i][j-1])，最后一项由前缀最大值得到
    candidate = prev.copy()
    candidate[1:] = np.maximum(prev[1:], prev[:-1] + (ids_b == token))
    return np.maximum.accumulate(candidate)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """LCS 长度，只保留一行 DP，内存 O(|b|)"""
    if not a or not b:
        return 0
    if len(b) > len(a):
        a, b = b, a
    ids_a, ids_b = _as_ids(a, b)
    row = np.zeros(len(ids_b) + 1, dtype=np.int64)
    for token in ids_a:
        row = _next_row(row, token, ids_b)
    return int(row[-1])


def lcs_alignment(a: Sequence[str], b: Sequence[str]) -> np.ndarray:
    """
    返回 a 中参与某一条最长公共子序列的位置掩码
    需要完整 DP 表用于回溯
    """
    matched = np.zeros(len(a), dtype=bool)
    if not a or not b:
        return matched
    ids_a, ids_b = _as_ids(a, b)
    n, m = len(ids_a), len(ids_b)
    dtype = np.uint16 if min(n, m) < np.iinfo(np.uint16).max else np.int32
    table = np.zeros((n + 1, m + 1), dtype=dtype)
    for i in range(1, n + 1):
        table[i] = _next_row(table[i - 1].astype(np.int64), ids_a[i - 1], ids_b)

    i, j = n, m
    while i > 0 and j > 0:
        if ids_a[i - 1] == ids_b[j - 1] and int(table[i, j]) == int(table[i - 1, j - 1]) + 1:
            matched[i - 1] = True
            i -= 1
            j -= 1
        elif table[i - 1, j] >= table[i, j - 1]:
            i -= 1
        else:
            j -= 1
    return matched


def lcs_precision_recall(extracted: str, gold: str) -> Tuple[float, float]:
    """
    P = |LCS| / |extracted|，R = |LCS| / |gold|
    两者都为空记 (1, 1)，只有一方为空记 (0, 0)
    """
    a, b = tokenize(extracted), tokenize(gold)
    if not a and not b:
        return 1.0, 1.0
    if not a or not b:
        return 0.0, 0.0
    common = lcs_length(a, b)
    return common / len(a), common / len(b)


@dataclass
class EvalReport:
    per_page: List[Tuple[float, float]]
    corpus_precision: float
    corpus_recall: float
    corpus_f1: float
    n_pages: int
    page_ids: List[str] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        ids = self.page_ids or [str(i) for i in range(self.n_pages)]
        return pd.DataFrame({
            'page_id': ids,
            'precision': [p for p, _ in self.per_page],
            'recall': [r for _, r in self.per_page],
        })

    def to_dict(self) -> Dict[str, Any]:
        return {
            'metric': 'LCS Micro-F1',
            'n_pages': self.n_pages,
            'precision': self.corpus_precision,
            'recall': self.corpus_recall,
            'f1': self.corpus_f1,
            'per_page': [
                {'page_id': pid, 'precision': p, 'recall': r}
                for pid, (p, r) in zip(self.page_ids or [str(i) for i in range(self.n_pages)], self.per_page)
            ],
        }


def corpus_f1(per_page: Sequence[Tuple[float, float]], page_ids: Optional[Sequence[str]] = None) -> EvalReport:
    """逐页 P/R 取算术平均后求调和平均"""
    if not per_page:
        raise EmptyCorpus("没有任何页面可评估")
    values = np.asarray(per_page, dtype=np.float64).reshape(-1, 2)
    p_bar, r_bar = float(values[:, 0].mean()), float(values[:, 1].mean())
    f1 = 0.0 if p_bar + r_bar == 0 else 2 * p_bar * r_bar / (p_bar + r_bar)
    return EvalReport(per_page=[(float(p), float(r)) for p, r in values], corpus_precision=p_bar,
                      corpus_recall=r_bar, corpus_f1=f1, n_pages=len(values),
                      page_ids=list(page_ids) if page_ids is not None else [])


def evaluate_texts(predictions: Dict[str, str], gold: Dict[str, str]) -> EvalReport:
    """按 page_id 对齐预测与标注并计算语料级指标"""
    no_gold = sorted(set(predictions) - set(gold))
    if no_gold:
        raise MissingGold(f"{len(no_gold)} 个预测页面缺少标注，例如 {no_gold[0]}")
    no_pred = sorted(set(gold) - set(predictions))
    if no_pred:
        raise SplitMismatch(f"预测与标注数量不一致: 预测 {len(predictions)} 个，标注 {len(gold)} 个，"
                            f"例如缺少 {no_pred[0]}")
    ids = sorted(gold)
    return corpus_f1([lcs_precision_recall(predictions[i], gold[i]) for i in ids], page_ids=ids)


# ---------------------------------------------------------------- 显著性检验

def welch_t(sample_a: Sequence[float], sample_b: Sequence[float]) -> float:
    """双侧 Welch t 检验的 p 值"""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DegenerateSample("两组样本都至少需要 2 个值")
    if np.var(a, ddof=1) == 0 and np.var(b, ddof=1) == 0:
        raise DegenerateSample("两组样本方差均为 0")
    _, p_value = stats.ttest_ind(a, b, equal_var=False)
    return float(p_value)


def fisher_combined(p_values: Sequence[float]) -> float:
    """Fisher 合并检验：X = -2 Σ ln p 服从自由度 2k 的卡方分布"""
    ps = np.asarray(list(p_values), dtype=np.float64)
    if ps.size == 0:
        raise InvalidP("p 值列表为空")
    if np.any(~np.isfinite(ps)) or np.any(ps <= 0.0) or np.any(ps > 1.0):
        raise InvalidP(f"p 值必须在 (0, 1] 内: {ps.tolist()}")
    statistic = float(-2.0 * np.log(ps).sum())
    return float(stats.chi2.sf(statistic, 2 * ps.size))


def corrected_paired_t(diffs: Sequence[float], n_train: int, n_test: int) -> float:
    """
    交叉验证的校正配对 t 检验
    t = d̄ / sqrt((1/J + n_test/n_train) s²)，自由度 J-1
    """
    d = np.asarray(diffs, dtype=np.float64)
    J = d.size
    if J < 2:
        raise DegenerateSample("差值个数至少为 2")
    if n_train <= 0:
        raise DegenerateSample("n_train 必须为正数")
    mean = float(d.mean())
    var = float(d.var(ddof=1))
    if var == 0.0:
        if mean == 0.0:
            return 1.0
        raise DegenerateSample("差值方差为 0 且均值非 0，t 统计量无定义")
    t = mean / np.sqrt((1.0 / J + n_test / n_train) * var)
    return float(2.0 * stats.t.sf(abs(t), J - 1))


def compare_reports(reports_a: Sequence[Dict[str, Any]], reports_b: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    """
    比较两个模型在多个数据集上的结果
    boilerplate 报告 (多次重复的 F1) 用 Welch 检验，cv 报告 (逐折准确率) 用校正配对 t 检验，
    最后用 Fisher 方法合并得到全局 p 值
    """
    by_name_b = {r['dataset']: r for r in reports_b}
    rows = []
    for ra in reports_a:
        name = ra['dataset']
        rb = by_name_b.get(name)
        if rb is None:
            raise SplitMismatch(f"第二组报告缺少数据集 {name}")
        if ra.get('kind') != rb.get('kind'):
            raise SplitMismatch(f"数据集 {name} 的报告类型不一致")
        if ra['kind'] == 'cv':
            if len(ra['scores']) != len(rb['scores']):
                raise SplitMismatch(f"数据集 {name} 的折数不一致")
            diffs = np.asarray(ra['scores']) - np.asarray(rb['scores'])
            p = corrected_paired_t(diffs, ra['n_train'], ra['n_test'])
            test = 'corrected_paired_t'
        else:
            p = welch_t(ra['scores'], rb['scores'])
            test = 'welch_t'
        rows.append({'dataset': name, 'test': test, 'mean_a': float(np.mean(ra['scores'])),
                     'mean_b': float(np.mean(rb['scores'])), 'p_value': p})
        logger.info(f"{name}: {test} p = {p:.4g}")
    if not rows:
        raise EmptyCorpus("没有可比较的数据集")
    # p 值下溢为 0 时按最小正数计
    global_p = fisher_combined([max(r['p_value'], np.finfo(float).tiny) for r in rows])
    return {'datasets': rows, 'global_p_value': global_p}
