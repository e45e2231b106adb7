"""
文本编码模块
把文本映射为 512 维单位向量；默认使用字符 3-5 gram 特征哈希，
也可从旁路文件读取预先导出的句向量（按文本 SHA-256 索引）
"""
import hashlib
import json
import logging
import os
from typing import Dict, Protocol

import numpy as np
from sklearn.feature_extraction.text import HashingVectorizer

from .errors import ConfigError

TEXT_DIM = 512


class TextEncoder(Protocol):
    """文本编码器接口：相同输入必须得到相同输出"""

    name: str

    def encode(self, text: str) -> np.ndarray:
        ...


def _normalize(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    norm = float(np.sqrt(np.dot(vec, vec)))
    if norm == 0.0:
        return np.zeros(TEXT_DIM, dtype=np.float32)
    return (vec / norm).astype(np.float32)


class HashedTextEncoder:
    """字符 n-gram 哈希编码，无状态、线程安全"""

    name = 'hashed'

    def __init__(self, dim: int = TEXT_DIM, ngram_range=(3, 5)):
        self.dim = dim
        # char_wb 会在词两侧补空格，短于3个字符的词也能产生 n-gram
        self.vectorizer = HashingVectorizer(
            analyzer='char_wb',
            ngram_range=ngram_range,
            n_features=dim,
            alternate_sign=False,
            norm=None,
            lowercase=True,
        )

    def encode(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            return np.zeros(self.dim, dtype=np.float32)
        counts = self.vectorizer.transform([text]).toarray()[0]
        return _normalize(counts)

    def encode_batch(self, texts) -> np.ndarray:
        """批量编码，结果与逐条 encode 一致"""
        texts = list(texts)
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        live = [i for i, t in enumerate(texts) if t and t.strip()]
        if not live:
            return out
        counts = self.vectorizer.transform([texts[i] for i in live]).toarray().astype(np.float64)
        norms = np.sqrt((counts * counts).sum(axis=1, keepdims=True))
        norms[norms == 0.0] = 1.0
        out[live] = (counts / norms).astype(np.float32)
        return out


class SidecarTextEncoder:
    """
    旁路文件编码器
    文件为 JSON lines（{"sha256": ..., "embedding": [...]}）或 .npz（键为 sha256）。
    未命中的文本回退到哈希编码。
    """

    def __init__(self, path: str, fallback: TextEncoder = None):
        self.path = path
        self.name = f"sidecar:{path}"
        self.logger = logging.getLogger(__name__)
        self.fallback = fallback or HashedTextEncoder()
        self.table: Dict[str, np.ndarray] = self._load(path)
        self.logger.info(f"旁路句向量加载完成: {path}, 共 {len(self.table)} 条")

    @staticmethod
    def text_key(text: str) -> str:
        return hashlib.sha256(text.encode('utf-8')).hexdigest()

    def _load(self, path: str) -> Dict[str, np.ndarray]:
        if not os.path.exists(path):
            raise ConfigError(f"旁路句向量文件不存在: {path}")
        table: Dict[str, np.ndarray] = {}
        if path.endswith('.npz'):
            with np.load(path) as data:
                for key in data.files:
                    table[key] = self._checked(key, data[key])
            return table
        with open(path, 'r', encoding='utf-8') as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                    table[record['sha256']] = self._checked(record['sha256'], record['embedding'])
                except (json.JSONDecodeError, KeyError) as e:
                    raise ConfigError(f"{path}:{lineno} 格式错误: {e}")
        return table

    @staticmethod
    def _checked(key: str, vec) -> np.ndarray:
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.shape[0] != TEXT_DIM or not np.all(np.isfinite(vec)):
            raise ConfigError(f"句向量 {key[:12]}… 维度必须为 {TEXT_DIM} 且为有限值")
        return _normalize(vec)

    def encode(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            return np.zeros(TEXT_DIM, dtype=np.float32)
        vec = self.table.get(self.text_key(text))
        if vec is None:
            self.logger.debug("旁路文件未命中，回退到哈希编码")
            return self.fallback.encode(text)
        return vec.copy()


def make_encoder(spec: str) -> TextEncoder:
    """根据 'hashed' 或 'sidecar:<path>' 构造编码器"""
    spec = (spec or 'hashed').strip()
    if spec == 'hashed':
        return HashedTextEncoder()
    if spec.startswith('sidecar:'):
        return SidecarTextEncoder(spec[len('sidecar:'):])
    raise ConfigError(f"未知的文本编码器: {spec}")
