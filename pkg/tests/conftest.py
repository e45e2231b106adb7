"""
测试公共夹具：小页面、小模型配置、梯度检查工具
"""
import os

import numpy as np
import pytest

from src import numerics as nx
from src.config import config
from src.html_graph import DomNode, Featurizer, build_graph
from src.model import ModelConfig
from src.scheduler import scheduler
from src.text_encoder import HashedTextEncoder

TINY_HTML = b"""<!DOCTYPE html>
<html><head><title>t</title><style>p { color: red }</style></head>
<body>
  <div class="nav"><a href="/">Home</a><a href="/about">About us</a></div>
  <div class="article-body" id="main">
    <h2>Rivers and mountains</h2>
    <p>The river crossed the <b>old</b> valley during the early season.</p>
    <p style="font-style: italic">Local students studied the climate report.</p>
  </div>
  <!-- footer starts -->
  <div class="footer">Copyright 2021</div>
</body></html>"""

WORDS = ('river', 'valley', 'report', 'garden', 'market', 'engine', 'signal', 'museum')
TAGS = ('div', 'p', 'span', 'a', 'li', 'ul', 'b', 'td')


@pytest.fixture(autouse=True)
def isolated_run(tmp_path, monkeypatch):
    """每个测试使用独立的工作目录、配置与调度器运行目录"""
    for name in [k for k in os.environ if k.startswith('GROWNUP_')]:
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)
    config.reset()
    scheduler.run_dir = str(tmp_path / 'runs')
    yield
    config.reset()


@pytest.fixture
def float64():
    with nx.precision(np.float64):
        yield


@pytest.fixture(scope='session')
def encoder():
    return HashedTextEncoder()


@pytest.fixture(scope='session')
def featurizer(encoder):
    return Featurizer(encoder)


@pytest.fixture(scope='session')
def tiny_graph(featurizer):
    return featurizer.featurize_bytes(TINY_HTML, page_id='tiny')


@pytest.fixture
def small_config():
    return ModelConfig(S=2, T=1, K=8, N_h=2, input_hidden=0)


def random_tree(rng: np.random.Generator, n_nodes: int) -> DomNode:
    """随机 DOM 树：每个新节点挂到已有节点下，带随机文本"""
    root = DomNode(tag_name='html')
    nodes = [root]
    for _ in range(n_nodes - 1):
        parent = nodes[int(rng.integers(len(nodes)))]
        text = ' '.join(rng.choice(WORDS, size=int(rng.integers(0, 4))))
        child = parent.append(DomNode(tag_name=str(rng.choice(TAGS)), direct_text=text,
                                      attributes={'class': str(rng.choice(WORDS))}))
        nodes.append(child)
    return root


def random_graph(rng: np.random.Generator, encoder, n_nodes: int):
    return build_graph(random_tree(rng, n_nodes), encoder, page_id=f"random{n_nodes}")


def relative_gap(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """整体相对误差 ||a - n|| / (||a|| + ||n||)"""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-8))


def gradient_error(loss_fn, params, h: float = 1e-5) -> float:
    """
    反向传播梯度与中心差分的最大相对误差 (各参数取最大)
    loss_fn 每次调用都重新构建计算图
    """
    nx.zero_grads(params)
    nx.backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = nx.numerical_gradient(loss_fn, p, h)
        worst = max(worst, relative_gap(analytic, numeric))
    return worst
