"""
优化器与学习率调度模块
AdamW（解耦权重衰减，wd=0 时即为 Adam）与带热重启的余弦退火
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .numerics import Tensor

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """优化器状态：一阶/二阶矩估计与步数"""
    lr: float = 0.001
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    schedule: str = 'constant'
    t0: int = 5
    t_mult: int = 1
    eta_min: float = 0.0

    @classmethod
    def from_config(cls, cfg: Dict) -> 'OptimizerState':
        return cls(lr=cfg['lr'], weight_decay=cfg.get('weight_decay', 0.0),
                   beta1=cfg.get('beta1', 0.9), beta2=cfg.get('beta2', 0.999), eps=cfg.get('eps', 1e-8),
                   schedule=cfg.get('schedule', 'constant'), t0=cfg.get('t0', 5),
                   t_mult=cfg.get('t_mult', 1), eta_min=cfg.get('eta_min', 0.0))

    def init(self, params: Dict[str, Tensor]):
        """按参数形状初始化矩估计"""
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)


def adamw_step(state: OptimizerState, params: Dict[str, Tensor],
               grads: Optional[Dict[str, np.ndarray]] = None, lr: Optional[float] = None):
    """
    执行一步 AdamW，原地更新参数

    Args:
        state: 优化器状态，step 自增
        params: 参数名到张量
        grads: 参数名到梯度；缺省时读取各参数的 .grad，没有梯度的参数只做权重衰减
        lr: 本步学习率，缺省使用 state.lr
    """
    state.init(params)
    state.step += 1
    lr = state.lr if lr is None else lr
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step

    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if state.weight_decay:
            # 解耦权重衰减：直接缩放参数而非梯度
            p.data *= (1.0 - lr * state.weight_decay)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


def cosine_warm_restart_lr(step: float, base_lr: float, t0: int = 5, mult: int = 1,
                           eta_min: float = 0.0) -> float:
    """
    带热重启的余弦退火学习率

    η = η_min + ½(base_lr − η_min)(1 + cos(π·T_cur/T_i))，每个周期结束时重启到 base_lr。
    step 以轮次计，可为小数。
    """
    if t0 < 1 or mult < 1:
        raise ValueError("t0 与 mult 必须 >= 1")
    step = max(float(step), 0.0)
    if mult == 1:
        t_i = float(t0)
        t_cur = math.fmod(step, t_i)
    else:
        n = int(math.floor(math.log(step / t0 * (mult - 1) + 1, mult)))
        t_i = float(t0 * mult ** n)
        t_cur = step - t0 * (mult ** n - 1) / (mult - 1)
        if t_cur >= t_i:
            # 浮点误差落在边界上
            t_cur -= t_i
            t_i *= mult
    return eta_min + 0.5 * (base_lr - eta_min) * (1.0 + math.cos(math.pi * t_cur / t_i))


def scheduled_lr(state: OptimizerState, epoch: float) -> float:
    if state.schedule == 'cosine_restarts':
        return cosine_warm_restart_lr(epoch, state.lr, state.t0, state.t_mult, state.eta_min)
    return state.lr


def smooth_binary_labels(y: np.ndarray, alpha: float = 0.01) -> np.ndarray:
    """二分类标签平滑：y' = y(1−α) + α/2"""
    return np.asarray(y, dtype=np.float64) * (1.0 - alpha) + alpha / 2.0
