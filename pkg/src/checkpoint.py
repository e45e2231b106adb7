"""
权重检查点模块
参数路径 -> 形状 + 小端原始浮点，附带随机数状态、优化器状态与模型清单；
条目按名称排序写出，同样的内容在任何平台上字节一致
"""
import json
import logging
import os
from typing import Any, Dict, Optional

import numpy as np

from .errors import CorruptRecord
from .numerics import Tensor
from .optim import OptimizerState
from .records import Reader, Writer, pack_record, unpack_record

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'GUPCKPT\x00'
CHECKPOINT_VERSION = 1

_DTYPES = {0: np.dtype('<f4'), 1: np.dtype('<f8')}
_DTYPE_CODES = {np.dtype('float32'): 0, np.dtype('float64'): 1}


def _write_array(w: Writer, name: str, array: np.ndarray):
    array = np.ascontiguousarray(array)
    code = _DTYPE_CODES.get(array.dtype)
    if code is None:
        raise ValueError(f"不支持的参数类型 {array.dtype}: {name}")
    w.text(name)
    w.u32(code)
    w.u32(array.ndim)
    for dim in array.shape:
        w.u64(dim)
    w.raw(array.astype(_DTYPES[code], copy=False).tobytes())


def _read_array(r: Reader):
    name = r.text()
    code = r.u32()
    if code not in _DTYPES:
        raise CorruptRecord(f"未知的数据类型编码 {code}: {name}")
    ndim = r.u32()
    shape = tuple(r.u64() for _ in range(ndim))
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    data = np.frombuffer(r.raw(count * dtype.itemsize), dtype=dtype).reshape(shape)
    return name, data.astype(dtype.newbyteorder('='))


def save_checkpoint(path: str, params: Dict[str, Tensor], manifest: Optional[Dict[str, Any]] = None,
                    optimizer: Optional[OptimizerState] = None,
                    rng: Optional[np.random.Generator] = None) -> str:
    """
    保存检查点

    Returns:
        写出的文件路径
    """
    meta = {
        'manifest': manifest or {},
        'rng_state': rng.bit_generator.state if rng is not None else None,
        'optimizer': None,
    }
    arrays = {f"param/{name}": t.data for name, t in params.items()}
    if optimizer is not None:
        meta['optimizer'] = {
            'lr': optimizer.lr, 'weight_decay': optimizer.weight_decay, 'beta1': optimizer.beta1,
            'beta2': optimizer.beta2, 'eps': optimizer.eps, 'step': optimizer.step,
            'schedule': optimizer.schedule, 't0': optimizer.t0, 't_mult': optimizer.t_mult,
            'eta_min': optimizer.eta_min,
        }
        arrays.update({f"optim.m/{k}": v for k, v in optimizer.m.items()})
        arrays.update({f"optim.v/{k}": v for k, v in optimizer.v.items()})

    w = Writer()
    w.text(json.dumps(meta, sort_keys=True, ensure_ascii=False, default=_json_default))
    w.u32(len(arrays))
    for name in sorted(arrays):
        _write_array(w, name, arrays[name])

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as f:
        f.write(pack_record(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, w.getvalue()))
    logger.info(f"检查点已保存: {path} ({len(params)} 个参数张量)")
    return path


def load_checkpoint(path: str) -> Dict[str, Any]:
    """
    读取检查点

    Returns:
        {'params': 名称->ndarray, 'manifest': dict, 'optimizer': OptimizerState|None, 'rng_state': dict|None}
    """
    with open(path, 'rb') as f:
        body = unpack_record(f.read(), CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    r = Reader(body)
    try:
        meta = json.loads(r.text())
    except json.JSONDecodeError as e:
        raise CorruptRecord(f"检查点元数据损坏: {e}")
    params, moments_m, moments_v = {}, {}, {}
    for _ in range(r.u32()):
        name, data = _read_array(r)
        kind, _, key = name.partition('/')
        if kind == 'param':
            params[key] = data
        elif kind == 'optim.m':
            moments_m[key] = data
        elif kind == 'optim.v':
            moments_v[key] = data
    if not r.done():
        raise CorruptRecord("检查点末尾有多余数据")

    optimizer = None
    if meta.get('optimizer'):
        optimizer = OptimizerState(**meta['optimizer'])
        optimizer.m = moments_m
        optimizer.v = moments_v
    return {
        'params': params,
        'manifest': meta.get('manifest') or {},
        'optimizer': optimizer,
        'rng_state': meta.get('rng_state'),
    }


def restore_rng(rng_state: Optional[Dict[str, Any]], seed: int = 0) -> np.random.Generator:
    """从检查点中的状态恢复随机数生成器"""
    rng = np.random.default_rng(seed)
    if rng_state:
        rng.bit_generator.state = rng_state
    return rng


def _json_default(value):
    if hasattr(value, 'tolist'):
        return value.tolist()
    raise TypeError(f"无法序列化: {type(value)}")
