"""
日志配置模块
负责配置和管理系统日志，以及按轮次写出结构化指标 (JSON lines)
"""
import json
import logging
import logging.handlers
import os
import threading
import time
from typing import Any, Dict, Optional

from .config import config

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DEFAULT_LOG_FILE = 'grownup.log'
_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')


def _resolve_level(raw: str) -> str:
    level = (raw or '').upper().strip()
    if level not in _LEVELS:
        print(f"警告: 无效的日志级别 '{raw}'，使用默认级别 'INFO'")
        return 'INFO'
    return level


def _resolve_file(raw: str) -> str:
    name = (raw or '').strip()
    if name in ('', '.', '/'):
        print(f"警告: 无效的日志文件名 '{raw}'，使用默认文件名 '{DEFAULT_LOG_FILE}'")
        return DEFAULT_LOG_FILE
    return name


def setup_logging(log_dir: Optional[str] = None, quiet: bool = False):
    """
    设置日志配置：轮转文件 + 控制台 (stderr)

    Args:
        log_dir: 日志目录，缺省取 logging.log_dir
        quiet: 控制台只输出 WARNING 及以上 (JSON 输出模式下使用)
    """
    log_config = config.get_logging_config()
    level_name = _resolve_level(log_config.get('log_level', 'INFO'))
    level = getattr(logging, level_name)

    log_dir = log_dir or log_config.get('log_dir', 'logs')
    os.makedirs(log_dir, exist_ok=True)
    log_file_path = os.path.join(log_dir, _resolve_file(log_config.get('log_file', DEFAULT_LOG_FILE)))
    formatter = logging.Formatter(LOG_FORMAT, datefmt='%Y-%m-%d %H:%M:%S')

    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)
        handler.close()

    file_handler = logging.handlers.RotatingFileHandler(log_file_path, maxBytes=10 * 1024 * 1024, backupCount=5,
                                                        encoding='utf-8')
    console_handler = logging.StreamHandler()
    console_handler.setLevel(max(level, logging.WARNING) if quiet else level)
    file_handler.setLevel(level)
    for handler in (file_handler, console_handler):
        handler.setFormatter(formatter)
        root_logger.addHandler(handler)

    logger = logging.getLogger(__name__)
    logger.info(f"GROWN+UP 网页图学习工具启动，日志级别 {level_name}，日志文件 {log_file_path}")


def _format_extra(kwargs: Dict[str, Any]) -> str:
    return "".join(f", {k}: {v}" for k, v in kwargs.items())


def log_task_start(task_name: str) -> float:
    """记录任务开始，返回单调时钟起点"""
    logging.getLogger('task').info(f"任务开始: {task_name}")
    return time.monotonic()


def log_task_end(task_name: str, start_time: float, **kwargs) -> float:
    """记录任务结束与耗时"""
    duration = time.monotonic() - start_time
    logging.getLogger('task').info(f"任务完成: {task_name}, 耗时: {duration:.2f}秒{_format_extra(kwargs)}")
    return duration


def log_error(task_name: str, error: Exception, **kwargs):
    """记录错误 (含堆栈)"""
    logging.getLogger('error').error(f"任务失败: {task_name}, {type(error).__name__}: {error}{_format_extra(kwargs)}",
                                     exc_info=True)


class MetricsWriter:
    """
    结构化指标写出器
    每个事件 (epoch / fold / step) 一行 JSON，同时以 INFO 级别记入日志。
    path 为 None 时只记日志。
    """

    def __init__(self, path: Optional[str] = None, logger_name: str = 'metrics'):
        self.path = path
        self.logger = logging.getLogger(logger_name)
        self._lock = threading.Lock()
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def write(self, event: str, **fields: Any) -> Dict[str, Any]:
        record = {'event': event}
        record.update({k: _jsonable(v) for k, v in fields.items()})
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        self.logger.info(line)
        if self.path:
            with self._lock, open(self.path, 'a', encoding='utf-8') as f:
                f.write(line + '\n')
        return record


def _jsonable(value: Any) -> Any:
    # numpy 标量与数组转换为原生类型
    if hasattr(value, 'tolist'):
        return value.tolist()
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value
