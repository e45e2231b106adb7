"""
异常定义模块
项目内所有可预期的失败类型，调度器统一捕获后转换为任务结果
"""


class GrownupError(Exception):
    """所有项目异常的基类"""


class ConfigError(GrownupError, ValueError):
    """配置值非法"""


class EmptyDocument(GrownupError, ValueError):
    """HTML中无法恢复出任何元素"""


class ShapeMismatch(GrownupError, ValueError):
    """张量形状不兼容"""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: 形状不兼容 {', '.join(str(tuple(s)) for s in shapes)}")


class NotScalarLoss(GrownupError, ValueError):
    """backward 只能从标量开始"""


class NonFinite(GrownupError, FloatingPointError):
    """调试模式下出现 NaN/Inf"""


class SingleSiteBatch(GrownupError, ValueError):
    """批次内只有一个网站，无法构造负样本"""


class ClassTooSmall(GrownupError, ValueError):
    """某类别样本数少于折数"""


class ZeroEmbedding(GrownupError, ValueError):
    """读出向量范数为0"""


class EmptyCorpus(GrownupError, ValueError):
    """没有任何页面可评估"""


class DegenerateSample(GrownupError, ValueError):
    """样本方差为0，检验无定义"""


class InvalidP(GrownupError, ValueError):
    """p值不在 (0, 1] 内"""


class MalformedUrl(GrownupError, ValueError):
    """URL无法解析出域名"""


class MissingGold(GrownupError, FileNotFoundError):
    """页面缺少对应的标注文本"""


class SplitMismatch(GrownupError, ValueError):
    """划分清单与目录内容不一致"""


class VersionMismatch(GrownupError, ValueError):
    """记录文件版本不受支持"""


class CorruptRecord(GrownupError, ValueError):
    """记录文件损坏或被截断"""


class SchemaMismatch(GrownupError, ValueError):
    """图记录的特征指纹与当前特征配置不一致"""
