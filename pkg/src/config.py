"""
配置管理模块
合并默认值、实验预设、配置文件、GROWNUP_* 环境变量与命令行覆盖
"""
import os
import configparser
from typing import Dict, Any, Optional, Callable
from dotenv import load_dotenv

from .errors import ConfigError


# 各实验的超参数预设，键为点分格式 section.key
PROFILES: Dict[str, Dict[str, str]] = {
    'pretrain-default': {
        'optimizer.kind': 'adam',
        'optimizer.lr': '0.001',
        'optimizer.weight_decay': '0',
        'model.dropout': '0.0',
        'pretrain.epochs': '80',
        'pretrain.batch_pairs': '48',
        'pretrain.dev_ratio': '0.1',
        'pretrain.mask_nodes': '16',
        'pretrain.mask_prob': '0.85',
        'pretrain.objective': 'joint',
    },
    'cleaneval': {
        'optimizer.kind': 'adamw',
        'optimizer.lr': '0.002',
        'optimizer.weight_decay': '0.0001',
        'model.dropout': '0.3',
        'boilerplate.dev_pages': '5',
        'boilerplate.epochs': '40',
        'boilerplate.batch_nodes': '128',
        'boilerplate.label_smoothing': '0.01',
        'boilerplate.cleaneval_gold': 'true',
    },
    'dragnet': {
        'optimizer.kind': 'adamw',
        'optimizer.lr': '0.001',
        'optimizer.weight_decay': '0.0001',
        'model.dropout': '0.0',
        'boilerplate.dev_pages': '97',
        'boilerplate.epochs': '40',
        'boilerplate.batch_nodes': '128',
        'boilerplate.label_smoothing': '0.01',
        'boilerplate.cleaneval_gold': 'false',
    },
    '7web': {
        'optimizer.kind': 'adamw',
        'optimizer.lr': '0.002',
        'optimizer.weight_decay': '0.0001',
        'optimizer.schedule': 'cosine_restarts',
        'optimizer.t0': '5',
        'optimizer.t_mult': '1',
        'model.dropout': '0.3',
        'genre.epochs': '35',
        'genre.scale': '5.0',
        'genre.margin': '0.3',
        'genre.n_folds': '10',
        'genre.repeats': '3',
        'genre.readout': 'cls',
    },
}
PROFILES['ki04'] = dict(PROFILES['7web'])


def _to_bool(value: Any) -> bool:
    return str(value).strip().lower() in ('1', 'true', 'yes', 'on')


class Config:
    """
    配置加载器，负责从命令行覆盖、环境变量、配置文件、预设和默认值中读取配置。
    优先级：命令行覆盖 > 环境变量 > 配置文件 > 预设(profile) > 默认值
    """
    def __init__(self, config_file: Optional[str] = None):
        # 在本地开发环境中，可以加载.env文件
        load_dotenv()
        self._default_file = config_file or os.path.join(os.path.dirname(os.path.dirname(__file__)), 'config.ini')
        self.reset()

    def reset(self):
        """丢弃命令行覆盖、预设和已加载的文件，重新读取默认配置文件"""
        self.config_parser = self._new_parser()
        self.profile_parser = self._new_parser()
        self.overrides: Dict[str, str] = {}
        self.profile_name: Optional[str] = None

        # 默认读取项目根目录下的config.ini
        self.config_file = self._default_file
        if os.path.exists(self.config_file):
            self.load_file(self.config_file)

    @staticmethod
    def _new_parser() -> configparser.ConfigParser:
        parser = configparser.ConfigParser()
        # 保留键的大小写 (S, T, K, N_h)
        parser.optionxform = str
        return parser

    def load_file(self, path: str):
        """
        读取配置文件，支持INI分节格式和点分平铺格式 (model.S=5)
        """
        if not os.path.exists(path):
            raise ConfigError(f"配置文件不存在: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                text = f.read()
        except (OSError, UnicodeDecodeError) as e:
            raise ConfigError(f"读取配置文件失败: {path} - {e}")

        if any(line.strip().startswith('[') for line in text.splitlines()):
            try:
                self.config_parser.read_string(text, source=path)
            except configparser.Error as e:
                raise ConfigError(f"解析配置文件失败: {path} - {e}")
        else:
            self._load_dotted_lines(self.config_parser, text.splitlines(), path)
        self.config_file = path

    def _load_dotted_lines(self, parser: configparser.ConfigParser, lines, source: str):
        """把 section.key=value 行写入解析器"""
        for lineno, raw in enumerate(lines, start=1):
            line = raw.strip()
            if not line or line.startswith('#') or line.startswith(';'):
                continue
            if '=' not in line:
                raise ConfigError(f"{source}:{lineno} 缺少 '=': {raw!r}")
            dotted, value = line.split('=', 1)
            self._set_dotted(parser, dotted.strip(), value.strip(), f"{source}:{lineno}")

    @staticmethod
    def _set_dotted(parser: configparser.ConfigParser, dotted: str, value: str, where: str = ''):
        if '.' not in dotted:
            raise ConfigError(f"{where} 键必须是 section.key 格式: {dotted!r}")
        section, key = dotted.split('.', 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)

    def apply_profile(self, name: Optional[str]):
        """叠加实验预设（位于配置文件之下）"""
        if not name:
            return
        if name not in PROFILES:
            raise ConfigError(f"未知的预设: {name}，可选: {', '.join(sorted(PROFILES))}")
        self.profile_parser = self._new_parser()
        for dotted, value in PROFILES[name].items():
            self._set_dotted(self.profile_parser, dotted, value, f"profile:{name}")
        self.profile_name = name

    def set_override(self, dotted: str, value: Any):
        """命令行参数覆盖，None 表示未设置"""
        if value is None:
            return
        if '.' not in dotted:
            raise ConfigError(f"覆盖键必须是 section.key 格式: {dotted!r}")
        self.overrides[dotted] = str(value)

    def _get_config_value(self, section: str, key: str, env_var: str, default_value: Any,
                          value_type: Callable = str) -> Any:
        """
        按优先级获取配置值：命令行覆盖 > 环境变量 > 配置文件 > 预设 > 默认值
        非法值抛出 ConfigError，不静默回退到默认值
        """
        candidates = []
        dotted = f"{section}.{key}"
        if dotted in self.overrides:
            candidates.append(('命令行', self.overrides[dotted]))

        env_value = os.getenv(env_var)
        if env_value:
            candidates.append((f"环境变量 {env_var}", env_value))

        for source, parser in (('配置文件', self.config_parser), ('预设', self.profile_parser)):
            try:
                if parser.has_section(section) and parser.has_option(section, key):
                    candidates.append((source, parser.get(section, key)))
            except (configparser.Error, UnicodeDecodeError):
                pass

        if not candidates:
            return default_value

        source, raw = candidates[0]
        try:
            return value_type(raw)
        except (ValueError, TypeError):
            raise ConfigError(f"{source} 中 {dotted} 的值非法: {raw!r}")

    def _env(self, section: str, key: str) -> str:
        return f"GROWNUP_{section.upper()}_{key.upper()}"

    def _value(self, section: str, key: str, default: Any, value_type: Callable = str) -> Any:
        return self._get_config_value(section, key, self._env(section, key), default, value_type)

    def get_seed(self) -> int:
        """获取随机种子，GROWNUP_SEED 环境变量可覆盖"""
        return self._get_config_value('run', 'seed', 'GROWNUP_SEED', 0, int)

    def get_model_config(self) -> Dict[str, Any]:
        """获取模型结构配置"""
        cfg = {
            'S': self._value('model', 'S', 5, int),
            'T': self._value('model', 'T', 5, int),
            'K': self._value('model', 'K', 256, int),
            'N_h': self._value('model', 'N_h', 4, int),
            'dropout': self._value('model', 'dropout', 0.0, float),
            'input_width': self._value('model', 'input_width', 1703, int),
            'input_hidden': self._value('model', 'input_hidden', 1024, int),
            'use_lstm': self._value('model', 'use_lstm', True, _to_bool),
            'use_residual': self._value('model', 'use_residual', True, _to_bool),
        }
        if cfg['S'] < 1:
            raise ConfigError(f"model.S 必须 >= 1，当前为 {cfg['S']}")
        if cfg['T'] < 0:
            raise ConfigError(f"model.T 必须 >= 0，当前为 {cfg['T']}")
        if cfg['K'] < 1 or cfg['N_h'] < 1 or cfg['K'] % cfg['N_h'] != 0:
            raise ConfigError(f"model.K ({cfg['K']}) 必须能被 model.N_h ({cfg['N_h']}) 整除")
        if not 0.0 <= cfg['dropout'] < 1.0:
            raise ConfigError(f"model.dropout 必须在 [0, 1) 内，当前为 {cfg['dropout']}")
        if cfg['input_hidden'] < 0:
            raise ConfigError("model.input_hidden 不能为负数")
        return cfg

    def get_optimizer_config(self) -> Dict[str, Any]:
        """获取优化器配置"""
        cfg = {
            'kind': self._value('optimizer', 'kind', 'adamw', str).lower(),
            'lr': self._value('optimizer', 'lr', 0.001, float),
            'weight_decay': self._value('optimizer', 'weight_decay', 0.0, float),
            'beta1': self._value('optimizer', 'beta1', 0.9, float),
            'beta2': self._value('optimizer', 'beta2', 0.999, float),
            'eps': self._value('optimizer', 'eps', 1e-8, float),
            'schedule': self._value('optimizer', 'schedule', 'constant', str).lower(),
            't0': self._value('optimizer', 't0', 5, int),
            't_mult': self._value('optimizer', 't_mult', 1, int),
            'eta_min': self._value('optimizer', 'eta_min', 0.0, float),
        }
        if cfg['kind'] not in ('adam', 'adamw'):
            raise ConfigError(f"optimizer.kind 只支持 adam/adamw，当前为 {cfg['kind']}")
        if cfg['kind'] == 'adam':
            cfg['weight_decay'] = 0.0
        if cfg['schedule'] not in ('constant', 'cosine_restarts'):
            raise ConfigError(f"optimizer.schedule 只支持 constant/cosine_restarts，当前为 {cfg['schedule']}")
        if cfg['lr'] <= 0:
            raise ConfigError("optimizer.lr 必须为正数")
        if cfg['t0'] < 1 or cfg['t_mult'] < 1:
            raise ConfigError("optimizer.t0 和 optimizer.t_mult 必须 >= 1")
        return cfg

    def get_pretrain_config(self) -> Dict[str, Any]:
        """获取预训练配置"""
        cfg = {
            'epochs': self._value('pretrain', 'epochs', 80, int),
            'batch_pairs': self._value('pretrain', 'batch_pairs', 48, int),
            'dev_ratio': self._value('pretrain', 'dev_ratio', 0.1, float),
            'mask_nodes': self._value('pretrain', 'mask_nodes', 16, int),
            'mask_prob': self._value('pretrain', 'mask_prob', 0.85, float),
            'readout': self._value('pretrain', 'readout', 'mean', str).lower(),
            'objective': self._value('pretrain', 'objective', 'joint', str).lower(),
            'k_sim': self._value('pretrain', 'k_sim', 0, int),
            'pe_sign_flip': self._value('pretrain', 'pe_sign_flip', True, _to_bool),
            'loss_weights': {
                name: self._value('loss_weights', name, default, float)
                for name, default in (('sim', 0.05), ('tag', 0.2), ('text', 0.5),
                                      ('id', 0.05), ('class', 0.1), ('child', 0.1))
            },
        }
        if cfg['readout'] not in ('mean', 'cls'):
            raise ConfigError(f"pretrain.readout 只支持 mean/cls，当前为 {cfg['readout']}")
        if cfg['objective'] not in ('joint', 'mask_only'):
            raise ConfigError(f"pretrain.objective 只支持 joint/mask_only，当前为 {cfg['objective']}")
        if not 0.0 <= cfg['mask_prob'] <= 1.0:
            raise ConfigError("pretrain.mask_prob 必须在 [0, 1] 内")
        if cfg['batch_pairs'] < 1 or cfg['epochs'] < 1:
            raise ConfigError("pretrain.batch_pairs 与 pretrain.epochs 必须 >= 1")
        return cfg

    def get_boilerplate_config(self) -> Dict[str, Any]:
        """获取正文抽取微调配置"""
        return {
            'epochs': self._value('boilerplate', 'epochs', 40, int),
            'batch_nodes': self._value('boilerplate', 'batch_nodes', 128, int),
            'dev_pages': self._value('boilerplate', 'dev_pages', 5, int),
            'label_smoothing': self._value('boilerplate', 'label_smoothing', 0.01, float),
            'threshold': self._value('boilerplate', 'threshold', 0.5, float),
            'align_ratio': self._value('boilerplate', 'align_ratio', 0.5, float),
            'cleaneval_gold': self._value('boilerplate', 'cleaneval_gold', False, _to_bool),
            'repeats': self._value('boilerplate', 'repeats', 1, int),
        }

    def get_genre_config(self) -> Dict[str, Any]:
        """获取体裁分类配置"""
        cfg = {
            'epochs': self._value('genre', 'epochs', 35, int),
            'scale': self._value('genre', 'scale', 5.0, float),
            'margin': self._value('genre', 'margin', 0.3, float),
            'n_folds': self._value('genre', 'n_folds', 10, int),
            'repeats': self._value('genre', 'repeats', 3, int),
            'readout': self._value('genre', 'readout', 'cls', str).lower(),
            'batch_pages': self._value('genre', 'batch_pages', 16, int),
            'freeze_backbone': self._value('genre', 'freeze_backbone', False, _to_bool),
        }
        if cfg['scale'] <= 0:
            raise ConfigError("genre.scale 必须为正数")
        if not 0.0 <= cfg['margin'] < 1.5707963267948966:
            raise ConfigError("genre.margin 必须在 [0, π/2) 内")
        if cfg['readout'] not in ('mean', 'cls'):
            raise ConfigError(f"genre.readout 只支持 mean/cls，当前为 {cfg['readout']}")
        return cfg

    def get_featurize_config(self) -> Dict[str, Any]:
        """获取特征化配置"""
        return {
            'encoder': self._value('featurize', 'encoder', 'hashed', str),
            'tags_file': self._value('featurize', 'tags_file', '', str),
            'jobs': self._value('featurize', 'jobs', os.cpu_count() or 1, int),
        }

    def get_logging_config(self) -> Dict[str, str]:
        """获取日志配置"""
        return {
            'log_level': self._get_config_value('logging', 'log_level', 'LOGGING_LOG_LEVEL', 'INFO'),
            'log_file': self._get_config_value('logging', 'log_file', 'LOGGING_LOG_FILE', 'grownup.log'),
            'log_dir': self._get_config_value('logging', 'log_dir', 'LOGGING_LOG_DIR', 'logs'),
        }

    def snapshot(self) -> Dict[str, Any]:
        """当前生效配置的完整快照，写入运行清单"""
        return {
            'profile': self.profile_name,
            'config_file': self.config_file if os.path.exists(self.config_file) else None,
            'seed': self.get_seed(),
            'model': self.get_model_config(),
            'optimizer': self.get_optimizer_config(),
            'pretrain': self.get_pretrain_config(),
            'boilerplate': self.get_boilerplate_config(),
            'genre': self.get_genre_config(),
            'featurize': self.get_featurize_config(),
        }


# 创建一个全局配置实例
config = Config()
