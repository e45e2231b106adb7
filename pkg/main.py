#!/usr/bin/env python3
"""
GROWN+UP 网页图学习工具
主执行脚本
"""
import sys
import argparse
import json
from typing import Any, Dict, List, Optional

from src import __version__
from src.config import config
from src.errors import ConfigError
from src.logger import setup_logging
from src.scheduler import scheduler

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


class _ArgumentParser(argparse.ArgumentParser):
    """参数错误时抛出而不是直接退出，由 run() 统一转换为退出码 2"""

    def error(self, message):
        raise ConfigError(f"参数错误: {message}")


def _common_options(default: Any) -> argparse.ArgumentParser:
    """
    全局选项既可以写在子命令之前，也可以写在子命令之后；
    子命令上的默认值为 SUPPRESS，避免覆盖子命令之前已给出的值
    """
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument('--config', default=default, help='INI 配置文件路径')
    parent.add_argument('--profile', default=default,
                        help='实验预设 (pretrain-default / cleaneval / dragnet / 7web / ki04)')
    parent.add_argument('--seed', type=int, default=default, help='随机种子')
    parent.add_argument('--jobs', type=int, default=default, help='特征化并发数')
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog='grownup', description='GROWN+UP 网页图学习工具',
                             parents=[_common_options(None)])
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('--run-dir', default='runs', help='运行目录 (清单、指标、报告)')
    parser.add_argument('--output', choices=['json', 'text'], default='text', help='输出格式')
    common = _common_options(argparse.SUPPRESS)
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', help='生成合成语料', parents=[common])
    p.add_argument('--out', required=True)
    p.add_argument('--pages', type=int, default=100)
    p.add_argument('--sites', type=int, default=5, help='网站数 (genre 风格下为体裁数)')
    p.add_argument('--flavour', choices=['site', 'boilerplate', 'genre'], default='site')

    p = sub.add_parser('featurize', help='HTML 目录特征化为图记录', parents=[common])
    p.add_argument('--in', dest='in_dir', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--encoder', help='文本编码器: hashed 或 sidecar:<向量文件>')
    p.add_argument('--tags', help='标签词表文件 (每行一个标签)')

    p = sub.add_parser('pretrain', help='自监督预训练', parents=[common])
    p.add_argument('--corpus', required=True, help='HTML 目录或 path<TAB>url 清单')
    p.add_argument('--out', required=True, help='检查点输出路径')
    p.add_argument('--epochs', type=int)
    p.add_argument('--batch-pairs', type=int)
    p.add_argument('--lr', type=float)
    p.add_argument('--readout', choices=['mean', 'cls'])
    p.add_argument('--objective', choices=['joint', 'mask_only'])

    p = sub.add_parser('finetune-boilerplate', help='正文抽取微调', parents=[common])
    p.add_argument('--dataset', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--checkpoint', help='预训练检查点；不指定则随机初始化')
    p.add_argument('--split-manifest')
    p.add_argument('--report')
    p.add_argument('--epochs', type=int)
    p.add_argument('--lr', type=float)
    p.add_argument('--repeats', type=int)

    p = sub.add_parser('extract', help='抽取正文', parents=[common])
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--in', dest='in_dir', required=True)
    p.add_argument('--out', required=True)

    p = sub.add_parser('evaluate', help='LCS 指标评估', parents=[common])
    p.add_argument('--pred', required=True)
    p.add_argument('--gold', required=True)
    p.add_argument('--report', required=True)

    p = sub.add_parser('finetune-genre', help='体裁分类训练', parents=[common])
    p.add_argument('--dataset', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--checkpoint')
    p.add_argument('--epochs', type=int)
    p.add_argument('--lr', type=float)

    p = sub.add_parser('predict-genre', help='体裁预测', parents=[common])
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--in', dest='in_dir', required=True)

    p = sub.add_parser('cv', help='体裁分类交叉验证', parents=[common])
    p.add_argument('--dataset', required=True)
    p.add_argument('--checkpoint')
    p.add_argument('--report')
    p.add_argument('--folds', type=int)
    p.add_argument('--repeats', type=int)
    p.add_argument('--epochs', type=int)
    p.add_argument('--lr', type=float)

    p = sub.add_parser('compare', help='两个模型的显著性比较', parents=[common])
    p.add_argument('--a', nargs='+', required=True, help='模型 A 的报告 JSON')
    p.add_argument('--b', nargs='+', required=True, help='模型 B 的报告 JSON')
    p.add_argument('--out')
    return parser


# 子命令参数到配置键的映射
_OVERRIDES = {
    'featurize': {'encoder': 'featurize.encoder', 'tags': 'featurize.tags_file'},
    'pretrain': {'epochs': 'pretrain.epochs', 'batch_pairs': 'pretrain.batch_pairs', 'lr': 'optimizer.lr',
                 'readout': 'pretrain.readout', 'objective': 'pretrain.objective'},
    'finetune-boilerplate': {'epochs': 'boilerplate.epochs', 'lr': 'optimizer.lr',
                             'repeats': 'boilerplate.repeats'},
    'finetune-genre': {'epochs': 'genre.epochs', 'lr': 'optimizer.lr'},
    'cv': {'epochs': 'genre.epochs', 'lr': 'optimizer.lr', 'folds': 'genre.n_folds', 'repeats': 'genre.repeats'},
}


def configure(args: argparse.Namespace):
    """按 配置文件 -> 预设 -> 命令行 的顺序装配配置"""
    config.reset()
    if args.config:
        config.load_file(args.config)
    config.apply_profile(args.profile)
    config.set_override('run.seed', args.seed)
    config.set_override('featurize.jobs', args.jobs)
    for attr, dotted in _OVERRIDES.get(args.command, {}).items():
        config.set_override(dotted, getattr(args, attr, None))
    # 提前校验所有配置项，非法值在任务开始前报错
    config.snapshot()
    scheduler.run_dir = args.run_dir


def dispatch(args: argparse.Namespace) -> Dict[str, Any]:
    command = args.command
    if command == 'synth':
        return scheduler.run_synth_task(args.out, args.pages, args.sites, args.flavour)
    if command == 'featurize':
        return scheduler.run_featurize_task(args.in_dir, args.out)
    if command == 'pretrain':
        return scheduler.run_pretrain_task(args.corpus, args.out)
    if command == 'finetune-boilerplate':
        return scheduler.run_finetune_boilerplate_task(args.dataset, args.out, args.checkpoint,
                                                       args.split_manifest, args.report)
    if command == 'extract':
        return scheduler.run_extract_task(args.checkpoint, args.in_dir, args.out)
    if command == 'evaluate':
        return scheduler.run_evaluate_task(args.pred, args.gold, args.report)
    if command == 'finetune-genre':
        return scheduler.run_finetune_genre_task(args.dataset, args.out, args.checkpoint)
    if command == 'predict-genre':
        return scheduler.run_predict_genre_task(args.checkpoint, args.in_dir)
    if command == 'cv':
        return scheduler.run_cv_task(args.dataset, args.checkpoint, args.report)
    if command == 'compare':
        return scheduler.run_compare_task(args.a, args.b, args.out)
    raise ConfigError(f"未知命令: {command}")


def print_result(result: Dict[str, Any], command: str):
    """以文本形式打印结果"""
    print(f"\n=== {command} 任务结果 ===")
    for key, value in result.items():
        if key in ('success', 'timestamp'):
            continue
        if isinstance(value, dict) and len(value) > 10:
            print(f"{key}: {len(value)} 项")
            for k in list(value)[:10]:
                print(f"  {k}: {value[k]}")
            print("  ...")
        elif isinstance(value, float):
            print(f"{key}: {value:.4f}")
        else:
            print(f"{key}: {value}")
    print(f"时间: {result.get('timestamp', '')}")


def run(argv: Optional[List[str]] = None) -> int:
    """执行一次命令行调用并返回退出码：0 成功，1 任务失败，2 参数或配置错误"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        configure(args)
        setup_logging(quiet=args.output == 'json')
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE

    if args.output == 'text':
        print("GROWN+UP 网页图学习工具")
        print(f"执行任务: {args.command}")
        print("-" * 50)

    result = dispatch(args)

    if args.output == 'json':
        print(json.dumps(result, indent=2, ensure_ascii=False, default=str))
    else:
        print_result(result, args.command)

    if result.get('success', False):
        if args.output == 'text':
            print("\n✅ 任务执行成功")
        return EXIT_OK
    if args.output == 'text':
        print(f"\n❌ 任务执行失败: {result.get('error', '未知错误')}")
    return EXIT_USAGE if result.get('error_type') == 'ConfigError' else EXIT_FAILED


def main():
    """主函数"""
    sys.exit(run())


if __name__ == "__main__":
    main()
