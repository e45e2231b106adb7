"""
任务调度器
负责协调特征化、预训练、微调、抽取、交叉验证与评估等任务的执行，
每个任务返回结果字典并在运行目录写出清单
"""
import dataclasses
import hashlib
import json
import logging
import os
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import config
from .corpus import (clean_cleaneval_gold, featurize_directory, featurize_pages, html_page_items,
                     load_boilerplate_dataset, load_genre_dataset, load_site_corpus, split_train_dev)
from .errors import ConfigError, EmptyCorpus
from .eval_metrics import compare_reports, evaluate_texts
from .html_graph import TAG_VOCAB_VERSION, Featurizer, load_tag_vocab
from .logger import MetricsWriter, log_error, log_task_end, log_task_start
from .model import FeatureExtractor, ModelConfig
from .numerics import parameter
from .pretrain import SitePageGraph, pretrain_run
from .synthetic import generate_synthetic_corpus
from .tasks import (BoilerplateHead, GenreHead, GenreTrainer, LabeledPage, extract_text, finetune_boilerplate,
                    kfold_cv, predict_genre)
from .text_encoder import make_encoder


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: str, payload: Dict[str, Any]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, ensure_ascii=False, indent=2, sort_keys=True, default=str)
        f.write('\n')
    return path


class Scheduler:
    """任务调度器"""

    def __init__(self, run_dir: str = 'runs'):
        self.logger = logging.getLogger(__name__)
        self.run_dir = run_dir

    def get_utc_time(self) -> str:
        return datetime.now(timezone.utc).strftime('%Y-%m-%d %H:%M:%S')

    # ------------------------------------------------------------ 公共部件

    def _task_dir(self, task: str) -> str:
        path = os.path.join(self.run_dir, task)
        os.makedirs(path, exist_ok=True)
        return path

    def _metrics(self, task: str) -> MetricsWriter:
        path = os.path.join(self._task_dir(task), 'metrics.jsonl')
        if os.path.exists(path):
            os.remove(path)
        return MetricsWriter(path)

    def _write_manifest(self, task: str, args: Dict[str, Any], outputs: Sequence[str] = ()) -> str:
        """运行清单：配置快照、代码版本、参数与产物哈希，不含时间戳以便逐字节复现"""
        manifest = {
            'task': task,
            'version': __version__,
            'config': config.snapshot(),
            'args': args,
            'outputs': {p: _sha256_file(p) for p in outputs if p and os.path.isfile(p)},
        }
        return _write_json(os.path.join(self._task_dir(task), 'manifest.json'), manifest)

    def _failure(self, task: str, error: Exception) -> Dict[str, Any]:
        log_error(task, error)
        return {'success': False, 'error': str(error), 'error_type': type(error).__name__,
                'timestamp': self.get_utc_time()}

    def _featurizer(self) -> Featurizer:
        cfg = config.get_featurize_config()
        return Featurizer(make_encoder(cfg['encoder']), load_tag_vocab(cfg['tags_file'] or None))

    def _model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(config.get_model_config())

    def _load_extractor(self, checkpoint: Optional[str], seed: int) -> FeatureExtractor:
        """有检查点时沿用其结构 (dropout 取当前配置)，否则按配置随机初始化"""
        current = self._model_config()
        if not checkpoint:
            return FeatureExtractor(current, seed=seed)
        state = load_checkpoint(checkpoint)
        extractor = FeatureExtractor.from_checkpoint(state)
        model_config = dataclasses.replace(extractor.config, dropout=current.dropout)
        self.logger.info(f"从检查点加载特征提取器: {checkpoint} ({model_config.to_dict()})")
        return FeatureExtractor(model_config, extractor.weights)

    def _model_manifest(self, extractor: FeatureExtractor, featurizer: Featurizer, **extra: Any) -> Dict[str, Any]:
        return extractor.manifest(schema_hash=featurizer.schema_hash, tag_vocab_version=TAG_VOCAB_VERSION, **extra)

    # ------------------------------------------------------------ 任务

    def run_synth_task(self, out_dir: str, pages: int = 100, sites: int = 5,
                       flavour: str = 'site') -> Dict[str, Any]:
        """生成合成语料"""
        start = log_task_start('synth')
        try:
            summary = generate_synthetic_corpus(out_dir, pages, sites, config.get_seed(), flavour)
            self._write_manifest('synth', {'out_dir': out_dir, 'pages': pages, 'sites': sites, 'flavour': flavour})
            log_task_end('synth', start, pages=summary['pages'])
            return {'success': True, 'out_dir': out_dir, 'pages': summary['pages'], 'flavour': flavour,
                    'timestamp': self.get_utc_time()}
        except Exception as e:
            return self._failure('synth', e)

    def run_featurize_task(self, in_dir: str, out_dir: str) -> Dict[str, Any]:
        """把 HTML 目录特征化为图记录"""
        start = log_task_start('featurize')
        try:
            jobs = config.get_featurize_config()['jobs']
            summary = featurize_directory(in_dir, out_dir, self._featurizer(), jobs)
            self._write_manifest('featurize', {'in_dir': in_dir, 'out_dir': out_dir, 'jobs': jobs})
            log_task_end('featurize', start, pages=summary['pages'], failed=len(summary['failed']))
            return {'success': True, 'pages': summary['pages'], 'failed': summary['failed'],
                    'out_dir': out_dir, 'timestamp': self.get_utc_time()}
        except Exception as e:
            return self._failure('featurize', e)

    def run_pretrain_task(self, corpus_path: str, out_path: str) -> Dict[str, Any]:
        """自监督预训练"""
        start = log_task_start('pretrain')
        try:
            seed = config.get_seed()
            corpus = load_site_corpus(corpus_path)
            if not corpus.pages:
                raise EmptyCorpus(f"语料为空: {corpus_path}")
            graphs, failed = featurize_pages(self._featurizer(),
                                             [(p.page_id, p.html_path) for p in corpus.pages],
                                             config.get_featurize_config()['jobs'])
            pages = [SitePageGraph(p.page_id, p.site_key, graphs[p.page_id])
                     for p in corpus.pages if p.page_id in graphs]

            pretrain_cfg = config.get_pretrain_config()
            result = pretrain_run(pages, self._model_config(), config.get_optimizer_config(), pretrain_cfg, seed,
                                  out_path, self._metrics('pretrain'),
                                  provenance={'corpus': corpus_path, 'pages': len(pages),
                                              'epochs': pretrain_cfg['epochs']})
            self._write_manifest('pretrain', {'corpus': corpus_path, 'out': out_path}, [out_path])
            log_task_end('pretrain', start, best_epoch=result.best_epoch)
            last = result.history[-1] if result.history else {}
            return {'success': True, 'checkpoint': result.checkpoint, 'best_epoch': result.best_epoch,
                    'best_dev_loss': result.best_dev_loss, 'pages': len(pages), 'failed_pages': failed,
                    'last_epoch': last, 'timestamp': self.get_utc_time()}
        except Exception as e:
            return self._failure('pretrain', e)

    def _labeled_pages(self, pages, featurizer: Featurizer) -> List[LabeledPage]:
        graphs, failed = featurize_pages(featurizer, [(p.page_id, p.html_path) for p in pages],
                                         config.get_featurize_config()['jobs'])
        if failed:
            self.logger.warning(f"{len(failed)} 个页面特征化失败，已从数据集中移除")
        return [LabeledPage(p.page_id, graphs[p.page_id], p.gold_text) for p in pages if p.page_id in graphs]

    def run_finetune_boilerplate_task(self, dataset_dir: str, out_path: str, checkpoint: Optional[str] = None,
                                      split_manifest: Optional[str] = None,
                                      report_path: Optional[str] = None) -> Dict[str, Any]:
        """
        正文抽取微调；repeats > 1 时用种子 seed..seed+R-1 重复实验，
        报告中记录每次的测试集 F1 (没有测试集时为验证集 F1)
        """
        start = log_task_start('finetune-boilerplate')
        try:
            seed = config.get_seed()
            task_cfg = config.get_boilerplate_config()
            dataset = load_boilerplate_dataset(dataset_dir, split_manifest, task_cfg['cleaneval_gold'])
            featurizer = self._featurizer()
            train_all = self._labeled_pages(dataset.train, featurizer)
            dev = self._labeled_pages(dataset.dev, featurizer)
            test = self._labeled_pages(dataset.test, featurizer)
            if not dev and task_cfg['dev_pages'] > 0:
                ratio = min(task_cfg['dev_pages'] / max(len(train_all), 1), 0.5)
                train, dev = split_train_dev(train_all, ratio, np.random.default_rng(seed))
            else:
                train = train_all
            if not train:
                raise EmptyCorpus("训练集为空")
            self.logger.info(f"数据划分: train {len(train)} / dev {len(dev)} / test {len(test)}, "
                             f"lr {config.get_optimizer_config()['lr']}, dropout {config.get_model_config()['dropout']}")

            metrics = self._metrics('finetune-boilerplate')
            scores, best = [], None
            for r in range(max(1, task_cfg['repeats'])):
                run_seed = seed + r
                extractor = self._load_extractor(checkpoint, run_seed)
                trainer, result = finetune_boilerplate(extractor, train, dev, config.get_optimizer_config(), task_cfg,
                                                       run_seed, metrics)
                score = trainer.evaluate(test)['f1'] if test else result.best_dev_f1
                metrics.write('boilerplate_repeat', repeat=r, seed=run_seed, score=score,
                              best_dev_f1=result.best_dev_f1)
                scores.append(score)
                if best is None or result.best_dev_f1 > best[0]:
                    best = (result.best_dev_f1, trainer, r)

            _, trainer, best_repeat = best
            params = trainer.parameters()
            manifest = self._model_manifest(trainer.extractor, featurizer, stage='boilerplate',
                                            threshold=trainer.head.threshold,
                                            pretrained_from=checkpoint, repeat=best_repeat)
            save_checkpoint(out_path, params, manifest=manifest)

            report = {
                'kind': 'boilerplate',
                'dataset': os.path.basename(os.path.normpath(dataset_dir)),
                'scores': scores,
                'mean_f1': float(np.mean(scores)),
                'std_f1': float(np.std(scores, ddof=1)) if len(scores) > 1 else 0.0,
                'split': {'train': len(train), 'dev': len(dev), 'test': len(test)},
            }
            report_path = report_path or os.path.join(self._task_dir('finetune-boilerplate'), 'report.json')
            _write_json(report_path, report)
            self._write_manifest('finetune-boilerplate', {'dataset': dataset_dir, 'checkpoint': checkpoint,
                                                          'out': out_path}, [out_path, report_path])
            log_task_end('finetune-boilerplate', start, mean_f1=f"{report['mean_f1']:.4f}")
            return {'success': True, 'checkpoint': out_path, 'report': report_path, 'scores': scores,
                    'mean_f1': report['mean_f1'], 'std_f1': report['std_f1'], 'timestamp': self.get_utc_time()}
        except Exception as e:
            return self._failure('finetune-boilerplate', e)

    def _load_boilerplate_model(self, checkpoint: str):
        state = load_checkpoint(checkpoint)
        manifest = state['manifest']
        if manifest.get('stage') != 'boilerplate':
            raise ConfigError(f"检查点不是正文抽取模型: {checkpoint}")
        extractor = FeatureExtractor.from_checkpoint(state)
        head = BoilerplateHead(weights=_head_tensors(state), threshold=manifest.get('threshold', 0.5))
        return extractor, head

    def run_extract_task(self, checkpoint: str, in_dir: str, out_dir: str) -> Dict[str, Any]:
        """用微调后的模型抽取正文，每页写出 <page_id>.txt"""
        start = log_task_start('extract')
        try:
            extractor, head = self._load_boilerplate_model(checkpoint)
            graphs, failed = featurize_pages(self._featurizer(), html_page_items(in_dir),
                                             config.get_featurize_config()['jobs'])
            outputs = []
            for page_id in sorted(graphs):
                path = os.path.join(out_dir, page_id + '.txt')
                os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
                with open(path, 'w', encoding='utf-8') as f:
                    f.write(extract_text(graphs[page_id], extractor, head) + '\n')
                outputs.append(path)
            self._write_manifest('extract', {'checkpoint': checkpoint, 'in_dir': in_dir, 'out_dir': out_dir})
            log_task_end('extract', start, pages=len(outputs))
            return {'success': True, 'pages': len(outputs), 'failed': failed, 'out_dir': out_dir,
                    'timestamp': self.get_utc_time()}
        except Exception as e:
            return self._failure('extract', e)

    def run_evaluate_task(self, pred_dir: str, gold_dir: str, report_path: str) -> Dict[str, Any]:
        """按 page_id 对齐 pred/gold 目录下的 .txt 文件计算 LCS 指标"""
        start = log_task_start('evaluate')
        try:
            predictions = _read_texts(pred_dir)
            gold = _read_texts(gold_dir)
            if config.get_boilerplate_config()['cleaneval_gold']:
                gold = {k: clean_cleaneval_gold(v) for k, v in gold.items()}
            report = evaluate_texts(predictions, gold)
            payload = report.to_dict()
            _write_json(report_path, payload)
            csv_path = os.path.splitext(report_path)[0] + '.csv'
            report.to_frame().to_csv(csv_path, index=False, float_format='%.6f')
            self._write_manifest('evaluate', {'pred': pred_dir, 'gold': gold_dir, 'report': report_path},
                                 [report_path, csv_path])
            log_task_end('evaluate', start, f1=f"{report.corpus_f1:.4f}")
            return {'success': True, 'report': report_path, 'n_pages': report.n_pages,
                    'precision': report.corpus_precision, 'recall': report.corpus_recall,
                    'f1': report.corpus_f1, 'timestamp': self.get_utc_time()}
        except Exception as e:
            return self._failure('evaluate', e)

    def _genre_graphs(self, dataset_dir: str):
        pages, classes = load_genre_dataset(dataset_dir)
        graphs, failed = featurize_pages(self._featurizer(), [(p.page_id, p.html_path) for p in pages],
                                         config.get_featurize_config()['jobs'])
        kept = [p for p in pages if p.page_id in graphs]
        if failed:
            self.logger.warning(f"{len(failed)} 个页面特征化失败，已从数据集中移除")
        return [graphs[p.page_id] for p in kept], [p.label for p in kept], classes

    def run_cv_task(self, dataset_dir: str, checkpoint: Optional[str] = None,
                    report_path: Optional[str] = None) -> Dict[str, Any]:
        """体裁分类的重复分层 K 折交叉验证"""
        start = log_task_start('cv')
        try:
            seed = config.get_seed()
            genre_cfg = config.get_genre_config()
            graphs, labels, classes = self._genre_graphs(dataset_dir)
            base = self._load_extractor(checkpoint, seed)
            init_arrays = {k: v.data.copy() for k, v in base.weights.items()} if checkpoint else None
            report = kfold_cv(graphs, labels, len(classes), base.config, config.get_optimizer_config(), genre_cfg,
                              seed, init_arrays, self._metrics('cv'))
            payload = report.to_dict(os.path.basename(os.path.normpath(dataset_dir)))
            payload['classes'] = classes
            report_path = report_path or os.path.join(self._task_dir('cv'), 'report.json')
            _write_json(report_path, payload)
            csv_path = os.path.splitext(report_path)[0] + '.csv'
            report.folds.to_csv(csv_path, index=False, float_format='%.6f')
            self._write_manifest('cv', {'dataset': dataset_dir, 'checkpoint': checkpoint},
                                 [report_path, csv_path])
            log_task_end('cv', start, folds=len(report.folds), mean=f"{report.mean_accuracy:.4f}")
            return {'success': True, 'report': report_path, 'folds': len(report.folds),
                    'mean_accuracy': report.mean_accuracy, 'std_accuracy': report.std_accuracy,
                    'timestamp': self.get_utc_time()}
        except Exception as e:
            return self._failure('cv', e)

    def run_finetune_genre_task(self, dataset_dir: str, out_path: str,
                                checkpoint: Optional[str] = None) -> Dict[str, Any]:
        """在完整体裁数据集上训练并保存模型与分类头"""
        start = log_task_start('finetune-genre')
        try:
            seed = config.get_seed()
            genre_cfg = config.get_genre_config()
            graphs, labels, classes = self._genre_graphs(dataset_dir)
            extractor = self._load_extractor(checkpoint, seed)
            if genre_cfg['readout'] == 'cls' and extractor.config.T == 0:
                raise ConfigError("genre.readout=cls 需要 model.T >= 1")
            rng = np.random.default_rng(seed)
            head = GenreHead.create(extractor.config.K, len(classes), rng, genre_cfg['scale'], genre_cfg['margin'],
                                    genre_cfg['readout'])
            trainer = GenreTrainer(extractor, head, config.get_optimizer_config(), genre_cfg, rng)
            history = trainer.fit(graphs, labels)
            metrics = self._metrics('finetune-genre')
            for epoch, loss in enumerate(history, start=1):
                metrics.write('genre_epoch', epoch=epoch, train_loss=round(loss, 6))
            train_acc = trainer.accuracy(graphs, labels)

            params = {f"extractor/{k}": v for k, v in extractor.weights.items()}
            params.update({f"head/{k}": v for k, v in head.weights.items()})
            manifest = self._model_manifest(extractor, self._featurizer(), stage='genre', classes=classes,
                                            scale=head.scale,
                                            margin=head.margin, readout=head.readout, pretrained_from=checkpoint)
            save_checkpoint(out_path, params, manifest=manifest)
            self._write_manifest('finetune-genre', {'dataset': dataset_dir, 'checkpoint': checkpoint,
                                                    'out': out_path}, [out_path])
            log_task_end('finetune-genre', start, train_accuracy=f"{train_acc:.4f}")
            return {'success': True, 'checkpoint': out_path, 'classes': classes, 'train_accuracy': train_acc,
                    'timestamp': self.get_utc_time()}
        except Exception as e:
            return self._failure('finetune-genre', e)

    def run_predict_genre_task(self, checkpoint: str, in_dir: str) -> Dict[str, Any]:
        """对目录下每个页面预测体裁 (不加间隔的 logits 取 argmax)"""
        start = log_task_start('predict-genre')
        try:
            state = load_checkpoint(checkpoint)
            manifest = state['manifest']
            if manifest.get('stage') != 'genre':
                raise ConfigError(f"检查点不是体裁分类模型: {checkpoint}")
            extractor = FeatureExtractor.from_checkpoint(state)
            classes = manifest['classes']
            head = GenreHead(weights=_head_tensors(state), n_classes=len(classes), scale=manifest['scale'],
                             margin=manifest['margin'], readout=manifest['readout'])
            graphs, failed = featurize_pages(self._featurizer(), html_page_items(in_dir),
                                             config.get_featurize_config()['jobs'])
            predictions = {pid: classes[predict_genre(graphs[pid], extractor, head)] for pid in sorted(graphs)}
            log_task_end('predict-genre', start, pages=len(predictions))
            return {'success': True, 'predictions': predictions, 'failed': failed,
                    'timestamp': self.get_utc_time()}
        except Exception as e:
            return self._failure('predict-genre', e)

    def run_compare_task(self, reports_a: Sequence[str], reports_b: Sequence[str],
                         out_path: Optional[str] = None) -> Dict[str, Any]:
        """两个模型的报告逐数据集做显著性检验，再做 Fisher 合并"""
        start = log_task_start('compare')
        try:
            loaded_a = [_read_json(p) for p in reports_a]
            loaded_b = [_read_json(p) for p in reports_b]
            comparison = compare_reports(loaded_a, loaded_b)
            if out_path:
                _write_json(out_path, comparison)
            log_task_end('compare', start, global_p=f"{comparison['global_p_value']:.4g}")
            return {'success': True, **comparison, 'timestamp': self.get_utc_time()}
        except Exception as e:
            return self._failure('compare', e)


def _head_tensors(state: Dict[str, Any]):
    return {k[len('head/'):]: parameter(np.array(v), name=k) for k, v in state['params'].items()
            if k.startswith('head/')}


def _read_texts(directory: str) -> Dict[str, str]:
    if not os.path.isdir(directory):
        raise ConfigError(f"目录不存在: {directory}")
    texts = {}
    for dirpath, _, filenames in os.walk(directory):
        for name in filenames:
            if name.endswith('.txt'):
                path = os.path.join(dirpath, name)
                page_id = os.path.splitext(os.path.relpath(path, directory))[0].replace(os.sep, '/')
                with open(path, 'r', encoding='utf-8', errors='replace') as f:
                    texts[page_id] = f.read()
    return texts


def _read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"读取报告失败: {path} - {e}")


# 创建一个全局调度器实例
scheduler = Scheduler()
