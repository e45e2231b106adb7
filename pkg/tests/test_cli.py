import json
import os

import pandas as pd
import pytest

import main
from src.corpus import load_graph_dir
from src.html_graph import Featurizer, load_tag_vocab
from src.text_encoder import HashedTextEncoder


def _write_texts(directory, texts):
    os.makedirs(directory, exist_ok=True)
    for page_id, text in texts.items():
        with open(os.path.join(directory, page_id + '.txt'), 'w', encoding='utf-8') as f:
            f.write(text)


def _tiny_config(tmp_path):
    conf = tmp_path / 'tiny.conf'
    conf.write_text('model.S=1\nmodel.T=0\nmodel.K=8\nmodel.N_h=2\nmodel.input_hidden=0\n'
                    'boilerplate.batch_nodes=32\npretrain.mask_nodes=4\n', encoding='utf-8')
    return str(conf)


@pytest.mark.parametrize('argv', [
    ['cv', '--profile', '7web', '--repeats', '3', '--dataset', 'd'],
    ['featurize', '--in', 'p', '--out', 'q', '--encoder', 'hashed'],
    ['featurize', '--in', 'p', '--out', 'q', '--tags', 't.txt'],
    ['pretrain', '--corpus', 'c', '--config', 'f', '--out', 'o'],
    ['pretrain', '--corpus', 'c', '--out', 'o', '--seed', '3'],
])
def test_global_options_accepted_after_subcommand(argv):
    main.build_parser().parse_args(argv)


def test_global_option_positions_are_equivalent():
    parser = main.build_parser()
    before = parser.parse_args(['--seed', '3', '--profile', '7web', 'cv', '--dataset', 'd'])
    after = parser.parse_args(['cv', '--dataset', 'd', '--seed', '3', '--profile', '7web'])
    assert (before.seed, before.profile) == (after.seed, after.profile) == (3, '7web')
    # 子命令之后没有重复给出时，不覆盖子命令之前的值
    mixed = parser.parse_args(['--seed', '5', 'featurize', '--in', 'p', '--out', 'q', '--jobs', '1'])
    assert (mixed.seed, mixed.jobs, mixed.config) == (5, 1, None)


def test_featurize_encoder_and_tags_options(tmp_path):
    html = str(tmp_path / 'html')
    assert main.run(['synth', '--out', html, '--pages', '2', '--sites', '1']) == 0
    tags = tmp_path / 'tags.txt'
    tags.write_text('\n'.join(reversed(load_tag_vocab())) + '\n', encoding='utf-8')
    graphs = str(tmp_path / 'graphs')
    assert main.run(['featurize', '--in', html, '--out', graphs, '--encoder', 'hashed', '--tags', str(tags),
                     '--seed', '2']) == 0
    expected = Featurizer(HashedTextEncoder(), load_tag_vocab(str(tags))).schema_hash
    assert expected != Featurizer(HashedTextEncoder()).schema_hash
    assert all(g.schema_hash == expected for g in load_graph_dir(graphs, expected))
    with open(tmp_path / 'runs' / 'featurize' / 'manifest.json', encoding='utf-8') as f:
        manifest = json.load(f)
    assert manifest['config']['seed'] == 2
    assert manifest['config']['featurize']['tags_file'] == str(tags)
    assert main.run(['featurize', '--in', html, '--out', graphs, '--encoder', 'word2vec']) == 2


def test_synth_then_featurize(tmp_path):
    html = str(tmp_path / 'html')
    graphs = str(tmp_path / 'graphs')
    assert main.run(['--seed', '1', 'synth', '--out', html, '--pages', '2', '--sites', '1']) == 0
    assert main.run(['--jobs', '2', '--output', 'json', 'featurize', '--in', html, '--out', graphs]) == 0
    loaded = load_graph_dir(graphs)
    assert len(loaded) == 2
    assert all(g.features.shape[1] == 1703 for g in loaded)
    with open(tmp_path / 'runs' / 'featurize' / 'manifest.json', encoding='utf-8') as f:
        manifest = json.load(f)
    assert manifest['task'] == 'featurize' and manifest['config']['seed'] == 0
    assert manifest['args']['jobs'] == 2


def test_evaluate_writes_json_and_csv(tmp_path):
    _write_texts(tmp_path / 'pred', {'a': 'the cat', 'b': 'dog'})
    _write_texts(tmp_path / 'gold', {'a': 'the cat sat', 'b': 'dog'})
    report = str(tmp_path / 'out' / 'report.json')
    code = main.run(['--run-dir', str(tmp_path / 'runs'), 'evaluate', '--pred', str(tmp_path / 'pred'),
                     '--gold', str(tmp_path / 'gold'), '--report', report])
    assert code == 0
    with open(report, encoding='utf-8') as f:
        payload = json.load(f)
    assert payload['metric'] == 'LCS Micro-F1' and payload['n_pages'] == 2
    assert payload['precision'] == pytest.approx(1.0)
    assert payload['recall'] == pytest.approx(5 / 6)
    frame = pd.read_csv(tmp_path / 'out' / 'report.csv')
    assert frame['page_id'].tolist() == ['a', 'b']


def test_evaluate_mismatch_fails(tmp_path):
    _write_texts(tmp_path / 'pred', {'a': 'x'})
    _write_texts(tmp_path / 'gold', {'a': 'x', 'b': 'y'})
    code = main.run(['evaluate', '--pred', str(tmp_path / 'pred'), '--gold', str(tmp_path / 'gold'),
                     '--report', str(tmp_path / 'r.json')])
    assert code == 1
    assert not os.path.exists(tmp_path / 'r.json')


def test_compare_reports_from_files(tmp_path):
    a = {'kind': 'boilerplate', 'dataset': 'synthetic', 'scores': [0.9, 0.91, 0.92]}
    b = {'kind': 'boilerplate', 'dataset': 'synthetic', 'scores': [0.8, 0.82, 0.81]}
    for name, payload in (('a.json', a), ('b.json', b)):
        (tmp_path / name).write_text(json.dumps(payload), encoding='utf-8')
    out = str(tmp_path / 'cmp.json')
    assert main.run(['compare', '--a', str(tmp_path / 'a.json'), '--b', str(tmp_path / 'b.json'),
                     '--out', out]) == 0
    with open(out, encoding='utf-8') as f:
        comparison = json.load(f)
    assert comparison['datasets'][0]['test'] == 'welch_t'
    assert 0.0 < comparison['global_p_value'] < 0.05


@pytest.mark.parametrize('argv', [
    ['--profile', 'imagenet', 'synth', '--out', 'x'],
    ['synth'],
    ['frobnicate'],
    [],
    ['synth', '--out', 'x', '--flavour', 'news'],
    ['synth', '--out', 'x', '--pages', 'many'],
])
def test_usage_errors_exit_with_two(argv):
    assert main.run(argv) == 2


def test_invalid_config_value_exits_with_two(tmp_path):
    conf = tmp_path / 'bad.ini'
    conf.write_text('[model]\nK = 30\n', encoding='utf-8')
    assert main.run(['--config', str(conf), 'synth', '--out', str(tmp_path / 'x')]) == 2
    assert main.run(['--config', str(tmp_path / 'absent.ini'), 'synth', '--out', str(tmp_path / 'x')]) == 2


def test_task_config_error_exits_with_two(tmp_path):
    # 不存在的输入目录在任务内部以 ConfigError 报告
    assert main.run(['featurize', '--in', str(tmp_path / 'nowhere'), '--out', str(tmp_path / 'g')]) == 2


def test_profile_values_reach_tasks(tmp_path):
    assert main.run(['--profile', 'cleaneval', 'synth', '--out', str(tmp_path / 's'), '--pages', '1']) == 0
    with open(tmp_path / 'runs' / 'synth' / 'manifest.json', encoding='utf-8') as f:
        manifest = json.load(f)
    assert manifest['config']['profile'] == 'cleaneval'
    assert manifest['config']['optimizer']['lr'] == 0.002


@pytest.mark.slow
def test_pretrain_finetune_extract_pipeline(tmp_path):
    common = ['--config', _tiny_config(tmp_path), '--jobs', '2']
    sites, bp = str(tmp_path / 'sites'), str(tmp_path / 'bp')
    assert main.run(common + ['synth', '--out', sites, '--pages', '10', '--sites', '2']) == 0
    assert main.run(common + ['synth', '--out', bp, '--pages', '10', '--flavour', 'boilerplate']) == 0

    pretrained = str(tmp_path / 'pre.ckpt')
    assert main.run(common + ['pretrain', '--corpus', sites, '--out', pretrained, '--epochs', '1',
                              '--batch-pairs', '4']) == 0
    assert os.path.exists(pretrained)

    model = str(tmp_path / 'bp.ckpt')
    report = str(tmp_path / 'bp_report.json')
    assert main.run(common + ['finetune-boilerplate', '--dataset', bp, '--out', model, '--checkpoint', pretrained,
                              '--epochs', '1', '--report', report]) == 0
    with open(report, encoding='utf-8') as f:
        summary = json.load(f)
    assert summary['kind'] == 'boilerplate' and summary['split']['test'] == 2

    pred = str(tmp_path / 'pred')
    assert main.run(common + ['extract', '--checkpoint', model, '--in', bp, '--out', pred]) == 0
    assert len([n for n in os.listdir(pred) if n.endswith('.txt')]) == 10
    assert main.run(common + ['evaluate', '--pred', pred, '--gold', bp,
                              '--report', str(tmp_path / 'eval.json')]) == 0
    # 预训练检查点不是正文抽取模型
    assert main.run(common + ['extract', '--checkpoint', pretrained, '--in', bp, '--out', pred]) == 2


def _end_to_end(tmp_path, name, common, sites, bp):
    out = tmp_path / name
    run_dir = ['--run-dir', str(out / 'runs')]
    assert main.run(common + run_dir + ['featurize', '--in', sites, '--out', str(out / 'graphs')]) == 0
    pretrained = str(out / 'pre.ckpt')
    assert main.run(common + run_dir + ['pretrain', '--corpus', sites, '--out', pretrained, '--epochs', '2',
                                        '--batch-pairs', '4']) == 0
    assert main.run(common + run_dir + ['finetune-boilerplate', '--dataset', bp, '--out', str(out / 'bp.ckpt'),
                                        '--checkpoint', pretrained, '--epochs', '2',
                                        '--report', str(out / 'finetune.json')]) == 0
    assert main.run(common + run_dir + ['extract', '--checkpoint', str(out / 'bp.ckpt'), '--in', bp,
                                        '--out', str(out / 'pred')]) == 0
    assert main.run(common + run_dir + ['evaluate', '--pred', str(out / 'pred'), '--gold', bp,
                                        '--report', str(out / 'eval.json')]) == 0
    return out


@pytest.mark.slow
def test_seed_identical_runs_write_identical_reports(tmp_path):
    common = ['--config', _tiny_config(tmp_path), '--jobs', '1', '--seed', '11']
    sites, bp = str(tmp_path / 'sites'), str(tmp_path / 'bp')
    assert main.run(common + ['synth', '--out', sites, '--pages', '10', '--sites', '2']) == 0
    assert main.run(common + ['synth', '--out', bp, '--pages', '10', '--flavour', 'boilerplate']) == 0

    first = _end_to_end(tmp_path, 'first', common, sites, bp)
    second = _end_to_end(tmp_path, 'second', common, sites, bp)
    for name in ('finetune.json', 'eval.json', 'eval.csv'):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    for graph in sorted(os.listdir(first / 'graphs' / 'site00')):
        assert (first / 'graphs' / 'site00' / graph).read_bytes() == \
            (second / 'graphs' / 'site00' / graph).read_bytes()
    assert (first / 'pre.ckpt').read_bytes() == (second / 'pre.ckpt').read_bytes()


@pytest.mark.slow
def test_cv_with_profile_and_repeats_reports_every_fold(tmp_path):
    genre = str(tmp_path / 'genre')
    assert main.run(['synth', '--out', genre, '--pages', '30', '--sites', '3', '--flavour', 'genre']) == 0
    conf = tmp_path / 'cls.conf'
    conf.write_text('model.S=1\nmodel.T=1\nmodel.K=8\nmodel.N_h=2\nmodel.input_hidden=0\n', encoding='utf-8')
    report = str(tmp_path / 'cv.json')
    assert main.run(['cv', '--profile', '7web', '--repeats', '3', '--dataset', genre, '--config', str(conf),
                     '--epochs', '1', '--report', report]) == 0
    with open(report, encoding='utf-8') as f:
        payload = json.load(f)
    assert len(payload['folds']) == 30 and len(payload['scores']) == 30
    assert sorted({(row['repeat'], row['fold']) for row in payload['folds']}) == \
        [(r, k) for r in range(3) for k in range(10)]
    assert payload['classes'] == ['article', 'forum', 'shop']
    assert len(pd.read_csv(os.path.splitext(report)[0] + '.csv')) == 30
