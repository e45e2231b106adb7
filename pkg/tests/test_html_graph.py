import json
import math

import numpy as np
import pytest

from src.errors import ConfigError, EmptyDocument
from src.html_graph import (COMMENT_TAG, FONT_SIZES, SCHEMA, DomNode, Featurizer, build_graph,
                            extract_font_features, flip_pe_signs, laplacian_pe_from_edges, load_tag_vocab,
                            parse_html)
from src.text_encoder import HashedTextEncoder, SidecarTextEncoder, make_encoder

from .conftest import TINY_HTML, random_graph

TINY_TAGS = ['html', 'head', 'title', 'style', 'body', 'div', 'a', 'a', 'div', 'h2', 'p', 'b', 'p',
             COMMENT_TAG, 'div']


def _one_hot_name(vec, names):
    assert vec.sum() == 1.0
    return names[int(np.argmax(vec))]


def _normalized_laplacian(n, parent_edges):
    adj = np.zeros((n, n))
    for child, parent in parent_edges:
        adj[child, parent] = adj[parent, child] = 1.0
    d = adj.sum(axis=1)
    inv = np.where(d > 0, 1.0 / np.sqrt(np.maximum(d, 1e-12)), 0.0)
    return np.eye(n) - inv[:, None] * adj * inv[None, :]


def test_parse_keeps_document_order_and_hides_non_visible_text():
    root = parse_html(TINY_HTML)
    nodes = list(root.iter_preorder())
    assert [n.tag_name for n in nodes] == TINY_TAGS
    assert nodes[3].direct_text == ''
    assert nodes[10].direct_text == 'The river crossed the valley during the early season.'
    assert nodes[11].direct_text == 'old'
    assert nodes[13].direct_text == ''
    assert nodes[8].attributes['id'] == 'main'
    assert [c.child_index for c in nodes[4].children] == [0, 1, 2, 3]


def test_parse_separates_text_split_by_inline_tags():
    root = parse_html(b'<html><body><p>Hello<br>world</p><p>foo<b>x</b>bar</p></body></html>')
    texts = [n.direct_text for n in root.iter_preorder() if n.tag_name == 'p']
    assert texts == ['Hello world', 'foo bar']
    assert texts[0].split() == ['Hello', 'world']


def test_parse_recovers_from_broken_markup():
    root = parse_html(b'<div><p>unclosed <b>bold</div><span>tail')
    tags = [n.tag_name for n in root.iter_preorder()]
    assert 'p' in tags and 'span' in tags


@pytest.mark.parametrize('source', [b'', b'   \n  '])
def test_parse_empty_document(source):
    with pytest.raises(EmptyDocument):
        parse_html(source)


def test_font_features_from_tags_and_inherited_styles():
    nodes = list(parse_html(TINY_HTML).iter_preorder())
    h2_weight, _, h2_size = extract_font_features(nodes[9])
    assert _one_hot_name(h2_weight, ('normal', 'bold', 'unknown')) == 'bold'
    assert _one_hot_name(h2_size, FONT_SIZES) == 'x-large'

    b_weight, b_style, b_size = extract_font_features(nodes[11])
    assert _one_hot_name(b_weight, ('normal', 'bold', 'unknown')) == 'bold'
    assert _one_hot_name(b_style, ('normal', 'italic', 'oblique', 'unknown')) == 'unknown'
    assert _one_hot_name(b_size, FONT_SIZES) == 'unknown'

    _, p_style, _ = extract_font_features(nodes[12])
    assert _one_hot_name(p_style, ('normal', 'italic', 'oblique', 'unknown')) == 'italic'


@pytest.mark.parametrize('style,expected', [
    ('font-size: 12px', 'small'),
    ('font-size: 12pt', 'medium'),
    ('font-size: 30px', 'xx-large'),
    ('font-size: 80%', 'smaller'),
    ('font-size: 1.5em', 'larger'),
    ('font-size: large', 'large'),
    ('font-size: calc(1em + 2px)', 'unknown'),
])
def test_font_size_parsing(style, expected):
    parent = DomNode(tag_name='div', attributes={'style': style})
    child = parent.append(DomNode(tag_name='span'))
    _, _, size = extract_font_features(child)
    assert _one_hot_name(size, FONT_SIZES) == expected


def test_font_weight_numeric_and_nearest_setting_wins():
    outer = DomNode(tag_name='div', attributes={'style': 'font-weight: 700'})
    inner = outer.append(DomNode(tag_name='span', attributes={'style': 'font-weight: 300'}))
    leaf = inner.append(DomNode(tag_name='em'))
    weight, style, _ = extract_font_features(leaf)
    assert _one_hot_name(weight, ('normal', 'bold', 'unknown')) == 'normal'
    assert _one_hot_name(style, ('normal', 'italic', 'oblique', 'unknown')) == 'italic'
    weight, _, _ = extract_font_features(outer)
    assert _one_hot_name(weight, ('normal', 'bold', 'unknown')) == 'bold'


def test_schema_layout():
    assert SCHEMA.total_size == 1703
    assert SCHEMA.span('text') == slice(0, 513)
    assert SCHEMA.span('tag_type') == slice(1537, 1621)
    assert SCHEMA.span('pos_encoding') == slice(1671, 1703)
    vocab = load_tag_vocab()
    assert len(vocab) == 83
    assert len(SCHEMA.schema_hash(vocab)) == 16
    assert SCHEMA.schema_hash(vocab) != SCHEMA.schema_hash(vocab[::-1])
    assert SCHEMA.schema_hash(vocab, 'hashed') != SCHEMA.schema_hash(vocab, 'sidecar:vectors.jsonl')


def test_tag_vocab_must_have_83_tags(tmp_path):
    path = tmp_path / 'vocab.txt'
    path.write_text('\n'.join(f"t{i}" for i in range(82)))
    with pytest.raises(ConfigError):
        load_tag_vocab(str(path))
    path.write_text('# 注释\n' + '\n'.join(f"t{i}" for i in range(83)))
    assert load_tag_vocab(str(path))[0] == 't0'
    with pytest.raises(ConfigError):
        load_tag_vocab(str(tmp_path / 'missing.txt'))


def test_single_node_graph(encoder):
    graph = build_graph(DomNode(tag_name='html'), encoder)
    assert graph.n_nodes == 1
    assert graph.edges['parent'].shape == (0, 2)
    assert graph.edges['self'].tolist() == [[0, 0]]
    np.testing.assert_array_equal(graph.features[0, SCHEMA.span('pos_encoding')], 0.0)
    assert graph.features[0, SCHEMA.span('child_index')][0] == 1.0


def test_three_children_counts_and_indices(encoder):
    root = DomNode(tag_name='ul')
    for text in ('one', 'two', 'three'):
        root.append(DomNode(tag_name='li', direct_text=text))
    graph = build_graph(root, encoder)
    col = SCHEMA.span('num_child').start
    assert graph.features[0, col] == pytest.approx(math.log1p(3) / math.log1p(100))
    assert graph.features[1, col] == 0.0
    child_span = SCHEMA.span('child_index')
    assert [int(np.argmax(graph.features[i, child_span])) for i in (1, 2, 3)] == [0, 1, 2]
    assert graph.edges['parent'].tolist() == [[1, 0], [2, 0], [3, 0]]
    assert graph.edges['child'].tolist() == [[0, 1], [0, 2], [0, 3]]
    assert graph.adjacency('parent')[2, 0] and not graph.adjacency('parent')[0, 2]
    assert graph.text_node_indices() == [1, 2, 3]
    assert [m.source_span for m in graph.node_meta] == ['0', '0/0', '0/1', '0/2']


def test_child_index_is_clipped(encoder):
    root = DomNode(tag_name='div')
    for _ in range(46):
        root.append(DomNode(tag_name='span'))
    graph = build_graph(root, encoder)
    child_span = SCHEMA.span('child_index')
    assert int(np.argmax(graph.features[32, child_span])) == 31   # child_index 31
    assert int(np.argmax(graph.features[46, child_span])) == 31   # child_index 45
    assert graph.features[0, SCHEMA.span('num_child').start] == pytest.approx(math.log1p(46) / math.log1p(100))


def test_unknown_tags_use_catch_all_slot(encoder):
    root = DomNode(tag_name='html')
    root.append(DomNode(tag_name='custom-widget'))
    graph = build_graph(root, encoder)
    tag_span = SCHEMA.span('tag_type')
    assert graph.features[1, tag_span][-1] == 1.0
    assert graph.features[0, tag_span][0] == 1.0


def test_laplacian_pe_on_path():
    pe = laplacian_pe_from_edges(3, np.array([[1, 0], [2, 1]]), dim=32)
    assert pe.shape == (3, 32)
    np.testing.assert_array_equal(pe[:, 2:], 0.0)
    np.testing.assert_allclose(np.abs(pe[:, 0]), [math.sqrt(0.5), 0.0, math.sqrt(0.5)], atol=1e-6)
    np.testing.assert_allclose(pe[:, 1], [-0.5, math.sqrt(0.5), -0.5], atol=1e-6)


def test_laplacian_pe_complete_graph():
    edges = np.array([(i, j) for i in range(4) for j in range(i)])
    pe = laplacian_pe_from_edges(4, edges, dim=32).astype(np.float64)
    np.testing.assert_array_equal(pe[:, 3:], 0.0)
    lap = np.eye(4) - (np.ones((4, 4)) - np.eye(4)) / 3.0
    np.testing.assert_allclose(np.linalg.eigvalsh(lap), [0.0, 4 / 3, 4 / 3, 4 / 3], atol=1e-9)
    block = pe[:, :3]
    np.testing.assert_allclose(lap @ block, block * (4 / 3), atol=1e-5)
    np.testing.assert_allclose(np.linalg.norm(block, axis=0), 1.0, atol=1e-5)
    # 三列都与常向量正交
    np.testing.assert_allclose(block.sum(axis=0), 0.0, atol=1e-5)


@pytest.mark.parametrize('seed', range(5))
def test_laplacian_pe_columns_are_eigenvectors(encoder, seed):
    rng = np.random.default_rng(seed)
    graph = random_graph(rng, encoder, int(rng.integers(5, 30)))
    n = graph.n_nodes
    pe = graph.features[:, SCHEMA.span('pos_encoding')].astype(np.float64)
    lap = _normalized_laplacian(n, graph.edges['parent'])
    used = min(32, n - 1)
    eigenvalues = []
    for c in range(used):
        v = pe[:, c]
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-4)
        lam = float(v @ lap @ v)
        np.testing.assert_allclose(lap @ v, lam * v, atol=1e-4)
        assert v.max() >= np.abs(v).max() - 1e-5
        eigenvalues.append(lam)
    assert all(a <= b + 1e-5 for a, b in zip(eigenvalues, eigenvalues[1:]))
    assert eigenvalues[0] > 1e-6


def test_permuted_graph_relabels_edges(encoder):
    rng = np.random.default_rng(11)
    graph = random_graph(rng, encoder, 12)
    perm = rng.permutation(graph.n_nodes)
    moved = graph.permuted(perm)
    for kind in ('parent', 'child', 'self'):
        np.testing.assert_array_equal(moved.adjacency(kind), graph.adjacency(kind)[np.ix_(perm, perm)])
    np.testing.assert_array_equal(moved.features, graph.features[perm])
    assert moved.node_meta[0] == graph.node_meta[perm[0]]


def test_featurizer_output(tiny_graph, featurizer):
    assert tiny_graph.page_id == 'tiny'
    assert tiny_graph.features.shape == (len(TINY_TAGS), 1703)
    assert tiny_graph.features.dtype == np.float32
    assert np.all(np.isfinite(tiny_graph.features))
    np.testing.assert_array_equal(tiny_graph.features[:, SCHEMA.span('tag_type')].sum(axis=1), 1.0)
    text_rows = tiny_graph.text_node_indices()
    assert 10 in text_rows and 3 not in text_rows
    text = tiny_graph.features[10, :512]
    assert np.linalg.norm(text) == pytest.approx(1.0, abs=1e-5)
    assert not tiny_graph.features.flags.writeable

    again = featurizer.featurize_bytes(TINY_HTML, page_id='tiny')
    np.testing.assert_array_equal(again.features, tiny_graph.features)


def test_featurize_file_uses_file_stem(tmp_path, featurizer):
    path = tmp_path / 'page007.html'
    path.write_bytes(TINY_HTML)
    assert featurizer.featurize_file(str(path)).page_id == 'page007'


def test_flip_pe_signs_only_touches_positions(tiny_graph):
    flipped = flip_pe_signs(tiny_graph, np.random.default_rng(2))
    span = SCHEMA.span('pos_encoding')
    np.testing.assert_array_equal(np.abs(flipped.features[:, span]), np.abs(tiny_graph.features[:, span]))
    np.testing.assert_array_equal(flipped.features[:, :span.start], tiny_graph.features[:, :span.start])


def test_hashed_encoder_is_deterministic_and_normalized(encoder):
    vec = encoder.encode('The river crossed the valley')
    assert vec.shape == (512,)
    assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-5)
    np.testing.assert_array_equal(encoder.encode('   '), 0.0)
    batch = encoder.encode_batch(['The river crossed the valley', '', 'museum'])
    np.testing.assert_allclose(batch[0], vec, atol=1e-6)
    np.testing.assert_array_equal(batch[1], 0.0)
    np.testing.assert_array_equal(HashedTextEncoder().encode('museum'), encoder.encode('museum'))


def test_sidecar_encoder_with_fallback(tmp_path):
    target = np.zeros(512)
    target[3] = 2.0
    path = tmp_path / 'emb.jsonl'
    record = {'sha256': SidecarTextEncoder.text_key('hello'), 'embedding': target.tolist()}
    path.write_text(json.dumps(record) + '\n')
    enc = make_encoder(f"sidecar:{path}")
    out = enc.encode('hello')
    assert out[3] == pytest.approx(1.0)
    assert np.linalg.norm(enc.encode('something else')) == pytest.approx(1.0, abs=1e-5)


def test_encoder_spec_errors(tmp_path):
    with pytest.raises(ConfigError):
        make_encoder('word2vec')
    with pytest.raises(ConfigError):
        make_encoder(f"sidecar:{tmp_path / 'none.jsonl'}")
    bad = tmp_path / 'bad.jsonl'
    bad.write_text(json.dumps({'sha256': 'x', 'embedding': [1.0, 2.0]}) + '\n')
    with pytest.raises(ConfigError):
        make_encoder(f"sidecar:{bad}")


def test_custom_vocab_changes_featurizer_hash(tmp_path, encoder):
    path = tmp_path / 'vocab.txt'
    path.write_text('\n'.join(list(load_tag_vocab())[::-1]))
    assert Featurizer(encoder, load_tag_vocab(str(path))).schema_hash != Featurizer(encoder).schema_hash
