import math

import numpy as np
import pytest
from scipy import stats

from src.errors import DegenerateSample, EmptyCorpus, InvalidP, MissingGold, SplitMismatch
from src.eval_metrics import (compare_reports, corpus_f1, corrected_paired_t, evaluate_texts, fisher_combined,
                              lcs_alignment, lcs_length, lcs_precision_recall, tokenize, welch_t)


def _naive_lcs(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]


def _is_subsequence(needle, haystack):
    it = iter(haystack)
    return all(token in it for token in needle)


def _welch_oracle(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return 2 * stats.t.sf(abs(t), df)


def test_tokenize_normalizes_and_splits():
    assert tokenize('  the\tcat\n sat ') == ['the', 'cat', 'sat']
    assert tokenize('café') == ['café']
    assert tokenize('') == []


@pytest.mark.parametrize('a,b,expected', [
    ('', '', 0),
    ('a b c', '', 0),
    ('a b c', 'a b c', 3),
    ('a b c d', 'b d', 2),
    ('x y z', 'a b c', 0),
    ('a b a b', 'b a b a', 3),
])
def test_lcs_length_cases(a, b, expected):
    assert lcs_length(a.split(), b.split()) == expected


@pytest.mark.parametrize('seed', range(500))
def test_lcs_length_matches_dp_oracle(seed):
    rng = np.random.default_rng(seed)
    alphabet = [str(t) for t in range(int(rng.integers(1, 6)))]
    a = list(rng.choice(alphabet, size=int(rng.integers(0, 13))))
    b = list(rng.choice(alphabet, size=int(rng.integers(0, 13))))
    expected = _naive_lcs(a, b)
    assert lcs_length(a, b) == expected
    matched = lcs_alignment(a, b)
    assert int(matched.sum()) == expected
    assert _is_subsequence([t for t, m in zip(a, matched) if m], b)


def test_precision_recall_cases():
    assert lcs_precision_recall('the cat', 'the cat sat') == pytest.approx((1.0, 2 / 3))
    assert lcs_precision_recall('', '') == (1.0, 1.0)
    assert lcs_precision_recall('', 'gold text') == (0.0, 0.0)
    assert lcs_precision_recall('noise', '') == (0.0, 0.0)
    assert lcs_precision_recall('a x b', 'a b') == pytest.approx((2 / 3, 1.0))


def test_corpus_f1_averages_before_harmonic_mean():
    report = corpus_f1([(1.0, 0.5), (0.5, 1.0)], ['p1', 'p2'])
    assert report.corpus_precision == 0.75 and report.corpus_recall == 0.75
    assert report.corpus_f1 == pytest.approx(0.75)
    assert corpus_f1([(0.0, 0.0)]).corpus_f1 == 0.0
    frame = report.to_frame()
    assert frame['page_id'].tolist() == ['p1', 'p2']
    summary = report.to_dict()
    assert summary['n_pages'] == 2 and summary['per_page'][1]['recall'] == 1.0
    with pytest.raises(EmptyCorpus):
        corpus_f1([])


def test_evaluate_texts_requires_matching_pages():
    report = evaluate_texts({'a': 'the cat', 'b': 'dog'}, {'a': 'the cat sat', 'b': 'dog'})
    assert report.page_ids == ['a', 'b']
    assert report.corpus_precision == pytest.approx(1.0)
    assert report.corpus_recall == pytest.approx((2 / 3 + 1) / 2)
    with pytest.raises(MissingGold):
        evaluate_texts({'a': 'x', 'c': 'y'}, {'a': 'x'})
    with pytest.raises(SplitMismatch):
        evaluate_texts({'a': 'x'}, {'a': 'x', 'b': 'y'})


@pytest.mark.parametrize('a,b', [
    ([19.8, 20.4, 19.6, 17.8, 18.5, 18.9, 18.3, 18.9, 19.5, 22.0],
     [28.2, 26.6, 20.1, 23.3, 25.2, 22.1, 17.7, 27.6, 20.6, 13.7, 23.2, 17.5, 20.6, 18.0, 23.9, 21.6]),
    ([0.8, 0.82, 0.79, 0.85], [0.78, 0.8, 0.81]),
    ([1.0, 2.0, 3.0, 4.0, 5.0], [2.0, 4.0, 6.0, 8.0, 10.0]),
])
def test_welch_matches_formula(a, b):
    assert welch_t(a, b) == pytest.approx(_welch_oracle(a, b), abs=1e-3)


def test_welch_detects_clear_difference():
    assert welch_t([0, 0, 0, 0], [10, 10, 10, 10.0001]) < 0.001
    with pytest.raises(DegenerateSample):
        welch_t([1.0], [1.0, 2.0])
    with pytest.raises(DegenerateSample):
        welch_t([1.0, 1.0], [2.0, 2.0])


def test_fisher_combined():
    assert fisher_combined([0.5, 0.5]) == pytest.approx(0.5966, abs=1e-3)
    assert fisher_combined([1.0]) == pytest.approx(1.0)
    assert fisher_combined([1e-10, 0.5]) < 1e-7
    for bad in ([], [0.0], [1.5], [float('nan')]):
        with pytest.raises(InvalidP):
            fisher_combined(bad)


def test_corrected_paired_t_reduces_to_paired_t():
    rng = np.random.default_rng(0)
    a = rng.normal(0.8, 0.02, size=10)
    b = a - rng.normal(0.01, 0.01, size=10)
    expected = stats.ttest_rel(a, b).pvalue
    assert corrected_paired_t(a - b, n_train=90, n_test=0) == pytest.approx(expected, rel=1e-9)
    assert corrected_paired_t(a - b, n_train=90, n_test=10) > expected


def test_corrected_paired_t_degenerate_inputs():
    assert corrected_paired_t([0.0, 0.0, 0.0], 9, 1) == 1.0
    with pytest.raises(DegenerateSample):
        corrected_paired_t([0.1, 0.1, 0.1], 9, 1)
    with pytest.raises(DegenerateSample):
        corrected_paired_t([0.1], 9, 1)
    with pytest.raises(DegenerateSample):
        corrected_paired_t([0.1, 0.2], 0, 1)


def test_compare_reports_combines_datasets():
    bp_a = {'kind': 'boilerplate', 'dataset': 'cleaneval', 'scores': [0.84, 0.85, 0.86]}
    bp_b = {'kind': 'boilerplate', 'dataset': 'cleaneval', 'scores': [0.80, 0.81, 0.79]}
    cv_a = {'kind': 'cv', 'dataset': '7web', 'scores': [0.9, 0.92, 0.91, 0.93], 'n_train': 90, 'n_test': 10}
    cv_b = {'kind': 'cv', 'dataset': '7web', 'scores': [0.88, 0.9, 0.9, 0.9], 'n_train': 90, 'n_test': 10}
    result = compare_reports([bp_a, cv_a], [cv_b, bp_b])
    tests = {row['dataset']: row['test'] for row in result['datasets']}
    assert tests == {'cleaneval': 'welch_t', '7web': 'corrected_paired_t'}
    p_values = [row['p_value'] for row in result['datasets']]
    assert result['global_p_value'] == pytest.approx(fisher_combined(p_values))

    with pytest.raises(SplitMismatch):
        compare_reports([bp_a], [cv_b])
    with pytest.raises(SplitMismatch):
        compare_reports([cv_a], [{**cv_a, 'kind': 'boilerplate'}])
    with pytest.raises(EmptyCorpus):
        compare_reports([], [])
