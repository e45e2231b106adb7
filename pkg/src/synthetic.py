"""
合成语料生成模块
给定种子生成确定性的 HTML 页面，用于冒烟实验与测试：
  site         每个网站一个目录，网站之间模板不同
  boilerplate  正文/导航/页脚标记明确的页面，附带 .txt 标注和 split.tsv
  genre        每个体裁一个目录，体裁由特有的标签结构决定
"""
import html
import logging
import os
from typing import Dict, List

import numpy as np

from .errors import ConfigError

logger = logging.getLogger(__name__)

CONTENT_WORDS = (
    'river', 'mountain', 'system', 'policy', 'economy', 'research', 'student', 'market', 'history',
    'science', 'energy', 'network', 'climate', 'culture', 'language', 'village', 'industry', 'harvest',
    'journey', 'council', 'library', 'theory', 'protein', 'signal', 'engine', 'garden', 'museum',
    'station', 'measure', 'project', 'budget', 'report', 'season', 'species', 'channel', 'pattern',
    'question', 'evidence', 'machine', 'planet', 'farmer', 'doctor', 'hospital', 'program', 'growth',
    'studied', 'explained', 'announced', 'observed', 'reported', 'described', 'improved', 'reduced',
    'the', 'a', 'of', 'and', 'in', 'with', 'for', 'after', 'during', 'new', 'local', 'early', 'large',
)
CHROME_WORDS = ('Home', 'About', 'Contact', 'Login', 'Search', 'Archive', 'Subscribe', 'Privacy',
                'Terms', 'Sitemap', 'Help', 'Careers', 'Advertise', 'Newsletter', 'Follow')
GENRES = ('article', 'forum', 'shop', 'gallery', 'listing', 'docs', 'recipe')
FLAVOURS = ('site', 'boilerplate', 'genre')


def _sentence(rng: np.random.Generator, low: int = 10, high: int = 20) -> str:
    words = rng.choice(CONTENT_WORDS, size=int(rng.integers(low, high + 1)))
    text = ' '.join(words)
    return text[0].upper() + text[1:] + '.'


def _chrome(rng: np.random.Generator, prefix: str = '') -> Dict[str, str]:
    links = rng.choice(CHROME_WORDS, size=5, replace=False)
    nav = ''.join(f'<li><a href="/{w.lower()}">{w}</a></li>' for w in links)
    return {
        'header': f'<div class="{prefix}header"><span class="{prefix}logo">Daily Notes</span></div>',
        'nav': f'<ul class="{prefix}menu">{nav}</ul>',
        'sidebar': (f'<div class="{prefix}sidebar"><h3>Related</h3><ul>'
                    + ''.join(f'<li><a href="#">{w}</a></li>' for w in rng.choice(CHROME_WORDS, size=3))
                    + '</ul></div>'),
        'footer': f'<div class="{prefix}footer">Copyright 2021 Daily Notes. All rights reserved.</div>',
    }


def _page(title: str, body: str, head_extra: str = '') -> str:
    return (f'<!DOCTYPE html><html><head><meta charset="utf-8"><title>{html.escape(title)}</title>'
            f'{head_extra}</head><body>{body}</body></html>')


# ---------------------------------------------------------------- 网站

_SITE_LAYOUTS = ('div', 'table', 'section')


def _site_page(rng: np.random.Generator, site: int) -> str:
    prefix = f's{site}-'
    layout = _SITE_LAYOUTS[site % len(_SITE_LAYOUTS)]
    chrome = _chrome(np.random.default_rng(site), prefix)
    paragraphs = ''.join(f'<p class="{prefix}text">{_sentence(rng)}</p>' for _ in range(int(rng.integers(2, 5))))
    if layout == 'table':
        main = f'<table class="{prefix}grid"><tr><td>{chrome["nav"]}</td><td>{paragraphs}</td></tr></table>'
    elif layout == 'section':
        main = (f'<nav id="{prefix}nav">{chrome["nav"]}</nav><section id="{prefix}main">'
                f'<h2>{_sentence(rng, 2, 4)}</h2>{paragraphs}</section>')
    else:
        main = f'{chrome["nav"]}<div id="{prefix}content">{paragraphs}</div>{chrome["sidebar"]}'
    if site % 2:
        main = f'<font size="{2 + site % 4}">{main}</font>'
    return _page(f'site {site}', chrome['header'] + main + chrome['footer'])


def _write(path: str, text: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(text)


def _generate_sites(out_dir: str, pages: int, sites: int, rng: np.random.Generator) -> List[str]:
    written = []
    urls = []
    for i in range(pages):
        site = i % sites
        rel = f"site{site:02d}/page{i:03d}.html"
        _write(os.path.join(out_dir, rel), _site_page(rng, site))
        urls.append(f"{rel}\thttp://www.site{site:02d}.example/news/page{i:03d}.html")
        written.append(rel)
    _write(os.path.join(out_dir, 'urls.tsv'), '\n'.join(urls) + '\n')
    return written


# ---------------------------------------------------------------- 正文抽取

def _boilerplate_page(rng: np.random.Generator) -> (str, str):
    chrome = _chrome(rng)
    paragraphs = [_sentence(rng, 12, 25) for _ in range(int(rng.integers(2, 6)))]
    content = '<div class="article-body">' + ''.join(f'<p>{p}</p>' for p in paragraphs) + '</div>'
    body = chrome['header'] + chrome['nav'] + content + chrome['sidebar'] + chrome['footer']
    return _page('article', body), '\n'.join(paragraphs) + '\n'


def _generate_boilerplate(out_dir: str, pages: int, rng: np.random.Generator) -> List[str]:
    written = []
    n_test = pages // 5
    split_lines = []
    for i in range(pages):
        name = f"page{i:03d}"
        page, gold = _boilerplate_page(rng)
        _write(os.path.join(out_dir, name + '.html'), page)
        _write(os.path.join(out_dir, name + '.txt'), gold)
        split_lines.append(f"{name}\t{'test' if i >= pages - n_test else 'train'}")
        written.append(name + '.html')
    _write(os.path.join(out_dir, 'split.tsv'), '\n'.join(split_lines) + '\n')
    return written


# ---------------------------------------------------------------- 体裁

def _genre_body(genre: str, rng: np.random.Generator) -> str:
    s = lambda lo=4, hi=8: _sentence(rng, lo, hi)  # noqa: E731
    if genre == 'article':
        return (f'<article><h2>{s()}</h2>' + ''.join(f'<p>{s(12, 20)}</p>' for _ in range(3))
                + f'<blockquote>{s()}</blockquote></article>')
    if genre == 'forum':
        rows = ''.join(f'<tr><td class="author">user{int(rng.integers(100))}</td><td class="post">{s()}</td></tr>'
                       for _ in range(4))
        return f'<table class="thread"><tbody>{rows}</tbody></table>'
    if genre == 'shop':
        options = ''.join(f'<option>{w}</option>' for w in rng.choice(CONTENT_WORDS, size=3))
        return (f'<div class="product"><h3>{s(2, 3)}</h3><span class="price">{int(rng.integers(5, 500))} USD</span>'
                f'<form><select>{options}</select><input type="text" name="qty">'
                f'<button>Buy now</button></form></div>')
    if genre == 'gallery':
        return ''.join(f'<figure><img src="img{k}.jpg"><figcaption>{s(2, 5)}</figcaption></figure>'
                       for k in range(4))
    if genre == 'listing':
        return ('<ol>' + ''.join(f'<li>{s(3, 6)}</li>' for _ in range(6)) + '</ol>'
                + '<dl>' + ''.join(f'<dt>{s(1, 2)}</dt><dd>{s()}</dd>' for _ in range(2)) + '</dl>')
    if genre == 'docs':
        return (f'<h3>{s(2, 4)}</h3><p>{s()}</p><pre><code>def f(x): return x</code></pre>'
                f'<h3>{s(2, 4)}</h3><pre><code>print(1)</code></pre>')
    if genre == 'recipe':
        return ('<h4>Ingredients</h4><ul class="ingredients">' + ''.join(f'<li><em>{s(1, 3)}</em></li>' for _ in range(5))
                + '</ul><h4>Steps</h4>' + ''.join(f'<p><b>{k + 1}.</b> {s()}</p>' for k in range(3)))
    raise ConfigError(f"未知的体裁: {genre}")


def _generate_genres(out_dir: str, pages: int, classes: int, rng: np.random.Generator) -> List[str]:
    if not 2 <= classes <= len(GENRES):
        raise ConfigError(f"体裁数必须在 [2, {len(GENRES)}] 内，当前为 {classes}")
    written = []
    for i in range(pages):
        genre = GENRES[i % classes]
        chrome = _chrome(rng)
        body = chrome['header'] + chrome['nav'] + _genre_body(genre, rng) + chrome['footer']
        rel = f"{genre}/page{i:03d}.html"
        _write(os.path.join(out_dir, rel), _page(genre, body))
        written.append(rel)
    return written


def generate_synthetic_corpus(out_dir: str, pages: int = 100, sites: int = 5, seed: int = 0,
                              flavour: str = 'site') -> Dict:
    """
    生成合成语料

    Args:
        out_dir: 输出目录
        pages: 页面总数
        sites: 网站数 (genre 风格下为体裁数)
        seed: 随机种子，相同参数生成的文件逐字节一致
        flavour: site / boilerplate / genre

    Returns:
        {'out_dir', 'pages', 'flavour', 'files'}
    """
    if flavour not in FLAVOURS:
        raise ConfigError(f"未知的语料风格: {flavour}，可选 {', '.join(FLAVOURS)}")
    if pages < 1 or sites < 1:
        raise ConfigError("pages 与 sites 必须 >= 1")
    rng = np.random.default_rng(seed)
    if flavour == 'site':
        files = _generate_sites(out_dir, pages, sites, rng)
    elif flavour == 'boilerplate':
        files = _generate_boilerplate(out_dir, pages, rng)
    else:
        files = _generate_genres(out_dir, pages, sites, rng)
    logger.info(f"合成语料已生成: {out_dir} ({flavour}, {len(files)} 个页面)")
    return {'out_dir': out_dir, 'pages': len(files), 'flavour': flavour, 'files': files}
