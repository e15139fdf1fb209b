"""
Source corpus preprocessing: simplified-XML documents to Markdown, plus the
deterministic train/development split.

The accepted markup is documented in doc/corpus_schema.md.
"""
import html
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from clean_text import CleanText, count_words
from errors import SourceParseError
from writer import output_to_file

logger = logging.getLogger(__name__)

MAX_WORDS = 45_000
GAP_MARKER = '[UNK]'
ESCAPED_HEADER = '\\# '
DOC_KINDS = ('written', 'spoken')


@dataclass(frozen=True)
class Header:
    level: int
    text: str


@dataclass(frozen=True)
class Paragraph:
    sentences: Tuple[str, ...]


@dataclass(frozen=True)
class SpeechTurn:
    speaker: str
    sentences: Tuple[str, ...]


@dataclass(frozen=True)
class Quote:
    sentences: Tuple[str, ...]


@dataclass(frozen=True)
class ListBlock:
    items: Tuple[str, ...]


@dataclass(frozen=True)
class Gap:
    pass


Block = Union[Header, Paragraph, SpeechTurn, Quote, ListBlock, Gap]


@dataclass(frozen=True)
class Document:
    id: str
    kind: str
    blocks: Tuple[Block, ...]


@dataclass(frozen=True)
class MarkdownDoc:
    id: str
    text: str
    word_count: int
    dropped_words: int = 0

    @property
    def sentences(self):
        return [line for line in self.text.split('\n') if line.strip()]


@dataclass(frozen=True)
class SplitSpec:
    dev_fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.dev_fraction < 1.0:
            raise ValueError(f'dev_fraction must lie in (0, 1), got {self.dev_fraction}')
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError(f'seed must be a 64-bit unsigned integer, got {self.seed}')


# --------------------------------------------------------------------------
# Markup scanning
# --------------------------------------------------------------------------

_ATTR = r'[A-Za-z_][\w-]*\s*=\s*(?:"[^"]*"|\'[^\']*\'|[^\s"\'=<>/]+)'
TAG_RE = re.compile(r'<(/?)([A-Za-z][A-Za-z0-9]*)((?:\s+' + _ATTR + r')*)\s*(/?)>')
ATTR_RE = re.compile(r'([A-Za-z_][\w-]*)\s*=\s*(?:"([^"]*)"|\'([^\']*)\'|([^\s"\'=<>/]+))')
SKIP_RE = re.compile(r'<\?.*?\?>|<!--.*?-->', re.S)


@dataclass
class _Element:
    tag: str
    attrs: dict
    line: int
    column: int
    children: list = field(default_factory=list)


def _position(raw, offset):
    line = raw.count('\n', 0, offset) + 1
    column = offset - (raw.rfind('\n', 0, offset) + 1) + 1
    return line, column


def _scan(raw):
    """
    Build an element tree from the markup. Only structure is checked here.
    """
    root = _Element('#root', {}, 1, 1)
    stack = [root]
    pos = 0
    while pos < len(raw):
        lt = raw.find('<', pos)
        if lt < 0:
            stack[-1].children.append(raw[pos:])
            break
        if lt > pos:
            stack[-1].children.append(raw[pos:lt])

        skipped = SKIP_RE.match(raw, lt)
        if skipped:
            pos = skipped.end()
            continue

        match = TAG_RE.match(raw, lt)
        if match is None:
            raise SourceParseError('malformed markup', *_position(raw, lt))

        closing, tag, attr_text, self_closing = match.groups()
        line, column = _position(raw, lt)
        tag = tag.lower()

        if closing:
            if attr_text.strip() or self_closing:
                raise SourceParseError(f'malformed closing tag </{tag}>', line, column)
            if len(stack) == 1 or stack[-1].tag != tag:
                expected = stack[-1].tag if len(stack) > 1 else 'nothing'
                raise SourceParseError(f'unexpected </{tag}>, expected </{expected}>', line, column)
            stack.pop()
        else:
            attrs = {}
            for name, double, single, bare in ATTR_RE.findall(attr_text):
                attrs[name.lower()] = html.unescape(double or single or bare)
            element = _Element(tag, attrs, line, column)
            stack[-1].children.append(element)
            if not self_closing:
                stack.append(element)
        pos = match.end()

    if len(stack) > 1:
        element = stack[-1]
        raise SourceParseError(f'unclosed <{element.tag}>', element.line, element.column)
    return root


# --------------------------------------------------------------------------
# Interpretation
# --------------------------------------------------------------------------

BLOCK_TAGS = {'h1', 'h2', 'h3', 'h4', 'h5', 'h6', 'p', 'u', 'quote', 'list', 'gap'}
INLINE_TAGS = {'gap'}
KNOWN_TAGS = BLOCK_TAGS | {'doc', 's', 'item'}


class _Interpreter:

    def __init__(self, cleaner):
        self.cleaner = cleaner

    def fail(self, message, element):
        raise SourceParseError(message, element.line, element.column)

    def check_known(self, element):
        if element.tag not in KNOWN_TAGS:
            self.fail(f'unknown tag <{element.tag}>', element)

    def elements_only(self, element, allowed):
        """
        Children of a container: whitespace text is ignored, anything else must
        be one of the allowed tags.
        """
        children = []
        for child in element.children:
            if isinstance(child, str):
                if child.strip():
                    self.fail(f'unexpected text inside <{element.tag}>', element)
                continue
            self.check_known(child)
            if child.tag not in allowed:
                self.fail(f'<{child.tag}> is not allowed inside <{element.tag}>', child)
            children.append(child)
        return children

    def inline_text(self, element):
        parts = []
        for child in element.children:
            if isinstance(child, str):
                parts.append(html.unescape(child))
                continue
            self.check_known(child)
            if child.tag not in INLINE_TAGS:
                self.fail(f'<{child.tag}> is not allowed inside <{element.tag}>', child)
            if any(not isinstance(c, str) or c.strip() for c in child.children):
                self.fail('<gap> must be empty', child)
            parts.append(f' {GAP_MARKER} ')
        return self.cleaner.clean_text(''.join(parts))

    def sentences(self, element):
        sentences = []
        for child in self.elements_only(element, {'s'}):
            text = self.inline_text(child)
            if text:
                sentences.append(text)
        if not sentences:
            self.fail(f'<{element.tag}> contains no sentences', element)
        return tuple(sentences)

    def block(self, element):
        tag = element.tag
        if tag[0] == 'h':
            text = self.inline_text(element)
            if not text:
                self.fail(f'empty <{tag}>', element)
            return Header(int(tag[1]), text)
        if tag == 'p':
            return Paragraph(self.sentences(element))
        if tag == 'u':
            speaker = element.attrs.get('who', '').strip()
            if not speaker:
                self.fail('<u> needs a who attribute', element)
            return SpeechTurn(speaker, self.sentences(element))
        if tag == 'quote':
            return Quote(self.sentences(element))
        if tag == 'list':
            items = tuple(self.inline_text(item) for item in self.elements_only(element, {'item'}))
            items = tuple(item for item in items if item)
            if not items:
                self.fail('<list> contains no items', element)
            return ListBlock(items)
        if any(not isinstance(c, str) or c.strip() for c in element.children):
            self.fail('<gap> must be empty', element)
        return Gap()

    def document(self, root):
        docs = self.elements_only(root, {'doc'})
        if len(docs) != 1:
            raise SourceParseError(f'expected exactly one <doc>, found {len(docs)}', 1, 1)

        doc = docs[0]
        doc_id = doc.attrs.get('id', '').strip()
        if not doc_id:
            self.fail('<doc> needs an id attribute', doc)
        kind = doc.attrs.get('kind', 'written')
        if kind not in DOC_KINDS:
            self.fail(f'unknown document kind {kind!r}', doc)

        children = self.elements_only(doc, BLOCK_TAGS)
        blocks = tuple(self.block(child) for child in children)
        if not blocks or not isinstance(blocks[0], Header) or blocks[0].level != 1:
            where = children[0] if children else doc
            self.fail('document must start with top-level header', where)
        for child, block in zip(children[1:], blocks[1:]):
            if isinstance(block, Header) and block.level == 1:
                self.fail('a top-level header may only open a document', child)
        return Document(doc_id, kind, blocks)


def parse_source(raw, cleaner=None):
    """
    Parse one simplified-XML source document into a Document.
    """
    root = _scan(raw)
    return _Interpreter(cleaner or CleanText()).document(root)


# --------------------------------------------------------------------------
# Markdown rendering
# --------------------------------------------------------------------------

def render_block(block):
    if isinstance(block, Header):
        return '#' * block.level + ' ' + block.text
    if isinstance(block, Paragraph):
        return '\n'.join(block.sentences)
    if isinstance(block, SpeechTurn):
        return f"{block.speaker}: '" + '\n'.join(block.sentences) + "'"
    if isinstance(block, Quote):
        return '\n'.join('> ' + sentence for sentence in block.sentences)
    if isinstance(block, ListBlock):
        return '\n\n'.join('- ' + item for item in block.items)
    if isinstance(block, Gap):
        return GAP_MARKER
    raise TypeError(f'not a block: {block!r}')


def _escape_headers(text):
    # Only the opening header of a document may start a line with "# ".
    return '\n'.join('\\' + line if line.startswith('# ') else line for line in text.split('\n'))


def render_markdown(doc, max_words=MAX_WORDS):
    """
    Render a Document in the Markdown conventions of the corpus.

    Truncation keeps whole blocks: the first block that would push the word
    count over `max_words` is dropped together with everything after it. The
    opening header is always kept, cut to its first `max_words` words when it
    alone is too long.
    """
    if max_words < 2:
        raise ValueError(f'max_words must be at least 2 to hold a header, got {max_words}')
    rendered = []
    total = 0
    dropped = 0
    for index, block in enumerate(doc.blocks):
        text = render_block(block)
        words = count_words(text)
        if dropped or (index > 0 and total + words > max_words):
            dropped += words
            continue
        if words > max_words:
            dropped += words - max_words
            text = ' '.join(text.split()[:max_words])
            words = max_words
        if index > 0:
            text = _escape_headers(text)
        rendered.append(text)
        total += words

    if dropped:
        logger.debug(f'{doc.id}: truncated, {dropped} words dropped')
    return MarkdownDoc(doc.id, '\n\n'.join(rendered) + '\n', total, dropped)


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------

def split_corpus(docs, spec):
    """
    Deterministic train/development partition of the documents.
    """
    docs = list(docs)
    if len(docs) < 2:
        raise ValueError(f'need at least 2 documents to split, got {len(docs)}')

    n_dev = max(1, round(spec.dev_fraction * len(docs)))
    n_dev = min(n_dev, len(docs) - 1)

    # SeedSequence folds the full 64-bit seed into RandomState's 32-bit words.
    state = np.random.RandomState(np.random.SeedSequence(spec.seed).generate_state(4))
    train, dev = train_test_split(docs, test_size=n_dev, random_state=state, shuffle=True)
    return list(train), list(dev)


def split_statistics(splits, vocab=None):
    """
    Documents / sentences / words (and subwords when a vocabulary is given)
    per split, as a DataFrame with one row per split.
    """
    rows = []
    for name, docs in splits.items():
        row = {
            'split': name,
            'documents': len(docs),
            'sentences': sum(len(doc.sentences) for doc in docs),
            'words': sum(doc.word_count for doc in docs),
        }
        if vocab is not None:
            row['subwords'] = sum(len(vocab.encode(doc.text)) for doc in docs)
        rows.append(row)
    return pd.DataFrame(rows).set_index('split')


def read_markdown_corpus(path):
    """
    Read a concatenated Markdown corpus back into documents, each a list of
    sentence lines. A top-level header line starts a new document.
    """
    with open(path, 'r', encoding='utf-8') as file:
        lines = file.read().split('\n')

    documents = []
    for line in lines:
        escaped = line.startswith(ESCAPED_HEADER)
        if escaped:
            line = line[1:]
        if (line.startswith('# ') and not escaped) or not documents:
            documents.append([])
        if line.strip():
            documents[-1].append(line)
    return [doc for doc in documents if doc]


def write_corpus(train, dev, out_dir, vocab=None):
    """
    Write the concatenated Markdown splits, the id manifests and the split
    statistics. Every file is replaced atomically.
    """
    for name, docs in (('train', train), ('dev', dev)):
        output_to_file(f'{name}.md', '\n'.join(doc.text for doc in docs), directory=out_dir)
        output_to_file(f'{name}.ids', ''.join(doc.id + '\n' for doc in docs), directory=out_dir)

    stats = split_statistics({'train': train, 'dev': dev}, vocab)
    output_to_file('statistics.txt', stats.to_string() + '\n', directory=out_dir)
    return stats


def preprocess_directory(source_dir, out_dir, spec, max_words=MAX_WORDS):
    """
    Parse every *.xml file of a directory, render and split them.
    """
    files = sorted(name for name in os.listdir(source_dir) if name.endswith('.xml'))
    docs = []
    truncated = 0
    for name in files:
        with open(os.path.join(source_dir, name), 'r', encoding='utf-8') as file:
            raw = file.read()
        try:
            markdown = render_markdown(parse_source(raw), max_words)
        except SourceParseError as e:
            raise SourceParseError(f'{name}: {e}') from e
        truncated += markdown.dropped_words > 0
        docs.append(markdown)

    logger.info(f'Parsed {len(docs)} documents, {truncated} truncated to {max_words} words.')
    train, dev = split_corpus(docs, spec)
    stats = write_corpus(train, dev, out_dir)
    logger.info(f'Split sizes: {len(train)} train / {len(dev)} dev')
    return stats
