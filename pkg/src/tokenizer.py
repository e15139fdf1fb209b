"""
Cased WordPiece vocabulary: pair-merge training, greedy longest-match
encoding through the `tokenizers` library, and the frequency-coverage report.
"""
import logging
import os
import unicodedata
from collections import Counter, defaultdict

import numpy as np
from tokenizers import Tokenizer, decoders, normalizers, pre_tokenizers
from tokenizers.models import WordPiece

from errors import VocabularyError
from writer import output_to_file

logger = logging.getLogger(__name__)

SPECIAL_TOKENS = ['[PAD]', '[UNK]', '[CLS]', '[SEP]', '[MASK]']
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(len(SPECIAL_TOKENS))
PREFIX = '##'
MAX_WORD_CHARS = 100


class Vocabulary:
    """
    Frozen subword inventory. Ids are dense; the special tokens hold 0..4.
    """

    def __init__(self, tokens):
        tokens = list(tokens)
        if tokens[:len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise VocabularyError(f'vocabulary must start with {SPECIAL_TOKENS}')
        if len(set(tokens)) != len(tokens):
            duplicates = sorted(t for t, c in Counter(tokens).items() if c > 1)
            raise VocabularyError(f'duplicate tokens: {duplicates[:10]}')

        self.tokens = tokens
        self.id_of = {token: index for index, token in enumerate(tokens)}
        self.continuation = np.array([t.startswith(PREFIX) for t in tokens], dtype=bool)
        self.tokenizer = self.build_tokenizer()

    def build_tokenizer(self):
        tokenizer = Tokenizer(WordPiece(
            vocab=dict(self.id_of),
            unk_token=SPECIAL_TOKENS[UNK_ID],
            max_input_chars_per_word=MAX_WORD_CHARS,
        ))
        tokenizer.normalizer = normalizers.NFC()
        tokenizer.pre_tokenizer = pre_tokenizers.WhitespaceSplit()
        tokenizer.decoder = decoders.WordPiece(prefix=PREFIX, cleanup=False)
        # Literal markers such as the corpus gap token map to their ids.
        tokenizer.add_special_tokens(SPECIAL_TOKENS)
        return tokenizer

    def __len__(self):
        return len(self.tokens)

    @property
    def special_ids(self):
        return frozenset(range(len(SPECIAL_TOKENS)))

    def encode(self, text):
        if not text:
            return []
        return self.tokenizer.encode(text, add_special_tokens=False).ids

    def decode(self, ids):
        return self.tokenizer.decode(list(ids), skip_special_tokens=False)

    def is_continuation(self, token_id):
        return bool(self.continuation[token_id])

    def save(self, path):
        """
        One token per line; the line index is the id.
        """
        directory, filename = _split(path)
        return output_to_file(filename, ''.join(token + '\n' for token in self.tokens), directory=directory)

    @classmethod
    def load(cls, path):
        try:
            with open(path, 'r', encoding='utf-8') as file:
                tokens = file.read().split('\n')
        except OSError as e:
            raise VocabularyError(f'cannot read vocabulary {path}: {e}') from e
        if tokens and tokens[-1] == '':
            tokens.pop()
        return cls(tokens)


def _split(path):
    return os.path.dirname(os.path.abspath(path)), os.path.basename(path)


def _words(lines):
    counts = Counter()
    for line in lines:
        for word in unicodedata.normalize('NFC', line).split():
            if word not in SPECIAL_TOKENS:
                counts[word] += 1
    return counts


def _merge(symbols, pair, merged):
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def train_vocab(lines, target_size):
    """
    Train a vocabulary of exactly `target_size` tokens.

    Start from the specials, every observed character and every observed
    `##`-continuation character; then repeatedly merge the most frequent
    adjacent symbol pair (ties broken by the lexicographically smallest pair).
    """
    word_counts = _words(lines)
    if not word_counts:
        raise VocabularyError('no words in the training text')

    ordered = sorted(word_counts)
    words = [[w[0]] + [PREFIX + c for c in w[1:]] for w in ordered]
    counts = [word_counts[w] for w in ordered]

    characters = sorted({c for w in ordered for c in w})
    # Both surface forms of every character keep in-alphabet words encodable.
    continuations = [PREFIX + c for c in characters]
    tokens = SPECIAL_TOKENS + characters + continuations
    if target_size < len(tokens):
        raise VocabularyError(
            f'target size {target_size} is below the {len(SPECIAL_TOKENS)} specials '
            f'plus {len(tokens) - len(SPECIAL_TOKENS)} alphabet tokens'
        )
    known = set(tokens)

    pair_counts = Counter()
    where = defaultdict(set)
    for index, symbols in enumerate(words):
        for pair in zip(symbols, symbols[1:]):
            pair_counts[pair] += counts[index]
            where[pair].add(index)

    while len(tokens) < target_size:
        if not pair_counts:
            raise VocabularyError(
                f'target size {target_size} is unreachable; max achievable size is {len(tokens)}'
            )
        best = min(pair_counts, key=lambda pair: (-pair_counts[pair], pair))
        merged = best[0] + best[1][len(PREFIX):]

        for index in sorted(where.pop(best)):
            symbols = words[index]
            for pair in zip(symbols, symbols[1:]):
                pair_counts[pair] -= counts[index]
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
                if pair in where:
                    where[pair].discard(index)
            symbols = _merge(symbols, best, merged)
            words[index] = symbols
            for pair in zip(symbols, symbols[1:]):
                pair_counts[pair] += counts[index]
                where[pair].add(index)

        if merged not in known:
            tokens.append(merged)
            known.add(merged)

    logger.info(f'Trained vocabulary of {len(tokens)} tokens from {len(word_counts)} word types.')
    return Vocabulary(tokens)


def token_counts(vocab, lines):
    counts = np.zeros(len(vocab), dtype=np.int64)
    seen = False
    for line in lines:
        seen = True
        ids = vocab.encode(line)
        if ids:
            np.add.at(counts, ids, 1)
    if not seen:
        raise VocabularyError('empty text stream')
    return counts


def coverage_fraction(counts, threshold):
    """
    Share of classes occurring at least `threshold` times.
    """
    if threshold < 1:
        raise ValueError(f'threshold must be >= 1, got {threshold}')
    counts = np.asarray(counts)
    return float(np.count_nonzero(counts >= threshold)) / len(counts)


def coverage_report(vocab, lines, threshold=100):
    """
    Fraction of all vocabulary tokens whose count under `encode` reaches
    `threshold`.
    """
    return coverage_fraction(token_counts(vocab, lines), threshold)


def write_counts(vocab, counts, path):
    """
    `token<TAB>count` sidecar.
    """
    directory, filename = _split(path)
    lines = ''.join(f'{token}\t{count}\n' for token, count in zip(vocab.tokens, counts))
    return output_to_file(filename, lines, directory=directory)


def word_spans(ids, vocab):
    """
    Half-open (start, end) spans of words: a head piece plus the `##` pieces
    that follow it. Special positions belong to no word.
    """
    spans = []
    start = None
    for position, token_id in enumerate(ids):
        if token_id in vocab.special_ids:
            if start is not None:
                spans.append((start, position))
            start = None
        elif start is None or not vocab.is_continuation(token_id):
            if start is not None:
                spans.append((start, position))
            start = position
    if start is not None:
        spans.append((start, len(ids)))
    return spans


def truncate_pair(segment_a, segment_b, budget):
    """
    Drop trailing tokens from the longer segment until both fit in `budget`.
    """
    a, b = list(segment_a), list(segment_b)
    truncated = False
    while len(a) + len(b) > budget:
        truncated = True
        if len(a) > len(b):
            a.pop()
        else:
            b.pop()
    return a, b, truncated


def build_inputs(segment_a, segment_b=None, max_length=512):
    """
    [CLS] a [SEP] (b [SEP]) with longest-first truncation.

    Returns ids, segment ids and whether anything was truncated.
    """
    a, b = list(segment_a), list(segment_b) if segment_b is not None else None
    budget = max_length - (3 if b is not None else 2)
    if budget < (2 if b is not None else 1):
        raise ValueError(f'max_length {max_length} leaves no room for content')

    truncated = False
    if b is None:
        if len(a) > budget:
            a, truncated = a[:budget], True
    else:
        a, b, truncated = truncate_pair(a, b, budget)

    ids = [CLS_ID] + a + [SEP_ID]
    segments = [0] * len(ids)
    if b is not None:
        ids += b + [SEP_ID]
        segments += [1] * (len(b) + 1)
    return ids, segments, truncated
