import os

import pytest

from clean_text import CleanText
from conftest import fixture_path
from corpus import (Document, Gap, Header, ListBlock, Paragraph, SpeechTurn, SplitSpec, parse_source,
                    preprocess_directory, read_markdown_corpus, render_markdown, split_corpus)
from errors import SourceParseError


def read(name):
    with open(fixture_path(name), 'r', encoding='utf-8') as file:
        return file.read()


@pytest.mark.parametrize('name', ['written', 'spoken'])
def test_render_matches_golden_file(name):
    doc = parse_source(read(name + '.xml'))
    assert render_markdown(doc).text == read(name + '.md')


def test_minimal_document():
    doc = parse_source('<doc id=a><h1>T</h1><p><s>Hi.</s></p></doc>')
    assert doc == Document('a', 'written', (Header(1, 'T'), Paragraph(('Hi.',))))
    assert render_markdown(doc).text == '# T\n\nHi.\n'


def test_spoken_document_structure():
    doc = parse_source(read('spoken.xml'))
    assert doc.id == 'KB7'
    assert doc.kind == 'spoken'
    assert doc.blocks[0] == Header(1, 'Kitchen conversation')
    assert doc.blocks[1] == SpeechTurn('Anne', ('Put the kettle on, will you?', "I'm parched."))


def test_unknown_tag_reports_position():
    with pytest.raises(SourceParseError) as excinfo:
        parse_source(read('unknown_tag.xml'))
    assert 'unknown tag <foo>' in str(excinfo.value)
    assert (excinfo.value.line, excinfo.value.column) == (3, 1)


def test_document_must_open_with_top_level_header():
    with pytest.raises(SourceParseError, match='document must start with top-level header'):
        parse_source(read('no_header.xml'))


@pytest.mark.parametrize('raw', [
    '<doc id="x"><h1>T</h1><p><s>open</p></doc>',
    '<doc id="x"><h1>T</h1>',
    '<doc><h1>T</h1></doc>',
    '<doc id="x"><h1>T</h1><u><s>no speaker</s></u></doc>',
    '<doc id="x"><h1>T</h1><p>bare text</p></doc>',
])
def test_malformed_sources_are_rejected(raw):
    with pytest.raises(SourceParseError):
        parse_source(raw)


def test_cleaning_detokenizes_punctuation():
    cleaner = CleanText()
    assert cleaner.clean_text('He said ( quietly ) : " no " .') == 'He said (quietly): " no ".'
    assert cleaner.clean_text('  many\n\tspaces  ') == 'many spaces'


def test_truncation_keeps_whole_blocks_and_the_header():
    blocks = (Header(1, 'Title here'), Paragraph(('one two three',)), Paragraph(('four five six',)))
    doc = Document('d', 'written', blocks)

    markdown = render_markdown(doc, max_words=6)
    assert markdown.text == '# Title here\n\none two three\n'
    assert markdown.word_count == 6
    assert markdown.dropped_words == 3

    header_only = render_markdown(doc, max_words=2)
    assert header_only.text == '# Title\n'
    assert header_only.word_count == 2
    assert header_only.dropped_words == 7
    with pytest.raises(ValueError):
        render_markdown(doc, max_words=1)


def test_header_like_sentences_stay_in_their_document(tmp_path):
    doc = Document('d', 'written', (Header(1, 'T'), Paragraph(('# not a title', 'after'))))
    markdown = render_markdown(doc)
    assert markdown.text == '# T\n\n\\# not a title\nafter\n'

    path = tmp_path / 'corpus.md'
    path.write_text(markdown.text + '\n' + markdown.text, encoding='utf-8')
    assert read_markdown_corpus(str(path)) == [['# T', '# not a title', 'after']] * 2


def test_top_level_header_only_opens_a_document():
    with pytest.raises(SourceParseError, match='only open a document'):
        parse_source('<doc id="x"><h1>T</h1><p><s>a</s></p><h1>U</h1></doc>')


def test_list_and_gap_rendering():
    doc = Document('d', 'written', (Header(1, 'T'), ListBlock(('x', 'y')), Gap()))
    assert render_markdown(doc).text == '# T\n\n- x\n\n- y\n\n[UNK]\n'


def test_split_of_the_reference_corpus_size():
    train, dev = split_corpus(list(range(4049)), SplitSpec(dev_fraction=35 / 4049, seed=0))
    assert (len(train), len(dev)) == (4014, 35)
    assert sorted(train + dev) == list(range(4049))


def test_split_is_deterministic_per_seed():
    docs = list(range(100))
    first = split_corpus(docs, SplitSpec(0.1, seed=7))
    second = split_corpus(docs, SplitSpec(0.1, seed=7))
    other = split_corpus(docs, SplitSpec(0.1, seed=8))
    assert first == second
    assert first != other


def test_split_keeps_both_sides_non_empty():
    train, dev = split_corpus(['a', 'b'], SplitSpec(0.01))
    assert len(train) == 1 and len(dev) == 1
    with pytest.raises(ValueError):
        split_corpus(['a'], SplitSpec(0.5))
    with pytest.raises(ValueError):
        SplitSpec(1.5)


def test_preprocess_directory_writes_splits(tmp_path):
    source = tmp_path / 'source'
    source.mkdir()
    for name in ('written', 'spoken'):
        (source / f'{name}.xml').write_text(read(name + '.xml'), encoding='utf-8')

    stats = preprocess_directory(str(source), str(tmp_path / 'out'), SplitSpec(0.5, seed=3))
    assert stats.loc['train', 'documents'] == 1
    assert stats.loc['dev', 'documents'] == 1
    for name in ('train.md', 'dev.md', 'train.ids', 'dev.ids', 'statistics.txt'):
        assert os.path.exists(tmp_path / 'out' / name)

    documents = read_markdown_corpus(str(tmp_path / 'out' / 'train.md')) + \
        read_markdown_corpus(str(tmp_path / 'out' / 'dev.md'))
    titles = sorted(doc[0] for doc in documents)
    assert titles == ['# Kitchen conversation', '# The river & the town']
