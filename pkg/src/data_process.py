import csv
import logging

import pandas as pd

from errors import DatasetError
from probing import ProbeExample
from sentence_scorer import MinimalPair
from tokenizer import UNK_ID

logger = logging.getLogger(__name__)

ENCODINGS = ('utf8', 'latin-1')


def read_data(path_to_data, names, delimiter='\t'):
    """
    Get the DataFrame of a header-less tab-separated file, all columns as text.
    """
    for encoding in ENCODINGS:
        try:
            return pd.read_csv(
                path_to_data, sep=delimiter, header=None, names=names, dtype=str,
                encoding=encoding, quoting=csv.QUOTE_NONE, keep_default_na=False,
                skip_blank_lines=True,
            )
        except UnicodeDecodeError:
            logger.warning(f'{path_to_data} is not {encoding}; retrying')
        except FileNotFoundError as e:
            raise DatasetError(f'no such file: {path_to_data}') from e
        except pd.errors.ParserError as e:
            raise DatasetError(f'{path_to_data}: {e}') from e
    raise DatasetError(f'could not decode {path_to_data} as any of {ENCODINGS}')


def read_lines(path_to_data):
    for encoding in ENCODINGS:
        try:
            with open(path_to_data, 'r', encoding=encoding) as file:
                return [line.rstrip('\n').rstrip('\r') for line in file]
        except UnicodeDecodeError:
            logger.warning(f'{path_to_data} is not {encoding}; retrying')
        except FileNotFoundError as e:
            raise DatasetError(f'no such file: {path_to_data}') from e
    raise DatasetError(f'could not decode {path_to_data} as any of {ENCODINGS}')


def remove_missing_and_blank_values(df, columns):
    """
    Remove the rows whose required columns are missing or blank.
    """
    blank = df[columns].apply(lambda column: column.fillna('').str.strip() == '').any(axis=1)
    if blank.any():
        logger.warning(f'dropping {int(blank.sum())} rows with blank fields')
    return df[~blank].reset_index(drop=True)


def read_minimal_pairs(path_to_data):
    """
    `phenomenon<TAB>good<TAB>bad` per line.
    """
    df = read_data(path_to_data, names=['phenomenon', 'good', 'bad'])
    df = remove_missing_and_blank_values(df, ['phenomenon', 'good', 'bad'])
    identical = df['good'] == df['bad']
    if identical.any():
        raise DatasetError(f'{path_to_data}: {int(identical.sum())} pairs have identical sentences')
    return [MinimalPair(r.good, r.bad, r.phenomenon) for r in df.itertuples(index=False)]


def read_classification_data(path_to_data):
    """
    `label<TAB>text_a[<TAB>text_b]` per line. Integer labels stay integers;
    anything else numeric is a regression target.
    """
    df = read_data(path_to_data, names=['label', 'text_a', 'text_b'])
    df = remove_missing_and_blank_values(df, ['label', 'text_a'])
    if len(df) == 0:
        raise DatasetError(f'{path_to_data} holds no examples')
    try:
        labels = pd.to_numeric(df['label'])
    except ValueError as e:
        raise DatasetError(f'{path_to_data}: labels must be numeric') from e
    df['label'] = labels
    df['text_b'] = df['text_b'].where(df['text_b'].str.strip() != '', None)
    if df['text_b'].isna().all():
        df = df.drop(columns=['text_b'])
    return df


def read_probe_data(path_to_data, vocab):
    """
    `label<TAB>start<TAB>end[<TAB>start<TAB>end]<TAB>tokens` per line; tokens
    are space-separated vocabulary items, spans index them half-open.
    """
    examples = []
    for number, line in enumerate(read_lines(path_to_data), start=1):
        if not line.strip():
            continue
        fields = line.split('\t')
        if len(fields) not in (4, 6):
            raise DatasetError(f'{path_to_data}:{number}: expected 4 or 6 fields, got {len(fields)}')
        try:
            numbers = [int(value) for value in fields[:-1]]
        except ValueError as e:
            raise DatasetError(f'{path_to_data}:{number}: {e}') from e
        ids = [vocab.id_of.get(token, UNK_ID) for token in fields[-1].split()]
        span2 = tuple(numbers[3:5]) if len(numbers) == 5 else None
        example = ProbeExample(ids, tuple(numbers[1:3]), numbers[0], span2)
        try:
            examples.append(example.validate())
        except DatasetError as e:
            raise DatasetError(f'{path_to_data}:{number}: {e}') from e
    if not examples:
        raise DatasetError(f'{path_to_data} holds no probe examples')
    return examples
