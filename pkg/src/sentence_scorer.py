import logging
import math
from dataclasses import dataclass

import pandas as pd
import torch
from tqdm import tqdm

import numerics
from errors import DatasetError, ShapeError
from tokenizer import CLS_ID, MASK_ID, SEP_ID

logger = logging.getLogger(__name__)


@dataclass
class MinimalPair:
    good: str
    bad: str
    phenomenon: str


class SentenceScorer:
    """
    Pseudo-log-likelihood scoring with a frozen masked language model.

    Every content token is masked in turn and the log-probability of its
    original id is summed. [CLS] and [SEP] are never masked nor scored.
    """

    def __init__(self, model, vocab, batch_size=64):
        self.model = model
        self.vocab = vocab
        self.batch_size = batch_size
        self.model.eval()

    def inputs(self, sentence):
        ids = self.vocab.encode(sentence)
        if not ids:
            raise DatasetError(f'sentence {sentence!r} encodes to no tokens')
        ids = [CLS_ID] + ids + [SEP_ID]
        if len(ids) > self.model.config.max_length:
            raise ShapeError(
                f'sentence of {len(ids)} ids exceeds max_length {self.model.config.max_length}'
            )
        return torch.tensor(ids, dtype=torch.int64)

    @torch.no_grad()
    def token_log_probs(self, sentence):
        """
        Log-probability of each content token with that token masked, all
        masked copies run as one batch.
        """
        ids = self.inputs(sentence)
        positions = torch.arange(1, len(ids) - 1)
        scores = []
        for chunk in positions.split(self.batch_size):
            batch = ids.repeat(len(chunk), 1)
            batch[torch.arange(len(chunk)), chunk] = MASK_ID
            with numerics.float64():
                logits = self.model(batch).mlm_logits
            log_probs = numerics.log_softmax(logits[torch.arange(len(chunk)), chunk])
            scores.extend(log_probs[torch.arange(len(chunk)), ids[chunk]].tolist())
        return scores

    @torch.no_grad()
    def token_log_probs_naive(self, sentence):
        ids = self.inputs(sentence)
        scores = []
        for position in range(1, len(ids) - 1):
            masked = ids.clone()
            masked[position] = MASK_ID
            with numerics.float64():
                logits = self.model(masked[None]).mlm_logits[0, position]
            scores.append(float(numerics.log_softmax(logits)[ids[position]]))
        return scores

    def score(self, sentence):
        return math.fsum(self.token_log_probs(sentence))

    def score_naive(self, sentence):
        return math.fsum(self.token_log_probs_naive(sentence))

    def compare(self, pair):
        """
        1 when the good sentence scores higher, 0.5 on an exact tie, else 0.
        """
        good, bad = self.score(pair.good), self.score(pair.bad)
        if good == bad:
            return 0.5
        return 1.0 if good > bad else 0.0


def minimal_pair_eval(scorer, pairs, quiet=True):
    """
    Accuracy per phenomenon and overall. Returns (DataFrame, overall accuracy).
    """
    pairs = list(pairs)
    if not pairs:
        raise DatasetError('no minimal pairs to evaluate')

    outcomes = [scorer.compare(pair) for pair in tqdm(pairs, desc='pairs', disable=quiet)]
    df = pd.DataFrame({'phenomenon': [p.phenomenon for p in pairs], 'correct': outcomes})
    report = (
        df.groupby('phenomenon', sort=True)['correct']
        .agg(['count', 'mean'])
        .rename(columns={'count': 'pairs', 'mean': 'accuracy'})
        .reset_index()
    )
    overall = math.fsum(outcomes) / len(outcomes)
    logger.info(f'Minimal-pair accuracy {overall:.4f} over {len(pairs)} pairs')
    return report, overall


def format_report(report, overall):
    lines = [f'{"phenomenon":<32}{"pairs":>8}{"accuracy":>12}']
    for row in report.itertuples(index=False):
        lines.append(f'{row.phenomenon:<32}{row.pairs:>8}{100 * row.accuracy:>12.2f}')
    lines.append(f'{"overall":<32}{int(report["pairs"].sum()):>8}{100 * overall:>12.2f}')
    return '\n'.join(lines) + '\n'
