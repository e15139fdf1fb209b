import re
import unicodedata

# No space is written before these tokens, nor after the opening ones.
NO_SPACE_BEFORE = set('.,;:!?\')]')
NO_SPACE_AFTER = set('([\'')


class CleanText:
    """
    Sentence-level text cleaning for the source corpus.

    The source stores sentences as whitespace-separated word tokens. We move
    them back towards running text: NFC normalization, whitespace squeezing
    and a small set of detokenization rules.
    """

    def __init__(self, detokenize=True):
        self.detokenize = detokenize

    def clean_text(self, text):
        text = unicodedata.normalize('NFC', text)

        # Newlines never survive inside a sentence.
        text = re.sub(r'\s+', ' ', text).strip()

        if self.detokenize:
            text = self.detokenize_tokens(text.split(' ')) if text else text

        return text

    def detokenize_tokens(self, tokens):
        """
        Join tokens with single spaces, except before closing punctuation and
        after opening brackets/quotes.
        """
        pieces = []
        previous = None
        for token in tokens:
            if not token:
                continue
            glue = (
                previous is None
                or token[0] in NO_SPACE_BEFORE
                or previous[-1] in NO_SPACE_AFTER
            )
            pieces.append(token if glue else ' ' + token)
            previous = token
        return ''.join(pieces)


def count_words(text):
    """
    Number of whitespace-delimited tokens.
    """
    return len(text.split())
