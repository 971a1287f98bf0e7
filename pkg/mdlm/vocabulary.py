"""
Word-level vocabulary with a character fallback.

Text is pre-tokenized GPT-2 style (leading-space words, LaTeX commands,
single digits, single punctuation marks, whitespace runs) so that joining
the pieces reproduces the input exactly.
"""
import hashlib
import json
import logging
import re
import string

logger = logging.getLogger(__name__)

PAD, MASK, BOS, EOS, SEP, NUM, UNK = '[PAD]', '[MASK]', '[BOS]', '[EOS]', '[SEP]', '[NUM]', '[UNK]'
SPECIAL_TOKENS = (PAD, MASK, BOS, EOS, SEP, NUM, UNK)

PRETOKENIZE = re.compile(r" ?\\[A-Za-z]+| ?[A-Za-z]+| ?\d| ?[^\sA-Za-z\d]|\s+(?!\S)|\s+")
FALLBACK_CHARACTERS = string.printable


def pretokenize(text):
    return PRETOKENIZE.findall(text)


class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("Vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("Vocabulary tokens must be unique")
        self.tokens = tokens
        self.index = {token: i for i, token in enumerate(tokens)}
        self.pad_id = self.index[PAD]
        self.mask_id = self.index[MASK]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.sep_id = self.index[SEP]
        self.num_id = self.index[NUM]
        self.unk_id = self.index[UNK]

    def __len__(self):
        return len(self.tokens)

    @property
    def special_ids(self):
        return frozenset(self.index[t] for t in SPECIAL_TOKENS)

    def encode(self, text):
        ids = []
        for piece in pretokenize(text):
            if piece in self.index:
                ids.append(self.index[piece])
                continue
            ids.extend(self.index.get(ch, self.unk_id) for ch in piece)
        return ids

    def decode(self, ids):
        return ''.join(self.tokens[i] for i in ids)

    def to_dict(self):
        return {'tokens': self.tokens}

    @classmethod
    def from_dict(cls, data):
        return cls(data['tokens'])

    @property
    def vocabulary_hash(self):
        payload = json.dumps(self.tokens, separators=(',', ':'), ensure_ascii=False)
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()


def build_vocabulary(corpus):
    """Deterministic vocabulary: specials, then every piece and character, sorted."""
    pieces = set(FALLBACK_CHARACTERS)
    for text in corpus:
        for piece in pretokenize(text):
            pieces.add(piece)
            pieces.update(piece)
    pieces.difference_update(SPECIAL_TOKENS)
    vocabulary = Vocabulary(list(SPECIAL_TOKENS) + sorted(pieces))
    logger.info(f"Built vocabulary with {len(vocabulary)} tokens")
    return vocabulary


def table_corpus(table):
    """Every string the backbone has to read or write for this table."""
    schema = table.schema
    yield schema.describe()
    for spec in schema.categorical:
        yield from (str(c) for c in spec.categories)
        yield from table.column(spec.name).astype(str).unique()
    for spec in schema.text:
        yield from table.column(spec.name).astype(str)
