from dataclasses import dataclass, field
from logging import getLogger
from os import path

import numpy as np

from sparsevd.utils.file import get_split_path, write_text, SPLITS
from sparsevd.utils.ndmath import Rng

CHAR_WINDOW = 100
REGRESSION_LENGTH = 200
SYNTHETIC_VOCAB = 100
KEYWORDS = 5
MAX_KEYWORDS = 4
SYLLABLES = ('ka', 'to', 're', 'mi', 'su', 'no', 'la', 'pe', 'di', 'vo',
             'an', 'el', 'ru', 'ch', 'sta', 'qu', 'ix', 'om', 'be', 'gy')
PUNCTUATION = ('.', ',', ' ', ' ', ' ', ' ')
EXTENSIONS = {'charlm': 'txt', 'sentiment': 'tsv'}


# Exceptions
class DataError(Exception):
    '''Error class for unusable corpora and missing splits'''
    pass


class CorpusTooShortError(DataError):
    '''Error class for corpora shorter than one window'''
    pass


@dataclass
class Vocab:
    '''Symbols in first-appearance order over the training split.

    Index len(symbols) is UNK; sentiment also reserves PAD right after it.'''
    symbols: list
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.symbols = list(self.symbols)
        self.index = {symbol: i for i, symbol in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise DataError('vocabulary symbols must be unique')

    @property
    def size(self):
        return len(self.symbols)

    @property
    def unk(self):
        return len(self.symbols)

    @property
    def pad(self):
        return len(self.symbols) + 1

    def model_size(self, task):
        '''Rows of the input table: UNK for char-LM, UNK and PAD otherwise'''
        return self.size + (1 if task == 'charlm' else 2)

    def encode(self, symbols):
        return np.array([self.index.get(s, self.unk) for s in symbols],
                        dtype=np.int64)


@dataclass
class CharBatch:
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]


@dataclass
class RegBatch:
    '''Right-padded token indices, scores and true lengths'''
    inputs: np.ndarray
    targets: np.ndarray
    lengths: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]


@dataclass
class RegressionDataset:
    tokens: list
    targets: np.ndarray
    rejected: int = 0

    def __len__(self):
        return len(self.tokens)


def build_vocab(symbols, logger=getLogger()):
    '''Vocab over a training sequence of characters or tokens'''
    seen = {}
    for symbol in symbols:
        if symbol not in seen:
            seen[symbol] = len(seen)
    if not seen:
        raise DataError('cannot build a vocabulary from an empty split')
    logger.debug('vocabulary of {} symbols'.format(len(seen)))
    return Vocab(list(seen))


def detokenize(vocab, indices, separator='', unknown='?'):
    '''Maps indices back to text; PAD is dropped'''
    symbols = []
    for i in np.asarray(indices).reshape(-1):
        if i < vocab.size:
            symbols.append(vocab.symbols[i])
        elif i == vocab.unk:
            symbols.append(unknown)
    return separator.join(symbols)


def count_windows(length, window=CHAR_WINDOW):
    return max(0, (length - 1) // window)


def char_windows(indices, window=CHAR_WINDOW, batch_size=64, rng=None):
    '''Yields CharBatches of disjoint windows over one stream.

    Window k covers indices[k*T : k*T + T] with targets shifted by one; the
    trailing remainder is dropped and the last batch may be smaller. With
    `rng` the window order is shuffled.'''
    indices = np.asarray(indices, dtype=np.int64)
    count = count_windows(indices.size, window)
    if count == 0:
        raise CorpusTooShortError(
                'corpus of {} symbols is shorter than one window of {}'
                .format(indices.size, window + 1))

    starts = np.arange(count) * window
    if rng is not None:
        starts = starts[rng.permutation(count)]
    offsets = np.arange(window)
    for first in range(0, count, batch_size):
        rows = starts[first:first + batch_size, None] + offsets
        yield CharBatch(inputs=indices[rows], targets=indices[rows + 1])


def parse_regression_line(line):
    '''Returns (tokens, score) or None for a malformed line'''
    if '\t' not in line:
        return None
    text, raw = line.rstrip('\n').rsplit('\t', 1)
    try:
        score = float(raw)
    except ValueError:
        return None
    tokens = text.split()
    if not tokens or not 0.0 <= score <= 1.0:
        return None
    return tokens, score


def load_regression_tsv(filename, logger=getLogger()):
    '''Reads "text TAB score" lines; bad lines are counted and skipped'''
    if not path.isfile(filename):
        raise DataError('File not found: {}'.format(filename))

    tokens, targets, rejected = [], [], 0
    with open(filename, encoding='utf-8') as file:
        for number, line in enumerate(file, start=1):
            if not line.strip():
                continue
            parsed = parse_regression_line(line)
            if parsed is None:
                rejected += 1
                logger.debug('{}:{}: rejected line'.format(filename, number))
                continue
            tokens.append(parsed[0])
            targets.append(parsed[1])

    if rejected:
        logger.info('{}: {} lines rejected'.format(filename, rejected))
    return RegressionDataset(tokens, np.array(targets, dtype=np.float64),
                             rejected)


def encode_regression(dataset, vocab, length=REGRESSION_LENGTH):
    '''Returns (inputs, lengths) truncated/padded to `length` tokens'''
    inputs = np.full((len(dataset), length), vocab.pad, dtype=np.int64)
    lengths = np.zeros(len(dataset), dtype=np.int64)
    for row, tokens in enumerate(dataset.tokens):
        encoded = vocab.encode(tokens[:length])
        inputs[row, :encoded.size] = encoded
        lengths[row] = encoded.size
    return inputs, lengths


def regression_batches(inputs, targets, lengths, batch_size=64, rng=None):
    order = np.arange(inputs.shape[0])
    if rng is not None:
        order = order[rng.permutation(order.size)]
    for first in range(0, order.size, batch_size):
        rows = order[first:first + batch_size]
        yield RegBatch(inputs=inputs[rows], targets=targets[rows],
                       lengths=lengths[rows])


def read_corpus(filename):
    if not path.isfile(filename):
        raise DataError('File not found: {}'.format(filename))
    with open(filename, encoding='utf-8') as file:
        return file.read()


class TaskData:
    '''Encoded splits of one task plus the training vocabulary'''

    def __init__(self, task, vocab, splits, seq_length):
        self.task = task
        self.vocab = vocab
        self.splits = splits
        self.seq_length = seq_length

    @property
    def vocab_size(self):
        return self.vocab.model_size(self.task)

    def has_split(self, split):
        return split in self.splits

    def size(self, split='train'):
        '''Number of sequences in a split'''
        self._require(split)
        if self.task == 'charlm':
            return count_windows(self.splits[split].size, self.seq_length)
        return self.splits[split][0].shape[0]

    def batches(self, split, batch_size, rng=None):
        self._require(split)
        if self.task == 'charlm':
            return char_windows(self.splits[split], self.seq_length,
                                batch_size, rng)
        inputs, targets, lengths = self.splits[split]
        return regression_batches(inputs, targets, lengths, batch_size, rng)

    def _require(self, split):
        if split not in self.splits:
            raise DataError('split not loaded: {}'.format(split))


def load_task_data(config, vocab=None, logger=getLogger()):
    '''Loads <DATA>.<split>.<ext> for every available split.

    The training split is required unless `vocab` is given (evaluation of a
    saved model); valid and test are optional.'''
    if not config.data:
        raise DataError('no data prefix configured (DATA)')
    ext = EXTENSIONS[config.task]
    files = {split: get_split_path(config.data, split, ext)
             for split in SPLITS}
    available = {split: name for split, name in files.items()
                 if path.isfile(name)}
    if 'train' not in available and vocab is None:
        raise DataError('training split not found: {}'.format(
            files['train']))

    splits = {}
    if config.task == 'charlm':
        texts = {split: read_corpus(name)
                 for split, name in available.items()}
        if 'train' in texts and config.train_chars:
            texts['train'] = texts['train'][:config.train_chars]
        if vocab is None:
            vocab = build_vocab(texts['train'], logger=logger)
        for split, text in texts.items():
            splits[split] = vocab.encode(text)
            if count_windows(splits[split].size, config.seq_length) == 0:
                raise CorpusTooShortError(
                        '{} split is shorter than one window'.format(split))
    else:
        datasets = {split: load_regression_tsv(name, logger=logger)
                    for split, name in available.items()}
        if vocab is None:
            vocab = build_vocab(
                    (token for tokens in datasets['train'].tokens
                     for token in tokens), logger=logger)
        for split, dataset in datasets.items():
            if len(dataset) == 0:
                raise DataError('{} split has no usable lines'.format(split))
            inputs, lengths = encode_regression(
                    dataset, vocab, config.seq_length)
            splits[split] = (inputs, dataset.targets, lengths)

    logger.info('loaded splits {} from {}'.format(
        ', '.join(sorted(splits)), config.data))
    return TaskData(config.task, vocab, splits, config.seq_length)


def generate_keyword_regression(count, vocab_size=SYNTHETIC_VOCAB,
                                length=20, seed=0):
    '''Synthetic review-score pairs with planted keywords.

    Tokens w0..w4 are positive and w5..w9 negative keywords; the rest is
    filler. The score is (positives - negatives + 4) / 8.'''
    if vocab_size <= 2 * KEYWORDS or length < MAX_KEYWORDS:
        raise DataError('vocabulary or length too small for keywords')
    rng = Rng(seed, stream=3)
    rows = []
    for _ in range(count):
        tokens = rng.integers(2 * KEYWORDS, vocab_size, length)
        planted = int(rng.integers(0, MAX_KEYWORDS + 1))
        positions = rng.permutation(length)[:planted]
        positives = 0
        for position in positions:
            keyword = int(rng.integers(0, 2 * KEYWORDS))
            positives += keyword < KEYWORDS
            tokens[position] = keyword
        score = (2 * positives - planted + MAX_KEYWORDS) / (2 * MAX_KEYWORDS)
        rows.append((' '.join('w{}'.format(t) for t in tokens), score))
    return rows


def generate_char_corpus(count, seed=0):
    '''Seeded stream of pseudo-words, `count` characters long'''
    rng = Rng(seed, stream=4)
    pieces, size = [], 0
    while size < count:
        word = ''.join(SYLLABLES[i] for i in
                       rng.integers(0, len(SYLLABLES), rng.integers(1, 4)))
        piece = word + PUNCTUATION[int(rng.integers(0, len(PUNCTUATION)))]
        pieces.append(piece)
        size += len(piece)
    return ''.join(pieces)[:count]


def write_regression_tsv(filename, rows):
    return write_text(filename, ''.join(
        '{}\t{:.4f}\n'.format(text, score) for text, score in rows))


def generate_dataset(task, prefix, sizes, seed=0, length=20,
                     logger=getLogger()):
    '''Writes synthetic train/valid/test files under `prefix`.

    `sizes` maps split to sequences (sentiment) or characters (char-LM).'''
    written = []
    for offset, split in enumerate(SPLITS):
        filename = get_split_path(prefix, split, EXTENSIONS[task])
        if task == 'charlm':
            write_text(filename, generate_char_corpus(sizes[split],
                                                      seed + offset))
        else:
            write_regression_tsv(filename, generate_keyword_regression(
                sizes[split], length=length, seed=seed + offset))
        logger.info('synthetic {} split saved at {}'.format(split, filename))
        written.append(filename)
    return written
