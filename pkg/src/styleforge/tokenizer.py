"""Byte-pair-encoding subword tokenizer.

Words are whitespace-split; the final subword of every word carries the
end-of-word marker "</w>" so decoding can restore word boundaries. Merge
order is deterministic: most frequent pair first, frequency ties broken
lexicographically by (left, right).
"""

import hashlib
from collections import Counter
from dataclasses import dataclass, field

from .errors import ConfigError, DegenerateInputError

PAD, BOS, EOS, MASK, UNK = "<pad>", "<bos>", "<eos>", "<mask>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, MASK, UNK)
PAD_ID, BOS_ID, EOS_ID, MASK_ID, UNK_ID = 0, 1, 2, 3, 4
SPECIAL_IDS = (PAD_ID, BOS_ID, EOS_ID, MASK_ID, UNK_ID)

WORD_END = "</w>"

TokenSeq = list  # list[int]; ids valid for the owning Vocabulary


@dataclass
class Vocabulary:
    id_to_token: list
    token_to_id: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.token_to_id:
            self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ConfigError("duplicate token strings in vocabulary")
        if any(not t for t in self.id_to_token):
            raise ConfigError("empty subword string in vocabulary")
        if tuple(self.id_to_token[:5]) != SPECIAL_TOKENS:
            raise ConfigError("special tokens must occupy ids 0..4")

    def __len__(self):
        return len(self.id_to_token)


@dataclass
class MergeTable:
    pairs: list  # list[(left, right)], order significant

    def __len__(self):
        return len(self.pairs)


def _word_symbols(word):
    # last character carries the end-of-word marker
    return [*word[:-1], word[-1] + WORD_END]


def _merge_once(symbols, left, right):
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def train_bpe(corpus_text, num_merges):
    """Learn a BPE vocabulary and merge table from raw sentences.

    Returns (Vocabulary, MergeTable). The vocabulary is the five special
    tokens, the base alphabet (every corpus character, in plain and
    word-final form), and one token per merge. Merging stops early when
    no adjacent pair is left to merge.
    """
    if num_merges < 0:
        raise ConfigError("num_merges must be >= 0")
    words = Counter()
    for line in corpus_text:
        words.update(line.split())
    if not words:
        raise ConfigError("empty corpus: no words to train BPE on")

    alphabet = set()
    for word in words:
        for ch in word:
            alphabet.add(ch)
            alphabet.add(ch + WORD_END)

    tokens = list(SPECIAL_TOKENS) + sorted(alphabet)
    seen = set(tokens)
    split_words = {w: _word_symbols(w) for w in words}
    merges = []

    for _ in range(num_merges):
        pair_counts = Counter()
        for word, freq in words.items():
            sym = split_words[word]
            for a, b in zip(sym, sym[1:]):
                pair_counts[(a, b)] += freq
        if not pair_counts:
            break
        left, right = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append((left, right))
        merged = left + right
        if merged not in seen:
            tokens.append(merged)
            seen.add(merged)
        for word in split_words:
            split_words[word] = _merge_once(split_words[word], left, right)

    return Vocabulary(tokens), MergeTable(merges)


def _encode_word(word, vocab, merges):
    symbols = _word_symbols(word)
    for left, right in merges.pairs:
        if len(symbols) < 2:
            break
        present = set(symbols)
        if left in present and right in present:
            symbols = _merge_once(symbols, left, right)
    return [vocab.token_to_id.get(s, UNK_ID) for s in symbols]


def encode(text, vocab, merges):
    """Tokenize a sentence: greedy merge application in learned order.

    Characters (or symbols) outside the vocabulary map to UNK. Returns
    unframed ids; see frame() for adding BOS/EOS.
    """
    ids = []
    cache = {}
    for word in text.split():
        if word not in cache:
            cache[word] = _encode_word(word, vocab, merges)
        ids.extend(cache[word])
    return ids


def decode(tokens, vocab):
    """Invert encode(): special tokens are stripped, word-end markers
    become spaces. Raises DegenerateInputError on out-of-range ids."""
    parts = []
    for tid in tokens:
        if not 0 <= tid < len(vocab):
            raise DegenerateInputError(f"token id {tid} outside vocabulary of size {len(vocab)}")
        if tid in SPECIAL_IDS:
            continue
        sub = vocab.id_to_token[tid]
        if sub.endswith(WORD_END):
            parts.append(sub[: -len(WORD_END)])
            parts.append(" ")
        else:
            parts.append(sub)
    return "".join(parts).strip()


def frame(ids):
    """Wrap raw ids with BOS/EOS for the model."""
    return [BOS_ID] + list(ids) + [EOS_ID]


def save_vocabulary(path, vocab, merges):
    """Two-part text format: header `BPE v1 <num_merges>`, one token per
    line, then one merge pair per line separated by a single space."""
    lines = [f"BPE v1 {len(merges)}"]
    lines.extend(vocab.id_to_token)
    lines.extend(f"{a} {b}" for a, b in merges.pairs)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_vocabulary(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("BPE v1 "):
        raise ConfigError(f"{path}: not a BPE v1 vocabulary file")
    try:
        num_merges = int(lines[0].split()[2])
    except (IndexError, ValueError):
        raise ConfigError(f"{path}: malformed BPE header {lines[0]!r}")
    body = lines[1:]
    if num_merges > len(body):
        raise ConfigError(f"{path}: header claims {num_merges} merges, file too short")
    token_lines = body[: len(body) - num_merges]
    merge_lines = body[len(body) - num_merges:]
    pairs = []
    for line in merge_lines:
        a, _, b = line.partition(" ")
        if not a or not b:
            raise ConfigError(f"{path}: malformed merge line {line!r}")
        pairs.append((a, b))
    return Vocabulary(token_lines), MergeTable(pairs)


def vocabulary_hash(vocab, merges):
    """Stable hash of the serialized tokenizer; recorded in checkpoints so
    stages can verify they were trained against the same vocabulary."""
    h = hashlib.sha256()
    for t in vocab.id_to_token:
        h.update(t.encode("utf-8") + b"\n")
    for a, b in merges.pairs:
        h.update(f"{a} {b}".encode("utf-8") + b"\n")
    return h.hexdigest()[:16]
