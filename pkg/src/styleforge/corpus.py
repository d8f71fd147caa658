"""Corpus ingestion, style-agnostic mixing, MLM masking and DAE noising.

Corpora are plain text, one sentence per line. Sentences are tokenized,
framed with BOS/EOS and truncated at load time. Noising functions are
pure given an explicit rng and never touch BOS/EOS.
"""

from dataclasses import dataclass, field
from random import Random

from . import tokenizer
from .errors import ConfigError
from .tokenizer import BOS_ID, EOS_ID, MASK_ID, SPECIAL_IDS


@dataclass
class StyledCorpus:
    sentences: list          # framed TokenSeq per sentence
    style_dimension: str     # e.g. "sentiment"
    style_label: str         # e.g. "positive"

    def __len__(self):
        return len(self.sentences)


@dataclass
class MixedCorpus:
    sentences: list          # labels deliberately discarded
    provenance: list = field(default_factory=list)  # source corpus sizes

    def __len__(self):
        return len(self.sentences)


@dataclass
class NoiseConfig:
    p_drop: float = 0.1
    p_mask: float = 0.1
    mlm_select: float = 0.15
    mlm_mask_frac: float = 0.8
    mlm_random_frac: float = 0.1
    mlm_keep_frac: float = 0.1

    def __post_init__(self):
        for name in ("p_drop", "p_mask", "mlm_select", "mlm_mask_frac",
                     "mlm_random_frac", "mlm_keep_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"noise.{name}={v} outside [0, 1]")
        total = self.mlm_mask_frac + self.mlm_random_frac + self.mlm_keep_frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"MLM action fractions sum to {total}, expected 1")


def load_corpus(path, dimension, label, vocab, merges, max_len=64):
    """Read one sentence per line, tokenize, frame, truncate to max_len.

    Blank lines are skipped. Raises OSError on unreadable files and
    ConfigError when no usable line remains.
    """
    sentences = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            ids = tokenizer.encode(line, vocab, merges)[: max_len - 2]
            sentences.append(tokenizer.frame(ids))
    if not sentences:
        raise ConfigError(f"{path}: no usable sentences (all lines blank)")
    return StyledCorpus(sentences, dimension, label)


def mix_corpora(corpora, seed):
    """Seed-deterministic shuffle of the concatenated corpora; style labels
    are dropped so the mixture is agnostic of individual style."""
    if not corpora:
        raise ConfigError("mix_corpora needs at least one corpus")
    sentences = [s for c in corpora for s in c.sentences]
    Random(seed).shuffle(sentences)
    return MixedCorpus(sentences, provenance=[len(c) for c in corpora])


def dump_corpus(path, sentences, vocab):
    """Write token sequences back out as plain text for inspection."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sentences:
            fh.write(tokenizer.decode(seq, vocab) + "\n")


def apply_mlm_mask(tokens, cfg, rng, vocab_size):
    """MLM corruption: sample non-special positions at cfg.mlm_select, then
    replace with MASK / a random non-special token / keep unchanged at the
    configured action split. Returns (corrupted, [(position, original id)]).
    """
    if vocab_size <= len(SPECIAL_IDS):
        raise ConfigError("vocabulary has no non-special tokens to sample")
    corrupted = list(tokens)
    targets = []
    for pos, tid in enumerate(tokens):
        if tid in SPECIAL_IDS:
            continue
        if rng.random() >= cfg.mlm_select:
            continue
        targets.append((pos, tid))
        action = rng.random()
        if action < cfg.mlm_mask_frac:
            corrupted[pos] = MASK_ID
        elif action < cfg.mlm_mask_frac + cfg.mlm_random_frac:
            corrupted[pos] = rng.randrange(len(SPECIAL_IDS), vocab_size)
        # else: keep unchanged
    return corrupted, targets


def apply_dae_noise(tokens, cfg, rng):
    """DAE corruption x -> x~: drop non-special tokens at p_drop, then mask
    survivors at p_mask. BOS/EOS always survive; output never grows."""
    out = []
    for tid in tokens:
        if tid in (BOS_ID, EOS_ID):
            out.append(tid)
            continue
        if rng.random() < cfg.p_drop:
            continue
        if rng.random() < cfg.p_mask:
            out.append(MASK_ID)
        else:
            out.append(tid)
    return out
