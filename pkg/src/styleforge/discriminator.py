"""Style-aware causal LMs: fine-tune the pretrained model on one style
corpus, then use its sequence log-probability as a reward and its
perplexity as a style gauge. Discriminators are fine-tuned once and
frozen; there is no adversarial alternation.
"""

import copy
import hashlib
import math
from dataclasses import dataclass, field
from random import Random

import torch
import torch.nn as nn

from .corpus import MixedCorpus
from .errors import ConfigError
from .model import CAUSAL, batch_iterator, clm_loss, corpus_nll, parameter_hash, sequence_log_prob


@dataclass
class StyleDiscriminator:
    lm: object                    # causal LanguageModel
    style_dimension: str
    style_label: str
    base_hash: str = ""           # provenance: pretrained checkpoint
    corpus_hash: str = ""         # provenance: fine-tuning corpus
    trace: list = field(default_factory=list, repr=False)


def corpus_hash(sentences):
    h = hashlib.sha256()
    for seq in sentences:
        h.update(b" ".join(str(t).encode() for t in seq) + b"\n")
    return h.hexdigest()[:16]


def finetune_discriminator(base, corpus, hyper):
    """Fine-tune a copy of the pretrained LM with the CLM objective on one
    style corpus (or on the mixture, for decoder initialization).

    Runs hyper.epochs passes with early stopping on held-out perplexity;
    with zero epochs the parameters stay exactly the base's, only the
    attention mode flips to causal.
    """
    sentences = corpus.sentences
    if not sentences:
        raise ConfigError("discriminator fine-tuning corpus is empty")
    if isinstance(corpus, MixedCorpus):
        dimension, label = "mixture", "mixture"
    else:
        dimension, label = corpus.style_dimension, corpus.style_label

    lm = copy.deepcopy(base)
    lm.attention_mode = CAUSAL
    disc = StyleDiscriminator(lm, dimension, label,
                              base_hash=parameter_hash(base),
                              corpus_hash=corpus_hash(sentences))
    if hyper.epochs <= 0:
        lm.eval()
        return disc

    rng = Random(hyper.seed)
    order = list(range(len(sentences)))
    rng.shuffle(order)
    n_val = int(len(order) * hyper.val_fraction) if hyper.early_stop else 0
    val = [sentences[i] for i in order[:n_val]]
    train = [sentences[i] for i in order[n_val:]]
    if not train:
        raise ConfigError("validation split left no training sentences")

    opt = torch.optim.Adam(lm.parameters(), lr=hyper.learning_rate)
    steps_per_epoch = math.ceil(len(train) / hyper.batch_size)
    batches = batch_iterator(train, hyper.batch_size, rng)
    best_val, best_state = float("inf"), None
    step = 0
    lm.train()
    for epoch in range(hyper.epochs):
        for _ in range(steps_per_epoch):
            step += 1
            loss = clm_loss(lm, next(batches))
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(lm.parameters(), hyper.grad_clip)
            opt.step()
            disc.trace.append({"step": step, "loss": loss.item()})
        if val:
            total, count = corpus_nll(lm, val)
            val_ppl = math.exp(total / count)
            disc.trace.append({"step": step, "val_ppl": val_ppl})
            if val_ppl < best_val:
                best_val = val_ppl
                best_state = copy.deepcopy(lm.state_dict())
    if best_state is not None:
        lm.load_state_dict(best_state)
    lm.eval()
    return disc


def _lm_of(disc):
    return getattr(disc, "lm", disc)


def perplexity(disc, sentences):
    """exp(token-weighted mean NLL) over the corpus; counts are pooled
    across sentences, not sentence-averaged."""
    if not sentences:
        raise ConfigError("perplexity needs a non-empty corpus")
    total, count = corpus_nll(_lm_of(disc), sentences)
    return math.exp(total / count)


def style_reward(disc, tokens):
    """Reward r(x): the discriminator's sequence log-probability of x."""
    return sequence_log_prob(_lm_of(disc), tokens)
