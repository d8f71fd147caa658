"""Evaluation battery: style classifier accuracy, lexical formality
scoring, self-/ref-BLEU and fluency perplexity.

BLEU works on whitespace word tokens in [0, 1], with add-one smoothing
on the n >= 2 precisions (desk-scale sentences zero out 4-gram counts
routinely) and the shortest-reference brevity penalty.
"""

import math
import zlib
from collections import Counter
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tokenizer as tok
from .discriminator import perplexity
from .errors import ConfigError, DegenerateInputError


@dataclass
class ClassifierConfig:
    buckets: int = 1 << 18
    dim: int = 16
    epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 0.05
    seed: int = 0


class NGramStyleClassifier(nn.Module):
    """Hashed 1-2 gram bag embeddings averaged into a sentence vector,
    followed by a linear softmax over style labels."""

    def __init__(self, labels, cfg):
        super().__init__()
        self.labels = list(labels)
        self.cfg = cfg
        self.emb = nn.EmbeddingBag(cfg.buckets, cfg.dim, mode="mean")
        self.out = nn.Linear(cfg.dim, len(self.labels))
        self.train_accuracy = 0.0

    def features(self, sentence):
        words = sentence.split()
        grams = words + [f"{a} {b}" for a, b in zip(words, words[1:])]
        if not grams:
            grams = [""]
        return [zlib.crc32(g.encode("utf-8")) % self.cfg.buckets for g in grams]

    def forward(self, sentences):
        flat, offsets = [], []
        for s in sentences:
            offsets.append(len(flat))
            flat.extend(self.features(s))
        ids = torch.tensor(flat, dtype=torch.long)
        offs = torch.tensor(offsets, dtype=torch.long)
        return self.out(self.emb(ids, offs))

    def predict_proba(self, sentence):
        with torch.no_grad():
            return F.softmax(self([sentence])[0], dim=-1)

    def predict(self, sentence):
        with torch.no_grad():
            idx = int(torch.argmax(self([sentence])[0]).item())
        return self.labels[idx]


def train_style_classifier(train, hyper=None):
    """Cross-entropy training of the n-gram classifier; needs at least two
    distinct labels. Training accuracy lands on clf.train_accuracy."""
    hyper = hyper or ClassifierConfig()
    labels = sorted({label for _, label in train})
    if len(labels) < 2:
        raise ConfigError(f"classifier training data has {len(labels)} label(s), need >= 2")
    torch.manual_seed(hyper.seed)
    clf = NGramStyleClassifier(labels, hyper)
    index = {label: i for i, label in enumerate(labels)}
    opt = torch.optim.Adam(clf.parameters(), lr=hyper.learning_rate)
    order = list(range(len(train)))
    for _ in range(hyper.epochs):
        for i in range(0, len(order), hyper.batch_size):
            chunk = [train[j] for j in order[i: i + hyper.batch_size]]
            logits = clf([s for s, _ in chunk])
            target = torch.tensor([index[l] for _, l in chunk])
            loss = F.cross_entropy(logits, target)
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        logits = clf([s for s, _ in train])
        pred = logits.argmax(dim=-1)
        gold = torch.tensor([index[l] for _, l in train])
        clf.train_accuracy = 100.0 * (pred == gold).float().mean().item()
    clf.eval()
    return clf


def style_accuracy(clf, sentences, target_label):
    """Percent of sentences the classifier labels as target_label."""
    if not sentences:
        raise ConfigError("style_accuracy needs a non-empty sentence list")
    hits = sum(1 for s in sentences if clf.predict(s) == target_label)
    return 100.0 * hits / len(sentences)


@dataclass
class FormalityLexicon:
    scores: dict  # word -> score in [-1, 1]

    def __post_init__(self):
        for word, score in self.scores.items():
            if not -1.0 <= score <= 1.0:
                raise ConfigError(f"lexicon score for {word!r} is {score}, outside [-1, 1]")


def load_lexicon(path):
    """One `word<TAB>score` per line."""
    scores = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            word, _, value = line.partition("\t")
            try:
                scores[word] = float(value)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: malformed lexicon line {line!r}")
    return FormalityLexicon(scores)


def lexical_formality_score(sentence, lexicon, target):
    """Average per-word lexicon score mapped to 0..100; informal targets
    report 100-n so higher is always better. Out-of-lexicon words score 0
    and stay in the denominator."""
    if target not in ("formal", "informal"):
        raise ConfigError(f"formality target must be formal|informal, got {target!r}")
    words = sentence.split()
    if not words:
        raise DegenerateInputError("cannot score an empty sentence")
    mean = sum(lexicon.scores.get(w, 0.0) for w in words) / len(words)
    n = (mean + 1.0) * 50.0
    return n if target == "formal" else 100.0 - n


def _ngram_counts(words, n):
    return Counter(tuple(words[i: i + n]) for i in range(len(words) - n + 1))


def ngram_precisions(candidate, references, max_n=4):
    """Clipped n-gram (numerator, denominator) pairs for n = 1..max_n."""
    out = []
    for n in range(1, max_n + 1):
        counts = _ngram_counts(candidate, n)
        clipped = 0
        for gram, c in counts.items():
            best = max(_ngram_counts(ref, n).get(gram, 0) for ref in references)
            clipped += min(c, best)
        out.append((clipped, sum(counts.values())))
    return out


def bleu(candidate, references, max_n=4):
    """Geometric mean of clipped n-gram precisions times the brevity
    penalty. Zero unigram overlap scores 0; n >= 2 precisions get add-one
    smoothing. The brevity penalty uses the shortest reference so adding
    a reference can never lower the score."""
    references = [r for r in references if r]
    if not references:
        raise ConfigError("bleu needs at least one non-empty reference")
    if not candidate:
        raise DegenerateInputError("bleu needs a non-empty candidate")
    pairs = ngram_precisions(candidate, references, max_n)
    if pairs[0][0] == 0:
        return 0.0
    log_sum = math.log(pairs[0][0] / pairs[0][1])
    for num, den in pairs[1:]:
        log_sum += math.log((num + 1) / (den + 1))
    c = len(candidate)
    r = min(len(ref) for ref in references)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / max_n)


def fluency_perplexity(flm, sentences):
    """Corpus-level exp(mean per-token NLL); same code path as
    discriminator perplexity, so the two agree bit-for-bit."""
    return perplexity(flm, sentences)


@dataclass
class EvalReport:
    n_sentences: int
    style_accuracy: dict                 # dimension -> percent at target label
    self_bleu: float
    ref_bleu: float = None
    lexical_formality: float = None
    fluency: float = None                # perplexity
    notes: dict = field(default_factory=dict)


def _mean_bleu(outputs, refs, lowercase):
    total = 0.0
    for out, ref in zip(outputs, refs):
        cand = out.lower().split() if lowercase else out.split()
        refw = ref.lower().split() if lowercase else ref.split()
        if not refw:
            continue
        total += bleu(cand, [refw]) if cand else 0.0
    return total / len(outputs)


def joint_style_accuracy(classifiers, sentences):
    """Percent of sentences labeled as the target in EVERY dimension."""
    if not sentences:
        raise ConfigError("joint_style_accuracy needs sentences")
    hits = 0
    for s in sentences:
        if all(clf.predict(s) == target for clf, target in classifiers.values()):
            hits += 1
    return 100.0 * hits / len(sentences)


def evaluate(inputs, outputs, references=None, classifiers=None, lexicon=None,
             formality_target=None, fluency_lm=None, vocab=None, merges=None,
             lowercase_bleu=True):
    """Fill an EvalReport from aligned inputs/outputs.

    classifiers maps dimension -> (classifier, target_label). ref-BLEU is
    omitted when no references are given; lexical formality needs a
    lexicon plus target; fluency needs a causal LM plus the tokenizer.
    """
    if not outputs:
        raise ConfigError("evaluate needs at least one output sentence")
    if len(inputs) != len(outputs):
        raise ConfigError(f"{len(inputs)} inputs vs {len(outputs)} outputs")
    if references is not None and len(references) != len(outputs):
        raise ConfigError(f"{len(references)} references vs {len(outputs)} outputs")

    report = EvalReport(n_sentences=len(outputs), style_accuracy={},
                        self_bleu=_mean_bleu(outputs, inputs, lowercase_bleu))
    report.notes["bleu_smoothing"] = "add-one on n>=2"
    report.notes["bleu_lowercase"] = lowercase_bleu

    if references is not None:
        report.ref_bleu = _mean_bleu(outputs, references, lowercase_bleu)

    if classifiers:
        for dimension, (clf, target) in classifiers.items():
            report.style_accuracy[dimension] = style_accuracy(clf, outputs, target)
        if len(classifiers) > 1:
            report.notes["joint_style_accuracy"] = joint_style_accuracy(classifiers, outputs)

    if lexicon is not None:
        if formality_target is None:
            raise ConfigError("lexical scoring needs a formality target")
        scored = [lexical_formality_score(s, lexicon, formality_target)
                  for s in outputs if s.split()]
        if scored:
            report.lexical_formality = sum(scored) / len(scored)

    if fluency_lm is not None:
        if vocab is None or merges is None:
            raise ConfigError("fluency perplexity needs the tokenizer")
        seqs = [tok.frame(tok.encode(s, vocab, merges)) for s in outputs]
        report.fluency = fluency_perplexity(fluency_lm, seqs)

    return report


def report_lines(report):
    """Delimited metric records, one `name<TAB>value` per line."""
    lines = [("sentences", report.n_sentences)]
    for dim in sorted(report.style_accuracy):
        lines.append((f"style_accuracy.{dim}", f"{report.style_accuracy[dim]:.2f}"))
    if "joint_style_accuracy" in report.notes:
        lines.append(("style_accuracy.joint", f"{report.notes['joint_style_accuracy']:.2f}"))
    if report.lexical_formality is not None:
        lines.append(("lexical_formality", f"{report.lexical_formality:.2f}"))
    lines.append(("self_bleu", f"{report.self_bleu:.4f}"))
    if report.ref_bleu is not None:
        lines.append(("ref_bleu", f"{report.ref_bleu:.4f}"))
    if report.fluency is not None:
        lines.append(("fluency_perplexity", f"{report.fluency:.4f}"))
    return lines


def format_report(report):
    """Human-readable summary shaped like the quantitative results table."""
    rows = report_lines(report)
    width = max(len(name) for name, _ in rows)
    out = ["metric".ljust(width) + "  value", "-" * (width + 9)]
    for name, value in rows:
        out.append(f"{name.ljust(width)}  {value}")
    return "\n".join(out)


def write_report(report, txt_path=None, tsv_path=None, header=None):
    if tsv_path:
        with open(tsv_path, "w", encoding="utf-8") as fh:
            for k, v in (header or {}).items():
                fh.write(f"{k}\t{v}\n")
            for name, value in report_lines(report):
                fh.write(f"{name}\t{value}\n")
    if txt_path:
        with open(txt_path, "w", encoding="utf-8") as fh:
            for k, v in (header or {}).items():
                fh.write(f"# {k}={v}\n")
            fh.write(format_report(report) + "\n")
