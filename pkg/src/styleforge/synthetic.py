"""Synthetic two-dimension style task used by the acceptance battery.

Dimension "case" (labels upper/lower) controls whole-sentence surface
casing; dimension "ending" (labels marked/plain) appends the case-less
marker word "77" to marked sentences. Style corpora are independently
sampled: the upper corpus mixes both endings, the marked corpus mixes
both casings, and no training corpus ever contains the lower+plain
combination used as transfer input.

Base sentences come from a tiny fixed grammar:
    DET [ADJ] NOUN VERB DET [ADJ] NOUN
    DET [ADJ] NOUN VERB ADV
"""

from pathlib import Path
from random import Random

DETS = ["the", "a"]
ADJS = ["quick", "calm", "tiny", "huge", "brave", "proud", "merry", "shy"]
NOUNS = ["cat", "dog", "bird", "fox", "fish", "mouse", "bear", "wolf", "crab", "owl"]
VERBS = ["sees", "likes", "chases", "finds", "follows", "greets"]
ADVS = ["quickly", "quietly", "gladly", "slowly", "today"]
MARKER = "77"


def base_sentence(rng):
    words = [rng.choice(DETS)]
    if rng.random() < 0.5:
        words.append(rng.choice(ADJS))
    words.append(rng.choice(NOUNS))
    words.append(rng.choice(VERBS))
    if rng.random() < 0.5:
        words.append(rng.choice(ADVS))
    else:
        words.append(rng.choice(DETS))
        if rng.random() < 0.5:
            words.append(rng.choice(ADJS))
        words.append(rng.choice(NOUNS))
    return words


def render(words, case_label, ending_label):
    if case_label == "upper":
        words = [w.upper() for w in words]
    else:
        words = [w.lower() for w in words]
    if ending_label == "marked":
        words = words + [MARKER]
    return " ".join(words)


def render_generic(words, rng):
    """Pretraining-corpus rendering: case varies freely, often per word.

    Mixed-case contexts are what let MLM pretraining align the
    representations of a word's two surface forms; the style corpora
    themselves stay case-pure."""
    mode = rng.random()
    if mode < 0.25:
        out = [w.lower() for w in words]
    elif mode < 0.5:
        out = [w.upper() for w in words]
    else:
        out = [w.upper() if rng.random() < 0.5 else w.lower() for w in words]
    if rng.random() < 0.5:
        out = out + [MARKER]
    return " ".join(out)


def _write(path, lines):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _sample(rng, n, case=None, ending=None):
    out = []
    for _ in range(n):
        c = case or rng.choice(["upper", "lower"])
        e = ending or rng.choice(["marked", "plain"])
        out.append(render(base_sentence(rng), c, e))
    return out


# demo formality lexicon over the grammar words (ships for metric tests;
# the synthetic dimensions themselves are case and ending)
def lexicon_lines():
    lines = []
    for w in ADJS:
        lines.append(f"{w}\t0.6")
    for w in ADVS:
        lines.append(f"{w}\t-0.4")
    for w in NOUNS:
        lines.append(f"{w}\t0.2")
    return lines


def make_synthetic(out_dir, seed=0, train_size=2000, heldout_size=300,
                   source_size=200):
    """Write the corpus files plus a paired references file and the demo
    lexicon. Returns {name: path}."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = Random(seed)
    paths = {}

    paths["generic"] = out / "generic.txt"
    _write(paths["generic"], [render_generic(base_sentence(rng), rng)
                              for _ in range(2 * train_size)])

    for case in ("upper", "lower"):
        paths[f"case_{case}"] = out / f"case_{case}.txt"
        _write(paths[f"case_{case}"], _sample(rng, train_size, case=case))
        paths[f"heldout_case_{case}"] = out / f"heldout_case_{case}.txt"
        _write(paths[f"heldout_case_{case}"], _sample(rng, heldout_size, case=case))
    for ending in ("marked", "plain"):
        paths[f"end_{ending}"] = out / f"end_{ending}.txt"
        _write(paths[f"end_{ending}"], _sample(rng, train_size, ending=ending))
        paths[f"heldout_end_{ending}"] = out / f"heldout_end_{ending}.txt"
        _write(paths[f"heldout_end_{ending}"], _sample(rng, heldout_size, ending=ending))

    sources, refs = [], []
    for _ in range(source_size):
        words = base_sentence(rng)
        sources.append(render(words, "lower", "plain"))
        refs.append(render(words, "upper", "marked"))
    paths["source"] = out / "source.txt"
    _write(paths["source"], sources)
    paths["source_refs"] = out / "source_refs.txt"
    _write(paths["source_refs"], refs)

    paths["lexicon"] = out / "lexicon.tsv"
    _write(paths["lexicon"], lexicon_lines())
    return paths
