"""Command-line surface: the staged workflow from corpus to report.

    styleforge make-synthetic --out data/
    styleforge train-bpe -c cfg
    styleforge pretrain -c cfg
    styleforge finetune-disc -c cfg
    styleforge train-transfer -c cfg
    styleforge transfer -c cfg --input in.txt --output out.txt
    styleforge evaluate -c cfg --inputs in.txt --outputs out.txt [--refs r.txt]

Exit codes: 0 success, 1 usage/config error, 2 I/O error, 3 divergence.
"""

import argparse
import sys
from pathlib import Path
from random import Random

import torch

from . import corpus as corpus_mod
from . import eval as eval_mod
from . import model, plots, synthetic, tokenizer, transfer
from .config import parse_config
from .discriminator import StyleDiscriminator, finetune_discriminator, perplexity
from .errors import ConfigError, DivergenceError, StyleForgeError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read().splitlines()


def _require(path, hint):
    if not Path(path).exists():
        raise FileNotFoundError(f"{path} is missing ({hint})")
    return path


def _artifact_meta(cfg):
    return {"config_hash": cfg.config_hash, "seed": cfg.seed}


def _vocab_path(cfg):
    return Path(cfg.out_dir) / "bpe.vocab"


def _load_tokenizer(cfg):
    path = _require(_vocab_path(cfg), "run `styleforge train-bpe` first")
    vocab, merges = tokenizer.load_vocabulary(path)
    return vocab, merges, tokenizer.vocabulary_hash(vocab, merges)


def _check_vocab_hash(meta, vhash, path):
    if meta.get("vocab_hash") != vhash:
        raise ConfigError(
            f"{path}: vocabulary hash {meta.get('vocab_hash')} does not match "
            f"the current BPE file ({vhash}); stages were trained on different vocabularies")


def _load_styled(cfg, spec, vocab, merges):
    return corpus_mod.load_corpus(spec.corpus, spec.dimension, spec.label,
                                  vocab, merges, max_len=cfg.max_len)


def cmd_make_synthetic(args):
    paths = synthetic.make_synthetic(args.out, seed=args.seed,
                                     train_size=args.size,
                                     heldout_size=args.heldout,
                                     source_size=args.source)
    cfg_path = Path(args.out) / "synthetic.cfg"
    cfg_path.write_text(synthetic_config_text(args.seed), encoding="utf-8")
    print(f"wrote {len(paths)} corpus files and {cfg_path}")
    return 0


def synthetic_config_text(seed):
    """Ready-to-run config for the synthetic two-dimension task, with
    desk-scale hyper-parameters."""
    return f"""\
seed={seed}
out_dir=run

bpe.corpus=generic.txt
bpe.num_merges=300

data.max_len=28

model.num_layers=2
model.hidden_size=128
model.num_heads=4
model.dropout=0.1
model.max_positions=32

noise.p_drop=0.1
noise.p_mask=0.2

pretrain.corpus=generic.txt
pretrain.steps=700
pretrain.batch_size=32
pretrain.learning_rate=3e-4
pretrain.checkpoint_every=350

styles=case_upper,end_marked
style.case_upper.dimension=case
style.case_upper.label=upper
style.case_upper.corpus=case_upper.txt
style.case_upper.heldout=heldout_case_upper.txt
style.case_upper.opposite_label=lower
style.case_upper.opposite_corpus=case_lower.txt
style.case_upper.opposite_heldout=heldout_case_lower.txt
style.end_marked.dimension=ending
style.end_marked.label=marked
style.end_marked.corpus=end_marked.txt
style.end_marked.heldout=heldout_end_marked.txt
style.end_marked.opposite_label=plain
style.end_marked.opposite_corpus=end_plain.txt
style.end_marked.opposite_heldout=heldout_end_plain.txt

disc.epochs=3
disc.batch_size=32
disc.learning_rate=3e-4

transfer.lambda_dae=0.5
transfer.lambda.case_upper=1.0
transfer.lambda.end_marked=1.0
transfer.steps=1000
transfer.batch_size=16
transfer.learning_rate=3e-4
transfer.sample_temperature=1.0
transfer.checkpoint_every=250

eval.lexicon=lexicon.tsv
eval.formality_target=formal
"""


def cmd_train_bpe(cfg):
    lines = _read_lines(_require(cfg.bpe_corpus, "bpe.corpus"))
    vocab, merges = tokenizer.train_bpe(lines, cfg.bpe_num_merges)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tokenizer.save_vocabulary(_vocab_path(cfg), vocab, merges)
    meta = _artifact_meta(cfg)
    meta["vocab_hash"] = tokenizer.vocabulary_hash(vocab, merges)
    with open(str(_vocab_path(cfg)) + ".meta", "w", encoding="utf-8") as fh:
        for k, v in meta.items():
            fh.write(f"{k}={v}\n")
    print(f"BPE vocabulary: {len(vocab)} tokens, {len(merges)} merges -> {_vocab_path(cfg)}")
    return 0


def _mlm_val_loss(lm, sentences, noise, seed, vocab_size):
    rng = Random(seed)
    corrupted, targets = [], []
    for seq in sentences:
        c, t = corpus_mod.apply_mlm_mask(seq, noise, rng, vocab_size)
        corrupted.append(c)
        targets.append(t)
    with torch.no_grad():
        return model.mlm_loss(lm, corrupted, targets).item()


def cmd_pretrain(cfg):
    vocab, merges, vhash = _load_tokenizer(cfg)
    loaded = corpus_mod.load_corpus(_require(cfg.pretrain_corpus, "pretrain.corpus"),
                                    "generic", "generic", vocab, merges,
                                    max_len=cfg.max_len)
    val = loaded.sentences[::10]
    train = [s for i, s in enumerate(loaded.sentences) if i % 10]
    ckpt = Path(cfg.out_dir) / "base_lm.ckpt"
    tcfg = cfg.transformer_config(len(vocab))
    start = 0
    if ckpt.exists():
        lm, meta = model.lm_from_checkpoint(ckpt)
        _check_vocab_hash(meta, vhash, ckpt)
        start = int(meta["step"])
        if start >= cfg.pretrain_steps:
            print(f"{ckpt} already trained to step {start}")
            return 0
        print(f"resuming from step {start}")
    else:
        lm = model.build_lm(tcfg, cfg.seed)

    def meta_at(step):
        return model.checkpoint_meta(tcfg, model.BIDIRECTIONAL, vhash, step,
                                     **_artifact_meta(cfg))

    def save(step, _value=None):
        if cfg.pretrain_checkpoint_every and step % cfg.pretrain_checkpoint_every == 0:
            model.save_checkpoint(ckpt, lm, meta_at(step))

    hyper = cfg.pretrain_hyper()
    trace = model.pretrain_mlm(lm, train, cfg.noise, hyper, start_step=start,
                               on_step=save)
    val_loss = _mlm_val_loss(lm, val, cfg.noise, cfg.seed + 1, len(vocab))
    meta = meta_at(cfg.pretrain_steps)
    meta["val_loss"] = repr(val_loss)
    model.save_checkpoint(ckpt, lm, meta)
    transfer.write_trace(Path(cfg.out_dir) / "pretrain_trace.log", trace,
                         header=_artifact_meta(cfg))
    plots.render_loss_curves(trace, Path(cfg.out_dir) / "pretrain_loss.png",
                             title="MLM pretraining")
    first = trace[0]["loss"] if trace else float("nan")
    last = trace[-1]["loss"] if trace else float("nan")
    print(f"pretrained {len(trace)} steps: loss {first:.4f} -> {last:.4f}, "
          f"val {val_loss:.4f} -> {ckpt}")
    return 0


def _disc_path(cfg, name):
    return Path(cfg.out_dir) / f"disc_{name}.ckpt"


def cmd_finetune_disc(cfg, only_style=None):
    vocab, merges, vhash = _load_tokenizer(cfg)
    base, base_meta = model.lm_from_checkpoint(
        _require(Path(cfg.out_dir) / "base_lm.ckpt", "run `styleforge pretrain` first"))
    _check_vocab_hash(base_meta, vhash, "base_lm.ckpt")
    tcfg = cfg.transformer_config(len(vocab))
    hyper = cfg.disc_hyper()
    todo = [s for s in cfg.styles if only_style in (None, s.name)]
    if only_style not in (None, "mixture") and not todo:
        raise ConfigError(f"--style {only_style}: no such configured style")

    styled = {}
    for spec in todo:
        styled[spec.name] = _load_styled(cfg, spec, vocab, merges)
        disc = finetune_discriminator(base, styled[spec.name], hyper)
        meta = model.checkpoint_meta(tcfg, model.CAUSAL, vhash, len(disc.trace),
                                     **_artifact_meta(cfg),
                                     style_dimension=disc.style_dimension,
                                     style_label=disc.style_label,
                                     base_hash=disc.base_hash,
                                     corpus_hash=disc.corpus_hash)
        model.save_checkpoint(_disc_path(cfg, spec.name), disc.lm, meta)
        losses = [r for r in disc.trace if "loss" in r]
        print(f"disc {spec.name} ({spec.dimension}/{spec.label}): "
              f"loss {losses[0]['loss']:.4f} -> {losses[-1]['loss']:.4f} "
              f"-> {_disc_path(cfg, spec.name)}")

    if only_style in (None, "mixture"):
        all_corpora = [styled.get(s.name) or _load_styled(cfg, s, vocab, merges)
                       for s in cfg.styles]
        mixed = corpus_mod.mix_corpora(all_corpora, cfg.seed)
        disc = finetune_discriminator(base, mixed, hyper)
        meta = model.checkpoint_meta(tcfg, model.CAUSAL, vhash, len(disc.trace),
                                     **_artifact_meta(cfg),
                                     style_dimension="mixture",
                                     style_label="mixture",
                                     base_hash=disc.base_hash,
                                     corpus_hash=disc.corpus_hash)
        model.save_checkpoint(Path(cfg.out_dir) / "decoder_lm.ckpt", disc.lm, meta)
        print(f"mixture CLM (decoder init) -> {Path(cfg.out_dir) / 'decoder_lm.ckpt'}")
    return 0


def _load_discriminators(cfg, vhash):
    discs = []
    for spec in cfg.styles:
        path = _require(_disc_path(cfg, spec.name),
                        f"run `styleforge finetune-disc` for style {spec.name}")
        lm, meta = model.lm_from_checkpoint(path)
        _check_vocab_hash(meta, vhash, path)
        discs.append(StyleDiscriminator(lm, meta["style_dimension"],
                                        meta["style_label"],
                                        base_hash=meta.get("base_hash", ""),
                                        corpus_hash=meta.get("corpus_hash", "")))
    return discs


def cmd_train_transfer(cfg):
    vocab, merges, vhash = _load_tokenizer(cfg)
    base, base_meta = model.lm_from_checkpoint(
        _require(Path(cfg.out_dir) / "base_lm.ckpt", "run `styleforge pretrain` first"))
    _check_vocab_hash(base_meta, vhash, "base_lm.ckpt")
    decoder_src, dec_meta = model.lm_from_checkpoint(
        _require(Path(cfg.out_dir) / "decoder_lm.ckpt",
                 "run `styleforge finetune-disc` first"))
    _check_vocab_hash(dec_meta, vhash, "decoder_lm.ckpt")
    discs = _load_discriminators(cfg, vhash)
    corpora = [_load_styled(cfg, s, vocab, merges) for s in cfg.styles]
    mixed = corpus_mod.mix_corpora(corpora, cfg.seed)
    encdec = model.build_encoder_decoder(base, decoder_src, cfg.seed)
    tcfg = cfg.transfer_config()
    ckpt = Path(cfg.out_dir) / "transfer.ckpt"

    def meta_at(step):
        return model.checkpoint_meta(encdec.config, model.CAUSAL, vhash, step,
                                     kind="encdec", **_artifact_meta(cfg),
                                     styles=",".join(s.name for s in cfg.styles))

    def save(step, module, _trace):
        model.save_checkpoint(ckpt, module, meta_at(step))

    encdec, trace = transfer.train_transfer(encdec, discs, mixed, tcfg,
                                            vocab=vocab, on_checkpoint=save)
    model.save_checkpoint(ckpt, encdec, meta_at(tcfg.steps))
    transfer.write_trace(Path(cfg.out_dir) / "transfer_trace.log", trace,
                         header=_artifact_meta(cfg))
    plots.render_loss_curves(trace, Path(cfg.out_dir) / "transfer_loss.png",
                             title="joint transfer training")
    print(f"transfer training: total {trace[0]['total']:.4f} -> {trace[-1]['total']:.4f}, "
          f"dae {trace[0]['dae']:.4f} -> {trace[-1]['dae']:.4f} -> {ckpt}")
    return 0


def cmd_transfer(cfg, input_path, output_path):
    vocab, merges, vhash = _load_tokenizer(cfg)
    encdec, meta = model.encdec_from_checkpoint(
        _require(Path(cfg.out_dir) / "transfer.ckpt",
                 "run `styleforge train-transfer` first"))
    _check_vocab_hash(meta, vhash, "transfer.ckpt")
    tcfg = cfg.transfer_config()
    lines = _read_lines(input_path)
    outputs = []
    for line in lines:
        if not line.strip():
            outputs.append("")
            continue
        outputs.append(transfer.transfer(encdec, line, vocab, merges, tcfg))
    with open(output_path, "w", encoding="utf-8") as fh:
        for line in outputs:
            fh.write(line + "\n")
    print(f"transferred {len(outputs)} lines -> {output_path}")
    return 0


def _train_eval_classifiers(cfg):
    classifiers = {}
    hyper = eval_mod.ClassifierConfig(epochs=cfg.eval_classifier_epochs, seed=cfg.seed)
    for spec in cfg.styles:
        if not (spec.opposite_corpus and spec.opposite_label):
            print(f"note: style {spec.name} has no opposite corpus; "
                  f"skipping the {spec.dimension} classifier", file=sys.stderr)
            continue
        pairs = [(s, spec.label) for s in _read_lines(spec.corpus) if s.strip()]
        pairs += [(s, spec.opposite_label)
                  for s in _read_lines(spec.opposite_corpus) if s.strip()]
        clf = eval_mod.train_style_classifier(pairs, hyper)
        classifiers[spec.dimension] = (clf, spec.label)
    return classifiers


def cmd_evaluate(cfg, inputs_path, outputs_path, refs_path=None):
    vocab, merges, _ = _load_tokenizer(cfg)
    inputs = _read_lines(inputs_path)
    outputs = _read_lines(outputs_path)
    if len(inputs) != len(outputs):
        raise ConfigError(f"{inputs_path} has {len(inputs)} lines but "
                          f"{outputs_path} has {len(outputs)}")
    references = None
    if refs_path:
        references = _read_lines(refs_path)
        if len(references) != len(outputs):
            raise ConfigError(f"{refs_path} has {len(references)} lines but "
                              f"{outputs_path} has {len(outputs)}")
    classifiers = _train_eval_classifiers(cfg)
    lexicon = eval_mod.load_lexicon(cfg.eval_lexicon) if cfg.eval_lexicon else None
    fluency_lm = None
    flm_path = Path(cfg.out_dir) / "decoder_lm.ckpt"
    if flm_path.exists():
        fluency_lm, _ = model.lm_from_checkpoint(flm_path)

    report = eval_mod.evaluate(
        inputs, outputs, references=references, classifiers=classifiers,
        lexicon=lexicon, formality_target=cfg.eval_formality_target or None,
        fluency_lm=fluency_lm, vocab=vocab, merges=merges,
        lowercase_bleu=cfg.eval_lowercase_bleu)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    eval_mod.write_report(report, txt_path=out / "eval_report.txt",
                          tsv_path=out / "eval_report.tsv",
                          header=_artifact_meta(cfg))
    plots.render_report_figure(eval_mod.report_lines(report),
                               out / "eval_report.png")
    print(eval_mod.format_report(report))
    return 0


def build_parser():
    parser = _Parser(prog="styleforge",
                     description="multi-dimensional text style transfer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="generate the synthetic style corpora")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=2000)
    p.add_argument("--heldout", type=int, default=300)
    p.add_argument("--source", type=int, default=200)

    for name in ("train-bpe", "pretrain", "finetune-disc", "train-transfer"):
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", required=True)
        if name == "finetune-disc":
            p.add_argument("--style", default=None,
                           help="fine-tune only this style (or 'mixture')")

    p = sub.add_parser("transfer", help="transfer a file of sentences")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = sub.add_parser("evaluate", help="score transferred outputs")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--inputs", required=True)
    p.add_argument("--outputs", required=True)
    p.add_argument("--refs", default=None)
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "make-synthetic":
        return cmd_make_synthetic(args)
    cfg = parse_config(args.config)
    torch.manual_seed(cfg.seed)
    if args.command == "train-bpe":
        return cmd_train_bpe(cfg)
    if args.command == "pretrain":
        return cmd_pretrain(cfg)
    if args.command == "finetune-disc":
        return cmd_finetune_disc(cfg, only_style=args.style)
    if args.command == "train-transfer":
        return cmd_train_transfer(cfg)
    if args.command == "transfer":
        return cmd_transfer(cfg, args.input, args.output)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, args.inputs, args.outputs, args.refs)
    raise ConfigError(f"unknown command {args.command}")


def main(argv=None):
    try:
        return run(argv)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, StyleForgeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
