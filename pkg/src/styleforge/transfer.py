"""Joint generator training: DAE reconstruction plus one REINFORCE loss
per frozen style discriminator, and inference-time transfer.

Every sampled sentence is scored by all configured discriminators; the
advantage (sampled reward minus the input sentence's own reward) scales
the generator's sequence NLL, with gradient flowing only through the
generator log-probability.
"""

from dataclasses import dataclass, field
from random import Random

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tokenizer
from .corpus import NoiseConfig, apply_dae_noise
from .discriminator import style_reward
from .errors import ConfigError, DegenerateInputError
from .model import (DivergenceGuard, _next_token_nll, batch_iterator,
                    conditional_nll, dae_loss, generate, pad_batch,
                    parameter_hash)
from .tokenizer import BOS_ID, EOS_ID


@dataclass
class TransferConfig:
    lambda_dae: float = 1.0
    lambda_styles: list = field(default_factory=list)   # one weight per discriminator
    sample_temperature: float = 1.0
    max_len: int = 64
    reward_length_normalize: bool = False
    steps: int = 500
    batch_size: int = 16
    learning_rate: float = 1e-4
    seed: int = 0
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        lambdas = [self.lambda_dae, *self.lambda_styles]
        if any(l < 0 for l in lambdas):
            raise ConfigError("loss weights must be >= 0")
        if not any(l > 0 for l in lambdas):
            raise ConfigError("at least one loss weight must be > 0")
        if self.sample_temperature <= 0:
            raise ConfigError("sample_temperature must be > 0")


@dataclass
class RewardRecord:
    r_input: float      # r(x), the baseline
    r_sample: float     # r(x')
    advantage: float    # r(x') - r(x)
    style_dimension: str = ""
    style_label: str = ""


# default inference-time corruption: keep content tokens, mask lightly
INFERENCE_NOISE = NoiseConfig(p_drop=0.0, p_mask=0.1)


def _reward(disc, seq, normalize):
    r = style_reward(disc, seq)
    return r / (len(seq) - 1) if normalize else r


def reinforce_style_loss(encdec, disc, x, x_noisy, cfg, rng=None):
    """Single-sentence REINFORCE loss for one style.

    Samples x' from the generator, scores it and the input x with the
    frozen discriminator, and returns
    (advantage * -log P(x'|x~), RewardRecord). The advantage is a plain
    float, so gradient flows only through the generator term.
    """
    sampled = generate(encdec, x_noisy, mode="sample",
                       temperature=cfg.sample_temperature,
                       max_len=cfg.max_len, rng=rng)
    if len(sampled) < 2:
        sampled = generate(encdec, x_noisy, mode="sample",
                           temperature=cfg.sample_temperature,
                           max_len=cfg.max_len, rng=rng)
        if len(sampled) < 2:
            raise DegenerateInputError("sampled an empty transfer twice")
    r_in = _reward(disc, x, cfg.reward_length_normalize)
    r_s = _reward(disc, sampled, cfg.reward_length_normalize)
    advantage = r_s - r_in
    nll, _ = conditional_nll(encdec, [x_noisy], [sampled])
    record = RewardRecord(r_in, r_s, advantage,
                          disc.style_dimension, disc.style_label)
    return advantage * nll[0], record


def sample_batch(encdec, noisy_batch, temperature, max_len, rng=None):
    """Sample one transferred sequence per input, batched. Each row follows
    exactly the single-sequence sampling distribution of generate()."""
    limit = min(max_len, encdec.decoder.config.max_positions)
    n = len(noisy_batch)
    with torch.no_grad():
        src_ids, src_pad = pad_batch(noisy_batch)
        memory = encdec.encode(src_ids, src_pad)
        seqs = [[BOS_ID] for _ in range(n)]
        active = [True] * n
        while any(active) and max(len(s) for s in seqs) < limit:
            tgt_ids, _ = pad_batch(seqs)
            logits = encdec.decode_logits(tgt_ids, memory, src_pad)
            for i in range(n):
                if not active[i]:
                    continue
                step_logits = logits[i, len(seqs[i]) - 1]
                probs = F.softmax(step_logits / temperature, dim=-1)
                nxt = int(torch.multinomial(probs, 1, generator=rng).item())
                seqs[i].append(nxt)
                if nxt == EOS_ID or len(seqs[i]) >= limit:
                    active[i] = False
    return seqs


def total_loss(encdec, discriminators, x, x_noisy, cfg, rng=None):
    """Combined objective over a batch:
    lambda_DAE * L_DAE + sum_i lambda_i * L^{s_i}.

    x and x_noisy are lists of framed sequences. One sample x' is drawn
    per sentence and scored by every discriminator. Returns the scalar
    loss tensor and a trace row with every component logged.
    """
    if len(cfg.lambda_styles) != len(discriminators):
        raise ConfigError(
            f"{len(cfg.lambda_styles)} style weights for {len(discriminators)} discriminators")
    row = {}
    dae = dae_loss(encdec, x_noisy, x)
    row["dae"] = dae.item()
    # components combine in float64 so the logged decomposition identity
    # (total == weighted sum of parts) holds to ~1e-6 at any magnitude
    total = cfg.lambda_dae * dae.double()

    active = [i for i, lam in enumerate(cfg.lambda_styles) if lam > 0]
    for disc in discriminators:
        row[f"loss.{disc.style_label}"] = 0.0
        row[f"adv.{disc.style_label}"] = 0.0
    row["sample"] = ""

    if active:
        sampled = sample_batch(encdec, x_noisy, cfg.sample_temperature,
                               cfg.max_len, rng)
        nll, _ = conditional_nll(encdec, x_noisy, sampled)
        for i in active:
            disc = discriminators[i]
            with torch.no_grad():
                samp_nll, samp_n = _next_token_nll(disc.lm, sampled)
                in_nll, in_n = _next_token_nll(disc.lm, x)
            r_s = -samp_nll
            r_in = -in_nll
            if cfg.reward_length_normalize:
                r_s = r_s / samp_n
                r_in = r_in / in_n
            adv = (r_s - r_in).detach()
            style_loss = (adv * nll).mean()
            total = total + cfg.lambda_styles[i] * style_loss.double()
            row[f"loss.{disc.style_label}"] = style_loss.item()
            row[f"adv.{disc.style_label}"] = adv.mean().item()
        row["sample"] = " ".join(str(t) for t in sampled[0])

    row["total"] = total.item()
    return total, row


def train_transfer(encdec, discriminators, mixed, cfg, vocab=None,
                   on_checkpoint=None):
    """Mini-batch gradient descent on total_loss over the style-agnostic
    mixture. Discriminators stay frozen; aborts with DivergenceError when
    the total loss exceeds 10x its initial magnitude.
    """
    if len(cfg.lambda_styles) != len(discriminators):
        raise ConfigError(
            f"{len(cfg.lambda_styles)} style weights for {len(discriminators)} discriminators")
    if not mixed.sentences:
        raise ConfigError("transfer training corpus is empty")
    frozen = [parameter_hash(d.lm) for d in discriminators]
    rng = Random(cfg.seed)
    torch_rng = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(encdec.parameters(), lr=cfg.learning_rate)
    batches = batch_iterator(mixed.sentences, cfg.batch_size, rng)
    trace = []
    guard = DivergenceGuard()
    encdec.train()
    for step in range(1, cfg.steps + 1):
        batch = next(batches)
        noisy = [apply_dae_noise(x, cfg.noise, rng) for x in batch]
        loss, row = total_loss(encdec, discriminators, batch, noisy, cfg, torch_rng)
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(encdec.parameters(), cfg.grad_clip)
        opt.step()
        row["step"] = step
        if vocab is not None and row.get("sample"):
            ids = [int(t) for t in row["sample"].split()]
            row["sample"] = tokenizer.decode(ids, vocab)
        guard.check(step, row["total"])
        trace.append(row)
        if on_checkpoint and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            on_checkpoint(step, encdec, trace)
    encdec.eval()
    for disc, h in zip(discriminators, frozen):
        assert parameter_hash(disc.lm) == h, "discriminator drifted during transfer"
    return encdec, trace


def transfer(encdec, sentence, vocab, merges, cfg, noise=None):
    """Inference: encode, lightly corrupt, greedy decode, detokenize."""
    if not sentence.split():
        raise DegenerateInputError("cannot transfer an empty sentence")
    noise = noise or INFERENCE_NOISE
    max_content = min(cfg.max_len, encdec.decoder.config.max_positions) - 2
    ids = tokenizer.encode(sentence, vocab, merges)[:max_content]
    framed = tokenizer.frame(ids)
    rng = Random(cfg.seed)
    noisy = apply_dae_noise(framed, noise, rng)
    out = generate(encdec, noisy, mode="greedy", max_len=cfg.max_len)
    return tokenizer.decode(out, vocab)


def write_trace(path, rows, header=None):
    """One step per line, space-separated key=value pairs; the free-text
    sample field always comes last."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(" ".join(f"{k}={v}" for k, v in header.items()) + "\n")
        for row in rows:
            parts = [f"step={row['step']}"]
            for key in sorted(row):
                if key in ("step", "sample"):
                    continue
                v = row[key]
                parts.append(f"{key}={v:.6g}" if isinstance(v, float) else f"{key}={v}")
            if "sample" in row:
                parts.append(f"sample={row['sample']}")
            fh.write(" ".join(parts) + "\n")


def read_trace(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            row = {}
            rest = line
            while rest:
                key, _, tail = rest.partition("=")
                if key == "sample":
                    row["sample"] = tail
                    break
                value, _, rest = tail.partition(" ")
                try:
                    row[key] = int(value) if key == "step" else float(value)
                except ValueError:
                    row[key] = value
            if "step" in row:
                rows.append(row)
    return rows
