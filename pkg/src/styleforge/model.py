"""Transformer language model with switchable attention mode, plus the
encoder-decoder generator assembled from two pretrained LMs.

One transformer body serves every role: bidirectional for MLM
pretraining, causal for discriminators and fluency scoring, and both
halves of the generator. Input and output embeddings are tied. The
decoder gains randomly initialized cross-attention after each
self-attention block.
"""

import copy
import hashlib
import math
from dataclasses import dataclass
from random import Random

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import apply_mlm_mask
from .errors import ConfigError, DegenerateInputError, DivergenceError, ModeError
from .tokenizer import BOS_ID, EOS_ID, PAD_ID

BIDIRECTIONAL = "bidirectional"
CAUSAL = "causal"

INIT_STD = 0.02


@dataclass
class TransformerConfig:
    vocab_size: int
    num_layers: int = 2
    hidden_size: int = 128
    num_heads: int = 4
    dropout: float = 0.1
    max_positions: int = 64

    def __post_init__(self):
        if min(self.vocab_size, self.num_layers, self.hidden_size,
               self.num_heads, self.max_positions) < 1:
            raise ConfigError("all transformer size fields must be >= 1")
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")

    def num_parameters(self):
        """Closed-form parameter count (tied embeddings counted once)."""
        h = self.hidden_size
        per_layer = 12 * h * h + 13 * h
        return (self.vocab_size * h + self.max_positions * h
                + self.num_layers * per_layer + 2 * h)


class TransformerLayer(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, cfg):
        super().__init__()
        h = cfg.hidden_size
        self.ln1 = nn.LayerNorm(h)
        self.attn = nn.MultiheadAttention(h, cfg.num_heads, dropout=cfg.dropout,
                                          batch_first=True)
        self.ln2 = nn.LayerNorm(h)
        self.ff = nn.Sequential(nn.Linear(h, 4 * h), nn.GELU(), nn.Linear(4 * h, h))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, attn_mask=None, key_padding_mask=None):
        h = self.ln1(x)
        a, _ = self.attn(h, h, h, attn_mask=attn_mask,
                         key_padding_mask=key_padding_mask, need_weights=False)
        x = x + self.drop(a)
        x = x + self.drop(self.ff(self.ln2(x)))
        return x


def _causal_mask(t, device):
    # True = not allowed to attend
    return torch.ones(t, t, dtype=torch.bool, device=device).triu(1)


def _init_module(module):
    if isinstance(module, (nn.Linear, nn.Embedding)):
        nn.init.normal_(module.weight, mean=0.0, std=INIT_STD)
        if isinstance(module, nn.Linear) and module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.MultiheadAttention):
        nn.init.normal_(module.in_proj_weight, mean=0.0, std=INIT_STD)
        nn.init.zeros_(module.in_proj_bias)
        nn.init.normal_(module.out_proj.weight, mean=0.0, std=INIT_STD)
        nn.init.zeros_(module.out_proj.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class LanguageModel(nn.Module):
    def __init__(self, config, attention_mode=BIDIRECTIONAL):
        super().__init__()
        if attention_mode not in (BIDIRECTIONAL, CAUSAL):
            raise ConfigError(f"unknown attention mode {attention_mode!r}")
        self.config = config
        self.attention_mode = attention_mode
        h = config.hidden_size
        self.tok_emb = nn.Embedding(config.vocab_size, h)
        self.pos_emb = nn.Embedding(config.max_positions, h)
        self.drop = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(TransformerLayer(config)
                                    for _ in range(config.num_layers))
        self.ln_f = nn.LayerNorm(h)
        self.lm_head = nn.Linear(h, config.vocab_size, bias=False)
        self.lm_head.weight = self.tok_emb.weight

    def embed(self, ids):
        t = ids.size(1)
        if t > self.config.max_positions:
            raise ConfigError(
                f"sequence length {t} exceeds max_positions {self.config.max_positions}")
        pos = torch.arange(t, device=ids.device)
        return self.drop(self.tok_emb(ids) + self.pos_emb(pos))

    def hidden_states(self, ids, key_padding_mask=None):
        x = self.embed(ids)
        mask = _causal_mask(ids.size(1), ids.device) if self.attention_mode == CAUSAL else None
        for layer in self.layers:
            x = layer(x, attn_mask=mask, key_padding_mask=key_padding_mask)
        return self.ln_f(x)

    def forward(self, ids, key_padding_mask=None):
        return self.lm_head(self.hidden_states(ids, key_padding_mask))


def build_lm(config, seed, attention_mode=BIDIRECTIONAL):
    """Deterministically initialized LM: scaled normal (std 0.02) weights."""
    torch.manual_seed(seed)
    lm = LanguageModel(config, attention_mode)
    lm.apply(_init_module)
    return lm


def pad_batch(seqs, device=None):
    """Right-pad to a [B, T] id tensor plus a bool key-padding mask."""
    t = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), t), PAD_ID, dtype=torch.long, device=device)
    pad = torch.ones(len(seqs), t, dtype=torch.bool, device=device)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long, device=device)
        pad[i, : len(s)] = False
    return ids, pad


def mlm_loss(lm, corrupted_batch, targets_batch):
    """Mean NLL over the masked target positions only."""
    if lm.attention_mode != BIDIRECTIONAL:
        raise ModeError("mlm_loss needs a bidirectional model")
    flat = [(i, pos, tid) for i, targets in enumerate(targets_batch)
            for pos, tid in targets]
    if not flat:
        raise DegenerateInputError("batch has no MLM targets")
    ids, pad = pad_batch(corrupted_batch)
    logits = lm(ids, key_padding_mask=pad)
    rows = torch.tensor([f[0] for f in flat])
    cols = torch.tensor([f[1] for f in flat])
    tgt = torch.tensor([f[2] for f in flat])
    return F.cross_entropy(logits[rows, cols], tgt)


def _next_token_nll(lm, batch):
    """Per-sequence summed next-token NLL and per-sequence token counts."""
    ids, pad = pad_batch(batch)
    logits = lm(ids, key_padding_mask=pad)
    logp = F.log_softmax(logits[:, :-1], dim=-1)
    tgt = ids[:, 1:]
    picked = logp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
    valid = ~pad[:, 1:]
    nll = -(picked * valid).sum(dim=1)
    return nll, valid.sum(dim=1)


def clm_loss(lm, batch):
    """Token-weighted mean of -log P(x_t | x_1..x_{t-1}) over the batch."""
    if lm.attention_mode != CAUSAL:
        raise ModeError("clm_loss needs a causal model")
    if any(len(s) < 2 for s in batch):
        raise DegenerateInputError("clm_loss needs sequences of length >= 2")
    nll, counts = _next_token_nll(lm, batch)
    return nll.sum() / counts.sum()


def sequence_log_prob(lm, tokens):
    """r(x) = sum_t log P(x_t | x_<t) under a causal LM; always <= 0."""
    if lm.attention_mode != CAUSAL:
        raise ModeError("sequence_log_prob needs a causal model")
    if len(tokens) < 2:
        raise DegenerateInputError("sequence too short to score")
    with torch.no_grad():
        nll, _ = _next_token_nll(lm, [list(tokens)])
    return -nll.item()


def corpus_nll(lm, sentences, batch_size=64):
    """Summed next-token NLL and token count over a whole corpus.

    Shared by discriminator perplexity and fluency perplexity so the two
    agree bit-for-bit.
    """
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(sentences), batch_size):
            nll, n = _next_token_nll(lm, sentences[i: i + batch_size])
            total += nll.sum().item()
            count += int(n.sum().item())
    return total, count


class CrossAttentionBlock(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.ln = nn.LayerNorm(cfg.hidden_size)
        self.attn = nn.MultiheadAttention(cfg.hidden_size, cfg.num_heads,
                                          dropout=cfg.dropout, batch_first=True)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, memory_padding_mask=None):
        a, _ = self.attn(self.ln(x), memory, memory,
                         key_padding_mask=memory_padding_mask, need_weights=False)
        return x + self.drop(a)


class EncoderDecoder(nn.Module):
    """Generator: bidirectional encoder, causal decoder, fresh cross-attention.

    The decoder's own blocks are driven layer by layer so its
    self-attention weights stay exactly the ones it was initialized with.
    """

    def __init__(self, encoder, decoder, cross_blocks):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder
        self.cross = nn.ModuleList(cross_blocks)

    @property
    def config(self):
        return self.decoder.config

    def encode(self, src_ids, src_padding_mask=None):
        return self.encoder.hidden_states(src_ids, key_padding_mask=src_padding_mask)

    def decode_logits(self, tgt_ids, memory, memory_padding_mask=None,
                      tgt_padding_mask=None):
        x = self.decoder.embed(tgt_ids)
        mask = _causal_mask(tgt_ids.size(1), tgt_ids.device)
        for layer, cross in zip(self.decoder.layers, self.cross):
            h = layer.ln1(x)
            a, _ = layer.attn(h, h, h, attn_mask=mask,
                              key_padding_mask=tgt_padding_mask, need_weights=False)
            x = x + layer.drop(a)
            x = cross(x, memory, memory_padding_mask)
            x = x + layer.drop(layer.ff(layer.ln2(x)))
        return self.decoder.lm_head(self.decoder.ln_f(x))

    def forward(self, src_batch, tgt_batch):
        """Teacher-forced per-sequence NLL sums and token counts."""
        src_ids, src_pad = pad_batch(src_batch)
        tgt_ids, tgt_pad = pad_batch(tgt_batch)
        memory = self.encode(src_ids, src_pad)
        logits = self.decode_logits(tgt_ids[:, :-1], memory, src_pad,
                                    tgt_pad[:, :-1])
        logp = F.log_softmax(logits, dim=-1)
        tgt = tgt_ids[:, 1:]
        picked = logp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
        valid = ~tgt_pad[:, 1:]
        return -(picked * valid).sum(dim=1), valid.sum(dim=1)


def build_encoder_decoder(encoder_src, decoder_src, seed):
    """Assemble the generator from two pretrained LMs.

    Encoder/decoder weights are copied verbatim; one cross-attention
    block per decoder layer is freshly initialized from the seed.
    """
    if encoder_src.config.hidden_size != decoder_src.config.hidden_size:
        raise ConfigError("encoder/decoder hidden sizes differ")
    if encoder_src.config.vocab_size != decoder_src.config.vocab_size:
        raise ConfigError("encoder/decoder vocabularies differ")
    encoder = copy.deepcopy(encoder_src)
    encoder.attention_mode = BIDIRECTIONAL
    decoder = copy.deepcopy(decoder_src)
    decoder.attention_mode = CAUSAL
    torch.manual_seed(seed)
    cross = [CrossAttentionBlock(decoder.config) for _ in range(decoder.config.num_layers)]
    for block in cross:
        block.apply(_init_module)
    return EncoderDecoder(encoder, decoder, cross)


def conditional_nll(encdec, noisy_batch, original_batch):
    """-log P(x | x~) per sequence (summed over tokens), differentiable."""
    nll, counts = encdec(noisy_batch, original_batch)
    return nll, counts


def dae_loss(encdec, noisy_batch, original_batch):
    """Denoising reconstruction loss: per-sequence token NLL sums averaged
    over the batch."""
    if len(noisy_batch) != len(original_batch):
        raise ConfigError("noisy/original batch size mismatch")
    nll, _ = conditional_nll(encdec, noisy_batch, original_batch)
    return nll.mean()


def _pick_token(logits, mode, temperature, rng):
    if mode == "greedy":
        return int(torch.argmax(logits).item())
    probs = F.softmax(logits / temperature, dim=-1)
    return int(torch.multinomial(probs, 1, generator=rng).item())


def generate(encdec, noisy_input, mode="greedy", temperature=1.0, max_len=64,
             rng=None):
    """Autoregressive decoding from BOS until EOS or max_len tokens total."""
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    if mode not in ("greedy", "sample"):
        raise ConfigError(f"unknown decoding mode {mode!r}")
    if mode == "sample" and temperature <= 0:
        raise ConfigError("sample mode needs temperature > 0")
    limit = min(max_len, encdec.decoder.config.max_positions)
    with torch.no_grad():
        src_ids, src_pad = pad_batch([list(noisy_input)])
        memory = encdec.encode(src_ids, src_pad)
        seq = [BOS_ID]
        while len(seq) < limit:
            tgt = torch.tensor([seq], dtype=torch.long)
            logits = encdec.decode_logits(tgt, memory, src_pad)[0, -1]
            nxt = _pick_token(logits, mode, temperature, rng)
            seq.append(nxt)
            if nxt == EOS_ID:
                break
    return seq


def sample_lm(lm, max_len=64, temperature=1.0, rng=None):
    """Unconditional sample from a causal LM, starting at BOS."""
    if lm.attention_mode != CAUSAL:
        raise ModeError("sample_lm needs a causal model")
    if temperature <= 0:
        raise ConfigError("temperature must be > 0")
    limit = min(max_len, lm.config.max_positions)
    with torch.no_grad():
        seq = [BOS_ID]
        while len(seq) < limit:
            logits = lm(torch.tensor([seq], dtype=torch.long))[0, -1]
            nxt = _pick_token(logits, "sample", temperature, rng)
            seq.append(nxt)
            if nxt == EOS_ID:
                break
    return seq


@dataclass
class TrainHyper:
    steps: int = 0
    epochs: int = 0
    batch_size: int = 32
    learning_rate: float = 1e-4
    seed: int = 0
    grad_clip: float = 1.0
    early_stop: bool = True
    val_fraction: float = 0.1


def batch_iterator(sentences, batch_size, rng):
    """Endless shuffled mini-batches; reshuffles at every epoch boundary."""
    order = list(range(len(sentences)))
    while True:
        rng.shuffle(order)
        for i in range(0, len(order), batch_size):
            yield [sentences[j] for j in order[i: i + batch_size]]


class DivergenceGuard:
    """Abort when training blows up: the loss goes non-finite, or its
    rolling mean exceeds 10x the initial mean. Single REINFORCE steps are
    too noisy to gate on raw per-step values."""

    def __init__(self, window=25, factor=10.0):
        self.window = window
        self.factor = factor
        self.values = []

    def check(self, step, value):
        if not math.isfinite(value):
            raise DivergenceError(f"loss became {value} at step {step}")
        self.values.append(value)
        if len(self.values) < self.window:
            return
        initial = sum(self.values[: self.window]) / self.window
        recent = sum(self.values[-self.window:]) / self.window
        limit = self.factor * max(abs(initial), 1.0)
        if recent > limit:
            raise DivergenceError(
                f"mean loss {recent:.3f} exceeded 10x initial ({initial:.3f}) at step {step}")


def pretrain_mlm(lm, sentences, noise_cfg, hyper, start_step=0, on_step=None):
    """MLM pretraining loop with fresh masking noise every batch.

    Returns a list of {step, loss} rows. Aborts with DivergenceError when
    the rolling mean loss exceeds 10x its initial mean or goes non-finite.
    """
    if not sentences:
        raise ConfigError("pretraining corpus is empty")
    if lm.attention_mode != BIDIRECTIONAL:
        raise ModeError("pretraining needs a bidirectional model")
    rng = Random(hyper.seed)
    opt = torch.optim.Adam(lm.parameters(), lr=hyper.learning_rate)
    batches = batch_iterator(sentences, hyper.batch_size, rng)
    trace = []
    guard = DivergenceGuard()
    lm.train()
    for step in range(start_step + 1, hyper.steps + 1):
        batch = next(batches)
        corrupted, targets = [], []
        for seq in batch:
            c, t = apply_mlm_mask(seq, noise_cfg, rng, lm.config.vocab_size)
            corrupted.append(c)
            targets.append(t)
        if not any(targets):
            continue
        loss = mlm_loss(lm, corrupted, targets)
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(lm.parameters(), hyper.grad_clip)
        opt.step()
        value = loss.item()
        guard.check(step, value)
        trace.append({"step": step, "loss": value})
        if on_step:
            on_step(step, value)
    lm.eval()
    return trace


def parameter_hash(module):
    """Stable hash over the parameter bytes (little-endian float32)."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    return h.hexdigest()[:16]


CKPT_MAGIC = "STYLEFORGE-CKPT v1"
_DATA_SEP = b"\ndata\n"


def save_checkpoint(path, module, meta):
    """Text header (key=value metadata + name/shape index), then the raw
    little-endian float32 tensor data in index order."""
    sd = module.state_dict()
    lines = [CKPT_MAGIC]
    for k, v in meta.items():
        lines.append(f"{k}={v}")
    lines.append(f"tensors {len(sd)}")
    blobs = []
    for name, t in sd.items():
        dims = " ".join(str(d) for d in t.shape)
        lines.append(f"{name} {dims}".rstrip())
        blobs.append(t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write("\n".join(lines).encode("utf-8"))
        fh.write(_DATA_SEP)
        fh.write(b"".join(blobs))


def load_checkpoint(path):
    """Returns (meta dict of strings, tensors dict of float32 tensors)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(_DATA_SEP)
    if sep < 0 or not raw.startswith(CKPT_MAGIC.encode()):
        raise ConfigError(f"{path}: not a {CKPT_MAGIC} checkpoint")
    lines = raw[:sep].decode("utf-8").splitlines()
    meta = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("tensors "):
        key, _, value = lines[i].partition("=")
        meta[key] = value
        i += 1
    if i == len(lines):
        raise ConfigError(f"{path}: missing tensor index")
    count = int(lines[i].split()[1])
    tensors = {}
    blob = raw[sep + len(_DATA_SEP):]
    offset = 0
    for line in lines[i + 1: i + 1 + count]:
        parts = line.split()
        name, shape = parts[0], tuple(int(d) for d in parts[1:])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy())
        offset += 4 * n
    return meta, tensors


def config_from_meta(meta):
    return TransformerConfig(
        vocab_size=int(meta["vocab_size"]),
        num_layers=int(meta["num_layers"]),
        hidden_size=int(meta["hidden_size"]),
        num_heads=int(meta["num_heads"]),
        dropout=float(meta["dropout"]),
        max_positions=int(meta["max_positions"]),
    )


def checkpoint_meta(config, attention_mode, vocab_hash, step, **extra):
    meta = {
        "kind": extra.pop("kind", "lm"),
        "vocab_size": config.vocab_size,
        "num_layers": config.num_layers,
        "hidden_size": config.hidden_size,
        "num_heads": config.num_heads,
        "dropout": config.dropout,
        "max_positions": config.max_positions,
        "attention_mode": attention_mode,
        "vocab_hash": vocab_hash,
        "step": step,
    }
    meta.update(extra)
    return meta


def lm_from_checkpoint(path):
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") not in ("lm", None):
        raise ConfigError(f"{path}: checkpoint kind {meta.get('kind')!r}, expected lm")
    lm = LanguageModel(config_from_meta(meta), meta.get("attention_mode", BIDIRECTIONAL))
    lm.load_state_dict(tensors)
    lm.eval()
    return lm, meta


def encdec_from_checkpoint(path):
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "encdec":
        raise ConfigError(f"{path}: checkpoint kind {meta.get('kind')!r}, expected encdec")
    cfg = config_from_meta(meta)
    encdec = build_encoder_decoder(LanguageModel(cfg, BIDIRECTIONAL),
                                   LanguageModel(cfg, CAUSAL), seed=0)
    encdec.load_state_dict(tensors)
    encdec.eval()
    return encdec, meta
