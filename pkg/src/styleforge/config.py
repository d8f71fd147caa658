"""Flat key=value run configuration with section prefixes.

Example:

    seed=0
    out_dir=runs/synthetic
    model.hidden_size=128
    styles=case_upper,end_marked
    style.case_upper.dimension=case
    transfer.lambda.case_upper=1.0

The environment variable STYLE_FORGE_SEED overrides the configured seed.
Unknown keys are rejected. The config hash (over the canonicalized pairs,
after the seed override) is embedded in every artifact.
"""

import hashlib
import os
from dataclasses import dataclass, field

from .corpus import NoiseConfig
from .errors import ConfigError
from .model import TrainHyper, TransformerConfig
from .transfer import TransferConfig

SEED_ENV = "STYLE_FORGE_SEED"


@dataclass
class StyleSpec:
    name: str
    dimension: str = ""
    label: str = ""
    corpus: str = ""
    heldout: str = ""
    opposite_label: str = ""
    opposite_corpus: str = ""
    opposite_heldout: str = ""


def _bool(value):
    if value.lower() in ("true", "1", "yes"):
        return True
    if value.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    bpe_corpus: str = ""
    bpe_num_merges: int = 300
    max_len: int = 28
    model_num_layers: int = 2
    model_hidden_size: int = 128
    model_num_heads: int = 4
    model_dropout: float = 0.1
    model_max_positions: int = 32
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    pretrain_corpus: str = ""
    pretrain_steps: int = 600
    pretrain_batch_size: int = 32
    pretrain_learning_rate: float = 3e-4
    pretrain_checkpoint_every: int = 200
    styles: list = field(default_factory=list)
    disc_epochs: int = 3
    disc_batch_size: int = 32
    disc_learning_rate: float = 3e-4
    transfer_lambda_dae: float = 1.0
    transfer_lambdas: dict = field(default_factory=dict)
    transfer_steps: int = 800
    transfer_batch_size: int = 16
    transfer_learning_rate: float = 1e-4
    transfer_sample_temperature: float = 1.0
    transfer_max_len: int = 0          # 0: fall back to max_len
    transfer_reward_length_normalize: bool = False
    transfer_checkpoint_every: int = 0
    eval_lexicon: str = ""
    eval_formality_target: str = ""
    eval_lowercase_bleu: bool = True
    eval_classifier_epochs: int = 10
    config_hash: str = ""

    def transformer_config(self, vocab_size):
        return TransformerConfig(
            vocab_size=vocab_size,
            num_layers=self.model_num_layers,
            hidden_size=self.model_hidden_size,
            num_heads=self.model_num_heads,
            dropout=self.model_dropout,
            max_positions=self.model_max_positions,
        )

    def pretrain_hyper(self):
        return TrainHyper(steps=self.pretrain_steps,
                          batch_size=self.pretrain_batch_size,
                          learning_rate=self.pretrain_learning_rate,
                          seed=self.seed)

    def disc_hyper(self):
        return TrainHyper(epochs=self.disc_epochs,
                          batch_size=self.disc_batch_size,
                          learning_rate=self.disc_learning_rate,
                          seed=self.seed)

    def transfer_config(self):
        missing = [s.name for s in self.styles if s.name not in self.transfer_lambdas]
        if missing:
            raise ConfigError(f"transfer.lambda.<name> missing for styles: {missing}")
        return TransferConfig(
            lambda_dae=self.transfer_lambda_dae,
            lambda_styles=[self.transfer_lambdas[s.name] for s in self.styles],
            sample_temperature=self.transfer_sample_temperature,
            max_len=self.transfer_max_len or self.max_len,
            reward_length_normalize=self.transfer_reward_length_normalize,
            steps=self.transfer_steps,
            batch_size=self.transfer_batch_size,
            learning_rate=self.transfer_learning_rate,
            seed=self.seed,
            checkpoint_every=self.transfer_checkpoint_every,
            noise=self.noise,
        )


_SCALARS = {
    "seed": ("seed", int),
    "out_dir": ("out_dir", str),
    "bpe.corpus": ("bpe_corpus", str),
    "bpe.num_merges": ("bpe_num_merges", int),
    "data.max_len": ("max_len", int),
    "model.num_layers": ("model_num_layers", int),
    "model.hidden_size": ("model_hidden_size", int),
    "model.num_heads": ("model_num_heads", int),
    "model.dropout": ("model_dropout", float),
    "model.max_positions": ("model_max_positions", int),
    "pretrain.corpus": ("pretrain_corpus", str),
    "pretrain.steps": ("pretrain_steps", int),
    "pretrain.batch_size": ("pretrain_batch_size", int),
    "pretrain.learning_rate": ("pretrain_learning_rate", float),
    "pretrain.checkpoint_every": ("pretrain_checkpoint_every", int),
    "disc.epochs": ("disc_epochs", int),
    "disc.batch_size": ("disc_batch_size", int),
    "disc.learning_rate": ("disc_learning_rate", float),
    "transfer.lambda_dae": ("transfer_lambda_dae", float),
    "transfer.steps": ("transfer_steps", int),
    "transfer.batch_size": ("transfer_batch_size", int),
    "transfer.learning_rate": ("transfer_learning_rate", float),
    "transfer.sample_temperature": ("transfer_sample_temperature", float),
    "transfer.max_len": ("transfer_max_len", int),
    "transfer.reward_length_normalize": ("transfer_reward_length_normalize", _bool),
    "transfer.checkpoint_every": ("transfer_checkpoint_every", int),
    "eval.lexicon": ("eval_lexicon", str),
    "eval.formality_target": ("eval_formality_target", str),
    "eval.lowercase_bleu": ("eval_lowercase_bleu", _bool),
    "eval.classifier_epochs": ("eval_classifier_epochs", int),
}

_NOISE_KEYS = ("p_drop", "p_mask", "mlm_select", "mlm_mask_frac",
               "mlm_random_frac", "mlm_keep_frac")
_STYLE_KEYS = ("dimension", "label", "corpus", "heldout", "opposite_label",
               "opposite_corpus", "opposite_heldout")


def read_pairs(path):
    pairs = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key = key.strip()
            if key in pairs:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            pairs[key] = value.strip()
    return pairs


def parse_config(path, env=None):
    env = os.environ if env is None else env
    pairs = read_pairs(path)
    cfg = RunConfig()
    noise_kwargs = {}
    style_names = []
    style_fields = {}

    for key, value in pairs.items():
        if key in _SCALARS:
            attr, cast = _SCALARS[key]
            try:
                setattr(cfg, attr, cast(value))
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {value!r}")
        elif key == "styles":
            style_names = [n.strip() for n in value.split(",") if n.strip()]
        elif key.startswith("noise."):
            name = key[len("noise."):]
            if name not in _NOISE_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                noise_kwargs[name] = float(value)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {value!r}")
        elif key.startswith("transfer.lambda."):
            try:
                cfg.transfer_lambdas[key[len("transfer.lambda."):]] = float(value)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {value!r}")
        elif key.startswith("style."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in _STYLE_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            style_fields.setdefault(parts[1], {})[parts[2]] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")

    cfg.noise = NoiseConfig(**noise_kwargs)
    for name in style_names:
        spec = StyleSpec(name, **style_fields.pop(name, {}))
        if not (spec.dimension and spec.label and spec.corpus):
            raise ConfigError(f"style {name!r} needs dimension, label and corpus")
        cfg.styles.append(spec)
    if style_fields:
        raise ConfigError(f"style.* keys for undeclared styles: {sorted(style_fields)}")
    for name in cfg.transfer_lambdas:
        if name not in style_names:
            raise ConfigError(f"transfer.lambda.{name} has no matching style")

    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer")
        pairs["seed"] = str(cfg.seed)

    canon = "\n".join(f"{k}={pairs[k]}" for k in sorted(pairs))
    cfg.config_hash = hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    cfg.bpe_corpus = relative_to_config(path, cfg.bpe_corpus)
    cfg.pretrain_corpus = relative_to_config(path, cfg.pretrain_corpus)
    cfg.eval_lexicon = relative_to_config(path, cfg.eval_lexicon)
    cfg.out_dir = relative_to_config(path, cfg.out_dir)
    for spec in cfg.styles:
        for attr in ("corpus", "heldout", "opposite_corpus", "opposite_heldout"):
            setattr(spec, attr, relative_to_config(path, getattr(spec, attr)))
    return cfg


def relative_to_config(cfg_path, value):
    """Paths inside a config file resolve relative to the file itself."""
    if not value or os.path.isabs(value):
        return value
    return os.path.normpath(os.path.join(os.path.dirname(os.path.abspath(cfg_path)), value))
