"""Run configuration: model/training dataclasses, validation, and the flat
`key = value` config-file format (UTF-8, `#` comments, CLI flags override)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

FUSION_VARIANTS = ("concat", "add", "conv", "adain", "spade", "adn")
ACB_DEPTHS = (2, 4, 6, 8)
MASK_MODES = ("regular", "easy", "medium", "hard")
# training with intermediate predicted structures needs the auxiliary loss
# weights cut by this factor or the noisy predictions destabilize the image
BIASED_PENALTY_DIVISOR = 30.0


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps this to exit code 2."""


@dataclass(frozen=True)
class LossWeights:
    edge: float = 1.0  # weight of the whole edge objective
    seg: float = 1.0  # weight of the segmentation objective
    bce_in_edge: float = 10.0  # BCE vs adversarial balance inside the edge term
    hole: float = 6.0
    valid: float = 1.0
    tv: float = 0.1

    def validate(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be >= 0")
        return self

    def scaled_for_biased(self):
        return dataclasses.replace(
            self,
            edge=self.edge / BIASED_PENALTY_DIVISOR,
            seg=self.seg / BIASED_PENALTY_DIVISOR,
        )


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    base_channels: int = 8
    acb_depth: int = 2
    dilations: tuple = (1, 2, 4, 8)
    decoder_stages: int = 3
    patch_size: int = 2  # at the coarsest stage; doubled per stage
    heads: int = 4
    fusion: str = "adn"
    biased_prior: bool = False
    k_classes: int = 4
    use_edge_branch: bool = True
    use_seg_branch: bool = True
    precision: str = "float64"
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def validate(self):
        if self.image_size % 4 != 0:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 4")
        if self.acb_depth not in ACB_DEPTHS:
            raise ConfigError(f"acb_depth {self.acb_depth} not in {ACB_DEPTHS}")
        if not self.dilations:
            raise ConfigError("dilations must be non-empty")
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be >= 1, got {self.dilations}")
        if self.decoder_stages != 3:
            raise ConfigError("decoder_stages is fixed at 3")
        if self.heads < 1 or self.base_channels % self.heads != 0:
            raise ConfigError(
                f"base_channels {self.base_channels} must be divisible by heads {self.heads}")
        coarse = self.image_size // 4
        if self.patch_size < 1 or coarse % self.patch_size != 0:
            raise ConfigError(
                f"patch_size {self.patch_size} does not tile the {coarse}x{coarse} coarse stage")
        if self.fusion not in FUSION_VARIANTS:
            raise ConfigError(f"fusion {self.fusion!r} not in {FUSION_VARIANTS}")
        if self.fusion == "add" and self.biased_prior:
            raise ConfigError("fusion 'add' needs channel-matched conditioning; "
                              "it cannot consume biased prior predictions")
        if self.k_classes < 2:
            raise ConfigError(f"k_classes must be >= 2, got {self.k_classes}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.biased_prior and not (self.use_edge_branch and self.use_seg_branch):
            raise ConfigError("biased_prior needs both auxiliary branches enabled")
        self.loss_weights.validate()
        return self

    def effective_loss_weights(self):
        return (self.loss_weights.scaled_for_biased() if self.biased_prior
                else self.loss_weights)

    @property
    def stage_channels(self):
        b = self.base_channels
        return (4 * b, 2 * b, b)


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 2000
    batch_size: int = 8
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    adam_eps: float = 1e-8
    checkpoint_every: int = 500
    log_every: int = 1
    mask_mode: str = "regular"
    data_path: str = "train.trif"
    out_dir: str = "runs/default"

    def validate(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigError("learning rates must be > 0")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode {self.mask_mode!r} not in {MASK_MODES}")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("cadences must be >= 1")
        return self


# ---------------------------------------------------------------------------
# flat key-value files


def parse_config_text(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_config_file(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())


def _coerce(name, value, typ):
    if isinstance(value, typ if typ is not tuple else (tuple, list)):
        return tuple(value) if typ is tuple else value
    s = str(value).strip()
    try:
        if typ is bool:
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if typ is int:
            return int(s)
        if typ is float:
            return float(s)
        if typ is tuple:
            return tuple(int(p) for p in s.split(",") if p.strip())
        return s
    except ValueError:
        raise ConfigError(f"cannot parse {name} = {value!r} as {typ.__name__}") from None


def config_from_mapping(cls, mapping, base=None):
    """Build a config dataclass from string-ish key/value pairs.

    Unknown keys are rejected; known keys are coerced to the field type.
    Keys prefixed `loss.` route into the nested LossWeights.
    """
    base = base or cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    updates = {}
    loss_updates = {}
    for key, value in mapping.items():
        if key.startswith("loss."):
            sub = key[len("loss."):]
            wfields = {f.name: f for f in dataclasses.fields(LossWeights)}
            if sub not in wfields:
                raise ConfigError(f"unknown loss weight {sub!r}")
            loss_updates[sub] = _coerce(key, value, float)
            continue
        if key not in fields or key == "loss_weights":
            raise ConfigError(f"unknown {cls.__name__} key {key!r}")
        f = fields[key]
        typ = f.type if isinstance(f.type, type) else {
            "int": int, "float": float, "bool": bool, "str": str, "tuple": tuple,
        }.get(f.type, str)
        updates[key] = _coerce(key, value, typ)
    if loss_updates:
        updates["loss_weights"] = dataclasses.replace(
            getattr(base, "loss_weights", LossWeights()), **loss_updates)
    return dataclasses.replace(base, **updates)


def config_to_mapping(cfg):
    """Flatten a config dataclass to strings; round-trips config_from_mapping."""
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, LossWeights):
            for wf in dataclasses.fields(v):
                out[f"loss.{wf.name}"] = repr(getattr(v, wf.name))
        elif isinstance(v, bool):
            out[f.name] = "true" if v else "false"
        elif isinstance(v, tuple):
            out[f.name] = ",".join(str(p) for p in v)
        elif isinstance(v, float):
            out[f.name] = repr(v)  # repr keeps full precision for round-trips
        else:
            out[f.name] = str(v)
    return out
