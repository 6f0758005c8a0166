"""Flat ``key = value`` run configuration with the published defaults."""
from dataclasses import asdict, dataclass, fields, replace

from .embed import EmbedConfig
from .pyramid import DivisionSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PiTConfig:
    # input and patch embedding
    image_height: int = 256
    image_width: int = 128
    channels: int = 3
    kernel: int = 16
    stride: int = 12
    embed_dim: int = 768
    lambda1: float = 1.0
    lambda2: float = 1.5
    num_cameras: int = 6
    # trunk and heads
    depth: int = 11
    num_heads: int = 12
    mlp_dim: int = 3072
    head_depth: int = 1
    trunk_final_norm: bool = False
    ln_eps: float = 1e-6
    division: str = "1x210_105x2_3x70_6p"
    # video
    num_frames: int = 8
    # optimisation
    ids_per_batch: int = 4
    videos_per_id: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 120
    freeze_epochs: int = 5
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    checkpoint_every: int = 0
    # evaluation
    distance: str = "concat"
    seed: int = 0

    def __post_init__(self):
        for name in ("depth", "head_depth", "num_frames", "ids_per_batch", "videos_per_id",
                     "epochs", "freeze_epochs", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.num_frames < 1 or self.head_depth < 1:
            raise ConfigError("num_frames and head_depth must be >= 1")
        if self.ids_per_batch < 2 or self.videos_per_id < 2:
            raise ConfigError("triplet mining needs ids_per_batch >= 2 and videos_per_id >= 2")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.distance not in ("concat", "branch_sum"):
            raise ConfigError(f"unknown distance mode {self.distance!r}")
        try:
            embed = self.embed_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        # reject misaligned or malformed divisions before any work happens
        try:
            self.division_spec().resolve(embed.grid_height, embed.grid_width)
        except ValueError as exc:
            raise ConfigError(f"invalid division {self.division!r}: {exc}") from exc

    def embed_config(self):
        return EmbedConfig(self.image_height, self.image_width, self.channels, self.kernel,
                           self.stride, self.embed_dim, self.lambda1, self.lambda2, self.num_cameras)

    def division_spec(self):
        embed = self.embed_config()
        return DivisionSpec.parse(self.division, embed.num_patches)

    def to_dict(self):
        return asdict(self)

    def replace(self, **changes):
        return replace(self, **changes)

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        typed = {}
        for key, raw in values.items():
            typed[key] = _coerce(key, raw, known[key].type)
        return cls(**typed)

    @classmethod
    def from_text(cls, text):
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = value
        return cls.from_dict(values)

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def _coerce(key, raw, kind):
    if not isinstance(raw, str):
        return raw
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def toy_config(**overrides):
    """Small CPU-friendly setup: 40x28 frames give a 3x2 token grid."""
    base = dict(image_height=40, image_width=28, channels=3, embed_dim=16, num_heads=2,
                mlp_dim=64, depth=2, num_cameras=2, division="1x6_3x2_3x2h_6p",
                num_frames=8, ids_per_batch=4, videos_per_id=4, lr=0.01, epochs=200,
                freeze_epochs=5)
    base.update(overrides)
    return PiTConfig(**base)
