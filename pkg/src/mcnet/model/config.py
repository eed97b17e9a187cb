from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from mcnet.errors import ConfigError

DEFAULT_ENCODER_WIDTHS = (72, 144, 288, 288, 576)
DEFAULT_INTEGRATION_WIDTHS = (72, 144, 288, 288, 576, 576)
DEFAULT_DECODER_WIDTHS = (576, 288, 288, 144, 72)
KERNEL_SIZES = (2, 3, 4)

# Which decoder branch (by kernel size) receives each encoder branch.
CROSS_MAPPINGS = {
    "cyclic": {2: 3, 3: 4, 4: 2},
    "anticyclic": {2: 4, 3: 2, 4: 3},
    "aligned": {2: 2, 3: 3, 4: 4},
}

BN_RELU_ORDERS = ("relu_then_bn", "bn_then_relu")
INTEGRATION_ACTIVATIONS = ("relu", "none", "relu_then_bn")

STRATEGIES = {
    # name: (use_integration_module, use_cross_deconv)
    "full": (True, True),
    "1": (True, False),
    "2": (False, True),
    "none": (False, False),
}


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of one MC-Net instance.

    ``encoder_widths[i]`` and ``decoder_widths[i]`` are the total filter count
    of submodule ``i + 1``; each of the three kernel branches gets a third.
    ``integration_widths`` has one extra trailing entry for the branch that
    reads the raw input image.
    """

    depth: int = 5
    encoder_widths: tuple = DEFAULT_ENCODER_WIDTHS
    integration_widths: tuple = DEFAULT_INTEGRATION_WIDTHS
    decoder_widths: tuple = DEFAULT_DECODER_WIDTHS
    input_size: int = 256
    in_channels: int = 1
    n_classes: int = 1
    bn_relu_order: str = "relu_then_bn"
    use_integration_module: bool = True
    use_cross_deconv: bool = True
    cross_mapping: str = "cyclic"
    integration_activation: str = "relu"
    affine_bn: bool = False
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        for name in ("encoder_widths", "integration_widths", "decoder_widths"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        self.validate()

    # construction helpers -------------------------------------------------

    @classmethod
    def for_depth(cls, depth: int, **kw) -> "ModelConfig":
        """Depth-reduced variant that keeps the deepest default widths."""
        if not 2 <= depth <= 5:
            raise ConfigError(f"depth must be in 2..5, got {depth}")
        enc = DEFAULT_ENCODER_WIDTHS[5 - depth:]
        integ = DEFAULT_INTEGRATION_WIDTHS[5 - depth:5] + DEFAULT_INTEGRATION_WIDTHS[5:]
        dec = DEFAULT_DECODER_WIDTHS[:depth]
        return cls(depth=depth, encoder_widths=enc, integration_widths=integ,
                   decoder_widths=dec, **kw)

    @classmethod
    def from_encoder_widths(cls, widths, **kw) -> "ModelConfig":
        """Derive the other two lists the way the defaults relate to each other:
        integration = encoder + [last], decoder = reversed encoder."""
        widths = tuple(int(w) for w in widths)
        return cls(depth=len(widths), encoder_widths=widths,
                   integration_widths=widths + widths[-1:],
                   decoder_widths=tuple(reversed(widths)), **kw)

    @classmethod
    def uniform(cls, depth: int, width: int, **kw) -> "ModelConfig":
        return cls.from_encoder_widths([width] * depth, **kw)

    def with_strategy(self, strategy: str) -> "ModelConfig":
        try:
            integ, cross = STRATEGIES[str(strategy)]
        except KeyError:
            raise ConfigError(f"unknown strategy {strategy!r}; choose from {sorted(STRATEGIES)}")
        return replace(self, use_integration_module=integ, use_cross_deconv=cross)

    @property
    def strategy(self) -> str:
        for name, flags in STRATEGIES.items():
            if flags == (self.use_integration_module, self.use_cross_deconv):
                return name
        raise AssertionError("unreachable")

    # derived quantities ---------------------------------------------------

    @property
    def bottleneck(self) -> int:
        return self.input_size // 2 ** self.depth

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def integration_pool_sizes(self) -> list[int]:
        """Pool size per encoder branch, then the raw-image branch."""
        b = self.bottleneck
        sizes = [self.input_size // (2 ** (i + 1) * b) for i in range(self.depth)]
        return sizes + [self.input_size // b]

    def validate(self):
        d = self.depth
        if not isinstance(d, (int, np.integer)) or not 2 <= d <= 5:
            raise ConfigError(f"depth must be an integer in 2..5, got {d!r}")
        if len(self.encoder_widths) != d or len(self.decoder_widths) != d:
            raise ConfigError(
                f"encoder/decoder width lists must have length depth={d}, got "
                f"{len(self.encoder_widths)} and {len(self.decoder_widths)}"
            )
        if len(self.integration_widths) != d + 1:
            raise ConfigError(
                f"integration width list must have length depth+1={d + 1}, "
                f"got {len(self.integration_widths)}"
            )
        for name in ("encoder_widths", "decoder_widths"):
            for w in getattr(self, name):
                if w <= 0 or w % 3:
                    raise ConfigError(f"{name} entry {w} is not a positive multiple of 3")
        if any(w <= 0 for w in self.integration_widths):
            raise ConfigError("integration widths must be positive")
        if self.input_size <= 0 or self.input_size % (2 ** d):
            raise ConfigError(f"input_size {self.input_size} not divisible by 2^{d}")
        if self.in_channels < 1 or self.n_classes < 1:
            raise ConfigError("in_channels and n_classes must be positive")
        if self.bn_relu_order not in BN_RELU_ORDERS:
            raise ConfigError(f"bn_relu_order must be one of {BN_RELU_ORDERS}")
        if self.cross_mapping not in CROSS_MAPPINGS:
            raise ConfigError(f"cross_mapping must be one of {sorted(CROSS_MAPPINGS)}")
        if self.integration_activation not in INTEGRATION_ACTIVATIONS:
            raise ConfigError(f"integration_activation must be one of {INTEGRATION_ACTIVATIONS}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.use_cross_deconv:
            for j in range(1, d + 1):
                dec = self.decoder_widths[j - 1] // 3
                enc = self.encoder_widths[d - j] // 3
                if dec != enc:
                    raise ConfigError(
                        f"decoder submodule {j} branch width {dec} cannot be added to "
                        f"encoder submodule {d + 1 - j} branch width {enc}"
                    )

    # serialisation --------------------------------------------------------

    def to_dict(self) -> dict:
        out = asdict(self)
        for name in ("encoder_widths", "integration_widths", "decoder_widths"):
            out[name] = list(out[name])
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))
