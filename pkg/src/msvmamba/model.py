"""Full encoder / LMS-decoder / MSAA network with ablation switches."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import nn_ops
from .encoder import Encoder
from .errors import ConfigError, ShapeError
from .layers import Conv2d, Module
from .lms import LmsBlock
from .losses import AuxHead, LossConfig, PredictionSet, task_for
from .msaa import MSAA, POOL_MODES
from .tensor import Tensor, get_dtype, parameter

PLACEMENTS = ("lower", "top")


@dataclass
class ModelConfig:
    classes: int = 2
    channels: tuple[int, ...] = (32, 64, 128, 256)
    # decoder windows, deepest block first
    windows: tuple[tuple[int, int], ...] = ((7, 7), (7, 7), (4, 4), (4, 4))
    msaa_placement: str = "lower"
    msaa_pool: str = "local"
    use_lms: bool = True
    use_aux: bool = True
    use_msaa: bool = True
    seed: int = 0
    d_state: int = 8
    expand: int = 2
    conv_width: int = 4
    epsilon: float = 0.4
    dice_smooth: float = 1.0
    main_mix: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.windows = tuple(tuple(int(v) for v in w) for w in self.windows)
        self.main_mix = tuple(float(v) for v in self.main_mix)
        if len(self.channels) != 4:
            raise ConfigError(f"channel schedule needs 4 stages, got {self.channels}")
        if any(b != 2 * a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"channel schedule must double per stage, got {self.channels}")
        if len(self.windows) != 4 or any(len(w) != 2 or w[0] * w[1] < 4 for w in self.windows):
            raise ConfigError(f"need 4 decoder windows m x n with m*n >= 4, got {self.windows}")
        if self.classes < 1:
            raise ConfigError(f"classes must be >= 1, got {self.classes}")
        if self.msaa_placement not in PLACEMENTS:
            raise ConfigError(f"msaa_placement must be one of {PLACEMENTS}")
        if self.msaa_pool not in POOL_MODES:
            raise ConfigError(f"msaa_pool must be one of {POOL_MODES}")
        if len(self.main_mix) != 2:
            raise ConfigError("main_mix needs two weights (cross-entropy, dice)")

    @property
    def task(self) -> str:
        return task_for(self.classes)

    def loss_config(self) -> LossConfig:
        eps = self.epsilon if self.use_aux else 0.0
        return LossConfig(epsilon=eps, task=self.task, dice_smooth=self.dice_smooth,
                          main_mix=self.main_mix)

    def with_ablation(self, **switches) -> "ModelConfig":
        return replace(self, **switches)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class MsvMamba(Module):
    N_STAGES = 4

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c1, c2, c3, c4 = cfg.channels
        mk = dict(d_state=cfg.d_state, expand=cfg.expand, conv_width=cfg.conv_width)
        self.encoder = Encoder(rng, cfg.channels)
        skips = (c3, c2, c1, None)
        widths = (c4, c3, c2, c1)
        self.blocks = [LmsBlock(w, s, win, rng, use_lms=cfg.use_lms, **mk)
                       for w, s, win in zip(widths, skips, cfg.windows)]
        outs = [b.out_channels for b in self.blocks]  # c3, c2, c1, c1
        self.aux_heads = [AuxHead(c, cfg.classes, rng) for c in outs]
        if cfg.use_msaa:
            trio = (outs[1], outs[0], outs[2]) if cfg.msaa_placement == "lower" \
                else (outs[3], outs[2], outs[1])
            self.msaa = MSAA(sum(trio), c1, rng, pool_mode=cfg.msaa_pool)
        else:
            self.msaa = None
        self.main_head = Conv2d(c1, cfg.classes, 1, rng)
        self.raw_omega = parameter(np.zeros(self.N_STAGES, dtype=get_dtype()))
        self.stage_norms: dict[str, float] = {}

    def _record(self, name: str, t: Tensor) -> Tensor:
        self.stage_norms[name] = float(np.sqrt(np.sum(np.square(t.data, dtype=np.float64))))
        return t

    def decode(self, feats: list[Tensor]) -> list[Tensor]:
        e1, e2, e3, e4 = feats
        d, outs = e4, []
        for i, (blk, skip) in enumerate(zip(self.blocks, (e3, e2, e1, None))):
            try:
                d = blk(d, skip)
            except ShapeError as exc:
                raise ShapeError(f"decoder block {i + 1}: {exc}") from exc
            outs.append(self._record(f"decoder{i + 1}", d))
        return outs

    def forward(self, image: Tensor) -> PredictionSet:
        if image.ndim != 4 or image.shape[1] != 1:
            raise ShapeError(f"model input must be N x 1 x H x W, got {image.shape}")
        self.stage_norms = {}
        h, w = image.shape[2:]
        try:
            feats = self.encoder(image)
        except ShapeError as exc:
            raise ShapeError(f"encoder: {exc}") from exc
        for i, f in enumerate(feats):
            self._record(f"encoder{i + 1}", f)
        decs = self.decode(feats)
        aux = [head(d, (h, w)) for head, d in zip(self.aux_heads, decs)]
        top = decs[-1]
        if self.msaa is not None:
            if self.cfg.msaa_placement == "lower":
                fused = self.msaa(decs[1], decs[0], decs[2])
            else:
                fused = self.msaa(decs[3], decs[2], decs[1])
            top = top + nn_ops.resize_bilinear(self._record("msaa", fused), *top.shape[2:])
        main = self.main_head(nn_ops.resize_bilinear(top, h, w))
        return PredictionSet(main, aux)

    def predict_labels(self, image: Tensor) -> np.ndarray:
        from .tensor import no_grad
        with no_grad():
            logits = self.forward(image).logits_main.data
        return hard_labels(logits)


def hard_labels(logits: np.ndarray) -> np.ndarray:
    if logits.shape[1] == 1:
        return (logits[:, 0] > 0).astype(np.int64)
    return logits.argmax(axis=1)
