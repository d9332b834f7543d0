"""End-to-end segmentation model: encoder -> (optional) MLFF -> decoder -> mask head."""
from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .decoder import MQMDecoder, predict_mask
from .encoder import FPNEncoder, PyramidFeatures
from .mlff import MLFF, maybe_fuse
from .module import Module
from .tensor import ShapeError, Tensor, no_grad, reshape


class QTSeg(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder = FPNEncoder(config.n, rng, config.in_channels)
        self.mlff = MLFF(config.n, rng) if config.use_mlff else None
        self.decoder = MQMDecoder(config, rng)

    def pyramid(self, image: Tensor) -> PyramidFeatures:
        return maybe_fuse(self.encoder(image), self.mlff, self.config.use_mlff)

    def forward(self, image: Tensor) -> Tensor:
        """``[B, C, H, W]`` image -> ``[B, N, H, W]`` raw logits."""
        squeeze = image.ndim == 3
        if squeeze:
            image = reshape(image, (1,) + image.shape)
        h, w = image.shape[2:]
        feats, tokens = self.decoder(self.pyramid(image))
        if feats.shape[2:] != (h // 2, w // 2):
            raise ShapeError(f"decoder features {feats.shape} are not at half input resolution")
        logits = predict_mask(feats, tokens, self.decoder.hypernet, (h, w))
        return reshape(logits, logits.shape[1:]) if squeeze else logits

    def predict(self, image: np.ndarray, batch_size: int = 8) -> np.ndarray:
        """Discrete class-index masks for ``[B, C, H, W]`` images (eval mode, no tape)."""
        was_training = self.training
        self.eval()
        try:
            out = []
            with no_grad():
                for i in range(0, len(image), batch_size):
                    logits = self.forward(Tensor(image[i:i + batch_size])).data
                    out.append(logits_to_mask(logits))
            return np.concatenate(out, axis=0)
        finally:
            self.train(was_training)


def logits_to_mask(logits: np.ndarray) -> np.ndarray:
    """``[B, N, H, W]`` logits -> ``[B, H, W]`` indices (0 = background).

    One class: sigmoid > 0.5, i.e. logit > 0. Several classes: argmax against
    an implicit zero-logit background channel.
    """
    if logits.shape[1] == 1:
        return (logits[:, 0] > 0).astype(np.int64)
    full = np.concatenate([np.zeros_like(logits[:, :1]), logits], axis=1)
    return full.argmax(axis=1)


def build_model(config: ModelConfig) -> QTSeg:
    return QTSeg(config)
