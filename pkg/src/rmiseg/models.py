"""End-to-end forward graphs for the two model variants.

The baseline encodes the whole expression into one sentence vector and fuses
it with the visual-spatial map once. The word-level variant advances a
convolutional multimodal LSTM grid after every word, feeding it the running
language state concatenated with the word embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .features import EncoderParams, fuse, spatial_coordinates, toy_visual_encoder
from .language import TokenSequence, embed, make_embedding_table
from .recurrent import GridState, LstmParams, mlstm_step, run_language_lstm
from .tensor import Tensor

VARIANTS = ("baseline", "rmi")


@dataclass(frozen=True)
class ModelConfig:
    """Dimension settings. Desk-scale defaults; paper-scale values are legal."""

    image_size: int = 64
    d_word: int = 32
    d_sent: int = 64
    d_image: int = 32
    cell_mlstm: int = 64
    fusion_width: int = 0  # 0 means "same as cell_mlstm"

    def __post_init__(self):
        if self.image_size % 8:
            raise ValueError(f"image_size {self.image_size} not divisible by 8")

    @property
    def grid(self) -> int:
        return self.image_size // 8

    @property
    def fusion(self) -> int:
        return self.fusion_width or self.cell_mlstm

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "d_word": self.d_word,
            "d_sent": self.d_sent,
            "d_image": self.d_image,
            "cell_mlstm": self.cell_mlstm,
            "fusion_width": self.fusion_width,
        }


@dataclass
class SegmentationLogits:
    """Pre-sigmoid scores and foreground probabilities on the feature grid."""

    logits: Tensor  # (H', W')
    probs: Tensor  # (H', W'), strictly inside (0, 1) for finite logits


def _image_tensor(image: np.ndarray) -> Tensor:
    # Inputs arrive in [0, 1]; center them so zero-init layers see zero-mean data.
    return Tensor(np.asarray(image, dtype=np.float64) - 0.5)


def _classify(grid_features: Tensor, weight: Tensor, bias: Tensor) -> SegmentationLogits:
    height, width, _ = grid_features.shape
    logits = T.reshape(T.conv1x1(grid_features, weight, bias), (height, width))
    return SegmentationLogits(logits=logits, probs=T.sigmoid(logits))


class BaselineModel:
    """Sentence-to-image scheme: fuse h_T with the visual map once."""

    variant = "baseline"

    def __init__(self, config: ModelConfig, vocab_size: int, rng: np.random.Generator):
        self.config = config
        self.vocab_size = vocab_size
        cfg = config
        self.embedding = make_embedding_table(vocab_size, cfg.d_word, rng)
        self.language_lstm = LstmParams.init(cfg.d_word, cfg.d_sent, rng)
        fused_channels = cfg.d_sent + cfg.d_image + 8
        s1 = 1.0 / np.sqrt(fused_channels)
        self.fusion1_w = Tensor(rng.uniform(-s1, s1, size=(cfg.fusion, fused_channels)), requires_grad=True)
        self.fusion1_b = Tensor(np.zeros(cfg.fusion), requires_grad=True)
        s2 = 1.0 / np.sqrt(cfg.fusion)
        self.fusion2_w = Tensor(rng.uniform(-s2, s2, size=(cfg.fusion, cfg.fusion)), requires_grad=True)
        self.fusion2_b = Tensor(np.zeros(cfg.fusion), requires_grad=True)
        self.classifier_w = Tensor(rng.uniform(-s2, s2, size=(1, cfg.fusion)), requires_grad=True)
        self.classifier_b = Tensor(np.zeros(1), requires_grad=True)
        self.encoder = EncoderParams.init(cfg.d_image, rng)
        self._coords = spatial_coordinates(cfg.grid, cfg.grid)

    def params(self) -> dict:
        named = {
            "embedding": self.embedding,
            "language_lstm.M": self.language_lstm.M,
            "language_lstm.bias": self.language_lstm.bias,
            "fusion1.weight": self.fusion1_w,
            "fusion1.bias": self.fusion1_b,
            "fusion2.weight": self.fusion2_w,
            "fusion2.bias": self.fusion2_b,
            "classifier.weight": self.classifier_w,
            "classifier.bias": self.classifier_b,
        }
        named.update(self.encoder.named())
        return named

    def set_params(self, named: dict) -> None:
        self.embedding = named["embedding"]
        self.language_lstm = LstmParams(
            M=named["language_lstm.M"],
            bias=named["language_lstm.bias"],
            n=self.config.d_sent,
            d_in=self.config.d_word,
        )
        self.fusion1_w = named["fusion1.weight"]
        self.fusion1_b = named["fusion1.bias"]
        self.fusion2_w = named["fusion2.weight"]
        self.fusion2_b = named["fusion2.bias"]
        self.classifier_w = named["classifier.weight"]
        self.classifier_b = named["classifier.bias"]
        self.encoder = EncoderParams.from_named(named)

    def visual_map(self, image: np.ndarray) -> Tensor:
        return fuse(toy_visual_encoder(_image_tensor(image), self.encoder), self._coords)

    def fuse_sentence(self, sentence: Tensor, visual: Tensor) -> SegmentationLogits:
        """Everything downstream of h_T: the only language input is that vector."""
        grid = self.config.grid
        feats = T.concat([T.tile_to_grid(sentence, grid, grid), visual], axis=2)
        x = T.relu(T.conv1x1(feats, self.fusion1_w, self.fusion1_b))
        x = T.relu(T.conv1x1(x, self.fusion2_w, self.fusion2_b))
        return _classify(x, self.classifier_w, self.classifier_b)

    def forward(self, image: np.ndarray, seq: TokenSequence) -> SegmentationLogits:
        states = run_language_lstm(embed(seq, self.embedding), self.language_lstm)
        return self.fuse_sentence(states[-1].h, self.visual_map(image))


class RmiModel:
    """Word-to-image scheme: a two-layer recurrence where the upper layer is
    a convolutional multimodal LSTM advanced once per word."""

    variant = "rmi"

    def __init__(self, config: ModelConfig, vocab_size: int, rng: np.random.Generator):
        self.config = config
        self.vocab_size = vocab_size
        cfg = config
        self.embedding = make_embedding_table(vocab_size, cfg.d_word, rng)
        self.language_lstm = LstmParams.init(cfg.d_word, cfg.d_sent, rng)
        d_language = cfg.d_sent + cfg.d_word  # l_t = [h_t; w_t]
        self.mlstm = LstmParams.init(d_language + cfg.d_image + 8, cfg.cell_mlstm, rng)
        s = 1.0 / np.sqrt(cfg.cell_mlstm)
        self.classifier_w = Tensor(rng.uniform(-s, s, size=(1, cfg.cell_mlstm)), requires_grad=True)
        self.classifier_b = Tensor(np.zeros(1), requires_grad=True)
        self.encoder = EncoderParams.init(cfg.d_image, rng)
        self._coords = spatial_coordinates(cfg.grid, cfg.grid)

    def params(self) -> dict:
        named = {
            "embedding": self.embedding,
            "language_lstm.M": self.language_lstm.M,
            "language_lstm.bias": self.language_lstm.bias,
            "mlstm.M": self.mlstm.M,
            "mlstm.bias": self.mlstm.bias,
            "classifier.weight": self.classifier_w,
            "classifier.bias": self.classifier_b,
        }
        named.update(self.encoder.named())
        return named

    def set_params(self, named: dict) -> None:
        cfg = self.config
        self.embedding = named["embedding"]
        self.language_lstm = LstmParams(
            M=named["language_lstm.M"],
            bias=named["language_lstm.bias"],
            n=cfg.d_sent,
            d_in=cfg.d_word,
        )
        self.mlstm = LstmParams(
            M=named["mlstm.M"],
            bias=named["mlstm.bias"],
            n=cfg.cell_mlstm,
            d_in=(cfg.d_sent + cfg.d_word) + cfg.d_image + 8,
        )
        self.classifier_w = named["classifier.weight"]
        self.classifier_b = named["classifier.bias"]
        self.encoder = EncoderParams.from_named(named)

    def visual_map(self, image: np.ndarray) -> Tensor:
        return fuse(toy_visual_encoder(_image_tensor(image), self.encoder), self._coords)

    def forward_steps(self, image: np.ndarray, seq: TokenSequence):
        """All T grid states plus the final classification.

        The recurrence is causal, so the states for a prefix of the
        expression are exactly the prefix of these states.
        """
        cfg = self.config
        visual = self.visual_map(image)
        embeddings = embed(seq, self.embedding)
        lower = run_language_lstm(embeddings, self.language_lstm)
        grid = GridState.zeros(cfg.grid, cfg.grid, cfg.cell_mlstm)
        grids = []
        for state, emb in zip(lower, embeddings):
            l_t = T.concat([state.h, emb], axis=0)
            grid = mlstm_step(l_t, visual, grid, self.mlstm)
            grids.append(grid)
        return grids, _classify(grid.h, self.classifier_w, self.classifier_b)

    def forward(self, image: np.ndarray, seq: TokenSequence) -> SegmentationLogits:
        _, seg = self.forward_steps(image, seq)
        return seg


def build_model(variant: str, config: ModelConfig, vocab_size: int, rng: np.random.Generator):
    if variant == "baseline":
        return BaselineModel(config, vocab_size, rng)
    if variant == "rmi":
        return RmiModel(config, vocab_size, rng)
    raise ValueError(f"unknown variant {variant!r} (expected one of {VARIANTS})")


def predict_mask(seg: SegmentationLogits, height: int, width: int) -> np.ndarray:
    """Upsample the probability map bilinearly and threshold at 0.5.

    Ties go to foreground. Returns a boolean (height, width) mask.
    """
    h, w = seg.probs.shape
    if height % h or width % w:
        raise ValueError(f"target {(height, width)} is not a multiple of the grid {(h, w)}")
    probs = T.reshape(seg.probs, (h, w, 1))
    up = T.bilinear_resize(probs, height, width)
    return up.data.reshape(height, width) >= 0.5


def response_map(grid: GridState, height: int, width: int) -> Tensor:
    """Mean over the hidden channels, upsampled to (height, width).

    The per-word sequence of these maps shows how the model's belief about
    the referred region evolves while it reads.
    """
    h, w, _ = grid.h.shape
    pooled = T.reshape(T.channel_mean(grid.h), (h, w, 1))
    return T.reshape(T.bilinear_resize(pooled, height, width), (height, width))


def save_grayscale_map(path, values: np.ndarray) -> None:
    """Write a real-valued map as 8-bit PGM, rescaled to [0, 255].

    The original min/max go to a ``<path>.txt`` sidecar so the scaling is
    invertible. A constant map writes as all zeros.
    """
    from . import netpbm

    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        scaled = np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        scaled = np.zeros(values.shape, dtype=np.uint8)
    netpbm.write_pgm(path, scaled)
    with open(f"{path}.txt", "w", encoding="ascii") as fh:
        fh.write(f"min {lo!r}\nmax {hi!r}\n")
