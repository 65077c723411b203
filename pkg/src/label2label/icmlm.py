"""Image-conditioned masked language model over label sentences."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .aqn import per_attribute_logits
from .errors import ShapeMismatch, StrategyMismatch
from .nn import Module, TransformerDecoderLayer
from .tensor import Tensor

MASK = 2
STRATEGIES = ("specific", "agnostic", "zero")
_MASK_ROWS = {"specific": lambda m: m, "agnostic": lambda m: 1, "zero": lambda m: 0}


def mask_sentence(s, alpha, rng):
    """Replace each word by MASK independently with probability ``alpha``.

    ``s`` is (M,) or (B, M). Draws are taken in row-major position order.
    Returns (words, mask) where mask marks the replaced positions.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"mask ratio {alpha} outside [0, 1]")
    s = np.asarray(s, dtype=np.int64)
    if alpha == 0.0:
        mask = np.zeros(s.shape, dtype=bool)
    else:
        mask = rng.random(s.shape) < alpha
    return np.where(mask, MASK, s), mask


@dataclass
class IcmlmOutput:
    responses: Tensor  # (B, M, d)
    probs: Tensor  # (B, M)


class WordVocab(Module):
    """Token table with rows 2j / 2j+1 for attribute j = 0 / 1, then mask rows."""

    def __init__(self, n_attributes, d, strategy, rng):
        super().__init__()
        if strategy not in STRATEGIES:
            raise StrategyMismatch(f"unknown mask strategy {strategy!r}")
        self.m, self.strategy = n_attributes, strategy
        self.n_mask_rows = _MASK_ROWS[strategy](n_attributes)
        self.table = self.param("table", (2 * n_attributes + self.n_mask_rows, d), "normal", rng, sigma=0.02)

    @property
    def size(self):
        return self.table.shape[0]

    def token_ids(self, words):
        words = np.asarray(words, dtype=np.int64)
        if words.shape[-1] != self.m:
            raise ShapeMismatch(f"sentence length {words.shape[-1]} != {self.m}")
        j = np.arange(self.m)
        masked = words == MASK
        ids = 2 * j + np.where(masked, 0, words)
        if self.strategy == "specific":
            ids = np.where(masked, 2 * self.m + j, ids)
        elif self.strategy == "agnostic":
            ids = np.where(masked, 2 * self.m, ids)
        return ids, masked


def embed_words(words, vocab, strategy=None):
    """Token embeddings (B, M, d) for sentences over {0, 1, MASK}; no positional term."""
    if strategy is not None and strategy != vocab.strategy:
        raise StrategyMismatch(f"vocabulary built for {vocab.strategy!r}, asked for {strategy!r}")
    words = np.asarray(words, dtype=np.int64)
    if words.ndim == 1:
        words = words[None, :]
    ids, masked = vocab.token_ids(words)
    emb = T.gather_rows(vocab.table, ids)
    if vocab.strategy == "zero" and masked.any():
        keep = np.broadcast_to((~masked)[..., None], emb.shape).astype(np.float64)
        emb = emb * Tensor(keep)
    return emb


class ICMLM(Module):
    """D decoder layers over word tokens and per-attribute classifiers.

    ``image_conditioned=False`` drops the cross-attention sublayer, giving a
    plain masked language model over the sentence alone.
    """

    def __init__(self, n_attributes, d, h, ffn_hidden, n_layers, rng,
                 strategy="specific", image_conditioned=True):
        super().__init__()
        if n_layers < 1:
            raise ValueError("IC-MLM needs at least one layer")
        self.m, self.d = n_attributes, d
        self.image_conditioned = image_conditioned
        self.vocab = self.child("vocab", WordVocab(n_attributes, d, strategy, rng))
        self.layers = [self.child(f"layer{i}", TransformerDecoderLayer(d, h, ffn_hidden, rng, cross=image_conditioned))
                       for i in range(n_layers)]
        self.cls_w = self.param("cls_w", (n_attributes, d), "uniform_fanin", rng, fan_in=d)
        self.cls_b = self.param("cls_b", (n_attributes,), "zeros", rng)

    def embed(self, words):
        return embed_words(words, self.vocab)

    def __call__(self, embeds, features=None):
        if embeds.shape[-1] != self.d:
            raise ShapeMismatch(f"embedding width {embeds.shape[-1]} != {self.d}")
        x = embeds
        for layer in self.layers:
            if self.image_conditioned:
                x = layer(x, features.x_pos_added, features.x_flat)
            else:
                x = layer(x)
        probs = T.sigmoid(per_attribute_logits(x, self.cls_w, self.cls_b))
        return IcmlmOutput(x, probs)

    def self_attention_maps(self):
        return [layer.self_attn.last_attn for layer in self.layers]

    def cross_attention_maps(self):
        if not self.image_conditioned:
            return []
        return [layer.cross_attn.last_attn for layer in self.layers]


def icmlm_forward(embeds, features, icmlm):
    return icmlm(embeds, features)


def mlm_no_image_forward(embeds, icmlm):
    if icmlm.image_conditioned:
        raise ValueError("model was built with cross-attention")
    return icmlm(embeds)


def infer(aqn_out, features, icmlm):
    """Feed the unmasked pseudo sentence through the IC-MLM; no randomness."""
    emb = icmlm.embed(aqn_out.pseudo_sentence)
    return icmlm(emb, features)
