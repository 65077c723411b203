"""Attribute query network: learned queries pooled over image features."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .nn import Module, TransformerDecoderLayer
from .tensor import Tensor


def readout(probs):
    """Pseudo sentence s_j = 1 iff l_j > 0.5 (strict)."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return (data > 0.5).astype(np.int64)


def per_attribute_logits(responses, weight, bias):
    """w_j . r_j + b_j for every attribute; responses (B, M, d), weight (M, d)."""
    b = responses.shape[0]
    return T.reduce_sum(responses * T.expand(weight, b), axis=-1) + T.expand(bias, b)


@dataclass
class AqnOutput:
    responses: Tensor  # (B, M, d); None for the pooled-feature head
    probs: Tensor  # (B, M)
    pseudo_sentence: np.ndarray  # (B, M) ints in {0, 1}


class AttributeQueryNetwork(Module):
    """``n_layers`` decoder layers refine M queries; M independent sigmoid classifiers.

    ``n_layers == 0`` is the pooled-feature baseline: the spatial mean of X'
    goes straight to the classifiers.
    """

    def __init__(self, n_attributes, d, h, ffn_hidden, n_layers, rng):
        super().__init__()
        self.m, self.d, self.n_layers = n_attributes, d, n_layers
        if n_layers:
            self.queries = self.param("queries", (n_attributes, d), "normal", rng, sigma=0.02)
            self.layers = [self.child(f"layer{i}", TransformerDecoderLayer(d, h, ffn_hidden, rng))
                           for i in range(n_layers)]
        else:
            self.layers = []
        self.cls_w = self.param("cls_w", (n_attributes, d), "uniform_fanin", rng, fan_in=d)
        self.cls_b = self.param("cls_b", (n_attributes,), "zeros", rng)

    def __call__(self, features):
        b = features.batch
        if features.x_flat.shape[-1] != self.d:
            raise ShapeMismatch(f"feature width {features.x_flat.shape[-1]} != {self.d}")
        if not self.layers:
            pooled = T.reduce_mean(features.x_flat, axis=1)
            logits = T.add_bias(T.matmul(pooled, T.transpose(self.cls_w)), self.cls_b)
            probs = T.sigmoid(logits)
            return AqnOutput(None, probs, readout(probs))
        q = T.expand(self.queries, b)
        for layer in self.layers:
            q = layer(q, features.x_pos_added, features.x_flat)
        probs = T.sigmoid(per_attribute_logits(q, self.cls_w, self.cls_b))
        return AqnOutput(q, probs, readout(probs))

    def cross_attention_maps(self):
        """Per layer (B, h, M, HW) cross-attention weights from the last call."""
        return [layer.cross_attn.last_attn for layer in self.layers]


def aqn_forward(features, aqn):
    return aqn(features)
