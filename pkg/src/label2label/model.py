"""The full pipeline: backbone -> AQN -> (masked) pseudo sentence -> IC-MLM."""

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .aqn import AttributeQueryNetwork
from .backbone import Backbone
from .icmlm import ICMLM, STRATEGIES, mask_sentence
from .nn import Module
from .objectives import WeightScheme, total_loss

MODES = ("fc_head", "aqn_only", "label2label", "mlm_no_image", "two_stage")


@dataclass
class ModelConfig:
    n_attributes: int = 8
    d: int = 64
    heads: int = 4
    ffn_hidden: int = 128
    aqn_layers: int = 1
    mlm_layers: int = 2
    mask_strategy: str = "specific"
    mode: str = "label2label"
    in_channels: int = 1
    conv_channels: tuple = (16, 32)
    pos_embedding: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mask_strategy not in STRATEGIES:
            raise ValueError(f"unknown mask strategy {self.mask_strategy!r}")
        if self.d % self.heads:
            raise ValueError("d must be divisible by the head count")
        if self.mode != "fc_head" and self.aqn_layers < 1:
            raise ValueError("AQN needs L >= 1 outside fc_head mode")
        if self.uses_mlm and self.mlm_layers < 1:
            raise ValueError("IC-MLM needs D >= 1")
        self.conv_channels = tuple(int(c) for c in self.conv_channels)

    @property
    def uses_mlm(self):
        return self.mode in ("label2label", "mlm_no_image", "two_stage")

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d


@dataclass
class ForwardResult:
    features: object
    aqn: object
    words: np.ndarray
    mlm: object

    @property
    def final_probs(self):
        return self.mlm.probs if self.mlm is not None else self.aqn.probs


class Label2Label(Module):
    def __init__(self, config, rng):
        super().__init__()
        c = self.config = config
        self.backbone = self.child("backbone", Backbone(rng, c.d, c.in_channels, c.conv_channels, c.pos_embedding))
        n_layers = 0 if c.mode == "fc_head" else c.aqn_layers
        self.aqn = self.child("aqn", AttributeQueryNetwork(c.n_attributes, c.d, c.heads, c.ffn_hidden, n_layers, rng))
        self.mlm = None
        if c.uses_mlm:
            self.mlm = self.child("mlm", ICMLM(c.n_attributes, c.d, c.heads, c.ffn_hidden, c.mlm_layers, rng,
                                               strategy=c.mask_strategy,
                                               image_conditioned=c.mode != "mlm_no_image"))

    def frozen_prefixes(self):
        """Parameters excluded from optimisation in this mode."""
        return ("backbone.", "aqn.") if self.config.mode == "two_stage" else ()

    def trainable_parameters(self):
        frozen = self.frozen_prefixes()
        return [t for name, t in self.named_parameters() if not name.startswith(frozen)]

    def forward(self, images, alpha=0.0, rng=None):
        """Run the pipeline on a (B, H0, W0, C) batch.

        Masking is applied only when ``alpha > 0``; it draws from ``rng``.
        """
        feats = self.backbone(images)
        aqn_out = self.aqn(feats)
        if self.mlm is None:
            return ForwardResult(feats, aqn_out, None, None)
        if alpha > 0:
            words, _ = mask_sentence(aqn_out.pseudo_sentence, alpha, rng)
        else:
            words = aqn_out.pseudo_sentence
        emb = self.mlm.embed(words)
        out = self.mlm(emb, feats if self.mlm.image_conditioned else None)
        return ForwardResult(feats, aqn_out, words, out)

    def loss(self, images, labels, lam=1.0, alpha=0.0, rng=None, scheme=None):
        res = self.forward(images, alpha, rng)
        p = res.mlm.probs if res.mlm is not None else None
        total, l_aqn, l_mlm = total_loss(res.aqn.probs, p, labels, lam, scheme or WeightScheme())
        return total, l_aqn, l_mlm, res

    def predict_proba(self, images, batch_size=256):
        """Final probabilities (IC-MLM output when present, else AQN) without masking."""
        out = []
        with T.no_grad():
            for s in range(0, len(images), batch_size):
                out.append(self.forward(images[s:s + batch_size]).final_probs.data)
        return np.concatenate(out, axis=0)

    def predict_all(self, images, batch_size=256):
        """(aqn_probs, final_probs) without masking."""
        la, lf = [], []
        with T.no_grad():
            for s in range(0, len(images), batch_size):
                r = self.forward(images[s:s + batch_size])
                la.append(r.aqn.probs.data)
                lf.append(r.final_probs.data)
        return np.concatenate(la), np.concatenate(lf)
