"""The full conditional radiance model: encoder, aggregation and decoder."""
from __future__ import annotations

import torch
from torch import nn

from .diffcore import DTYPE, ParameterSet
from .encoder import SceneInputs, TraitGuidedEncoder
from .field import Aggregator, EncodingVolume, RadianceDecoder, aggregate

# dtype of the attention and 3D convolution passes; parameters stay float64 either way
PRECISIONS = {"float64": torch.float64, "float32": torch.float32}


class TraitNeRF(nn.Module):
    def __init__(self, n_views: int = 3, n_c1: int = 8, n_c2: int = 8, feature_hidden: int = 8, unet_mid: int = 32,
                 mlp_width: int = 64, mlp_layers: int = 4, pe_freqs: int = 4, use_tgt: bool = True,
                 precision: str = "float64"):
        super().__init__()
        compute = PRECISIONS[precision]
        self.encoder = TraitGuidedEncoder(n_c1, feature_hidden, use_tgt, compute)
        self.aggregator = Aggregator(2 * n_c1, unet_mid, n_c2, compute)
        self.decoder = RadianceDecoder(n_views, n_c2, mlp_width, mlp_layers, pe_freqs)
        # scale/shift aligning rendered depth to the pseudo-depth teacher
        self.align_scale = nn.Parameter(torch.ones((), dtype=DTYPE))
        self.align_shift = nn.Parameter(torch.zeros((), dtype=DTYPE))

    @classmethod
    def from_config(cls, cfg, seed: int | None = None) -> "TraitNeRF":
        """Deterministically initialised model; the global torch RNG is left untouched."""
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed if seed is None else seed)
            return cls(cfg.n_views_in, cfg.n_c1, cfg.n_c2, cfg.feature_hidden, cfg.unet_mid, cfg.mlp_width,
                       cfg.mlp_layers, cfg.pe_freqs, cfg.use_tgt, cfg.precision)

    def parameter_set(self) -> ParameterSet:
        return ParameterSet.from_module(self)

    def encode(self, inputs: SceneInputs) -> EncodingVolume:
        if len(inputs.images) != self.decoder.n_views:
            raise ValueError(f"model expects {self.decoder.n_views} source views, got {len(inputs.images)}")
        P = self.encoder(inputs)
        return aggregate(P, self.aggregator, inputs.reference, inputs.hypotheses)
