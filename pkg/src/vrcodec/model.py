"""The conditional autoencoder with hyper-latent and autoregressive context model.

Data flow for one image ``x`` under lambda index ``l`` and bin size ``delta``::

    y = analysis(x, l)            z = Q_delta(y)
    v = hyper_analysis(y, l)      w = Q_delta(v)
    f = hyper_synthesis(w, l)                 # aligned with z
    (mu, sigma) = context(z_<i, f, l)         # masked conv + 1x1 fusion
    x_hat = synthesis([z, f], l)

Rates: z under the Gaussian bin masses, w under the factorized density.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .cond import CondConv2d, onehot_rows
from .conv import causal_mask
from .entropy import SIGMA_FLOOR, FactorizedDensity, GaussianParams, bits, gaussian_bin_prob
from .nn import GDN, Module
from .quantize import additive_noise, round_delta, universal_quantize
from .tensor import Tensor, add, as_tensor, concat, relu, softplus

QUANT_MODES = ("universal", "noise", "round")


@dataclass
class ArchitectureConfig:
    n_lambdas: int = 5
    image_channels: int = 3
    trunk_channels: int = 64
    latent_channels: int = 32
    hyper_channels: int = 64
    hyper_latent_channels: int = 16
    context_channels: int = 128
    encoder_kernels: tuple[int, ...] = (5, 5, 3, 3)
    encoder_strides: tuple[int, ...] = (2, 2, 1, 1)
    hyper_kernel: int = 5
    hyper_strides: tuple[int, ...] = (2, 2)
    context_kernel: int = 5
    density_filters: tuple[int, ...] = (3, 3, 3)
    gdn_conditioned: bool = False
    seed: int = 0

    def __post_init__(self):
        self.encoder_kernels = tuple(int(k) for k in self.encoder_kernels)
        self.encoder_strides = tuple(int(s) for s in self.encoder_strides)
        self.hyper_strides = tuple(int(s) for s in self.hyper_strides)
        self.density_filters = tuple(int(f) for f in self.density_filters)
        if len(self.encoder_kernels) != len(self.encoder_strides):
            raise ValueError("encoder_kernels and encoder_strides must have equal length")
        if self.context_kernel % 2 == 0:
            raise ValueError("context_kernel must be odd")
        if any(s not in (1, 2) for s in self.encoder_strides + self.hyper_strides):
            raise ValueError("strides must be 1 or 2")
        if self.n_lambdas < 1:
            raise ValueError("n_lambdas must be at least 1")

    @property
    def latent_factor(self) -> int:
        return math.prod(self.encoder_strides)

    @property
    def downsampling(self) -> int:
        """Total stride product; image sides must be multiples of this."""
        return self.latent_factor * math.prod(self.hyper_strides)

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            out[f.name] = str(value)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ArchitectureConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in data:
                continue
            raw = data[f.name]
            default = getattr(cls(), f.name)
            if isinstance(default, tuple):
                kwargs[f.name] = tuple(int(v) for v in str(raw).split(",") if v != "") if isinstance(raw, str) else tuple(raw)
            elif isinstance(default, bool):
                kwargs[f.name] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


@dataclass
class ForwardResult:
    x_hat: Tensor
    y: Tensor
    z: Tensor
    w: Tensor
    hyper: Tensor
    gaussian: GaussianParams
    p_z: Tensor
    p_w: Tensor
    bits_z: Tensor  # per image
    bits_w: Tensor

    @property
    def bits(self) -> Tensor:
        return add(self.bits_z, self.bits_w)


Quantizer = Callable[[Tensor, np.ndarray, np.random.Generator], Tensor]


class VariableRateModel(Module):
    def __init__(self, config: ArchitectureConfig | None = None):
        cfg = config if config is not None else ArchitectureConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        n = cfg.n_lambdas
        gdn_bank = n if cfg.gdn_conditioned else None
        depth = len(cfg.encoder_kernels)

        self.encoder = []
        self.encoder_norms = []
        cin = cfg.image_channels
        for i, (k, s) in enumerate(zip(cfg.encoder_kernels, cfg.encoder_strides)):
            cout = cfg.latent_channels if i == depth - 1 else cfg.trunk_channels
            self.encoder.append(CondConv2d(cin, cout, k, n, stride=s, padding=k // 2, rng=rng))
            if i < depth - 1:
                self.encoder_norms.append(GDN(cout, n_lambdas=gdn_bank))
            cin = cout

        self.decoder = []
        self.decoder_norms = []
        cin = cfg.latent_channels + cfg.hyper_channels
        for i, (k, s) in enumerate(zip(reversed(cfg.encoder_kernels), reversed(cfg.encoder_strides))):
            cout = cfg.image_channels if i == depth - 1 else cfg.trunk_channels
            self.decoder.append(
                CondConv2d(cin, cout, k, n, stride=s, padding=k // 2, transposed=s > 1, output_padding=s - 1, rng=rng)
            )
            if i < depth - 1:
                self.decoder_norms.append(GDN(cout, inverse=True, n_lambdas=gdn_bank))
            cin = cout

        hk = cfg.hyper_kernel
        self.hyper_encoder = []
        cin = cfg.latent_channels
        for i, s in enumerate(cfg.hyper_strides):
            cout = cfg.hyper_latent_channels if i == len(cfg.hyper_strides) - 1 else cfg.hyper_channels
            self.hyper_encoder.append(CondConv2d(cin, cout, hk, n, stride=s, padding=hk // 2, rng=rng))
            cin = cout
        self.hyper_decoder = []
        for s in reversed(cfg.hyper_strides):
            self.hyper_decoder.append(
                CondConv2d(cin, cfg.hyper_channels, hk, n, stride=s, padding=hk // 2,
                           transposed=s > 1, output_padding=s - 1, rng=rng)
            )
            cin = cfg.hyper_channels

        c = cfg.latent_channels
        self.context_conv = CondConv2d(c, 2 * c, cfg.context_kernel, n, mask_type="A", rng=rng)
        self.fusion = [
            CondConv2d(2 * c + cfg.hyper_channels, cfg.context_channels, 1, n, rng=rng),
            CondConv2d(cfg.context_channels, 2 * c, 1, n, rng=rng),
        ]
        self.density = FactorizedDensity(cfg.hyper_latent_channels, n, cfg.density_filters)

    # -- network pieces ------------------------------------------------------------
    def _onehot(self, lambda_index) -> np.ndarray:
        return onehot_rows(np.atleast_1d(lambda_index), self.config.n_lambdas, self.dtype)

    def _norm(self, layer: GDN, x: Tensor, onehot) -> Tensor:
        return layer(x, onehot if layer.n_lambdas is not None else None)

    def analysis(self, x: Tensor, onehot: np.ndarray) -> Tensor:
        h = as_tensor(x, self.encoder[0].kernel)
        for i, layer in enumerate(self.encoder):
            h = layer(h, onehot)
            if i < len(self.encoder_norms):
                h = self._norm(self.encoder_norms[i], h, onehot)
        return h

    def synthesis(self, z: Tensor, hyper: Tensor, onehot: np.ndarray) -> Tensor:
        h = concat([z, hyper], axis=1)
        for i, layer in enumerate(self.decoder):
            h = layer(h, onehot)
            if i < len(self.decoder_norms):
                h = self._norm(self.decoder_norms[i], h, onehot)
        return h

    def hyper_analysis(self, y: Tensor, onehot: np.ndarray) -> Tensor:
        h = y
        for i, layer in enumerate(self.hyper_encoder):
            h = layer(h, onehot)
            if i < len(self.hyper_encoder) - 1:
                h = relu(h)
        return h

    def hyper_synthesis(self, w: Tensor, onehot: np.ndarray) -> Tensor:
        h = as_tensor(w, self.encoder[0].kernel)
        for i, layer in enumerate(self.hyper_decoder):
            h = layer(h, onehot)
            if i < len(self.hyper_decoder) - 1:
                h = relu(h)
        return h

    def context_predict(self, z: Tensor, hyper: Tensor, onehot: np.ndarray) -> GaussianParams:
        """Teacher-forced (mu, sigma) for every z position from z_<i, hyper features and lambda."""
        z = as_tensor(z, self.encoder[0].kernel)
        ctx = self.context_conv(z, onehot)
        h = relu(self.fusion[0](concat([ctx, hyper], axis=1), onehot))
        out = self.fusion[1](h, onehot)
        c = self.config.latent_channels
        mu = out[:, :c]
        sigma = add(softplus(out[:, c:]), SIGMA_FLOOR)
        return GaussianParams(mu, sigma)

    # -- full pass -----------------------------------------------------------------
    def quantize(self, x: Tensor, delta: np.ndarray, rng, mode: str) -> Tensor:
        if mode == "universal":
            return universal_quantize(x, delta, rng)[0]
        if mode == "noise":
            return additive_noise(x, delta, rng)
        if mode == "round":
            return round_delta(x, delta)
        raise ValueError(f"unknown quantization mode {mode!r}; expected one of {QUANT_MODES}")

    def forward(
        self,
        x,
        lambda_index,
        delta,
        rng: np.random.Generator | None = None,
        mode: str = "universal",
        quantizer: Quantizer | None = None,
    ) -> ForwardResult:
        x = as_tensor(x, self.encoder[0].kernel)
        b = x.shape[0]
        lambda_index = np.broadcast_to(np.asarray(lambda_index, dtype=np.intp), (b,))
        delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), (b,))
        rng = rng if rng is not None else np.random.default_rng()
        onehot = self._onehot(lambda_index)

        def q(t):
            return quantizer(t, delta, rng) if quantizer is not None else self.quantize(t, delta, rng, mode)

        y = self.analysis(x, onehot)
        z = q(y)
        w = q(self.hyper_analysis(y, onehot))
        hyper = self.hyper_synthesis(w, onehot)
        gauss = self.context_predict(z, hyper, onehot)
        p_z = gaussian_bin_prob(z, gauss.mu, gauss.sigma, delta)
        p_w = self.density.bin_prob(w, lambda_index, delta)
        x_hat = self.synthesis(z, hyper, onehot)
        return ForwardResult(
            x_hat=x_hat, y=y, z=z, w=w, hyper=hyper, gaussian=gauss, p_z=p_z, p_w=p_w,
            bits_z=bits(p_z.reshape(b, -1), axis=1),
            bits_w=bits(p_w.reshape(b, -1), axis=1),
        )

    __call__ = forward


class ContextRunner:
    """Position-at-a-time evaluation of the context model for coding.

    Weights are folded with one lambda's scale and bias and held in float64.
    Encoder and decoder both go through :meth:`params_at`, so the tables they
    build agree bit for bit.
    """

    def __init__(self, model: VariableRateModel, lambda_index: int):
        onehot = model._onehot(lambda_index)[0].astype(np.float64)
        cfg = model.config
        self.channels = cfg.latent_channels
        k = cfg.context_kernel
        self.radius = k // 2
        taps = np.flatnonzero(causal_mask(k, k, "A").reshape(-1))
        self.di, self.dj = np.divmod(taps, k)

        def fold(layer: CondConv2d):
            s = np.logaddexp(0.0, onehot @ layer.u.data.astype(np.float64))
            b = onehot @ layer.v.data.astype(np.float64)
            return s, b

        w1 = model.context_conv.kernel.data.astype(np.float64)[:, :, self.di, self.dj]
        self.w1 = w1.reshape(w1.shape[0], -1)
        self.s1, self.b1 = fold(model.context_conv)
        self.w2 = model.fusion[0].kernel.data.astype(np.float64)[:, :, 0, 0]
        self.s2, self.b2 = fold(model.fusion[0])
        self.w3 = model.fusion[1].kernel.data.astype(np.float64)[:, :, 0, 0]
        self.s3, self.b3 = fold(model.fusion[1])

    def pad(self, z: np.ndarray) -> np.ndarray:
        r = self.radius
        return np.pad(np.asarray(z, dtype=np.float64), ((0, 0), (r, r), (r, r)))

    def params_at(self, zpad: np.ndarray, hyper: np.ndarray, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
        """(mu, sigma) for all channels at (i, j); only causal neighbours of ``zpad`` are read."""
        taps = zpad[:, i + self.di, j + self.dj].reshape(-1)
        h = self.s1 * (self.w1 @ taps) + self.b1
        h = np.concatenate([h, hyper[:, i, j]])
        h = np.maximum(self.s2 * (self.w2 @ h) + self.b2, 0.0)
        out = self.s3 * (self.w3 @ h) + self.b3
        c = self.channels
        return out[:c], np.logaddexp(0.0, out[c:]) + SIGMA_FLOOR
