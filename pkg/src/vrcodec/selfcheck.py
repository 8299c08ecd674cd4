"""A fast invariant suite runnable without pytest (``vrcodec selfcheck``)."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .codec import compress, decode_latents, encode_latents
from .conv import conv2d, conv_transpose2d, gdn
from .entropy import build_cdf_table, gaussian_bin_prob
from .gradcheck import finite_difference_check
from .metrics import ms_ssim, psnr
from .model import ArchitectureConfig, VariableRateModel
from .rangecoder import ideal_code_length, rc_decode, rc_encode
from .tensor import Tensor


def _coder_roundtrip() -> bool:
    rng = np.random.default_rng(1)
    tables = []
    for _ in range(16):
        n = int(rng.integers(2, 40))
        tables.append(build_cdf_table(rng.dirichlet(np.full(n, 0.3))))
    choice = rng.integers(len(tables), size=5000)
    seq = [tables[k] for k in choice]
    symbols = [int(rng.choice(t.n_symbols, p=t.probabilities())) for t in seq]
    stream = rc_encode(symbols, seq)
    return rc_decode(stream, seq, len(symbols)) == symbols and \
        stream.bit_length <= ideal_code_length(symbols, seq) + 32


def _gradients() -> bool:
    rng = np.random.default_rng(2)

    def t(*shape, positive=False):
        data = rng.standard_normal(shape)
        return Tensor(np.abs(data) + 0.5 if positive else data, requires_grad=True)

    checks = [
        (lambda x, k: conv2d(x, k, stride=2, padding=1), [t(1, 2, 5, 5), t(3, 2, 3, 3)]),
        (lambda x, k: conv_transpose2d(x, k, stride=2, padding=1, output_padding=1), [t(1, 2, 3, 3), t(2, 3, 3, 3)]),
        (lambda x, b, g: gdn(x, b, g), [t(1, 3, 4, 4), t(3, positive=True), t(3, 3, positive=True)]),
        (lambda z, m, s: gaussian_bin_prob(z, m, s, 0.7), [t(12), t(12), t(12, positive=True)]),
    ]
    return all(finite_difference_check(fn, inputs) <= 1e-4 for fn, inputs in checks)


def _codec_roundtrip() -> bool:
    model = VariableRateModel(ArchitectureConfig(n_lambdas=2, trunk_channels=16, latent_channels=8,
                                                 hyper_channels=16, hyper_latent_channels=4, context_channels=16))
    image = np.random.default_rng(3).random((3, 48, 40))
    for lam, delta in ((0, 0.5), (1, 2.0)):
        latents, _ = encode_latents(image, model, lam, delta)
        decoded, _ = decode_latents(compress(image, model, lam, delta).to_bytes(), model)
        if decoded != latents:
            return False
    return True


def _metrics() -> bool:
    a = np.random.default_rng(4).random((3, 32, 32))
    return psnr(a, a) == float("inf") and ms_ssim(a, a) == 1.0 and abs(psnr(a * 0, a * 0 + 0.1) - 20.0) < 1e-9


CHECKS: dict[str, Callable[[], bool]] = {
    "range coder round trip and length bound": _coder_roundtrip,
    "finite-difference gradients (64-bit)": _gradients,
    "codec latent round trip": _codec_roundtrip,
    "metric identities": _metrics,
}


def run_selfcheck(verbose: bool = True) -> bool:
    ok = True
    for name, check in CHECKS.items():
        start = time.perf_counter()
        try:
            passed = bool(check())
            detail = ""
        except Exception as exc:  # report and keep going
            passed, detail = False, f" ({type(exc).__name__}: {exc})"
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name}  [{time.perf_counter() - start:.2f}s]{detail}")
    return ok
