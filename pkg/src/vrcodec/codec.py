"""Image compression, decompression, the VRC1 container and target-rate search.

Compression runs the encoder with deterministic rounding at the chosen bin
size and range-codes the hyper-latent ``w`` (factorized tables) followed by
``z`` (context-model tables, raster order over positions, all channels at a
position together).  The decoder mirrors this: ``w`` first, hyper features,
then ``z`` one position at a time.
"""

from __future__ import annotations

import bisect
import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .entropy import P_FLOOR, SymbolTables, factorized_tables, gaussian_bin_prob_np, gaussian_tables
from .model import ContextRunner, VariableRateModel
from .quantize import quantize_symbols
from .rangecoder import TOTAL, RangeDecoder, RangeEncoder, StreamExhausted
from .tensor import Tensor, no_grad

MAGIC = b"VRC1"
VERSION = 1
_HEADER = struct.Struct("<4sBHHBIII")
_CRC = struct.Struct("<I")
MAX_SIDE = 0xFFFF
RAW_BITS = 16
_RAW_LIMIT = 1 << (RAW_BITS - 1)


class StreamError(ValueError):
    """Malformed container: bad magic, version, or truncated framing."""


class ChecksumError(StreamError):
    """CRC-32 over header and payloads does not match."""


def as_float32(delta: float) -> float:
    """The bin size as it is stored in (and recovered from) the header."""
    return float(np.float32(delta))


@dataclass
class CompressedImage:
    width: int
    height: int
    lambda_index: int
    delta: float
    w_payload: bytes
    z_payload: bytes

    def header_bytes(self) -> bytes:
        if not (0 < self.width <= MAX_SIDE and 0 < self.height <= MAX_SIDE):
            raise ValueError(f"image dimensions {self.width}x{self.height} exceed the 16-bit header fields")
        if not 0 <= self.lambda_index < 256:
            raise ValueError("lambda_index must fit in one byte")
        delta_bits = struct.unpack("<I", struct.pack("<f", self.delta))[0]
        return _HEADER.pack(MAGIC, VERSION, self.width, self.height, self.lambda_index,
                            delta_bits, len(self.w_payload), len(self.z_payload))

    def to_bytes(self) -> bytes:
        body = self.header_bytes() + self.w_payload + self.z_payload
        return body + _CRC.pack(zlib.crc32(body))

    @property
    def bit_length(self) -> int:
        return 8 * (_HEADER.size + len(self.w_payload) + len(self.z_payload) + _CRC.size)

    @property
    def payload_bits(self) -> int:
        return 8 * (len(self.w_payload) + len(self.z_payload))

    @property
    def bpp(self) -> float:
        return self.bit_length / (self.width * self.height)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedImage":
        data = bytes(data)
        if len(data) < _HEADER.size + _CRC.size:
            raise StreamError(f"stream of {len(data)} bytes is shorter than the container framing")
        magic, version, width, height, lam, delta_bits, w_len, z_len = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise StreamError(f"bad magic {magic!r}")
        expected = _HEADER.size + w_len + z_len + _CRC.size
        if len(data) != expected:
            raise StreamError(f"stream length {len(data)} does not match header ({expected})")
        body, (crc,) = data[:-_CRC.size], _CRC.unpack_from(data, len(data) - _CRC.size)
        if zlib.crc32(body) != crc:
            raise ChecksumError("CRC-32 mismatch: stream is corrupted or was altered")
        if version != VERSION:
            raise StreamError(f"unsupported container version {version}")
        delta = struct.unpack("<f", struct.pack("<I", delta_bits))[0]
        start = _HEADER.size
        return cls(width, height, lam, delta, data[start:start + w_len], data[start + w_len:start + w_len + z_len])


@dataclass
class LatentPair:
    """Integer bin indices; the latent values are ``symbols * delta``."""

    z_symbols: np.ndarray  # (Cz, h, w)
    w_symbols: np.ndarray  # (Cw, h', w')
    delta: float

    @property
    def z(self) -> np.ndarray:
        return self.z_symbols * self.delta

    @property
    def w(self) -> np.ndarray:
        return self.w_symbols * self.delta

    def __eq__(self, other) -> bool:
        return (isinstance(other, LatentPair) and self.delta == other.delta
                and np.array_equal(self.z_symbols, other.z_symbols)
                and np.array_equal(self.w_symbols, other.w_symbols))


@dataclass
class RDPoint:
    bpp: float
    psnr: float
    ms_ssim: float
    lambda_index: int
    delta: float


# -- padding -----------------------------------------------------------------------


def pad_unpad(image: np.ndarray, factor: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad ``(C, H, W)`` on the bottom/right to multiples of ``factor``.

    Returns the padded image and the original ``(H, W)`` for cropping.
    """
    image = np.asarray(image)
    h, w = image.shape[-2:]
    ph, pw = -h % factor, -w % factor
    if ph == 0 and pw == 0:
        return image, (h, w)
    widths = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    # numpy reflects repeatedly for large pads but needs at least two samples
    mode = "reflect" if min(h, w) > 1 else "edge"
    return np.pad(image, widths, mode=mode), (h, w)


def crop(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return image[..., : size[0], : size[1]]


# -- symbol coding with escapes -----------------------------------------------------


def _encode_raw(enc: RangeEncoder, symbol: int) -> None:
    if not -_RAW_LIMIT <= symbol < _RAW_LIMIT:
        raise ValueError(f"latent symbol {symbol} outside the escape range [-{_RAW_LIMIT}, {_RAW_LIMIT})")
    v = symbol & 0xFFFF
    enc.encode((v >> 8) << 8, 256)
    enc.encode((v & 0xFF) << 8, 256)


def _decode_raw(dec: RangeDecoder) -> int:
    v = 0
    for _ in range(2):
        b = dec.target() >> 8
        dec.consume(b << 8, 256)
        v = (v << 8) | b
    return v - 0x10000 if v >= _RAW_LIMIT else v


def _encode_with_table(enc: RangeEncoder, row: list, offset: int, size: int, symbol: int) -> None:
    j = symbol - offset
    if 0 <= j < size:
        enc.encode(row[j], row[j + 1] - row[j])
    else:
        enc.encode(row[size], row[size + 1] - row[size])
        _encode_raw(enc, symbol)


def _decode_with_table(dec: RangeDecoder, row: list, offset: int, size: int) -> int:
    t = dec.target()
    j = bisect.bisect_right(row, t) - 1
    dec.consume(row[j], row[j + 1] - row[j])
    if j == size:
        return _decode_raw(dec)
    return offset + j


def _table_lists(tables: SymbolTables):
    return tables.cumulative.tolist(), tables.offset.tolist(), tables.size.tolist()


# -- model-side helpers ---------------------------------------------------------


def _hyper_features(model: VariableRateModel, w_values: np.ndarray, lambda_index: int) -> np.ndarray:
    with no_grad():
        f = model.hyper_synthesis(Tensor(w_values[None].astype(model.dtype)), model._onehot(lambda_index))
    return f.data[0].astype(np.float64)


def _context_params(runner: ContextRunner, z_values: np.ndarray, hyper: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(mu, sigma) of shape (H, W, C) via the per-position routine the decoder uses."""
    _, h, w = z_values.shape
    zpad = runner.pad(z_values)
    mu = np.empty((h, w, runner.channels))
    sigma = np.empty_like(mu)
    for i in range(h):
        for j in range(w):
            mu[i, j], sigma[i, j] = runner.params_at(zpad, hyper, i, j)
    return mu, sigma


def _check_ctx(model: VariableRateModel, lambda_index: int, delta: float) -> None:
    if not 0 <= lambda_index < model.config.n_lambdas:
        raise ValueError(f"lambda_index {lambda_index} out of range for {model.config.n_lambdas} lambdas")
    if not delta > 0 or not math.isfinite(delta):
        raise ValueError(f"bin size must be positive and finite, got {delta}")


def _prepare(image) -> np.ndarray:
    x = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError("compress takes one image at a time")
        x = x[0]
    if x.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {x.shape}")
    return x


def encode_latents(image, model: VariableRateModel, lambda_index: int, delta: float) -> tuple[LatentPair, tuple[int, int]]:
    """Deterministically quantized latents for ``image`` (padded as needed)."""
    delta = as_float32(delta)
    _check_ctx(model, lambda_index, delta)
    x = _prepare(image)
    h, w = x.shape[-2:]
    if h > MAX_SIDE or w > MAX_SIDE:
        raise ValueError(f"image dimensions {w}x{h} exceed {MAX_SIDE}")
    padded, size = pad_unpad(x, model.config.downsampling)
    onehot = model._onehot(lambda_index)
    with no_grad():
        y = model.analysis(Tensor(padded[None].astype(model.dtype)), onehot)
        v = model.hyper_analysis(y, onehot)
    latents = LatentPair(quantize_symbols(y.data[0], delta), quantize_symbols(v.data[0], delta), delta)
    return latents, size


def compress(image, model: VariableRateModel, lambda_index: int, delta: float) -> CompressedImage:
    latents, (h, w) = encode_latents(image, model, lambda_index, delta)
    delta = latents.delta

    enc = RangeEncoder()
    tables = factorized_tables(model.density, lambda_index, delta)
    rows, offs, sizes = _table_lists(tables)
    for c, channel in enumerate(latents.w_symbols):
        for s in channel.reshape(-1).tolist():
            _encode_with_table(enc, rows[c], offs[c], sizes[c], s)
    w_payload = enc.finish()

    hyper = _hyper_features(model, latents.w, lambda_index)
    runner = ContextRunner(model, lambda_index)
    mu, sigma = _context_params(runner, latents.z, hyper)
    tables = gaussian_tables(mu.reshape(-1), sigma.reshape(-1), delta)
    rows, offs, sizes = _table_lists(tables)
    symbols = latents.z_symbols.transpose(1, 2, 0).reshape(-1).tolist()
    enc = RangeEncoder()
    for k, s in enumerate(symbols):
        _encode_with_table(enc, rows[k], offs[k], sizes[k], s)
    z_payload = enc.finish()
    return CompressedImage(w, h, lambda_index, delta, w_payload, z_payload)


def _latent_shapes(model: VariableRateModel, height: int, width: int) -> tuple[tuple, tuple]:
    cfg = model.config
    f = cfg.downsampling
    ph, pw = -(-height // f) * f, -(-width // f) * f
    zf = cfg.latent_factor
    return (cfg.latent_channels, ph // zf, pw // zf), (cfg.hyper_latent_channels, ph // f, pw // f)


def decode_latents(stream: CompressedImage | bytes, model: VariableRateModel) -> tuple[LatentPair, np.ndarray]:
    """Recover ``(latents, hyper_features)`` from a stream; raises on corruption."""
    if not isinstance(stream, CompressedImage):
        stream = CompressedImage.from_bytes(stream)
    lam, delta = stream.lambda_index, stream.delta
    _check_ctx(model, lam, delta)
    z_shape, w_shape = _latent_shapes(model, stream.height, stream.width)

    dec = RangeDecoder(stream.w_payload)
    rows, offs, sizes = _table_lists(factorized_tables(model.density, lam, delta))
    n = w_shape[1] * w_shape[2]
    w_sym = np.array([[_decode_with_table(dec, rows[c], offs[c], sizes[c]) for _ in range(n)]
                      for c in range(w_shape[0])], dtype=np.int64).reshape(w_shape)
    dec.finish()

    hyper = _hyper_features(model, w_sym * delta, lam)
    runner = ContextRunner(model, lam)
    c, h, w = z_shape
    z_sym = np.zeros((h, w, c), dtype=np.int64)
    zpad = runner.pad(np.zeros(z_shape))
    r = runner.radius
    dec = RangeDecoder(stream.z_payload)
    for i in range(h):
        for j in range(w):
            mu, sigma = runner.params_at(zpad, hyper, i, j)
            rows, offs, sizes = _table_lists(gaussian_tables(mu, sigma, delta))
            for k in range(c):
                z_sym[i, j, k] = _decode_with_table(dec, rows[k], offs[k], sizes[k])
            zpad[:, i + r, j + r] = z_sym[i, j] * delta
    dec.finish()
    return LatentPair(z_sym.transpose(2, 0, 1).copy(), w_sym, delta), hyper


def reconstruct(model: VariableRateModel, latents: LatentPair, hyper: np.ndarray, lambda_index: int,
                size: tuple[int, int]) -> np.ndarray:
    """Decoder output clamped to [0, 1] and cropped to ``size``."""
    with no_grad():
        x_hat = model.synthesis(
            Tensor(latents.z[None].astype(model.dtype)),
            Tensor(hyper[None].astype(model.dtype)),
            model._onehot(lambda_index),
        )
    return crop(np.clip(x_hat.data[0].astype(np.float64), 0.0, 1.0), size)


def decompress(stream: CompressedImage | bytes, model: VariableRateModel) -> np.ndarray:
    if not isinstance(stream, CompressedImage):
        stream = CompressedImage.from_bytes(stream)
    latents, hyper = decode_latents(stream, model)
    return reconstruct(model, latents, hyper, stream.lambda_index, (stream.height, stream.width))


# -- rate accounting --------------------------------------------------------------


def element_bits(model: VariableRateModel, latents: LatentPair, lambda_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-element code lengths ``-log2`` of the floored bin mass for z and w."""
    delta = latents.delta
    hyper = _hyper_features(model, latents.w, lambda_index)
    mu, sigma = _context_params(ContextRunner(model, lambda_index), latents.z, hyper)
    z = latents.z.transpose(1, 2, 0)
    p_z = np.maximum(gaussian_bin_prob_np(z, mu, sigma, delta), P_FLOOR)
    w = latents.w.reshape(latents.w.shape[0], -1)
    upper = model.density.cdf_np(w + 0.5 * delta, lambda_index)
    lower = model.density.cdf_np(w - 0.5 * delta, lambda_index)
    p_w = np.maximum(upper - lower, P_FLOOR)
    return -np.log2(p_z).transpose(2, 0, 1), -np.log2(p_w).reshape(latents.w.shape)


def rate_estimate(model: VariableRateModel, latents: LatentPair, lambda_index: int) -> float:
    """Total ideal code length of the latents, in bits."""
    bz, bw = element_bits(model, latents, lambda_index)
    return float(bz.sum() + bw.sum())


# -- target-rate search -------------------------------------------------------------


@dataclass
class SearchResult:
    lambda_index: int
    delta: float
    stream: CompressedImage
    bpp: float
    psnr: float
    outside_envelope: bool
    iterations: int


def _psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def target_rate_search(
    image,
    model: VariableRateModel,
    target_bpp: float,
    delta_range: tuple[float, float] = (0.5, 2.0),
    tolerance: float = 0.05,
    max_iterations: int = 12,
) -> SearchResult:
    """Pick (lambda, delta) whose stream hits ``target_bpp`` within ``tolerance``.

    Lambda is chosen from the delta=1 rates, then log2(delta) is bisected.
    When the last two probes straddle the target and are both within
    tolerance, the one with higher PSNR wins.  Targets outside what the grid
    can reach return the nearest edge point with ``outside_envelope`` set.
    """
    if target_bpp <= 0:
        raise ValueError("target_bpp must be positive")
    x = _prepare(image)
    cache: dict[tuple[int, float], tuple[CompressedImage, float]] = {}

    def probe(lam: int, delta: float) -> tuple[CompressedImage, float]:
        key = (lam, as_float32(delta))
        if key not in cache:
            stream = compress(x, model, lam, delta)
            cache[key] = (stream, stream.bpp)
        return cache[key]

    def result(lam, delta, flag, iters):
        stream, bpp = probe(lam, delta)
        return SearchResult(lam, stream.delta, stream, bpp, _psnr(decompress(stream, model), x), flag, iters)

    d_lo, d_hi = delta_range
    lams = range(model.config.n_lambdas)
    unit = {lam: probe(lam, 1.0)[1] for lam in lams}
    highest = max(lams, key=lambda lam: probe(lam, d_lo)[1])
    lowest = min(lams, key=lambda lam: probe(lam, d_hi)[1])
    if target_bpp > probe(highest, d_lo)[1] * (1 + tolerance):
        return result(highest, d_lo, True, 0)
    if target_bpp < probe(lowest, d_hi)[1] * (1 - tolerance):
        return result(lowest, d_hi, True, 0)

    order = sorted(lams, key=lambda lam: abs(math.log(unit[lam] / target_bpp)))
    best = None
    for lam in order:
        lo, hi = math.log2(d_lo), math.log2(d_hi)
        if not probe(lam, d_hi)[1] * (1 - tolerance) <= target_bpp <= probe(lam, d_lo)[1] * (1 + tolerance):
            continue
        above = below = None  # probes with bpp above / below the target
        iters = 0
        for iters in range(1, max_iterations + 1):
            mid = 0.5 * (lo + hi)
            delta = as_float32(2.0**mid)
            bpp = probe(lam, delta)[1]
            if bpp > target_bpp:
                above, lo = delta, mid
            else:
                below, hi = delta, mid
            if abs(bpp - target_bpp) <= tolerance * target_bpp:
                break
        close = [d for d in (above, below)
                 if d is not None and abs(probe(lam, d)[1] - target_bpp) <= tolerance * target_bpp]
        if close:
            picks = [result(lam, d, False, iters) for d in close]
            return max(picks, key=lambda r: r.psnr)
        candidate = min((d for d in (above, below) if d is not None),
                        key=lambda d: abs(probe(lam, d)[1] - target_bpp))
        if best is None or abs(probe(lam, candidate)[1] - target_bpp) < abs(best[2] - target_bpp):
            best = (lam, candidate, probe(lam, candidate)[1], iters)
    if best is None:
        lam = order[0]
        return result(lam, 1.0, True, 0)
    return result(best[0], best[1], False, best[3])


__all__ = [
    "MAGIC", "VERSION", "CompressedImage", "LatentPair", "RDPoint", "SearchResult", "StreamError",
    "ChecksumError", "StreamExhausted", "TOTAL", "compress", "decompress", "decode_latents",
    "encode_latents", "reconstruct", "rate_estimate", "element_bits", "pad_unpad", "crop",
    "target_rate_search", "as_float32",
]
