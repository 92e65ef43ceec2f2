"""Split-8 software physical layer.

Everything from bits to bits runs in software here: Gray-mapped QPSK/QAM16,
unitary-DFT OFDM modulation with cyclic prefix, FIR+CFO+AWGN channel
simulation, least-squares pilot channel estimation, MR/ZF/MMSE equalization
and error statistics. `run_split8` chains the stages into a worker pipeline
over bounded queues whose numeric output is bit-identical for any worker
count.

The normative constellation mapping tables live in docs/constellations.md;
the tables below implement them.
"""

from __future__ import annotations

import math
import queue
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np


class LengthMismatch(ValueError):
    pass


class ShortInput(ValueError):
    pass


class ZeroPilot(ValueError):
    pass


class SingularChannel(ValueError):
    """Zero-forcing hit a channel coefficient with magnitude < 1e-12."""


class PipelineStageError(RuntimeError):
    """Wraps a stage failure with the stage identity attached."""

    def __init__(self, stage: str, frame: int, cause: BaseException):
        super().__init__(f"stage '{stage}' failed on frame {frame}: {cause!r}")
        self.stage = stage
        self.frame = frame
        self.cause = cause


BITS_PER_SYMBOL = {"qpsk": 2, "qam16": 4}

NOISELESS = math.inf  # snr_db sentinel


def _default_used_subcarriers(fft_size: int) -> tuple[int, ...]:
    # 52 occupied carriers around DC (DC itself unused), LTE-flavoured.
    half = 26 * fft_size // 64
    lo = list(range(1, half + 1))
    hi = list(range(fft_size - half, fft_size))
    return tuple(sorted(lo + hi))


@dataclass(frozen=True)
class OfdmConfig:
    """OFDM numerology. Defaults are small enough for brute-force tests."""

    fft_size: int = 64
    cp_len: int = 16
    used_subcarriers: tuple[int, ...] = ()
    pilot_spacing: int = 4
    pilot_value: complex = 1.0 + 0.0j
    modulation: str = "qpsk"
    symbols_per_frame: int = 50

    def __post_init__(self):
        n = self.fft_size
        if n <= 0 or (n & (n - 1)) != 0:
            raise ValueError("fft_size must be a power of two")
        if not (0 < self.cp_len < n):
            raise ValueError("cp_len must satisfy 0 < cp_len < fft_size")
        if self.pilot_spacing < 1:
            raise ValueError("pilot_spacing must be >= 1")
        if self.modulation not in BITS_PER_SYMBOL:
            raise ValueError(f"unknown modulation {self.modulation!r}")
        if self.symbols_per_frame < 1:
            raise ValueError("symbols_per_frame must be >= 1")
        used = self.used_subcarriers or _default_used_subcarriers(n)
        used = tuple(sorted(set(int(k) for k in used)))
        if not used:
            raise ValueError("used_subcarriers must be non-empty")
        if used[0] < 0 or used[-1] >= n:
            raise ValueError("used_subcarriers must lie in [0, fft_size)")
        object.__setattr__(self, "used_subcarriers", used)

    @property
    def n_used(self) -> int:
        return len(self.used_subcarriers)

    @property
    def pilot_positions(self) -> tuple[int, ...]:
        """Indices INTO the used-subcarrier list that carry pilots."""
        return tuple(range(0, self.n_used, self.pilot_spacing))

    @property
    def data_positions(self) -> tuple[int, ...]:
        pil = set(self.pilot_positions)
        return tuple(i for i in range(self.n_used) if i not in pil)

    @property
    def bits_per_symbol(self) -> int:
        return BITS_PER_SYMBOL[self.modulation]

    @property
    def data_bits_per_ofdm_symbol(self) -> int:
        return len(self.data_positions) * self.bits_per_symbol

    @property
    def data_bits_per_frame(self) -> int:
        return self.data_bits_per_ofdm_symbol * self.symbols_per_frame

    @property
    def samples_per_symbol(self) -> int:
        return self.fft_size + self.cp_len

    @property
    def samples_per_frame(self) -> int:
        return self.samples_per_symbol * self.symbols_per_frame


@dataclass(frozen=True)
class ChannelSpec:
    """FIR multipath + carrier frequency offset + per-sample complex AWGN.

    snr_db is defined against signal_power when given, else against the
    measured mean power of the (convolved, rotated) signal; math.inf
    disables noise. cfo_hz is applied as
    exp(j*2*pi*cfo_hz*n/sample_rate_sps) with n counted from the start of
    the call.

    Measured-power scaling is right for arbitrary sample streams, but it
    tracks the realized waveform: structured frames whose short-time power
    is not uniform (OFDM cyclic prefixes over deterministic pilots) would
    see a noise floor biased by that realization. Pipelines that need the
    noise variance pinned to the ensemble-mean power pass signal_power
    explicitly.
    """

    taps: tuple[complex, ...] = (1.0 + 0.0j,)
    cfo_hz: float = 0.0
    snr_db: float = NOISELESS
    seed: int = 0
    sample_rate_sps: float = 1.0
    signal_power: Optional[float] = None

    def __post_init__(self):
        if len(self.taps) == 0 or not any(t != 0 for t in self.taps):
            raise ValueError("need at least one nonzero tap")
        if not (math.isfinite(self.snr_db) or self.snr_db == NOISELESS):
            raise ValueError("snr_db must be finite or +inf")
        if self.signal_power is not None and not self.signal_power > 0.0:
            raise ValueError("signal_power must be positive when given")
        object.__setattr__(self, "taps", tuple(complex(t) for t in self.taps))


@dataclass
class ResourceGrid:
    """Per-frame grid of complex values indexed [symbol][subcarrier].

    Storage is one C-contiguous block, subcarrier-major within each symbol,
    so sequential traversal walks memory linearly (struct-of-arrays layout).
    """

    values: np.ndarray  # (n_symbols, fft_size) complex128, C-contiguous

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.complex128)
        if v.ndim != 2:
            raise ValueError("grid must be 2-D [symbol][subcarrier]")
        self.values = v

    @property
    def n_symbols(self) -> int:
        return self.values.shape[0]

    @property
    def n_subcarriers(self) -> int:
        return self.values.shape[1]

    def symbol_row(self, i: int) -> np.ndarray:
        """Zero-copy view of one OFDM symbol's subcarriers."""
        return self.values[i]

    @classmethod
    def zeros(cls, cfg: OfdmConfig, n_symbols: int) -> "ResourceGrid":
        return cls(np.zeros((n_symbols, cfg.fft_size), dtype=np.complex128))


# --------------------------------------------------------------------------
# constellation mapping (normative tables in docs/constellations.md)

_QPSK_SCALE = 1.0 / math.sqrt(2.0)
_QAM16_SCALE = 1.0 / math.sqrt(10.0)


def _qpsk_point(b0: int, b1: int) -> complex:
    return complex((1 - 2 * b0) * _QPSK_SCALE, (1 - 2 * b1) * _QPSK_SCALE)


def _qam16_point(b0: int, b1: int, b2: int, b3: int) -> complex:
    i = (1 - 2 * b0) * (2 - (1 - 2 * b2))
    q = (1 - 2 * b1) * (2 - (1 - 2 * b3))
    return complex(i * _QAM16_SCALE, q * _QAM16_SCALE)


def constellation_table(modulation: str) -> dict[tuple[int, ...], complex]:
    """Bit-pattern -> point table, keys in lexicographic bit order."""
    if modulation == "qpsk":
        return {(b0, b1): _qpsk_point(b0, b1) for b0 in (0, 1) for b1 in (0, 1)}
    if modulation == "qam16":
        return {
            (b0, b1, b2, b3): _qam16_point(b0, b1, b2, b3)
            for b0 in (0, 1)
            for b1 in (0, 1)
            for b2 in (0, 1)
            for b3 in (0, 1)
        }
    raise ValueError(f"unknown modulation {modulation!r}")


def map_bits(bits: np.ndarray, modulation: str) -> np.ndarray:
    """Gray-map bits to unit-average-energy constellation symbols."""
    bps = BITS_PER_SYMBOL.get(modulation)
    if bps is None:
        raise ValueError(f"unknown modulation {modulation!r}")
    bits = np.asarray(bits, dtype=np.int64).ravel()
    if bits.size % bps != 0:
        raise LengthMismatch(f"bit count {bits.size} not divisible by {bps}")
    if bits.size == 0:
        return np.zeros(0, dtype=np.complex128)
    b = bits.reshape(-1, bps)
    if modulation == "qpsk":
        return ((1 - 2 * b[:, 0]) + 1j * (1 - 2 * b[:, 1])) * _QPSK_SCALE
    i = (1 - 2 * b[:, 0]) * (2 - (1 - 2 * b[:, 2]))
    q = (1 - 2 * b[:, 1]) * (2 - (1 - 2 * b[:, 3]))
    return (i + 1j * q) * _QAM16_SCALE


def demap_symbols(symbols: np.ndarray, modulation: str) -> np.ndarray:
    """Hard decision to the nearest constellation point.

    Ties break toward the lexicographically smallest bit pattern, which for
    these Gray tables reduces to: sign bits decide 0 at exactly zero, and
    the QAM16 magnitude bits decide the inner level at the +/-2/sqrt(10)
    boundaries.
    """
    s = np.asarray(symbols, dtype=np.complex128).ravel()
    if modulation == "qpsk":
        out = np.empty((s.size, 2), dtype=np.uint8)
        out[:, 0] = s.real < 0
        out[:, 1] = s.imag < 0
        return out.ravel()
    if modulation == "qam16":
        thr = 2.0 * _QAM16_SCALE
        out = np.empty((s.size, 4), dtype=np.uint8)
        out[:, 0] = s.real < 0
        out[:, 1] = s.imag < 0
        out[:, 2] = np.abs(s.real) > thr
        out[:, 3] = np.abs(s.imag) > thr
        return out.ravel()
    raise ValueError(f"unknown modulation {modulation!r}")


# --------------------------------------------------------------------------
# OFDM modulation / demodulation (unitary DFT, 1/sqrt(N) both ways)


def ofdm_mod(grid_row: np.ndarray, cfg: OfdmConfig) -> np.ndarray:
    """One OFDM symbol: used-subcarrier values -> CP + time-domain body."""
    row = np.asarray(grid_row, dtype=np.complex128).ravel()
    if row.size != cfg.n_used:
        raise LengthMismatch(f"expected {cfg.n_used} symbols, got {row.size}")
    spectrum = np.zeros(cfg.fft_size, dtype=np.complex128)
    spectrum[list(cfg.used_subcarriers)] = row
    body = np.fft.ifft(spectrum) * math.sqrt(cfg.fft_size)
    return np.concatenate([body[-cfg.cp_len :], body])


def ofdm_demod(samples: np.ndarray, cfg: OfdmConfig, timing_offset: int = 0) -> np.ndarray:
    """Strip CP (optionally `timing_offset` samples early) and apply the DFT.

    A positive timing_offset within the CP yields the per-subcarrier phase
    ramp exp(-j*2*pi*k*offset/N) on a flat channel.
    """
    x = np.asarray(samples, dtype=np.complex128).ravel()
    n, cp = cfg.fft_size, cfg.cp_len
    if x.size < n + cp:
        raise ShortInput(f"need >= {n + cp} samples, got {x.size}")
    if not (0 <= timing_offset <= cp):
        raise ValueError("timing_offset must lie within the cyclic prefix")
    start = cp - timing_offset
    body = x[start : start + n]
    spectrum = np.fft.fft(body) / math.sqrt(n)
    return spectrum[list(cfg.used_subcarriers)]


def _mod_frame(rows: np.ndarray, cfg: OfdmConfig) -> np.ndarray:
    """Vectorized ofdm_mod over a (n_symbols, n_used) block of rows."""
    spectrum = np.zeros((rows.shape[0], cfg.fft_size), dtype=np.complex128)
    spectrum[:, list(cfg.used_subcarriers)] = rows
    body = np.fft.ifft(spectrum, axis=1) * math.sqrt(cfg.fft_size)
    return np.concatenate([body[:, -cfg.cp_len :], body], axis=1)


def _demod_frame(samples: np.ndarray, cfg: OfdmConfig) -> np.ndarray:
    """Vectorized ofdm_demod of a frame laid out symbol after symbol."""
    sym = cfg.samples_per_symbol
    n_sym = samples.size // sym
    blocks = samples[: n_sym * sym].reshape(n_sym, sym)[:, cfg.cp_len :]
    spectrum = np.fft.fft(blocks, axis=1) / math.sqrt(cfg.fft_size)
    return spectrum[:, list(cfg.used_subcarriers)]


# --------------------------------------------------------------------------
# channel


def _apply_channel(samples: np.ndarray, spec: ChannelSpec) -> tuple[np.ndarray, float]:
    """FIR -> CFO rotation -> AWGN; returns (output, noise variance used)."""
    x = np.asarray(samples, dtype=np.complex128).ravel()
    taps = np.asarray(spec.taps, dtype=np.complex128)
    y = np.convolve(x, taps)[: x.size] if taps.size > 1 or taps[0] != 1.0 else x.copy()
    if spec.cfo_hz != 0.0:
        n = np.arange(y.size)
        y = y * np.exp(2j * np.pi * spec.cfo_hz * n / spec.sample_rate_sps)
    noise_var = 0.0
    if math.isfinite(spec.snr_db):
        if spec.signal_power is not None:
            p_sig = spec.signal_power
        else:
            p_sig = float(np.mean(np.abs(y) ** 2))
        noise_var = p_sig * 10.0 ** (-spec.snr_db / 10.0)
        if noise_var > 0.0:
            rng = np.random.default_rng(spec.seed)
            scale = math.sqrt(noise_var / 2.0)
            noise = rng.standard_normal(y.size) + 1j * rng.standard_normal(y.size)
            y = y + noise * scale
    return y, noise_var


def apply_channel(samples: np.ndarray, spec: ChannelSpec) -> np.ndarray:
    """Pass samples through the simulated channel; deterministic per seed."""
    y, _ = _apply_channel(samples, spec)
    return y


def channel_frequency_response(spec: ChannelSpec, cfg: OfdmConfig) -> np.ndarray:
    """Exact per-used-subcarrier response of the FIR taps (cfo excluded)."""
    taps = np.asarray(spec.taps, dtype=np.complex128)
    full = np.fft.fft(taps, cfg.fft_size)
    return full[list(cfg.used_subcarriers)]


# --------------------------------------------------------------------------
# estimation / equalization / statistics


def ls_channel_estimate(grid_row: np.ndarray, cfg: OfdmConfig) -> np.ndarray:
    """LS pilot estimate Y/X, linearly interpolated over data subcarriers.

    Edge subcarriers outside the pilot span take the nearest pilot value.
    """
    if cfg.pilot_value == 0:
        raise ZeroPilot("pilot_value must be nonzero")
    row = np.asarray(grid_row, dtype=np.complex128).ravel()
    if row.size != cfg.n_used:
        raise LengthMismatch(f"expected {cfg.n_used} values, got {row.size}")
    used = np.asarray(cfg.used_subcarriers, dtype=np.float64)
    pil = list(cfg.pilot_positions)
    h_pil = row[pil] / cfg.pilot_value
    xp = used[pil]
    re = np.interp(used, xp, h_pil.real)
    im = np.interp(used, xp, h_pil.imag)
    return re + 1j * im


def equalize(
    grid_row: np.ndarray,
    h: np.ndarray,
    method: str = "zf",
    noise_var: float = 0.0,
) -> np.ndarray:
    """Per-subcarrier equalization: mr, zf or mmse."""
    y = np.asarray(grid_row, dtype=np.complex128).ravel()
    hh = np.asarray(h, dtype=np.complex128).ravel()
    if y.size != hh.size:
        raise LengthMismatch("grid row and channel estimate differ in length")
    if method == "mr":
        return np.conj(hh) * y / (np.abs(hh) ** 2)
    if method == "zf":
        if np.any(np.abs(hh) < 1e-12):
            raise SingularChannel("|H| below 1e-12 on a used subcarrier")
        return y / hh
    if method == "mmse":
        return np.conj(hh) * y / (np.abs(hh) ** 2 + noise_var)
    raise ValueError(f"unknown equalizer {method!r}")


@dataclass(frozen=True)
class ErrorStats:
    ber: float
    ser: float
    per: float
    bit_errors: int
    bits_total: int
    sym_errors: int
    syms_total: int
    frame_errors: int
    frames_total: int


def error_rates(
    tx_bits: np.ndarray,
    rx_bits: np.ndarray,
    frame_len_bits: int,
    bits_per_symbol: int = 1,
) -> ErrorStats:
    """Bit/symbol/packet error ratios from transmitted vs received bits.

    Symbols are consecutive groups of bits_per_symbol bits; a frame is in
    error when any of its frame_len_bits bits mismatch.
    """
    tx = np.asarray(tx_bits, dtype=np.uint8).ravel()
    rx = np.asarray(rx_bits, dtype=np.uint8).ravel()
    if tx.size != rx.size:
        raise LengthMismatch("tx and rx bit counts differ")
    if tx.size == 0:
        return ErrorStats(0.0, 0.0, 0.0, 0, 0, 0, 0, 0, 0)
    if frame_len_bits <= 0 or tx.size % frame_len_bits != 0:
        raise LengthMismatch("frame_len_bits must divide the bit count")
    if bits_per_symbol <= 0 or tx.size % bits_per_symbol != 0:
        raise LengthMismatch("bits_per_symbol must divide the bit count")
    diff = tx != rx
    bit_errors = int(diff.sum())
    sym = diff.reshape(-1, bits_per_symbol).any(axis=1)
    frm = diff.reshape(-1, frame_len_bits).any(axis=1)
    return ErrorStats(
        ber=bit_errors / tx.size,
        ser=float(sym.sum()) / sym.size,
        per=float(frm.sum()) / frm.size,
        bit_errors=bit_errors,
        bits_total=int(tx.size),
        sym_errors=int(sym.sum()),
        syms_total=int(sym.size),
        frame_errors=int(frm.sum()),
        frames_total=int(frm.size),
    )


def ebn0_db_to_snr_db(cfg: OfdmConfig, ebn0_db: float) -> float:
    """Per-sample channel SNR that realizes a target Eb/N0 on this config.

    With unitary DFTs and unit-energy constellations the time-domain signal
    power is n_used/fft_size, and the per-subcarrier noise variance after
    the FFT equals the per-sample variance, so
    snr = bits_per_symbol * Eb/N0 * n_used / fft_size.
    """
    gamma = 10.0 ** (ebn0_db / 10.0)
    snr = cfg.bits_per_symbol * gamma * cfg.n_used / cfg.fft_size
    return 10.0 * math.log10(snr)


# --------------------------------------------------------------------------
# the split-8 pipeline

STAGES = (
    "bitgen",
    "map",
    "ofdm_mod",
    "channel",
    "ofdm_demod",
    "chan_est",
    "equalize",
    "demap",
    "stats",
)

# Stages that sit in the radio unit under a split-7.2-style placement: the
# low-PHY CP/FFT pair. Under split 8 the radio ships raw samples and every
# stage runs in the distributed unit.
LOW_PHY_STAGES = frozenset({"ofdm_mod", "ofdm_demod"})


def stage_placement(ru_stages: Optional[frozenset] = None) -> dict[str, str]:
    """Annotate each stage with its unit: 'o-ru' or 'o-du'.

    ru_stages=None means split 8 (everything in the O-DU); pass
    LOW_PHY_STAGES for a split-7.2-style boundary, or any other subset to
    model vendor-specific placements.
    """
    ru = ru_stages or frozenset()
    unknown = ru - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stages: {sorted(unknown)}")
    return {s: ("o-ru" if s in ru else "o-du") for s in STAGES}


@dataclass
class PipelineReport:
    """Merged output of one run_split8 call.

    stage_timings are wall-clock sums and are excluded from determinism
    comparisons; everything else is bit-identical for a fixed (cfg,
    channel, n_frames, seed) regardless of worker count.
    """

    ber: float
    ser: float
    per: float
    evm_rms: float
    csi: np.ndarray
    bit_errors: int
    bits_total: int
    sym_errors: int
    syms_total: int
    frame_errors: int
    frames_total: int
    noise_var: float
    method: str
    csi_mode: str
    workers: int
    stage_placement: dict[str, str]
    stage_timings: dict[str, float] = field(default_factory=dict)

    def deterministic_fields(self) -> tuple:
        return (
            self.ber,
            self.ser,
            self.per,
            self.evm_rms,
            self.csi.tobytes(),
            self.bit_errors,
            self.bits_total,
            self.sym_errors,
            self.syms_total,
            self.frame_errors,
            self.frames_total,
            self.noise_var,
        )


@dataclass
class _FrameResult:
    stats: ErrorStats
    evm_sq_sum: float
    evm_n: int
    csi: np.ndarray
    noise_var: float
    timings: dict[str, float]


def _mix_seed(seed: int, frame: int) -> int:
    # splitmix-style derivation so per-frame noise/bit streams are
    # independent of worker scheduling
    return (seed * 0x9E3779B97F4A7C15 + frame * 0xBF58476D1CE4E5B9 + 1) % (1 << 63)


def _process_frame(
    cfg: OfdmConfig,
    channel: ChannelSpec,
    frame_idx: int,
    method: str,
    csi_mode: str,
    seed: int,
) -> _FrameResult:
    timings: dict[str, float] = {}
    stage = "bitgen"
    try:
        t0 = time.perf_counter()
        rng = np.random.default_rng(_mix_seed(seed, frame_idx))
        tx_bits = rng.integers(0, 2, size=cfg.data_bits_per_frame, dtype=np.uint8)
        timings[stage] = time.perf_counter() - t0

        stage = "map"
        t0 = time.perf_counter()
        data_syms = map_bits(tx_bits, cfg.modulation)
        rows = np.full(
            (cfg.symbols_per_frame, cfg.n_used), cfg.pilot_value, dtype=np.complex128
        )
        rows[:, list(cfg.data_positions)] = data_syms.reshape(
            cfg.symbols_per_frame, len(cfg.data_positions)
        )
        timings[stage] = time.perf_counter() - t0

        stage = "ofdm_mod"
        t0 = time.perf_counter()
        tx_samples = _mod_frame(rows, cfg).ravel()
        timings[stage] = time.perf_counter() - t0

        stage = "channel"
        t0 = time.perf_counter()
        frame_chan = replace(channel, seed=_mix_seed(channel.seed, frame_idx))
        if frame_chan.signal_power is None and math.isfinite(frame_chan.snr_db):
            # pin the noise floor to the ensemble-mean rx power: data bins
            # carry exactly unit energy, so per-bin Es/N0 then matches the
            # configured snr_db deterministically (the realized frame power
            # wobbles with the cyclic prefix and would bias sigma^2)
            h_nom = channel_frequency_response(frame_chan, cfg)
            p_nom = float(np.mean(np.abs(h_nom) ** 2)) * cfg.n_used / cfg.fft_size
            frame_chan = replace(frame_chan, signal_power=p_nom)
        rx_samples, noise_var = _apply_channel(tx_samples, frame_chan)
        timings[stage] = time.perf_counter() - t0

        stage = "ofdm_demod"
        t0 = time.perf_counter()
        rx_rows = _demod_frame(rx_samples, cfg)
        timings[stage] = time.perf_counter() - t0

        stage = "chan_est"
        t0 = time.perf_counter()
        # LS per symbol, averaged over the frame (channel static per frame)
        pil = list(cfg.pilot_positions)
        h_pil = rx_rows[:, pil].mean(axis=0) / cfg.pilot_value
        used = np.asarray(cfg.used_subcarriers, dtype=np.float64)
        xp = used[pil]
        h_est = np.interp(used, xp, h_pil.real) + 1j * np.interp(used, xp, h_pil.imag)
        timings[stage] = time.perf_counter() - t0

        stage = "equalize"
        t0 = time.perf_counter()
        if csi_mode == "ideal":
            h_eq = channel_frequency_response(frame_chan, cfg)
        elif csi_mode == "estimated":
            h_eq = h_est
        else:
            raise ValueError(f"unknown csi_mode {csi_mode!r}")
        eq = np.empty_like(rx_rows)
        for s in range(cfg.symbols_per_frame):
            eq[s] = equalize(rx_rows[s], h_eq, method=method, noise_var=noise_var)
        data_eq = eq[:, list(cfg.data_positions)].ravel()
        timings[stage] = time.perf_counter() - t0

        stage = "demap"
        t0 = time.perf_counter()
        rx_bits = demap_symbols(data_eq, cfg.modulation)
        timings[stage] = time.perf_counter() - t0

        stage = "stats"
        t0 = time.perf_counter()
        stats = error_rates(
            tx_bits,
            rx_bits,
            frame_len_bits=cfg.data_bits_per_frame,
            bits_per_symbol=cfg.bits_per_symbol,
        )
        evm_sq = float(np.sum(np.abs(data_eq - data_syms) ** 2))
        timings[stage] = time.perf_counter() - t0
    except Exception as exc:  # noqa: BLE001 - stage identity must survive
        raise PipelineStageError(stage, frame_idx, exc) from exc

    return _FrameResult(
        stats=stats,
        evm_sq_sum=evm_sq,
        evm_n=data_syms.size,
        csi=h_est,
        noise_var=noise_var,
        timings=timings,
    )


def run_split8(
    cfg: OfdmConfig,
    channel: ChannelSpec,
    n_frames: int,
    workers: int = 1,
    method: str = "zf",
    csi_mode: str = "estimated",
    seed: int = 0,
    queue_capacity: int = 8,
    ru_stages: Optional[frozenset] = None,
) -> PipelineReport:
    """Run the full bits-to-bits pipeline over n_frames frames.

    Frames carry sequence tags through a bounded work queue; per-frame
    results are merged in sequence order, so counters, rates, CSI and EVM
    are bit-identical for any `workers` >= 1. csi_mode 'estimated' drives
    the equalizer from the LS pilot estimate; 'ideal' uses the exact tap
    response (the right reference when validating against closed-form AWGN
    theory).
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if queue_capacity < 1:
        raise ValueError("queue_capacity must be >= 1")

    results: dict[int, _FrameResult] = {}
    if workers == 1:
        for i in range(n_frames):
            results[i] = _process_frame(cfg, channel, i, method, csi_mode, seed)
    else:
        work: queue.Queue = queue.Queue(maxsize=queue_capacity)
        lock = threading.Lock()
        errors: list[BaseException] = []

        def worker():
            while True:
                i = work.get()
                if i is None:
                    work.task_done()
                    return
                try:
                    res = _process_frame(cfg, channel, i, method, csi_mode, seed)
                    with lock:
                        results[i] = res
                except BaseException as exc:  # noqa: BLE001
                    with lock:
                        errors.append(exc)
                finally:
                    work.task_done()

        threads = [threading.Thread(target=worker, daemon=True) for _ in range(workers)]
        for t in threads:
            t.start()
        for i in range(n_frames):  # blocks when the queue is full: back-pressure
            work.put(i)
        for _ in threads:
            work.put(None)
        for t in threads:
            t.join()
        if errors:
            raise errors[0]

    # deterministic merge in frame order
    bit_errors = bits = sym_errors = syms = frame_errors = frames = 0
    evm_sq = 0.0
    evm_n = 0
    nv_sum = 0.0
    csi_sum = np.zeros(cfg.n_used, dtype=np.complex128)
    timings: dict[str, float] = {s: 0.0 for s in STAGES}
    for i in range(n_frames):
        r = results[i]
        bit_errors += r.stats.bit_errors
        bits += r.stats.bits_total
        sym_errors += r.stats.sym_errors
        syms += r.stats.syms_total
        frame_errors += r.stats.frame_errors
        frames += r.stats.frames_total
        evm_sq += r.evm_sq_sum
        evm_n += r.evm_n
        nv_sum += r.noise_var
        csi_sum += r.csi
        for s, dt in r.timings.items():
            timings[s] += dt

    return PipelineReport(
        ber=bit_errors / bits,
        ser=sym_errors / syms,
        per=frame_errors / frames,
        evm_rms=math.sqrt(evm_sq / evm_n),
        csi=csi_sum / n_frames,
        bit_errors=bit_errors,
        bits_total=bits,
        sym_errors=sym_errors,
        syms_total=syms,
        frame_errors=frame_errors,
        frames_total=frames,
        noise_var=nv_sum / n_frames,
        method=method,
        csi_mode=csi_mode,
        workers=workers,
        stage_placement=stage_placement(ru_stages),
        stage_timings=timings,
    )
