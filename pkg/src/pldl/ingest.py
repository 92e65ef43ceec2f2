"""Timestamped IQ block sources.

Three families: simulated (tone, pseudo-random, OFDM link through a
simulated channel), file replay of previously captured raw cf32 sample
streams, and a UDP listener speaking the framed datagram format below.
All sources hand out IQBlock objects whose payload is complex64 (cf32:
little-endian float32 I then Q, 8 bytes per complex sample) in a
channel-major contiguous array.

Wire datagram layout (little-endian):
  magic "PLDL" | version u8 (=1) | sample_format u8 (=1, cf32) |
  stream_id u16 | seq u64 | start_sample_index u64 |
  start_time_local_ns u64 | sample_count u32 | payload (count * 8 bytes)
Datagrams with bad magic, version or format are counted and discarded.
"""

from __future__ import annotations

import math
import socket
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import phy
from .timebase import NS, ClockModel

BYTES_PER_SAMPLE = 8  # cf32: float32 I + float32 Q

WIRE_MAGIC = b"PLDL"
WIRE_VERSION = 1
WIRE_FORMAT_CF32 = 1
WIRE_HEADER = struct.Struct("<4sBBHQQQI")


class EndOfStream(Exception):
    pass


class SourceClosed(RuntimeError):
    pass


class PortInUse(OSError):
    pass


class InvalidConfig(ValueError):
    pass


class ReceiveTimeout(TimeoutError):
    pass


@dataclass(frozen=True)
class StreamDescriptor:
    stream_id: str
    sample_rate_sps: float
    center_freq_hz: float = 0.0
    channel_count: int = 1
    sample_format: str = "cf32"
    clock_id: str = "local"

    def __post_init__(self):
        if self.sample_rate_sps <= 0:
            raise InvalidConfig("sample_rate_sps must be > 0")
        if self.channel_count < 1:
            raise InvalidConfig("channel_count must be >= 1")
        if self.sample_format != "cf32":
            raise InvalidConfig("only cf32 is supported")


def byte_rate(desc: StreamDescriptor) -> float:
    """Bytes per second produced by the stream: rate * 8 * channels."""
    return desc.sample_rate_sps * BYTES_PER_SAMPLE * desc.channel_count


@dataclass
class IQBlock:
    """One contiguous chunk of a stream, channel-major complex64."""

    stream_id: str
    seq: int
    start_sample_index: int
    start_time_local_ns: int
    samples: np.ndarray  # (channel_count, n) complex64, C-contiguous
    drop_flag: bool = False

    def __post_init__(self):
        s = np.ascontiguousarray(self.samples, dtype=np.complex64)
        if s.ndim == 1:
            s = s.reshape(1, -1)
        if s.ndim != 2 or s.size == 0:
            raise ValueError("samples must be a non-empty (channels, n) array")
        self.samples = s

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    @property
    def end_sample_index(self) -> int:
        return self.start_sample_index + self.n_samples

    @property
    def nbytes(self) -> int:
        return self.samples.nbytes


@dataclass
class DropStats:
    blocks_received: int = 0
    blocks_dropped: int = 0
    out_of_order: int = 0
    bad_datagrams: int = 0


def sample_index_to_ns(index: int, sample_rate_sps: float) -> int:
    """Stream time of a sample index, rounded to whole nanoseconds."""
    if float(sample_rate_sps).is_integer():
        fs = int(sample_rate_sps)
        return (index * NS * 2 + fs) // (2 * fs)  # round half up, exact
    return round(index / sample_rate_sps * NS)


# --------------------------------------------------------------- configs


@dataclass(frozen=True)
class ToneConfig:
    """Complex exponential at freq_hz, identical on every channel."""

    stream_id: str = "tone"
    sample_rate_sps: float = 1e6
    freq_hz: float = 250e3
    amplitude: float = 1.0
    phase_cycles: float = 0.0
    channel_count: int = 1
    center_freq_hz: float = 0.0
    clock: Optional[ClockModel] = None


@dataclass(frozen=True)
class PrngConfig:
    """Unit-power circular complex Gaussian noise, seeded."""

    stream_id: str = "prng"
    sample_rate_sps: float = 1e6
    seed: int = 0
    channel_count: int = 1
    center_freq_hz: float = 0.0
    clock: Optional[ClockModel] = None


@dataclass(frozen=True)
class OfdmLinkConfig:
    """Continuous OFDM frames passed through a simulated channel."""

    stream_id: str = "ofdm-link"
    sample_rate_sps: float = 1e6
    ofdm: phy.OfdmConfig = field(default_factory=phy.OfdmConfig)
    channel: phy.ChannelSpec = field(default_factory=phy.ChannelSpec)
    seed: int = 0
    center_freq_hz: float = 0.0
    clock: Optional[ClockModel] = None


@dataclass(frozen=True)
class FileReplayConfig:
    """Replay a raw cf32 file (e.g. an exported dataset's sample file)."""

    path: str
    loop: bool = False
    stream_id: str = "replay"
    sample_rate_sps: float = 1e6
    channel_count: int = 1
    center_freq_hz: float = 0.0
    clock_id: str = "local"


@dataclass(frozen=True)
class NetworkListenerConfig:
    """UDP listener; one wire datagram becomes one block."""

    port: int
    bind_addr: str = "127.0.0.1"
    stream_id: str = ""
    sample_rate_sps: float = 1e6
    channel_count: int = 1
    center_freq_hz: float = 0.0
    clock_id: str = "remote"
    timeout_s: float = 1.0


SourceConfig = (
    ToneConfig,
    PrngConfig,
    OfdmLinkConfig,
    FileReplayConfig,
    NetworkListenerConfig,
)


# --------------------------------------------------------------- handles


class SourceHandle:
    """Single-consumer block source; do not share one handle across
    threads without external serialization."""

    def __init__(self, descriptor: StreamDescriptor):
        self.descriptor = descriptor
        self._seq = 0
        self._sample_index = 0
        self._stats = DropStats()
        self._closed = False

    @property
    def closed(self) -> bool:
        return self._closed

    def close(self):
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    def drop_stats(self) -> DropStats:
        return replace(self._stats)

    def next_block(self, n_samples: int) -> IQBlock:
        if self._closed:
            raise SourceClosed("handle is closed")
        if n_samples <= 0:
            raise ValueError("n_samples must be > 0")
        return self._produce(n_samples)

    def _produce(self, n_samples: int) -> IQBlock:
        raise NotImplementedError

    def _stamp(self, samples: np.ndarray, drop_flag: bool = False,
               clock: Optional[ClockModel] = None) -> IQBlock:
        """Wrap samples for the current stream position and advance it."""
        n = samples.shape[-1]
        t_true = sample_index_to_ns(self._sample_index, self.descriptor.sample_rate_sps)
        t_local = clock.local_time_ns(t_true) if clock is not None else t_true
        blk = IQBlock(
            stream_id=self.descriptor.stream_id,
            seq=self._seq,
            start_sample_index=self._sample_index,
            start_time_local_ns=t_local,
            samples=samples,
            drop_flag=drop_flag,
        )
        self._seq += 1
        self._sample_index += n
        self._stats.blocks_received += 1
        return blk


class _ToneHandle(SourceHandle):
    def __init__(self, cfg: ToneConfig):
        desc = StreamDescriptor(
            stream_id=cfg.stream_id,
            sample_rate_sps=cfg.sample_rate_sps,
            center_freq_hz=cfg.center_freq_hz,
            channel_count=cfg.channel_count,
            clock_id=cfg.clock.clock_id if cfg.clock else "local",
        )
        super().__init__(desc)
        self._cfg = cfg
        f, fs = cfg.freq_hz, cfg.sample_rate_sps
        # reduce the index modulo the repetition period when it is exact,
        # so phase math never loses precision at large stream positions
        self._period = None
        if float(f).is_integer() and float(fs).is_integer() and f != 0:
            self._period = int(fs) // math.gcd(abs(int(f)), int(fs))

    def _produce(self, n: int) -> IQBlock:
        cfg = self._cfg
        n0 = self._sample_index
        if self._period:
            n0 %= self._period
        idx = np.arange(n0, n0 + n, dtype=np.float64)
        frac = np.mod(cfg.freq_hz / cfg.sample_rate_sps * idx + cfg.phase_cycles, 1.0)
        out = np.exp(2j * np.pi * frac)
        # quarter-circle points are exact by construction (1, j, -1, -j)
        q = frac * 4.0
        qi = np.rint(q)
        on_axis = q == qi
        table = np.array([1, 1j, -1, -1j], dtype=np.complex128)
        out[on_axis] = table[qi[on_axis].astype(np.int64) % 4]
        out = (cfg.amplitude * out).astype(np.complex64)
        block = np.ascontiguousarray(
            np.broadcast_to(out, (cfg.channel_count, n))
        )
        return self._stamp(block, clock=cfg.clock)


class _PrngHandle(SourceHandle):
    def __init__(self, cfg: PrngConfig):
        desc = StreamDescriptor(
            stream_id=cfg.stream_id,
            sample_rate_sps=cfg.sample_rate_sps,
            center_freq_hz=cfg.center_freq_hz,
            channel_count=cfg.channel_count,
            clock_id=cfg.clock.clock_id if cfg.clock else "local",
        )
        super().__init__(desc)
        self._cfg = cfg
        self._rng = np.random.default_rng(cfg.seed)

    def _produce(self, n: int) -> IQBlock:
        c = self._cfg.channel_count
        scale = np.float32(1.0 / math.sqrt(2.0))
        out = np.empty((c, n), dtype=np.complex64)
        out.real = self._rng.standard_normal((c, n), dtype=np.float32) * scale
        out.imag = self._rng.standard_normal((c, n), dtype=np.float32) * scale
        return self._stamp(out, clock=self._cfg.clock)


class _OfdmLinkHandle(SourceHandle):
    def __init__(self, cfg: OfdmLinkConfig):
        # inherently single-channel: one simulated link, one stream
        desc = StreamDescriptor(
            stream_id=cfg.stream_id,
            sample_rate_sps=cfg.sample_rate_sps,
            center_freq_hz=cfg.center_freq_hz,
            channel_count=1,
            clock_id=cfg.clock.clock_id if cfg.clock else "local",
        )
        super().__init__(desc)
        self._cfg = cfg
        self._frame_idx = 0
        self._pending = np.zeros(0, dtype=np.complex64)

    def _next_frame(self) -> np.ndarray:
        cfg = self._cfg
        o = cfg.ofdm
        rng = np.random.default_rng(phy._mix_seed(cfg.seed, self._frame_idx))
        bits = rng.integers(0, 2, size=o.data_bits_per_frame, dtype=np.uint8)
        rows = np.full(
            (o.symbols_per_frame, o.n_used), o.pilot_value, dtype=np.complex128
        )
        rows[:, list(o.data_positions)] = phy.map_bits(bits, o.modulation).reshape(
            o.symbols_per_frame, len(o.data_positions)
        )
        tx = phy._mod_frame(rows, o).ravel()
        chan = replace(
            cfg.channel, seed=phy._mix_seed(cfg.channel.seed, self._frame_idx)
        )
        rx = phy.apply_channel(tx, chan)
        self._frame_idx += 1
        return rx.astype(np.complex64)

    def _produce(self, n: int) -> IQBlock:
        parts = [self._pending]
        have = self._pending.size
        while have < n:
            f = self._next_frame()
            parts.append(f)
            have += f.size
        buf = np.concatenate(parts) if len(parts) > 1 else parts[0]
        out, self._pending = buf[:n], buf[n:]
        return self._stamp(out.reshape(1, n), clock=self._cfg.clock)


class _FileReplayHandle(SourceHandle):
    def __init__(self, cfg: FileReplayConfig):
        desc = StreamDescriptor(
            stream_id=cfg.stream_id,
            sample_rate_sps=cfg.sample_rate_sps,
            center_freq_hz=cfg.center_freq_hz,
            channel_count=cfg.channel_count,
            clock_id=cfg.clock_id,
        )
        super().__init__(desc)
        self._cfg = cfg
        self._fh = open(cfg.path, "rb")  # raises FileNotFoundError
        self._fh.seek(0, 2)
        total_bytes = self._fh.tell()
        self._fh.seek(0)
        self._total = total_bytes // BYTES_PER_SAMPLE
        if self._total == 0:
            self._fh.close()
            raise InvalidConfig(f"{cfg.path} holds no complete cf32 samples")
        self._exhausted = False

    def close(self):
        if not self._closed:
            self._fh.close()
        super().close()

    def _read(self, count: int) -> np.ndarray:
        return np.frombuffer(
            self._fh.read(count * BYTES_PER_SAMPLE), dtype=np.complex64
        )

    def _produce(self, n: int) -> IQBlock:
        if self._exhausted:
            raise EndOfStream(self._cfg.path)
        want = n * self._cfg.channel_count
        chunks = []
        got = 0
        while got < want:
            part = self._read(want - got)
            if part.size:
                chunks.append(part)
                got += part.size
            else:
                if not self._cfg.loop:
                    break
                self._fh.seek(0)
        if not chunks:
            self._exhausted = True
            raise EndOfStream(self._cfg.path)
        data = np.concatenate(chunks) if len(chunks) != 1 else chunks[0]
        c = self._cfg.channel_count
        n_out = data.size // c
        if n_out * c != data.size:  # ragged tail across channels
            data = data[: n_out * c]
        if n_out < n:
            self._exhausted = True  # deliver the short tail, then EndOfStream
        return self._stamp(data.reshape(c, n_out))


class _NetworkHandle(SourceHandle):
    def __init__(self, cfg: NetworkListenerConfig):
        desc = StreamDescriptor(
            stream_id=cfg.stream_id or f"udp:{cfg.port}",
            sample_rate_sps=cfg.sample_rate_sps,
            center_freq_hz=cfg.center_freq_hz,
            channel_count=cfg.channel_count,
            clock_id=cfg.clock_id,
        )
        super().__init__(desc)
        self._cfg = cfg
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 22)
            sock.bind((cfg.bind_addr, cfg.port))
        except OSError as exc:
            sock.close()
            if exc.errno == 98:  # EADDRINUSE
                raise PortInUse(f"port {cfg.port} is already bound") from exc
            raise
        sock.settimeout(cfg.timeout_s)
        self._sock = sock
        self.port = sock.getsockname()[1]
        self._expected_wire_seq = None

    def close(self):
        if not self._closed:
            self._sock.close()
        super().close()

    def _produce(self, n_samples: int) -> IQBlock:
        # one datagram in, one block out; n_samples is an upper bound the
        # sender is trusted to respect
        while True:
            try:
                data = self._sock.recv(1 << 16)
            except socket.timeout:
                raise ReceiveTimeout(
                    f"no datagram within {self._cfg.timeout_s}s"
                ) from None
            try:
                hdr, samples = decode_datagram(data)
            except ValueError:
                self._stats.bad_datagrams += 1
                continue
            break

        drop = False
        if self._expected_wire_seq is None:
            self._expected_wire_seq = hdr.seq + 1
        elif hdr.seq == self._expected_wire_seq:
            self._expected_wire_seq += 1
        elif hdr.seq > self._expected_wire_seq:
            self._stats.blocks_dropped += hdr.seq - self._expected_wire_seq
            self._expected_wire_seq = hdr.seq + 1
            drop = True
        else:
            # a previously-presumed-lost datagram showed up late
            self._stats.out_of_order += 1
            if self._stats.blocks_dropped > 0:
                self._stats.blocks_dropped -= 1
            drop = True

        c = self.descriptor.channel_count
        n = samples.size // c
        blk = IQBlock(
            stream_id=self.descriptor.stream_id,
            seq=self._seq,
            start_sample_index=hdr.start_sample_index,
            start_time_local_ns=hdr.start_time_local_ns,
            samples=samples[: n * c].reshape(c, n),
            drop_flag=drop,
        )
        self._seq += 1
        self._stats.blocks_received += 1
        return blk


def open_source(cfg) -> SourceHandle:
    """Build a handle for any SourceConfig variant."""
    if isinstance(cfg, ToneConfig):
        return _ToneHandle(cfg)
    if isinstance(cfg, PrngConfig):
        return _PrngHandle(cfg)
    if isinstance(cfg, OfdmLinkConfig):
        return _OfdmLinkHandle(cfg)
    if isinstance(cfg, FileReplayConfig):
        return _FileReplayHandle(cfg)
    if isinstance(cfg, NetworkListenerConfig):
        return _NetworkHandle(cfg)
    raise InvalidConfig(f"unknown source config {type(cfg).__name__}")


# ------------------------------------------------------------- wire codec


@dataclass(frozen=True)
class WireHeader:
    stream_id: int
    seq: int
    start_sample_index: int
    start_time_local_ns: int
    sample_count: int


def encode_datagram(
    stream_id: int,
    seq: int,
    start_sample_index: int,
    start_time_local_ns: int,
    samples: np.ndarray,
) -> bytes:
    """Frame one block of complex64 samples for the wire."""
    s = np.ascontiguousarray(samples, dtype=np.complex64).ravel()
    header = WIRE_HEADER.pack(
        WIRE_MAGIC,
        WIRE_VERSION,
        WIRE_FORMAT_CF32,
        stream_id,
        seq,
        start_sample_index,
        start_time_local_ns,
        s.size,
    )
    return header + s.tobytes()


def decode_datagram(data: bytes) -> tuple[WireHeader, np.ndarray]:
    """Parse one datagram; ValueError on any malformed field."""
    if len(data) < WIRE_HEADER.size:
        raise ValueError("datagram shorter than header")
    magic, version, fmt, stream_id, seq, ssi, t_ns, count = WIRE_HEADER.unpack_from(
        data
    )
    if magic != WIRE_MAGIC:
        raise ValueError("bad magic")
    if version != WIRE_VERSION:
        raise ValueError(f"unsupported version {version}")
    if fmt != WIRE_FORMAT_CF32:
        raise ValueError(f"unsupported sample format {fmt}")
    payload = data[WIRE_HEADER.size :]
    if len(payload) != count * BYTES_PER_SAMPLE:
        raise ValueError("payload length disagrees with sample_count")
    samples = np.frombuffer(payload, dtype=np.complex64)
    return WireHeader(stream_id, seq, ssi, t_ns, count), samples


class UdpSender:
    """Datagram-per-block sender for loopback tests and demos."""

    def __init__(self, host: str, port: int, stream_id: int = 0):
        self.addr = (host, port)
        self.stream_id = stream_id
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)

    def send(
        self,
        samples: np.ndarray,
        seq: int,
        start_sample_index: int = 0,
        start_time_local_ns: int = 0,
    ):
        self._sock.sendto(
            encode_datagram(
                self.stream_id, seq, start_sample_index, start_time_local_ns, samples
            ),
            self.addr,
        )

    def send_raw(self, payload: bytes):
        self._sock.sendto(payload, self.addr)

    def close(self):
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
