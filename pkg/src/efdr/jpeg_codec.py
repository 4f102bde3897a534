"""Baseline JPEG coefficient codec.

Reads baseline sequential, 8-bit, Huffman coded, three component 4:4:4
JPEG files into their quantized DCT coefficients and writes (possibly
modified) coefficients back out without ever touching pixels.

Only the subset needed for coefficient-domain hiding is supported.
Anything else (progressive, arithmetic coding, 12-bit samples, chroma
subsampling, grayscale) is rejected with :class:`UnsupportedFormat`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

# natural index of the k-th coefficient in zig-zag order
ZIGZAG = np.array([
    0, 1, 8, 16, 9, 2, 3, 10,
    17, 24, 32, 25, 18, 11, 4, 5,
    12, 19, 26, 33, 40, 48, 41, 34,
    27, 20, 13, 6, 7, 14, 21, 28,
    35, 42, 49, 56, 57, 50, 43, 36,
    29, 22, 15, 23, 30, 37, 44, 51,
    58, 59, 52, 45, 38, 31, 39, 46,
    53, 60, 61, 54, 47, 55, 62, 63,
])

# Annex K.1 base tables, natural order
LUMA_BASE = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
]).reshape(8, 8)

CHROMA_BASE = np.array([
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
]).reshape(8, 8)

# DC is limited so every DC difference fits Huffman category 11
DC_RANGE = (-1024, 1023)
AC_RANGE = (-1023, 1023)

_SOF_NAMES = {
    0xC1: "extended sequential", 0xC2: "progressive", 0xC3: "lossless",
    0xC5: "differential sequential", 0xC6: "differential progressive",
    0xC7: "differential lossless", 0xC9: "arithmetic sequential",
    0xCA: "arithmetic progressive", 0xCB: "arithmetic lossless",
    0xCD: "arithmetic differential sequential",
    0xCE: "arithmetic differential progressive",
    0xCF: "arithmetic differential lossless",
}


class JpegError(Exception):
    pass


class UnsupportedFormat(JpegError):
    pass


class CorruptStream(JpegError):
    pass


class TruncatedFile(JpegError):
    pass


class EncodabilityError(JpegError):
    pass


@dataclass
class Component:
    id: int
    quant_table_id: int
    dc_table_id: int = 0
    ac_table_id: int = 0
    h: int = 1
    v: int = 1


@dataclass
class HuffmanTable:
    counts: list[int]   # number of codes of each length 1..16
    symbols: list[int]

    def codes(self) -> dict[int, tuple[int, int]]:
        """symbol -> (code, length), canonical assignment of Annex C."""
        out = {}
        code = 0
        k = 0
        for length in range(1, 17):
            for _ in range(self.counts[length - 1]):
                out[self.symbols[k]] = (code, length)
                code += 1
                k += 1
            code <<= 1
        return out

    def lookup(self) -> tuple[list[int], list[int]]:
        # 16-bit prefix -> symbol / code length; length 0 marks an invalid code
        sym = [0] * 65536
        ln = [0] * 65536
        for s, (code, length) in self.codes().items():
            lo = code << (16 - length)
            hi = lo + (1 << (16 - length))
            sym[lo:hi] = [s] * (hi - lo)
            ln[lo:hi] = [length] * (hi - lo)
        return sym, ln


@dataclass
class CoefficientImage:
    """Quantized DCT coefficients of a 4:4:4 color image.

    ``blocks`` has shape (3, H/8, W/8, 8, 8) in natural frequency order and
    ``quant_steps`` shape (3, 8, 8), the quantizer step of each channel.
    """
    blocks: np.ndarray
    quant_steps: np.ndarray

    @property
    def shape(self):
        return self.blocks.shape

    def validate(self):
        b = self.blocks
        if b.ndim != 5 or b.shape[0] != 3 or b.shape[3:] != (8, 8):
            raise ValueError(f"bad coefficient shape {b.shape}")
        if not np.issubdtype(b.dtype, np.integer):
            raise ValueError("coefficients must be integers")
        dc = b[..., 0, 0]
        ac = b.reshape(b.shape[:3] + (64,))[..., 1:]
        if dc.min(initial=0) < DC_RANGE[0] or dc.max(initial=0) > DC_RANGE[1]:
            raise EncodabilityError("DC coefficient outside baseline range")
        if ac.min(initial=0) < AC_RANGE[0] or ac.max(initial=0) > AC_RANGE[1]:
            raise EncodabilityError("AC coefficient outside baseline range")

    def copy(self):
        return CoefficientImage(self.blocks.copy(), self.quant_steps.copy())


@dataclass
class JpegFile:
    width: int
    height: int
    components: list[Component]
    quant_tables: dict[int, np.ndarray]  # id -> (8, 8) natural order
    coefficients: CoefficientImage
    huff_tables: dict[tuple[int, int], HuffmanTable] = field(default_factory=dict)
    restart_interval: int | None = None

    @classmethod
    def from_coefficients(cls, blocks, luma_table, chroma_table) -> "JpegFile":
        blocks = np.asarray(blocks)
        luma = np.asarray(luma_table, dtype=np.int32).reshape(8, 8)
        chroma = np.asarray(chroma_table, dtype=np.int32).reshape(8, 8)
        comps = [Component(1, 0, 0, 0), Component(2, 1, 1, 1), Component(3, 1, 1, 1)]
        steps = np.stack([luma, chroma, chroma])
        coeffs = CoefficientImage(blocks.astype(np.int32), steps)
        return cls(blocks.shape[2] * 8, blocks.shape[1] * 8, comps,
                   {0: luma, 1: chroma}, coeffs)

    def with_blocks(self, blocks) -> "JpegFile":
        """Same file structure carrying different coefficients."""
        coeffs = CoefficientImage(np.asarray(blocks).astype(np.int32),
                                  self.coefficients.quant_steps.copy())
        return JpegFile(self.width, self.height, list(self.components),
                        {k: v.copy() for k, v in self.quant_tables.items()},
                        coeffs, dict(self.huff_tables), self.restart_interval)


def make_quant_tables(qf: int) -> tuple[np.ndarray, np.ndarray]:
    """IJG quality scaling of the Annex K tables; returns (luma, chroma), natural order."""
    if not 1 <= qf <= 100:
        raise ValueError(f"quality factor {qf} outside 1..100")
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    def scaled(base):
        return np.clip((base * scale + 50) // 100, 1, 255).astype(np.int32)
    return scaled(LUMA_BASE), scaled(CHROMA_BASE)


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def dequantize(coeffs: CoefficientImage) -> np.ndarray:
    return coeffs.blocks * coeffs.quant_steps[:, None, None, :, :].astype(np.float64)


def clamp_coefficients(q: np.ndarray) -> np.ndarray:
    q = np.clip(q, AC_RANGE[0], AC_RANGE[1])
    q[..., 0, 0] = np.clip(q[..., 0, 0], DC_RANGE[0], DC_RANGE[1])
    return q


def quantize(blocks: np.ndarray, quant_steps: np.ndarray) -> CoefficientImage:
    """Divide by the step, round half away from zero, clamp to baseline ranges."""
    steps = np.asarray(quant_steps)
    q = _round_half_away(np.asarray(blocks, dtype=np.float64) / steps[:, None, None, :, :])
    return CoefficientImage(clamp_coefficients(q).astype(np.int32), steps.copy())


# ---------------------------------------------------------------- parsing

class _BitReader:
    def __init__(self, data: bytes):
        self.data = data + b"\x00\x00\x00"
        self.nbits = len(data) * 8
        self.pos = 0

    def peek16(self):
        p = self.pos >> 3
        chunk = (self.data[p] << 16) | (self.data[p + 1] << 8) | self.data[p + 2]
        return (chunk >> (8 - (self.pos & 7))) & 0xFFFF

    def read(self, n):
        if n == 0:
            return 0
        v = self.peek16() >> (16 - n)
        self.pos += n
        if self.pos > self.nbits:
            raise CorruptStream("Huffman data overrun")
        return v

    def decode(self, table):
        sym, ln = table
        bits = self.peek16()
        n = ln[bits]
        if n == 0:
            raise CorruptStream("invalid Huffman code")
        self.pos += n
        if self.pos > self.nbits:
            raise CorruptStream("Huffman data overrun")
        return sym[bits]


def _extend(v, s):
    return v if v >= 1 << (s - 1) else v - (1 << s) + 1


def _split_scan(data: bytes, pos: int) -> tuple[list[bytes], int]:
    """Entropy-coded segments of one scan (split at RSTn) and the offset of the next marker."""
    segments = []
    start = pos
    n = len(data)
    while True:
        i = data.find(b"\xff", pos)
        if i < 0 or i + 1 >= n:
            raise TruncatedFile("scan data runs past end of file")
        nxt = data[i + 1]
        if nxt == 0x00:
            pos = i + 2
        elif 0xD0 <= nxt <= 0xD7:
            segments.append(data[start:i])
            start = pos = i + 2
        elif nxt == 0xFF:
            pos = i + 1
        else:
            segments.append(data[start:i])
            return [s.replace(b"\xff\x00", b"\xff") for s in segments], i


def parse(data: bytes) -> JpegFile:
    """Parse a baseline JPEG into its quantized coefficients."""
    data = bytes(data)
    if len(data) < 4:
        raise TruncatedFile("file too short")
    if data[:2] != b"\xff\xd8":
        raise CorruptStream("missing SOI marker")
    pos = 2
    quant = {}
    huff = {}
    lookups = {}
    comps: list[Component] = []
    width = height = 0
    restart = None
    blocks = None
    seen_eoi = False

    def segment(p):
        if p + 2 > len(data):
            raise TruncatedFile("segment length missing")
        length = struct.unpack(">H", data[p:p + 2])[0]
        if length < 2:
            raise CorruptStream("bad segment length")
        if p + length > len(data):
            raise TruncatedFile("segment runs past end of file")
        return data[p + 2:p + length], p + length

    while pos < len(data):
        if data[pos] != 0xFF:
            raise CorruptStream(f"expected marker at offset {pos}")
        while pos < len(data) and data[pos] == 0xFF:
            pos += 1
        if pos >= len(data):
            raise TruncatedFile("dangling marker prefix")
        marker = data[pos]
        pos += 1
        if marker == 0xD9:
            seen_eoi = True
            break
        if marker == 0xD8 or 0xD0 <= marker <= 0xD7 or marker == 0x01:
            raise CorruptStream(f"unexpected marker 0xFF{marker:02X}")
        body, pos = segment(pos)
        if marker in _SOF_NAMES:
            raise UnsupportedFormat(f"{_SOF_NAMES[marker]} JPEG (0xFF{marker:02X}) not supported")
        if marker == 0xCC:
            raise UnsupportedFormat("arithmetic coding not supported")
        if marker == 0xDB:
            i = 0
            while i < len(body):
                pq, tq = body[i] >> 4, body[i] & 15
                i += 1
                if pq != 0:
                    raise UnsupportedFormat("16-bit quantization tables not supported")
                if i + 64 > len(body):
                    raise CorruptStream("short DQT segment")
                zz = np.frombuffer(body[i:i + 64], dtype=np.uint8).astype(np.int32)
                nat = np.zeros(64, dtype=np.int32)
                nat[ZIGZAG] = zz
                if nat.min() < 1:
                    raise CorruptStream("zero quantization step")
                quant[tq] = nat.reshape(8, 8)
                i += 64
        elif marker == 0xC4:
            i = 0
            while i < len(body):
                tc, th = body[i] >> 4, body[i] & 15
                if i + 17 > len(body):
                    raise CorruptStream("short DHT segment")
                counts = list(body[i + 1:i + 17])
                total = sum(counts)
                if i + 17 + total > len(body):
                    raise CorruptStream("short DHT segment")
                symbols = list(body[i + 17:i + 17 + total])
                huff[(tc, th)] = HuffmanTable(counts, symbols)
                lookups[(tc, th)] = huff[(tc, th)].lookup()
                i += 17 + total
        elif marker == 0xC0:
            precision, height, width, ncomp = struct.unpack(">BHHB", body[:6])
            if precision != 8:
                raise UnsupportedFormat(f"{precision}-bit samples not supported")
            if ncomp != 3:
                raise UnsupportedFormat(f"{ncomp} components; need 3 (YCbCr)")
            if height == 0:
                raise UnsupportedFormat("DNL-defined height not supported")
            if width % 8 or height % 8:
                raise UnsupportedFormat(f"dimensions {width}x{height} not multiples of 8")
            comps = []
            for k in range(3):
                cid, hv, tq = body[6 + 3 * k:9 + 3 * k]
                if hv != 0x11:
                    raise UnsupportedFormat("chroma subsampling not supported (need 4:4:4)")
                comps.append(Component(cid, tq))
            blocks = np.zeros((3, height // 8, width // 8, 64), dtype=np.int32)
        elif marker == 0xDD:
            restart = struct.unpack(">H", body[:2])[0] or None
        elif marker == 0xDA:
            if blocks is None:
                raise CorruptStream("SOS before SOF")
            ns = body[0]
            scan = []
            for k in range(ns):
                cs, t = body[1 + 2 * k:3 + 2 * k]
                idx = next((j for j, c in enumerate(comps) if c.id == cs), None)
                if idx is None:
                    raise CorruptStream(f"scan references unknown component {cs}")
                comps[idx].dc_table_id = t >> 4
                comps[idx].ac_table_id = t & 15
                scan.append(idx)
            ss, se, ahal = body[1 + 2 * ns:4 + 2 * ns]
            if ss != 0 or se != 63 or ahal != 0:
                raise UnsupportedFormat("spectral selection / successive approximation not supported")
            segments, pos = _split_scan(data, pos)
            _decode_scan(segments, scan, comps, lookups, blocks, restart)
        # APPn, COM and other segments are skipped

    if not seen_eoi:
        raise TruncatedFile("missing EOI marker")
    if blocks is None:
        raise CorruptStream("no frame header")
    for c in comps:
        if c.quant_table_id not in quant:
            raise CorruptStream(f"missing quantization table {c.quant_table_id}")
    nat = np.zeros_like(blocks)
    nat[..., ZIGZAG] = blocks
    steps = np.stack([quant[c.quant_table_id] for c in comps])
    coeffs = CoefficientImage(nat.reshape(blocks.shape[:3] + (8, 8)), steps)
    return JpegFile(width, height, comps, quant, coeffs, huff, restart)


def _decode_scan(segments, scan, comps, lookups, blocks, restart):
    _, bh, bw, _ = blocks.shape
    nmcu = bh * bw
    per_seg = restart or nmcu
    tables = []
    for idx in scan:
        c = comps[idx]
        try:
            tables.append((idx, lookups[(0, c.dc_table_id)], lookups[(1, c.ac_table_id)]))
        except KeyError:
            raise CorruptStream("scan uses undefined Huffman table") from None
    expected = -(-nmcu // per_seg)
    if len(segments) < expected:
        raise TruncatedFile("missing restart intervals")
    for seg_no in range(expected):
        r = _BitReader(segments[seg_no])
        pred = [0, 0, 0]
        for m in range(seg_no * per_seg, min(nmcu, (seg_no + 1) * per_seg)):
            by, bx = divmod(m, bw)
            for idx, dct, act in tables:
                out = blocks[idx, by, bx]
                s = r.decode(dct)
                if s > 11:
                    raise CorruptStream("DC magnitude category out of range")
                if s:
                    pred[idx] += _extend(r.read(s), s)
                out[0] = pred[idx]
                k = 1
                while k < 64:
                    rs = r.decode(act)
                    run, s = rs >> 4, rs & 15
                    if s == 0:
                        if run != 15:
                            break
                        k += 16
                        continue
                    k += run
                    if k > 63:
                        raise CorruptStream("AC run exceeds block")
                    out[k] = _extend(r.read(s), s)
                    k += 1


# ---------------------------------------------------------------- writing

class _BitWriter:
    def __init__(self):
        self.out = bytearray()
        self.acc = 0
        self.n = 0

    def write(self, value, length):
        self.acc = (self.acc << length) | (value & ((1 << length) - 1))
        self.n += length
        while self.n >= 8:
            self.n -= 8
            b = (self.acc >> self.n) & 0xFF
            self.out.append(b)
            if b == 0xFF:
                self.out.append(0)
        self.acc &= (1 << self.n) - 1

    def flush(self):
        if self.n:
            self.write((1 << (8 - self.n)) - 1, 8 - self.n)
        return bytes(self.out)


def _category(v):
    return abs(v).bit_length()


def _block_symbols(zz_block, pred):
    """(symbol, extra bits, extra length) stream for one zig-zag ordered block."""
    diff = int(zz_block[0]) - pred
    s = _category(diff)
    if s > 11:
        raise EncodabilityError(f"DC difference {diff} exceeds baseline category 11")
    dc = (s, diff if diff >= 0 else diff + (1 << s) - 1, s)
    ac = []
    nz = np.flatnonzero(zz_block[1:]) + 1
    last = 0
    for k in nz:
        run = k - last - 1
        while run > 15:
            ac.append((0xF0, 0, 0))
            run -= 16
        v = int(zz_block[k])
        s = _category(v)
        if s > 10:
            raise EncodabilityError(f"AC coefficient {v} exceeds baseline category 10")
        ac.append(((run << 4) | s, v if v >= 0 else v + (1 << s) - 1, s))
        last = k
    if last != 63:
        ac.append((0x00, 0, 0))
    return dc, ac


def optimal_huffman(freq: dict[int, int]) -> HuffmanTable:
    """Length-limited optimal table from symbol frequencies (Annex K.2)."""
    f = [0] * 257
    for s, c in freq.items():
        f[s] = c
    f[256] = 1  # reserved so no code is all ones
    codesize = [0] * 257
    others = [-1] * 257
    while True:
        c1 = -1
        v = None
        for i in range(257):
            if f[i] and (v is None or f[i] <= v):
                v, c1 = f[i], i
        c2 = -1
        v = None
        for i in range(257):
            if f[i] and i != c1 and (v is None or f[i] <= v):
                v, c2 = f[i], i
        if c2 < 0:
            break
        f[c1] += f[c2]
        f[c2] = 0
        codesize[c1] += 1
        while others[c1] >= 0:
            c1 = others[c1]
            codesize[c1] += 1
        others[c1] = c2
        codesize[c2] += 1
        while others[c2] >= 0:
            c2 = others[c2]
            codesize[c2] += 1
    bits = [0] * 33
    for i in range(257):
        if codesize[i]:
            bits[codesize[i]] += 1
    for i in range(32, 16, -1):
        while bits[i] > 0:
            j = i - 2
            while bits[j] == 0:
                j -= 1
            bits[i] -= 2
            bits[i - 1] += 1
            bits[j + 1] += 2
            bits[j] -= 1
    i = 16
    while bits[i] == 0:
        i -= 1
    bits[i] -= 1  # drop the reserved code
    symbols = []
    for length in range(1, 33):
        symbols.extend(s for s in range(256) if codesize[s] == length)
    return HuffmanTable(bits[1:17], symbols)


def serialize(jf: JpegFile) -> bytes:
    """Encode coefficients as a baseline JPEG with fresh optimal Huffman tables."""
    coeffs = jf.coefficients
    coeffs.validate()
    blocks = coeffs.blocks
    _, bh, bw, _, _ = blocks.shape
    zz = blocks.reshape(3, bh, bw, 64)[..., ZIGZAG]

    # one table pair for luma, one shared by both chroma channels
    table_of = [0, 1, 1]
    streams = []
    dc_freq = [{}, {}]
    ac_freq = [{}, {}]
    preds = [0, 0, 0]
    for by in range(bh):
        for bx in range(bw):
            for c in range(3):
                dc, ac = _block_symbols(zz[c, by, bx], preds[c])
                preds[c] = int(zz[c, by, bx, 0])
                t = table_of[c]
                dc_freq[t][dc[0]] = dc_freq[t].get(dc[0], 0) + 1
                for sym, _, _ in ac:
                    ac_freq[t][sym] = ac_freq[t].get(sym, 0) + 1
                streams.append((t, dc, ac))

    dc_tabs = [optimal_huffman(f) for f in dc_freq]
    ac_tabs = [optimal_huffman(f) for f in ac_freq]
    dc_codes = [t.codes() for t in dc_tabs]
    ac_codes = [t.codes() for t in ac_tabs]

    w = _BitWriter()
    for t, dc, ac in streams:
        code, length = dc_codes[t][dc[0]]
        w.write(code, length)
        if dc[2]:
            w.write(dc[1], dc[2])
        codes = ac_codes[t]
        for sym, extra, n in ac:
            code, length = codes[sym]
            w.write(code, length)
            if n:
                w.write(extra, n)
    scan_data = w.flush()

    out = bytearray(b"\xff\xd8")
    out += _marker(0xE0, b"JFIF\x00\x01\x01\x00\x00\x01\x00\x01\x00\x00")
    used = sorted({c.quant_table_id for c in jf.components})
    for tid in used:
        table = np.asarray(jf.quant_tables[tid]).reshape(64)[ZIGZAG]
        if table.min() < 1 or table.max() > 255:
            raise EncodabilityError("quantization step outside 1..255")
        out += _marker(0xDB, bytes([tid]) + bytes(table.astype(np.uint8).tolist()))
    sof = struct.pack(">BHHB", 8, jf.height, jf.width, 3)
    for c in jf.components:
        sof += bytes([c.id, 0x11, c.quant_table_id])
    out += _marker(0xC0, sof)
    dht = b""
    for tc, tabs in ((0, dc_tabs), (1, ac_tabs)):
        for th, tab in enumerate(tabs):
            dht += bytes([(tc << 4) | th]) + bytes(tab.counts) + bytes(tab.symbols)
    out += _marker(0xC4, dht)
    sos = bytes([3])
    for c, t in zip(jf.components, table_of):
        sos += bytes([c.id, (t << 4) | t])
    sos += b"\x00\x3f\x00"
    out += _marker(0xDA, sos)
    out += scan_data
    out += b"\xff\xd9"
    return bytes(out)


def _marker(code, body):
    return bytes([0xFF, code]) + struct.pack(">H", len(body) + 2) + body


def read_jpeg(path) -> JpegFile:
    with open(path, "rb") as fh:
        return parse(fh.read())


def write_jpeg(jf: JpegFile, path):
    with open(path, "wb") as fh:
        fh.write(serialize(jf))
