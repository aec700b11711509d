"""Binary model container: packed quantized tensors plus a validating loader.

Layout (all multi-byte integers little-endian):

* header: magic ``HFRW``, version u16, n_layers u32, hidden u32, vocab u32,
  term count u8 followed by the per-term field widths (u8 each), directory
  offset u64, directory record count u32;
* payloads: one bit-packed blob per tensor, byte-padded at tensor end;
* directory at the stated offset: per record a length-prefixed UTF-8 name,
  encoding byte, scale descriptor, shape, payload offset and bit length.

Bit packing is MSB-first within every field. Δ-PoT codes store the sign bit
(1 = negative) then the difference fields in order, with no padding between
codes. 9-bit and 16-bit codes are stored as two's complement fields of that
width. Packing the same model twice is byte-identical.

The loader never trusts the directory: every offset, length, enum and code
range is checked and violations raise typed ``ContainerError`` subclasses.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .fxp import A9
from .lnorm import LnConfig
from .mvpa import MvpaConfig
from .quant import (DeltaPotConfig, QMatrix, QVector, TensorScale, U9Vector)
from .engine import BlockWeights, QuantModel, SiteScales

__all__ = [
    "ContainerError",
    "BadMagicError",
    "TruncatedError",
    "CodeRangeError",
    "DirectoryError",
    "UnsupportedVersionError",
    "PackError",
    "pack_model",
    "load_model",
    "describe_container",
    "MAGIC",
    "VERSION",
]

MAGIC = b"HFRW"
VERSION = 1

ENC_DPOT, ENC_U9, ENC_FX16 = 0, 1, 2
SCALE_POT, SCALE_REAL = 0, 1


class ContainerError(Exception):
    """Base class for container format violations."""


class BadMagicError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class CodeRangeError(ContainerError):
    pass


class DirectoryError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class PackError(ValueError):
    pass


def _uint_to_bits(vals: np.ndarray, width: int) -> np.ndarray:
    """Unsigned field values as MSB-first bit columns."""
    vals = np.asarray(vals, dtype=np.int64)
    if vals.size and (vals.min() < 0 or vals.max() >= (1 << width)):
        raise PackError(f"field value does not fit {width} bits")
    shifts = np.arange(width - 1, -1, -1)
    return ((vals[:, None] >> shifts) & 1).astype(np.uint8)


# ---------------------------------------------------------------------------
# Tensor enumeration: the canonical record order of a model.
# ---------------------------------------------------------------------------

def _meta_vector(model: QuantModel) -> np.ndarray:
    eps_exp = round(math.log2(model.ln_out.eps))
    return np.array([model.res_se, model.tree_par, model.mv_cfg.lanes,
                     eps_exp, model.ln_out.out_scale_exp,
                     1 if model.ln_pre is not None else 0], dtype=np.int64)


def _enumerate_tensors(model: QuantModel):
    """Yield (name, encoding, scale, frac_exp, shape, payload_array) rows."""
    yield ("model.meta", ENC_FX16, 0, _meta_vector(model), None)
    yield ("emb.weight", ENC_U9, model.emb_se - A9.frac_bits,
           model.emb_raw.reshape(-1), (model.vocab, model.hidden))
    if model.ln_pre is not None:
        yield from _ln_rows("ln_pre", model.ln_pre)
    for i, blk in enumerate(model.blocks):
        p = f"blocks.{i}"
        yield (f"{p}.act_scales", ENC_FX16, 0,
               np.array(blk.scales.as_list(), dtype=np.int64), None)
        yield from _ln_rows(f"{p}.ln1", blk.ln1)
        for nm, qv in (("mu_r", blk.mu_r), ("cmu_r", blk.cmu_r),
                       ("mu_k", blk.mu_k), ("cmu_k", blk.cmu_k),
                       ("mu_v", blk.mu_v), ("cmu_v", blk.cmu_v)):
            yield (f"{p}.att.{nm}", ENC_DPOT, qv.scale, (qv.signs, qv.deltas), None)
        for nm, qm in (("receptance", blk.w_r), ("key", blk.w_k),
                       ("value", blk.w_v), ("output", blk.w_o)):
            yield (f"{p}.att.{nm}", ENC_DPOT, qm.scale,
                   (qm.signs.reshape(-1), qm.deltas.reshape(-1, qm.config.n_terms)),
                   (qm.rows, qm.cols))
        yield (f"{p}.att.decay", ENC_U9, blk.decay.scale.pot_exp, blk.decay.codes, None)
        yield (f"{p}.att.bonus", ENC_U9, blk.bonus.scale.pot_exp, blk.bonus.codes, None)
        yield from _ln_rows(f"{p}.ln2", blk.ln2)
        for nm, qv in (("mu_r", blk.f_mu_r), ("cmu_r", blk.f_cmu_r),
                       ("mu_k", blk.f_mu_k), ("cmu_k", blk.f_cmu_k)):
            yield (f"{p}.ffn.{nm}", ENC_DPOT, qv.scale, (qv.signs, qv.deltas), None)
        for nm, qm in (("receptance", blk.f_w_r), ("key", blk.f_w_k),
                       ("value", blk.f_w_v)):
            yield (f"{p}.ffn.{nm}", ENC_DPOT, qm.scale,
                   (qm.signs.reshape(-1), qm.deltas.reshape(-1, qm.config.n_terms)),
                   (qm.rows, qm.cols))
    yield from _ln_rows("ln_out", model.ln_out)
    yield ("head.weight", ENC_DPOT, model.head.scale,
           (model.head.signs.reshape(-1),
            model.head.deltas.reshape(-1, model.head.config.n_terms)),
           (model.head.rows, model.head.cols))


def _ln_rows(prefix: str, cfg: LnConfig):
    yield (f"{prefix}.gain", ENC_U9, cfg.gain.scale.pot_exp, cfg.gain.codes, None)
    yield (f"{prefix}.bias", ENC_U9, cfg.bias.scale.pot_exp, cfg.bias.codes, None)


def _payload_bits(encoding: int, count: int, cfg: DeltaPotConfig) -> int:
    if encoding == ENC_DPOT:
        return count * cfg.total_bits
    if encoding == ENC_U9:
        return count * 9
    return count * 16


def pack_model(model: QuantModel) -> bytes:
    """Serialize a quantized model; identical models pack byte-identically."""
    cfg = model.dpot
    head = struct.pack("<4sHIII", MAGIC, VERSION, model.n_layers, model.hidden,
                       model.vocab)
    head += struct.pack("<B", cfg.n_terms)
    head += struct.pack(f"<{cfg.n_terms}B", *cfg.term_bits)
    fixed = len(head) + struct.calcsize("<QI")

    payloads = bytearray()
    records = []
    for name, enc, scale, data, shape2d in _enumerate_tensors(model):
        if enc == ENC_DPOT:
            signs, deltas = data
            if signs.size == 0:
                raise PackError(f"empty payload for {name}")
            if shape2d is not None and signs.size != shape2d[0] * shape2d[1]:
                raise PackError(f"shape mismatch for {name}")
            shape = shape2d if shape2d is not None else (signs.size,)
            cols = [(signs.reshape(-1) < 0).astype(np.uint8)[:, None]]
            flat_deltas = deltas.reshape(-1, cfg.n_terms)
            for t, k in enumerate(cfg.term_bits):
                cols.append(_uint_to_bits(flat_deltas[:, t], k))
            blob = np.packbits(np.hstack(cols).reshape(-1)).tobytes()
            if isinstance(scale, TensorScale):
                kind = SCALE_POT if scale.pot_exp is not None else SCALE_REAL
                sval = scale.pot_exp if kind == SCALE_POT else scale.gamma
            else:
                kind, sval = SCALE_POT, int(scale)
        else:
            arr = np.asarray(data, dtype=np.int64).reshape(-1)
            if arr.size == 0:
                raise PackError(f"empty payload for {name}")
            shape = shape2d if shape2d is not None else (arr.size,)
            width = 9 if enc == ENC_U9 else 16
            blob = np.packbits(
                _uint_to_bits(arr & ((1 << width) - 1), width).reshape(-1)).tobytes()
            if scale is None:
                raise PackError(f"{name} needs a power-of-two scale")
            kind, sval = SCALE_POT, int(scale)
        records.append((name, enc, kind, sval, shape,
                        fixed + len(payloads),
                        _payload_bits(enc, int(np.prod(shape)), cfg)))
        payloads += blob

    directory = bytearray()
    for name, enc, kind, sval, shape, off, bits in records:
        nb = name.encode("utf-8")
        directory += struct.pack("<H", len(nb)) + nb
        directory += struct.pack("<BB", enc, kind)
        directory += struct.pack("<i", sval) if kind == SCALE_POT else struct.pack("<d", sval)
        directory += struct.pack("<B", len(shape))
        directory += struct.pack(f"<{len(shape)}I", *shape)
        directory += struct.pack("<QQ", off, bits)

    dir_offset = fixed + len(payloads)
    head += struct.pack("<QI", dir_offset, len(records))
    return bytes(head) + bytes(payloads) + bytes(directory)


# ---------------------------------------------------------------------------
# Loading and validation.
# ---------------------------------------------------------------------------

class _Cursor:
    def __init__(self, data: bytes, pos: int):
        self.data = data
        self.pos = pos

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise TruncatedError("directory ends mid-record")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out


def _parse_directory(data: bytes, offset: int, count: int, file_len: int):
    cur = _Cursor(data, offset)
    records = {}
    order = []
    for _ in range(count):
        (nlen,) = cur.unpack("<H")
        if cur.pos + nlen > len(data):
            raise TruncatedError("directory name exceeds file")
        try:
            name = data[cur.pos:cur.pos + nlen].decode("utf-8", errors="strict")
        except UnicodeDecodeError as e:
            raise DirectoryError(f"undecodable tensor name: {e}") from e
        cur.pos += nlen
        enc, kind = cur.unpack("<BB")
        if enc not in (ENC_DPOT, ENC_U9, ENC_FX16):
            raise DirectoryError(f"unknown encoding {enc} for {name}")
        if kind == SCALE_POT:
            (sval,) = cur.unpack("<i")
        elif kind == SCALE_REAL:
            (sval,) = cur.unpack("<d")
        else:
            raise DirectoryError(f"unknown scale kind {kind} for {name}")
        (ndim,) = cur.unpack("<B")
        if not (1 <= ndim <= 2):
            raise DirectoryError(f"bad rank {ndim} for {name}")
        shape = cur.unpack(f"<{ndim}I")
        if any(s == 0 for s in shape):
            raise DirectoryError(f"zero-sized dimension in {name}")
        off, bits = cur.unpack("<QQ")
        byte_len = (bits + 7) // 8
        if off + byte_len > file_len or off < 0:
            raise DirectoryError(f"dangling payload for {name}")
        if name in records:
            raise DirectoryError(f"duplicate tensor {name}")
        records[name] = (enc, kind, sval, shape, off, bits)
        order.append(name)
    return records, order


def _read_header(data: bytes):
    base = struct.calcsize("<4sHIIIB")
    if len(data) < base:
        raise TruncatedError("file shorter than the fixed header")
    magic, version, n_layers, hidden, vocab, n_terms = struct.unpack_from("<4sHIIIB", data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if n_layers == 0 or hidden == 0 or vocab == 0:
        raise DirectoryError("dimensions must be positive")
    if not (1 <= n_terms <= 8):
        raise DirectoryError(f"bad term count {n_terms}")
    if len(data) < base + n_terms + struct.calcsize("<QI"):
        raise TruncatedError("file shorter than the header")
    ks = struct.unpack_from(f"<{n_terms}B", data, base)
    if any(not (1 <= k <= 8) for k in ks):
        raise DirectoryError(f"bad field widths {ks}")
    dir_offset, dir_count = struct.unpack_from("<QI", data, base + n_terms)
    if dir_offset > len(data):
        raise TruncatedError("directory offset beyond end of file")
    if dir_count > 100_000:
        raise DirectoryError(f"implausible record count {dir_count}")
    cfg = DeltaPotConfig(ks)
    return cfg, n_layers, hidden, vocab, dir_offset, dir_count


def _payload_bit_matrix(data: bytes, off: int, bits: int, count: int,
                        width: int) -> np.ndarray:
    """MSB-first payload bits as a (count, width) 0/1 matrix."""
    if bits != count * width:
        raise DirectoryError("payload bit length does not match shape")
    byte_len = (bits + 7) // 8
    chunk = data[off:off + byte_len]
    if len(chunk) != byte_len:
        raise TruncatedError("payload ends mid-field")
    flat = np.unpackbits(np.frombuffer(chunk, dtype=np.uint8))
    return flat[:bits].reshape(count, width)


def _bits_to_uint(bits2d: np.ndarray) -> np.ndarray:
    width = bits2d.shape[1]
    weights = (1 << np.arange(width - 1, -1, -1)).astype(np.int64)
    return bits2d.astype(np.int64) @ weights


def _decode_ints(data: bytes, off: int, bits: int, count: int, width: int) -> np.ndarray:
    vals = _bits_to_uint(_payload_bit_matrix(data, off, bits, count, width))
    return np.where(vals >= (1 << (width - 1)), vals - (1 << width), vals)


def _decode_dpot(data: bytes, off: int, bits: int, count: int, cfg: DeltaPotConfig):
    mat = _payload_bit_matrix(data, off, bits, count, cfg.total_bits)
    signs = np.where(mat[:, 0] == 1, -1, 1).astype(np.int8)
    deltas = np.empty((count, cfg.n_terms), dtype=np.uint8)
    pos = 1
    for t, k in enumerate(cfg.term_bits):
        deltas[:, t] = _bits_to_uint(mat[:, pos:pos + k]).astype(np.uint8)
        pos += k
    return signs, deltas


def _check_exp(val: int, name: str) -> int:
    """Power-of-two exponents must stay in a sane range to be constructible."""
    if not (-64 <= val <= 64):
        raise DirectoryError(f"implausible scale exponent {val} in {name}")
    return int(val)


class _Loaded:
    """Typed accessors over the parsed directory."""

    def __init__(self, data, records, cfg):
        self.data = data
        self.records = records
        self.cfg = cfg

    def _rec(self, name, want_enc):
        rec = self.records.get(name)
        if rec is None:
            raise DirectoryError(f"missing tensor {name}")
        enc, kind, sval, shape, off, bits = rec
        if enc != want_enc:
            raise DirectoryError(f"tensor {name} has encoding {enc}, expected {want_enc}")
        return enc, kind, sval, shape, off, bits

    def fx16(self, name, expect_len=None) -> np.ndarray:
        _, _, _, shape, off, bits = self._rec(name, ENC_FX16)
        count = int(np.prod(shape))
        vals = _decode_ints(self.data, off, bits, count, 16)
        if expect_len is not None and count != expect_len:
            raise DirectoryError(f"tensor {name} has {count} entries, expected {expect_len}")
        return vals

    def u9(self, name, expect_shape=None):
        _, kind, sval, shape, off, bits = self._rec(name, ENC_U9)
        if kind != SCALE_POT:
            raise DirectoryError(f"tensor {name} needs a power-of-two scale")
        count = int(np.prod(shape))
        codes = _decode_ints(self.data, off, bits, count, 9)
        if codes.max(initial=0) > 255 or codes.min(initial=0) < -255:
            raise CodeRangeError(f"9-bit code out of range in {name}")
        if expect_shape is not None and tuple(shape) != tuple(expect_shape):
            raise DirectoryError(f"tensor {name} shape {shape} != {expect_shape}")
        return codes.reshape(shape), _check_exp(sval, name)

    def dpot(self, name, expect_shape=None):
        _, kind, sval, shape, off, bits = self._rec(name, ENC_DPOT)
        count = int(np.prod(shape))
        signs, deltas = _decode_dpot(self.data, off, bits, count, self.cfg)
        for t, k in enumerate(self.cfg.term_bits):
            if deltas[:, t].max(initial=0) >= (1 << k):
                raise CodeRangeError(f"difference field out of range in {name}")
        if expect_shape is not None and tuple(shape) != tuple(expect_shape):
            raise DirectoryError(f"tensor {name} shape {shape} != {expect_shape}")
        if kind == SCALE_POT:
            scale = TensorScale.pot(_check_exp(sval, name))
        else:
            if not (np.isfinite(sval) and sval > 0):
                raise DirectoryError(f"bad real scale in {name}")
            scale = TensorScale(float(sval))
        return signs, deltas, shape, scale


def load_model(data: bytes) -> QuantModel:
    """Parse, validate and reconstruct a quantized model."""
    cfg, n_layers, hidden, vocab, dir_offset, dir_count = _read_header(data)
    records, _ = _parse_directory(data, dir_offset, dir_count, len(data))
    ld = _Loaded(data, records, cfg)

    meta = ld.fx16("model.meta", 6)
    res_se, tree_par, lanes, eps_exp, lnout_se, has_ln_pre = (int(v) for v in meta)
    if tree_par <= 0 or lanes <= 0:
        raise DirectoryError("non-positive parallelism in model.meta")
    _check_exp(res_se, "model.meta")
    _check_exp(lnout_se, "model.meta")
    if not (-64 <= eps_exp < 0):
        raise DirectoryError("implausible epsilon exponent in model.meta")
    eps = 2.0 ** eps_exp
    mv_cfg = MvpaConfig(lanes=lanes)

    emb_codes, emb_pe = ld.u9("emb.weight", (vocab, hidden))
    emb_se = emb_pe + A9.frac_bits

    def ln_cfg(prefix, out_se):
        g, ge = ld.u9(f"{prefix}.gain", (hidden,))
        b, be = ld.u9(f"{prefix}.bias", (hidden,))
        return LnConfig(dim=hidden, tree_par=tree_par, eps=eps,
                        gain=U9Vector(g, TensorScale.pot(ge)),
                        bias=U9Vector(b, TensorScale.pot(be)),
                        out_fmt=A9, out_scale_exp=out_se)

    def qvec(name):
        signs, deltas, shape, scale = ld.dpot(name, (hidden,))
        return QVector(signs, deltas, scale, cfg)

    def qmat(name, shape):
        signs, deltas, got, scale = ld.dpot(name, shape)
        return QMatrix(shape[0], shape[1], signs.reshape(shape),
                       deltas.reshape(shape + (cfg.n_terms,)), scale, cfg)

    ffn = None
    blocks = []
    for i in range(n_layers):
        p = f"blocks.{i}"
        sc_vals = ld.fx16(f"{p}.act_scales", 10)
        for v in sc_vals:
            _check_exp(int(v), f"{p}.act_scales")
        sc = SiteScales.from_list(sc_vals)
        if ffn is None:
            rec = records.get(f"{p}.ffn.key")
            if rec is None:
                raise DirectoryError(f"missing tensor {p}.ffn.key")
            ffn = int(rec[3][0])
        dec, dec_pe = ld.u9(f"{p}.att.decay", (hidden,))
        bon, bon_pe = ld.u9(f"{p}.att.bonus", (hidden,))
        blocks.append(BlockWeights(
            ln1=ln_cfg(f"{p}.ln1", sc.ln1),
            ln2=ln_cfg(f"{p}.ln2", sc.ln2),
            mu_r=qvec(f"{p}.att.mu_r"), cmu_r=qvec(f"{p}.att.cmu_r"),
            mu_k=qvec(f"{p}.att.mu_k"), cmu_k=qvec(f"{p}.att.cmu_k"),
            mu_v=qvec(f"{p}.att.mu_v"), cmu_v=qvec(f"{p}.att.cmu_v"),
            w_r=qmat(f"{p}.att.receptance", (hidden, hidden)),
            w_k=qmat(f"{p}.att.key", (hidden, hidden)),
            w_v=qmat(f"{p}.att.value", (hidden, hidden)),
            w_o=qmat(f"{p}.att.output", (hidden, hidden)),
            decay=U9Vector(dec, TensorScale.pot(dec_pe)),
            bonus=U9Vector(bon, TensorScale.pot(bon_pe)),
            f_mu_r=qvec(f"{p}.ffn.mu_r"), f_cmu_r=qvec(f"{p}.ffn.cmu_r"),
            f_mu_k=qvec(f"{p}.ffn.mu_k"), f_cmu_k=qvec(f"{p}.ffn.cmu_k"),
            f_w_r=qmat(f"{p}.ffn.receptance", (hidden, hidden)),
            f_w_k=qmat(f"{p}.ffn.key", (ffn, hidden)),
            f_w_v=qmat(f"{p}.ffn.value", (hidden, ffn)),
            scales=sc,
        ))

    ln_pre = ln_cfg("ln_pre", res_se) if has_ln_pre else None
    return QuantModel(
        n_layers=n_layers, hidden=hidden, ffn=int(ffn), vocab=vocab, dpot=cfg,
        emb_raw=emb_codes, emb_se=emb_se, res_se=res_se, ln_pre=ln_pre,
        blocks=blocks, ln_out=ln_cfg("ln_out", lnout_se),
        head=qmat("head.weight", (vocab, hidden)),
        mv_cfg=mv_cfg, tree_par=tree_par,
    )


def describe_container(data: bytes) -> list[dict]:
    """Directory listing for the validate subcommand."""
    cfg, n_layers, hidden, vocab, dir_offset, dir_count = _read_header(data)
    records, order = _parse_directory(data, dir_offset, dir_count, len(data))
    out = [{"magic": MAGIC.decode(), "version": VERSION, "n_layers": n_layers,
            "hidden": hidden, "vocab": vocab, "term_bits": list(cfg.term_bits)}]
    enc_names = {ENC_DPOT: "dpot", ENC_U9: "u9", ENC_FX16: "fx16"}
    for name in order:
        enc, kind, sval, shape, off, bits = records[name]
        out.append({"name": name, "encoding": enc_names[enc],
                    "scale": ("2^%d" % sval) if kind == SCALE_POT else float(sval),
                    "shape": list(shape), "offset": off, "bits": bits})
    return out
