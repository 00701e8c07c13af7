"""Weight containers and the little-endian ``PAHQ`` weight file.

File layout (all little-endian)::

    b"PAHQ"  u32 version=1
    u32 x 8  n_layers n_heads d_model d_k vocab seq_len batch d_mlp
    f32 arrays, row-major, in this order:
        W_E [vocab, d_model]   W_pos [seq_len, d_model]
        per layer: ln1_g ln1_b [d_model]  W_Q W_K W_V W_O [d_model, d_model]
                   (if d_mlp > 0) ln2_g ln2_b [d_model] W_in [d_model, d_mlp] W_out [d_mlp, d_model]
        ln_f_g ln_f_b [d_model]  W_U [d_model, vocab]
    u64 checksum  (blake2b-64 of every preceding byte)

Head ``h`` owns columns ``h*d_k:(h+1)*d_k`` of W_Q/W_K/W_V and the same rows of W_O.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .graph import ConfigError, ModelConfig

MAGIC = b"PAHQ"
VERSION = 1
_HEADER = struct.Struct("<4sI8I")


class WeightFileError(Exception):
    pass


class BadMagicError(WeightFileError):
    pass


class VersionError(WeightFileError):
    pass


class ShapeError(WeightFileError):
    pass


class TruncatedError(WeightFileError):
    pass


class ChecksumError(WeightFileError):
    pass


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float32, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LayerWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    ln2_g: np.ndarray | None = None
    ln2_b: np.ndarray | None = None
    W_in: np.ndarray | None = None
    W_out: np.ndarray | None = None

    def arrays(self) -> list[np.ndarray]:
        out = [self.ln1_g, self.ln1_b, self.W_Q, self.W_K, self.W_V, self.W_O]
        if self.W_in is not None:
            out += [self.ln2_g, self.ln2_b, self.W_in, self.W_out]
        return out


@dataclass(frozen=True, eq=False)
class WeightSet:
    config: ModelConfig
    W_E: np.ndarray
    W_pos: np.ndarray
    layers: tuple[LayerWeights, ...]
    ln_f_g: np.ndarray
    ln_f_b: np.ndarray
    W_U: np.ndarray

    def __post_init__(self):
        self.validate()
        object.__setattr__(self, "_memo", {})

    def cached(self, key, build):
        """Memoise a derived array (e.g. a low-precision cast) on this instance."""
        memo = self._memo
        if key not in memo:
            memo[key] = build()
        return memo[key]

    def validate(self) -> None:
        cfg = self.config
        d = cfg.d_model
        expect = {
            "W_E": (cfg.vocab, d),
            "W_pos": (cfg.seq_len, d),
            "ln_f_g": (d,),
            "ln_f_b": (d,),
            "W_U": (d, cfg.vocab),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"{name}: expected {shape}, got {got}")
        if len(self.layers) != cfg.n_layers:
            raise ShapeError(f"expected {cfg.n_layers} layers, got {len(self.layers)}")
        for i, lw in enumerate(self.layers):
            for name in ("ln1_g", "ln1_b"):
                if getattr(lw, name).shape != (d,):
                    raise ShapeError(f"layer {i} {name} has shape {getattr(lw, name).shape}")
            for name in ("W_Q", "W_K", "W_V", "W_O"):
                if getattr(lw, name).shape != (d, d):
                    raise ShapeError(f"layer {i} {name} has shape {getattr(lw, name).shape}")
            if cfg.has_mlp:
                if lw.W_in is None or lw.W_in.shape != (d, cfg.d_mlp) or lw.W_out.shape != (cfg.d_mlp, d):
                    raise ShapeError(f"layer {i} MLP weights missing or mis-shaped")
            elif lw.W_in is not None:
                raise ShapeError(f"layer {i} has MLP weights but d_mlp == 0")
        for a in self.arrays():
            if not np.all(np.isfinite(a)):
                raise ShapeError("weights must be finite")

    def arrays(self) -> list[np.ndarray]:
        out = [self.W_E, self.W_pos]
        for lw in self.layers:
            out += lw.arrays()
        out += [self.ln_f_g, self.ln_f_b, self.W_U]
        return out

    def nbytes(self) -> int:
        return sum(a.size for a in self.arrays()) * 4

    def replace_layer(self, layer: int, **changes) -> "WeightSet":
        layers = list(self.layers)
        layers[layer] = replace(layers[layer], **{k: _frozen(v) for k, v in changes.items()})
        return WeightSet(self.config, self.W_E, self.W_pos, tuple(layers), self.ln_f_g, self.ln_f_b, self.W_U)

    def equal(self, other: "WeightSet") -> bool:
        if self.config != other.config:
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(self.arrays(), other.arrays())
        )

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, W_E, W_pos, layers, ln_f_g, ln_f_b, W_U) -> "WeightSet":
        fl = []
        for lw in layers:
            if isinstance(lw, LayerWeights):
                lw = {f.name: getattr(lw, f.name) for f in fields(LayerWeights)}
            fl.append(LayerWeights(**{k: (None if v is None else _frozen(v)) for k, v in lw.items()}))
        return cls(cfg, _frozen(W_E), _frozen(W_pos), tuple(fl), _frozen(ln_f_g), _frozen(ln_f_b), _frozen(W_U))


def _layer_shapes(cfg: ModelConfig) -> list[tuple[int, ...]]:
    d = cfg.d_model
    shapes = [(d,), (d,), (d, d), (d, d), (d, d), (d, d)]
    if cfg.has_mlp:
        shapes += [(d,), (d,), (d, cfg.d_mlp), (cfg.d_mlp, d)]
    return shapes


def _checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def dumps_weights(ws: WeightSet) -> bytes:
    c = ws.config
    head = _HEADER.pack(MAGIC, VERSION, c.n_layers, c.n_heads, c.d_model, c.d_k, c.vocab, c.seq_len, c.batch, c.d_mlp)
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in ws.arrays())
    data = head + body
    return data + struct.pack("<Q", _checksum(data))


def loads_weights(data: bytes) -> WeightSet:
    if len(data) < 4:
        raise TruncatedError("file shorter than the magic number")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedError("file shorter than the header")
    _, version, *dims = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    try:
        cfg = ModelConfig(*dims)
    except ConfigError as exc:
        raise ShapeError(str(exc)) from exc

    shapes = [(cfg.vocab, cfg.d_model), (cfg.seq_len, cfg.d_model)]
    for _ in range(cfg.n_layers):
        shapes += _layer_shapes(cfg)
    shapes += [(cfg.d_model,), (cfg.d_model,), (cfg.d_model, cfg.vocab)]
    n_floats = sum(int(np.prod(s)) for s in shapes)
    end = _HEADER.size + 4 * n_floats
    if len(data) < end + 8:
        raise TruncatedError(f"expected {end + 8} bytes, got {len(data)}")
    if len(data) > end + 8:
        raise ShapeError(f"{len(data) - end - 8} trailing bytes after checksum")
    (stored,) = struct.unpack_from("<Q", data, end)
    if stored != _checksum(data[:end]):
        raise ChecksumError("checksum mismatch")

    flat = np.frombuffer(data, dtype="<f4", count=n_floats, offset=_HEADER.size)
    arrays = []
    pos = 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(flat[pos : pos + n].reshape(s).astype(np.float32))
        pos += n

    W_E, W_pos = arrays[0], arrays[1]
    per = len(_layer_shapes(cfg))
    names = ["ln1_g", "ln1_b", "W_Q", "W_K", "W_V", "W_O", "ln2_g", "ln2_b", "W_in", "W_out"]
    layers = []
    for i in range(cfg.n_layers):
        chunk = arrays[2 + i * per : 2 + (i + 1) * per]
        layers.append(dict(zip(names, chunk)))
    ln_f_g, ln_f_b, W_U = arrays[-3:]
    return WeightSet.from_arrays(cfg, W_E, W_pos, layers, ln_f_g, ln_f_b, W_U)


def save_weights(ws: WeightSet, path) -> None:
    Path(path).write_bytes(dumps_weights(ws))


def load_weights(path) -> WeightSet:
    return loads_weights(Path(path).read_bytes())


def random_weights(cfg: ModelConfig, seed: int = 0, scale: float = 0.2) -> WeightSet:
    """Gaussian weights with unit layer-norm gains; handy for tests and demos."""
    rng = np.random.default_rng(seed)
    d = cfg.d_model

    def g(*shape):
        return rng.normal(0.0, scale, size=shape)

    layers = []
    for _ in range(cfg.n_layers):
        lw = dict(ln1_g=np.ones(d), ln1_b=np.zeros(d), W_Q=g(d, d), W_K=g(d, d), W_V=g(d, d), W_O=g(d, d))
        if cfg.has_mlp:
            lw.update(ln2_g=np.ones(d), ln2_b=np.zeros(d), W_in=g(d, cfg.d_mlp), W_out=g(cfg.d_mlp, d))
        layers.append(lw)
    return WeightSet.from_arrays(cfg, g(cfg.vocab, d) * 5, g(cfg.seq_len, d) * 5, layers, np.ones(d), np.zeros(d), g(d, cfg.vocab))
