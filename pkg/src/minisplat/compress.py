"""Compression backend: RAHT over a Morton-ordered octree, uniform quantization, DEFLATE container."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .core import GaussianSet

MAGIC = b"MSPC"
VERSION = 1
FLAG_QUANTIZED = 1
FLAG_RAW_ATTRS = 2
# magic, version, flags, N, depth, sh_degree, step, bbox, payload crc
_HEADER = struct.Struct("<4sHHQBBd6dI")


class DecodeError(ValueError):
    pass


@dataclass
class CompressConfig:
    depth: int = 16
    step: float = 0.02
    quantize: bool = True
    raw_attrs: bool = False

    def __post_init__(self):
        if not 1 <= self.depth <= 21:
            raise ValueError("octree depth must lie in [1, 21]")
        if not self.step > 0:
            raise ValueError("quantization step must be positive")


# octree -------------------------------------------------------------------------


def _spread_bits(v: np.ndarray) -> np.ndarray:
    """Insert two zero bits between each of the low 21 bits."""
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def morton_codes(cells: np.ndarray) -> np.ndarray:
    """Interleave integer cell coordinates (N, 3) as ... z1 y1 x1 z0 y0 x0."""
    cells = np.asarray(cells)
    return (_spread_bits(cells[:, 0]) | (_spread_bits(cells[:, 1]) << np.uint64(1))
            | (_spread_bits(cells[:, 2]) << np.uint64(2)))


def bounding_box(centers: np.ndarray) -> np.ndarray:
    if len(centers) == 0:
        return np.zeros(6)
    return np.concatenate([centers.min(axis=0), centers.max(axis=0)]).astype(np.float64)


@dataclass
class Octree:
    depth: int
    bbox: np.ndarray
    cells: np.ndarray      # (N, 3) integer grid coordinates, input order
    codes: np.ndarray      # Morton codes in leaf order
    order: np.ndarray      # leaf k holds input point order[k]

    def __len__(self):
        return len(self.order)


def build_octree(centers, depth: int = 16, bbox=None) -> Octree:
    """Quantize centers to a 2^depth grid over their (cubical) bounding box and Morton-sort them.

    Points sharing a cell stay distinct leaves in their input order.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(centers)):
        raise ValueError("centers must be finite")
    bbox = bounding_box(centers) if bbox is None else np.asarray(bbox, dtype=np.float64)
    res = 1 << depth
    side = float(np.max(bbox[3:] - bbox[:3])) if len(centers) else 0.0
    if side <= 0:
        cells = np.zeros((len(centers), 3), dtype=np.int64)
    else:
        cells = np.floor((centers - bbox[:3]) / side * res).astype(np.int64)
        cells = np.clip(cells, 0, res - 1)
    codes = morton_codes(cells)
    order = np.argsort(codes, kind="stable")
    return Octree(depth, bbox, cells, codes[order], order)


# RAHT ---------------------------------------------------------------------------


@dataclass
class _Stage:
    first: np.ndarray      # node index of the first member of each merged pair
    second: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    single: np.ndarray     # nodes passed through unchanged
    dest_pair: np.ndarray  # next-level slot of each merged pair
    dest_single: np.ndarray
    n_next: int


@dataclass
class RahtPlan:
    n_leaves: int
    stages: list = field(default_factory=list)

    @property
    def n_high(self) -> int:
        return sum(len(s.first) for s in self.stages)


def _stage(keys: np.ndarray, weights: np.ndarray):
    """Pair adjacent nodes sharing a key; returns the stage and the next keys/weights."""
    n = len(keys)
    same_next = np.zeros(n, dtype=bool)
    same_next[:-1] = keys[:-1] == keys[1:]
    # within runs of equal keys, pair positions (0,1), (2,3), ...
    run_start = np.ones(n, dtype=bool)
    run_start[1:] = keys[1:] != keys[:-1]
    run_id = np.cumsum(run_start) - 1
    starts = np.nonzero(run_start)[0]
    rank = np.arange(n) - starts[run_id]
    is_first = same_next & (rank % 2 == 0)
    first = np.nonzero(is_first)[0]
    second = first + 1
    is_member = np.zeros(n, dtype=bool)
    is_member[first] = True
    is_member[second] = True
    single = np.nonzero(~is_member)[0]
    # each pair and each single becomes one node, in position order
    produces = is_first | ~is_member
    slot = np.cumsum(produces) - 1
    n_next = int(produces.sum())
    next_keys = keys[produces]
    next_w = np.zeros(n_next)
    next_w[slot[first]] = weights[first] + weights[second]
    next_w[slot[single]] = weights[single]
    st = _Stage(first, second, weights[first], weights[second], single, slot[first], slot[single], n_next)
    return st, next_keys, next_w


def raht_plan(tree: Octree) -> RahtPlan:
    """Merge duplicates pairwise, then siblings one Morton bit at a time up to the root."""
    n = len(tree)
    plan = RahtPlan(n)
    if n == 0:
        return plan
    keys = tree.codes.copy()
    weights = np.ones(n)
    while len(keys) > 1 and np.any(keys[1:] == keys[:-1]):
        st, keys, weights = _stage(keys, weights)
        plan.stages.append(st)
    for _ in range(3 * tree.depth):
        if len(keys) == 1:
            break
        keys = keys >> np.uint64(1)
        st, keys, weights = _stage(keys, weights)
        if len(st.first):
            plan.stages.append(st)
    return plan


def raht_forward(plan: RahtPlan, attributes: np.ndarray) -> np.ndarray:
    """Leaf-ordered attributes (N, C) -> coefficients (N, C): root low-pass, then high-pass
    coefficients from the coarsest stage to the finest."""
    a = np.asarray(attributes, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if len(a) != plan.n_leaves:
        raise ValueError("one attribute row per leaf required")
    highs = []
    for st in plan.stages:
        s1 = np.sqrt(st.w1)[:, None]
        s2 = np.sqrt(st.w2)[:, None]
        norm = np.sqrt(st.w1 + st.w2)[:, None]
        a1, a2 = a[st.first], a[st.second]
        nxt = np.empty((st.n_next, a.shape[1]))
        nxt[st.dest_pair] = (s1 * a1 + s2 * a2) / norm
        nxt[st.dest_single] = a[st.single]
        highs.append((s2 * a1 - s1 * a2) / norm)
        a = nxt
    return np.concatenate([a] + highs[::-1], axis=0)


def raht_inverse(plan: RahtPlan, coeffs: np.ndarray) -> np.ndarray:
    c = np.asarray(coeffs, dtype=np.float64)
    if c.ndim == 1:
        c = c[:, None]
    if len(c) != plan.n_leaves:
        raise ValueError("coefficient count does not match the plan")
    if plan.n_leaves == 0:
        return c.copy()
    a = c[:1]
    pos = 1
    highs = {}
    for k in range(len(plan.stages) - 1, -1, -1):
        m = len(plan.stages[k].first)
        highs[k] = c[pos:pos + m]
        pos += m
    for k in range(len(plan.stages) - 1, -1, -1):
        st = plan.stages[k]
        s1 = np.sqrt(st.w1)[:, None]
        s2 = np.sqrt(st.w2)[:, None]
        norm = np.sqrt(st.w1 + st.w2)[:, None]
        low, high = a[st.dest_pair], highs[k]
        prev = np.empty((len(st.first) * 2 + len(st.single), c.shape[1]))
        prev[st.first] = (s1 * low + s2 * high) / norm
        prev[st.second] = (s2 * low - s1 * high) / norm
        prev[st.single] = a[st.dest_single]
        a = prev
    return a


# quantization -------------------------------------------------------------------


def quantize(coeffs, step: float) -> np.ndarray:
    """round(c / step), halves away from zero."""
    c = np.asarray(coeffs, dtype=np.float64) / step
    return (np.sign(c) * np.floor(np.abs(c) + 0.5)).astype(np.int64)


def dequantize(q, step: float) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * step


# container ----------------------------------------------------------------------


@dataclass
class CompressedScene:
    n: int
    depth: int
    step: float
    bbox: np.ndarray
    sh_degree: int
    quantized: bool
    raw_attrs: bool
    centers: np.ndarray            # (N, 3) float32
    streams: dict                  # name -> array (int64 when quantized, float64 or float32 otherwise)


_DTYPES = {0: np.dtype("<i1"), 1: np.dtype("<i2"), 2: np.dtype("<i4"), 3: np.dtype("<i8"),
           4: np.dtype("<f4"), 5: np.dtype("<f8")}


def _narrow(arr: np.ndarray):
    if arr.dtype.kind == "f":
        code = 4 if arr.dtype == np.float32 else 5
        return code, arr.astype(_DTYPES[code])
    lo, hi = (int(arr.min()), int(arr.max())) if arr.size else (0, 0)
    for code in (0, 1, 2, 3):
        info = np.iinfo(_DTYPES[code])
        if info.min <= lo and hi <= info.max:
            return code, arr.astype(_DTYPES[code])
    raise OverflowError("coefficient out of int64 range")


def pack(scene: CompressedScene) -> bytes:
    body = bytearray(scene.centers.astype("<f4").tobytes())
    body += struct.pack("<H", len(scene.streams))
    for name in sorted(scene.streams):
        arr = np.asarray(scene.streams[name])
        arr2 = arr.reshape(arr.shape[0], int(np.prod(arr.shape[1:])))
        code, data = _narrow(arr2)
        # channel-major layout groups similar magnitudes for DEFLATE
        raw = np.ascontiguousarray(data.T).tobytes()
        nb = name.encode()
        body += struct.pack("<B", len(nb)) + nb + struct.pack("<BHQ", code, arr2.shape[1], len(raw)) + raw
    body = bytes(body)
    flags = (FLAG_QUANTIZED if scene.quantized else 0) | (FLAG_RAW_ATTRS if scene.raw_attrs else 0)
    header = _HEADER.pack(MAGIC, VERSION, flags, scene.n, scene.depth, scene.sh_degree, scene.step,
                          *np.asarray(scene.bbox, dtype=np.float64), zlib.crc32(body))
    return header + zlib.compress(body, 9)


def unpack(blob: bytes) -> CompressedScene:
    if len(blob) < _HEADER.size:
        raise DecodeError("truncated container header")
    magic, version, flags, n, depth, sh_degree, step, *rest = _HEADER.unpack_from(blob)
    bbox, crc = np.array(rest[:6]), rest[6]
    if magic != MAGIC:
        raise DecodeError("bad magic bytes; not an .msc archive")
    if version != VERSION:
        raise DecodeError(f"unsupported container version {version}")
    try:
        body = zlib.decompress(blob[_HEADER.size:])
    except zlib.error as e:
        raise DecodeError(f"corrupt payload: {e}") from None
    if zlib.crc32(body) != crc:
        raise DecodeError("CRC mismatch")
    try:
        pos = 12 * n
        centers = np.frombuffer(body[:pos], dtype="<f4").reshape(n, 3).copy()
        (count,) = struct.unpack_from("<H", body, pos)
        pos += 2
        streams = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<B", body, pos)
            name = body[pos + 1:pos + 1 + ln].decode()
            pos += 1 + ln
            code, ch, nbytes = struct.unpack_from("<BHQ", body, pos)
            pos += struct.calcsize("<BHQ")
            data = np.frombuffer(body[pos:pos + nbytes], dtype=_DTYPES[code]).reshape(ch, n).T
            pos += nbytes
            streams[name] = data.astype(np.float64 if code >= 4 else np.int64)
    except (struct.error, ValueError, KeyError) as e:
        raise DecodeError(f"malformed stream table: {e}") from None
    return CompressedScene(n, depth, step, bbox, sh_degree, bool(flags & FLAG_QUANTIZED),
                           bool(flags & FLAG_RAW_ATTRS), centers, streams)


# scene codec --------------------------------------------------------------------


def _attribute_channels(gs: GaussianSet, raw_attrs: bool):
    """Named (N, C) attribute blocks; the second dict holds blocks stored without transform."""
    coded = {"scales": gs.log_scales}
    raw = {}
    target = raw if raw_attrs else coded
    target["rotation"] = gs.unit_quats
    target["opacity"] = gs.opacity_logits[:, None]
    for band in range(gs.sh_degree + 1):
        lo, hi = band * band, (band + 1) * (band + 1)
        coded[f"sh{band}"] = gs.sh[:, lo:hi, :].reshape(len(gs), 3 * (hi - lo))
    return coded, raw


def compress_scene(gs: GaussianSet, cfg: CompressConfig | None = None) -> CompressedScene:
    cfg = cfg or CompressConfig()
    centers = gs.means.astype(np.float32)
    tree = build_octree(centers.astype(np.float64), cfg.depth)
    plan = raht_plan(tree)
    coded, raw = _attribute_channels(gs, cfg.raw_attrs)
    streams = {}
    for name, block in coded.items():
        coeffs = raht_forward(plan, block[tree.order])
        streams[name] = quantize(coeffs, cfg.step) if cfg.quantize else coeffs
    for name, block in raw.items():
        streams[name] = block.astype(np.float32)
    return CompressedScene(len(gs), cfg.depth, cfg.step, tree.bbox, gs.sh_degree, cfg.quantize,
                           cfg.raw_attrs, centers, streams)


def decompress_scene(scene: CompressedScene) -> GaussianSet:
    n = scene.n
    means = scene.centers.astype(np.float64)
    tree = build_octree(means, scene.depth, bbox=scene.bbox)
    plan = raht_plan(tree)
    inv = np.empty(n, dtype=np.int64)
    inv[tree.order] = np.arange(n)

    def decode(name):
        c = scene.streams[name]
        if scene.quantized:
            c = dequantize(c, scene.step)
        return raht_inverse(plan, c)[inv]

    def fetch(name):
        if scene.raw_attrs and name in ("rotation", "opacity"):
            return np.asarray(scene.streams[name], dtype=np.float64)
        return decode(name)

    log_scales = decode("scales") if n else np.zeros((0, 3))
    quats = fetch("rotation") if n else np.zeros((0, 4))
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    quats = np.where(norms > 0, quats / np.where(norms > 0, norms, 1.0), np.array([1.0, 0, 0, 0]))
    opacity = fetch("opacity")[:, 0] if n else np.zeros(0)
    sh = np.zeros((n, 16, 3))
    for band in range(scene.sh_degree + 1):
        lo, hi = band * band, (band + 1) * (band + 1)
        if n:
            sh[:, lo:hi, :] = decode(f"sh{band}").reshape(n, hi - lo, 3)
    return GaussianSet(means, log_scales, quats, opacity, sh, scene.sh_degree)


def write_msc(path, gs: GaussianSet, cfg: CompressConfig | None = None) -> int:
    blob = pack(compress_scene(gs, cfg))
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)


def read_msc(path) -> GaussianSet:
    with open(path, "rb") as f:
        return decompress_scene(unpack(f.read()))
