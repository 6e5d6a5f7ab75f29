"""Deterministic stand-ins for frozen image/text encoder backbones.

Each provider emits a `FeatureBundle`: one global vector plus a matrix of
local token features, all pure functions of (input, seed). The synthetic
encoder can also plant structure: a target image's embedding is a fixed
mix of its reference image and modification text embeddings, which makes
the retrieval task learnable at desk scale.

The TEF1 binary format stores bundles as 32-bit floats on disk, widened to
64-bit in memory; see `write_embedding_file`.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import parsing
from .autodiff import Array, Node, add_bias, as_matrix, matmul
from .errors import BadMagic, CorruptRecord, DuplicateId, VersionMismatch

REF_MIX = 0.6
TEXT_MIX = 0.4


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 256
    local_count: int = 16
    seed: int = 0
    plant_structure: bool = False

    def __post_init__(self):
        if self.dim < 8:
            raise ValueError(f"dim must be >= 8, got {self.dim}")
        if self.local_count < 1:
            raise ValueError(f"local_count must be >= 1, got {self.local_count}")


@dataclass
class FeatureBundle:
    """One item's features: global row (1 x D) and local matrix (C x D)."""

    global_vec: Array
    local: Array

    def __post_init__(self):
        self.global_vec = as_matrix(self.global_vec)
        self.local = as_matrix(self.local)
        if self.global_vec.shape[0] != 1:
            raise ValueError(f"global_vec must be 1 x D, got {self.global_vec.shape}")
        if self.local.shape[1] != self.global_vec.shape[1]:
            raise ValueError(
                f"width mismatch: global {self.global_vec.shape}, local {self.local.shape}"
            )
        if not (np.all(np.isfinite(self.global_vec)) and np.all(np.isfinite(self.local))):
            raise ValueError("feature values must be finite")

    @property
    def dim(self) -> int:
        return self.global_vec.shape[1]


def _hash_rng(seed: int, *parts: str) -> np.random.Generator:
    digest = hashlib.blake2b(digest_size=16)
    digest.update(str(seed).encode("utf-8"))
    for part in parts:
        digest.update(b"\x1f")
        digest.update(part.encode("utf-8"))
    return np.random.default_rng(int.from_bytes(digest.digest(), "little"))


def _unit_hash_vector(seed: int, dim: int, *parts: str) -> Array:
    v = _hash_rng(seed, *parts).standard_normal(dim)
    return (v / np.linalg.norm(v)).reshape(1, dim)


def encode_image(image_id: str, cfg: EncoderConfig) -> FeatureBundle:
    """Seeded-hash pseudo-random unit vectors, deterministic in (id, seed)."""
    if not image_id:
        raise ValueError("image id must be non-empty")
    global_vec = _unit_hash_vector(cfg.seed, cfg.dim, "img", image_id, "g")
    local = np.concatenate(
        [
            _unit_hash_vector(cfg.seed, cfg.dim, "img", image_id, f"l{i}")
            for i in range(cfg.local_count)
        ],
        axis=0,
    )
    return FeatureBundle(global_vec=global_vec, local=local)


def encode_text(text: str, cfg: EncoderConfig) -> FeatureBundle:
    """Order-insensitive digest of the stemmed content-token multiset.

    The global row is the normalized sum of per-stem hash vectors, so token
    order and stopwords do not affect it. Local rows are the per-token
    hashes of the first `local_count` content tokens, zero-padded.
    """
    if not text:
        raise ValueError("text must be non-empty")
    stems = parsing.content_tokens(text)
    if not stems:
        stems = ["<empty>"]
    acc = np.zeros((1, cfg.dim))
    for s in stems:
        acc += _unit_hash_vector(cfg.seed, cfg.dim, "tok", s)
    norm = np.linalg.norm(acc)
    if norm == 0.0:
        global_vec = _unit_hash_vector(cfg.seed, cfg.dim, "tok", "<degenerate>")
    else:
        global_vec = acc / norm
    local = np.zeros((cfg.local_count, cfg.dim))
    for i, s in enumerate(stems[: cfg.local_count]):
        local[i, :] = _unit_hash_vector(cfg.seed, cfg.dim, "tok", s)
    return FeatureBundle(global_vec=global_vec, local=local)


def planted_mix(ref_rows: Array, text_rows: Array) -> Array:
    """Row-wise normalized mix of reference and text feature rows."""
    mixed = REF_MIX * ref_rows + TEXT_MIX * text_rows
    norms = np.linalg.norm(mixed, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return mixed / norms


def encode_target_pair(ref_id: str, mmt: str, cfg: EncoderConfig) -> FeatureBundle:
    """Target features as a planted mix of reference-image and text features."""
    if not cfg.plant_structure:
        raise ValueError("encode_target_pair requires plant_structure")
    ref = encode_image(ref_id, cfg)
    text = encode_text(mmt, cfg)
    return FeatureBundle(
        global_vec=planted_mix(ref.global_vec, text.global_vec),
        local=planted_mix(ref.local, text.local),
    )


class SyntheticEncoder:
    """Deterministic provider over ids and texts, with optional planting.

    `planted` maps a target image id to its (reference id, modification
    text) pair; those ids encode to the planted mix instead of a fresh
    hash. Results are cached, so repeated lookups are free.
    """

    def __init__(self, cfg: EncoderConfig, planted=None):
        self.cfg = cfg
        self.planted = dict(planted or {})
        self._image_cache: dict[str, FeatureBundle] = {}
        self._text_cache: dict[str, FeatureBundle] = {}

    def encode_image(self, image_id: str) -> FeatureBundle:
        bundle = self._image_cache.get(image_id)
        if bundle is None:
            if self.cfg.plant_structure and image_id in self.planted:
                ref_id, mmt = self.planted[image_id]
                bundle = encode_target_pair(ref_id, mmt, self.cfg)
            else:
                bundle = encode_image(image_id, self.cfg)
            self._image_cache[image_id] = bundle
        return bundle

    def encode_text(self, text: str) -> FeatureBundle:
        bundle = self._text_cache.get(text)
        if bundle is None:
            bundle = encode_text(text, self.cfg)
            self._text_cache[text] = bundle
        return bundle


class FixedEmbeddings:
    """Provider backed by maps loaded from embedding files."""

    def __init__(self, images, texts=None):
        self.images = dict(images)
        self.texts = dict(texts or {})

    def encode_image(self, image_id: str) -> FeatureBundle:
        try:
            return self.images[image_id]
        except KeyError:
            from .errors import ProviderFailure

            raise ProviderFailure(f"no stored embedding for image id {image_id!r}")

    def encode_text(self, text: str) -> FeatureBundle:
        try:
            return self.texts[text]
        except KeyError:
            from .errors import ProviderFailure

            raise ProviderFailure(f"no stored embedding for text {text!r}")


def project_local(local: Node, weight: Node, bias: Node) -> Node:
    """Affine map aligning local feature width to the hidden dimension."""
    return add_bias(matmul(local, weight), bias)


# --------------------------------------------------------------------------
# TEF1 embedding files
# --------------------------------------------------------------------------
#
# Layout (little-endian):
#   magic "TEF1" | u32 version=1 | u32 D | u32 C | u64 record count
#   per record: u32 id byte length | id UTF-8 | D f32 globals | C*D f32 locals
#
# Values are stored at 32-bit precision and widened to 64-bit on load, so a
# load->write cycle reproduces the file byte for byte.

_MAGIC = b"TEF1"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")
_U32 = struct.Struct("<I")


def write_embedding_file(path, bundles) -> None:
    items = sorted(bundles.items())
    if not items:
        raise ValueError("refusing to write an empty embedding file")
    dim = items[0][1].dim
    local_count = items[0][1].local.shape[0]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, dim, local_count, len(items)))
        for item_id, bundle in items:
            if bundle.dim != dim or bundle.local.shape[0] != local_count:
                raise ValueError(f"bundle {item_id!r} has inconsistent shape")
            raw = item_id.encode("utf-8")
            fh.write(_U32.pack(len(raw)))
            fh.write(raw)
            fh.write(bundle.global_vec.astype("<f4").tobytes())
            fh.write(bundle.local.astype("<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CorruptRecord(f"truncated file while reading {what}")
    return data


def load_embedding_file(path) -> dict[str, FeatureBundle]:
    with open(path, "rb") as fh:
        header = _read_exact(fh, _HEADER.size, "header")
        magic, version, dim, local_count, count = _HEADER.unpack(header)
        if magic != _MAGIC:
            raise BadMagic(f"expected {_MAGIC!r}, got {magic!r}")
        if version != _VERSION:
            raise VersionMismatch(f"unsupported version {version}")
        bundles: dict[str, FeatureBundle] = {}
        for _ in range(count):
            (id_len,) = _U32.unpack(_read_exact(fh, _U32.size, "id length"))
            item_id = _read_exact(fh, id_len, "id").decode("utf-8")
            if item_id in bundles:
                raise DuplicateId(f"id {item_id!r} appears twice")
            global_raw = _read_exact(fh, 4 * dim, f"globals of {item_id!r}")
            local_raw = _read_exact(fh, 4 * dim * local_count, f"locals of {item_id!r}")
            global_vec = np.frombuffer(global_raw, dtype="<f4").astype(np.float64)
            local = (
                np.frombuffer(local_raw, dtype="<f4")
                .astype(np.float64)
                .reshape(local_count, dim)
            )
            bundles[item_id] = FeatureBundle(
                global_vec=global_vec.reshape(1, dim), local=local
            )
        if fh.read(1):
            raise CorruptRecord("trailing bytes after the last record")
    return bundles
