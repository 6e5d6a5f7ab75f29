"""Learnable-query entity mapping and multimodal query composition.

Two unshared pre-norm transformer stacks aggregate modification clauses
into N learnable query channels: the textual side attends over a summary
(or text-global) token plus the text's local features, the visual side
over the reference image's global and local features. A one-layer combiner
pools both query token blocks into one unit-norm composed vector used for
retrieval.

No positional encodings: the inputs are sets of feature tokens, and token
role is conveyed by an additive learned segment embedding (context-global,
context-local, query), so outputs are invariant to the order of local
context rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .encoders import FeatureBundle
from .errors import DimensionMismatch, ZeroVector

ATTN_HEADS = 4
FF_MULT = 4
STACK_LAYERS = 2
QUERY_INIT_STD = 0.02
# Residual-branch output projections start small so the stream stays close
# to its inputs at initialization.
OUT_PROJ_INIT_STD = 0.005

SEGMENT_NAMES = ("context_global", "context_local", "query")


@dataclass(frozen=True)
class ArchConfig:
    """Shape parameters of the mapping network."""

    dim: int = 256
    local_count: int = 16
    channels: int = 3
    layers: int = STACK_LAYERS
    heads: int = ATTN_HEADS

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise DimensionMismatch(
                f"dim {self.dim} not divisible by {self.heads} heads"
            )
        if self.channels < 1:
            raise ValueError("channels must be >= 1")


def _normal(rng, rows, cols, std):
    return rng.standard_normal((rows, cols)) * std


class TransformerLayer:
    """Pre-norm block: multi-head self-attention, then a GELU feed-forward."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        ff = FF_MULT * dim
        self.params: dict[str, Node] = {
            "ln1_gain": ad.parameter(np.ones((1, dim))),
            "ln1_bias": ad.parameter(np.zeros((1, dim))),
            "wq": ad.parameter(_normal(rng, dim, dim, QUERY_INIT_STD)),
            "bq": ad.parameter(np.zeros((1, dim))),
            "wk": ad.parameter(_normal(rng, dim, dim, QUERY_INIT_STD)),
            "bk": ad.parameter(np.zeros((1, dim))),
            "wv": ad.parameter(_normal(rng, dim, dim, QUERY_INIT_STD)),
            "bv": ad.parameter(np.zeros((1, dim))),
            "wo": ad.parameter(_normal(rng, dim, dim, OUT_PROJ_INIT_STD)),
            "bo": ad.parameter(np.zeros((1, dim))),
            "ln2_gain": ad.parameter(np.ones((1, dim))),
            "ln2_bias": ad.parameter(np.zeros((1, dim))),
            "w_ff1": ad.parameter(_normal(rng, dim, ff, QUERY_INIT_STD)),
            "b_ff1": ad.parameter(np.zeros((1, ff))),
            "w_ff2": ad.parameter(_normal(rng, ff, dim, OUT_PROJ_INIT_STD)),
            "b_ff2": ad.parameter(np.zeros((1, dim))),
        }

    def _attention(self, x: Node) -> Node:
        p = self.params
        q = ad.add_bias(ad.matmul(x, p["wq"]), p["bq"])
        k = ad.add_bias(ad.matmul(x, p["wk"]), p["bk"])
        v = ad.add_bias(ad.matmul(x, p["wv"]), p["bv"])
        outputs = []
        inv_sqrt = 1.0 / np.sqrt(self.head_dim)
        for h in range(self.heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh = ad.slice_cols(q, lo, hi)
            kh = ad.slice_cols(k, lo, hi)
            vh = ad.slice_cols(v, lo, hi)
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_sqrt)
            outputs.append(ad.matmul(ad.softmax_rows(scores), vh))
        merged = outputs[0] if self.heads == 1 else ad.concat_cols(outputs)
        return ad.add_bias(ad.matmul(merged, p["wo"]), p["bo"])

    def forward(self, x: Node) -> Node:
        p = self.params
        attended = self._attention(ad.layer_norm_rows(x, p["ln1_gain"], p["ln1_bias"]))
        x = ad.add(x, attended)
        normed = ad.layer_norm_rows(x, p["ln2_gain"], p["ln2_bias"])
        hidden = ad.gelu(ad.add_bias(ad.matmul(normed, p["w_ff1"]), p["b_ff1"]))
        ff = ad.add_bias(ad.matmul(hidden, p["w_ff2"]), p["b_ff2"])
        return ad.add(x, ff)

    def named_params(self, prefix: str):
        for name, node in self.params.items():
            yield f"{prefix}.{name}", node


class TransformerStack:
    def __init__(self, dim: int, layers: int, heads: int, rng: np.random.Generator):
        self.layers = [TransformerLayer(dim, heads, rng) for _ in range(layers)]

    def forward(self, seq: Node) -> Node:
        for layer in self.layers:
            seq = layer.forward(seq)
        return seq

    def named_params(self, prefix: str):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.layer{i}")


def transformer_forward(stack: TransformerStack, seq: Node) -> Node:
    """Shape-preserving stack application."""
    return stack.forward(seq)


class EntityMapper:
    """One modality's aggregation: context tokens + query slots -> channels.

    The input sequence is [context_global; context_local rows; queries],
    each block shifted by its learned segment embedding. The mapped entity
    channels are read from the last `channels` output positions, i.e. the
    query slots.
    """

    def __init__(self, cfg: ArchConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.segments = {
            name: ad.parameter(_normal(rng, 1, cfg.dim, QUERY_INIT_STD))
            for name in SEGMENT_NAMES
        }
        self.stack = TransformerStack(cfg.dim, cfg.layers, cfg.heads, rng)

    def map(self, context_global: Node, context_local: Node, queries: Node) -> Node:
        dim = self.cfg.dim
        if context_global.shape != (1, dim):
            raise DimensionMismatch(
                f"context_global must be 1x{dim}, got {context_global.shape}"
            )
        if context_local.shape[1] != dim or queries.shape[1] != dim:
            raise DimensionMismatch(
                f"width mismatch: local {context_local.shape}, queries {queries.shape}"
            )
        tokens = ad.concat_rows(
            [
                ad.add_bias(context_global, self.segments["context_global"]),
                ad.add_bias(context_local, self.segments["context_local"]),
                ad.add_bias(queries, self.segments["query"]),
            ]
        )
        out = self.stack.forward(tokens)
        n = queries.shape[0]
        return ad.slice_rows(out, out.shape[0] - n, out.shape[0])

    def named_params(self, prefix: str):
        for name, node in self.segments.items():
            yield f"{prefix}.segment.{name}", node
        yield from self.stack.named_params(f"{prefix}.stack")


class Combiner:
    """Fuses both query token blocks into one unit-norm composed vector.

    One transformer layer over the concatenated tokens (with a two-way
    side segment embedding), mean-pooled, then an affine output map that
    starts at identity, and a final L2 normalization.
    """

    def __init__(self, cfg: ArchConfig, rng: np.random.Generator):
        self.cfg = cfg
        dim = cfg.dim
        self.side_segments = {
            "text": ad.parameter(_normal(rng, 1, dim, QUERY_INIT_STD)),
            "image": ad.parameter(_normal(rng, 1, dim, QUERY_INIT_STD)),
        }
        self.stack = TransformerStack(dim, 1, cfg.heads, rng)
        self.out_weight = ad.parameter(np.eye(dim))
        self.out_bias = ad.parameter(np.zeros((1, dim)))

    def compose(self, text_tokens: Node, image_tokens: Node) -> Node:
        if text_tokens.shape[1] != self.cfg.dim or image_tokens.shape[1] != self.cfg.dim:
            raise DimensionMismatch(
                f"combiner width mismatch: {text_tokens.shape}, {image_tokens.shape}"
            )
        tokens = ad.concat_rows(
            [
                ad.add_bias(text_tokens, self.side_segments["text"]),
                ad.add_bias(image_tokens, self.side_segments["image"]),
            ]
        )
        pooled = ad.mean_rows(self.stack.forward(tokens))
        projected = ad.add_bias(ad.matmul(pooled, self.out_weight), self.out_bias)
        return ad.l2_normalize_rows(projected)

    def named_params(self, prefix: str):
        for name, node in self.side_segments.items():
            yield f"{prefix}.segment.{name}", node
        yield from self.stack.named_params(f"{prefix}.stack")
        yield f"{prefix}.out_weight", self.out_weight
        yield f"{prefix}.out_bias", self.out_bias


def build_query_tokens(global_vec: Node, entity: Node) -> Node:
    """Row 0 is the global feature, rows 1..N the mapped entity channels."""
    if global_vec.shape[0] != 1 or global_vec.shape[1] != entity.shape[1]:
        raise DimensionMismatch(
            f"build_query_tokens: global {global_vec.shape}, entity {entity.shape}"
        )
    return ad.concat_rows([global_vec, entity])


def target_representation(bundle: FeatureBundle) -> Node:
    """Unit-norm target global vector as a constant graph node."""
    norm = np.linalg.norm(bundle.global_vec)
    if norm == 0.0:
        raise ZeroVector("target global vector is zero")
    return ad.constant(bundle.global_vec / norm)


@dataclass
class QueryForward:
    """Per-triplet forward products needed by the losses."""

    composed: Node
    text_channels: Node | None
    image_channels: Node | None
    text_tokens: Node
    image_tokens: Node


@dataclass
class ModelWiring:
    """Which components exist and which loss terms are active."""

    use_text_em: bool = True
    use_image_em: bool = True
    use_pa: bool = True
    use_summ_loss: bool = True
    ortho_text: bool = True
    ortho_image: bool = True


class ComposerModel:
    """Full query-side network: query banks, both mappers, and the combiner.

    Components excluded by the wiring are never constructed, so the
    parameter list reflects the active configuration exactly.
    """

    def __init__(self, cfg: ArchConfig, wiring: ModelWiring | None = None, seed: int = 0):
        self.cfg = cfg
        self.wiring = wiring or ModelWiring()
        rng = np.random.default_rng(seed)
        dim, n = cfg.dim, cfg.channels
        self.text_queries: Node | None = None
        self.image_queries: Node | None = None
        self.text_mapper: EntityMapper | None = None
        self.image_mapper: EntityMapper | None = None
        if self.wiring.use_text_em:
            self.text_queries = ad.parameter(_normal(rng, n, dim, QUERY_INIT_STD))
            self.text_mapper = EntityMapper(cfg, rng)
        if self.wiring.use_image_em:
            self.image_queries = ad.parameter(_normal(rng, n, dim, QUERY_INIT_STD))
            self.image_mapper = EntityMapper(cfg, rng)
        self.combiner = Combiner(cfg, rng)

    def named_parameters(self) -> list[tuple[str, Node]]:
        out: list[tuple[str, Node]] = []
        if self.text_queries is not None:
            out.append(("text_queries", self.text_queries))
            out.extend(self.text_mapper.named_params("text_mapper"))
        if self.image_queries is not None:
            out.append(("image_queries", self.image_queries))
            out.extend(self.image_mapper.named_params("image_mapper"))
        out.extend(self.combiner.named_params("combiner"))
        return out

    def map_textual(self, summary_token: Node, text_local: Node) -> Node:
        return self.text_mapper.map(summary_token, text_local, self.text_queries)

    def map_visual(self, image_global: Node, image_local: Node) -> Node:
        return self.image_mapper.map(image_global, image_local, self.image_queries)

    def forward_query(
        self,
        ref_bundle: FeatureBundle,
        text_bundle: FeatureBundle,
        summary_vec=None,
    ) -> QueryForward:
        """Compose one multimodal query.

        `summary_vec` is the summary embedding row used as the textual
        context-global token during training; when None (inference, or
        summaries disabled) the text's own global feature takes its place.
        The bypass wiring without a mapper keeps the block two rows tall:
        [global, summary-or-global] on the text side, repeated globals on
        the image side.
        """
        dim = self.cfg.dim
        text_global = ad.constant(text_bundle.global_vec)
        ref_global = ad.constant(ref_bundle.global_vec)
        if summary_vec is not None:
            summary_token = ad.constant(as_row(summary_vec, dim))
        else:
            summary_token = text_global

        text_channels = None
        if self.text_mapper is not None:
            text_channels = self.map_textual(
                summary_token, ad.constant(text_bundle.local)
            )
            text_tokens = build_query_tokens(text_global, text_channels)
        else:
            text_tokens = ad.concat_rows([text_global, summary_token])

        image_channels = None
        if self.image_mapper is not None:
            image_channels = self.map_visual(ref_global, ad.constant(ref_bundle.local))
            image_tokens = build_query_tokens(ref_global, image_channels)
        else:
            image_tokens = ad.concat_rows([ref_global] * (1 + self.cfg.channels))

        composed = self.combiner.compose(text_tokens, image_tokens)
        return QueryForward(
            composed=composed,
            text_channels=text_channels,
            image_channels=image_channels,
            text_tokens=text_tokens,
            image_tokens=image_tokens,
        )


def as_row(vec, dim: int):
    arr = np.asarray(vec, dtype=np.float64).reshape(1, -1)
    if arr.shape[1] != dim:
        raise DimensionMismatch(f"expected width {dim}, got {arr.shape[1]}")
    return arr
