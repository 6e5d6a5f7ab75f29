"""Finite-difference verification suites for primitives and the objective.

Each primitive is probed through a random linear functional of its output
(plain sums would zero out softmax-style gradients). The objective suite
rebuilds the full training loss around a small planted batch and checks
the query banks plus one attention weight matrix per transformer stack.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import dataset as ds
from . import losses as L
from . import parsing
from .autodiff import GradCheckReport, finite_difference_check
from .encoders import EncoderConfig, SyntheticEncoder
from .mapping import ComposerModel, target_representation
from .training import TrainConfig


def run_primitive_checks(seed: int = 0, h: float = 1e-5, tol: float = 1e-4):
    """One finite-difference report per differentiable primitive."""
    rng = np.random.default_rng(seed)

    def p(rows, cols):
        return ad.parameter(rng.standard_normal((rows, cols)))

    checks: list[tuple[str, GradCheckReport]] = []

    def check(name, make):
        params, f = make()
        checks.append((name, finite_difference_check(f, params, h=h, tol=tol)))

    def via(op, *params, reducer=True):
        if reducer:
            probe = np.random.default_rng(seed + 2).standard_normal(op(*params).shape)

        def build():
            out = op(*params)
            if reducer:
                return ad.sum_all(ad.mul(out, ad.constant(probe)))
            return out

        return list(params), build

    check("add", lambda: via(ad.add, p(3, 4), p(3, 4)))
    check("sub", lambda: via(ad.sub, p(3, 4), p(3, 4)))
    check("mul", lambda: via(ad.mul, p(3, 4), p(3, 4)))
    check("scale", lambda: via(lambda a: ad.scale(a, -1.7), p(3, 4)))
    check("add_bias", lambda: via(ad.add_bias, p(4, 5), p(1, 5)))
    check("matmul", lambda: via(ad.matmul, p(3, 4), p(4, 2)))
    check("transpose", lambda: via(ad.transpose, p(3, 4)))
    check("concat_rows", lambda: via(lambda a, b: ad.concat_rows([a, b]), p(2, 4), p(3, 4)))
    check("concat_cols", lambda: via(lambda a, b: ad.concat_cols([a, b]), p(3, 2), p(3, 4)))
    check("slice_rows", lambda: via(lambda a: ad.slice_rows(a, 1, 3), p(4, 3)))
    check("slice_cols", lambda: via(lambda a: ad.slice_cols(a, 1, 4), p(3, 5)))
    check("mean_rows", lambda: via(ad.mean_rows, p(4, 3)))
    check("sum_all", lambda: via(ad.sum_all, p(3, 4), reducer=False))
    check("softmax_rows", lambda: via(ad.softmax_rows, p(3, 5)))
    check("log_softmax_rows", lambda: via(ad.log_softmax_rows, p(3, 5)))
    check("layer_norm_rows", lambda: via(ad.layer_norm_rows, p(3, 6), p(1, 6), p(1, 6)))
    check("gelu", lambda: via(ad.gelu, p(3, 4)))
    check("l2_normalize_rows", lambda: via(ad.l2_normalize_rows, p(3, 5)))
    check("cosine_similarity", lambda: via(ad.cosine_similarity, p(1, 6), p(1, 6), reducer=False))
    check("frobenius_sq", lambda: via(ad.frobenius_sq, p(3, 4), reducer=False))
    return checks


def objective_setup(cfg: TrainConfig, batch: int, data_seed: int = 11):
    """A planted batch plus a full-wiring model, for objective-level checks."""
    records = ds.generate_synthetic(batch, seed=data_seed)
    encoder = SyntheticEncoder(
        EncoderConfig(
            dim=cfg.dim, local_count=cfg.local_count, seed=cfg.seed,
            plant_structure=True,
        ),
        planted=ds.planted_pairs(records),
    )
    summarizer = parsing.ReferenceSummarizer()
    triplets = []
    for r in records:
        summary = parsing.refine_until_consistent(r.mmt, summarizer)
        triplets.append(
            (
                encoder.encode_image(r.reference),
                encoder.encode_text(r.mmt),
                encoder.encode_image(r.target),
                encoder.encode_text(summary).global_vec,
            )
        )
    model = ComposerModel(cfg.arch(), seed=cfg.seed)
    return model, triplets


def objective_value(model, triplets, weights: L.LossWeights) -> ad.Node:
    """The full training objective over a prepared batch, as a fresh graph."""
    composed, targets, summ_terms, ortho_terms = [], [], [], []
    for ref_b, text_b, target_b, summary_vec in triplets:
        fwd = model.forward_query(ref_b, text_b, summary_vec)
        composed.append(fwd.composed)
        targets.append(target_representation(target_b))
        summ_terms.append(L.loss_summ(ad.constant(summary_vec), fwd.text_channels))
        ortho_terms.append(L.loss_ortho(fwd.text_channels, fwd.image_channels))
    bbc = L.loss_bbc(composed, targets, weights.tau)

    def mean(terms):
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return ad.scale(total, 1.0 / len(terms))

    total, _ = L.total_loss(bbc, mean(summ_terms), mean(ortho_terms), weights)
    return total


def run_objective_check(
    cfg: TrainConfig | None = None,
    batch: int = 3,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
) -> GradCheckReport:
    """Check the combined objective against finite differences.

    Probes both query banks and the first attention weight matrix of the
    textual, visual, and combiner stacks.
    """
    if cfg is None:
        cfg = TrainConfig(epochs=1, dim=32, local_count=4, channels=3, seed=0)
    model, triplets = objective_setup(cfg, batch)
    params = [
        ("text_queries", model.text_queries),
        ("image_queries", model.image_queries),
        ("text_mapper.layer0.wq", model.text_mapper.stack.layers[0].params["wq"]),
        ("image_mapper.layer0.wq", model.image_mapper.stack.layers[0].params["wq"]),
        ("combiner.layer0.wq", model.combiner.stack.layers[0].params["wq"]),
    ]

    def f():
        return objective_value(model, triplets, cfg.weights)

    return finite_difference_check(f, params, h=h, tol=tol, max_entries=max_entries)
