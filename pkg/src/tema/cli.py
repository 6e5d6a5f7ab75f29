"""Command-line entry point.

Commands: train, eval, retrieve, sweep, stats, gen-synth, gradcheck,
count-params. Every run echoes its resolved configuration as a '# config'
comment line, keeps stdout byte-identical for identical command and seed,
and never mutates its input files. Exit codes: 0 success, 1 runtime
failure, 2 usage error.

Option precedence is defaults < --config file < explicit flags; the
TEMA_SEED environment variable supplies the seed when --seed is absent.
When --out is given, report commands write delimited tables, a JSON
document where applicable, and a rendered figure alongside.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import dataset as ds
from . import gradcheck as gc
from . import reporting as rep
from . import retrieval as rt
from . import training as tr
from .encoders import EncoderConfig, SyntheticEncoder
from .errors import TemaError
from .losses import LossWeights
from .training import AblationFlags, TrainConfig


def _env_seed() -> int:
    raw = os.environ.get("TEMA_SEED")
    return int(raw) if raw else 0


def _add_common(parser, data_required=True):
    parser.add_argument("--config", help="JSON config file mirroring the train settings")
    parser.add_argument("--data", required=data_required, help="triplet JSONL file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", help="output directory for artifacts")


def _add_model_flags(parser, grid_axes=False):
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch", type=int, default=None)
    if grid_axes:
        # on sweep, these two accept comma lists and name the grid axis
        parser.add_argument("--kappa", default=None, help="comma list, e.g. 0,0.3,0.6")
        parser.add_argument("--channels", default=None, help="comma list, e.g. 1,3,8")
    else:
        parser.add_argument("--kappa", type=float, default=None)
        parser.add_argument("--channels", type=int, default=None)
    parser.add_argument("--mu", type=float, default=None)
    parser.add_argument("--tau", type=float, default=None)
    parser.add_argument("--dim", type=int, default=None)
    parser.add_argument("--local-count", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument(
        "--ablate", default=None,
        help="comma list of ablations: pa, em, em_txt, em_img, summ, ortho=MODE",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tema",
        description="desk-scale composed image retrieval: train, evaluate, verify",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a triplet dataset")
    _add_common(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "all"), default="all")
    p.add_argument("--exclude-reference", choices=("on", "off"), default="on")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", help="rank candidates for one query")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--id", required=True, dest="query_id", help="triplet id to query")
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--exclude-reference", choices=("on", "off"), default="on")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("sweep", help="grid over kappa or channel count")
    _add_common(p)
    _add_model_flags(p, grid_axes=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stats", help="dataset length statistics")
    _add_common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gen-synth", help="generate a planted synthetic dataset")
    _add_common(p, data_required=False)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--kind", choices=("cirr", "fashion"), default="cirr")
    p.add_argument("--file", required=True, help="output JSONL path")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p, data_required=False)
    _add_model_flags(p)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference step")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("count-params", help="parameter and MAC accounting")
    _add_common(p, data_required=False)
    _add_model_flags(p)
    p.set_defaults(func=cmd_count_params)

    return parser


def _load_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def resolve_train_config(args, require_epochs=True) -> TrainConfig:
    """defaults < config file < flags; TEMA_SEED backs an absent --seed."""
    base: dict = {}
    if getattr(args, "config", None):
        base = _load_config_file(args.config)
    weights = dict(base.get("weights", {}))
    ablation = base.get("ablation", {})

    def pick(flag, key):
        value = getattr(args, flag, None)
        return value if value is not None else base.get(key)

    for name in ("kappa", "mu", "tau"):
        value = getattr(args, name, None)
        if value is not None:
            weights[name] = value
    if getattr(args, "ablate", None) is not None:
        ablation = AblationFlags.from_names(args.ablate.split(","))
    elif isinstance(ablation, dict):
        ablation = AblationFlags(**ablation)

    seed = getattr(args, "seed", None)
    if seed is None:
        seed = base.get("seed", _env_seed())
    epochs = pick("epochs", "epochs")
    if epochs is None:
        if require_epochs:
            raise TemaError("epochs required: pass --epochs or set it in --config")
        epochs = 1
    cfg = TrainConfig(
        epochs=int(epochs),
        batch_size=int(pick("batch", "batch_size") or 64),
        lr=float(pick("lr", "lr") or 2e-5),
        seed=int(seed),
        weights=LossWeights(**weights),
        channels=int(pick("channels", "channels") or 3),
        dim=int(pick("dim", "dim") or 256),
        local_count=int(pick("local_count", "local_count") or 16),
        layers=int(base.get("layers", 2)),
        heads=int(base.get("heads", 4)),
        ablation=ablation,
    )
    return cfg


def _echo_config(payload: dict) -> None:
    print("# config: " + json.dumps(payload, sort_keys=True))


def _planted_encoder(records, cfg: TrainConfig) -> SyntheticEncoder:
    return SyntheticEncoder(
        EncoderConfig(
            dim=cfg.dim, local_count=cfg.local_count, seed=cfg.seed,
            plant_structure=True,
        ),
        planted=ds.planted_pairs(records),
    )


def _out_dir(args) -> Path | None:
    if not getattr(args, "out", None):
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    _echo_config(cfg.to_dict())
    records = ds.load_jsonl(args.data)
    encoder = _planted_encoder(records, cfg)
    result = tr.train(records, encoder, cfg)
    table = rep.format_history(result.history)
    print(table)
    out = _out_dir(args)
    if out is not None:
        tr.save_checkpoint(out / "checkpoint.tec1", result.checkpoint)
        rep.write_text(out / "losses.tsv", table)
        rep.save_loss_figure(result.history, out / "losses.png")
        print(f"# wrote {out / 'checkpoint.tec1'}")
    return 0


def _restore_for_eval(args):
    if not getattr(args, "checkpoint", None):
        raise TemaError("checkpoint required")
    ckpt = tr.load_checkpoint(args.checkpoint)
    model, cfg = tr.restore_model(ckpt)
    return ckpt, model, cfg


def _filter_split(records, split):
    if split == "all":
        return records
    return [r for r in records if r.split == split]


def cmd_eval(args) -> int:
    ckpt, model, cfg = _restore_for_eval(args)
    _echo_config({"checkpoint": ckpt.fingerprint, "split": args.split})
    records = _filter_split(ds.load_jsonl(args.data), args.split)
    encoder = _planted_encoder(records, cfg)
    report = rt.evaluate_model(
        records, model, encoder,
        exclude_reference=args.exclude_reference == "on",
    )
    table = rep.format_metrics(report)
    print(table)
    out = _out_dir(args)
    if out is not None:
        rep.write_text(out / "metrics.tsv", table)
        rep.write_json(out / "metrics.json", report.to_records())
        rep.save_metrics_figure(report, out / "metrics.png")
    return 0


def cmd_retrieve(args) -> int:
    ckpt, model, cfg = _restore_for_eval(args)
    records = ds.load_jsonl(args.data)
    by_id = {r.id: r for r in records}
    if args.query_id not in by_id:
        raise TemaError(f"no triplet with id {args.query_id!r}")
    record = by_id[args.query_id]
    _echo_config({"checkpoint": ckpt.fingerprint, "query": record.id})
    encoder = _planted_encoder(records, cfg)
    kind = rt.detect_kind(records)
    pool = rt._candidate_pool(records, kind)[record.category or "" if kind == "fashion" else ""]
    index = rt.build_index(
        {cid: rt.target_vector(encoder.encode_image(cid)) for cid in pool}
    )
    fwd = model.forward_query(
        encoder.encode_image(record.reference), encoder.encode_text(record.mmt)
    )
    exclude = {record.reference} if args.exclude_reference == "on" else frozenset()
    ranking = rt.rank_candidates(fwd.composed, index, exclude)
    query_row = fwd.composed.value.reshape(-1)
    scores = {cid: float(vec @ query_row) for cid, vec in zip(index.ids, index.vectors)}
    rows = [
        (rank + 1, cid, scores[cid], "yes" if cid == record.target else "")
        for rank, cid in enumerate(ranking[: args.topk])
    ]
    print(rep.format_table(rows, ("rank", "id", "score", "target")))
    return 0


def cmd_sweep(args) -> int:
    if bool(args.kappa) == bool(args.channels):
        raise TemaError("sweep needs exactly one grid: --kappa or --channels")
    kappa_grid, channels_grid = args.kappa, args.channels
    args.kappa = args.channels = None  # swept axes do not join the base config
    cfg = resolve_train_config(args)
    records = ds.load_jsonl(args.data)
    if kappa_grid:
        axis = "kappa"
        values = [float(v) for v in kappa_grid.split(",")]
    else:
        axis = "channels"
        values = [int(v) for v in channels_grid.split(",")]
    _echo_config({"sweep": axis, "values": values, "base": cfg.to_dict()})
    rows = []
    series: dict[str, list[float]] = {}
    for value in values:
        if axis == "kappa":
            variant = replace(cfg, weights=replace(cfg.weights, kappa=value))
        else:
            variant = replace(cfg, channels=value)
        encoder = _planted_encoder(records, variant)
        result = tr.train(records, encoder, variant)
        report = rt.evaluate_model(records, result.model, encoder)
        final = result.history[-1].total
        primary = report.cirr_avg if report.cirr_avg is not None else report.fashion_avg
        first_group = next(iter(sorted(report.recalls)))
        r1 = report.recalls[first_group].get("R@1")
        rows.append((value, final, "" if r1 is None else r1,
                     "" if primary is None else primary))
        series.setdefault("final_loss", []).append(final)
        if primary is not None:
            series.setdefault("avg_metric", []).append(primary)
    table = rep.format_table(rows, (axis, "final_loss", "R@1", "avg_metric"))
    print(table)
    out = _out_dir(args)
    if out is not None:
        rep.write_text(out / "sweep.tsv", table)
        rep.save_sweep_figure(values, series, out / "sweep.png", xlabel=axis)
    return 0


def cmd_stats(args) -> int:
    records = ds.load_jsonl(args.data)
    _echo_config({"data": os.path.basename(args.data), "records": len(records)})
    stats = ds.dataset_stats(records)
    table = rep.format_stats(stats)
    print(table)
    out = _out_dir(args)
    if out is not None:
        rep.write_text(out / "stats.tsv", table)
    return 0


def cmd_gen_synth(args) -> int:
    seed = args.seed if args.seed is not None else _env_seed()
    _echo_config({"n": args.n, "seed": seed, "kind": args.kind})
    records = ds.generate_synthetic(args.n, seed=seed, config=ds.SyntheticConfig(kind=args.kind))
    ds.save_jsonl(args.file, records)
    print(f"# wrote {len(records)} records to {args.file}")
    return 0


def cmd_gradcheck(args) -> int:
    base = resolve_train_config(args, require_epochs=False)
    # default to a small verification geometry unless dims were given
    cfg = replace(
        base,
        dim=args.dim if args.dim is not None else 32,
        local_count=args.local_count if args.local_count is not None else 4,
    )
    _echo_config({"dim": cfg.dim, "local_count": cfg.local_count,
                  "channels": cfg.channels, "tol": args.tol, "h": args.step})
    failed = False
    for name, report in gc.run_primitive_checks(seed=cfg.seed, h=args.step, tol=args.tol):
        status = "PASS" if report.passed else "FAIL"
        print(f"{name}\t{report.max_rel_err:.3e}\t{status}")
        failed = failed or not report.passed
    objective = gc.run_objective_check(cfg, h=args.step, tol=args.tol)
    print(objective.format())
    failed = failed or not objective.passed
    return 1 if failed else 0


def cmd_count_params(args) -> int:
    cfg = resolve_train_config(args, require_epochs=False)
    _echo_config(cfg.to_dict())
    model = tr.build_model(cfg)
    params, macs = tr.count_params_macs(model, cfg)
    print(rep.format_table([(params, macs)], ("parameters", "macs_per_query")))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
