"""End-to-end training: batching, summaries, forward, losses, optimizer.

Training is deterministic: (seed, config, dataset) fully determine every
loss value and the final weights. Summaries and encoder features are
computed once per triplet and cached across epochs. Each epoch shuffles
with a seeded permutation and drops the trailing partial batch; when the
dataset is smaller than the configured batch size, the batch size is
clamped to the dataset size so at least one full batch runs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import parsing
from .encoders import FeatureBundle
from .errors import (
    BadMagic,
    ConflictingFlags,
    CorruptRecord,
    DataEmpty,
    FingerprintMismatch,
    ProviderFailure,
    RefinementExhausted,
    VersionMismatch,
)
from .mapping import ArchConfig, ComposerModel, ModelWiring, target_representation
from .optim import AdamW

ORTHO_MODES = ("both", "txt", "img", "off")


@dataclass(frozen=True)
class AblationFlags:
    disable_pa: bool = False
    disable_em: bool = False
    disable_em_txt: bool = False
    disable_em_img: bool = False
    disable_summ: bool = False
    ortho_mode: str = "both"

    def __post_init__(self):
        if self.ortho_mode not in ORTHO_MODES:
            raise ConflictingFlags(f"ortho_mode must be one of {ORTHO_MODES}")

    @classmethod
    def from_names(cls, names) -> "AblationFlags":
        """Build from CLI-style tokens, e.g. ['pa', 'ortho=txt']."""
        kwargs = {}
        for name in names:
            token = name.strip().lower().replace("-", "_")
            if not token:
                continue
            if token.startswith("ortho="):
                kwargs["ortho_mode"] = token.split("=", 1)[1]
            elif token in ("pa", "em", "em_txt", "em_img", "summ"):
                kwargs[f"disable_{token}"] = True
            else:
                raise ConflictingFlags(f"unknown ablation flag {name!r}")
        return cls(**kwargs)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 64
    lr: float = 2e-5
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    channels: int = 3
    dim: int = 256
    local_count: int = 16
    layers: int = 2
    heads: int = 4
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def arch(self) -> ArchConfig:
        return ArchConfig(
            dim=self.dim,
            local_count=self.local_count,
            channels=self.channels,
            layers=self.layers,
            heads=self.heads,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if isinstance(data.get("weights"), dict):
            data["weights"] = L.LossWeights(**data["weights"])
        if isinstance(data.get("ablation"), dict):
            data["ablation"] = AblationFlags(**data["ablation"])
        return cls(**data)


def apply_ablation(flags: AblationFlags) -> ModelWiring:
    """Resolve ablation flags into component wiring and active loss terms.

    Removing all of EM makes the per-modality EM flags meaningless, so
    combining them is rejected. Disabling the parsing assistant removes the
    summary embedding, which forces the distillation loss off; the textual
    context token falls back to the text's own global feature.
    """
    if flags.disable_em and (flags.disable_em_txt or flags.disable_em_img):
        raise ConflictingFlags("disable_em already removes both mapping sides")
    use_text_em = not (flags.disable_em or flags.disable_em_txt)
    use_image_em = not (flags.disable_em or flags.disable_em_img)
    use_pa = not flags.disable_pa
    return ModelWiring(
        use_text_em=use_text_em,
        use_image_em=use_image_em,
        use_pa=use_pa,
        use_summ_loss=(not flags.disable_summ) and use_pa and use_text_em,
        ortho_text=flags.ortho_mode in ("both", "txt") and use_text_em,
        ortho_image=flags.ortho_mode in ("both", "img") and use_image_em,
    )


def build_model(cfg: TrainConfig) -> ComposerModel:
    return ComposerModel(cfg.arch(), apply_ablation(cfg.ablation), seed=cfg.seed)


def summarizer_for(records) -> parsing.SummaryProvider:
    """Replay dataset summaries when every record has one, else generate."""
    if records and all(r.summary for r in records):
        return parsing.FixtureSummarizer({r.mmt: r.summary for r in records})
    return parsing.ReferenceSummarizer()


@dataclass
class TrainResult:
    model: ComposerModel
    config: TrainConfig
    history: list[L.LossBreakdown]
    checkpoint: "Checkpoint"


def _batch_mean(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


def train(records, encoder, cfg: TrainConfig, summarizer=None) -> TrainResult:
    """Run the full training loop and return the model, history, checkpoint."""
    train_records = [r for r in records if r.split == "train"]
    if not train_records:
        raise DataEmpty("no training records")
    wiring = apply_ablation(cfg.ablation)
    model = ComposerModel(cfg.arch(), wiring, seed=cfg.seed)
    optimizer = AdamW(model.named_parameters(), lr=cfg.lr)

    if summarizer is None:
        summarizer = summarizer_for(train_records)
    summary_vecs: dict[str, np.ndarray] = {}
    if wiring.use_pa:
        for r in train_records:
            try:
                text = parsing.refine_until_consistent(r.mmt, summarizer)
            except (RefinementExhausted, ProviderFailure) as exc:
                raise ProviderFailure(f"triplet {r.id!r}: {exc}") from exc
            summary_vecs[r.id] = encoder.encode_text(text).global_vec

    features: dict[str, tuple[FeatureBundle, FeatureBundle, FeatureBundle]] = {}
    for r in train_records:
        features[r.id] = (
            encoder.encode_image(r.reference),
            encoder.encode_text(r.mmt),
            encoder.encode_image(r.target),
        )

    rng = np.random.default_rng(cfg.seed)
    batch = min(cfg.batch_size, len(train_records))
    history: list[L.LossBreakdown] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train_records))
        for start in range(0, len(train_records) - batch + 1, batch):
            chosen = [train_records[i] for i in order[start : start + batch]]
            optimizer.zero_grads()
            composed, targets, summ_terms, ortho_terms = [], [], [], []
            for r in chosen:
                ref_b, text_b, target_b = features[r.id]
                summary_vec = summary_vecs.get(r.id) if wiring.use_pa else None
                fwd = model.forward_query(ref_b, text_b, summary_vec)
                composed.append(fwd.composed)
                targets.append(target_representation(target_b))
                if wiring.use_summ_loss and fwd.text_channels is not None:
                    summ_terms.append(
                        L.loss_summ(ad.constant(summary_vec), fwd.text_channels)
                    )
                text_side = fwd.text_channels if wiring.ortho_text else None
                image_side = fwd.image_channels if wiring.ortho_image else None
                if text_side is not None or image_side is not None:
                    ortho_terms.append(L.loss_ortho(text_side, image_side))
            bbc = L.loss_bbc(composed, targets, cfg.weights.tau)
            summ = _batch_mean(summ_terms) if summ_terms else None
            ortho = _batch_mean(ortho_terms) if ortho_terms else None
            total, breakdown = L.total_loss(bbc, summ, ortho, cfg.weights)
            ad.backward(total)
            optimizer.step()
            history.append(breakdown)
    checkpoint = make_checkpoint(model, optimizer, cfg, step=len(history))
    return TrainResult(model=model, config=cfg, history=history, checkpoint=checkpoint)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------
#
# Container layout (little-endian):
#   magic "TEC1" | u32 version=1 | u64 header bytes | header JSON UTF-8
#   u64 section count | per section: u32 name len | name UTF-8
#                       u32 rows | u32 cols | rows*cols f64
#
# Weights are stored at full 64-bit precision so a reloaded model
# reproduces forward outputs bit-exactly.

_CKPT_MAGIC = b"TEC1"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQ")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

FINGERPRINT_FIELDS = ("dim", "local_count", "channels", "layers", "heads", "ablation")


def model_fingerprint(cfg: TrainConfig) -> dict:
    data = cfg.to_dict()
    return {name: data[name] for name in FINGERPRINT_FIELDS}


@dataclass
class Checkpoint:
    header: dict  # {"fingerprint": ..., "config": ..., "step": ...}
    sections: dict[str, np.ndarray]

    @property
    def fingerprint(self) -> dict:
        return self.header["fingerprint"]

    @property
    def step(self) -> int:
        return self.header["step"]

    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.header["config"])


def make_checkpoint(model, optimizer: AdamW, cfg: TrainConfig, step: int) -> Checkpoint:
    sections: dict[str, np.ndarray] = {}
    for name, param in model.named_parameters():
        sections[f"param.{name}"] = param.value.copy()
        state = optimizer.states[name]
        sections[f"opt.m.{name}"] = state.m.copy()
        sections[f"opt.v.{name}"] = state.v.copy()
        sections[f"opt.step.{name}"] = np.array([[float(state.step)]])
    header = {
        "fingerprint": model_fingerprint(cfg),
        "config": cfg.to_dict(),
        "step": step,
    }
    return Checkpoint(header=header, sections=sections)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header_raw = json.dumps(ckpt.header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION, len(header_raw)))
        fh.write(header_raw)
        fh.write(_U64.pack(len(ckpt.sections)))
        for name in sorted(ckpt.sections):
            arr = ckpt.sections[name]
            raw = name.encode("utf-8")
            fh.write(_U32.pack(len(raw)))
            fh.write(raw)
            fh.write(_U32.pack(arr.shape[0]))
            fh.write(_U32.pack(arr.shape[1]))
            fh.write(arr.astype("<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CorruptRecord(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path, expected_fingerprint: dict | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        magic, version, header_len = _CKPT_HEADER.unpack(
            _read_exact(fh, _CKPT_HEADER.size, "header")
        )
        if magic != _CKPT_MAGIC:
            raise BadMagic(f"expected {_CKPT_MAGIC!r}, got {magic!r}")
        if version != _CKPT_VERSION:
            raise VersionMismatch(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(_read_exact(fh, header_len, "config").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptRecord(f"unreadable checkpoint header: {exc}") from exc
        (count,) = _U64.unpack(_read_exact(fh, _U64.size, "section count"))
        sections: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = _U32.unpack(_read_exact(fh, _U32.size, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rows,) = _U32.unpack(_read_exact(fh, _U32.size, "rows"))
            (cols,) = _U32.unpack(_read_exact(fh, _U32.size, "cols"))
            raw = _read_exact(fh, 8 * rows * cols, f"section {name!r}")
            sections[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()
        if fh.read(1):
            raise CorruptRecord("trailing bytes after the last section")
    ckpt = Checkpoint(header=header, sections=sections)
    if expected_fingerprint is not None and ckpt.fingerprint != expected_fingerprint:
        raise FingerprintMismatch(
            f"checkpoint built for {ckpt.fingerprint}, expected {expected_fingerprint}"
        )
    return ckpt


def checkpoint_roundtrip(path, ckpt: Checkpoint) -> Checkpoint:
    save_checkpoint(path, ckpt)
    return load_checkpoint(path, expected_fingerprint=ckpt.fingerprint)


def restore_model(ckpt: Checkpoint) -> tuple[ComposerModel, TrainConfig]:
    """Rebuild the model from a checkpoint, loading weights bit-exactly."""
    cfg = ckpt.config()
    model = build_model(cfg)
    for name, param in model.named_parameters():
        key = f"param.{name}"
        if key not in ckpt.sections:
            raise CorruptRecord(f"checkpoint is missing section {key!r}")
        stored = ckpt.sections[key]
        if stored.shape != param.value.shape:
            raise FingerprintMismatch(
                f"section {key!r} has shape {stored.shape}, model expects {param.value.shape}"
            )
        param.value[...] = stored
    return model, cfg


# --------------------------------------------------------------------------
# accounting
# --------------------------------------------------------------------------


def count_params(model: ComposerModel) -> int:
    return sum(p.value.size for _, p in model.named_parameters())


def _stack_macs(tokens: int, dim: int, layers: int) -> int:
    # per layer: q/k/v/out projections, attention scores and mixing, and a
    # feed-forward expanding to 4*dim; matmul multiply-accumulates only
    per_layer = 4 * tokens * dim * dim + 2 * tokens * tokens * dim + 8 * tokens * dim * dim
    return layers * per_layer


def count_macs(cfg: TrainConfig) -> int:
    """Analytic multiply-accumulates for one composed query forward."""
    wiring = apply_ablation(cfg.ablation)
    d, c, n = cfg.dim, cfg.local_count, cfg.channels
    total = 0
    context = 1 + c + n
    if wiring.use_text_em:
        total += _stack_macs(context, d, cfg.layers)
        text_rows = 1 + n
    else:
        text_rows = 2
    if wiring.use_image_em:
        total += _stack_macs(context, d, cfg.layers)
    image_rows = 1 + n
    total += _stack_macs(text_rows + image_rows, d, 1)
    total += d * d  # output affine
    return total


def count_params_macs(model: ComposerModel, cfg: TrainConfig) -> tuple[int, int]:
    return count_params(model), count_macs(cfg)
