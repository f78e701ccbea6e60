"""Alternating three-step training loop, batch plumbing and MAE evaluation.

Each batch passes through up to three optimization steps. Step 1 trains the
primary branch and the attribute classifiers on all supervised terms plus
the primary reconstruction. Step 2 freezes everything except the attribute
encoders and decoders and trains them to reconstruct the attention-weighted
squares, which are held fixed. Step 3 trains only the fusion head on the
supervised fusion loss. Parameters outside a step's update set are never
touched, so freeze contracts hold bit-exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import diffcore as dc
from .autolabel import load_labels
from .errors import EmptyBatch, EmptyTestSet, InvalidParams, NumericFailure, ShapeMismatch
from .model import ATTENTION_ATTRIBUTES, IDX, SCORE_NAMES, ModelConfig, XCryoNet

ARCHS = ("primary_only", "full_xcryonet")
SUPERVISION_MODES = ("fully_supervised", "semi_supervised")


@dataclass(frozen=True)
class LossReport:
    """Scalar loss values for one step, one batch, or one epoch."""

    L_p: float = 0.0
    L_S_p: float = 0.0
    L_U_p: float = 0.0
    L_cr: float = 0.0
    L_co: float = 0.0
    L_f: float = 0.0

    FIELDS = ("L_p", "L_S_p", "L_U_p", "L_cr", "L_co", "L_f")

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}

    def finite(self) -> bool:
        return all(np.isfinite(v) for v in self.as_dict().values())

    @classmethod
    def mean(cls, reports) -> "LossReport":
        reports = list(reports)
        if not reports:
            return cls()
        return cls(**{
            name: float(np.mean([getattr(r, name) for r in reports]))
            for name in cls.FIELDS
        })


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 75
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    labeled_count: int | None = None     # None: every labeled sample
    unlabeled_count: int | None = None   # None: every unlabeled sample (0 under full supervision)
    arch: str = "full_xcryonet"
    supervision: str = "semi_supervised"
    checkpoint_every: int = 25
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidParams(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidParams(f"batch_size must be >= 1, got {self.batch_size}")
        if self.arch not in ARCHS:
            raise InvalidParams(f"arch {self.arch!r} not in {ARCHS}")
        if self.supervision not in SUPERVISION_MODES:
            raise InvalidParams(f"supervision {self.supervision!r} not in {SUPERVISION_MODES}")
        for name in ("labeled_count", "unlabeled_count"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise InvalidParams(f"{name} must be >= 0, got {v}")
        if self.supervision == "fully_supervised" and self.unlabeled_count not in (None, 0):
            raise InvalidParams("fully_supervised training cannot request unlabeled samples")

    def resolved_unlabeled(self, available: int) -> int:
        if self.supervision == "fully_supervised":
            return 0
        return available if self.unlabeled_count is None else self.unlabeled_count

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# --------------------------------------------------------------------------
# dataset plumbing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Images plus (possibly partial) score labels.

    images: (N,1,H,W) float32 in [0,1]; scores: (N,5) float64 with NaN for
    absent labels; mask: (N,5) bool, True where a label is present.
    """

    images: np.ndarray
    scores: np.ndarray
    mask: np.ndarray
    ids: tuple

    def __post_init__(self):
        n = self.images.shape[0]
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ShapeMismatch(f"images must be (N,1,H,W), got {self.images.shape}")
        if self.scores.shape != (n, 5) or self.mask.shape != (n, 5):
            raise ShapeMismatch(
                f"scores/mask must be ({n},5), got {self.scores.shape} and {self.mask.shape}"
            )
        if len(self.ids) != n:
            raise ShapeMismatch(f"{len(self.ids)} ids for {n} images")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def labeled_rows(self) -> np.ndarray:
        return np.flatnonzero(self.mask.any(axis=1))

    def unlabeled_rows(self) -> np.ndarray:
        return np.flatnonzero(~self.mask.any(axis=1))

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.intp)
        return Dataset(
            images=self.images[indices],
            scores=self.scores[indices],
            mask=self.mask[indices],
            ids=tuple(self.ids[i] for i in indices),
        )

    @staticmethod
    def concat(parts) -> "Dataset":
        parts = [p for p in parts if p.n > 0]
        if not parts:
            raise EmptyBatch("cannot concatenate zero samples")
        return Dataset(
            images=np.concatenate([p.images for p in parts], axis=0),
            scores=np.concatenate([p.scores for p in parts], axis=0),
            mask=np.concatenate([p.mask for p in parts], axis=0),
            ids=tuple(i for p in parts for i in p.ids),
        )

    @classmethod
    def from_arrays(cls, images, scores=None, ids=None) -> "Dataset":
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[:, None, :, :]
        n = images.shape[0]
        if scores is None:
            scores = np.full((n, 5), np.nan, dtype=np.float64)
        elif isinstance(scores, dict):
            # mapping id -> ScoreVector, stacked in `ids` order
            if ids is None:
                ids = tuple(scores)
            scores = np.stack([scores[i].as_array() for i in ids])
        scores = np.asarray(scores, dtype=np.float64)
        mask = np.isfinite(scores)
        scores = np.where(mask, scores, np.nan)
        if ids is None:
            ids = tuple(f"sq_{i:06d}" for i in range(n))
        return cls(images=images, scores=scores, mask=mask, ids=tuple(ids))

    @classmethod
    def from_corpus(cls, corpus_dir, labels_name: str = "labels.csv") -> "Dataset":
        """Load images/<id>.png plus a label CSV from a corpus directory."""
        corpus_dir = Path(corpus_dir)
        labels = load_labels(corpus_dir / labels_name)
        images = []
        scores = []
        ids = []
        for square_id, vec in labels.items():
            with Image.open(corpus_dir / "images" / f"{square_id}.png") as im:
                if im.mode in ("I", "I;16"):
                    arr = np.asarray(im, dtype=np.float32) / 65535.0
                else:
                    arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
            images.append(arr)
            scores.append(vec.as_array())
            ids.append(square_id)
        if not images:
            raise EmptyBatch(f"no samples listed in {corpus_dir / labels_name}")
        return cls.from_arrays(np.stack(images), np.stack(scores), ids)


@dataclass(frozen=True)
class Batch:
    images: np.ndarray   # (B,1,H,W) float32
    scores: np.ndarray   # (B,5) float64 with NaN holes
    mask: np.ndarray     # (B,5) bool

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def any_labeled(self) -> bool:
        return bool(self.mask.any())


def select_training_sets(corpus: Dataset, config: TrainConfig, rng) -> tuple:
    """Split a corpus into (train set, held-out test set of labeled rows).

    labeled_count labeled samples (all, when None) and the configured number
    of unlabeled samples are drawn without replacement under the given
    generator; labeled rows not drawn form the test set.
    """
    labeled = rng.permutation(corpus.labeled_rows())
    unlabeled = rng.permutation(corpus.unlabeled_rows())
    nl = len(labeled) if config.labeled_count is None else config.labeled_count
    nu = config.resolved_unlabeled(len(unlabeled))
    if nl > len(labeled):
        raise InvalidParams(f"labeled_count {nl} exceeds {len(labeled)} labeled samples")
    if nu > len(unlabeled):
        raise InvalidParams(f"unlabeled_count {nu} exceeds {len(unlabeled)} unlabeled samples")
    if nl + nu == 0:
        raise EmptyBatch("training set would be empty")
    train = corpus.subset(np.concatenate([labeled[:nl], unlabeled[:nu]]))
    test = corpus.subset(labeled[nl:])
    return train, test


# --------------------------------------------------------------------------
# optimization steps
# --------------------------------------------------------------------------


def _step1_params(model: XCryoNet) -> list:
    """Primary branch plus the attribute classifier heads."""
    return (model.params.partition("primary")
            + model.params.select(("cracking.classifier", "contamination.classifier")))


def _step2_params(model: XCryoNet) -> list:
    """Attribute encoders and decoders."""
    return model.params.select((
        "cracking.feature", "cracking.decoder",
        "contamination.feature", "contamination.decoder",
    ))


def _step3_params(model: XCryoNet) -> list:
    return model.params.partition("fusion")


def _require_samples(batch: Batch) -> None:
    if batch.n == 0:
        raise EmptyBatch("batch has no samples")


def step1_primary_and_attribute(batch: Batch, model: XCryoNet, optimizer) -> LossReport:
    """Supervised losses plus primary reconstruction; updates the primary
    branch and the attribute classifiers.

    Gradients reach the primary parameters through the attention maps as
    well; attribute encoder/decoder and fusion parameters receive no update.
    On a fully unlabeled batch every supervised term is an exact zero, so
    only the reconstruction graph is built.
    """
    _require_samples(batch)
    model.params.zero_grad()
    img = dc.Tensor(batch.images)
    labeled = batch.any_labeled()

    feat = model.feature_network(img, "primary")
    recon = model.decode(feat, "primary")
    loss_u_p = dc.mse(recon, batch.images)

    if labeled:
        y4, m4 = batch.scores[:, :4], batch.mask[:, :4]
        yo, mo = batch.scores[:, 4:5], batch.mask[:, 4:5]
        attrs, overall = model.primary_classifier(feat)
        loss_s_p = dc.add(dc.masked_mse(attrs, y4, m4), dc.masked_mse(overall, yo, mo))
        sup_terms = {}
        for attribute, short in (("cracking", "cr"), ("contamination", "co")):
            attn = model.make_attention(feat, attribute, img.shape[2])
            weighted = model.attention_weight(img, attn)
            pred, _, _ = model.attribute_branch(weighted, attribute, with_decoder=False)
            col = IDX[attribute]
            sup_terms[short] = dc.masked_mse(
                pred, batch.scores[:, col:col + 1], batch.mask[:, col:col + 1]
            )
        total = dc.add_n([loss_s_p, loss_u_p, sup_terms["cr"], sup_terms["co"]])
        s_p, s_cr, s_co = loss_s_p.item(), sup_terms["cr"].item(), sup_terms["co"].item()
    else:
        total = loss_u_p
        s_p = s_cr = s_co = 0.0

    dc.backward(total)
    optimizer.step(_step1_params(model), group="step1")
    model.params.zero_grad()

    u_p = loss_u_p.item()
    return LossReport(L_p=s_p + u_p, L_S_p=s_p, L_U_p=u_p, L_cr=s_cr, L_co=s_co)


def _frozen_attention_inputs(batch: Batch, model: XCryoNet) -> dict:
    """Attention-weighted squares under the current primary parameters,
    detached from the graph so they act as fixed inputs and targets."""
    with dc.no_grad():
        img = dc.Tensor(batch.images)
        feat = model.feature_network(img, "primary")
        weighted = {}
        for attribute in ATTENTION_ATTRIBUTES:
            attn = model.make_attention(feat, attribute, img.shape[2])
            weighted[attribute] = model.attention_weight(img, attn).data
    return {"primary_feat": feat.data, "weighted": weighted}


def step2_attribute_autoencoder(batch: Batch, model: XCryoNet, optimizer,
                                context: dict | None = None) -> LossReport:
    """Reconstruction of the attention-weighted squares; updates only the
    attribute encoders and decoders.

    The weighted squares come from a gradient-free primary pass, so nothing
    reaches the primary parameters; classifiers and fusion are untouched.
    Returns the same report whether or not a precomputed context is passed.
    """
    _require_samples(batch)
    if context is None:
        context = _frozen_attention_inputs(batch, model)
    model.params.zero_grad()
    losses = {}
    for attribute, short in (("cracking", "cr"), ("contamination", "co")):
        target = context["weighted"][attribute]
        afeat = model.feature_network(dc.Tensor(target), attribute)
        recon = model.decode(afeat, attribute)
        losses[short] = dc.mse(recon, target)
    total = dc.add(losses["cr"], losses["co"])
    dc.backward(total)
    optimizer.step(_step2_params(model), group="step2")
    model.params.zero_grad()
    return LossReport(L_cr=losses["cr"].item(), L_co=losses["co"].item())


def step3_fusion(batch: Batch, model: XCryoNet, optimizer,
                 context: dict | None = None) -> LossReport:
    """Supervised fusion loss; updates only the fusion head.

    All three feature maps are computed gradient-free under the parameters
    left by steps 1 and 2. A fully unlabeled batch performs no update.
    """
    _require_samples(batch)
    if not batch.any_labeled():
        return LossReport()
    if context is None:
        context = _frozen_attention_inputs(batch, model)
    with dc.no_grad():
        feats = [dc.Tensor(context["primary_feat"])]
        for attribute in ATTENTION_ATTRIBUTES:
            feats.append(model.feature_network(
                dc.Tensor(context["weighted"][attribute]), attribute
            ))
    model.params.zero_grad()
    attrs, overall = model.fusion_branch(*feats)
    loss_f = dc.add(
        dc.masked_mse(attrs, batch.scores[:, :4], batch.mask[:, :4]),
        dc.masked_mse(overall, batch.scores[:, 4:5], batch.mask[:, 4:5]),
    )
    dc.backward(loss_f)
    optimizer.step(_step3_params(model), group="step3")
    model.params.zero_grad()
    return LossReport(L_f=loss_f.item())


def step_primary_only(batch: Batch, model: XCryoNet, optimizer) -> LossReport:
    """Single-step training of the primary branch alone."""
    _require_samples(batch)
    model.params.zero_grad()
    img = dc.Tensor(batch.images)
    feat = model.feature_network(img, "primary")
    recon = model.decode(feat, "primary")
    loss_u_p = dc.mse(recon, batch.images)
    if batch.any_labeled():
        attrs, overall = model.primary_classifier(feat)
        loss_s_p = dc.add(
            dc.masked_mse(attrs, batch.scores[:, :4], batch.mask[:, :4]),
            dc.masked_mse(overall, batch.scores[:, 4:5], batch.mask[:, 4:5]),
        )
        total = dc.add(loss_s_p, loss_u_p)
        s_p = loss_s_p.item()
    else:
        total = loss_u_p
        s_p = 0.0
    dc.backward(total)
    optimizer.step(model.params.partition("primary"), group="primary")
    model.params.zero_grad()
    u_p = loss_u_p.item()
    return LossReport(L_p=s_p + u_p, L_S_p=s_p, L_U_p=u_p)


def train_batch(batch: Batch, model: XCryoNet, optimizer, arch: str) -> LossReport:
    """Run the step sequence for one batch and combine the step reports."""
    if arch == "primary_only":
        return step_primary_only(batch, model, optimizer)
    r1 = step1_primary_and_attribute(batch, model, optimizer)
    context = _frozen_attention_inputs(batch, model)
    r2 = step2_attribute_autoencoder(batch, model, optimizer, context=context)
    r3 = step3_fusion(batch, model, optimizer, context=context)
    return LossReport(
        L_p=r1.L_p,
        L_S_p=r1.L_S_p,
        L_U_p=r1.L_U_p,
        L_cr=r1.L_cr + r2.L_cr,
        L_co=r1.L_co + r2.L_co,
        L_f=r3.L_f,
    )


def train_epoch(dataset: Dataset, model: XCryoNet, optimizer,
                config: TrainConfig, rng) -> LossReport:
    """One uniformly shuffled pass; returns the mean batch report."""
    if dataset.n == 0:
        raise EmptyBatch("dataset has no samples")
    order = rng.permutation(dataset.n)
    reports = []
    for start in range(0, dataset.n, config.batch_size):
        idx = order[start:start + config.batch_size]
        batch = Batch(
            images=dataset.images[idx],
            scores=dataset.scores[idx],
            mask=dataset.mask[idx],
        )
        report = train_batch(batch, model, optimizer, config.arch)
        if not report.finite():
            raise NumericFailure(
                f"non-finite loss in batch starting at sample {start}: {report.as_dict()}"
            )
        reports.append(report)
    return LossReport.mean(reports)


# --------------------------------------------------------------------------
# full runs
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: XCryoNet
    config: TrainConfig
    history: list          # one LossReport per epoch
    train_set: Dataset
    test_set: Dataset
    mae: dict | None       # evaluate() output, None when no test labels exist
    run_dir: Path | None


def run_training(config: TrainConfig, corpus: Dataset, out_dir=None,
                 log=None) -> TrainResult:
    """Train a fresh model on a corpus according to the config.

    Seeding: the config seed spawns three independent streams for parameter
    initialization, epoch shuffling, and the labeled/unlabeled draw, so two
    runs with equal configs and corpora are identical.
    """
    init_ss, shuffle_ss, split_ss = np.random.SeedSequence(config.seed).spawn(3)
    model = XCryoNet.create(config.model, seed=np.random.default_rng(init_ss))
    train_set, test_set = select_training_sets(
        corpus, config, np.random.default_rng(split_ss)
    )
    optimizer = dc.Adam(lr=config.lr, beta1=config.beta1,
                        beta2=config.beta2, eps=config.eps)
    shuffle_rng = np.random.default_rng(shuffle_ss)

    run_dir = None
    loss_path = None
    if out_dir is not None:
        run_dir = Path(out_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(
            json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
        )
        loss_path = run_dir / "losses.csv"
        with open(loss_path, "w", newline="") as fh:
            csv.writer(fh).writerow(("epoch",) + LossReport.FIELDS)

    history = []
    for epoch in range(1, config.epochs + 1):
        report = train_epoch(train_set, model, optimizer, config, shuffle_rng)
        history.append(report)
        if loss_path is not None:
            with open(loss_path, "a", newline="") as fh:
                csv.writer(fh).writerow(
                    [epoch] + ["%.10g" % v for v in report.as_dict().values()]
                )
        if run_dir is not None and config.checkpoint_every > 0 \
                and epoch % config.checkpoint_every == 0 and epoch < config.epochs:
            _save_checkpoint(model, config, run_dir / f"checkpoint_epoch{epoch:04d}.xcn")
        if log is not None:
            log(epoch, report)

    mae = None
    if test_set.n > 0 and test_set.mask.any():
        mae = evaluate(model, test_set, arch=config.arch)
    if run_dir is not None:
        _save_checkpoint(model, config, run_dir / "checkpoint_final.xcn")
        if mae is not None:
            (run_dir / "mae_report.json").write_text(
                json.dumps(mae, indent=2, sort_keys=True) + "\n"
            )
    return TrainResult(model=model, config=config, history=history,
                       train_set=train_set, test_set=test_set, mae=mae,
                       run_dir=run_dir)


def _save_checkpoint(model: XCryoNet, config: TrainConfig, path) -> None:
    model.save(path, extra_meta={"arch": config.arch,
                                 "supervision": config.supervision,
                                 "train_config": config.to_dict()})


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def predict_dataset(model: XCryoNet, data: Dataset, arch: str = "full_xcryonet",
                    batch_size: int = 64) -> np.ndarray:
    """Raw (N,5) predictions, computed in batches to bound memory."""
    chunks = []
    for start in range(0, data.n, batch_size):
        chunks.append(model.predict_scores(data.images[start:start + batch_size], arch=arch))
    return np.concatenate(chunks, axis=0)


def mae_report(predictions: np.ndarray, scores: np.ndarray, mask: np.ndarray) -> dict:
    """Per-score mean absolute error over labeled entries.

    A score column with no labels at all reports NaN.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    out = {}
    for i, name in enumerate(SCORE_NAMES):
        m = mask[:, i]
        if not m.any():
            out[name] = float("nan")
        else:
            out[name] = float(np.abs(predictions[m, i] - scores[m, i]).mean())
    return out


def evaluate(model: XCryoNet, test_set: Dataset, arch: str = "full_xcryonet",
             batch_size: int = 64) -> dict:
    """MAE per score over a test set, predictions clamped to [0, 4].

    Fusion outputs score the full architecture; the primary branch scores
    primary_only models.
    """
    if test_set.n == 0 or not test_set.mask.any():
        raise EmptyTestSet("test set has no labeled samples")
    preds = np.clip(predict_dataset(model, test_set, arch=arch, batch_size=batch_size),
                    0.0, 4.0)
    return mae_report(preds, test_set.scores, test_set.mask)


def aggregate_reports(reports) -> dict:
    """Mean and population standard deviation per score across repeated runs."""
    reports = list(reports)
    if not reports:
        raise EmptyTestSet("no reports to aggregate")
    out = {}
    for name in SCORE_NAMES:
        values = np.array([r[name] for r in reports], dtype=np.float64)
        out[name] = {"mean": float(values.mean()), "std": float(values.std())}
    return out
