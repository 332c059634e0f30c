"""Downstream heads and metrics.

Three task shapes: single-molecule regression (RMSE loss, with a
separately reported RMSE over activity-cliff rows), molecule-pair
classification (concatenated global embeddings, cross-entropy), and
reaction-type classification (two virtual nodes spanning reactant and
product atoms, wide MLP head). Fine-tuning starts from a pre-trained
checkpoint and by default updates the whole model at a reduced learning
rate; the encoder can be frozen instead.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chemgraph import MolecularGraph, parse_smiles
from .encoders import (
    EncoderConfig, GRAPHORMER, encode_molecule, encode_reaction_sides,
)
from .numerics import (
    ParameterStore, Tape, Tensor, adam_step, backward, concat, constant,
    init_mlp, load_checkpoint, mean, mlp_forward, nll_sum, scale, softmax,
    sqrt, square, sub,
)
from .reaction import ReactionRecord, parse_reaction

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def rmse(predictions, labels) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.size == 0:
        raise ValueError(f"rmse: shapes {p.shape} vs {y.shape}")
    return float(np.sqrt(np.mean((p - y) ** 2)))


def rmse_cliff(predictions, labels, cliff_flags) -> float | None:
    """RMSE over the flagged subset; None when nothing is flagged."""
    flags = np.asarray(cliff_flags, dtype=bool)
    if not flags.any():
        return None
    p = np.asarray(predictions, dtype=np.float64)[flags]
    y = np.asarray(labels, dtype=np.float64)[flags]
    return rmse(p, y)


def roc_auc(scores, labels) -> float:
    """Rank-statistic AUC; tied scores contribute 0.5 per tied pair."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.size == 0:
        raise ValueError(f"roc_auc: shapes {s.shape} vs {y.shape}")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(s.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_scores = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0   # midrank, 1-based
        i = j + 1
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def classification_report(true_labels, predicted_labels) -> dict[str, float]:
    """Accuracy plus macro precision/recall/F1; classes absent from both
    truth and prediction are excluded from the macro average."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape or t.size == 0:
        raise ValueError(f"classification: shapes {t.shape} vs {p.shape}")
    classes = sorted(set(t.tolist()) | set(p.tolist()))
    precisions, recalls, f1s = [], [], []
    for c in classes:
        tp = int(((p == c) & (t == c)).sum())
        fp = int(((p == c) & (t != c)).sum())
        fn = int(((p != c) & (t == c)).sum())
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        precisions.append(prec)
        recalls.append(rec)
        f1s.append(f1)
    return {
        "accuracy": float((t == p).mean()),
        "precision": float(np.mean(precisions)),
        "recall": float(np.mean(recalls)),
        "f1": float(np.mean(f1s)),
    }


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class LabeledMolecule:
    graph: MolecularGraph
    label: float
    cliff_flag: bool = False


@dataclass
class LabeledPair:
    graph_a: MolecularGraph
    graph_b: MolecularGraph
    label: int


@dataclass
class LabeledReaction:
    record: ReactionRecord
    label: int


def _reader(path: str | Path, expected: list[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.DictReader(fh)
        header = rows.fieldnames or []
        missing = [c for c in expected if c not in header]
        if missing:
            raise ValueError(f"{path}: missing CSV columns {missing}")
        yield from rows


def read_regression_csv(path: str | Path) -> list[LabeledMolecule]:
    out = []
    for row in _reader(path, ["smiles", "label"]):
        label = float(row["label"])
        if not np.isfinite(label):
            raise ValueError(f"{path}: non-finite label {row['label']!r}")
        cliff = bool(int(row["cliff"])) if row.get("cliff") not in (None, "") \
            else False
        out.append(LabeledMolecule(parse_smiles(row["smiles"]), label, cliff))
    return out


def read_pair_csv(path: str | Path) -> list[LabeledPair]:
    return [
        LabeledPair(parse_smiles(row["smiles_a"]), parse_smiles(row["smiles_b"]),
                    int(row["label"]))
        for row in _reader(path, ["smiles_a", "smiles_b", "label"])
    ]


def read_reaction_csv(path: str | Path) -> list[LabeledReaction]:
    return [
        LabeledReaction(parse_reaction(row["reaction"]), int(row["label"]))
        for row in _reader(path, ["reaction", "label"])
    ]


def split_dataset(items: list, ratios: tuple[float, float, float],
                  rng: np.random.Generator) -> tuple[list, list, list]:
    """Seeded random split. A zero test share means "evaluate on the
    validation slice"."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    order = rng.permutation(len(items))
    n_train = int(round(ratios[0] * len(items)))
    n_val = int(round(ratios[1] * len(items)))
    train = [items[i] for i in order[:n_train]]
    val = [items[i] for i in order[n_train:n_train + n_val]]
    test = [items[i] for i in order[n_train + n_val:]]
    return train, val or train, test or val or train


# ---------------------------------------------------------------------------
# Configuration and shared loop
# ---------------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    freeze_encoder: bool = False
    patience: int = 20
    head_hidden: int | None = None            # default: encoder hidden dim
    rxn_head_hidden: tuple[int, int] = (1024, 1024)

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "rxn_head_hidden" in d:
            d["rxn_head_hidden"] = tuple(d["rxn_head_hidden"])
        return cls(**d)


def load_pretrained(checkpoint: str | Path) -> tuple[ParameterStore, EncoderConfig, dict]:
    store, meta = load_checkpoint(checkpoint)
    if "encoder" not in meta:
        raise ValueError("checkpoint carries no encoder configuration")
    return store, EncoderConfig.from_dict(meta["encoder"]), meta


def _trainable(store: ParameterStore, cfg: FinetuneConfig,
               head_prefix: str) -> set[str]:
    names = set()
    for name in store.names():
        if name.startswith(("mrcr.", "rci.")):
            continue          # pre-training heads ride along untouched
        if cfg.freeze_encoder and name.startswith("enc."):
            continue
        if name.startswith("enc.") or name.startswith(head_prefix + "."):
            names.add(name)
    return names


def _fit(store: ParameterStore, cfg: FinetuneConfig, trainable: set[str],
         train: list, loss_of, val_score, rng: np.random.Generator) -> None:
    """Generic loop: seeded shuffling, Adam, early stop on the validation
    score (lower is better), best parameters restored at the end."""
    best = np.inf
    best_snap = store.snapshot()
    stale = 0
    for _epoch in range(cfg.epochs):
        perm = rng.permutation(len(train))
        for start in range(0, len(train), cfg.batch_size):
            batch = [train[i] for i in perm[start:start + cfg.batch_size]]
            with Tape() as tape:
                loss = loss_of(batch)
            grads = store.grads_by_name(backward(tape, loss),
                                        trainable=trainable)
            adam_step(store, grads, cfg.lr)
        score = val_score()
        if score < best - 1e-12:
            best = score
            best_snap = store.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    store.restore(best_snap)


# ---------------------------------------------------------------------------
# Regression
# ---------------------------------------------------------------------------

def _globals_matrix(store: ParameterStore, enc_cfg: EncoderConfig,
                    graphs: list[MolecularGraph]) -> Tensor:
    rows = [encode_molecule(store, enc_cfg, g).global_state for g in graphs]
    return rows[0] if len(rows) == 1 else concat(rows, axis=0)


def finetune_regression(checkpoint: str | Path,
                        train: list[LabeledMolecule],
                        val: list[LabeledMolecule],
                        test: list[LabeledMolecule],
                        cfg: FinetuneConfig,
                        ) -> tuple[ParameterStore, dict]:
    """2-layer MLP on the global representation, RMSE loss, early stop on
    validation RMSE. Reports overall RMSE and RMSE over cliff rows."""
    store, enc_cfg, _ = load_pretrained(checkpoint)
    rng = np.random.default_rng(cfg.seed)
    h = enc_cfg.hidden_dim
    init_mlp(store, "reg", (h, cfg.head_hidden or h, 1), rng)

    def predict(items: list[LabeledMolecule]) -> np.ndarray:
        out = mlp_forward(store, _globals_matrix(
            store, enc_cfg, [m.graph for m in items]), "reg", 2)
        return out.data.reshape(-1)

    def loss_of(batch: list[LabeledMolecule]) -> Tensor:
        preds = mlp_forward(store, _globals_matrix(
            store, enc_cfg, [m.graph for m in batch]), "reg", 2)
        y = constant(np.array([[m.label] for m in batch]), store.dtype)
        return sqrt(mean(square(sub(preds, y))))

    def val_rmse() -> float:
        return rmse(predict(val), [m.label for m in val])

    _fit(store, cfg, _trainable(store, cfg, "reg"), train, loss_of,
         val_rmse, rng)
    preds = predict(test)
    labels = [m.label for m in test]
    report = {
        "rmse": rmse(preds, labels),
        "rmse_cliff": rmse_cliff(preds, labels,
                                 [m.cliff_flag for m in test]),
    }
    return store, report


# ---------------------------------------------------------------------------
# Pair classification
# ---------------------------------------------------------------------------

def _pair_logits(store: ParameterStore, enc_cfg: EncoderConfig,
                 batch: list[LabeledPair]) -> Tensor:
    rows = [
        concat([encode_molecule(store, enc_cfg, p.graph_a).global_state,
                encode_molecule(store, enc_cfg, p.graph_b).global_state],
               axis=1)
        for p in batch
    ]
    stacked = rows[0] if len(rows) == 1 else concat(rows, axis=0)
    return mlp_forward(store, stacked, "pair", 2)


def finetune_pair(checkpoint: str | Path, train: list[LabeledPair],
                  val: list[LabeledPair], test: list[LabeledPair],
                  num_classes: int, cfg: FinetuneConfig,
                  ) -> tuple[ParameterStore, dict]:
    """Concatenated pair embeddings (input-file order) into a 2-layer MLP
    with cross-entropy. Binary tasks additionally report ROC-AUC."""
    if len({p.label for p in train}) < 2:
        raise ValueError("single-class training set; nothing to learn")
    store, enc_cfg, _ = load_pretrained(checkpoint)
    rng = np.random.default_rng(cfg.seed)
    h = enc_cfg.hidden_dim
    init_mlp(store, "pair", (2 * h, cfg.head_hidden or h, num_classes), rng)

    def loss_of(batch: list[LabeledPair]) -> Tensor:
        logits = _pair_logits(store, enc_cfg, batch)
        return scale(nll_sum(logits, np.array([p.label for p in batch])),
                     1.0 / len(batch))

    def val_loss() -> float:
        return loss_of(val).item()

    _fit(store, cfg, _trainable(store, cfg, "pair"), train, loss_of,
         val_loss, rng)
    logits = _pair_logits(store, enc_cfg, test)
    pred = logits.data.argmax(axis=1)
    truth = np.array([p.label for p in test])
    report = classification_report(truth, pred)
    if num_classes == 2:
        scores = softmax(logits).data[:, 1]
        report["roc_auc"] = roc_auc(scores, truth)
    return store, report


# ---------------------------------------------------------------------------
# Reaction-type classification
# ---------------------------------------------------------------------------

def reaction_type_logits(store: ParameterStore, enc_cfg: EncoderConfig,
                         batch: list[LabeledReaction]) -> Tensor:
    """(batch, num_classes) logits from the concatenated reactant-side and
    product-side virtual-node states through the wide MLP head."""
    rows = [
        encode_reaction_sides(store, enc_cfg, r.record.reactants,
                              r.record.products)
        for r in batch
    ]
    stacked = rows[0] if len(rows) == 1 else concat(rows, axis=0)
    return mlp_forward(store, stacked, "rxn", 3)


def finetune_reaction_type(checkpoint: str | Path,
                           train: list[LabeledReaction],
                           val: list[LabeledReaction],
                           test: list[LabeledReaction],
                           num_classes: int, cfg: FinetuneConfig,
                           ) -> tuple[ParameterStore, dict]:
    """Reaction union with one virtual node per side; head is an MLP with
    two wide hidden layers. Graphormer only."""
    store, enc_cfg, _ = load_pretrained(checkpoint)
    if enc_cfg.kind != GRAPHORMER:
        raise ValueError("reaction-type fine-tuning requires a graphormer "
                         "checkpoint (virtual-node construction)")
    if len({r.label for r in train}) < 2:
        raise ValueError("single-class training set; nothing to learn")
    rng = np.random.default_rng(cfg.seed)
    h1, h2 = cfg.rxn_head_hidden
    init_mlp(store, "rxn",
             (2 * enc_cfg.hidden_dim, h1, h2, num_classes), rng)

    def loss_of(batch: list[LabeledReaction]) -> Tensor:
        logits = reaction_type_logits(store, enc_cfg, batch)
        return scale(nll_sum(logits, np.array([r.label for r in batch])),
                     1.0 / len(batch))

    def val_loss() -> float:
        return loss_of(val).item()

    _fit(store, cfg, _trainable(store, cfg, "rxn"), train, loss_of,
         val_loss, rng)
    logits = reaction_type_logits(store, enc_cfg, test)
    pred = logits.data.argmax(axis=1)
    truth = np.array([r.label for r in test])
    report = {"accuracy": float((pred == truth).mean())}
    return store, report


__all__ = [
    "LabeledMolecule", "LabeledPair", "LabeledReaction", "FinetuneConfig",
    "rmse", "rmse_cliff", "roc_auc", "classification_report",
    "read_regression_csv", "read_pair_csv", "read_reaction_csv",
    "split_dataset", "load_pretrained",
    "finetune_regression", "finetune_pair", "finetune_reaction_type",
    "reaction_type_logits",
]
