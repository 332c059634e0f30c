"""Masking and the two pre-training objectives, plus the training loop.

The reconstruction objective masks every centre atom of the primary
molecule (element -> mask token, incident bonds -> mask bond; topology
and therefore degrees are preserved, a documented leak) and predicts each
masked atom's 1-hop environment token from its final hidden state
concatenated with the pooled context vector. The identification
objective classifies every atom of the unmasked primary as centre or
not, with the same context conditioning. The combined objective is the
plain sum of both losses.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .chemgraph import Atom, Bond, BondOrder, MASK_ELEMENT, MolecularGraph
from .encoders import EncoderConfig, encode_context, encode_molecule, init_encoder
from .finetune import roc_auc
from .numerics import (
    ParameterStore, Tape, Tensor, add, adam_step, backward, concat,
    init_mlp, load_checkpoint, mlp_forward, nll_sum, repeat_rows,
    save_checkpoint, softmax, take_rows,
)
from .reaction import CorpusEntry, PretrainExample
from .vocab import Vocabulary

log = logging.getLogger(__name__)

OBJECTIVES = ("M", "I", "IM")


@dataclass
class MaskedPrimary:
    graph: MolecularGraph
    masked_positions: list[int]
    targets: list[int]             # vocabulary indices, from the unmasked graph


def mask_primary(example: PretrainExample, vocab: Vocabulary) -> MaskedPrimary:
    """Mask exactly the centre atoms and their incident bonds.

    Topology is untouched: bonds change type to the mask bond, atoms
    change to the mask element (charge/H/aromatic cleared, map number
    kept for bookkeeping). Targets come from the graph before masking.
    """
    src = example.primary
    centre = set(example.centre_atom_indices)
    atoms = [
        Atom(MASK_ELEMENT, 0, 0, False, a.map_num) if i in centre else a
        for i, a in enumerate(src.atoms)
    ]
    bonds = [
        replace(b, order=BondOrder.MASK)
        if (b.i in centre or b.j in centre) else b
        for b in src.bonds
    ]
    targets = [vocab.index_of(t) for t in example.mrcr_targets]
    return MaskedPrimary(MolecularGraph(atoms, bonds),
                         list(example.centre_atom_indices), targets)


@dataclass
class PretrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    objective: str = "IM"
    lr: float = 3e-4
    batch_size: int = 128
    epochs: int = 5
    seed: int = 0
    val_fraction: float = 0.1
    ablate_context: bool = False
    head_hidden: int | None = None
    precision: str = "float32"
    max_centre_atoms: int = 20

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        enc = d.pop("encoder", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d) if enc is None else cls(
            encoder=EncoderConfig.from_dict(enc), **d)
        return cfg


def config_hash(d: dict) -> str:
    return hashlib.sha256(
        json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()[:16]


def build_model(cfg: PretrainConfig, vocab_size: int,
                rng: np.random.Generator) -> ParameterStore:
    store = ParameterStore(cfg.dtype)
    init_encoder(store, cfg.encoder, rng)
    h = cfg.encoder.hidden_dim
    hh = cfg.head_hidden or h
    init_mlp(store, "mrcr", (2 * h, hh, vocab_size), rng)
    init_mlp(store, "rci", (2 * h, hh, 2), rng)
    return store


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

def mrcr_logits(store: ParameterStore, cfg: PretrainConfig,
                masked: MaskedPrimary,
                conditional: list[MolecularGraph]) -> Tensor:
    """Per-masked-position logits over the vocabulary: a 2-layer MLP on
    concat(context, hidden-state-at-mask)."""
    ctx = encode_context(
        store, cfg.encoder, [] if cfg.ablate_context else conditional)
    enc = encode_molecule(store, cfg.encoder, masked.graph)
    states = take_rows(enc.node_states, np.array(masked.masked_positions))
    tiled = repeat_rows(ctx, len(masked.masked_positions))
    return mlp_forward(store, concat([tiled, states], axis=1), "mrcr", 2)


def mrcr_loss(store: ParameterStore, cfg: PretrainConfig,
              batch: list[tuple[MaskedPrimary, list[MolecularGraph]]],
              ) -> tuple[Tensor, list[Tensor]]:
    """Summed negative log-likelihood of the target tokens over every
    masked position in the batch; also returns per-example logits."""
    vocab_size = store["mrcr.w1"].shape[1]
    loss: Tensor | None = None
    all_logits = []
    for masked, conditional in batch:
        if any(t < 0 or t >= vocab_size for t in masked.targets):
            raise IndexError(
                f"target index out of vocabulary range (V={vocab_size})")
        logits = mrcr_logits(store, cfg, masked, conditional)
        all_logits.append(logits)
        term = nll_sum(logits, np.array(masked.targets))
        loss = term if loss is None else add(loss, term)
    assert loss is not None, "empty batch"
    return loss, all_logits


def rci_logits(store: ParameterStore, cfg: PretrainConfig,
               example: PretrainExample) -> Tensor:
    """Per-atom 2-class logits on the unmasked primary (no mask token)."""
    ctx = encode_context(
        store, cfg.encoder, [] if cfg.ablate_context else example.conditional)
    enc = encode_molecule(store, cfg.encoder, example.primary)
    n = len(example.primary.atoms)
    tiled = repeat_rows(ctx, n)
    return mlp_forward(store, concat([tiled, enc.node_states], axis=1),
                       "rci", 2)


def rci_loss(store: ParameterStore, cfg: PretrainConfig,
             batch: list[PretrainExample]) -> tuple[Tensor, list[Tensor]]:
    """Summed NLL of centre membership over every atom of every primary;
    also returns per-example class probabilities."""
    loss: Tensor | None = None
    probs = []
    for example in batch:
        logits = rci_logits(store, cfg, example)
        probs.append(softmax(logits))
        term = nll_sum(logits, np.array(example.rci_labels))
        loss = term if loss is None else add(loss, term)
    assert loss is not None, "empty batch"
    return loss, probs


def batch_loss(store: ParameterStore, cfg: PretrainConfig,
               batch: list[tuple[PretrainExample, MaskedPrimary]]) -> Tensor:
    """Objective-tagged batch loss; the combined objective is the exact
    sum of the reconstruction and identification losses."""
    loss: Tensor | None = None
    if cfg.objective in ("M", "IM"):
        m_loss, _ = mrcr_loss(
            store, cfg, [(mp, ex.conditional) for ex, mp in batch])
        loss = m_loss
    if cfg.objective in ("I", "IM"):
        i_loss, _ = rci_loss(store, cfg, [ex for ex, _ in batch])
        loss = i_loss if loss is None else add(loss, i_loss)
    assert loss is not None
    return loss


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def reconstruction_accuracy(store: ParameterStore, cfg: PretrainConfig,
                            pairs: list[tuple[PretrainExample, MaskedPrimary]],
                            ) -> float:
    hits = 0
    count = 0
    for example, masked in pairs:
        logits = mrcr_logits(store, cfg, masked, example.conditional)
        pred = logits.data.argmax(axis=1)
        hits += int((pred == np.array(masked.targets)).sum())
        count += len(masked.targets)
    return hits / count if count else float("nan")


def rci_auc(store: ParameterStore, cfg: PretrainConfig,
            examples: list[PretrainExample]) -> float | None:
    scores: list[float] = []
    labels: list[int] = []
    for example in examples:
        logits = rci_logits(store, cfg, example)
        p = softmax(logits).data[:, 1]
        scores.extend(p.tolist())
        labels.extend(example.rci_labels)
    if len(set(labels)) < 2:
        return None
    return roc_auc(np.array(scores), np.array(labels))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    checkpoint: Path
    metrics: list[dict]
    store: ParameterStore


def _checkpoint_meta(cfg: PretrainConfig, vocab: Vocabulary,
                     epoch: int) -> dict:
    return {
        "tool_version": __version__,
        "config_hash": config_hash(cfg.to_dict()),
        "seed": cfg.seed,
        "kind": "pretrain",
        "encoder": cfg.encoder.to_dict(),
        "objective": cfg.objective,
        "ablate_context": cfg.ablate_context,
        "head_hidden": cfg.head_hidden or cfg.encoder.hidden_dim,
        "vocab_size": len(vocab),
        "vocab_sha256": vocab.sha256(),
        "epoch": epoch,
    }


def check_compatible(meta: dict, cfg: PretrainConfig,
                     vocab: Vocabulary) -> None:
    if meta.get("vocab_sha256") != vocab.sha256():
        raise ValueError("checkpoint was built with a different vocabulary")
    if meta.get("encoder") != cfg.encoder.to_dict():
        raise ValueError("checkpoint encoder configuration does not match")


def pretrain_run(cfg: PretrainConfig, entries: list[CorpusEntry],
                 vocab: Vocabulary, out_dir: str | Path,
                 init_checkpoint: str | Path | None = None,
                 metrics_path: str | Path | None = None) -> PretrainResult:
    """Train on extracted examples; write per-epoch + final checkpoints
    and a JSON-lines metric log. Fully determined by (seed, corpus,
    config)."""
    if not entries:
        raise ValueError("empty corpus")
    if vocab is None or len(vocab) < 2:
        raise ValueError("vocabulary missing or trivial")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = Path(metrics_path) if metrics_path \
        else out_dir / "metrics.jsonl"

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(entries))
    n_val = int(round(cfg.val_fraction * len(entries)))
    val_entries = [entries[i] for i in order[:n_val]]
    train_entries = [entries[i] for i in order[n_val:]]
    if not train_entries:
        train_entries, val_entries = val_entries, []

    def to_pairs(part: list[CorpusEntry]):
        return [(ex, mask_primary(ex, vocab))
                for entry in part for ex in entry.examples]

    train = to_pairs(train_entries)
    val = to_pairs(val_entries) or train

    if init_checkpoint is not None:
        store, meta = load_checkpoint(init_checkpoint)
        check_compatible(meta, cfg, vocab)
        if store.dtype != np.dtype(cfg.dtype):
            raise ValueError("checkpoint precision does not match config")
    else:
        store = build_model(cfg, len(vocab), rng)

    metrics: list[dict] = []
    step = 0
    with open(metrics_path, "w", encoding="utf-8") as log_fh:
        def emit(epoch: int, loss: float) -> None:
            line = {
                "epoch": epoch, "step": step, "objective": cfg.objective,
                "loss": loss,
                "recon_acc": reconstruction_accuracy(store, cfg, val)
                if cfg.objective in ("M", "IM") else None,
                "rci_auc": rci_auc(store, cfg, [ex for ex, _ in val])
                if cfg.objective in ("I", "IM") else None,
            }
            metrics.append(line)
            log_fh.write(json.dumps(line) + "\n")
            log_fh.flush()

        for epoch in range(1, cfg.epochs + 1):
            perm = rng.permutation(len(train))
            epoch_loss = 0.0
            for start in range(0, len(train), cfg.batch_size):
                batch = [train[i] for i in perm[start:start + cfg.batch_size]]
                with Tape() as tape:
                    loss = batch_loss(store, cfg, batch)
                grads = store.grads_by_name(backward(tape, loss))
                adam_step(store, grads, cfg.lr)
                epoch_loss += loss.item()
                step += 1
            emit(epoch, epoch_loss / len(train))
            save_checkpoint(out_dir / f"epoch_{epoch:03d}", store,
                            _checkpoint_meta(cfg, vocab, epoch),
                            include_adam=True)
    final = save_checkpoint(out_dir / "final", store,
                            _checkpoint_meta(cfg, vocab, cfg.epochs),
                            include_adam=True)
    return PretrainResult(final, metrics, store)


__all__ = [
    "MaskedPrimary", "PretrainConfig", "PretrainResult", "OBJECTIVES",
    "mask_primary", "build_model", "mrcr_logits", "mrcr_loss",
    "rci_logits", "rci_loss", "batch_loss", "pretrain_run",
    "reconstruction_accuracy", "rci_auc", "config_hash",
    "check_compatible",
]
