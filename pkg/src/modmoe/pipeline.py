"""The three-phase curriculum: alignment, instruction tuning plus router
training, and MoE tuning, with freezing contracts, checkpoints and
parameter accounting."""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backbone import (MultimodalLM, SequenceBatch, TransformerConfig, Vocabulary, build_model,
                       init_parameters, make_batch, nll_loss)
from .moe import MODALITIES, Router, expand_from_dense, moe_layers, router_logits
from .numkernel import (NumericalError, OptimState, ParamSet, Schedule, SplitMix, Tensor,
                        derive_seed, load_arrays, no_grad, optimizer_step, save_arrays)
from .numkernel import tensor as T
from .synthdata import Record

PHASES = ("align", "instruct", "router", "moe")

_EXPERTS = ("llm.blocks.*.moe.experts.*", "llm.blocks.*.moe.meta.*")
_NON_FFN = ("llm.tok_emb", "llm.pos_emb", "llm.blocks.*.ln1.*", "llm.blocks.*.attn.*",
            "llm.blocks.*.ln2.*", "llm.ln_f.*", "llm.head.*")
_DENSE_FFN = ("llm.blocks.*.ffn.*",)

# toy-scale defaults; ratios of epochs follow 1 : 3 : 9
PHASE_DEFAULTS = {
    "align": dict(epochs=4, lr=1e-2, batch_size=16, warmup_steps=2),
    "instruct": dict(epochs=12, lr=2e-3, batch_size=16, warmup_steps=10),
    "router": dict(epochs=150, lr=1e-2, batch_size=100, warmup_steps=0),
    "moe": dict(epochs=36, lr=1e-3, batch_size=16, warmup_steps=10),
}


class PhaseError(ValueError):
    """A phase was asked to run on a model or config that breaks its contract."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, op: str):
        super().__init__(f"non-finite value from {op!r} at step {step}")
        self.step = step
        self.op = op


@dataclass
class PhaseConfig:
    phase: str
    trainable: list[str]
    frozen: list[str]
    epochs: int
    lr: float
    batch_size: int = 16
    seed: int = 0
    weight_decay: float = 0.0
    warmup_steps: int = 0
    min_lr: float = 0.0
    max_steps: int | None = None
    learned_router: bool = False

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs, batch_size and lr must be non-negative (batch_size >= 1)")

    def resolve(self, params: ParamSet) -> list[str]:
        """Trainable parameter names; every name must be claimed by exactly one side."""
        train = set(params.select(self.trainable))
        frozen = set(params.select(self.frozen))
        both = train & frozen
        if both:
            raise PhaseError(f"parameters both trainable and frozen: {sorted(both)[:3]}")
        loose = set(params.names()) - train - frozen
        if loose:
            raise PhaseError(f"parameters neither trainable nor frozen: {sorted(loose)[:3]}")
        return [n for n in params.names() if n in train]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseConfig":
        return cls(**d)


def default_phase_config(phase: str, seed: int = 0, phase3_train_non_ffn: bool = False,
                         learned_router: bool = False, sft: bool = False,
                         **overrides) -> PhaseConfig:
    """The standard trainable/frozen split for ``phase`` plus toy hyperparameters.

    ``phase3_train_non_ffn`` also trains attention, norms and embeddings in
    the MoE phase; ``learned_router`` trains the router end to end there;
    ``sft`` tunes the dense FFNs of an unexpanded model instead.
    """
    if phase == "align":
        trainable = ["projector.*"]
        frozen = ["vision.*", "llm.*", "router.*"]
    elif phase == "instruct":
        trainable = ["projector.*", "llm.*"]
        frozen = ["vision.*", "router.*"]
    elif phase == "router":
        trainable = ["router.*"]
        frozen = ["vision.*", "projector.*", "llm.*"]
    elif phase == "moe":
        # dense FFNs outside the MoE layers stay with the non-FFN weights
        ffn = list(_DENSE_FFN if sft else _EXPERTS)
        rest = list(_NON_FFN) + ([] if sft else list(_DENSE_FFN))
        trainable = ffn + (rest if phase3_train_non_ffn else [])
        frozen = ["vision.*", "projector.*"] + ([] if phase3_train_non_ffn else rest)
        if learned_router:
            trainable.append("router.*")
        else:
            frozen.append("router.*")
    else:
        raise ValueError(f"unknown phase {phase!r}")
    params = dict(PHASE_DEFAULTS[phase])
    params.update(overrides)
    return PhaseConfig(phase, trainable, frozen, seed=seed, learned_router=learned_router, **params)


# ----------------------------------------------------------------------
# examples and batches
# ----------------------------------------------------------------------

@dataclass
class Example:
    image: np.ndarray
    prompt: list[int]
    response: list[int]
    modality: str | None
    record: Record | None = None


def encode_examples(records: Sequence[Record], vocab: Vocabulary, kind: str) -> list[Example]:
    """``kind='caption'`` makes image -> caption pairs; ``'instruct'`` image + question -> answer."""
    out = []
    for r in records:
        if kind == "caption":
            out.append(Example(r.image, [], vocab.encode(r.caption), r.modality, r))
        elif kind == "instruct":
            out.append(Example(r.image, vocab.encode(r.instruction), vocab.encode(r.response),
                               r.modality, r))
        else:
            raise ValueError(f"unknown example kind {kind!r}")
    return out


def collate(examples: Sequence[Example], n_image: int, with_response: bool = True) -> SequenceBatch:
    images = np.stack([e.image for e in examples])
    return make_batch(images, [e.prompt for e in examples],
                      [e.response for e in examples] if with_response else None,
                      n_image=n_image, modality=[e.modality for e in examples])


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def total_steps(n: int, cfg: PhaseConfig) -> int:
    steps = cfg.epochs * steps_per_epoch(n, cfg.batch_size)
    return steps if cfg.max_steps is None else min(steps, cfg.max_steps)


def batch_indices(n: int, cfg: PhaseConfig, step: int) -> np.ndarray:
    """Example indices for global ``step``; a pure function of (seed, step)."""
    per = steps_per_epoch(n, cfg.batch_size)
    epoch, j = divmod(step, per)
    order = SplitMix(derive_seed(cfg.seed, "epoch", cfg.phase, epoch)).permutation(n)
    return order[j * cfg.batch_size:(j + 1) * cfg.batch_size]


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

def config_hash(*parts: dict) -> str:
    text = json.dumps(parts, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    model: MultimodalLM
    phase: str
    step: int
    corpus_seed: int = 0
    optim: OptimState | None = None
    phase_config: dict | None = None
    losses: list = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return config_hash(asdict(self.model.cfg), self.phase_config or {})

    def save(self, path: str | Path) -> None:
        model = self.model
        arrays = {f"param/{n}": t.data for n, t in model.named_parameters()}
        optim = None
        if self.optim is not None:
            for n in self.optim.m:
                arrays[f"opt.m/{n}"] = self.optim.m[n]
                arrays[f"opt.v/{n}"] = self.optim.v[n]
            optim = {"step": self.optim.step, "weight_decay": self.optim.weight_decay,
                     "schedule": asdict(self.optim.schedule)}
        router = None
        if model.router is not None:
            r = model.router
            router = {"depth": len(r.layers), "hidden": r.layers[0].weight.shape[1],
                      "n_out": r.n_out, "frozen": r.frozen}
        meta = {
            "format": 1, "phase": self.phase, "step": self.step, "stage": model.stage,
            "corpus_seed": self.corpus_seed, "model_config": asdict(model.cfg),
            "expanded": model.is_moe, "router": router, "optim": optim,
            "phase_config": self.phase_config, "config_hash": self.config_hash,
            "losses": self.losses,
        }
        save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        arrays, meta = load_arrays(path)
        mc = dict(meta["model_config"])
        cfg = TransformerConfig.from_dict(mc)
        dense_cfg = TransformerConfig.from_dict({**mc, "moe_layer_indices": []})
        model = MultimodalLM(dense_cfg)
        if meta["router"] is not None:
            r = meta["router"]
            router = Router(cfg.d_model, r["n_out"], r["depth"], r["hidden"])
            if meta["expanded"]:
                expand_from_dense(model, cfg.n_experts, cfg.moe_layer_indices, router,
                                  top_k=cfg.top_k, use_meta=cfg.use_meta,
                                  learned_router=not r["frozen"])
            model.router = router
            router.frozen = r["frozen"]
        model.cfg = cfg
        for n, t in model.named_parameters():
            t.data = arrays[f"param/{n}"].copy()
        model.stage = meta["stage"]
        optim = None
        if meta["optim"] is not None:
            o = meta["optim"]
            optim = OptimState(Schedule(**o["schedule"]), o["weight_decay"], o["step"])
            for key, a in arrays.items():
                if key.startswith("opt.m/"):
                    optim.m[key[6:]] = a.copy()
                elif key.startswith("opt.v/"):
                    optim.v[key[6:]] = a.copy()
        return cls(model, meta["phase"], meta["step"], meta["corpus_seed"], optim,
                   meta["phase_config"], [list(x) for x in meta["losses"]])


# ----------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------

def _model_loss(model: MultimodalLM, batch: SequenceBatch) -> Tensor:
    ctxs: list = []
    loss = nll_loss(model.forward(batch, ctx_out=ctxs), batch)
    for aux in ctxs[0].aux_losses:
        loss = loss + aux
    return loss


def train_phase(model: MultimodalLM, examples: Sequence[Example], cfg: PhaseConfig,
                resume: Checkpoint | None = None, stop_after: int | None = None,
                corpus_seed: int = 0, callback: Callable[[int, float], None] | None = None
                ) -> Checkpoint:
    """Minimise the response NLL over ``examples`` updating only the trainable set.

    ``resume`` continues a checkpoint of the same phase; ``stop_after``
    halts once the global step counter reaches it (for interrupted runs).
    """
    if not examples:
        raise PhaseError("no training examples")
    params = model.param_set()
    names = cfg.resolve(params)
    params.set_trainable(names)
    n_steps = total_steps(len(examples), cfg)
    if resume is not None:
        if resume.phase != cfg.phase or resume.optim is None:
            raise PhaseError("resume checkpoint does not belong to this phase")
        state, losses, start = resume.optim, list(resume.losses), resume.step
    else:
        schedule = Schedule(cfg.lr, n_steps, min(cfg.warmup_steps, n_steps), cfg.min_lr)
        state, losses, start = OptimState(schedule, cfg.weight_decay), [], 0
    end = n_steps if stop_after is None else min(n_steps, stop_after)
    n_image = model.cfg.n_image_tokens
    for step in range(start, end):
        batch = collate([examples[i] for i in batch_indices(len(examples), cfg, step)], n_image)
        params.zero_grad()
        try:
            loss = _model_loss(model, batch)
            loss.backward()
        except NumericalError as exc:
            raise TrainingDiverged(step, exc.op) from exc
        # a trainable tensor outside this batch's graph (e.g. an expert no token chose)
        grads = {n: params[n].grad if params[n].grad is not None else np.zeros_like(params[n].data)
                 for n in names}
        lr = optimizer_step(params, state, grads)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(step, "loss")
        losses.append([step, value, lr])
        if callback is not None:
            callback(step, value)
    params.zero_grad()
    return Checkpoint(model, cfg.phase, end, corpus_seed, state, cfg.to_dict(), losses)


def _check_prefix(names: Sequence[str], allowed: Sequence[str], phase: str) -> None:
    bad = [n for n in names if not any(n.startswith(a) for a in allowed)]
    if bad:
        raise PhaseError(f"{phase} may not train {bad[0]!r}")


def run_phase1(model: MultimodalLM, records: Sequence[Record], vocab: Vocabulary,
               cfg: PhaseConfig | None = None, **kw) -> Checkpoint:
    """Alignment: only the projector learns to caption images."""
    cfg = cfg or default_phase_config("align")
    _check_prefix(cfg.resolve(model.param_set()), ["projector."], "alignment")
    ck = train_phase(model, encode_examples(records, vocab, "caption"), cfg, **kw)
    model.stage = "align"
    return ck


def run_phase2(model: MultimodalLM, records: Sequence[Record], vocab: Vocabulary,
               cfg: PhaseConfig | None = None, **kw) -> Checkpoint:
    """Instruction tuning: projector and LLM train, the vision encoder stays fixed."""
    cfg = cfg or default_phase_config("instruct")
    _check_prefix(cfg.resolve(model.param_set()), ["projector.", "llm."], "instruction tuning")
    if model.is_moe:
        raise PhaseError("instruction tuning expects a dense model")
    ck = train_phase(model, encode_examples(records, vocab, "instruct"), cfg, **kw)
    model.stage = "instruct"
    return ck


def run_phase3(model: MultimodalLM, records: Sequence[Record], vocab: Vocabulary,
               cfg: PhaseConfig | None = None, sft: bool = False, **kw) -> Checkpoint:
    """MoE tuning on an expanded model whose router is frozen.

    With ``sft`` the same phase runs on the dense model (tuning its FFNs),
    the baseline for comparing against expert tuning.
    """
    cfg = cfg or default_phase_config("moe", sft=sft)
    names = cfg.resolve(model.param_set())
    if sft:
        if model.is_moe:
            raise PhaseError("dense tuning expects an unexpanded model")
    else:
        if not model.is_moe:
            raise PhaseError("MoE tuning needs a model produced by expand_from_dense")
        if not model.router.frozen and not cfg.learned_router:
            raise PhaseError("router must be frozen for MoE tuning")
    if any(n.startswith("router.") for n in names) and not cfg.learned_router:
        raise PhaseError("router may only train in the learned-router configuration")
    _check_prefix(names, ["llm."] + (["router."] if cfg.learned_router else []), "MoE tuning")
    ck = train_phase(model, encode_examples(records, vocab, "instruct"), cfg, **kw)
    model.stage = "moe"
    return ck


# ----------------------------------------------------------------------
# router
# ----------------------------------------------------------------------

def modality_labels(records: Sequence[Record], n_out: int = len(MODALITIES)) -> np.ndarray:
    labels = []
    for r in records:
        if r.modality not in MODALITIES:
            raise PhaseError(f"record {r.id!r} has label {r.modality!r} outside {MODALITIES}")
        labels.append(MODALITIES.index(r.modality) % n_out)
    return np.array(labels, dtype=np.int64)


def label_subset(records: Sequence[Record], per_modality: int) -> list[Record]:
    """The first ``per_modality`` records of each modality, in corpus order."""
    seen = {m: 0 for m in MODALITIES}
    out = []
    for r in records:
        if seen.get(r.modality, per_modality) < per_modality:
            seen[r.modality] += 1
            out.append(r)
    return out


def router_inputs(model: MultimodalLM, records: Sequence[Record], vocab: Vocabulary):
    """T_comb embeddings of image + question, computed without gradients."""
    batch = collate(encode_examples(records, vocab, "instruct"), model.cfg.n_image_tokens,
                    with_response=False)
    with no_grad():
        comb = model.embed(batch).data
    return comb, batch.valid()


def router_embeddings(model: MultimodalLM, router: Router, records: Sequence[Record],
                      vocab: Vocabulary) -> np.ndarray:
    """Mean-pooled router logits per record, the space routing decisions live in."""
    comb, valid = router_inputs(model, records, vocab)
    with no_grad():
        _, pooled = router_logits(Tensor(comb), router, valid)
    return pooled.data


def router_accuracy(model: MultimodalLM, router: Router, records: Sequence[Record],
                    vocab: Vocabulary) -> float:
    pred = np.argmax(router_embeddings(model, router, records, vocab), axis=1)
    return float(np.mean(pred == modality_labels(records, router.n_out)))


def new_router(cfg: TransformerConfig, seed: int) -> Router:
    router = Router(cfg.d_model, cfg.n_experts, cfg.router_depth, cfg.router_hidden)
    init_parameters(router, seed, "router.")
    return router


def train_router(model: MultimodalLM, records: Sequence[Record], vocab: Vocabulary,
                 cfg: PhaseConfig | None = None, router: Router | None = None) -> Router:
    """Fit the modality classifier on pooled router logits; returns it frozen.

    Inputs come from ``model``'s embedding layer, which is not modified.
    """
    cfg = cfg or default_phase_config("router")
    if not records:
        raise PhaseError("router training needs at least one labelled record")
    if model.stage == "init":
        warnings.warn("training the router on embeddings of an untrained model", stacklevel=2)
    router = router or new_router(model.cfg, cfg.seed)
    labels = modality_labels(records, router.n_out)
    comb, valid = router_inputs(model, records, vocab)
    params = router.param_set()
    params.set_trainable(params.names())
    n = len(records)
    n_steps = total_steps(n, cfg)
    state = OptimState(Schedule(cfg.lr, n_steps, min(cfg.warmup_steps, n_steps), cfg.min_lr),
                       cfg.weight_decay)
    ones = np.ones(n)
    for step in range(n_steps):
        idx = batch_indices(n, cfg, step)
        params.zero_grad()
        _, pooled = router_logits(Tensor(comb[idx]), router, valid[idx])
        loss = T.cross_entropy(pooled, labels[idx], ones[idx])
        loss.backward()
        optimizer_step(params, state)
    for _, t in params.items():
        t.requires_grad = False
        t.grad = None
    router.frozen = True
    return router


# ----------------------------------------------------------------------
# parameter accounting
# ----------------------------------------------------------------------

@dataclass
class ParamCount:
    total: int
    activated: int
    breakdown: dict[str, int]
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


COUNT_NOTE = ("Counts are exact for this model: activated = total minus the (E - K) "
              "unselected experts per MoE layer; the meta expert and router are always active. "
              "Published reference-scale totals for this expert layout are not reproduced "
              "by this or any other convention tried; see reference_scale_counts().")


def count_parameters(model: MultimodalLM, k: int | None = None) -> ParamCount:
    params = model.param_set()
    breakdown: dict[str, int] = {}
    for name, t in params.items():
        group = name.split(".")[0]
        if ".moe.experts." in name:
            group = "experts"
        elif ".moe.meta." in name:
            group = "meta"
        breakdown[group] = breakdown.get(group, 0) + t.size
    total = params.count()
    inactive = 0
    for _, layer in moe_layers(model):
        E = len(layer.experts)
        kk = layer.top_k if k is None else k
        per_expert = sum(t.size for _, t in layer.experts[0].named_parameters())
        inactive += max(E - kk, 0) * per_expert
    return ParamCount(total, total - inactive, breakdown, COUNT_NOTE if model.is_moe else "")


def reference_scale_counts(width: int = 2560, ffn: int = 10240, moe_layers_n: int = 16,
                           experts: int = 4, k: int = 2, dense_total: float = 1.6e9) -> dict:
    """Extra parameters our convention implies for a full-size backbone.

    Returns totals in parameters for comparison with published figures;
    biases are included, as in the toy model.
    """
    per_ffn = 2 * width * ffn + ffn + width
    extra_total = moe_layers_n * experts * per_ffn       # E experts + meta replace one FFN
    extra_active = moe_layers_n * k * per_ffn             # K experts + meta replace one FFN
    return {"per_ffn": per_ffn, "total": dense_total + extra_total,
            "activated": dense_total + extra_active}
