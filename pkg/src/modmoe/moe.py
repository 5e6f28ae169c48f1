"""Modality router, top-k gating, the always-on meta expert and LoRA.

The router reads the combined input embeddings (projected image tokens and
word embeddings) and scores every token over the experts. Its decision is
computed once per forward pass and shared by every MoE layer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backbone import FFN, Linear, MultimodalLM, SequenceBatch, init_value
from .numkernel import Module, Tensor, matches, no_grad, parameter
from .numkernel import tensor as T

MODALITIES = ("CT", "MRI", "X-ray", "Pathology")
LOAD_BALANCE_COEF = 0.01


class Router(Module):
    """MLP classifier over experts: ``depth`` Linear layers with GeLU between."""

    def __init__(self, d_model: int, n_out: int, depth: int = 1, hidden: int = 64):
        if depth < 1:
            raise ValueError("router depth must be >= 1")
        dims = [d_model] + [hidden] * (depth - 1) + [n_out]
        self.layers = [Linear(a, b) for a, b in zip(dims[:-1], dims[1:])]
        self.frozen = False

    @property
    def n_out(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def d_in(self) -> int:
        return self.layers[0].weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"router expects dim {self.d_in}, got {x.shape[-1]}")
        for i, layer in enumerate(self.layers):
            if i:
                x = T.gelu(x)
            x = layer(x)
        return x


def router_logits(tokens: Tensor, router: Router, valid: np.ndarray | None = None):
    """Per-token logits and mean-pooled sequence logits.

    ``tokens`` is (L, d) or (B, L, d); ``valid`` masks padding for the pool.
    """
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens.reshape(1, *tokens.shape)
    B, L, _ = tokens.shape
    per_token = router(tokens)
    if valid is None:
        valid = np.ones((B, L))
    w = np.asarray(valid, dtype=np.float64).reshape(B, L, 1)
    pooled = (per_token * Tensor(w / w.sum(axis=1, keepdims=True))).sum(axis=1)
    if squeeze:
        return per_token.reshape(L, -1), pooled.reshape(-1)
    return per_token, pooled


@dataclass
class GateDecision:
    indices: np.ndarray        # (N, K) selected experts, best first
    weights: np.ndarray        # (N, E) dense gate weights; unselected exactly 0
    logits: np.ndarray         # (N, E)

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def selected_weights(self) -> np.ndarray:
        return np.take_along_axis(self.weights, self.indices, axis=1)


def topk_indices(logits: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated logits breaks ties toward the lower index
    return np.argsort(-logits, axis=1, kind="stable")[:, :k]


def gate(logits: np.ndarray, k: int) -> GateDecision:
    """Top-k selection with softmax renormalised over the selected logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    E = logits.shape[1]
    if not 1 <= k <= E:
        raise ValueError(f"top-k must be in [1, {E}], got {k}")
    idx = topk_indices(logits, k)
    sel = np.take_along_axis(logits, idx, axis=1)
    sel = np.exp(sel - sel[:, :1])
    sel /= sel.sum(axis=1, keepdims=True)
    weights = np.zeros_like(logits)
    np.put_along_axis(weights, idx, sel, axis=1)
    return GateDecision(idx, weights, logits)


class ExpertFFN(FFN):
    """FFN that counts how many token rows it has processed."""

    def __init__(self, d_model: int, hidden: int):
        super().__init__(d_model, hidden)
        self._calls = 0
        self._rows = 0

    def __call__(self, x: Tensor) -> Tensor:
        self._calls += 1
        self._rows += x.shape[0]
        return super().__call__(x)

    def reset_counters(self) -> None:
        self._calls = 0
        self._rows = 0


class MoELayer(Module):
    """E domain experts chosen top-k per token plus an always-on meta expert."""

    def __init__(self, experts: Sequence[ExpertFFN], meta: ExpertFFN | None, top_k: int):
        self.experts = list(experts)
        self.meta = meta
        self.top_k = top_k
        self._router: Router | None = None
        self._selections = np.zeros(len(self.experts), dtype=np.int64)

    def __call__(self, h: Tensor, normed: Tensor, ctx) -> Tensor:
        if ctx.decision is None:
            ctx.decision = _route(self._router, ctx, self.top_k)
        decision, gate_w = ctx.decision
        out = moe_forward(h, self, decision, normed=normed, gate_weights=gate_w)
        if ctx.record is not None:
            ctx.record.append((self, decision.indices[:, 0].copy()))
        return out


def _route(router: Router, ctx, k: int):
    if router is None:
        raise RuntimeError("MoE layer has no router attached")
    if router.frozen:
        with no_grad():
            logits = router(ctx.router_input)
        return gate(logits.data, k), None
    logits = router(ctx.router_input)
    decision = gate(logits.data, k)
    gate_w = None
    if logits.requires_grad:
        gate_w = T.softmax(T.take_along_last(logits, decision.indices))
        # Switch-style load balancing over real tokens
        valid = ctx.valid.astype(np.float64)
        n = valid.sum()
        E = logits.shape[1]
        frac = np.bincount(decision.indices[:, 0], weights=valid, minlength=E) / n
        probs = T.softmax(logits)
        mean_p = (probs * Tensor(valid[:, None] / n)).sum(axis=0)
        ctx.aux_losses.append((mean_p * Tensor(frac)).sum() * (LOAD_BALANCE_COEF * E))
    return decision, gate_w


def moe_forward(x: Tensor, layer: MoELayer, decision: GateDecision,
                normed: Tensor | None = None, gate_weights: Tensor | None = None) -> Tensor:
    """``x + sum_i G_i E_i(n) + E_meta(n)`` with ``n = normed`` (defaults to ``x``).

    Each expert runs only on the rows that selected it. ``gate_weights``,
    when given, is a differentiable (N, K) version of the selected gates.
    """
    n = x if normed is None else normed
    N = x.shape[0]
    E = len(layer.experts)
    if decision.weights.shape != (N, E):
        raise ValueError(f"gate decision is {decision.weights.shape}, layer expects ({N}, {E})")
    parts = []
    for e, expert in enumerate(layer.experts):
        rows, slots = np.nonzero(decision.indices == e)
        if rows.size == 0:
            continue
        layer._selections[e] += rows.size
        y = expert(T.gather_rows(n, rows))
        if gate_weights is None:
            g = Tensor(decision.weights[rows, e][:, None])
        else:
            g = T.getitem(gate_weights, (rows, slots)).reshape(-1, 1)
        parts.append((rows, y * g))
    out = x + T.scatter_rows(N, parts)
    if layer.meta is not None:
        out = out + layer.meta(n)
    return out


# ----------------------------------------------------------------------
# expansion
# ----------------------------------------------------------------------

def _copy_ffn(ffn: FFN) -> ExpertFFN:
    d, h = ffn.fc1.weight.shape
    e = ExpertFFN(d, h)
    for (_, dst), (_, src) in zip(e.named_parameters(), ffn.named_parameters()):
        dst.data = src.data.copy()
        dst.requires_grad = True
    return e


def expand_from_dense(model: MultimodalLM, n_experts: int, moe_layer_indices: Iterable[int],
                      router: Router, top_k: int = 2, use_meta: bool = True,
                      learned_router: bool = False) -> MultimodalLM:
    """Replace the FFN at each listed layer with experts copied from it.

    Every expert (and the meta expert) starts as a bitwise copy of that
    layer's dense FFN. The router is attached and frozen unless
    ``learned_router`` is set (the end-to-end baseline).
    """
    if router.n_out != n_experts:
        raise ValueError(f"router has {router.n_out} outputs but {n_experts} experts requested")
    if model.is_moe:
        raise ValueError("model is already expanded")
    indices = sorted(set(int(i) for i in moe_layer_indices))
    for i in indices:
        block = model.llm.blocks[i]
        experts = [_copy_ffn(block.ffn) for _ in range(n_experts)]
        meta = _copy_ffn(block.ffn) if use_meta else None
        block.moe = MoELayer(experts, meta, top_k)
        block.moe._router = router
        block.ffn = None
    router.frozen = not learned_router
    model.router = router
    model.cfg.moe_layer_indices = indices
    model.cfg.n_experts = n_experts
    model.cfg.top_k = top_k
    model.cfg.use_meta = use_meta
    return model


def moe_layers(model: MultimodalLM) -> list[tuple[int, MoELayer]]:
    return [(i, b.moe) for i, b in enumerate(model.llm.blocks) if b.moe is not None]


def reset_counters(model: MultimodalLM) -> None:
    for _, layer in moe_layers(model):
        layer._selections[:] = 0
        for ex in layer.experts + ([layer.meta] if layer.meta is not None else []):
            ex.reset_counters()


# ----------------------------------------------------------------------
# activation tracing
# ----------------------------------------------------------------------

@dataclass
class ActivationTrace:
    """Top-1 expert counts, split by image/text token, per (layer, modality)."""

    layers: list[int]
    n_experts: int
    modalities: tuple[str, ...] = MODALITIES
    image: np.ndarray = field(default=None)
    text: np.ndarray = field(default=None)

    def __post_init__(self):
        shape = (len(self.layers), len(self.modalities), self.n_experts)
        if self.image is None:
            self.image = np.zeros(shape, dtype=np.int64)
        if self.text is None:
            self.text = np.zeros(shape, dtype=np.int64)

    @property
    def top1(self) -> np.ndarray:
        return self.image + self.text

    def merge(self, other: "ActivationTrace") -> "ActivationTrace":
        if other.layers != self.layers or other.n_experts != self.n_experts:
            raise ValueError("cannot merge traces of different layouts")
        return ActivationTrace(self.layers, self.n_experts, self.modalities,
                               self.image + other.image, self.text + other.text)

    def rows(self) -> list[dict]:
        out = []
        for li, layer in enumerate(self.layers):
            for mi, mod in enumerate(self.modalities):
                for e in range(self.n_experts):
                    out.append({
                        "layer": layer, "modality": mod, "expert": e,
                        "top1_count": int(self.top1[li, mi, e]),
                        "image_token_count": int(self.image[li, mi, e]),
                        "text_token_count": int(self.text[li, mi, e]),
                    })
        return out

    def to_csv(self, path: str | Path) -> None:
        cols = ["layer", "modality", "expert", "top1_count", "image_token_count", "text_token_count"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows())


def trace_activations(model: MultimodalLM, batches: Iterable[SequenceBatch]) -> ActivationTrace:
    """Count each real token's top-1 expert at every MoE layer."""
    layers = moe_layers(model)
    if not layers:
        raise ValueError("model has no MoE layers to trace")
    index_of = {id(layer): i for i, (_, layer) in enumerate(layers)}
    trace = ActivationTrace([i for i, _ in layers], len(layers[0][1].experts))
    for batch in batches:
        if any(m not in MODALITIES for m in batch.modality):
            raise ValueError("trace needs modality labels on every record")
        mod_idx = np.array([MODALITIES.index(m) for m in batch.modality])
        B, L = batch.ids.shape
        record: list = []
        with no_grad():
            model.forward(batch, record=record)
        valid = batch.valid().reshape(-1)
        is_image = np.zeros((B, L), dtype=bool)
        is_image[:, :batch.n_image] = True
        is_image = is_image.reshape(-1)
        tok_mod = np.repeat(mod_idx, L)
        for layer, top1 in record:
            li = index_of[id(layer)]
            for kind, target in ((True, trace.image), (False, trace.text)):
                sel = valid & (is_image == kind)
                np.add.at(target[li], (tok_mod[sel], top1[sel]), 1)
    return trace


# ----------------------------------------------------------------------
# low-rank adaptation
# ----------------------------------------------------------------------

class LoraAdapter(Module):
    """Adds ``(alpha / rank) * x A^T B^T``; B starts at zero."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float):
        self.A = parameter((rank, d_in))
        self.B = parameter((d_out, rank))
        self.rank = rank
        self.alpha = alpha

    def __call__(self, x: Tensor) -> Tensor:
        return ((x @ self.A.transpose()) @ self.B.transpose()) * (self.alpha / self.rank)

    def delta(self) -> np.ndarray:
        """Effective change of the (d_in, d_out) weight."""
        return (self.alpha / self.rank) * (self.B.data @ self.A.data).T


def named_linears(module: Module, prefix: str = ""):
    for key, value in vars(module).items():
        if key.startswith("_"):
            continue
        items = value if isinstance(value, (list, tuple)) else [value]
        for j, item in enumerate(items):
            name = f"{prefix}{key}" + (f".{j}" if isinstance(value, (list, tuple)) else "")
            if isinstance(item, Linear):
                yield name, item
            if isinstance(item, Module) and not isinstance(item, LoraAdapter):
                yield from named_linears(item, name + ".")


def apply_lora(model: MultimodalLM, targets: Sequence[str], rank: int, alpha: float,
               seed: int = 0) -> list[str]:
    """Attach adapters to every Linear whose ``<path>.weight`` matches ``targets``.

    All base parameters are frozen; the returned adapter parameter names are
    the only trainable ones.
    """
    hits = []
    for key in ("vision", "projector", "llm", "router"):
        sub = getattr(model, key)
        if sub is not None:
            hits += [(n, lin) for n, lin in named_linears(sub, key + ".")
                     if matches(n + ".weight", targets)]
    if not hits:
        raise ValueError(f"no Linear weight matches {list(targets)}")
    for name, lin in hits:
        d_in, d_out = lin.weight.shape
        if rank < 1 or rank > min(d_in, d_out):
            raise ValueError(f"rank {rank} invalid for {name} of shape {d_in}x{d_out}")
    for name, lin in hits:
        d_in, d_out = lin.weight.shape
        lin.lora = LoraAdapter(d_in, d_out, rank, alpha)
        for pname in ("A", "B"):
            full = f"{name}.lora.{pname}"
            getattr(lin.lora, pname).data = init_value(full, getattr(lin.lora, pname).shape, seed)
    params = model.param_set()
    names = params.select(["*.lora.A", "*.lora.B"])
    params.set_trainable(names)
    return names


def lora_param_count(shapes: Iterable[tuple[int, int]], rank: int) -> int:
    return sum(rank * (d_in + d_out) for d_in, d_out in shapes)


__all__ = [
    "MODALITIES", "ActivationTrace", "ExpertFFN", "GateDecision", "LoraAdapter", "MoELayer",
    "Router", "apply_lora", "expand_from_dense", "gate", "moe_forward", "moe_layers",
    "router_logits", "trace_activations",
]
