"""Miniature multimodal causal LM.

Image patches go through a frozen linear patch embedding and a two-layer GeLU
projector; the resulting tokens are prepended to the word embeddings and the
whole sequence runs through pre-norm transformer blocks. A block's FFN slot
holds either a dense ``FFN`` or an MoE layer from :mod:`modmoe.moe`.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numkernel import Module, SplitMix, Tensor, derive_seed, no_grad, parameter
from .numkernel import tensor as T

PAD, UNK, BOS, EOS, IMAGE = range(5)
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>", "<image>")

_WORD_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9'-]*|[^\sA-Za-z0-9]")


class Vocabulary:
    """Closed word-level vocabulary; ids 0-4 are the reserved tokens."""

    def __init__(self, words: Sequence[str]):
        self.itos = list(RESERVED) + [w for w in words if w not in RESERVED]
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary words must be unique")

    def __len__(self) -> int:
        return len(self.itos)

    @staticmethod
    def split(text: str) -> list[str]:
        return _WORD_RE.findall(text.lower())

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(w, UNK) for w in self.split(text)]

    def decode(self, ids: Sequence[int]) -> str:
        words = [self.itos[i] for i in ids if i not in (PAD, BOS, EOS, IMAGE)]
        out = ""
        for w in words:
            if out and not re.fullmatch(r"[^\sA-Za-z0-9]", w):
                out += " "
            out += w
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.itos[len(RESERVED):]))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls([line for line in Path(path).read_text().splitlines() if line])

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()[:16]


@dataclass
class TransformerConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_hidden: int = 128
    max_seq_len: int = 64
    image_size: int = 16
    patch_size: int = 4
    d_vision: int = 32
    moe_layer_indices: list[int] = field(default_factory=list)
    n_experts: int = 4
    top_k: int = 2
    use_meta: bool = True
    router_depth: int = 1
    router_hidden: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if any(not 0 <= i < self.n_layers for i in self.moe_layer_indices):
            raise ValueError("moe_layer_indices out of range")
        if self.image_size % self.patch_size:
            raise ValueError("image size must be divisible by the patch size")
        self.moe_layer_indices = sorted(set(int(i) for i in self.moe_layer_indices))

    @property
    def n_image_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        return cls(**d)


# ----------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------

class Linear(Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        self.weight = parameter((d_in, d_out))
        self.bias = parameter((d_out,)) if bias else None
        self.lora = None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        if self.lora is not None:
            y = y + self.lora(x)
        return y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = parameter((d,))
        self.beta = parameter((d,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class FFN(Module):
    """Two-layer GeLU feed-forward network on (N, d) rows."""

    def __init__(self, d_model: int, hidden: int):
        self.fc1 = Linear(d_model, hidden)
        self.fc2 = Linear(hidden, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Attention(Module):
    """Causal multi-head self-attention.

    The key projection has no bias: a key bias shifts every score of a query
    by the same amount, which the softmax cancels.
    """

    def __init__(self, d_model: int, n_heads: int):
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model)
        self.k = Linear(d_model, d_model, bias=False)
        self.v = Linear(d_model, d_model)
        self.proj = Linear(d_model, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        B, L, D = x.shape
        H = self.n_heads
        dh = D // H

        def heads(t):
            return t.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        scores = scores + Tensor(_causal_mask(L))
        att = T.softmax(scores) @ v
        out = att.transpose(0, 2, 1, 3).reshape(B, L, D)
        return self.proj(out)


_MASKS: dict[int, np.ndarray] = {}


def _causal_mask(L: int) -> np.ndarray:
    m = _MASKS.get(L)
    if m is None:
        m = np.triu(np.full((L, L), -1e30), k=1)
        _MASKS[L] = m
    return m


class Block(Module):
    """Pre-norm block; ``ffn`` is dense until ``moe`` replaces it."""

    def __init__(self, cfg: TransformerConfig):
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.n_heads)
        self.ln2 = LayerNorm(cfg.d_model)
        self.ffn: FFN | None = FFN(cfg.d_model, cfg.ffn_hidden)
        self.moe = None

    def __call__(self, x: Tensor, ctx: "ForwardContext") -> Tensor:
        B, L, D = x.shape
        h = x + self.attn(self.ln1(x))
        h2 = h.reshape(B * L, D)
        n2 = self.ln2(h2)
        if self.moe is not None:
            out = self.moe(h2, n2, ctx)
        else:
            out = h2 + self.ffn(n2)
        return out.reshape(B, L, D)


class VisionEncoder(Module):
    """Linear patch embedding standing in for a pretrained image encoder."""

    def __init__(self, patch_size: int, d_vision: int):
        self.patch_size = patch_size
        self.patch = Linear(patch_size * patch_size, d_vision)

    def patches(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        B, H, W = images.shape
        p = self.patch_size
        if H % p or W % p:
            raise ValueError(f"image {H}x{W} not divisible by patch size {p}")
        x = images.reshape(B, H // p, p, W // p, p).transpose(0, 1, 3, 2, 4)
        return x.reshape(B, (H // p) * (W // p), p * p)

    def __call__(self, images: np.ndarray) -> Tensor:
        return self.patch(Tensor(self.patches(images)))


class Projector(Module):
    def __init__(self, d_vision: int, d_model: int):
        self.fc1 = Linear(d_vision, d_model)
        self.fc2 = Linear(d_model, d_model)

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.shape[-1] != self.fc1.weight.shape[0]:
            raise ValueError(f"projector expects dim {self.fc1.weight.shape[0]}, got {tokens.shape[-1]}")
        return self.fc2(T.gelu(self.fc1(tokens)))


def encode_image(img: np.ndarray, enc: VisionEncoder) -> np.ndarray:
    """Image -> (n_patches, d_v) token matrix, patches in row-major order."""
    with no_grad():
        return enc(img).data[0]


def project(tokens: Tensor, proj: Projector) -> Tensor:
    return proj(tokens)


class LanguageModel(Module):
    def __init__(self, cfg: TransformerConfig):
        self.tok_emb = parameter((cfg.vocab_size, cfg.d_model))
        self.pos_emb = parameter((cfg.max_seq_len, cfg.d_model))
        self.blocks = [Block(cfg) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, cfg.vocab_size)


@dataclass
class SequenceBatch:
    """Right-padded sequences ``[image slots] <bos> prompt response <eos>``.

    ``targets[b, t]`` is the token at ``t + 1``; ``loss_mask[b, t]`` is 1 where
    that next token lies in the response region (index >= ``prefix_len[b]``).
    """

    ids: np.ndarray
    images: np.ndarray | None
    n_image: int
    prefix_len: np.ndarray
    lengths: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    modality: list[str | None] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    def valid(self) -> np.ndarray:
        return np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]


def make_batch(images: np.ndarray | None, prompts: Sequence[Sequence[int]],
               responses: Sequence[Sequence[int]] | None = None, n_image: int = 0,
               add_eos: bool = True, modality: Sequence[str | None] | None = None) -> SequenceBatch:
    """Assemble a batch; ``responses=None`` builds generation prompts."""
    B = len(prompts)
    seqs, prefix = [], []
    for b in range(B):
        s = [IMAGE] * n_image + [BOS] + list(prompts[b])
        prefix.append(len(s))
        if responses is not None:
            s += list(responses[b]) + ([EOS] if add_eos else [])
        seqs.append(s)
    L = max(len(s) for s in seqs)
    ids = np.full((B, L), PAD, dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[b, :len(s)] = s
    lengths = np.array([len(s) for s in seqs])
    prefix_len = np.array(prefix)
    targets = np.full((B, L), PAD, dtype=np.int64)
    targets[:, :-1] = ids[:, 1:]
    pos = np.arange(L)[None, :] + 1
    loss_mask = ((pos >= prefix_len[:, None]) & (pos < lengths[:, None])).astype(np.float64)
    if images is not None:
        images = np.asarray(images, dtype=np.float64)
    return SequenceBatch(ids, images, n_image, prefix_len, lengths, targets, loss_mask,
                         list(modality) if modality is not None else [None] * B)


@dataclass
class ForwardContext:
    """Per-forward state shared by all MoE layers."""

    router_input: Tensor          # T_comb embeddings, (B*L, d)
    valid: np.ndarray             # (B*L,) real (non-pad) positions
    is_image: np.ndarray          # (B*L,) image-token positions
    decision: object = None       # cached gate decision, shared across layers
    aux_losses: list = field(default_factory=list)
    record: list | None = None    # when a list, MoE layers append routing info


class MultimodalLM(Module):
    """Vision stub + projector + causal LM (+ router once attached)."""

    def __init__(self, cfg: TransformerConfig):
        self.cfg = cfg
        self.vision = VisionEncoder(cfg.patch_size, cfg.d_vision)
        self.projector = Projector(cfg.d_vision, cfg.d_model)
        self.llm = LanguageModel(cfg)
        self.router = None
        self.stage = "init"

    def named_parameters(self, prefix: str = ""):
        for key in ("vision", "projector", "llm", "router"):
            value = getattr(self, key)
            if value is not None:
                yield from value.named_parameters(f"{prefix}{key}.")

    @property
    def is_moe(self) -> bool:
        return any(b.moe is not None for b in self.llm.blocks)

    def embed(self, batch: SequenceBatch) -> Tensor:
        """T_comb: projected image tokens followed by word embeddings, (B, L, d)."""
        text = T.take_rows(self.llm.tok_emb, batch.ids[:, batch.n_image:])
        if batch.n_image == 0:
            return text
        img = self.projector(self.vision(batch.images))
        if img.shape[1] != batch.n_image:
            raise ValueError("image token count does not match the batch layout")
        return T.concat([img, text], axis=1)

    def forward(self, batch: SequenceBatch, record: list | None = None,
                ctx_out: list | None = None) -> Tensor:
        B, L = batch.ids.shape
        if L > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {L} exceeds max_seq_len {self.cfg.max_seq_len}")
        comb = self.embed(batch)
        x = comb + self.llm.pos_emb[:L]
        is_image = np.zeros((B, L), dtype=bool)
        is_image[:, :batch.n_image] = True
        ctx = ForwardContext(comb.reshape(B * L, -1), batch.valid().reshape(-1),
                             is_image.reshape(-1), record=record)
        for block in self.llm.blocks:
            x = block(x, ctx)
        if ctx_out is not None:
            ctx_out.append(ctx)
        return self.llm.head(self.llm.ln_f(x))

    __call__ = forward


def lm_forward(batch: SequenceBatch, model: MultimodalLM) -> Tensor:
    return model.forward(batch)


def nll_loss(logits: Tensor, batch: SequenceBatch) -> Tensor:
    """Mean NLL over response positions only."""
    B, L, V = logits.shape
    w = batch.loss_mask.reshape(-1)
    if w.sum() == 0:
        raise ValueError("batch has no response positions")
    return T.cross_entropy(logits.reshape(B * L, V), batch.targets.reshape(-1), w)


def greedy_generate(prompt: SequenceBatch, model: MultimodalLM, max_new: int) -> list[list[int]]:
    """Argmax decoding per sample, stopping at EOS or after ``max_new`` tokens.

    Ties go to the lower token id. Samples are decoded in groups of equal
    prompt length so that no left padding is needed.
    """
    lengths = prompt.lengths
    if int(lengths.max()) + max_new > model.cfg.max_seq_len:
        raise ValueError("prompt plus max_new exceeds the model context")
    out: list[list[int]] = [[] for _ in range(len(lengths))]
    for length in sorted(set(lengths.tolist())):
        rows = np.flatnonzero(lengths == length)
        ids = prompt.ids[rows, :length].copy()
        images = prompt.images[rows] if prompt.images is not None else None
        done = np.zeros(len(rows), dtype=bool)
        for _ in range(max_new):
            L = ids.shape[1]
            batch = SequenceBatch(ids, images, prompt.n_image, np.full(len(rows), L),
                                  np.full(len(rows), L), np.zeros_like(ids), np.zeros(ids.shape))
            with no_grad():
                logits = model.forward(batch).data[:, -1, :]
            nxt = np.argmax(logits, axis=1)
            for j, r in enumerate(rows):
                if done[j]:
                    continue
                if nxt[j] == EOS:
                    done[j] = True
                else:
                    out[r].append(int(nxt[j]))
            if done.all():
                break
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
    return out


# ----------------------------------------------------------------------
# initialisation
# ----------------------------------------------------------------------

def init_value(name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    """Initial value of a parameter, a pure function of (seed, name, shape)."""
    rng = SplitMix(derive_seed(seed, name))
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape)
    if leaf == "B" and ".lora." in name:
        return np.zeros(shape)
    if leaf == "bias":
        if name.startswith("vision."):
            return 0.1 * rng.normal(shape)
        return np.zeros(shape)
    if leaf == "beta":
        return np.zeros(shape)
    if name.endswith("tok_emb"):
        return 0.5 * rng.normal(shape)
    if name.endswith("pos_emb"):
        return 0.1 * rng.normal(shape)
    if leaf == "A":
        return rng.normal(shape) / math.sqrt(shape[1])
    return rng.normal(shape) / math.sqrt(shape[0])


def init_parameters(module: Module, seed: int, prefix: str = "") -> None:
    for name, p in module.named_parameters(prefix):
        p.data = init_value(name, p.shape, seed)


def build_model(cfg: TransformerConfig, seed: int) -> MultimodalLM:
    model = MultimodalLM(cfg)
    init_parameters(model, seed)
    return model
