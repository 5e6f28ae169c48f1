"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--rows 1856] [--repeat 50]

Shapes default to one toy training batch (16 sequences of ~29 tokens, width
64, hidden 128, vocabulary ~42). Also times one full training step under
each backend.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from modmoe.numkernel import kernels


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def kernel_cases(rows, rng):
    x64 = rng.standard_normal((rows, 64))
    x128 = rng.standard_normal((rows, 128))
    g64 = rng.standard_normal((rows, 64))
    att = rng.standard_normal((rows * 4, 29))
    logits = rng.standard_normal((rows, 42))
    targets = rng.integers(0, 42, rows)
    w = (rng.random(rows) < 0.2).astype(np.float64)
    gamma, beta = np.ones(64), np.zeros(64)

    def cases(k):
        _, xhat, rstd = k.layernorm_fwd(x64, gamma, beta)
        sm = k.softmax_fwd(att)
        _, probs = k.xent_fwd(logits, targets, w)
        return {
            "gelu_fwd": lambda: k.gelu_fwd(x128),
            "gelu_bwd": lambda: k.gelu_bwd(x128, x128),
            "softmax_fwd": lambda: k.softmax_fwd(att),
            "softmax_bwd": lambda: k.softmax_bwd(sm, att),
            "layernorm_fwd": lambda: k.layernorm_fwd(x64, gamma, beta),
            "layernorm_bwd": lambda: k.layernorm_bwd(g64, xhat, rstd, gamma),
            "xent_fwd": lambda: k.xent_fwd(logits, targets, w),
            "xent_bwd": lambda: k.xent_bwd(probs, targets, w, 1.0),
        }
    return cases


def train_step_time(repeat):
    from modmoe import pipeline, synthdata
    from modmoe.backbone import TransformerConfig, Vocabulary, build_model

    splits = synthdata.generate_splits(0, {"instruct": 16})
    vocab = Vocabulary(synthdata.vocabulary_words())
    model = build_model(TransformerConfig(vocab_size=len(vocab)), 0)
    ex = pipeline.encode_examples(splits["instruct"], vocab, "instruct")
    batch = pipeline.collate(ex, model.cfg.n_image_tokens)

    def step():
        for _, p in model.named_parameters():
            p.grad = None
        pipeline._model_loss(model, batch).backward()
    return best_of(step, repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=16 * 29 * 4)
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()

    if not kernels.HAVE_NUMBA:
        print("numba not importable; only the numpy path can run")
        return
    rng = np.random.default_rng(0)
    make = kernel_cases(args.rows, rng)
    results = {}
    for backend in ("numpy", "numba"):
        kernels.use_backend(backend)
        results[backend] = {name: best_of(fn, args.repeat) for name, fn in make(kernels).items()}
        results[backend]["train_step"] = train_step_time(max(3, args.repeat // 10))

    print(f"{'kernel':<16}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name in results["numpy"]:
        a, b = results["numpy"][name] * 1e3, results["numba"][name] * 1e3
        print(f"{name:<16}{a:>10.3f}{b:>10.3f}{a / b:>9.2f}")


if __name__ == "__main__":
    main()
