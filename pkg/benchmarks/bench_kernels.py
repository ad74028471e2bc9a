"""Time the compiled kernels against the numpy fallback on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--dtype float32] [--json out.json]

Shapes follow one default training step (batch 6, about 70 positions, D=128,
four heads, K=4 codebooks over 2051 ids). Add ``--step`` to also time a full
optimizer step with each backend, run in a subprocess so the import-time
selection is exercised for real.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from codecweave import _kernels_py as numpy_impl

try:
    from codecweave import _kernels as compiled_impl
except ImportError:
    compiled_impl = None


def cases(dtype, rng):
    B, N, D, H, F = 6, 70, 128, 4, 512
    M, V = 100 * 4, 2051  # scored rows x codebooks, ids per codebook
    x = rng.normal(size=(B, N, D)).astype(dtype)
    g, b = np.ones(D, dtype), np.zeros(D, dtype)
    ln = numpy_impl.layernorm_fwd(x, g, b, 1e-5)
    a = rng.normal(size=(B, N, F)).astype(dtype)
    _, th = numpy_impl.gelu_fwd(a)
    s = rng.normal(size=(B * H, N, N)).astype(dtype)
    att = numpy_impl.causal_softmax(s.copy())
    logits = rng.normal(size=(M, V)).astype(dtype)
    tgt = rng.integers(0, V, M)
    w = np.ones(M, dtype)
    emb = np.zeros((V, D), dtype)
    ids = rng.integers(0, V, B * N)
    rows = rng.normal(size=(B * N, D)).astype(dtype)
    P = 1_050_000  # one embedding table or output head
    p, gr = rng.normal(size=P).astype(dtype), rng.normal(size=P).astype(dtype)
    m, v = np.zeros(P, dtype), np.zeros(P, dtype)
    return {
        "softmax_xent": lambda k: k.softmax_xent(logits.copy(), tgt, w),
        "layernorm_fwd": lambda k: k.layernorm_fwd(x, g, b, 1e-5),
        "layernorm_bwd": lambda k: k.layernorm_bwd(x, ln[1], ln[2], g),
        "gelu_fwd": lambda k: k.gelu_fwd(a),
        "gelu_bwd": lambda k: k.gelu_bwd(a, a, th),
        "causal_softmax": lambda k: k.causal_softmax(s.copy()),
        "softmax_bwd": lambda k: k.softmax_bwd(att, s),
        "scatter_add_rows": lambda k: k.scatter_add_rows(emb, ids, rows),
        "adamw_update": lambda k: k.adamw_update(p, gr, m, v, 1e-3, 0.9, 0.999, 0.1, 0.001, 1e-6, 0.9999),
    }


def best_ms(fn, repeat):
    t = timeit.Timer(fn)
    number = max(1, int(0.05 / max(t.timeit(1), 1e-6)))
    return min(t.repeat(repeat, number)) / number * 1e3


STEP_SNIPPET = """
import time, numpy as np
from codecweave import kernels
from codecweave.model import ModelConfig
from codecweave.toy_codec import ToyLanguageSpec, gen_utterances
from codecweave.trainer import TrainConfig, Trainer
corpus = gen_utterances(ToyLanguageSpec(), np.random.default_rng(0), 500)
tr = Trainer(corpus, ModelConfig(), TrainConfig(batch_size=6))
tr.train_step()
t = time.perf_counter()
for _ in range({n}):
    tr.train_step()
print(kernels.BACKEND, (time.perf_counter() - t) / {n} * 1e3)
"""


def step_ms(pure: bool, n: int):
    env = {**os.environ, "CODECWEAVE_PURE": "1" if pure else "0"}
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=n)], env=env,
                         capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    ap.add_argument("--step", action="store_true", help="also time whole training steps")
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    results = {"dtype": args.dtype, "kernels": {}}
    print(f"{'kernel':18s} {'numpy ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, run in cases(np.dtype(args.dtype), rng).items():
        ref = best_ms(lambda: run(numpy_impl), args.repeat)
        comp = best_ms(lambda: run(compiled_impl), args.repeat) if compiled_impl else float("nan")
        results["kernels"][name] = {"numpy_ms": ref, "compiled_ms": comp}
        print(f"{name:18s} {ref:10.3f} {comp:12.3f} {ref / comp:7.2f}x")
    if args.step:
        for pure in (True, False):
            backend, ms = step_ms(pure, 20)
            results[f"train_step_{backend}_ms"] = ms
            print(f"train step ({backend}): {ms:.1f} ms")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
