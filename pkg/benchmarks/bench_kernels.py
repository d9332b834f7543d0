"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5]

Times conv2d forward, conv2d forward+backward, 5x5 max pooling and one full
training step (n=4, 64x64, batch 8) under every available backend.
"""
import argparse
import timeit

import numpy as np

from qtseg import functional as F
from qtseg import kernels
from qtseg.config import ModelConfig
from qtseg.data import stack, synth_dataset
from qtseg.model import QTSeg
from qtseg.optim import AdamW
from qtseg.tensor import GradTape, Tensor
from qtseg.train import train_step


def cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 32, 64, 64)).astype(np.float32)
    w = rng.normal(size=(32, 32, 3, 3)).astype(np.float32)
    p = rng.normal(size=(8, 64, 32, 32)).astype(np.float32)

    def conv_fwd():
        F.conv2d(Tensor(x), Tensor(w), None, 1)

    def conv_bwd():
        xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
        with GradTape() as tape:
            loss = F.conv2d(xt, wt, None, 1).sum()
        tape.backward(loss)

    def pool():
        xt = Tensor(p, requires_grad=True)
        with GradTape() as tape:
            loss = F.maxpool2d(xt, 5, 1).sum()
        tape.backward(loss)

    model = QTSeg(ModelConfig(n=4, input_size=64))
    opt = AdamW(model.parameters())
    images, masks = stack(synth_dataset(8, 64, 1, seed=0))

    def step():
        train_step(model, opt, images, masks, 1e-3)

    return {"conv2d fwd 8x32x64x64": conv_fwd, "conv2d fwd+bwd": conv_bwd,
            "maxpool k5 fwd+bwd 8x64x32x32": pool, "train step n=4 64x64 b8": step}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    results = {}
    for name in backends:
        kernels.use_backend(name)
        for label, fn in cases().items():
            fn()  # warm up
            results[label, name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    print(f"{'case':<32}" + "".join(f"{b + ' ms':>14}" for b in backends)
          + ("   speedup" if len(backends) > 1 else ""))
    for label in cases():
        row = [results[label, b] * 1e3 for b in backends]
        line = f"{label:<32}" + "".join(f"{t:14.1f}" for t in row)
        if "cython" in backends:
            line += f"{results[label, 'python'] / results[label, 'cython']:9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
