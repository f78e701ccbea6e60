"""Compare the compiled and pure-numpy convolution backends.

Times the three kernel entry points on shapes the training loop actually
uses, then times whole training batches under each backend. Run with

    python benchmarks/bench_kernels.py [--repeat 5] [--channels 8]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from xcryonet import diffcore as dc
from xcryonet.diffcore import backend
from xcryonet.model import ModelConfig, XCryoNet
from xcryonet.train import Batch, TrainConfig, step1_primary_and_attribute


def _time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_kernels(repeat: int, channels: int) -> None:
    rng = np.random.default_rng(0)
    cases = [
        ("conv 1->C 64px s2", (8, 1, 64, 64), (channels, 1, 3, 3), 2, 1),
        ("conv C->C 32px s2", (8, channels, 32, 32), (channels, channels, 3, 3), 2, 1),
        ("conv C->C 16px s1", (8, channels, 16, 16), (channels, channels, 3, 3), 1, 1),
    ]
    names = backend.available_backends()
    print(f"backends: {', '.join(names)}")
    header = f"{'case':24s}" + "".join(f"{n:>12s}" for n in names)
    print(header)
    print("-" * len(header))
    for label, xshape, wshape, stride, pad in cases:
        x = rng.standard_normal(xshape).astype(np.float32)
        w = rng.standard_normal(wshape).astype(np.float32)
        oh = (xshape[2] + 2 * pad - wshape[2]) // stride + 1
        gy = rng.standard_normal((xshape[0], wshape[0], oh, oh)).astype(np.float32)
        for suffix, call in (
            ("fwd", lambda k: k.conv2d_forward(x, w, stride, pad)),
            ("bwd_x", lambda k: k.conv2d_backward_input(
                gy, w, stride, pad, xshape[2], xshape[3])),
            ("bwd_w", lambda k: k.conv2d_backward_kernel(
                x, gy, stride, pad, wshape[2], wshape[3])),
        ):
            row = f"{label + ' ' + suffix:24s}"
            for name in names:
                kernel = backend.get_backend(name)
                t = _time(lambda: call(kernel), repeat)
                row += f"{t * 1e3:10.3f}ms"
            print(row)


def bench_training(repeat: int, channels: int) -> None:
    rng = np.random.default_rng(1)
    config = ModelConfig(input_size=64, feature_channels=channels,
                         classifier_hidden=16, overall_hidden=8)
    images = rng.random((8, 1, 64, 64), dtype=np.float32)
    scores = rng.integers(0, 5, size=(8, 5)).astype(np.float64)
    batch = Batch(images=images, scores=scores, mask=np.ones((8, 5), dtype=bool))
    print(f"\ntraining step 1, batch 8 @ 64px, C={channels}")
    for name in backend.available_backends():
        previous = backend.use_backend(name)
        try:
            model = XCryoNet.create(config, seed=0)
            optimizer = dc.Adam(lr=1e-3)
            t = _time(lambda: step1_primary_and_attribute(batch, model, optimizer),
                      repeat)
            print(f"  {name:8s} {t * 1e3:10.2f} ms/batch")
        finally:
            backend.use_backend(previous)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--channels", type=int, default=8)
    args = parser.parse_args()
    bench_kernels(args.repeat, args.channels)
    bench_training(args.repeat, args.channels)


if __name__ == "__main__":
    main()
