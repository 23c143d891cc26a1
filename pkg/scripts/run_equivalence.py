#!/usr/bin/env python3
"""Train/deploy equivalence sweep across variants and seeds.

For every variant and seed, builds the model, fuses it, and reports the
worst absolute embedding deviation and worst train/deploy cosine over a set
of probe inputs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from facelivt import build_model, cosine_similarity, forward, reparameterize_model, variant_config


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--variants", nargs="+", default=["s", "m", "s-li", "m-li"])
    parser.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    parser.add_argument("--probes", type=int, default=5)
    args = parser.parse_args()

    print(f"{'variant':8} {'seed':>4} {'max_abs':>12} {'min_cosine':>12} {'params -> fused':>20}")
    started = time.perf_counter()
    worst_abs, worst_cos = 0.0, 1.0
    for name in args.variants:
        config = variant_config(name)
        for seed in args.seeds:
            model = build_model(config, seed=seed)
            deploy, report = reparameterize_model(model, probes=args.probes, probe_seed=seed)
            rng = np.random.default_rng(seed + 10_000)
            min_cos = 1.0
            for _ in range(args.probes):
                x = rng.uniform(-1, 1, (1, 3, config.input_size, config.input_size))
                x = x.astype(np.float32)
                min_cos = min(min_cos, cosine_similarity(forward(model, x), forward(deploy, x)))
            worst_abs = max(worst_abs, report.max_abs_error)
            worst_cos = min(worst_cos, min_cos)
            print(
                f"{name:8} {seed:>4} {report.max_abs_error:>12.3e} {min_cos:>12.6f} "
                f"{report.params_before:>10} -> {report.params_after}"
            )
    print(
        f"\nworst max_abs={worst_abs:.3e}  worst cosine={worst_cos:.6f}  "
        f"({time.perf_counter() - started:.1f}s)"
    )


if __name__ == "__main__":
    main()
