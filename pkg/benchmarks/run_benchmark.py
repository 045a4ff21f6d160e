#!/usr/bin/env python3
"""
Time one training step per adversarial mode.

This script is NOT part of CI gating.
Results are for development reference only.

Usage:
    python benchmarks/run_benchmark.py
    python benchmarks/run_benchmark.py --iterations 50 --batch-size 64
"""

import argparse
import json
import sys
import tempfile
import time
from pathlib import Path
from typing import Callable, List, Tuple

# Add project to path
PROJECT_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_ROOT / "python"))

from advforensics import (
    AdversarialConfig,
    FactorDatasetSpec,
    ForgeryMode,
    IdentityMode,
    Trainer,
    generate_factor_dataset,
    load_manifest,
    sample_balanced_batch,
)
from advforensics.identity import SyntheticFactorOracle

MODES = [
    ("baseline", ForgeryMode.OFF, IdentityMode.OFF),
    ("adv-forgery", ForgeryMode.ON, IdentityMode.OFF),
    ("adv-id-hard", ForgeryMode.OFF, IdentityMode.HARD_LABEL),
    ("adv-id-sim", ForgeryMode.OFF, IdentityMode.SIMILARITY),
    ("adv-both", ForgeryMode.ON, IdentityMode.SIMILARITY),
]


def benchmark(func: Callable, iterations: int = 10) -> Tuple[float, float, float]:
    """Run benchmark and return (min, avg, max) times in ms."""
    times = []
    for _ in range(iterations):
        start = time.perf_counter()
        func()
        end = time.perf_counter()
        times.append((end - start) * 1000)  # Convert to ms

    return min(times), sum(times) / len(times), max(times)


def run_benchmarks(iterations: int, batch_size: int, image_size: int, device: str) -> List[dict]:
    """Render a small factor dataset, then time train_step for every mode."""
    spec = FactorDatasetSpec(image_size=image_size, seed=0)
    results = []
    with tempfile.TemporaryDirectory() as tmp:
        manifest = load_manifest(generate_factor_dataset(spec, Path(tmp)))
        oracle = SyntheticFactorOracle(spec.seed, spec.embedding_noise)

        print(f"Running benchmarks with {iterations} iterations each")
        print(f"Dataset: {len(manifest)} records, image size {image_size}, batch {batch_size}, device {device}")
        print("=" * 70)
        print()

        for name, forgery, identity in MODES:
            cfg = AdversarialConfig(
                forgery_mode=forgery,
                identity_mode=identity,
                n_methods=spec.n_methods,
                n_identities=spec.n_identities,
                image_size=image_size,
                batch_size=batch_size,
                device=device,
            )
            trainer = Trainer(cfg, manifest, oracle=oracle, quiet=True)

            def step():
                trainer.train_step(sample_balanced_batch(trainer.train_records, batch_size, trainer.sampler_rng))

            step()  # warm-up: embedding lookups and allocator
            min_t, avg_t, max_t = benchmark(step, iterations)
            print(f"{name:40} min={min_t:7.2f}ms  avg={avg_t:7.2f}ms  max={max_t:7.2f}ms")
            results.append({"name": name, "min": min_t, "avg": avg_t, "max": max_t})

    print()
    print("=" * 70)
    print("Benchmark complete. Results are for reference only.")
    return results


def main():
    parser = argparse.ArgumentParser(description="Time advforensics training steps")
    parser.add_argument("--iterations", "-n", type=int, default=10,
                        help="Number of iterations per benchmark")
    parser.add_argument("--batch-size", type=int, default=32, help="Training batch size")
    parser.add_argument("--image-size", type=int, default=32, help="Input resolution")
    parser.add_argument("--device", default="cpu", help="Torch device")
    parser.add_argument("--output", "-o", type=str, default=None,
                        help="Output JSON file for results")
    args = parser.parse_args()

    results = run_benchmarks(args.iterations, args.batch_size, args.image_size, args.device)

    if args.output:
        with open(args.output, "w") as f:
            json.dump(results, f, indent=2)
        print(f"Results saved to {args.output}")


if __name__ == "__main__":
    main()
