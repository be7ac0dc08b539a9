"""
检查盲化值的均匀性
Blinded-value hiding check: chi-square uniformity of y = x + p over many seeds.
"""

import argparse
import sys
from pathlib import Path

import numpy as np
from scipy.stats import chisquare
from tqdm import tqdm

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from crypto_suite import SCALE, ModelVector, blind, gen_pads, seed_bytes  # noqa: E402


def blinded_bucket_counts(x_entries, n_seeds: int = 10_000, n_parties: int = 3,
                          buckets: int = 16, progress: bool = False) -> np.ndarray:
    """
    Blind the same contribution under n_seeds pad seeds and histogram each entry.

    Args:
        x_entries: Plaintext entries of the observed client (party 0)
        n_seeds: Number of independent pad seeds
        n_parties: Parties per round
        buckets: Equal-width buckets over [0, 2^64); must be a power of two

    Returns:
        (len(x_entries), buckets) count matrix
    """
    if buckets < 2 or buckets & (buckets - 1):
        raise ValueError("buckets must be a power of two")
    shift = np.uint64(64 - int(buckets).bit_length() + 1)
    x = ModelVector(0, x_entries)
    counts = np.zeros((len(x), buckets), dtype=np.int64)
    rows = np.arange(len(x))
    for s in tqdm(range(n_seeds), desc="Blinding", disable=not progress):
        pad = gen_pads(n_parties, len(x), seed_bytes(s, "hiding"))[0]
        y = blind(x, pad).entries
        np.add.at(counts, (rows, (y >> shift).astype(np.int64)), 1)
    return counts


def chi_square_per_entry(counts: np.ndarray):
    """(statistic, p-value) per entry against the uniform distribution."""
    return [chisquare(row) for row in counts]


def main():
    parser = argparse.ArgumentParser(description="Chi-square uniformity of blinded contributions")
    parser.add_argument("--seeds", type=int, default=10_000, help="Number of pad seeds (default: 10000)")
    parser.add_argument("--parties", type=int, default=3, help="Parties per round (default: 3)")
    parser.add_argument("--buckets", type=int, default=16, help="Histogram buckets (default: 16)")
    parser.add_argument("--alpha", type=float, default=0.001, help="Significance level (default: 0.001)")
    args = parser.parse_args()

    # Extremes and a typical weight
    x_entries = [0, SCALE // 2, SCALE, 538 * SCALE]
    counts = blinded_bucket_counts(x_entries, args.seeds, args.parties, args.buckets, progress=True)
    results = chi_square_per_entry(counts)

    print(f"\n{'='*60}")
    print("盲化值均匀性检验 / Blinded value uniformity")
    print(f"{'='*60}\n")
    print(f"Seeds: {args.seeds}, parties: {args.parties}, buckets: {args.buckets}, alpha: {args.alpha}")

    failures = 0
    for x_raw, row, result in zip(x_entries, counts, results):
        verdict = "uniform" if result.pvalue >= args.alpha else "NOT UNIFORM"
        failures += result.pvalue < args.alpha
        print(f"\nx = {x_raw / SCALE:g}  chi2 = {result.statistic:.2f}  p = {result.pvalue:.4f}  [{verdict}]")
        print(f"  bucket counts: min {row.min()}, max {row.max()}, expected {args.seeds / args.buckets:.0f}")

    print(f"\n{'='*60}")
    print("所有条目均匀" if failures == 0 else f"{failures} 个条目不均匀")
    print(f"{'='*60}")
    sys.exit(1 if failures else 0)


if __name__ == "__main__":
    main()
