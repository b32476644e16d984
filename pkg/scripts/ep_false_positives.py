"""False-positive behaviour of exclusive-provider detection.

Generates the five-builder EP scenario, runs the pipeline, then shuffles block
ownership many times and re-runs the decoding. Prints the per-test rate of
significant decodings, the share of runs with at least one false EP, and the
same share under a Bonferroni-corrected alpha for comparison.

    python scripts/ep_false_positives.py --runs 200 --seed 1
"""

import argparse
import csv
import tempfile
from pathlib import Path

import numpy as np

from mevlens import fixtures
from mevlens.pipeline import STAGES, RunConfig, run
from mevlens.stats import DEFAULT_ALPHA, DEFAULT_FOLDS, DEFAULT_SEED, decoding_matrix, exclusive_providers


def block_shares(out: Path, folds: int):
    slots = {}
    with open(out / "block_eof.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            b, vals = slots.setdefault(int(r["slot"]), (r["builder"], {}))
            if r["provider"]:
                vals[r["provider"]] = float(r["share"])
    shares = [slots[s] for s in sorted(slots)]
    seen = {}
    for _, v in shares:
        for p, x in v.items():
            seen[p] = seen.get(p, 0) + (x > 0)
    return shares, sorted(p for p, n in seen.items() if n >= 2 * folds)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", type=int, default=200)
    ap.add_argument("--seed", type=int, default=1, help="fixture seed")
    ap.add_argument("--workers", type=int, default=4)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        fixtures.generate(fixtures.ep_scenario(seed=args.seed), tmp / "fx")
        inputs = {k: str(tmp / "fx" / v) for k, v in (("blocks", "blocks.jsonl"), ("mempool", "mempool.csv"),
                                                      ("registries", "registries"), ("payloads", "payloads.csv"))}
        run(RunConfig(**inputs, out_dir=str(tmp / "out"), workers=args.workers), STAGES[:3] + ("stats",))
        with open(tmp / "out" / "exclusive_providers.csv", newline="") as fh:
            found = sorted((r["provider"], r["builder"]) for r in csv.DictReader(fh))
        print(f"planted data, EPs found: {found}")
        shares, providers = block_shares(tmp / "out", DEFAULT_FOLDS)

    owners = [b for b, _ in shares]
    values = [s for _, s in shares]
    builders = sorted(set(owners))
    n_tests = len(builders) * len(providers)
    tests = sig = 0
    hit = hit_bonf = 0
    for i in range(args.runs):
        rng = np.random.default_rng([DEFAULT_SEED, i])
        perm = [owners[j] for j in rng.permutation(len(owners))]
        res, _ = decoding_matrix(list(zip(perm, values)), builders, providers, DEFAULT_FOLDS, DEFAULT_SEED + i + 1)
        tests += len(res)
        sig += sum(r.significant for r in res)
        hit += bool(exclusive_providers(res))
        res_b, _ = decoding_matrix(list(zip(perm, values)), builders, providers, DEFAULT_FOLDS,
                                   DEFAULT_SEED + i + 1, DEFAULT_ALPHA / n_tests)
        hit_bonf += bool(exclusive_providers(res_b))
    print(f"shuffled runs: {args.runs}, tests per run: {n_tests}")
    print(f"per-test significant rate: {sig / tests:.3%}")
    print(f"runs with >= 1 false EP (alpha {DEFAULT_ALPHA}): {hit / args.runs:.1%}")
    print(f"runs with >= 1 false EP (alpha {DEFAULT_ALPHA}/{n_tests}): {hit_bonf / args.runs:.1%}")


if __name__ == "__main__":
    main()
