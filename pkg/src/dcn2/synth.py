"""Synthetic CTR stream with planted structure.

Labels are Bernoulli draws from a logit that mixes per-value effects,
three planted pairwise interactions between categorical fields (latent
dot products -- the part only interaction-aware models can recover),
two continuous effects linear in the log-transformed value, and a
summed tag effect for the multivalue field. Value frequencies follow a
Zipf-like law, so small hash spaces see heavy collisions on the long
tail while the head stays learnable within a single pass.

The stream is deliberately non-stationary: every EPOCH_ROWS rows, the
mid-frequency values get fresh identifiers (same behavior, new token),
the way publishers and creatives churn in a live system. New tokens
land on already-trained rows when the hash space is small, which is
exactly the collision regime the weighted lookups are meant to absorb.

The file format matches the 'generic' dataset profile: tab-separated,
label first, multivalue tags joined by '|'. Occasional empty cells
exercise the missing-value paths.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

SCHEMA = ",".join(
    [f"c{i}:cat" for i in range(8)] + ["n0:cont", "n1:cont", "m0:multi"]
)

CARDINALITIES = (8000, 8000, 16000, 16000, 32000, 32000, 2000, 2000)
N_TAGS = 8000
PAIRS = ((0, 1), (2, 3), (4, 5))
LATENT_DIM = 4
INTERCEPT = -0.35

UNIVARIATE_STD = 0.55
PAIR_LATENT_STD = 0.85
PAIR_ACTIVE_RANKS = 400    # pairwise structure lives on frequent values only
CONT_COEF = 0.6
TAG_STD = 0.3
MISSING_CAT = 0.02
MISSING_CONT = 0.01
EMPTY_TAGS = 0.03
MAX_TAGS = 8

# identifier churn: values in the rank band get epoch-suffixed tokens
EPOCH_ROWS = 100_000
CHURN_BAND = (50, 5000)
TAG_CHURN_BAND = (30, 3000)


def _zipf_probs(card: int, exponent: float = 1.1, shift: float = 2.0) -> np.ndarray:
    ranks = np.arange(card, dtype=np.float64) + shift
    p = ranks ** -exponent
    return p / p.sum()


def generate(path: str | Path, n_rows: int, seed: int = 7, chunk: int = 100_000,
             logit_path: str | Path | None = None) -> Path:
    """Write n_rows synthetic instances to path; deterministic given seed.

    ``logit_path`` optionally dumps the true per-row logits (npy), which
    bounds what any model can recover from the stream.
    """
    path = Path(path)
    rng = np.random.default_rng(seed)
    logit_chunks: list[np.ndarray] = []

    uni = [rng.normal(0.0, UNIVARIATE_STD, card) for card in CARDINALITIES]
    latent = {}
    for a, b in PAIRS:
        latent[a] = rng.normal(0.0, PAIR_LATENT_STD, (CARDINALITIES[a], LATENT_DIM))
        latent[b] = rng.normal(0.0, PAIR_LATENT_STD, (CARDINALITIES[b], LATENT_DIM))
        latent[a][PAIR_ACTIVE_RANKS:] = 0.0
        latent[b][PAIR_ACTIVE_RANKS:] = 0.0
    tag_eff = rng.normal(0.0, TAG_STD, N_TAGS)
    cat_probs = [_zipf_probs(card) for card in CARDINALITIES]
    tag_probs = _zipf_probs(N_TAGS)

    with open(path, "w", encoding="utf-8") as fh:
        remaining = n_rows
        while remaining > 0:
            n = min(chunk, remaining)
            remaining -= n
            logit = np.full(n, INTERCEPT)

            cat_vals = []
            cat_missing = []
            for f, card in enumerate(CARDINALITIES):
                v = rng.choice(card, size=n, p=cat_probs[f])
                miss = rng.random(n) < MISSING_CAT
                cat_vals.append(v)
                cat_missing.append(miss)
                logit += np.where(miss, 0.0, uni[f][v])
            for a, b in PAIRS:
                dots = np.einsum("nk,nk->n", latent[a][cat_vals[a]], latent[b][cat_vals[b]])
                both = ~(cat_missing[a] | cat_missing[b])
                logit += np.where(both, dots, 0.0)

            cont_raw = []
            for _ in range(2):
                raw = np.exp(rng.normal(0.0, 1.0, n))
                miss = rng.random(n) < MISSING_CONT
                t = np.log1p(raw)
                logit += np.where(miss, 0.0, CONT_COEF * (t - 1.0))
                raw = np.where(miss, np.nan, raw)
                cont_raw.append(raw)

            n_tags = 1 + rng.poisson(2.0, n)
            n_tags = np.minimum(n_tags, MAX_TAGS)
            n_tags[rng.random(n) < EMPTY_TAGS] = 0
            total = int(n_tags.sum())
            flat_tags = rng.choice(N_TAGS, size=total, p=tag_probs)
            offsets = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(n_tags, out=offsets[1:])
            tag_sums = np.zeros(n)
            np.add.at(tag_sums, np.repeat(np.arange(n), n_tags), tag_eff[flat_tags])
            logit += tag_sums

            prob = 1.0 / (1.0 + np.exp(-logit))
            y = (rng.random(n) < prob).astype(np.int8)
            if logit_path is not None:
                logit_chunks.append(logit.copy())

            row_base = n_rows - remaining - n
            lines = []
            for i in range(n):
                epoch = (row_base + i) // EPOCH_ROWS
                cells = [str(y[i])]
                for f in range(len(CARDINALITIES)):
                    if cat_missing[f][i]:
                        cells.append("")
                        continue
                    v = cat_vals[f][i]
                    if CHURN_BAND[0] <= v < CHURN_BAND[1]:
                        cells.append(f"v{v}e{epoch}")
                    else:
                        cells.append(f"v{v}")
                for raw in cont_raw:
                    cells.append("" if np.isnan(raw[i]) else f"{raw[i]:.6g}")
                lo, hi = offsets[i], offsets[i + 1]
                cells.append("|".join(
                    f"t{t}e{epoch}" if TAG_CHURN_BAND[0] <= t < TAG_CHURN_BAND[1] else f"t{t}"
                    for t in flat_tags[lo:hi]))
                lines.append("\t".join(cells))
            fh.write("\n".join(lines) + "\n")
    if logit_path is not None:
        np.save(logit_path, np.concatenate(logit_chunks))
    return path


def main() -> None:
    import argparse

    ap = argparse.ArgumentParser(description="generate the synthetic CTR stream")
    ap.add_argument("--out", required=True)
    ap.add_argument("--rows", type=int, default=500_000)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    generate(args.out, args.rows, seed=args.seed)
    print(f"wrote {args.rows} rows to {args.out}")
    print(f"schema: {SCHEMA}")


if __name__ == "__main__":
    main()
