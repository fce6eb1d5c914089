#!/usr/bin/env python3
"""Regenerate the bundled oracle instance and its golden values.

The golden numbers are computed here with straight nested loops over
hypotheses and samples, independent of the library's vectorized oracles,
so the committed file can serve as a cross-check for both the library and
the CLI.  Run from the repository root:

    python scripts/gen_oracle_golden.py
"""

import json
import os

import numpy as np

N, K, H = 8, 2, 5
RHOS = (0.5, 1.0, 2.0)
OUT = os.path.join(os.path.dirname(__file__), "..", "src", "mdat", "assets")


def ramp(x, rho):
    if x >= rho:
        return 0.0
    if x <= 0.0:
        return 1.0
    return 1.0 - x / rho


def argmax_first(row):
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best


def margin(row, y):
    others = [row[j] for j in range(len(row)) if j != y]
    return 0.5 * (row[y] - max(others))


def disparity(pred_a, pred_b, idx):
    return sum(1.0 for i in idx if pred_a[i] != pred_b[i]) / len(idx)


def margin_disparity(scores_fp, pseudo, idx, rho):
    return sum(ramp(margin(scores_fp[i], pseudo[i]), rho) for i in idx) / len(idx)


def main():
    rng = np.random.default_rng(20240817)
    f = rng.normal(size=(N, K)).round(3)
    labels = rng.integers(0, K, size=N)
    hyps = rng.normal(size=(H, N, K)).round(3)
    s1 = [0, 1, 2, 3]
    s2 = [4, 5, 6, 7]

    preds = [[argmax_first(hyps[h][i]) for i in range(N)] for h in range(H)]
    f_pred = [argmax_first(f[i]) for i in range(N)]

    hdh = 0.0
    dis01 = 0.0
    for a in range(H):
        for b in range(H):
            gap = abs(disparity(preds[b], preds[a], s2)
                      - disparity(preds[b], preds[a], s1))
            hdh = max(hdh, gap)
            dis01 = max(dis01, gap)  # 0-1 loss specialization

    zod = max(disparity(preds[h], f_pred, s2) - disparity(preds[h], f_pred, s1)
              for h in range(H))

    golden = {
        "hdeltah": hdh,
        "discrepancy_divergence_01": dis01,
        "zero_one_discrepancy": zod,
        "margin_discrepancy": {},
    }
    for rho in RHOS:
        gaps = [margin_disparity(hyps[h], f_pred, s2, rho)
                - margin_disparity(hyps[h], f_pred, s1, rho) for h in range(H)]
        best = max(range(H), key=lambda h: gaps[h])
        golden["margin_discrepancy"][repr(float(rho))] = {
            "value": gaps[best], "argmax": best,
        }

    instance = {
        "k": K,
        "f": f.tolist(),
        "labels": labels.tolist(),
        "hypotheses": hyps.tolist(),
        "s1": s1,
        "s2": s2,
    }
    os.makedirs(OUT, exist_ok=True)
    with open(os.path.join(OUT, "oracle_instance.json"), "w", newline="\n") as fh:
        json.dump(instance, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(OUT, "oracle_golden.json"), "w", newline="\n") as fh:
        json.dump(golden, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print("wrote oracle_instance.json and oracle_golden.json")


if __name__ == "__main__":
    main()
