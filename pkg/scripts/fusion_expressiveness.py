"""Linear heads on concatenated vs bilinear-fused views of the bilinear preset."""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from fsda.experiments import concat_vs_fused_trial


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args()
    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        for s in range(args.seeds):
            r = concat_vs_fused_trial(s, Path(tmp) / f"s{s}")
            rows.append((r["concat"], r["fused"]))
            print(f"seed {s:2d}  concat {r['concat']:.4f}  fused {r['fused']:.4f}")
    a, b = np.mean(rows, axis=0)
    print(f"mean     concat {a:.4f}  fused {b:.4f}")


if __name__ == "__main__":
    main()
