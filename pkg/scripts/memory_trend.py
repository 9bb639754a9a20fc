"""Estimated and measured peak live floats, masked vs full-graph step.

    python scripts/memory_trend.py --sizes 32 64 128 256
"""

import argparse

from gmae import tensor as T
from gmae.memory import attention_ratio, estimate_peak_floats, measure_peak_floats
from gmae.model import GmaeConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[32, 64, 128, 256])
    ap.add_argument("--enc-layers", type=int, default=12)
    ap.add_argument("--dec-layers", type=int, default=2)
    ap.add_argument("--hidden", type=int, default=80)
    ap.add_argument("--heads", type=int, default=8)
    ap.add_argument("--mask-ratio", type=float, default=0.7)
    a = ap.parse_args()
    cfg = GmaeConfig(enc_layers=a.enc_layers, dec_layers=a.dec_layers, hidden=a.hidden, heads=a.heads,
                     mask_ratio=a.mask_ratio)  # fmt: skip
    T.set_memory_tracking(True)
    print(f"{'n':>5} {'masked':>12} {'full':>12} {'ratio':>7} {'est err':>8} {'growth':>7}")
    prev = None
    for n in a.sizes:
        m = measure_peak_floats(n, cfg, "gmae")
        f = measure_peak_floats(n, cfg, "full")
        err = max(abs(estimate_peak_floats(n, cfg, "gmae").total - m) / m,
                  abs(estimate_peak_floats(n, cfg, "full").total - f) / f)  # fmt: skip
        growth = f"{m / prev:.2f}" if prev else "-"
        print(f"{n:>5} {m:>12,} {f:>12,} {m / f:>7.3f} {err:>8.1%} {growth:>7}")
        prev = m
    print(f"attention-logit ratio at n=10000: {attention_ratio(10_000, cfg):.4f}")


if __name__ == "__main__":
    main()
