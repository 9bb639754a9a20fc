"""Mask-ratio and decoder-depth sweeps on MUTAG at desk scale, through the CLI.

    python scripts/run_sweeps.py --out sweeps --jobs 2
"""

import argparse
import sys
from pathlib import Path

from gmae.cli import main as gmae

DATA = Path(__file__).resolve().parents[1] / "data" / "MUTAG"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="sweeps")
    ap.add_argument("--jobs", default="1")
    ap.add_argument("--epochs", default="100")
    ap.add_argument("--repeats", default="5")
    a = ap.parse_args()
    common = [
        "--format", "tu", "--data", str(DATA), "--name", "MUTAG",
        "--enc-layers", "4", "--hidden", "80", "--heads", "8",
        "--epochs", a.epochs, "--batch-size", "16", "--warmup", "120",
        "--repeats", a.repeats, "--jobs", a.jobs,
    ]  # fmt: skip
    code = gmae(["sweep-mask", *common, "--dec-layers", "2", "--out", f"{a.out}/mask"])
    code = code or gmae(["sweep-decoder", *common, "--mask-ratio", "0.5", "--out", f"{a.out}/decoder"])
    sys.exit(code)


if __name__ == "__main__":
    main()
