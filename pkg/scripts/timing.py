"""Re-measure per-sample selection cost on an existing run directory.

    python3 scripts/timing.py runs/synth --repeats 30 --samples 500
"""

import argparse
import json
from pathlib import Path

from dynamite import attacks, defenses, gbt, nn
from dynamite.evaluation import measure_timing


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("run")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--samples", type=int, default=200)
    ap.add_argument("--cell", default=None, help="attack-test cell id, e.g. PGD_eps0.3")
    args = ap.parse_args()
    root = Path(args.run)
    report = json.loads((root / "report.json").read_text())
    grid = attacks.load_grid(root / "attacks")
    by_id = {attacks.cell_id(*k): v for k, v in grid.cells.items()}
    cell = by_id[args.cell or report["cells"][0]["id"]]
    defs = [defenses.load_defense(root / f"defenses/{int(k)}_{k.name}.bin") for k in defenses.DefenseKind]
    t = measure_timing(gbt.load_selector(root / "router/selector.bin"), defs,
                       nn.load_model(root / "models/baseline.bin"), cell, args.repeats,
                       report["best_static_defense"]["id"], args.samples)
    for key in ("dynamite_ms", "oracle_ms", "best_static_ms", "no_defense_ms"):
        print(f"{key:15s} {t[key]:.4f}")
    print(f"dynamite / oracle: {100 * t['dynamite_ms'] / t['oracle_ms']:.1f}%")


if __name__ == "__main__":
    main()
