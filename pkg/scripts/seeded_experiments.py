"""Run the seeded synthetic-city experiments and write one JSON record per seed.

    python scripts/seeded_experiments.py ssl --seeds 0 1 2 3 4
    python scripts/seeded_experiments.py ablation --epochs 20
    python scripts/seeded_experiments.py horizons --days 60
"""

import argparse
import json
from pathlib import Path

from sst_parking.experiments import ExperimentConfig, ablation_deltas, ssl_vs_scratch, strategy_horizons

RUNNERS = {"ssl": ssl_vs_scratch, "ablation": ablation_deltas, "horizons": strategy_horizons}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("experiment", choices=sorted(RUNNERS))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--days", type=int, default=None, help="synthetic days (default 30, or 60 for horizons)")
    ap.add_argument("--epochs", type=int, default=None, help="epochs for the ablation runs")
    ap.add_argument("--out", default="runs/experiments")
    args = ap.parse_args()

    days = args.days or (60 if args.experiment == "horizons" else 30)
    cfg = ExperimentConfig(days=days)
    kw = {"epochs": args.epochs} if args.experiment == "ablation" and args.epochs else {}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for seed in args.seeds:
        rec = RUNNERS[args.experiment](seed, cfg, **kw)
        records.append(rec)
        print(json.dumps({k: v for k, v in rec.items() if k != "recon_curve"}), flush=True)
    path = out / f"{args.experiment}.json"
    path.write_text(json.dumps({"config": cfg.to_dict(), "runs": records}, indent=2))
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
