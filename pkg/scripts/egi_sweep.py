"""Sweep the injection end step E_GI over clean swap cases.

    python3 scripts/egi_sweep.py --values 0,10,20,30,40,50

Writes the metric grid to ``results/egi_sweep.csv`` (invalid points to
``results/egi_sweep.skipped.csv``) and a summary JSON beside it.
"""

import argparse
import json
import time
from pathlib import Path

import torch

from mcactrl.benchmark import clean_swaps, egi_comparison
from mcactrl.diffusion import SamplerConfig, make_noise_schedule
from mcactrl.scenes import BenchmarkConfig, make_benchmark
from mcactrl.serialization import load_weights


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--weights", default="artifacts/toy_denoiser.weights")
    p.add_argument("--values", default="0,10,20,30,40,50")
    p.add_argument("--cases", type=int, default=None, help="first N clean swaps (default: all)")
    p.add_argument("--low", type=int, default=0)
    p.add_argument("--high", type=int, default=20)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="results/egi_sweep.csv")
    args = p.parse_args()
    torch.set_num_threads(1)

    t0 = time.time()
    model = load_weights(args.weights)
    cases = clean_swaps(make_benchmark(BenchmarkConfig(subjects=4)))[: args.cases]
    values = [int(v) for v in args.values.split(",")]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows, skipped, rate = egi_comparison(model, make_noise_schedule(), cases, SamplerConfig(guidance_scale=args.guidance),
                                         values, args.low, args.high, out_csv=out, workers=args.workers)
    summary = {"weights": args.weights, "values": values, "cases": len(cases), "rows": len(rows),
               "skipped": [s["note"] for s in skipped], f"fg_win_rate_{args.high}_vs_{args.low}": rate,
               "seconds": round(time.time() - t0, 1)}
    out.with_suffix(".json").write_text(json.dumps(summary, indent=1) + "\n")
    print(json.dumps(summary))


if __name__ == "__main__":
    main()
