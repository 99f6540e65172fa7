"""Swap benchmark on the clean synthetic swap cases.

    python3 scripts/run_swap_benchmark.py --weights artifacts/toy_denoiser.weights

Writes per-case metrics and the two win rates to ``results/swap_benchmark.json``.
"""

import argparse
import json
import time
from pathlib import Path

import torch

from mcactrl.benchmark import swap_benchmark
from mcactrl.diffusion import SamplerConfig, make_noise_schedule
from mcactrl.scenes import BenchmarkConfig, make_benchmark
from mcactrl.serialization import load_weights


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--weights", default="artifacts/toy_denoiser.weights")
    p.add_argument("--subjects", type=int, default=4, help="6 clean swaps per subject")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--out", default="results/swap_benchmark.json")
    args = p.parse_args()
    torch.set_num_threads(1)

    t0 = time.time()
    model = load_weights(args.weights)
    cases = make_benchmark(BenchmarkConfig(subjects=args.subjects))
    summary = swap_benchmark(model, make_noise_schedule(), cases,
                             SamplerConfig(steps=args.steps, guidance_scale=args.guidance))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result = {"weights": args.weights, "guidance": args.guidance, "steps": args.steps,
              "seconds": round(time.time() - t0, 1), **summary.as_dict()}
    out.write_text(json.dumps(result, indent=1) + "\n")
    print(json.dumps({k: v for k, v in result.items() if k != "rows"}))


if __name__ == "__main__":
    main()
