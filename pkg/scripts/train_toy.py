"""Train the toy denoiser on synthetic scenes and save its weights and loss curve.

    python scripts/train_toy.py --steps 2000 --out artifacts/toy_denoiser.weights
"""

import argparse
import json
import logging
import time
from pathlib import Path

from mcactrl.diffusion import make_noise_schedule
from mcactrl.scenes import make_training_dataset
from mcactrl.serialization import save_weights
from mcactrl.train import TrainConfig, smoothed, train_toy_denoiser


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--scenes", type=int, default=512)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="artifacts/toy_denoiser.weights")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    t0 = time.time()
    data = make_training_dataset(args.scenes, seed=args.seed)
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, seed=args.seed)
    model, losses = train_toy_denoiser(data, cfg, make_noise_schedule())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(model, out)
    first, last = smoothed(losses)
    summary = {"steps": args.steps, "initial_smoothed": first, "final_smoothed": last,
               "seconds": round(time.time() - t0, 1)}
    out.with_suffix(".json").write_text(json.dumps({**summary, "losses": losses}) + "\n")
    print(json.dumps(summary))


if __name__ == "__main__":
    main()
