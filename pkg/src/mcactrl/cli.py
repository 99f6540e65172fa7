"""Command-line entry point: ``mcactrl <command> ...``.

Exit codes: 0 ok, 2 configuration error, 3 localization failure, 4 runtime failure.
Failures print one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, FormatError, InvalidArgument

EXIT_OK, EXIT_CONFIG, EXIT_LOCALIZATION, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("mcactrl")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_sampler_flags(p: argparse.ArgumentParser):
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights", default="artifacts/toy_denoiser.weights")


def _add_schedule_flags(p: argparse.ArgumentParser):
    p.add_argument("--schedule-preset", default=None, help="swap-uniform | gen-uniform")
    for flag in ("s-gi", "e-gi", "e-lq", "layer-gi", "layer-lq"):
        p.add_argument(f"--{flag}", type=int, default=None)
    p.add_argument("--printed-order", action="store_true",
                   help="put the condition term inside the editable region when fusing")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mcactrl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a training set or a benchmark to disk")
    p.add_argument("what", choices=["dataset", "benchmark"])
    p.add_argument("--n", type=int, default=512, help="dataset size")
    p.add_argument("--subjects", type=int, default=2)
    p.add_argument("--conditions", type=int, default=10)
    p.add_argument("--prompts", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the toy denoiser")
    p.add_argument("--scenes", type=int, default=512)
    p.add_argument("--train-steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="artifacts/toy_denoiser.weights")

    p = sub.add_parser("invert", help="DDIM-invert an image; writes the trajectory as MCT1 tensors")
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", required=True)
    _add_sampler_flags(p)

    for name, task in (("generate", "generation"), ("swap", "swapping"), ("add", "addition")):
        p = sub.add_parser(name, help=f"subject {task}")
        p.set_defaults(task=task)
        p.add_argument("--config", help="key=value request file; flags below are ignored when given")
        p.add_argument("--subject")
        p.add_argument("--subject-query", help="'<color> <shape>'")
        p.add_argument("--subject-prompt")
        if task == "generation":
            p.add_argument("--prompt")
        else:
            p.add_argument("--condition")
            p.add_argument("--condition-prompt")
        if task == "swapping":
            p.add_argument("--condition-query")
        if task == "addition":
            p.add_argument("--region", help="file with 'x0 y0 x1 y1'")
        p.add_argument("--out", default="out")
        _add_sampler_flags(p)
        _add_schedule_flags(p)

    p = sub.add_parser("eval", help="score a results directory against a benchmark manifest")
    p.add_argument("--results", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="CSV path")

    p = sub.add_parser("sweep", help="grid over schedule parameters on benchmark cases")
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", default="swapping", choices=["swapping", "addition", "generation"])
    p.add_argument("--variant", default="clean")
    p.add_argument("--max-cases", type=int, default=None)
    p.add_argument("--grid-s-gi", type=_int_list, default=None)
    p.add_argument("--grid-e-gi", type=_int_list, default=None)
    p.add_argument("--grid-layer-lq", type=_int_list, default=None)
    p.add_argument("--grid-e-lq", type=_int_list, default=None)
    p.add_argument("--allow-reverse", action="store_true",
                   help="validate grid points against the query-first ablation order")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="CSV path")
    _add_sampler_flags(p)
    _add_schedule_flags(p)
    return ap


def _schedule_from_args(args) -> dict:
    return {k: getattr(args, k) for k in ("s_gi", "e_gi", "e_lq", "layer_gi", "layer_lq")
            if getattr(args, k) is not None}


def _request_from_args(args):
    from .tasks import TaskRequest, load_request

    if args.config:
        return load_request(args.config)
    missing = [f for f in ("subject", "subject_query") if not getattr(args, f)]
    if missing:
        raise ConfigError(f"missing --{missing[0].replace('_', '-')}")
    return TaskRequest(
        task=args.task,
        subject_image=args.subject,
        subject_query=args.subject_query,
        subject_prompt=args.subject_prompt,
        condition_image=getattr(args, "condition", None),
        condition_query=getattr(args, "condition_query", None),
        condition_prompt=getattr(args, "condition_prompt", None),
        region=getattr(args, "region", None),
        prompt=getattr(args, "prompt", None),
        schedule_preset=args.schedule_preset,
        schedule=_schedule_from_args(args),
        steps=args.steps,
        guidance=args.guidance,
        seed=args.seed,
        out=args.out,
        printed_order=args.printed_order,
    )


def _load_model(path: str):
    from .serialization import load_weights

    if not Path(path).exists():
        raise ConfigError(f"weights file {path} not found (run `mcactrl train` first)")
    return load_weights(path)


def _cmd_synth(args) -> int:
    from .masks import save_image
    from .scenes import BenchmarkConfig, make_benchmark, make_training_dataset, write_benchmark

    out = Path(args.out)
    if args.what == "dataset":
        out.mkdir(parents=True, exist_ok=True)
        data = make_training_dataset(args.n, seed=args.seed)
        lines = []
        for i, (img, cap) in enumerate(data):
            save_image(img, out / f"scene_{i:05d}.png")
            lines.append(f"scene_{i:05d}.png\t{cap}\n")
        (out / "captions.tsv").write_text("".join(lines), encoding="utf-8")
        print(json.dumps({"scenes": len(data), "out": str(out)}))
    else:
        cfg = BenchmarkConfig(subjects=args.subjects, conditions_per_subject=args.conditions,
                              prompts_per_subject=args.prompts, seed=args.seed)
        path = write_benchmark(make_benchmark(cfg), out)
        print(json.dumps({"manifest": str(path)}))
    return EXIT_OK


def _cmd_train(args) -> int:
    import json as _json

    from .diffusion import make_noise_schedule
    from .scenes import make_training_dataset
    from .serialization import save_weights
    from .train import TrainConfig, smoothed, train_toy_denoiser

    data = make_training_dataset(args.scenes, seed=args.seed)
    cfg = TrainConfig(steps=args.train_steps, batch_size=args.batch_size, seed=args.seed)
    model, losses = train_toy_denoiser(data, cfg, make_noise_schedule())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(model, out)
    summary = {"weights": str(out), "steps": len(losses)}
    if losses:
        summary["initial_smoothed"], summary["final_smoothed"] = smoothed(losses)
    out.with_suffix(".losses.json").write_text(_json.dumps(losses) + "\n")
    print(_json.dumps(summary))
    return EXIT_OK


def _cmd_invert(args) -> int:
    from .diffusion import SamplerConfig, ddim_invert, make_noise_schedule
    from .masks import load_image
    from .serialization import save_tensor
    from .train import images_to_tensor

    model = _load_model(args.weights)
    cfg = SamplerConfig(steps=args.steps, guidance_scale=args.guidance, seed=args.seed)
    traj = ddim_invert(model, images_to_tensor(load_image(args.image)), args.prompt, cfg, make_noise_schedule())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, z in enumerate(traj):
        save_tensor(z, out / f"z_{i:03d}.mct")
    print(json.dumps({"states": len(traj), "out": str(out)}))
    return EXIT_OK


def _cmd_task(args) -> int:
    from .diffusion import make_noise_schedule
    from .schedule import validate_schedule
    from .tasks import run_task

    req = _request_from_args(args)
    problems = validate_schedule(req.control_schedule())
    if problems:
        for v in problems:
            print(f"schedule violation: {v}", file=sys.stderr)
        raise ConfigError("invalid control schedule: " + "; ".join(problems))
    model = _load_model(args.weights)
    res = run_task(req, model, make_noise_schedule())
    print(json.dumps({"out": req.out, **{k: round(v, 6) for k, v in res.row.items()}}))
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .scenes import read_benchmark
    from .tasks import AGGREGATE_ID, eval_benchmark

    rows = eval_benchmark(args.results, read_benchmark(args.manifest), args.out)
    agg = next(r for r in rows if r["case_id"] == AGGREGATE_ID)
    print(json.dumps({"csv": args.out, "cases": len(rows) - 1, "status": agg["status"]}))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    from dataclasses import replace

    from .diffusion import SamplerConfig, make_noise_schedule
    from .scenes import read_benchmark
    from .schedule import preset
    from .tasks import TASK_PRESETS, sweep

    cases = [c for c in read_benchmark(args.manifest) if c.task == args.task and c.variant == args.variant]
    if args.max_cases is not None:
        cases = cases[: args.max_cases]
    if not cases:
        raise ConfigError("no benchmark cases match the task/variant filter")
    if args.schedule_preset and _schedule_from_args(args):
        raise ConfigError("preset and explicit schedule both given")
    base = preset(args.schedule_preset or TASK_PRESETS[args.task])
    base = replace(base, **_schedule_from_args(args))
    grid = {k: v for k, v in (("s_gi", args.grid_s_gi), ("e_gi", args.grid_e_gi),
                              ("layer_lq", args.grid_layer_lq), ("e_lq", args.grid_e_lq)) if v}
    if not grid:
        grid = {"e_gi": list(range(0, 40, 5))}
    model = _load_model(args.weights)
    sampler = SamplerConfig(steps=args.steps, guidance_scale=args.guidance, seed=args.seed)
    rows, skipped = sweep(model, make_noise_schedule(), cases, grid, base, sampler,
                          allow_reverse=args.allow_reverse, workers=args.workers, out_csv=args.out)
    print(json.dumps({"csv": args.out, "rows": len(rows), "failed": sum(r["status"] != "ok" for r in rows),
                      "skipped_points": [s["note"] for s in skipped]}))
    return EXIT_OK


COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "invert": _cmd_invert,
    "generate": _cmd_task,
    "swap": _cmd_task,
    "add": _cmd_task,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
}


def _fail(code: int, kind: str, err: BaseException) -> int:
    print(json.dumps({"error": kind, "code": code, "message": str(err)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    from .tasks import LocalizationFailed

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except LocalizationFailed as e:
        return _fail(EXIT_LOCALIZATION, "localization", e)
    except (ConfigError, FormatError, InvalidArgument, FileNotFoundError) as e:
        return _fail(EXIT_CONFIG, "config", e)
    except Exception as e:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        return _fail(EXIT_RUNTIME, "runtime", e)


if __name__ == "__main__":
    sys.exit(main())
