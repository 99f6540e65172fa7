"""Customization tasks (generation, swapping, addition), toy metrics, benchmark evaluation and sweeps."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from . import vocab
from .diffusion import NoiseSchedule, SamplerConfig, ddim_invert, to_pixels
from .errors import ConfigError, NotFound
from .masks import (
    MaskPyramid,
    build_pyramid,
    dilate,
    load_image,
    load_region,
    region_mask,
    save_image,
    save_mask,
    segment_synthetic,
)
from .pipeline import BranchBundle, BranchMasks, PipelineResult, run_pipeline
from .scenes import BenchmarkCase
from .schedule import ControlSchedule, preset, validate_schedule
from .train import images_to_tensor

log = logging.getLogger(__name__)

TASK_PRESETS = {"generation": "gen-uniform", "swapping": "swap-uniform", "addition": "swap-uniform"}
SCHEDULE_KEYS = ("s_gi", "e_gi", "s_lq", "e_lq", "layer_gi", "layer_lq")


class LocalizationFailed(NotFound):
    """The segmentation oracle could not find a requested object."""


# --- requests and config files --------------------------------------------------------------

@dataclass
class TaskRequest:
    task: str
    subject_image: str
    subject_query: str  # "color shape"
    condition_image: Optional[str] = None
    condition_query: Optional[str] = None
    region: Optional[str] = None
    prompt: Optional[str] = None
    subject_prompt: Optional[str] = None
    condition_prompt: Optional[str] = None
    schedule_preset: Optional[str] = None
    schedule: dict[str, int] = field(default_factory=dict)
    steps: int = 50
    guidance: float = 7.5
    seed: int = 0
    out: str = "out"
    printed_order: bool = False

    def __post_init__(self):
        if self.task not in TASK_PRESETS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task in ("swapping", "addition") and not self.condition_image:
            raise ConfigError(f"{self.task} needs condition_image")
        if self.task == "swapping" and not self.condition_query:
            raise ConfigError("swapping needs condition_query")
        if self.task == "addition" and not self.region:
            raise ConfigError("addition needs region")
        if self.task == "generation" and not self.prompt:
            raise ConfigError("generation needs prompt")
        if self.schedule_preset and self.schedule:
            raise ConfigError("preset and explicit schedule both given")
        unknown = set(self.schedule) - set(SCHEDULE_KEYS)
        if unknown:
            raise ConfigError(f"unknown schedule keys {sorted(unknown)}")
        _parse_query(self.subject_query)
        if self.condition_query:
            _parse_query(self.condition_query)

    def control_schedule(self) -> ControlSchedule:
        if self.schedule_preset:
            sch = preset(self.schedule_preset)
        else:
            sch = preset(TASK_PRESETS[self.task])
            values = dict(self.schedule)
            if "e_gi" in values and "s_lq" not in values:
                values["s_lq"] = values["e_gi"]
            sch = replace(sch, **values)
        if sch.total_steps != self.steps:
            sch = sch.rescaled(self.steps)
        return sch

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(steps=self.steps, guidance_scale=self.guidance, seed=self.seed)


_REQUEST_ORDER = [f.name for f in fields(TaskRequest) if f.name != "schedule"]
_REQUIRED = ("task", "subject_image", "subject_query")


def _parse_query(q: str) -> tuple[str, str]:
    words = q.split()
    if len(words) != 2 or words[0] not in vocab.COLOR_NAMES or words[1] not in vocab.SHAPES:
        raise ConfigError(f"query must be '<color> <shape>', got {q!r}")
    return words[0], words[1]


def request_to_text(req: TaskRequest) -> str:
    defaults = TaskRequest.__dataclass_fields__
    lines = []
    for name in _REQUEST_ORDER:
        val = getattr(req, name)
        default = defaults[name].default
        if name in _REQUIRED or (val is not None and val != default):
            lines.append(f"{name}={val}")
    for k in SCHEDULE_KEYS:
        if k in req.schedule:
            lines.append(f"{k}={req.schedule[k]}")
    return "\n".join(lines) + "\n"


def request_from_text(text: str) -> TaskRequest:
    kw: dict = {}
    sched: dict[str, int] = {}
    types = {f.name: f.type for f in fields(TaskRequest)}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep:
            raise ConfigError(f"expected key=value, got {raw!r}")
        if key in SCHEDULE_KEYS:
            try:
                sched[key] = int(val)
            except ValueError:
                raise ConfigError(f"{key} must be an integer") from None
        elif key in types and key != "schedule":
            try:
                kw[key] = _convert(key, val)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {val!r}") from None
        else:
            raise ConfigError(f"unknown config key {key!r}")
    for key in _REQUIRED:
        if key not in kw:
            raise ConfigError(f"missing required key {key!r}")
    return TaskRequest(schedule=sched, **kw)


def _convert(key: str, val: str):
    if key in ("steps", "seed"):
        return int(val)
    if key == "guidance":
        return float(val)
    if key == "printed_order":
        if val not in ("True", "False", "true", "false", "1", "0"):
            raise ValueError(val)
        return val in ("True", "true", "1")
    return val


def load_request(path: str | Path) -> TaskRequest:
    return request_from_text(Path(path).read_text(encoding="utf-8"))


def save_request(req: TaskRequest, path: str | Path) -> None:
    Path(path).write_text(request_to_text(req), encoding="utf-8")


# --- metrics ---------------------------------------------------------------------------------

HIST_BINS = 4


def _float_image(img) -> np.ndarray:
    arr = np.asarray(img)
    return arr.astype(np.float64) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float64)


def bg_mse(output, condition, editable) -> float:
    """Mean squared pixel error (in [0, 1] units) outside the editable mask."""
    keep = ~np.asarray(editable, dtype=bool)
    if not keep.any():
        return float("nan")
    diff = _float_image(output)[keep] - _float_image(condition)[keep]
    return float(np.mean(diff**2))


def color_histogram(img, mask, bins: int = HIST_BINS) -> Optional[np.ndarray]:
    """Normalised ``bins**3`` RGB histogram with trilinear (soft) bin assignment.

    Each pixel spreads unit weight over the 8 nearest bin centres, so a colour
    sitting near a bin edge does not flip the whole histogram when it shifts
    slightly. Weight past the outermost centres is folded back into the edge bin.
    """
    px = _float_image(img)[np.asarray(mask, dtype=bool)]
    if len(px) == 0:
        return None
    x = px * bins - 0.5
    lo = np.floor(x).astype(np.int64)
    frac = x - lo
    h = np.zeros(bins**3)
    for corner in np.ndindex(2, 2, 2):
        c = np.array(corner)
        w = np.prod(np.where(c == 1, frac, 1 - frac), axis=1)
        q = np.clip(lo + c, 0, bins - 1)
        np.add.at(h, (q[:, 0] * bins + q[:, 1]) * bins + q[:, 2], w)
    return h / h.sum()


def fg_hist_dist(img_a, mask_a, img_b, mask_b) -> float:
    """L1 distance between normalised colour histograms of two masked regions, in [0, 2]."""
    ha, hb = color_histogram(img_a, mask_a), color_histogram(img_b, mask_b)
    if ha is None or hb is None:
        return float("nan")
    return float(np.abs(ha - hb).sum())


# --- running tasks ----------------------------------------------------------------------------

@dataclass
class Prepared:
    """Everything a pipeline run needs that does not depend on the control schedule."""

    bundle: BranchBundle
    masks: BranchMasks
    subject_image: np.ndarray
    subject_mask: np.ndarray
    condition_image: Optional[np.ndarray] = None
    editable_raw: Optional[np.ndarray] = None  # located object / region before dilation
    editable: Optional[np.ndarray] = None  # dilated


@dataclass
class TaskResult:
    image: np.ndarray  # uint8 target
    subject_recon: np.ndarray
    condition_recon: np.ndarray
    editable: np.ndarray
    row: dict


def _locate(img: np.ndarray, query: str, what: str) -> np.ndarray:
    color, shape = _parse_query(query)
    try:
        return segment_synthetic(img, shape, color)
    except NotFound as e:
        raise LocalizationFailed(f"subject localization failed for {what} '{query}': {e}") from e


def _to_uint8(z: torch.Tensor) -> np.ndarray:
    px = to_pixels(z[0].to(torch.float32)).permute(1, 2, 0).numpy()
    return np.clip(np.round(px * 255), 0, 255).astype(np.uint8)


def prepare(
    model,
    sched: NoiseSchedule,
    task: str,
    subject_image: np.ndarray,
    subject_query: str,
    sampler: SamplerConfig,
    condition_image: Optional[np.ndarray] = None,
    condition_query: Optional[str] = None,
    region: Optional[np.ndarray] = None,
    prompt: Optional[str] = None,
    subject_prompt: Optional[str] = None,
    condition_prompt: Optional[str] = None,
    dilation_iterations: int = 1,
) -> Prepared:
    """Localise masks, invert the source images and assemble the branch bundle."""
    subject_mask = _locate(subject_image, subject_query, "subject")
    res = model.resolutions
    subj_pyr = build_pyramid(subject_mask, res)
    p_sub = subject_prompt or subject_query
    inv = replace(sampler, guidance_scale=sampler.inversion_guidance)
    dtype = model.conv_in.weight.dtype
    z_sub = images_to_tensor(subject_image).to(dtype)
    sub_traj = ddim_invert(model, z_sub, p_sub, inv, sched)
    if task == "generation":
        g = torch.Generator().manual_seed(sampler.seed)
        z_con = torch.randn(z_sub.shape, generator=g, dtype=torch.float32).to(dtype)
        color, shape = _parse_query(subject_query)
        try:
            token = vocab.word_index(prompt, shape)
        except Exception as e:
            raise ConfigError(str(e)) from None
        masks = BranchMasks(subj_pyr, editable_token=token, dilation_iterations=dilation_iterations)
        bundle = BranchBundle(sub_traj[0], z_con, p_sub, prompt, prompt, subject_trajectory=sub_traj)
        return Prepared(bundle, masks, subject_image, subject_mask)
    if condition_image is None:
        raise ConfigError(f"{task} needs a condition image")
    if task == "swapping":
        raw = _locate(condition_image, condition_query, "condition")
    else:
        if region is None:
            raise ConfigError("addition needs an editable region")
        raw = np.asarray(region, dtype=bool)
    editable = dilate(raw, dilation_iterations)
    # the condition/target prompt names only the class of the object being replaced;
    # its colour words would pull the target back towards the old appearance
    p_con = condition_prompt or (_parse_query(condition_query)[1] if condition_query else p_sub)
    z_con0 = images_to_tensor(condition_image).to(dtype)
    con_traj = ddim_invert(model, z_con0, p_con, inv, sched)
    masks = BranchMasks(subj_pyr, editable=build_pyramid(editable, res), dilation_iterations=dilation_iterations)
    bundle = BranchBundle(sub_traj[0], con_traj[0], p_sub, p_con, p_con,
                          subject_trajectory=sub_traj, condition_trajectory=con_traj)
    return Prepared(bundle, masks, subject_image, subject_mask, condition_image, raw, editable)


def evaluate_run(prep: Prepared, out: PipelineResult, condition_object: Optional[np.ndarray] = None) -> TaskResult:
    img = _to_uint8(out.target)
    if prep.editable is not None:
        editable = prep.editable
    else:
        editable = out.editable_masks[-1] if out.editable_masks else np.zeros(img.shape[:2], bool)
    row = {
        "bg_mse": bg_mse(img, prep.condition_image, editable) if prep.condition_image is not None else float("nan"),
        "fg_hist_dist": fg_hist_dist(img, editable, prep.subject_image, prep.subject_mask),
    }
    if condition_object is not None and prep.condition_image is not None:
        row["fg_hist_dist_original"] = fg_hist_dist(img, editable, prep.condition_image, condition_object)
    return TaskResult(img, _to_uint8(out.subject), _to_uint8(out.condition), editable, row)


def run_prepared(model, sched, prep: Prepared, schedule: ControlSchedule, sampler: SamplerConfig,
                 printed_order: bool = False, allow_reverse: bool = False,
                 editable_override: Optional[MaskPyramid] = None) -> PipelineResult:
    masks = prep.masks if editable_override is None else replace(prep.masks, editable=editable_override)
    return run_pipeline(model, sched, prep.bundle, schedule, masks, sampler,
                        printed_order=printed_order, allow_reverse=allow_reverse)


def run_task(req: TaskRequest, model, sched: NoiseSchedule, write: bool = True) -> TaskResult:
    """Run one customization request end to end and optionally write its outputs to ``req.out``."""
    problems = validate_schedule(req.control_schedule())
    if problems:
        raise ConfigError("invalid control schedule: " + "; ".join(problems))
    subject = load_image(req.subject_image)
    condition = load_image(req.condition_image) if req.condition_image else None
    region = None
    if req.task == "addition":
        region = load_region(req.region, *condition.shape[:2])
    sampler = req.sampler()
    prep = prepare(model, sched, req.task, subject, req.subject_query, sampler,
                   condition_image=condition, condition_query=req.condition_query, region=region,
                   prompt=req.prompt, subject_prompt=req.subject_prompt, condition_prompt=req.condition_prompt)
    out = run_prepared(model, sched, prep, req.control_schedule(), sampler, printed_order=req.printed_order)
    result = evaluate_run(prep, out, prep.editable_raw if req.task == "swapping" else None)
    if write:
        d = Path(req.out)
        d.mkdir(parents=True, exist_ok=True)
        save_image(result.image, d / "target.png")
        save_image(result.subject_recon, d / "subject_recon.png")
        save_image(result.condition_recon, d / "condition_recon.png")
        save_mask(prep.subject_mask, d / "subject_mask.png")
        save_mask(result.editable, d / "editable_mask.png")
        save_request(req, d / "request.cfg")
    return result


# --- benchmark evaluation ----------------------------------------------------------------------

EVAL_FIELDS = ("case_id", "task", "variant", "bg_mse", "fg_hist_dist", "bg_mse_std", "fg_hist_dist_std", "status")
AGGREGATE_ID = "__aggregate__"


def case_editable(case: BenchmarkCase, results_dir: Optional[Path] = None, dilation_iterations: int = 1):
    if case.condition_mask is not None:
        return dilate(case.condition_mask, dilation_iterations)
    if results_dir is not None:
        p = Path(results_dir) / f"{case.case_id}_editable.png"
        if p.exists():
            from .masks import load_mask

            return load_mask(p)
    return None


def eval_benchmark(results_dir: str | Path, cases: Sequence[BenchmarkCase], out_csv: Optional[str | Path] = None):
    """Per-case metric rows sorted by case id, plus one aggregate row (mean, std)."""
    results_dir = Path(results_dir)
    rows = []
    for case in sorted(cases, key=lambda c: c.case_id):
        row = {k: "" for k in EVAL_FIELDS}
        row.update(case_id=case.case_id, task=case.task, variant=case.variant)
        path = results_dir / f"{case.case_id}.png"
        if not path.exists():
            row["status"] = "missing"
            rows.append(row)
            continue
        img = load_image(path)
        editable = case_editable(case, results_dir)
        if case.condition_image is not None:
            row["bg_mse"] = bg_mse(img, case.condition_image, editable)
        if editable is not None:
            row["fg_hist_dist"] = fg_hist_dist(img, editable, case.subject_image, case.subject_mask)
        row["status"] = "ok"
        rows.append(row)
    agg = {k: "" for k in EVAL_FIELDS}
    agg.update(case_id=AGGREGATE_ID, status=f"{sum(r['status'] == 'ok' for r in rows)}/{len(rows)}")
    for key in ("bg_mse", "fg_hist_dist"):
        vals = [r[key] for r in rows if isinstance(r[key], float) and not math.isnan(r[key])]
        if vals:
            agg[key] = float(np.mean(vals))
            agg[f"{key}_std"] = float(np.std(vals))
    rows.append(agg)
    if out_csv is not None:
        write_csv(rows, EVAL_FIELDS, out_csv)
    return rows


def write_csv(rows: Iterable[dict], fieldnames: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items() if k in fieldnames})


def prepare_case(model, sched, case: BenchmarkCase, sampler: SamplerConfig) -> Prepared:
    q = " ".join(case.subject_query)
    if case.task == "generation":
        return prepare(model, sched, "generation", case.subject_image, q, sampler, prompt=case.prompt,
                       subject_prompt=case.subject_caption)
    return prepare(
        model, sched, case.task, case.subject_image, q, sampler,
        condition_image=case.condition_image,
        condition_query=" ".join(case.condition_query) if case.condition_query else None,
        region=case.condition_mask if case.task == "addition" else None,
        subject_prompt=case.subject_caption,
        condition_prompt=case.condition_caption if case.task == "addition" else None,
    )


def case_schedule(case: BenchmarkCase, default: ControlSchedule) -> ControlSchedule:
    """Apply a case's ``key=value;...`` overrides (per-class "specified" settings) to ``default``."""
    if not case.schedule:
        return default
    text = "\n".join(p for p in case.schedule.split(";") if p.strip())
    over = ControlSchedule.from_text(text)
    given = {k.split("=")[0].strip() for k in case.schedule.split(";") if k.strip()}
    values = {k: getattr(over, k) for k in given}
    if "e_gi" in values and "s_lq" not in values:
        values["s_lq"] = values["e_gi"]
    return replace(default, **values)


# --- sweep ---------------------------------------------------------------------------------------

SWEEP_FIELDS = ("case_id", *SCHEDULE_KEYS, "bg_mse", "fg_hist_dist", "fg_hist_dist_original", "status", "note")


def grid_points(grid: dict[str, Sequence[int]], base: ControlSchedule, allow_reverse: bool = False):
    """Expand a parameter grid into (schedule, violations) pairs, sorted by parameters.

    Without an explicit ``s_lq`` the query window starts where injection ends.
    """
    keys = sorted(grid)
    out = []
    for combo in itertools.product(*(sorted(grid[k]) for k in keys)):
        values = dict(zip(keys, combo))
        if "s_lq" not in values and not allow_reverse:
            values["s_lq"] = values.get("e_gi", base.e_gi)
        sch = replace(base, **values)
        out.append((sch, validate_schedule(sch, allow_reverse=allow_reverse)))
    out.sort(key=lambda p: tuple(getattr(p[0], k) for k in SCHEDULE_KEYS))
    return out


def _sweep_one(args):
    model, sched, prep, schedule, sampler, allow_reverse, case_id, cond_obj = args
    row = {"case_id": case_id, **{k: getattr(schedule, k) for k in SCHEDULE_KEYS}}
    try:
        out = run_prepared(model, sched, prep, schedule, sampler, allow_reverse=allow_reverse)
        res = evaluate_run(prep, out, cond_obj)
        row.update(res.row, status="ok", note="")
    except Exception as e:  # per-point failures are data
        row.update(status="failed", note=repr(e))
    return row


def sweep(
    model,
    sched: NoiseSchedule,
    cases: Sequence[BenchmarkCase],
    grid: dict[str, Sequence[int]],
    base: ControlSchedule,
    sampler: SamplerConfig,
    allow_reverse: bool = False,
    workers: int = 1,
    out_csv: Optional[str | Path] = None,
) -> tuple[list[dict], list[dict]]:
    """One pipeline run per (valid grid point, case) at a fixed seed.

    Returns ``(rows, skipped)``: metric rows sorted by parameters then case, and
    one note per invalid grid point. With ``out_csv`` the rows go to that file
    and the notes to ``<stem>.skipped.csv`` beside it.
    """
    points = grid_points(grid, base, allow_reverse)
    skipped = [{**{k: getattr(sch, k) for k in SCHEDULE_KEYS}, "note": "invalid: " + "; ".join(problems)}
               for sch, problems in points if problems]
    valid = [sch for sch, problems in points if not problems]
    jobs = []
    for case in sorted(cases, key=lambda c: c.case_id):
        if not valid:
            break
        prep = prepare_case(model, sched, case, sampler)
        cond_obj = case.condition_mask if case.task == "swapping" else None
        for sch in valid:
            jobs.append((model, sched, prep, sch, sampler, allow_reverse, case.case_id, cond_obj))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    rows.sort(key=lambda r: (tuple(r[k] for k in SCHEDULE_KEYS), r["case_id"]))
    if out_csv is not None:
        out_csv = Path(out_csv)
        write_csv(rows, SWEEP_FIELDS, out_csv)
        if skipped:
            write_csv(skipped, (*SCHEDULE_KEYS, "note"), out_csv.with_name(out_csv.stem + ".skipped.csv"))
    for note in skipped:
        log.warning("skipped grid point %s", note["note"])
    return rows, skipped
