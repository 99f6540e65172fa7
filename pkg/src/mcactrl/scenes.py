"""Procedural toy scenes with exact ground-truth masks, captions and a small benchmark."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import vocab
from .errors import InvalidArgument, NotFound

PALETTE: dict[str, tuple[int, int, int]] = {
    "white": (255, 255, 255),
    "yellow": (250, 220, 50),
    "orange": (250, 140, 30),
    "red": (220, 40, 40),
    "magenta": (200, 50, 200),
    "blue": (40, 70, 220),
    "cyan": (40, 200, 220),
    "green": (40, 170, 60),
}
SHADE = 0.6
CHECKER_CELL = 8


def shade(color: str) -> tuple[int, int, int]:
    return tuple(int(round(SHADE * c)) for c in PALETTE[color])


def palette_distance(a: str, b: str) -> int:
    return abs(vocab.COLOR_NAMES.index(a) - vocab.COLOR_NAMES.index(b))


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    center: tuple[float, float]  # (x, y) in pixels
    scale: float  # half-size
    texture: str = "plain"

    def __post_init__(self):
        if self.shape not in vocab.SHAPES:
            raise InvalidArgument(f"unknown shape {self.shape!r}")
        if self.color not in PALETTE:
            raise InvalidArgument(f"unknown color {self.color!r}")
        if self.texture not in vocab.TEXTURES:
            raise InvalidArgument(f"unknown texture {self.texture!r}")
        if self.scale <= 0:
            raise InvalidArgument("scale must be positive")

    def words(self) -> list[str]:
        pre = [] if self.texture == "plain" else [self.texture]
        return pre + [self.color, self.shape]


@dataclass(frozen=True)
class Background:
    kind: str = "solid"  # solid | gradient | checker
    colors: tuple[str, ...] = ("white",)

    def __post_init__(self):
        need = 1 if self.kind == "solid" else 2
        if self.kind not in ("solid", "gradient", "checker"):
            raise InvalidArgument(f"unknown background kind {self.kind!r}")
        if len(self.colors) != need or any(c not in PALETTE for c in self.colors):
            raise InvalidArgument(f"{self.kind} background needs {need} palette colors")

    def words(self, with_color: bool = True) -> list[str]:
        words = ["on"]
        if with_color or self.kind == "solid":
            words.append(self.colors[0])
        if self.kind != "solid":
            words.append(self.kind)
        return words


@dataclass(frozen=True)
class SceneSpec:
    background: Background = field(default_factory=Background)
    objects: tuple[ObjectSpec, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if len(self.objects) > 3:
            raise InvalidArgument("at most 3 objects per scene")

    def caption(self, with_bg_color: bool = True) -> str:
        words: list[str] = []
        for i, obj in enumerate(self.objects):
            if i:
                words.append("and")
            words += obj.words()
        return " ".join(words + self.background.words(with_bg_color))


def _pixel_centers(size: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    return xs, ys


def shape_mask(shape: str, center: tuple[float, float], scale: float, size: int) -> np.ndarray:
    """Half-open rasterisation at pixel centres; no anti-aliasing."""
    xs, ys = _pixel_centers(size)
    cx, cy = center
    if shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 < scale**2
    if shape == "square":
        return (np.abs(xs - cx) < scale) & (np.abs(ys - cy) < scale)
    if shape == "triangle":
        # apex up, base of width 2*scale at cy + scale
        return (ys < cy + scale) & (np.abs(xs - cx) < (ys - cy + scale) / 2)
    raise InvalidArgument(f"unknown shape {shape!r}")


def _texture_mask(texture: str, size: int) -> np.ndarray:
    ii, jj = np.mgrid[0:size, 0:size]
    if texture == "striped":
        return (ii // 2) % 2 == 1
    if texture == "dotted":
        return (ii % 4 == 1) & (jj % 4 == 1)
    return np.zeros((size, size), dtype=bool)


def render_background(bg: Background, size: int) -> np.ndarray:
    img = np.empty((size, size, 3), dtype=np.uint8)
    c0 = np.array(PALETTE[bg.colors[0]], dtype=np.float64)
    if bg.kind == "solid":
        img[:] = c0.astype(np.uint8)
    elif bg.kind == "gradient":
        c1 = np.array(PALETTE[bg.colors[1]], dtype=np.float64)
        w = (np.arange(size) / max(size - 1, 1))[:, None, None]
        img[:] = np.round(c0 + (c1 - c0) * w).astype(np.uint8)
    else:
        c1 = np.array(PALETTE[bg.colors[1]], dtype=np.uint8)
        ii, jj = np.mgrid[0:size, 0:size]
        odd = ((ii // CHECKER_CELL) + (jj // CHECKER_CELL)) % 2 == 1
        img[:] = c0.astype(np.uint8)
        img[odd] = c1
    return img


def render_scene(spec: SceneSpec, size: int = 32) -> tuple[np.ndarray, list[np.ndarray]]:
    """Render to ``uint8 [size, size, 3]`` plus one visible-pixel mask per object (painter's order)."""
    img = render_background(spec.background, size)
    owner = np.full((size, size), -1, dtype=np.int64)
    for k, obj in enumerate(spec.objects):
        cx, cy = obj.center
        s = obj.scale
        if cx - s < 0 or cy - s < 0 or cx + s > size or cy + s > size:
            raise InvalidArgument(f"object {k} ({obj.shape} at {obj.center}, scale {s}) leaves the canvas")
        m = shape_mask(obj.shape, obj.center, s, size)
        img[m] = PALETTE[obj.color]
        img[m & _texture_mask(obj.texture, size)] = shade(obj.color)
        owner[m] = k
    return img, [owner == k for k in range(len(spec.objects))]


# --- random scene sampling ------------------------------------------------------------

def _color_conflicts(bg_img: np.ndarray, color: str, tol: int = 24) -> bool:
    """True if any background pixel could be confused with ``color`` or its shade."""
    px = bg_img.reshape(-1, 3).astype(np.int64)
    for ref in (PALETTE[color], shade(color)):
        if (np.abs(px - np.array(ref)).max(axis=1) <= tol).any():
            return True
    return False


def random_background(rng: np.random.Generator) -> Background:
    kind = rng.choice(["solid", "solid", "gradient", "checker"])
    if kind == "solid":
        return Background("solid", (str(rng.choice(vocab.COLOR_NAMES)),))
    a, b = rng.choice(len(vocab.COLOR_NAMES), size=2, replace=False)
    return Background(str(kind), (vocab.COLOR_NAMES[a], vocab.COLOR_NAMES[b]))


def _pick_color(rng, bg_img: np.ndarray, taken: set[str]) -> Optional[str]:
    options = [c for c in vocab.COLOR_NAMES if c not in taken and not _color_conflicts(bg_img, c)]
    return str(rng.choice(options)) if options else None


def random_object(rng, size: int, color: str, scale_range=(5, 9), texture: Optional[str] = None) -> ObjectSpec:
    s = int(rng.integers(scale_range[0], scale_range[1] + 1))
    cx = int(rng.integers(s, size - s + 1))
    cy = int(rng.integers(s, size - s + 1))
    if texture is None:
        texture = str(rng.choice(vocab.TEXTURES, p=[0.6, 0.2, 0.2]))
    return ObjectSpec(str(rng.choice(vocab.SHAPES)), color, (cx, cy), s, texture)


MIN_VISIBLE = 0.5


def _mostly_visible(objects: list[ObjectSpec], size: int) -> bool:
    """Every object keeps at least ``MIN_VISIBLE`` of its silhouette after painter's order."""
    full = [shape_mask(o.shape, o.center, o.scale, size) for o in objects]
    for k, m in enumerate(full):
        hidden = np.zeros_like(m)
        for later in full[k + 1:]:
            hidden |= later
        if (m & ~hidden).sum() < MIN_VISIBLE * m.sum():
            return False
    return True


def random_scene(rng: np.random.Generator, size: int = 32, n_objects: Optional[int] = None) -> SceneSpec:
    """Random background plus 1-3 objects in distinct colours, each at least half visible."""
    while True:
        bg = random_background(rng)
        bg_img = render_background(bg, size)
        n = n_objects if n_objects is not None else int(rng.choice([1, 2, 3], p=[0.6, 0.3, 0.1]))
        taken = set(bg.colors)
        objects = []
        for _ in range(n):
            color = _pick_color(rng, bg_img, taken)
            if color is None:
                break
            taken.add(color)
            objects.append(random_object(rng, size, color))
        if len(objects) == n and _mostly_visible(objects, size):
            return SceneSpec(bg, tuple(objects), seed=int(rng.integers(2**31)))


def make_training_dataset(n: int, seed: int = 0, size: int = 32) -> list[tuple[np.ndarray, str]]:
    """``n`` distinct random scenes with captions; background colour words are dropped half the time."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    rng = np.random.default_rng(seed)
    seen = set()
    out = []
    while len(out) < n:
        spec = random_scene(rng, size)
        key = (spec.background, spec.objects)
        if key in seen:
            continue
        seen.add(key)
        img, _ = render_scene(spec, size)
        with_color = spec.background.kind == "solid" or bool(rng.random() < 0.5)
        out.append((img, spec.caption(with_color)))
    return out


# --- segmentation oracle ---------------------------------------------------------------

COLOR_TOL = 12


def _fit_templates(region: np.ndarray) -> dict[str, float]:
    """IoU of ``region`` with each shape template fitted to its bounding box."""
    rows = np.flatnonzero(region.any(axis=1))
    cols = np.flatnonzero(region.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    cx, cy = (c0 + c1) / 2, (r0 + r1) / 2
    s = max(c1 - c0, r1 - r0) / 2
    size = region.shape[0]
    scores = {}
    for shp in vocab.SHAPES:
        tmpl = shape_mask(shp, (cx, cy), s, max(size, region.shape[1]))[: region.shape[0], : region.shape[1]]
        inter = (tmpl & region).sum()
        union = (tmpl | region).sum()
        scores[shp] = inter / union if union else 0.0
    return scores


def classify_shape(region: np.ndarray) -> Optional[str]:
    if region.sum() < 3:
        return None
    scores = _fit_templates(region)
    best = max(scores, key=scores.get)
    return best if scores[best] >= 0.5 else None


def segment_synthetic(scene: np.ndarray, shape: str, color: str) -> np.ndarray:
    """Mask of the ``color`` ``shape`` in a rendered scene; raises NotFound if absent.

    Pixels match when they equal the palette colour or its texture shade within
    a small tolerance. Components are 8-connected; the union of all matching
    pixels is tried first, then each component on its own.
    """
    from scipy import ndimage

    if shape not in vocab.SHAPES or color not in PALETTE:
        raise InvalidArgument(f"query {color} {shape} is not in the toy vocabulary")
    px = scene.astype(np.int64)
    cand = np.zeros(scene.shape[:2], dtype=bool)
    for ref in (PALETTE[color], shade(color)):
        cand |= np.abs(px - np.array(ref)).max(axis=-1) <= COLOR_TOL
    if not cand.any():
        raise NotFound(f"no {color} pixels")
    if classify_shape(cand) == shape:
        return cand
    labels, n = ndimage.label(cand, structure=np.ones((3, 3), dtype=bool))
    out = np.zeros_like(cand)
    for k in range(1, n + 1):
        comp = labels == k
        if classify_shape(comp) == shape:
            out |= comp
    if not out.any():
        raise NotFound(f"no {color} {shape} in scene")
    return out


# --- benchmark -------------------------------------------------------------------------

TASKS = ("generation", "swapping", "addition")
COMPLEX_VARIANTS = ("multi", "similar", "occlusion", "touching")


@dataclass
class BenchmarkConfig:
    subjects: int = 2
    conditions_per_subject: int = 10
    prompts_per_subject: int = 5
    seed: int = 0
    size: int = 32
    complex_variants: bool = True


@dataclass
class BenchmarkCase:
    case_id: str
    task: str
    variant: str
    subject_image: np.ndarray
    subject_mask: np.ndarray
    subject_caption: str
    subject_query: tuple[str, str]  # (color, shape)
    condition_image: Optional[np.ndarray] = None
    condition_mask: Optional[np.ndarray] = None  # editable object (swap) or region (add)
    condition_caption: str = ""
    condition_query: Optional[tuple[str, str]] = None
    prompt: str = ""
    region: Optional[tuple[int, int, int, int]] = None  # inclusive x0 y0 x1 y1 (addition)
    schedule: str = ""  # per-case overrides, "key=value;key=value"


def _segmentable(img: np.ndarray, spec: SceneSpec, masks: list[np.ndarray]) -> bool:
    for obj, m in zip(spec.objects, masks):
        try:
            if not np.array_equal(segment_synthetic(img, obj.shape, obj.color), m):
                return False
        except NotFound:
            return False
    return True


def _subject_spec(rng, size: int) -> SceneSpec:
    bg = Background("solid", (str(rng.choice(["white", "white", "yellow", "cyan"])),))
    bg_img = render_background(bg, size)
    color = _pick_color(rng, bg_img, set(bg.colors))
    s = int(rng.integers(8, 11))
    c = size / 2
    obj = ObjectSpec(
        str(rng.choice(vocab.SHAPES)), color, (c, c), s, str(rng.choice(vocab.TEXTURES, p=[0.5, 0.25, 0.25]))
    )
    return SceneSpec(bg, (obj,), seed=int(rng.integers(2**31)))


def _swap_condition(rng, size: int, variant: str, subject: ObjectSpec) -> tuple[SceneSpec, int]:
    """Condition scene for a swap case and the index of the object to replace."""
    for _ in range(1000):
        if variant == "similar":
            bg = Background("solid", (str(rng.choice(vocab.COLOR_NAMES)),))
        else:
            bg = random_background(rng)
        bg_img = render_background(bg, size)
        taken = set(bg.colors) | {subject.color}
        if variant == "similar":
            i = vocab.COLOR_NAMES.index(bg.colors[0])
            near = [vocab.COLOR_NAMES[j] for j in (i - 1, i + 1) if 0 <= j < len(vocab.COLOR_NAMES)]
            near = [c for c in near if c not in taken]
            if not near:
                continue
            color = str(rng.choice(near))
        else:
            color = _pick_color(rng, bg_img, taken)
            if color is None:
                continue
        target = random_object(rng, size, color, scale_range=(7, 10))
        objects = [target]
        idx = 0
        if variant in ("multi", "occlusion", "touching"):
            taken.add(color)
            other_color = _pick_color(rng, bg_img, taken)
            if other_color is None:
                continue
            s = int(rng.integers(4, 7))
            if variant == "multi":
                other = random_object(rng, size, other_color, scale_range=(4, 6))
                if (shape_mask(other.shape, other.center, other.scale, size)
                        & shape_mask(target.shape, target.center, target.scale, size)).any():
                    continue
                objects = [other, target]
                idx = 1
            else:
                tx, ty = target.center
                direction = rng.choice([-1, 1])
                gap = -s // 2 if variant == "occlusion" else 0
                ox = tx + direction * (target.scale + s + gap)
                other = ObjectSpec("square", other_color, (ox, ty), s, "plain")
                if variant == "occlusion":
                    # the occluder sits behind; the target stays whole
                    objects = [other, target]
                    idx = 1
                else:
                    objects = [target, other]
        spec = SceneSpec(bg, tuple(objects), seed=int(rng.integers(2**31)))
        try:
            img, masks = render_scene(spec, size)
        except InvalidArgument:
            continue
        if any(m.sum() < 8 for m in masks) or not _segmentable(img, spec, masks):
            continue
        if variant == "similar" and palette_distance(color, bg.colors[0]) > 1:
            continue
        if variant == "occlusion" and not _overlaps(spec, size):
            continue
        if variant == "touching" and not _touches(masks[0], masks[1]):
            continue
        return spec, idx
    raise RuntimeError(f"could not build a {variant} swap condition")


def _overlaps(spec: SceneSpec, size: int) -> bool:
    a, b = (shape_mask(o.shape, o.center, o.scale, size) for o in spec.objects[:2])
    return bool((a & b).any())


def _touches(a: np.ndarray, b: np.ndarray) -> bool:
    from scipy import ndimage

    return bool((ndimage.binary_dilation(a, structure=np.ones((3, 3), bool)) & b).any())


def _addition_condition(rng, size: int, subject: ObjectSpec) -> tuple[SceneSpec, tuple[int, int, int, int]]:
    for _ in range(1000):
        bg = random_background(rng)
        bg_img = render_background(bg, size)
        s = int(rng.integers(7, 10))
        x0 = int(rng.integers(0, size - 2 * s + 1))
        y0 = int(rng.integers(0, size - 2 * s + 1))
        region = (x0, y0, x0 + 2 * s - 1, y0 + 2 * s - 1)
        objects = []
        if rng.random() < 0.5:
            color = _pick_color(rng, bg_img, set(bg.colors) | {subject.color})
            if color is None:
                continue
            objects.append(random_object(rng, size, color, scale_range=(4, 6)))
        spec = SceneSpec(bg, tuple(objects), seed=int(rng.integers(2**31)))
        try:
            img, masks = render_scene(spec, size)
        except InvalidArgument:
            continue
        rmask = region_mask(region, size, size)
        if any((m & rmask).any() for m in masks):
            continue
        return spec, region
    raise RuntimeError("could not build an addition condition")


def region_mask(box: tuple[int, int, int, int], height: int, width: int) -> np.ndarray:
    x0, y0, x1, y1 = box
    if not (0 <= x0 <= x1 < width and 0 <= y0 <= y1 < height):
        raise InvalidArgument(f"region {box} outside a {width}x{height} image")
    m = np.zeros((height, width), dtype=bool)
    m[y0 : y1 + 1, x0 : x1 + 1] = True
    return m


def make_benchmark(config: BenchmarkConfig = BenchmarkConfig()) -> list[BenchmarkCase]:
    """Per subject: K swap cases, K addition cases and P generation prompts.

    With ``complex_variants`` the last four swap cases of each subject are the
    multi-object, similar-colour, occlusion and touching variants.
    """
    rng = np.random.default_rng(config.seed)
    size = config.size
    K = config.conditions_per_subject
    cases: list[BenchmarkCase] = []
    for si in range(config.subjects):
        sspec = _subject_spec(rng, size)
        simg, (smask,) = render_scene(sspec, size)
        subj = sspec.objects[0]
        base = dict(
            subject_image=simg,
            subject_mask=smask,
            subject_caption=sspec.caption(),
            subject_query=(subj.color, subj.shape),
        )
        n_complex = len(COMPLEX_VARIANTS) if config.complex_variants and K > len(COMPLEX_VARIANTS) else 0
        variants = ["clean"] * (K - n_complex) + list(COMPLEX_VARIANTS[:n_complex])
        for k, variant in enumerate(variants):
            cspec, idx = _swap_condition(rng, size, "clean" if variant == "clean" else variant, subj)
            cimg, cmasks = render_scene(cspec, size)
            obj = cspec.objects[idx]
            cases.append(BenchmarkCase(
                case_id=f"s{si:02d}_swap{k:02d}", task="swapping", variant=variant,
                condition_image=cimg, condition_mask=cmasks[idx], condition_caption=cspec.caption(),
                condition_query=(obj.color, obj.shape), **base,
            ))
        for k in range(K):
            cspec, region = _addition_condition(rng, size, subj)
            cimg, _ = render_scene(cspec, size)
            cases.append(BenchmarkCase(
                case_id=f"s{si:02d}_add{k:02d}", task="addition", variant="clean",
                condition_image=cimg, condition_mask=region_mask(region, size, size),
                condition_caption=cspec.caption(), region=region, **base,
            ))
        for k in range(config.prompts_per_subject):
            bg = random_background(rng)
            prompt = " ".join(subj.words() + bg.words(with_color=bool(rng.random() < 0.5)))
            cases.append(BenchmarkCase(
                case_id=f"s{si:02d}_gen{k:02d}", task="generation", variant="clean", prompt=prompt, **base,
            ))
    return cases


MANIFEST_FIELDS = (
    "case_id", "task", "variant", "subject_image", "subject_mask", "subject_caption", "subject_query",
    "condition_image", "condition_mask", "condition_caption", "condition_query", "prompt", "region", "schedule",
)


def write_benchmark(cases: list[BenchmarkCase], out_dir: str | Path) -> Path:
    """Write PNGs, sidecar mask PNGs and ``manifest.tsv`` (one line per case)."""
    from .masks import save_image, save_mask

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for case in cases:
        row = {k: "" for k in MANIFEST_FIELDS}
        row.update(case_id=case.case_id, task=case.task, variant=case.variant,
                   subject_caption=case.subject_caption, subject_query=" ".join(case.subject_query),
                   condition_caption=case.condition_caption, prompt=case.prompt, schedule=case.schedule)
        subj_png = out / f"{case.case_id}_subject.png"
        save_image(case.subject_image, subj_png)
        save_mask(case.subject_mask, out / f"{case.case_id}_subject_mask.png")
        row["subject_image"] = subj_png.name
        row["subject_mask"] = f"{case.case_id}_subject_mask.png"
        if case.condition_image is not None:
            save_image(case.condition_image, out / f"{case.case_id}_condition.png")
            save_mask(case.condition_mask, out / f"{case.case_id}_condition_mask.png")
            row["condition_image"] = f"{case.case_id}_condition.png"
            row["condition_mask"] = f"{case.case_id}_condition_mask.png"
        if case.condition_query:
            row["condition_query"] = " ".join(case.condition_query)
        if case.region:
            row["region"] = " ".join(map(str, case.region))
            (out / f"{case.case_id}_region.txt").write_text(row["region"] + "\n")
        rows.append(row)
    path = out / "manifest.tsv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS, delimiter="\t", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def read_benchmark(manifest: str | Path) -> list[BenchmarkCase]:
    from .masks import load_image, load_mask

    manifest = Path(manifest)
    root = manifest.parent
    cases = []
    with open(manifest, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f, delimiter="\t"):
            def opt(key, loader):
                return loader(root / row[key]) if row[key] else None

            cq = tuple(row["condition_query"].split()) if row["condition_query"] else None
            cases.append(BenchmarkCase(
                case_id=row["case_id"], task=row["task"], variant=row["variant"],
                subject_image=load_image(root / row["subject_image"]),
                subject_mask=load_mask(root / row["subject_mask"]),
                subject_caption=row["subject_caption"],
                subject_query=tuple(row["subject_query"].split()),
                condition_image=opt("condition_image", load_image),
                condition_mask=opt("condition_mask", load_mask),
                condition_caption=row["condition_caption"], condition_query=cq,
                prompt=row["prompt"],
                region=tuple(int(v) for v in row["region"].split()) if row["region"] else None,
                schedule=row["schedule"],
            ))
    return cases


def with_schedule(case: BenchmarkCase, overrides: str) -> BenchmarkCase:
    return replace(case, schedule=overrides)
