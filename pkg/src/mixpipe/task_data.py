"""Instruction templates, conversation records and closed-world synthetic
datasets.

Every synthetic sample keeps the generator's annotation next to the
conversation, and ``render_answer`` rebuilds the assistant text from that
annotation alone.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .images import ImageTensor, read_ppm, write_ppm
from .language_core import BOS, EOS, encode_text

TASK_TAGS = ("caption", "vqa", "detection", "rec", "reg", "pose", "grounded_caption", "classify", "text_only")

# Instruction strings, one per table row (alternatives split into separate
# entries).  Table line wraps are joined with a single space; the OCR row is
# two prompt lines.
TEMPLATES = {
    "vqa": "Answer the question using a single word or phrase.",
    "multiple_choice": "Answer with the option's letter from the given choices directly.",
    "rec": "Please provide the bounding box coordinate of the region this sentence describes: {description}.",
    "text_vqa": "Reference OCR token: {OCR}\nAnswer the question using a single word or phrase.",
    "vizwiz": ("When the provided information is insufficient, respond with 'Unanswerable'. "
               "Answer the question using a single word or phrase."),
    "options": "There are several options: {options}",
    "detection": "Detect all objects shown in the image.",
    "detection_category": "detect all {category name} shown in the image.",
    "pose_people": "Detect all people shown in the image.",
    "pose": "Detect the key points of the person in the region {coordinate}.",
    "document_layout": "Detect all texts and provide their bounding box coordinated.",
    "grounded_caption": "Describe the image concisely. Include the bounding box for each mentioned object.",
    "relation": "What is the relationship between the object in {coordinate} and the object in {coordinate}?",
    "referring_relationship": "Please provide the bounding box coordinate of the region this sentence describes: {description}",
    "reg": "Please provide a short description for this region : {coordinate}",
    "caption": "Provide a one-sentence caption for the provided image.",
    "classify": "Classify the image.",
}
CLASSIFY_RESPONSE = "This is a [CLASS]"

_TASK_TEMPLATE = {"vqa": "vqa", "detection": "detection", "rec": "rec", "reg": "reg", "pose": "pose",
                  "grounded_caption": "grounded_caption", "classify": "classify", "caption": "caption"}


def instruction_for(task: str, **slots) -> str:
    """Fill a template.  ``task`` is a task tag or a TEMPLATES key.

    Slot names with spaces (``category name``) are passed via ``**{...}``.
    Repeated slots (two ``{coordinate}``) take a list, consumed in order.
    """
    key = _TASK_TEMPLATE.get(task, task)
    if key not in TEMPLATES:
        if task == "text_only":
            raise ValueError("text-only samples carry no instruction")
        raise KeyError(f"no template for {task!r}")
    tmpl = TEMPLATES[key]
    pending = {k: (list(v) if isinstance(v, (list, tuple)) else [v]) for k, v in slots.items()}

    def fill(m: re.Match) -> str:
        name = m.group(1)
        if not pending.get(name):
            raise ValueError(f"template {key!r} needs slot {{{name}}}")
        return str(pending[name].pop(0))

    return re.sub(r"\{([^{}]+)\}", fill, tmpl)


# -- coordinates -------------------------------------------------------
@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(0.0 <= v <= 1.0 for v in vals):
            raise ValueError(f"bbox coordinates must be normalised to [0, 1]: {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate bbox {vals}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


_NUM = r"\s*(-?\d+(?:\.\d+)?)\s*"
_BBOX_RE = re.compile(r"\[" + ",".join([_NUM] * 4) + r"\]")


def serialize_bbox(b: BBox) -> str:
    return "[" + ", ".join(f"{v:.3f}" for v in b.as_tuple()) + "]"


def parse_bbox(s: str) -> BBox:
    m = _BBOX_RE.fullmatch(s.strip())
    if m is None:
        raise ValueError(f"malformed bbox {s!r}")
    return BBox(*(float(g) for g in m.groups()))


def find_bbox(text: str) -> BBox | None:
    """First well-formed bbox in free text, or None."""
    for m in _BBOX_RE.finditer(text):
        try:
            return BBox(*(float(g) for g in m.groups()))
        except ValueError:
            continue
    return None


KEYPOINT_NAMES = ("head", "l_hand", "r_hand", "l_foot", "r_foot")


@dataclass(frozen=True)
class Keypoints:
    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.points) != len(KEYPOINT_NAMES):
            raise ValueError(f"need {len(KEYPOINT_NAMES)} keypoints")
        if not all(0.0 <= v <= 1.0 for p in self.points for v in p):
            raise ValueError("keypoints must be normalised to [0, 1]")

    def named(self) -> dict[str, tuple[float, float]]:
        return dict(zip(KEYPOINT_NAMES, self.points))


def serialize_point(x: float, y: float) -> str:
    return f"[{x:.3f}, {y:.3f}]"


def serialize_keypoints(k: Keypoints) -> str:
    return "\n".join(f"{n}: {serialize_point(*p)}" for n, p in zip(KEYPOINT_NAMES, k.points))


# -- conversations -----------------------------------------------------
@dataclass(eq=False)
class ConversationSample:
    turns: list[tuple[str, str]]
    task_tag: str
    image: ImageTensor | None = None
    annotation: dict = field(default_factory=dict)
    sample_id: str = ""

    def __post_init__(self):
        if self.task_tag not in TASK_TAGS:
            raise ValueError(f"unknown task tag {self.task_tag!r}")
        if not self.turns or len(self.turns) % 2:
            raise ValueError("turns must be user/assistant pairs")
        for i, (role, text) in enumerate(self.turns):
            want = "user" if i % 2 == 0 else "assistant"
            if role != want:
                raise ValueError(f"turn {i} has role {role!r}, expected {want!r}")
            if role == "assistant" and not text:
                raise ValueError(f"assistant turn {i} is empty")

    @property
    def response(self) -> str:
        return self.turns[-1][1]

    @property
    def prompt(self) -> str:
        return self.turns[-2][1]


USER_TAG = "USER: "
ASSISTANT_TAG = "ASSISTANT: "


def encode_conversation(sample: ConversationSample) -> tuple[np.ndarray, np.ndarray]:
    """Token ids and per-token loss flags; only assistant text and its eos carry loss."""
    ids = [BOS]
    mask = [False]
    for role, text in sample.turns:
        if role == "user":
            part = encode_text(USER_TAG + text + "\n" + ASSISTANT_TAG)
            ids += part
            mask += [False] * len(part)
        else:
            part = encode_text(text) + [EOS]
            ids += part
            mask += [True] * len(part)
    return np.asarray(ids, dtype=np.int64), np.asarray(mask, dtype=bool)


def encode_plain(text: str) -> tuple[np.ndarray, np.ndarray]:
    """Template-free encoding used for pretraining captions and raw text."""
    ids = [BOS] + encode_text(text) + [EOS]
    mask = [False] + [True] * (len(ids) - 1)
    return np.asarray(ids, dtype=np.int64), np.asarray(mask, dtype=bool)


def prompt_ids(sample: ConversationSample) -> np.ndarray:
    """Ids up to and including the final assistant tag, for generation."""
    ids, _ = encode_conversation(ConversationSample(sample.turns[:-1] + [("assistant", "x")],
                                                    sample.task_tag))
    return ids[:-2]


# -- sampling and preprocessing ----------------------------------------
@dataclass(frozen=True)
class DatasetSpec:
    name: str
    size: int
    seed: int = 0
    task_tag: str = "vqa"

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"dataset {self.name!r} must have at least one sample")


def sampling_probabilities(specs: Sequence[DatasetSpec]) -> np.ndarray:
    sizes = np.array([s.size for s in specs], dtype=np.float64)
    return sizes / sizes.sum()


def natural_frequency_sampler(specs: Sequence[DatasetSpec], seed) -> Iterator[tuple[int, int]]:
    """Endless ``(dataset_index, item_index)`` draws, datasets weighted by size."""
    if not specs:
        raise ValueError("no datasets to sample from")
    rng = np.random.default_rng(seed)
    probs = sampling_probabilities(specs)
    sizes = np.array([s.size for s in specs])
    while True:
        ds = rng.choice(len(specs), size=256, p=probs)
        items = (rng.random(256) * sizes[ds]).astype(np.int64)
        yield from zip(ds.tolist(), items.tolist())


def pad_to_square(img: ImageTensor) -> ImageTensor:
    """Zero-pad the shorter edge; content stays at the top-left."""
    h, w = img.height, img.width
    if h == w:
        return ImageTensor(img.pixels.copy())
    side = max(h, w)
    out = np.zeros((side, side, 3))
    out[:h, :w] = img.pixels
    return ImageTensor(out)


def padded_bbox(b: BBox, height: int, width: int) -> BBox:
    """Re-normalise a box after ``pad_to_square`` of an h x w image."""
    side = max(height, width)
    sx, sy = width / side, height / side
    return BBox(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy)


# -- synthetic scenes --------------------------------------------------
COLORS = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0),
          "yellow": (1.0, 1.0, 0.0), "white": (1.0, 1.0, 1.0)}
SHAPES = ("circle", "square", "triangle", "diamond")
COUNT_WORDS = ("zero", "one", "two", "three", "four")
ROW_NAMES = ("top", "middle", "bottom")
COL_NAMES = ("left", "center", "right")


def _shape_mask(shape: str, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    c = side / 2.0
    if shape == "circle":
        return (xx - c) ** 2 + (yy - c) ** 2 <= c * c
    if shape == "square":
        return np.ones((side, side), dtype=bool)
    if shape == "triangle":
        return np.abs(xx - c) <= yy / 2.0
    if shape == "diamond":
        return np.abs(xx - c) + np.abs(yy - c) <= c
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(objects: list[dict], size: int) -> ImageTensor:
    px = np.zeros((size, size, 3))
    for o in objects:
        x, y, s = o["px"]
        m = _shape_mask(o["shape"], s)
        px[y:y + s, x:x + s][m] = COLORS[o["color"]]
    return ImageTensor(px)


def _place_objects(rng, n: int, size: int, min_side: int, max_side: int) -> list[dict]:
    """Objects with distinct shapes and colours in distinct cells of a 3x3 layout."""
    cell = size // 3
    cells = rng.choice(9, size=n, replace=False)
    shapes = rng.choice(len(SHAPES), size=n, replace=False)
    colors = rng.choice(len(COLORS), size=n, replace=False)
    names = list(COLORS)
    objs = []
    for ci, si, ki in sorted(zip(cells.tolist(), shapes.tolist(), colors.tolist())):
        r, c = divmod(ci, 3)
        s = int(rng.integers(min_side, min(max_side, cell) + 1))
        x = c * cell + int(rng.integers(0, cell - s + 1))
        y = r * cell + int(rng.integers(0, cell - s + 1))
        objs.append({"shape": SHAPES[si], "color": names[ki], "cell": [r, c], "px": [x, y, s]})
    return objs


def object_bbox(o: dict, size: int) -> BBox:
    x, y, s = o["px"]
    return BBox(x / size, y / size, (x + s) / size, (y + s) / size)


def object_name(o: dict) -> str:
    return f"{o['color']} {o['shape']}"


def _caption_text(objs: list[dict], style: str) -> str:
    if style == "short":
        parts = [f"a {object_name(o)}" for o in objs]
        return (" and ".join(parts) if len(parts) <= 2 else ", ".join(parts[:-1]) + " and " + parts[-1]) + "."
    parts = [f"a {object_name(o)} at the {ROW_NAMES[o['cell'][0]]} {COL_NAMES[o['cell'][1]]}" for o in objs]
    return f"an image with {COUNT_WORDS[len(objs)]} shapes: " + "; ".join(parts) + "."


def render_answer(task: str, ann: dict) -> str:
    """Assistant text reconstructed from a stored annotation."""
    size = ann.get("size", 0)
    objs = ann.get("objects", [])
    if task == "caption":
        return _caption_text(objs, ann["style"])
    if task == "vqa":
        if ann["kind"] == "marker":
            return cell_id(*ann["cell"])
        if ann["kind"] == "count":
            return str(len(objs))
        target = objs[ann["target"]]
        return target["color"] if ann["kind"] == "color" else target["shape"]
    if task == "detection":
        return "\n".join(f"{object_name(o)}: {serialize_bbox(object_bbox(o, size))}" for o in objs)
    if task == "rec":
        return serialize_bbox(object_bbox(objs[ann["target"]], size))
    if task == "reg":
        return object_name(objs[ann["target"]])
    if task == "grounded_caption":
        parts = [f"a {object_name(o)} {serialize_bbox(object_bbox(o, size))}" for o in objs]
        text = " and ".join(parts)
        return text[0].upper() + text[1:] + "."
    if task == "classify":
        return CLASSIFY_RESPONSE.replace("[CLASS]", objs[0]["shape"])
    if task == "pose":
        return serialize_keypoints(Keypoints(tuple(tuple(p) for p in ann["keypoints"])))
    if task == "text_only":
        return ann["text"]
    raise ValueError(f"no renderer for task {task!r}")


def cell_id(row: int, col: int) -> str:
    return f"{'ABCDEFGH'[row]}{col + 1}"


def _render_prompt(task: str, ann: dict) -> str:
    size = ann.get("size", 0)
    objs = ann.get("objects", [])
    if task == "caption":
        return instruction_for("caption")
    if task == "vqa":
        if ann["kind"] == "marker":
            q = "Which cell holds the horizontal marker?"
        elif ann["kind"] == "count":
            q = "How many shapes are there?"
        elif ann["kind"] == "color":
            q = f"What color is the {objs[ann['target']]['shape']}?"
        else:
            q = f"What shape is {objs[ann['target']]['color']}?"
        return f"{q} {instruction_for('vqa')}"
    if task == "rec":
        return instruction_for("rec", description=f"the {object_name(objs[ann['target']])}")
    if task == "reg":
        return instruction_for("reg", coordinate=serialize_bbox(object_bbox(objs[ann["target"]], size)))
    if task == "pose":
        return instruction_for("pose", coordinate=serialize_bbox(BBox(*ann["region"])))
    if task == "text_only":
        return ""
    return instruction_for(task)


def _stick_figure(rng, size: int) -> tuple[np.ndarray, list[list[float]], list[float]]:
    h = int(rng.integers(size // 2, size - 4))
    w = h // 2
    x0 = int(rng.integers(0, size - w))
    y0 = int(rng.integers(0, size - h))
    px = np.zeros((size, size, 3))
    cx = x0 + w // 2
    head = (cx, y0 + h // 8)
    neck = (cx, y0 + h // 4)
    hip = (cx, y0 + (5 * h) // 8)
    pts = {"head": head, "l_hand": (x0, y0 + h // 2), "r_hand": (x0 + w - 1, y0 + h // 2),
           "l_foot": (x0, y0 + h - 1), "r_foot": (x0 + w - 1, y0 + h - 1)}
    color = COLORS["white"]

    def line(a, b):
        n = max(abs(b[0] - a[0]), abs(b[1] - a[1])) + 1
        for t in np.linspace(0.0, 1.0, n):
            px[int(round(a[1] + t * (b[1] - a[1]))), int(round(a[0] + t * (b[0] - a[0])))] = color

    line(neck, hip)
    line(neck, pts["l_hand"])
    line(neck, pts["r_hand"])
    line(hip, pts["l_foot"])
    line(hip, pts["r_foot"])
    r = max(1, h // 8)
    yy, xx = np.mgrid[0:size, 0:size]
    px[(xx - head[0]) ** 2 + (yy - head[1]) ** 2 <= r * r] = color
    # keypoints are pixel centres, normalised
    kp = [[(pts[n][0] + 0.5) / size, (pts[n][1] + 0.5) / size] for n in KEYPOINT_NAMES]
    region = [x0 / size, y0 / size, (x0 + w) / size, (y0 + h) / size]
    return px, kp, region


def _scene_annotation(task: str, rng, size: int, variant: str) -> tuple[dict, ImageTensor]:
    if task == "pose":
        px, kp, region = _stick_figure(rng, size)
        return {"size": size, "keypoints": kp, "region": region}, ImageTensor(px)
    if task == "classify":
        s = int(rng.integers(size // 2, size - 2))
        x, y = (int(v) for v in rng.integers(0, size - s + 1, size=2))
        objs = [{"shape": SHAPES[int(rng.integers(len(SHAPES)))],
                 "color": list(COLORS)[int(rng.integers(len(COLORS)))], "cell": [1, 1], "px": [x, y, s]}]
    else:
        n = int(rng.integers(1, 4))
        objs = _place_objects(rng, n, size, max(4, size // 8), size // 3)
    ann: dict = {"size": size, "objects": objs}
    if task == "caption":
        ann["style"] = variant or "short"
    elif task == "vqa":
        ann["kind"] = ("color", "shape", "count")[int(rng.integers(3))]
        ann["target"] = int(rng.integers(len(objs)))
    elif task in ("rec", "reg"):
        ann["target"] = int(rng.integers(len(objs)))
    return ann, render_scene(objs, size)


def gen_synthetic(task: str, seed: int, count: int, size: int = 64, variant: str = "") -> list[ConversationSample]:
    """``count`` samples; sample ``i`` depends only on ``(seed, i)``."""
    if task not in TASK_TAGS:
        raise ValueError(f"unknown task {task!r}")
    if task == "text_only":
        return [ConversationSample([("user", ""), ("assistant", t)], "text_only",
                                   annotation={"text": t}, sample_id=f"text_only-{seed}-{i}")
                for i, t in enumerate(gen_text_corpus(seed, count))]
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        ann, img = _scene_annotation(task, rng, size, variant)
        turns = [("user", _render_prompt(task, ann)), ("assistant", render_answer(task, ann))]
        out.append(ConversationSample(turns, task, img, ann, f"{task}{variant and '-' + variant}-{seed}-{i}"))
    return out


def gen_marker_probe(seed: int, count: int, size: int = 64, grid: int = 8,
                     distractors: int = 3, mark: int = 2) -> list[ConversationSample]:
    """Fine-grained probe: find the one horizontally striped marker.

    Each marker is a ``mark`` x ``mark`` block of one-pixel stripes; the
    target's stripes run horizontally, every distractor's vertically.  Blocks
    sit on even pixel coordinates, so a 2x downsample averages either
    orientation into the same flat grey and only full-resolution views can
    tell them apart.
    """
    cell = size // grid
    if mark < 2 or mark % 2 or mark > cell or cell % 2:
        raise ValueError("marker and cell sizes must be even with mark <= cell")
    if 1 + distractors > grid * grid:
        raise ValueError("more markers than cells")
    stripes = np.zeros((mark, mark))
    stripes[::2, :] = 1.0
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, 7919, i])
        picks = rng.choice(grid * grid, size=1 + distractors, replace=False)
        px = np.zeros((size, size, 3))
        cells = []
        for j, ci in enumerate(picks.tolist()):
            r, c = divmod(ci, grid)
            oy = 2 * int(rng.integers(0, (cell - mark) // 2 + 1))
            ox = 2 * int(rng.integers(0, (cell - mark) // 2 + 1))
            y, x = r * cell + oy, c * cell + ox
            px[y:y + mark, x:x + mark] = (stripes if j == 0 else stripes.T)[:, :, None]
            cells.append([r, c, x, y])
        ann = {"size": size, "kind": "marker", "cell": cells[0][:2], "markers": cells, "mark": mark}
        turns = [("user", _render_prompt("vqa", ann)), ("assistant", render_answer("vqa", ann))]
        out.append(ConversationSample(turns, "vqa", ImageTensor(px), ann, f"marker-{seed}-{i}"))
    return out


_SUBJECTS = ("the farmer", "a sailor", "my neighbour", "the old king", "a young poet", "the baker",
             "our teacher", "the merchant")
_VERBS = ("writes", "sells", "finds", "carries", "reads", "buys", "keeps", "brings")
_OBJECTS = ("a long letter", "fresh bread", "old maps", "a heavy book", "warm soup", "the news",
            "many stories", "quiet songs")
_PLACES = ("at the market", "in the harbor", "near the river", "by the fire", "in the library",
           "on the hill", "under the bridge", "at dawn")


def gen_text_corpus(seed: int, count: int) -> list[str]:
    """Sentences from a small fixed grammar, sentence ``i`` seeded by ``(seed, i)``."""
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, 104729, i])
        pick = lambda xs: xs[int(rng.integers(len(xs)))]  # noqa: E731
        s = f"{pick(_SUBJECTS)} {pick(_VERBS)} {pick(_OBJECTS)} {pick(_PLACES)}."
        out.append(s[0].upper() + s[1:])
    return out


# -- manifests ---------------------------------------------------------
def write_dataset(samples: Sequence[ConversationSample], directory: str | Path,
                  manifest: str = "manifest.jsonl") -> Path:
    """One JSON record per line: id, task, image file, turns, annotation."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        image = None
        if s.image is not None:
            image = f"{i:06d}.ppm"
            write_ppm(d / image, s.image)
        rec = {"id": s.sample_id or str(i), "task": s.task_tag, "image": image,
               "turns": [list(t) for t in s.turns], "annotation": s.annotation}
        lines.append(json.dumps(rec, sort_keys=True))
    path = d / manifest
    path.write_text("\n".join(lines) + "\n")
    return path


def read_dataset(directory: str | Path, manifest: str = "manifest.jsonl") -> list[ConversationSample]:
    d = Path(directory)
    out = []
    for n, line in enumerate((d / manifest).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            img = read_ppm(d / rec["image"]) if rec["image"] else None
            out.append(ConversationSample([tuple(t) for t in rec["turns"]], rec["task"], img,
                                          rec.get("annotation", {}), rec["id"]))
        except (KeyError, ValueError) as e:
            raise ValueError(f"{d / manifest}:{n}: bad record ({e})") from None
    return out
