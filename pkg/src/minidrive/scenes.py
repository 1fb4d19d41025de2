"""Deterministic multi-view driving scenes, templated QA, and dataset IO.

All randomness comes from :class:`LCG64` so scene generation is integer-only
and reproducible bit-for-bit on any platform.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import CAMERAS

GRID = 4
MAX_OBJECTS = 4

KINDS = ("car", "truck", "pedestrian", "cone", "barrier")
KIND_WEIGHTS = (40, 15, 20, 15, 10)
COUNT_WEIGHTS = (15, 30, 30, 15, 10)  # objects per view: 0..4
MOTIONS = ("stopped", "moving-left", "moving-right", "approaching")
MOTION_WEIGHTS = (40, 20, 20, 20)
COLORS = {
    "red": (220, 40, 40),
    "blue": (40, 80, 230),
    "green": (40, 200, 60),
    "yellow": (230, 210, 40),
    "orange": (240, 140, 30),
}
COLOR_NAMES = tuple(COLORS)
MARKER = (255, 255, 255)
BACKGROUNDS = {
    "CAM_FRONT": (40, 40, 40),
    "CAM_FRONT_LEFT": (70, 30, 30),
    "CAM_FRONT_RIGHT": (30, 70, 30),
    "CAM_BACK": (30, 30, 80),
    "CAM_BACK_LEFT": (70, 70, 20),
    "CAM_BACK_RIGHT": (20, 70, 70),
}
PHRASES = {
    "CAM_FRONT": "front",
    "CAM_FRONT_LEFT": "front left",
    "CAM_FRONT_RIGHT": "front right",
    "CAM_BACK": "back",
    "CAM_BACK_LEFT": "back left",
    "CAM_BACK_RIGHT": "back right",
}
NUMBER_WORDS = ("no", "one", "two", "three", "four")
PLURALS = {"car": "cars", "truck": "trucks", "pedestrian": "pedestrians", "cone": "cones",
           "barrier": "barriers"}
CATEGORIES = ("perception", "planning", "prediction")


class LCG64:
    """64-bit linear congruential generator (Knuth's MMIX constants).

    ``state' = (6364136223846793005 * state + 1442695040888963407) mod 2**64``;
    each draw returns the high 32 bits of the new state.
    """

    MULT = 6364136223846793005
    INC = 1442695040888963407
    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = seed & self.MASK
        self.next_u32()

    def next_u32(self) -> int:
        self.state = (self.MULT * self.state + self.INC) & self.MASK
        return self.state >> 32

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by multiply-shift."""
        return (self.next_u32() * n) >> 32

    def choice(self, weights: Sequence[int]) -> int:
        r = self.below(sum(weights))
        for i, w in enumerate(weights):
            if r < w:
                return i
            r -= w
        raise AssertionError("unreachable")


@dataclass(frozen=True)
class SceneObject:
    kind: str
    color: str
    cell: tuple[int, int]  # (row, col) on the GRID x GRID layout
    motion: str


@dataclass
class Scene:
    seed: int
    views: dict[str, list[SceneObject]]


@dataclass
class SceneSample:
    id: str
    views: dict[str, np.ndarray]  # camera -> uint8 [H, W, 3]
    question: str
    answer: str
    category: str
    scene_seed: int | None = field(default=None, compare=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneSample):
            return NotImplemented
        return (
            (self.id, self.question, self.answer, self.category)
            == (other.id, other.question, other.answer, other.category)
            and list(self.views) == list(other.views)
            and all(np.array_equal(self.views[k], other.views[k]) for k in self.views)
        )


def generate_scene(seed: int) -> Scene:
    rng = LCG64(seed)
    views = {}
    for cam in CAMERAS:
        count = rng.choice(COUNT_WEIGHTS)
        free = list(range(GRID * GRID))
        objects = []
        for _ in range(count):
            kind = KINDS[rng.choice(KIND_WEIGHTS)]
            color = COLOR_NAMES[rng.below(len(COLOR_NAMES))]
            cell = free.pop(rng.below(len(free)))
            motion = MOTIONS[rng.choice(MOTION_WEIGHTS)]
            objects.append(SceneObject(kind, color, divmod(cell, GRID), motion))
        objects.sort(key=lambda o: o.cell)
        views[cam] = objects
    return Scene(seed, views)


# ---------------------------------------------------------------- rendering


def _glyph_mask(kind: str, s: int) -> np.ndarray:
    m = max(1, s // 8)
    r, c = np.mgrid[0:s, 0:s]
    if kind == "car":
        return (r >= s // 4) & (r < s - s // 4) & (c >= m) & (c < s - m)
    if kind == "truck":
        return (r >= m) & (r < s - m) & (c >= m) & (c < s - m)
    if kind == "pedestrian":
        # disc, in doubled coordinates to stay integer
        d2 = (2 * r - (s - 1)) ** 2 + (2 * c - (s - 1)) ** 2
        return d2 <= (s - 2 * m - 1) ** 2
    if kind == "cone":
        half = (r - m) // 2 + 1
        return (r >= m) & (r < s - m) & (np.abs(2 * c - (s - 1)) <= 2 * half - 1)
    if kind == "barrier":
        return (r >= s // 2 - m) & (r < s // 2 + m) & (c >= m) & (c < s - m)
    raise ValueError(f"unknown kind {kind}")


def _marker_mask(motion: str, s: int) -> np.ndarray:
    m = max(1, s // 8)
    r, c = np.mgrid[0:s, 0:s]
    mid = (r >= s // 2 - m // 2 - 1) & (r < s // 2 + m // 2 + 1)
    if motion == "stopped":
        return np.zeros((s, s), dtype=bool)
    if motion == "moving-left":
        return mid & (c < m)
    if motion == "moving-right":
        return mid & (c >= s - m)
    if motion == "approaching":
        centre = (c >= s // 2 - m // 2 - 1) & (c < s // 2 + m // 2 + 1)
        return centre & (r >= s - m)
    raise ValueError(f"unknown motion {motion}")


def render_view(objects: Iterable[SceneObject], camera: str, size: int = 64) -> np.ndarray:
    """Rasterize one view as uint8 ``[size, size, 3]``; each object stays inside its cell."""
    if size % GRID:
        raise ValueError(f"image size must be divisible by {GRID}")
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUNDS[camera]
    s = size // GRID
    for obj in objects:
        row, col = obj.cell
        block = img[row * s:(row + 1) * s, col * s:(col + 1) * s]
        block[_glyph_mask(obj.kind, s)] = COLORS[obj.color]
        block[_marker_mask(obj.motion, s)] = MARKER
    return img


def render_views(scene: Scene, size: int = 64) -> dict[str, np.ndarray]:
    return {cam: render_view(scene.views[cam], cam, size) for cam in CAMERAS}


# ---------------------------------------------------------------- QA templates

TEMPLATES = ("perception.objects", "planning.action", "prediction.pedestrian")


def _listing(counts: dict[str, int]) -> tuple[str, str]:
    parts = [f"{NUMBER_WORDS[n]} {kind if n == 1 else PLURALS[kind]}"
             for kind, n in counts.items() if n]
    first = next(n for n in counts.values() if n)
    verb = "is" if first == 1 else "are"
    if len(parts) == 1:
        return verb, parts[0]
    return verb, ", ".join(parts[:-1]) + " and " + parts[-1]


def _perception(objects: list[SceneObject], phrase: str) -> str:
    counts = {k: sum(o.kind == k for o in objects) for k in KINDS}
    if not objects:
        return f"there are no important objects to the {phrase}."
    verb, listing = _listing(counts)
    return f"there {verb} {listing} to the {phrase}."


def _planning(objects: list[SceneObject]) -> str:
    if any(o.kind == "pedestrian" for o in objects):
        return "the ego vehicle should stop and yield to the pedestrian."
    if any(o.motion == "approaching" for o in objects):
        return "the ego vehicle should slow down."
    if any(o.kind in ("truck", "barrier") for o in objects):
        return "the ego vehicle should keep a safe distance."
    return "the ego vehicle can keep driving."


_PREDICTIONS = {
    "stopped": "the pedestrian will stay still.",
    "moving-left": "the pedestrian is moving to the left.",
    "moving-right": "the pedestrian is moving to the right.",
    "approaching": "the pedestrian is approaching the ego vehicle.",
}


def applicable(scene: Scene, template_id: str, camera: str) -> bool:
    if template_id == "prediction.pedestrian":
        return sum(o.kind == "pedestrian" for o in scene.views[camera]) == 1
    return template_id in TEMPLATES


def make_qa(scene: Scene, template_id: str, camera: str) -> tuple[str, str, str] | None:
    """Question, answer and category for one view, or ``None`` if the template does not apply."""
    if template_id not in TEMPLATES:
        raise KeyError(f"unknown template {template_id}")
    if not applicable(scene, template_id, camera):
        return None
    objects = scene.views[camera]
    phrase = PHRASES[camera]
    if template_id == "perception.objects":
        return (f"what are the important objects to the {phrase}?",
                _perception(objects, phrase), "perception")
    if template_id == "planning.action":
        return (f"based on {camera}, what should the ego vehicle do?",
                _planning(objects), "planning")
    ped = next(o for o in objects if o.kind == "pedestrian")
    return (f"what will the pedestrian to the {phrase} do next?",
            _PREDICTIONS[ped.motion], "prediction")


def make_sample(seed: int, size: int = 64) -> SceneSample:
    """Scene plus one QA pair; the template and view are drawn from a second stream."""
    scene = generate_scene(seed)
    rng = LCG64(seed ^ 0x5DEECE66D)
    options = [(t, cam) for t in TEMPLATES for cam in CAMERAS if applicable(scene, t, cam)]
    # pick the category first so prediction is not starved by its narrower applicability
    categories = sorted({t for t, _ in options}, key=TEMPLATES.index)
    template = categories[rng.below(len(categories))]
    cams = [cam for t, cam in options if t == template]
    camera = cams[rng.below(len(cams))]
    question, answer, category = make_qa(scene, template, camera)
    return SceneSample(f"{seed:016x}", render_views(scene, size), question, answer, category, seed)


def split_seeds(base_seed: int, split: str, count: int) -> list[int]:
    """Disjoint seed ranges: train and test occupy different halves of a 2**40 block."""
    if count >= 1 << 39:
        raise ValueError("split too large")
    offset = {"train": 0, "test": 1 << 39}[split]
    return [(base_seed << 40) + offset + i for i in range(count)]


def generate_split(base_seed: int, split: str, count: int, size: int = 64) -> list[SceneSample]:
    return [make_sample(s, size) for s in split_seeds(base_seed, split, count)]


# ---------------------------------------------------------------- IO


class ManifestError(ValueError):
    pass


def write_ppm(path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def _ppm_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte precedes the payload


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), start = _ppm_tokens(raw, 4)
    if magic not in (b"P6", b"P5") or int(maxval) != 255:
        raise ValueError(f"{path}: only 8-bit P6/P5 images are supported")
    channels = 3 if magic == b"P6" else 1
    w, h = int(w), int(h)
    payload = raw[start:start + w * h * channels]
    if len(payload) != w * h * channels:
        raise ValueError(f"{path}: truncated image payload")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    return img.copy() if channels == 3 else img[..., 0].copy()


def write_pgm(path, image: np.ndarray) -> None:
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def write_dataset(samples: Sequence[SceneSample], directory) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        views = {}
        for cam in CAMERAS:
            if cam not in s.views:
                continue
            rel = f"images/{s.id}_{cam}.ppm"
            write_ppm(root / rel, s.views[cam])
            views[cam] = rel
        record = {"id": s.id, "views": views, "question": s.question, "answer": s.answer,
                  "category": s.category}
        lines.append(json.dumps(record, sort_keys=True))
    tmp = root / "manifest.jsonl.tmp"
    tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    os.replace(tmp, root / "manifest.jsonl")


_FIELDS = {"id", "views", "question", "answer", "category"}


def read_dataset(directory) -> list[SceneSample]:
    root = Path(directory)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"missing manifest: {manifest}")
    samples = []
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{manifest}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict) or set(record) != _FIELDS:
                raise ManifestError(f"{manifest}:{lineno}: expected fields {sorted(_FIELDS)}")
            views = record["views"]
            unknown = set(views) - set(CAMERAS)
            if unknown:
                raise ManifestError(f"{manifest}:{lineno}: unknown camera key(s) {sorted(unknown)}")
            if record["category"] not in CATEGORIES:
                raise ManifestError(f"{manifest}:{lineno}: unknown category {record['category']!r}")
            images = {}
            for cam in CAMERAS:
                if cam not in views:
                    continue
                path = root / views[cam]
                if not path.exists():
                    raise FileNotFoundError(f"missing image file: {path}")
                images[cam] = read_ppm(path)
            samples.append(SceneSample(record["id"], images, record["question"], record["answer"],
                                       record["category"]))
    return samples


def referenced_camera(question: str) -> str | None:
    """The camera a templated question is about (by id or by its direction phrase)."""
    words = question.replace("?", " ").replace(",", " ").split()
    for cam in CAMERAS:
        if cam in words:
            return cam
    for cam in sorted(CAMERAS, key=lambda c: -len(PHRASES[c])):
        if f"to the {PHRASES[cam]} " in question.replace("?", " ") + " ":
            return cam
    return None
