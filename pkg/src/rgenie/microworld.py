"""Procedural micro-world editing benchmark.

Scenes are small token grids holding 1..5 non-overlapping colored objects.
Instructions come from a closed-vocabulary template bank in two kinds:
atomic edits name their referent explicitly; composite edits require at least
one attribute-comparison, relational, or category-knowledge hop to resolve.
Every sample carries the exact ground-truth target grid and edit-region mask.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .tokenization import Codebook, TokenGrid, Vocabulary, kmeans_codebook, quantize

COLORS = ("red", "orange", "yellow", "green", "blue", "purple")
SHAPES = ("square", "circle", "bar")
SIZES = ("small", "large")

# Category knowledge table: the desk-scale stand-in for world knowledge.
CATEGORIES = {
    "warm": ("red", "orange", "yellow"),
    "cool": ("green", "blue", "purple"),
}

FEATURE_DIM = 16


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    row: int  # anchor (top-left of bounding box)
    col: int
    cells: tuple[tuple[int, int], ...]

    @property
    def area(self) -> int:
        return len(self.cells)

    @property
    def center_col(self) -> float:
        return float(np.mean([c for _, c in self.cells]))

    @property
    def category(self) -> str:
        return "warm" if self.color in CATEGORIES["warm"] else "cool"


@dataclass
class Scene:
    height: int
    width: int
    objects: list[SceneObject]

    def occupancy(self) -> np.ndarray:
        occ = np.zeros((self.height, self.width), dtype=bool)
        for o in self.objects:
            for r, c in o.cells:
                occ[r, c] = True
        return occ


@dataclass
class MicroworldConfig:
    grid_h: int = 12
    grid_w: int = 12
    min_objects: int = 2
    max_objects: int = 4
    n_codes: int = 64
    max_place_tries: int = 1000

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects <= 5:
            raise GenerationError("object count bounds must satisfy 1 <= min <= max <= 5")


def _footprint(shape: str, size: str, row: int, col: int) -> list[tuple[int, int]]:
    if shape == "square":
        k = 2 if size == "small" else 3
        return [(row + i, col + j) for i in range(k) for j in range(k)]
    if shape == "circle":
        r = 1 if size == "small" else 2
        return [(row + r + di, col + r + dj)
                for di in range(-r, r + 1) for dj in range(-r, r + 1)
                if abs(di) + abs(dj) <= r]
    if shape == "bar":
        k = 3 if size == "small" else 5
        return [(row, col + j) for j in range(k)]
    raise GenerationError(f"unknown shape {shape!r}")


def _bbox(shape: str, size: str) -> tuple[int, int]:
    if shape == "square":
        k = 2 if size == "small" else 3
        return k, k
    if shape == "circle":
        r = 1 if size == "small" else 2
        return 2 * r + 1, 2 * r + 1
    k = 3 if size == "small" else 5
    return 1, k


def color_feature(color: str) -> np.ndarray:
    v = np.zeros(FEATURE_DIM)
    v[COLORS.index(color)] = 1.0
    return v


def cell_feature(color: str, shape: str, size: str) -> np.ndarray:
    v = color_feature(color)
    v[6 + SHAPES.index(shape)] = 0.5
    v[9] = 0.25 if size == "small" else 0.5
    return v


def render_features(scene: Scene) -> np.ndarray:
    """Deterministic H x W x c feature grid; background cells are zeros."""
    feats = np.zeros((scene.height, scene.width, FEATURE_DIM))
    for o in scene.objects:
        fv = cell_feature(o.color, o.shape, o.size)
        for r, c in o.cells:
            feats[r, c] = fv
    return feats


def generate_scene(rng: np.random.Generator, config: MicroworldConfig) -> Scene:
    """Rejection-sample non-overlapping objects with distinct (color, shape)."""
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    objects: list[SceneObject] = []
    occ = np.zeros((config.grid_h, config.grid_w), dtype=bool)
    used: set[tuple[str, str]] = set()
    for _ in range(n):
        placed = False
        for _try in range(config.max_place_tries):
            shape = SHAPES[rng.integers(len(SHAPES))]
            color = COLORS[rng.integers(len(COLORS))]
            if (color, shape) in used:
                continue
            size = SIZES[rng.integers(len(SIZES))]
            bh, bw = _bbox(shape, size)
            if bh > config.grid_h or bw > config.grid_w:
                continue
            row = int(rng.integers(config.grid_h - bh + 1))
            col = int(rng.integers(config.grid_w - bw + 1))
            cells = _footprint(shape, size, row, col)
            if any(occ[r, c] for r, c in cells):
                continue
            for r, c in cells:
                occ[r, c] = True
            used.add((color, shape))
            objects.append(SceneObject(shape, color, size, row, col, tuple(cells)))
            placed = True
            break
        if not placed:
            raise GenerationError(
                f"object placement failed after {config.max_place_tries} rejections")
    return Scene(config.grid_h, config.grid_w, objects)


# -- referent resolution -----------------------------------------------------


def find_by_color_shape(scene: Scene, color: str, shape: str) -> SceneObject | None:
    matches = [o for o in scene.objects if o.color == color and o.shape == shape]
    return matches[0] if len(matches) == 1 else None


def unique_extreme(scene: Scene, largest: bool) -> SceneObject | None:
    areas = [o.area for o in scene.objects]
    target = max(areas) if largest else min(areas)
    matches = [o for o in scene.objects if o.area == target]
    return matches[0] if len(matches) == 1 else None


def unique_leftmost(scene: Scene) -> SceneObject | None:
    cols = [min(c for _, c in o.cells) for o in scene.objects]
    target = min(cols)
    matches = [o for o, c in zip(scene.objects, cols) if c == target]
    return matches[0] if len(matches) == 1 else None


def unique_left_of(scene: Scene, anchor: SceneObject) -> SceneObject | None:
    lefts = [o for o in scene.objects
             if o is not anchor and o.center_col < anchor.center_col]
    return lefts[0] if len(lefts) == 1 else None


def oracle_resolve(scene: Scene, template: str, params: dict) -> list[SceneObject]:
    """Independent brute-force referent resolution used as a test oracle.

    Deliberately implemented with exhaustive pairwise comparisons rather than
    the generator's shortcuts.
    """
    objs = scene.objects
    if template in ("atomic_recolor", "atomic_remove"):
        return [o for o in objs
                if o.color == params["color"] and o.shape == params["shape"]]
    if template in ("largest_recolor", "copy_color"):
        winners = [o for o in objs if all(o.area > p.area for p in objs if p is not o)]
        return winners
    if template == "smallest_recolor":
        return [o for o in objs if all(o.area < p.area for p in objs if p is not o)]
    if template == "leftmost_remove":
        def left_edge(o):
            return min(c for _, c in o.cells)
        return [o for o in objs
                if all(left_edge(o) < left_edge(p) for p in objs if p is not o)]
    if template == "category_recolor":
        return [o for o in objs if o.color in CATEGORIES[params["category"]]]
    if template == "match_recolor":
        return [o for o in objs
                if o.color == params["color"] and o.shape == params["shape"]]
    if template == "left_of_remove":
        anchors = [o for o in objs
                   if o.color == params["color"] and o.shape == params["shape"]]
        if len(anchors) != 1:
            return []
        a = anchors[0]
        return [o for o in objs if o is not a and o.center_col < a.center_col]
    raise GenerationError(f"unknown template {template!r}")


# -- edit construction -------------------------------------------------------


@dataclass
class EditSample:
    source: Scene
    target: Scene
    instruction: str
    mask: np.ndarray  # (H, W) bool, exact changed-cell region
    kind: str  # atomic | composite
    template: str
    hops: int
    reason_words: list[str]  # chain-of-thought supervision tokens
    target_text: str  # description of the edited region, for eval/contrast
    combo: tuple[str, ...] = ()  # attribute combination used for the split
    seed: int = 0
    # cells that determine the edit content; equals the edit mask except when
    # the content comes from elsewhere in the scene (copy_color reads the
    # smallest object's color)
    referent: np.ndarray | None = None


def _recolor(scene: Scene, targets: list[SceneObject], color2: str) -> Scene:
    new_objs = []
    hit = {id(t) for t in targets}
    for o in scene.objects:
        if id(o) in hit:
            new_objs.append(SceneObject(o.shape, color2, o.size, o.row, o.col, o.cells))
        else:
            new_objs.append(o)
    return Scene(scene.height, scene.width, new_objs)


def _remove(scene: Scene, targets: list[SceneObject]) -> Scene:
    hit = {id(t) for t in targets}
    return Scene(scene.height, scene.width,
                 [o for o in scene.objects if id(o) not in hit])


def _cells_mask(scene: Scene, objs: list[SceneObject]) -> np.ndarray:
    mask = np.zeros((scene.height, scene.width), dtype=bool)
    for o in objs:
        for r, c in o.cells:
            mask[r, c] = True
    return mask


ATOMIC_TEMPLATES = ("atomic_recolor", "atomic_remove")
COMPOSITE_TEMPLATES = ("largest_recolor", "smallest_recolor", "leftmost_remove",
                       "category_recolor", "copy_color", "left_of_remove",
                       "match_recolor")

# copy_color and match_recolor have restrictive preconditions (unique
# largest/smallest, a uniquely shaped reference object) that reject most
# scenes, so they are drawn more often to keep the realized counts comparable
_COMPOSITE_DRAW = COMPOSITE_TEMPLATES + ("copy_color", "copy_color",
                                         "match_recolor", "match_recolor")


def _try_template(scene: Scene, template: str, rng: np.random.Generator
                  ) -> EditSample | None:
    if template == "atomic_recolor":
        o = scene.objects[rng.integers(len(scene.objects))]
        if find_by_color_shape(scene, o.color, o.shape) is None:
            return None
        others = [c for c in COLORS if c != o.color]
        color2 = others[rng.integers(len(others))]
        return EditSample(
            scene, _recolor(scene, [o], color2),
            f"change the {o.color} {o.shape} to {color2}",
            _cells_mask(scene, [o]), "atomic", template, 0,
            [o.color, o.shape, color2], f"{color2} {o.shape}", (o.color, color2))
    if template == "atomic_remove":
        o = scene.objects[rng.integers(len(scene.objects))]
        if find_by_color_shape(scene, o.color, o.shape) is None:
            return None
        return EditSample(
            scene, _remove(scene, [o]),
            f"remove the {o.color} {o.shape}",
            _cells_mask(scene, [o]), "atomic", template, 0,
            [o.color, o.shape, "remove"], "background", (o.color, o.shape))
    if template in ("largest_recolor", "smallest_recolor"):
        o = unique_extreme(scene, largest=template.startswith("largest"))
        if o is None:
            return None
        word = "largest" if template.startswith("largest") else "smallest"
        others = [c for c in COLORS if c != o.color]
        color2 = others[rng.integers(len(others))]
        return EditSample(
            scene, _recolor(scene, [o], color2),
            f"change the {word} object to {color2}",
            _cells_mask(scene, [o]), "composite", template, 1,
            [word, color2], f"{color2} {o.shape}", (color2,))
    if template == "leftmost_remove":
        o = unique_leftmost(scene)
        if o is None:
            return None
        return EditSample(
            scene, _remove(scene, [o]), "remove the leftmost object",
            _cells_mask(scene, [o]), "composite", template, 1,
            ["leftmost", "remove"], "background", (o.color,))
    if template == "category_recolor":
        cat = ("warm", "cool")[rng.integers(2)]
        members = [o for o in scene.objects if o.color in CATEGORIES[cat]]
        if not members:
            return None
        other_cat = "cool" if cat == "warm" else "warm"
        choices = CATEGORIES[other_cat]
        color2 = choices[rng.integers(len(choices))]
        return EditSample(
            scene, _recolor(scene, members, color2),
            f"recolor every {cat} object to {color2}",
            _cells_mask(scene, members), "composite", template, 1,
            [cat, color2], f"{color2} object", (cat, color2))
    if template == "copy_color":
        big = unique_extreme(scene, largest=True)
        small = unique_extreme(scene, largest=False)
        if big is None or small is None or big is small:
            return None
        if big.color == small.color:
            return None
        return EditSample(
            scene, _recolor(scene, [big], small.color),
            "change the largest object to the color of the smallest object",
            _cells_mask(scene, [big]), "composite", template, 2,
            ["largest", "smallest", small.color], f"{small.color} {big.shape}",
            (big.color, small.color), referent=_cells_mask(scene, [small]))
    if template == "match_recolor":
        o = scene.objects[rng.integers(len(scene.objects))]
        if find_by_color_shape(scene, o.color, o.shape) is None:
            return None
        # referent resolved by shape alone, so its color never appears in the
        # text; it has to be read out of the image
        candidates = [p for p in scene.objects
                      if p is not o and p.color != o.color
                      and sum(q.shape == p.shape for q in scene.objects) == 1]
        if not candidates:
            return None
        ref = candidates[rng.integers(len(candidates))]
        return EditSample(
            scene, _recolor(scene, [o], ref.color),
            f"change the {o.color} {o.shape} to the color of the {ref.shape}",
            _cells_mask(scene, [o]), "composite", template, 1,
            [o.color, o.shape, ref.shape, ref.color], f"{ref.color} {o.shape}",
            (o.color, ref.color), referent=_cells_mask(scene, [ref]))
    if template == "left_of_remove":
        anchor = scene.objects[rng.integers(len(scene.objects))]
        if find_by_color_shape(scene, anchor.color, anchor.shape) is None:
            return None
        o = unique_left_of(scene, anchor)
        if o is None:
            return None
        return EditSample(
            scene, _remove(scene, [o]),
            f"remove the object left of the {anchor.color} {anchor.shape}",
            _cells_mask(scene, [o]), "composite", template, 2,
            ["left", anchor.color, anchor.shape, "remove"], "background",
            (anchor.color, anchor.shape))
    raise GenerationError(f"unknown template {template!r}")


def generate_instruction(scene: Scene, kind: str, rng: np.random.Generator,
                         max_tries: int = 50) -> EditSample:
    """Fill a template of the requested kind; retries on ambiguous referents."""
    bank = ATOMIC_TEMPLATES if kind == "atomic" else _COMPOSITE_DRAW
    for _ in range(max_tries):
        template = bank[rng.integers(len(bank))]
        sample = _try_template(scene, template, rng)
        if sample is not None:
            return sample
    raise GenerationError(f"no applicable {kind} template after {max_tries} tries")


# -- train/val combination split ----------------------------------------------


def is_heldout_combo(sample: EditSample) -> bool:
    """Stable ~20% of template x attribute combinations reserved for val.

    The salt was chosen so every template keeps both train and held-out
    combinations, and no attribute value loses more than 40% of its
    combinations from training (otherwise e.g. one color could end up almost
    never read off the grid during training, making its held-out pairs
    unanswerable rather than merely unseen).
    """
    key = "s291:" + sample.template + ":" + ",".join(sample.combo)
    return zlib.crc32(key.encode()) % 5 == 0


# -- dataset files -------------------------------------------------------------

SCHEMA_VERSION = 3


def mask_to_rle(mask: np.ndarray) -> list[int]:
    """Run lengths of the flattened mask, starting with a False run."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    runs, cur, count = [], False, 0
    for v in flat:
        if v == cur:
            count += 1
        else:
            runs.append(count)
            cur, count = v, 1
    runs.append(count)
    return runs


def rle_to_mask(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, val = 0, False
    for n in runs:
        if val:
            flat[pos:pos + n] = True
        pos += n
        val = not val
    if pos != flat.size:
        raise ValueError("run-length data does not cover the mask")
    return flat.reshape(shape)


@dataclass
class DatasetRecord:
    idx: int
    seed: int
    kind: str
    template: str
    hops: int
    instruction: str
    instruction_ids: list[int]
    reason_words: list[str]
    target_text: str
    source_ids: list[int]
    target_ids: list[int]
    mask_rle: list[int]
    referent_rle: list[int]

    def source_grid(self, h: int, w: int) -> TokenGrid:
        return TokenGrid(np.asarray(self.source_ids).reshape(h, w))

    def target_grid(self, h: int, w: int) -> TokenGrid:
        return TokenGrid(np.asarray(self.target_ids).reshape(h, w))

    def mask(self, h: int, w: int) -> np.ndarray:
        return rle_to_mask(self.mask_rle, (h, w))

    def referent(self, h: int, w: int) -> np.ndarray:
        return rle_to_mask(self.referent_rle, (h, w))


def sample_to_record(sample: EditSample, idx: int, codebook: Codebook,
                     vocab: Vocabulary) -> DatasetRecord:
    src = quantize(render_features(sample.source), codebook, vocab)
    tgt = quantize(render_features(sample.target), codebook, vocab)
    changed = src.ids != tgt.ids
    if (changed & ~sample.mask).any():
        raise GenerationError("target differs from source outside the edit mask")
    return DatasetRecord(
        idx=idx, seed=sample.seed, kind=sample.kind, template=sample.template,
        hops=sample.hops, instruction=sample.instruction,
        instruction_ids=vocab.encode_text(sample.instruction),
        reason_words=list(sample.reason_words), target_text=sample.target_text,
        source_ids=[int(x) for x in src.ids.reshape(-1)],
        target_ids=[int(x) for x in tgt.ids.reshape(-1)],
        mask_rle=mask_to_rle(sample.mask),
        referent_rle=mask_to_rle(
            sample.mask if sample.referent is None else sample.referent))


def build_codebook(seed: int, config: MicroworldConfig,
                   n_scenes: int = 48) -> Codebook:
    """K-means over cell features sampled from scratch scenes, then frozen."""
    rng = np.random.default_rng([seed, 0xC0DE])
    feats = [render_features(generate_scene(rng, config)) for _ in range(n_scenes)]
    return kmeans_codebook(np.concatenate([f.reshape(-1, FEATURE_DIM) for f in feats]),
                           config.n_codes, rng)


def generate_split(seed: int, n: int, heldout: bool, config: MicroworldConfig,
                   codebook: Codebook, vocab: Vocabulary,
                   start_idx: int = 0) -> list[DatasetRecord]:
    records = []
    counter = 0
    while len(records) < n:
        sample_seed = [seed, 1 if heldout else 0, counter]
        counter += 1
        rng = np.random.default_rng(sample_seed)
        kind = "atomic" if (len(records) % 2 == 0) else "composite"
        try:
            scene = generate_scene(rng, config)
            sample = generate_instruction(scene, kind, rng)
        except GenerationError:
            continue
        if is_heldout_combo(sample) != heldout:
            continue
        sample.seed = counter - 1
        records.append(sample_to_record(sample, start_idx + len(records),
                                        codebook, vocab))
    return records


def write_records(path: Path, records: list[DatasetRecord],
                  config: MicroworldConfig, split: str, seed: int) -> None:
    header = {"schema": "rgenie-dataset", "version": SCHEMA_VERSION,
              "split": split, "seed": seed, "grid_h": config.grid_h,
              "grid_w": config.grid_w, "n_codes": config.n_codes,
              "count": len(records)}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(json.dumps(vars(rec)) + "\n")


def load_records(path: str | Path) -> tuple[dict, list[DatasetRecord]]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != "rgenie-dataset":
            raise ValueError(f"{path}: not a micro-world dataset file")
        if header.get("version") != SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported schema version")
        records = [DatasetRecord(**json.loads(line)) for line in fh]
    return header, records


def build_dataset(seed: int, out_dir: str | Path, n_train: int = 1700,
                  n_val: int = 220, config: MicroworldConfig | None = None
                  ) -> dict:
    """Generate the train/val files plus codebook and vocabulary sidecars.

    The val split is drawn exclusively from held-out template x attribute
    combinations to probe compositional generalization.
    """
    if n_train < 1 or n_val < 1:
        raise GenerationError("split sizes must be >= 1")
    config = config or MicroworldConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary(n_codes=config.n_codes)
    codebook = build_codebook(seed, config)
    train = generate_split(seed, n_train, False, config, codebook, vocab)
    val = generate_split(seed, n_val, True, config, codebook, vocab,
                         start_idx=n_train)
    write_records(out / "train.jsonl", train, config, "train", seed)
    write_records(out / "val.jsonl", val, config, "val", seed)
    cb_hash = checkpoint.save(out / "codebook.ckpt",
                              {"codebook.vectors": codebook.vectors})
    vocab.write_sidecar(out / "vocab.txt")
    manifest = {"train": str(out / "train.jsonl"), "val": str(out / "val.jsonl"),
                "codebook": str(out / "codebook.ckpt"),
                "codebook_hash": cb_hash, "n_train": n_train, "n_val": n_val}
    return manifest


def load_codebook(path: str | Path) -> Codebook:
    return Codebook(checkpoint.load(path)["codebook.vectors"])
