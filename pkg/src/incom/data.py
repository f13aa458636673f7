"""Procedural synthetic HOI scenes with deterministic geometric interaction labels.

A scene is a set of instances (humans are class 0, objects are classes
1..num_object_classes) plus ground-truth (human, object, verb) triplets
derived purely from box geometry. Image coordinates put y increasing
downward, so "above" means smaller y; every labeling rule depends on that.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import Box, iou

SCHEMA_VERSION = 1

PERSON_CLASS = 0

HOLD = 0
RIDE = 1
NEXT_TO = 2
LOOK_AT = 3
NO_INTERACTION = 4

VERB_NAMES = ("hold", "ride", "next-to", "look-at", "no-interaction")


class GenerationError(RuntimeError):
    """Scene sampling could not produce a valid instance within the retry cap."""


class DatasetError(RuntimeError):
    """A dataset file line failed to parse or violated the schema."""


class Triplet(NamedTuple):
    h: int
    o: int
    verb: int


@dataclass(frozen=True)
class Instance:
    box: Box
    class_id: int
    is_human: bool
    score: float = 1.0


@dataclass(frozen=True)
class SceneSample:
    scene_id: int
    seed: int
    instances: list[Instance]
    triplets: list[Triplet]

    @property
    def num_instances(self) -> int:
        return len(self.instances)


@dataclass(frozen=True)
class GenConfig:
    """Knobs for the scene sampler.

    `rarity_skew` shapes object-class frequencies as exp(-skew * k) so that
    high-index classes are rare, giving the evaluation a meaningful
    rare/non-rare split at a few thousand scenes.
    """

    humans_min: int = 1
    humans_max: int = 3
    objects_min: int = 1
    objects_max: int = 4
    num_object_classes: int = 4
    num_verbs: int = 5
    box_min_size: float = 0.15
    box_max_size: float = 0.55
    rarity_skew: float = 2.0
    det_score: float = 1.0
    max_retries: int = 100

    def __post_init__(self):
        if self.humans_min < 0 or self.humans_max < self.humans_min:
            raise ValueError("invalid humans range")
        if self.objects_min < 0 or self.objects_max < self.objects_min:
            raise ValueError("invalid objects range")
        if self.num_object_classes < 1:
            raise ValueError("need at least one object class")
        if self.num_verbs < len(VERB_NAMES):
            raise ValueError(f"num_verbs must cover the {len(VERB_NAMES)} rule-defined verbs")
        if not 0.0 < self.box_min_size <= self.box_max_size:
            raise ValueError("invalid box size range")

    @property
    def num_classes(self) -> int:
        """Total class vocabulary: person plus object classes."""
        return self.num_object_classes + 1


def _vertical_gap(a: Box, b: Box) -> float:
    return max(a.y_min, b.y_min) - min(a.y_max, b.y_max)


def _horizontal_overlap(a: Box, b: Box) -> float:
    return min(a.x_max, b.x_max) - max(a.x_min, b.x_min)


def label_pair(human: Box, other: Box) -> list[int]:
    """Verb ids for one (human, other) pair under the geometric rule set.

    Multiple verbs may co-fire; NO_INTERACTION fires alone when nothing else
    does. LOOK_AT is a fallback rule and never co-fires with the others.
    """
    verbs = []
    ocx, ocy = other.center
    hcx, hcy = human.center
    if human.contains_point(ocx, ocy) and other.area < human.area:
        verbs.append(HOLD)
    if hcy < ocy and iou(human, other) > 0.1:
        verbs.append(RIDE)
    if iou(human, other) == 0.0:
        dist = ((hcx - ocx) ** 2 + (hcy - ocy) ** 2) ** 0.5
        if dist < 0.2:
            verbs.append(NEXT_TO)
    if not verbs and _horizontal_overlap(human, other) > 0.0 and _vertical_gap(human, other) < 0.1:
        verbs.append(LOOK_AT)
    if not verbs:
        verbs.append(NO_INTERACTION)
    return verbs


def label_interactions(instances: list[Instance]) -> list[Triplet]:
    """Ground-truth triplets for every (human, other-instance) pair."""
    triplets = []
    for h, human in enumerate(instances):
        if not human.is_human:
            continue
        for o, other in enumerate(instances):
            if o == h:
                continue
            for verb in label_pair(human.box, other.box):
                triplets.append(Triplet(h=h, o=o, verb=verb))
    return triplets


def _sample_box(rng: np.random.Generator, config: GenConfig) -> Box:
    for _ in range(config.max_retries):
        w = rng.uniform(config.box_min_size, config.box_max_size)
        h = rng.uniform(config.box_min_size, config.box_max_size)
        if w >= 1.0 or h >= 1.0:
            continue
        x0 = rng.uniform(0.0, 1.0 - w)
        y0 = rng.uniform(0.0, 1.0 - h)
        if x0 + w <= 1.0 and y0 + h <= 1.0:
            return Box(x0, y0, x0 + w, y0 + h)
    raise GenerationError(
        f"no valid box after {config.max_retries} attempts; check box size range"
    )


def _object_class_weights(config: GenConfig) -> np.ndarray:
    w = np.exp(-config.rarity_skew * np.arange(config.num_object_classes))
    return w / w.sum()


def generate_scene(seed: int, config: GenConfig, scene_id: int = 0) -> SceneSample:
    """Sample one scene deterministically from `seed`."""
    rng = np.random.default_rng(seed)
    n_humans = int(rng.integers(config.humans_min, config.humans_max + 1))
    n_objects = int(rng.integers(config.objects_min, config.objects_max + 1))
    weights = _object_class_weights(config)
    instances = []
    for _ in range(n_humans):
        instances.append(
            Instance(
                box=_sample_box(rng, config),
                class_id=PERSON_CLASS,
                is_human=True,
                score=config.det_score,
            )
        )
    for _ in range(n_objects):
        cls = 1 + int(rng.choice(config.num_object_classes, p=weights))
        instances.append(
            Instance(
                box=_sample_box(rng, config),
                class_id=cls,
                is_human=False,
                score=config.det_score,
            )
        )
    return SceneSample(
        scene_id=scene_id,
        seed=seed,
        instances=instances,
        triplets=label_interactions(instances),
    )


def generate_dataset(master_seed: int, num_scenes: int, config: GenConfig) -> list[SceneSample]:
    """Sample `num_scenes` scenes with per-scene seeds drawn from the master seed."""
    master = np.random.default_rng(master_seed)
    scenes = []
    for i in range(num_scenes):
        scene_seed = int(master.integers(0, 2**31 - 1))
        scenes.append(generate_scene(scene_seed, config, scene_id=i))
    return scenes


def category_counts(scenes: list[SceneSample]) -> dict[tuple[int, int], int]:
    """Occurrences of each (verb, object class) HOI category across scenes."""
    counts: dict[tuple[int, int], int] = {}
    for scene in scenes:
        for t in scene.triplets:
            key = (t.verb, scene.instances[t.o].class_id)
            counts[key] = counts.get(key, 0) + 1
    return counts


def scene_to_dict(scene: SceneSample) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "instances": [
            {
                "box": inst.box.as_list(),
                "class": inst.class_id,
                "is_human": inst.is_human,
                "score": inst.score,
            }
            for inst in scene.instances
        ],
        "triplets": [{"h": t.h, "o": t.o, "verb": t.verb} for t in scene.triplets],
    }


def scene_from_dict(obj: dict, line_no: int) -> SceneSample:
    def fail(fieldname: str, why: str):
        raise DatasetError(f"line {line_no}: field '{fieldname}': {why}")

    if obj.get("schema_version") != SCHEMA_VERSION:
        fail("schema_version", f"expected {SCHEMA_VERSION}, got {obj.get('schema_version')!r}")
    try:
        instances = []
        for raw in obj["instances"]:
            b = raw["box"]
            try:
                box = Box(float(b[0]), float(b[1]), float(b[2]), float(b[3]))
            except (ValueError, IndexError, TypeError) as e:
                fail("instances.box", str(e))
            instances.append(
                Instance(
                    box=box,
                    class_id=int(raw["class"]),
                    is_human=bool(raw["is_human"]),
                    score=float(raw["score"]),
                )
            )
        triplets = []
        for raw in obj["triplets"]:
            t = Triplet(h=int(raw["h"]), o=int(raw["o"]), verb=int(raw["verb"]))
            if not (0 <= t.h < len(instances)) or not (0 <= t.o < len(instances)):
                fail("triplets", f"instance index out of range in {raw}")
            triplets.append(t)
        return SceneSample(
            scene_id=int(obj["scene_id"]),
            seed=int(obj["seed"]),
            instances=instances,
            triplets=triplets,
        )
    except KeyError as e:
        fail(str(e.args[0]), "missing")


def save_dataset(scenes: list[SceneSample], path) -> None:
    """Write scenes as line-delimited JSON, one scene per line."""
    with open(path, "w", encoding="utf-8") as f:
        for scene in scenes:
            f.write(json.dumps(scene_to_dict(scene), separators=(",", ":")))
            f.write("\n")


def load_dataset(path) -> list[SceneSample]:
    scenes = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {line_no}: malformed JSON: {e}") from e
            scenes.append(scene_from_dict(obj, line_no))
    return scenes
