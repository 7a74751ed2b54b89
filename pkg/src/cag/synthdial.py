"""Deterministic toy scenes and grounded multi-round dialogs.

A scene is a handful of attributed objects on a grid; a dialog is a caption
plus several templated QA rounds where later questions refer to the
previous round's subject by pronoun. A symbolic oracle answers every
resolved question exactly, so ground truth is free and verifiable. The
whole corpus is a pure function of its manifest: every dialog draws from
an rng stream derived from (seed, dialog id).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CATEGORIES = ("person", "dog", "cat", "car", "tree", "ball")
COLORS = ("red", "blue", "green", "yellow", "black", "white")
SIZES = ("small", "big")
RELATIONS = ("left", "right", "above", "below")
PLURALS = {"person": "people", "dog": "dogs", "cat": "cats",
           "car": "cars", "tree": "trees", "ball": "balls"}

COUNT_CAP = 9  # counting answers stay single-token digits
MIN_OBJECTS, MAX_OBJECTS = 3, 16
MAX_GEN_ATTEMPTS = 100

FEATURE_DIM = len(CATEGORIES) + len(COLORS) + len(SIZES) + 2

ANSWER_POOLS = {
    "yesno": ("yes", "no"),
    "color": COLORS,
    "size": SIZES,
    "count": tuple(str(i) for i in range(COUNT_CAP + 1)),
}
MAX_CANDIDATES = sum(len(p) for p in ANSWER_POOLS.values())


class GenerationError(RuntimeError):
    """The scene cannot support any valid continuation of the dialog."""


class UnresolvedReferent(ValueError):
    """A question reached the oracle without its referents bound."""


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneObject:
    category: str
    color: str
    size: str
    cell: tuple[int, int]  # (col, row)


@dataclass
class Scene:
    objects: list[SceneObject]
    grid: int

    def features(self) -> np.ndarray:
        """(FEATURE_DIM, n) matrix, one injective encoding per object:
        one-hot category/color/size blocks plus normalized grid position."""
        return np.stack([encode_object(o, self.grid) for o in self.objects], axis=1)


def encode_object(obj: SceneObject, grid: int) -> np.ndarray:
    vec = np.zeros(FEATURE_DIM)
    vec[CATEGORIES.index(obj.category)] = 1.0
    vec[len(CATEGORIES) + COLORS.index(obj.color)] = 1.0
    vec[len(CATEGORIES) + len(COLORS) + SIZES.index(obj.size)] = 1.0
    denom = max(grid - 1, 1)
    vec[-2] = obj.cell[0] / denom
    vec[-1] = obj.cell[1] / denom
    return vec


def generate_scene(rng: np.random.Generator, n_objects: int = 6, grid: int = 4) -> Scene:
    """Uniform attribute sampling; (category, color) pairs never collide
    (always avoidable at <= 16 objects over 36 pairs). Object counts clamp
    to [3, 16]."""
    n = min(max(n_objects, MIN_OBJECTS), MAX_OBJECTS)
    used: set[tuple[str, str]] = set()
    objects = []
    for _ in range(n):
        while True:
            cat = CATEGORIES[rng.integers(len(CATEGORIES))]
            color = COLORS[rng.integers(len(COLORS))]
            if (cat, color) not in used:
                used.add((cat, color))
                break
        size = SIZES[rng.integers(len(SIZES))]
        cell = (int(rng.integers(grid)), int(rng.integers(grid)))
        objects.append(SceneObject(cat, color, size, cell))
    return Scene(objects, grid)


# ---------------------------------------------------------------------------
# questions and the oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResolvedQuestion:
    """Structured question with referents bound to scene object indices."""

    kind: str  # exists | count | color_of | size_of | spatial
    category: str | None = None
    color: str | None = None
    subject_ids: tuple[int, ...] = ()
    ref_id: int | None = None
    relation: str | None = None

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ResolvedQuestion":
        data = dict(data)
        data["subject_ids"] = tuple(data.get("subject_ids", ()))
        return cls(**data)


def _matches(obj: SceneObject, category: str | None, color: str | None) -> bool:
    return (category is None or obj.category == category) and (
        color is None or obj.color == color)


def _relation_holds(a: SceneObject, b: SceneObject, relation: str) -> bool:
    # strict inequalities: equal coordinates never satisfy a relation
    if relation == "left":
        return a.cell[0] < b.cell[0]
    if relation == "right":
        return a.cell[0] > b.cell[0]
    if relation == "above":
        return a.cell[1] < b.cell[1]
    if relation == "below":
        return a.cell[1] > b.cell[1]
    raise ValueError(f"unknown relation {relation!r}")


def oracle_answer(scene: Scene, question: ResolvedQuestion) -> str:
    """Exact symbolic evaluation over scene attributes and relations.

    Referents must already be bound (the generator records them); an
    unbound referent is a generator bug, not data.
    """
    objs = scene.objects
    kind = question.kind
    if kind == "exists":
        if question.category is None and question.color is None:
            raise UnresolvedReferent("exists question with no predicate")
        return "yes" if any(_matches(o, question.category, question.color)
                            for o in objs) else "no"
    if kind == "count":
        if question.category is None and question.color is None:
            raise UnresolvedReferent("count question with no predicate")
        n = sum(_matches(o, question.category, question.color) for o in objs)
        return str(min(n, COUNT_CAP))
    if kind in ("color_of", "size_of", "spatial"):
        if not question.subject_ids:
            raise UnresolvedReferent(f"{kind} question with no bound subject")
        if any(not 0 <= i < len(objs) for i in question.subject_ids):
            raise UnresolvedReferent(f"subject ids {question.subject_ids} out of range")
        subjects = [objs[i] for i in question.subject_ids]
        if kind == "color_of":
            colors = {o.color for o in subjects}
            if len(colors) != 1:
                raise UnresolvedReferent("color_of group has inconsistent colors")
            return colors.pop()
        if kind == "size_of":
            if len(subjects) != 1:
                raise UnresolvedReferent("size_of expects a single subject")
            return subjects[0].size
        if question.ref_id is None or question.relation is None:
            raise UnresolvedReferent("spatial question missing reference or relation")
        ref = objs[question.ref_id]
        return "yes" if all(_relation_holds(o, ref, question.relation)
                            for o in subjects) else "no"
    raise ValueError(f"unknown question kind {kind!r}")


def answer_type(question: ResolvedQuestion) -> str:
    return {"exists": "yesno", "spatial": "yesno", "count": "count",
            "color_of": "color", "size_of": "size"}[question.kind]


def binding_answers(scene: Scene, question: ResolvedQuestion, pronoun: str) -> set[str]:
    """Answers achievable when the pronoun binds freely (no history).

    'it' ranges over non-person objects, 'he' over persons, 'they' over
    category groups of size >= 2 (skipping groups without a well-defined
    answer).
    """
    answers: set[str] = set()
    if pronoun == "they":
        for cat in CATEGORIES:
            ids = tuple(i for i, o in enumerate(scene.objects) if o.category == cat)
            if len(ids) < 2:
                continue
            try:
                answers.add(oracle_answer(
                    scene, dataclasses.replace(question, subject_ids=ids)))
            except UnresolvedReferent:
                continue
        return answers
    want_person = pronoun == "he"
    for i, obj in enumerate(scene.objects):
        if (obj.category == "person") != want_person:
            continue
        if question.kind == "spatial" and i == question.ref_id:
            continue
        answers.add(oracle_answer(
            scene, dataclasses.replace(question, subject_ids=(i,))))
    return answers


def pronoun_for(subject: Sequence[SceneObject]) -> str:
    if len(subject) > 1:
        return "they"
    return "he" if subject[0].category == "person" else "it"


# ---------------------------------------------------------------------------
# dialog generation
# ---------------------------------------------------------------------------


@dataclass
class DialogRound:
    question: list[str]
    answer: str
    form: ResolvedQuestion
    subject_ids: tuple[int, ...]
    pronoun: bool


@dataclass
class DialogInstance:
    dialog_id: int
    scene: Scene
    caption: list[str]
    rounds: list[DialogRound]     # all rounds; the last one is the current question
    candidates: list[str]
    gt: int

    @property
    def history(self) -> list[DialogRound]:
        return self.rounds[:-1]

    @property
    def current(self) -> DialogRound:
        return self.rounds[-1]


def _unique_category_ids(scene: Scene) -> list[int]:
    counts = {}
    for o in scene.objects:
        counts[o.category] = counts.get(o.category, 0) + 1
    return [i for i, o in enumerate(scene.objects) if counts[o.category] == 1]


def _choice(rng: np.random.Generator, items: Sequence):
    return items[int(rng.integers(len(items)))]


def _establishing_round(scene: Scene, rng: np.random.Generator,
                        need_subject: bool) -> DialogRound:
    """A fresh (non-pronoun) round; with ``need_subject`` it always pins a
    unique referent for the next round's pronoun.

    Subject-pinning rounds lean on attribute questions: the follow-up
    pronoun question then sits right next to a round that names the
    subject and one of its attributes, which is the co-reference pattern
    the model is meant to exploit.
    """
    if need_subject:
        options = ["exists_pos", "color_of", "color_of", "color_of",
                   "size_of", "spatial", "count"]
    else:
        options = ["exists_pos", "color_of", "size_of", "spatial", "count",
                   "exists_neg", "count_color"]
    unique_ids = _unique_category_ids(scene)
    for _ in range(MAX_GEN_ATTEMPTS):
        template = _choice(rng, options)
        if template == "exists_pos":
            i = int(rng.integers(len(scene.objects)))
            obj = scene.objects[i]
            form = ResolvedQuestion("exists", category=obj.category, color=obj.color)
            q = ["is", "there", "a", obj.color, obj.category]
            # (category, color) pairs are unique by construction
            return DialogRound(q, "yes", form, (i,), False)
        if template == "exists_neg":
            present = {(o.category, o.color) for o in scene.objects}
            cat, color = _choice(rng, CATEGORIES), _choice(rng, COLORS)
            if (cat, color) in present:
                continue
            form = ResolvedQuestion("exists", category=cat, color=color)
            return DialogRound(["is", "there", "a", color, cat], "no", form, (), False)
        if template in ("color_of", "size_of"):
            if not unique_ids:
                continue
            i = _choice(rng, unique_ids)
            obj = scene.objects[i]
            kind = template
            form = ResolvedQuestion(kind, subject_ids=(i,))
            word = "color" if kind == "color_of" else "size"
            q = ["what", word, "is", "the", obj.category]
            return DialogRound(q, oracle_answer(scene, form), form, (i,), False)
        if template == "spatial":
            if len(unique_ids) < 2:
                continue
            i, j = rng.choice(unique_ids, size=2, replace=False)
            i, j = int(i), int(j)
            rel = _choice(rng, RELATIONS)
            form = ResolvedQuestion("spatial", subject_ids=(i,), ref_id=j, relation=rel)
            a, b = scene.objects[i], scene.objects[j]
            rel_tokens = [rel, "of"] if rel in ("left", "right") else [rel]
            q = ["is", "the", a.category] + rel_tokens + ["the", b.category]
            return DialogRound(q, oracle_answer(scene, form), form, (i,), False)
        if template == "count":
            cat = _choice(rng, sorted({o.category for o in scene.objects}))
            ids = tuple(i for i, o in enumerate(scene.objects) if o.category == cat)
            if need_subject and len(ids) != 1:
                # plural subjects only chain into group questions; keep round
                # R-1 singular so the final round always has a pronoun form
                continue
            form = ResolvedQuestion("count", category=cat)
            q = ["how", "many", PLURALS[cat], "are", "there"]
            return DialogRound(q, oracle_answer(scene, form), form, ids, False)
        if template == "count_color":
            color = _choice(rng, COLORS)
            form = ResolvedQuestion("count", color=color)
            q = ["how", "many", color, "things", "are", "there"]
            return DialogRound(q, oracle_answer(scene, form), form, (), False)
    raise GenerationError("no establishing template fits this scene")


def _pronoun_round(scene: Scene, rng: np.random.Generator,
                   subject_ids: tuple[int, ...],
                   require_ambiguity: bool) -> DialogRound | None:
    """A pronoun round about the previous round's subject, or None if no
    template fits. ``require_ambiguity`` additionally demands that an
    unbound pronoun could reach at least two distinct answers.

    Color questions dominate the mix: they have the widest answer space,
    so resolving the referent through history matters most there. Same-
    attribute follow-ups are allowed ("what color is the dog" -> "what
    color is it"), putting the answer verbatim in the previous round.
    """
    subjects = [scene.objects[i] for i in subject_ids]
    pron = pronoun_for(subjects)
    if pron == "they":
        templates = ["color_of"]
    else:
        templates = ["color_of"] * 3 + ["size_of", "spatial"]
    order = list(rng.permutation(len(templates)))
    for idx in order:
        kind = templates[idx]
        if kind == "color_of":
            if len({o.color for o in subjects}) != 1:
                continue
            form = ResolvedQuestion("color_of", subject_ids=subject_ids)
            verb = "are" if pron == "they" else "is"
            q = ["what", "color", verb, pron]
        elif kind == "size_of":
            if len(subjects) != 1:
                continue
            form = ResolvedQuestion("size_of", subject_ids=subject_ids)
            q = ["what", "size", "is", pron]
        else:
            unique_ids = [i for i in _unique_category_ids(scene) if i not in subject_ids]
            if not unique_ids or len(subjects) != 1:
                continue
            j = _choice(rng, unique_ids)
            rel = _choice(rng, RELATIONS)
            form = ResolvedQuestion("spatial", subject_ids=subject_ids,
                                    ref_id=j, relation=rel)
            rel_tokens = [rel, "of"] if rel in ("left", "right") else [rel]
            q = ["is", pron] + rel_tokens + ["the", scene.objects[j].category]
        if require_ambiguity and len(binding_answers(scene, form, pron)) < 2:
            continue
        return DialogRound(q, oracle_answer(scene, form), form, subject_ids, True)
    return None


def build_candidates(answer: str, kind: str, n_candidates: int,
                     rng: np.random.Generator) -> tuple[list[str], int]:
    """Ground truth plus same-type distractors first, padded with other
    answer types; shuffled, with exactly one correct entry."""
    if not (2 <= n_candidates <= MAX_CANDIDATES):
        raise ValueError(f"candidate count must be in [2, {MAX_CANDIDATES}]")
    pool = [a for a in ANSWER_POOLS[kind] if a != answer]
    fillers = [a for t, p in ANSWER_POOLS.items() if t != kind for a in p]
    options = (pool + fillers)[: n_candidates - 1]
    candidates = [answer] + options
    perm = rng.permutation(len(candidates))
    shuffled = [candidates[int(i)] for i in perm]
    return shuffled, shuffled.index(answer)


def make_caption(scene: Scene) -> list[str]:
    a, b = scene.objects[0], scene.objects[1]
    return ["a", "picture", "with", "a", a.color, a.category,
            "and", "a", b.color, b.category]


def generate_dialog(scene: Scene, rng: np.random.Generator, rounds: int,
                    n_candidates: int, dialog_id: int = 0) -> DialogInstance:
    """Multi-round dialog whose final round is a pronoun question.

    Rounds chain subjects: a pronoun round keeps the previous subject, a
    fresh round re-establishes one. The final question is guaranteed to be
    ambiguous without history (at least two answers reachable over free
    pronoun bindings).
    """
    if not (2 <= rounds <= 10):
        raise ValueError(f"rounds must be in [2, 10], got {rounds}")
    for _ in range(MAX_GEN_ATTEMPTS):
        out: list[DialogRound] = [_establishing_round(scene, rng, need_subject=True)]
        for r in range(1, rounds - 1):
            last = out[-1]
            use_pronoun = bool(last.subject_ids) and rng.random() < 0.5
            nxt = None
            if use_pronoun:
                nxt = _pronoun_round(scene, rng, last.subject_ids,
                                     require_ambiguity=False)
            if nxt is None:
                need_subject = r == rounds - 2  # the final round needs a referent
                nxt = _establishing_round(scene, rng, need_subject=need_subject)
            out.append(nxt)
        last = out[-1]
        if not last.subject_ids:
            continue
        final = _pronoun_round(scene, rng, last.subject_ids, require_ambiguity=True)
        if final is None:
            continue
        out.append(final)
        candidates, gt = build_candidates(
            final.answer, answer_type(final.form), n_candidates, rng)
        return DialogInstance(dialog_id, scene, make_caption(scene), out,
                              candidates, gt)
    raise GenerationError(
        f"dialog {dialog_id}: no unambiguous pronoun chain found in "
        f"{MAX_GEN_ATTEMPTS} attempts")


# ---------------------------------------------------------------------------
# corpus manifest and files
# ---------------------------------------------------------------------------


@dataclass
class CorpusManifest:
    seed: int = 1
    splits: dict[str, int] = field(default_factory=lambda: {"train": 500, "val": 100, "test": 100})
    template_version: int = 1
    grid: int = 4
    n_objects: int = 6
    rounds: int = 4
    candidates: int = 10
    categories: list[str] = field(default_factory=lambda: list(CATEGORIES))
    colors: list[str] = field(default_factory=lambda: list(COLORS))
    sizes: list[str] = field(default_factory=lambda: list(SIZES))

    def __post_init__(self) -> None:
        if self.template_version != 1:
            raise ValueError(f"unsupported template version {self.template_version}")
        if (tuple(self.categories), tuple(self.colors), tuple(self.sizes)) != (
                CATEGORIES, COLORS, SIZES):
            raise ValueError("attribute vocabularies are fixed in template version 1")
        for name, count in self.splits.items():
            if name not in ("train", "val", "test") or count < 0:
                raise ValueError(f"bad split {name}={count}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_file(cls, path) -> "CorpusManifest":
        with open(path) as fh:
            return cls(**json.load(fh))


SPLIT_ORDER = ("train", "val", "test")


def generate_corpus(manifest: CorpusManifest) -> dict[str, list[DialogInstance]]:
    """Dialogs with globally unique ids, split sequentially train/val/test.

    Each dialog owns the rng stream seeded by (corpus seed, dialog id), so
    the corpus is reproducible dialog-by-dialog.
    """
    corpus: dict[str, list[DialogInstance]] = {}
    next_id = 0
    for split in SPLIT_ORDER:
        items = []
        for _ in range(manifest.splits.get(split, 0)):
            rng = np.random.default_rng([manifest.seed, next_id])
            scene = generate_scene(rng, manifest.n_objects, manifest.grid)
            items.append(generate_dialog(scene, rng, manifest.rounds,
                                         manifest.candidates, dialog_id=next_id))
            next_id += 1
        corpus[split] = items
    return corpus


def instance_to_dict(inst: DialogInstance) -> dict:
    return {
        "id": inst.dialog_id,
        "scene": {
            "grid": inst.scene.grid,
            "objects": [
                {"cat": o.category, "color": o.color, "size": o.size,
                 "cell": list(o.cell),
                 "feat": encode_object(o, inst.scene.grid).tolist()}
                for o in inst.scene.objects
            ],
        },
        "caption": inst.caption,
        "history": [[r.question, [r.answer]] for r in inst.history],
        "question": inst.current.question,
        "candidates": [[c] for c in inst.candidates],
        "gt": inst.gt,
        "meta": {
            "pronoun": inst.current.pronoun,
            "form": inst.current.form.to_dict(),
            "round_subjects": [list(r.subject_ids) for r in inst.rounds],
            "round_forms": [r.form.to_dict() for r in inst.rounds],
            "round_answers": [r.answer for r in inst.rounds],
        },
    }


def instance_from_dict(data: dict) -> DialogInstance:
    objects = [SceneObject(o["cat"], o["color"], o["size"], tuple(o["cell"]))
               for o in data["scene"]["objects"]]
    scene = Scene(objects, data["scene"]["grid"])
    meta = data["meta"]
    rounds = []
    n_hist = len(data["history"])
    for idx in range(n_hist + 1):
        if idx < n_hist:
            q, a = data["history"][idx]
            answer = a[0]
        else:
            q, answer = data["question"], data["candidates"][data["gt"]][0]
        rounds.append(DialogRound(
            question=list(q),
            answer=answer,
            form=ResolvedQuestion.from_dict(meta["round_forms"][idx]),
            subject_ids=tuple(meta["round_subjects"][idx]),
            pronoun=idx == n_hist and meta["pronoun"],
        ))
    return DialogInstance(data["id"], scene, list(data["caption"]), rounds,
                          [c[0] for c in data["candidates"]], data["gt"])


def save_corpus(corpus: dict[str, list[DialogInstance]], manifest: CorpusManifest,
                out_dir: str, force: bool = False) -> None:
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, f"{s}.jsonl") for s in SPLIT_ORDER]
    existing = [p for p in paths if os.path.exists(p)]
    if existing and not force:
        raise FileExistsError(f"refusing to overwrite {existing[0]} (pass force)")
    for split, path in zip(SPLIT_ORDER, paths):
        with open(path, "w") as fh:
            for inst in corpus.get(split, []):
                fh.write(json.dumps(instance_to_dict(inst),
                                    sort_keys=True, separators=(",", ":")) + "\n")
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        fh.write(manifest.to_json())


def load_split(corpus_dir: str, split: str) -> list[DialogInstance]:
    path = os.path.join(corpus_dir, f"{split}.jsonl")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no {split!r} split at {path}")
    with open(path) as fh:
        return [instance_from_dict(json.loads(line)) for line in fh if line.strip()]


def load_manifest(corpus_dir: str) -> CorpusManifest:
    return CorpusManifest.from_file(os.path.join(corpus_dir, "manifest.json"))


def token_sentences(inst: DialogInstance) -> Iterable[list[str]]:
    """Every token sequence in an instance (vocabulary building)."""
    yield inst.caption
    for r in inst.rounds:
        yield r.question
        yield [r.answer]
    for c in inst.candidates:
        yield [c]
