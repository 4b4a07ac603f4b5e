"""Synthetic bitemporal scenes, caption vocabulary, and the .jsonl dataset format."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import ContractError, ParseError, SchemaError
from .model import BOS, EOS, PAD, UNK

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

SHAPES = ("square", "circle", "cross")
CHANGE_TYPES = ("appear", "disappear", "grow", "shrink", "none")
POSITIONS = (
    ("top left", "top", "top right"),
    ("left", "center", "right"),
    ("bottom left", "bottom", "bottom right"),
)

TEMPLATES = {
    "appear": (
        "a {size} {shape} appears at the {pos}",
        "a {size} {shape} has appeared at the {pos}",
        "there is a new {size} {shape} at the {pos}",
    ),
    "disappear": (
        "a {size} {shape} has disappeared",
        "the {size} {shape} at the {pos} has disappeared",
        "the {size} {shape} is gone",
    ),
    "grow": (
        "the {size} {shape} has grown larger",
        "the {size} {shape} at the {pos} has grown larger",
        "the {size} {shape} became bigger",
    ),
    "shrink": (
        "the {size} {shape} has shrunk",
        "the {size} {shape} has become smaller",
        "the {size} {shape} at the {pos} became smaller",
    ),
    "none": (
        "there is no change",
        "nothing has changed",
        "the scene is unchanged",
        "no change has occurred",
    ),
}


def derive_seed(seed: int, label: str) -> int:
    """Stable 63-bit sub-seed for (seed, purpose label)."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 32
    shapes: tuple[str, ...] = SHAPES
    size_classes: tuple[tuple[str, int, int], ...] = (("small", 3, 5), ("medium", 8, 12), ("large", 16, 24))
    change_types: tuple[str, ...] = CHANGE_TYPES
    noise: float = 0.02
    captions_per_sample: int = 5
    max_persistent: int = 3

    def __post_init__(self):
        bounds = [(lo, hi) for _, lo, hi in self.size_classes]
        for (lo, hi), (nlo, _) in zip(bounds, bounds[1:]):
            if not lo <= hi < nlo:
                raise ContractError("size classes must be ordered and disjoint")
        if bounds[-1][1] > self.image_size:
            raise ContractError("largest size class does not fit in the image")
        if not 1 <= self.captions_per_sample <= 5:
            raise ContractError("captions_per_sample must be 1..5")
        if not 0 <= self.noise <= 0.02:
            raise ContractError("noise amplitude must be in [0, 0.02]")
        unknown = set(self.change_types) - set(CHANGE_TYPES)
        if unknown or not self.change_types:
            raise ContractError(f"unknown change types {sorted(unknown)}")
        if set(self.shapes) - set(SHAPES) or not self.shapes:
            raise ContractError(f"shapes must be drawn from {SHAPES}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        for key in ("shapes", "change_types"):
            if key in d:
                d[key] = tuple(d[key])
        if "size_classes" in d:
            d["size_classes"] = tuple(tuple(x) for x in d["size_classes"])
        return cls(**d)


@dataclass
class BitemporalSample:
    id: str
    t1: np.ndarray
    t2: np.ndarray
    captions: list[str]
    change_record: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.t1.shape != self.t2.shape:
            raise SchemaError(f"sample {self.id}: image shapes {self.t1.shape} and {self.t2.shape} differ")
        if not self.captions:
            raise SchemaError(f"sample {self.id}: no captions")


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2) ** 2
    arm = max(1, size // 3)
    lo = (size - arm) // 2
    band = (np.arange(size) >= lo) & (np.arange(size) < lo + arm)
    return band[:, None] | band[None, :]


@dataclass
class _Obj:
    shape: str
    size: int
    y: int  # top-left corner
    x: int
    color: np.ndarray

    @property
    def center(self) -> tuple[float, float]:
        return self.y + (self.size - 1) / 2, self.x + (self.size - 1) / 2

    def box(self, margin: int = 1) -> tuple[int, int, int, int]:
        return self.y - margin, self.x - margin, self.y + self.size + margin, self.x + self.size + margin


def _overlaps(a: _Obj, b: _Obj) -> bool:
    ay0, ax0, ay1, ax1 = a.box()
    by0, bx0, by1, bx1 = b.box()
    return ay0 < by1 and by0 < ay1 and ax0 < bx1 and bx0 < ax1


def _draw(img: np.ndarray, obj: _Obj) -> None:
    mask = _shape_mask(obj.shape, obj.size)
    region = img[obj.y:obj.y + obj.size, obj.x:obj.x + obj.size]
    region[mask] = obj.color


def _position_word(obj: _Obj, image_size: int) -> str:
    cy, cx = obj.center
    row = min(2, int(cy * 3 / image_size))
    col = min(2, int(cx * 3 / image_size))
    return POSITIONS[row][col]


def _place(rng, shape, size, image_size, color, others, center=None, tries=200) -> _Obj | None:
    for _ in range(tries):
        if center is None:
            y, x = (int(v) for v in rng.integers(0, image_size - size + 1, size=2))
        else:
            y = int(np.clip(round(center[0] - (size - 1) / 2), 0, image_size - size))
            x = int(np.clip(round(center[1] - (size - 1) / 2), 0, image_size - size))
        obj = _Obj(shape, size, y, x, color)
        if not any(_overlaps(obj, o) for o in others):
            return obj
        if center is not None:
            return None
    return None


def generate_sample(seed: int, cfg: SceneConfig = SceneConfig(), sample_id: str | None = None) -> BitemporalSample:
    """Render one bitemporal pair with a single change and its template captions.

    Deterministic in (seed, cfg).
    """
    rng = np.random.default_rng(seed)
    n = cfg.image_size
    classes = cfg.size_classes
    change = cfg.change_types[int(rng.integers(len(cfg.change_types)))]
    shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
    if change == "grow":
        ci = int(rng.integers(max(1, len(classes) - 1)))
    elif change == "shrink":
        ci = 1 + int(rng.integers(max(1, len(classes) - 1))) if len(classes) > 1 else 0
    else:
        ci = int(rng.integers(len(classes)))
    size_name, lo, hi = classes[ci]
    size = int(rng.integers(lo, hi + 1))

    background = rng.uniform(0.1, 0.4, size=3)
    base = np.broadcast_to(background, (n, n, 3)).astype(np.float64)
    target_color = rng.uniform(0.65, 1.0, size=3)

    target = None
    after = None
    if change != "none":
        # place the target first at its largest extent so both epochs fit
        if change in ("grow", "shrink"):
            other_ci = ci + 1 if change == "grow" else ci - 1
            _, olo, ohi = classes[other_ci]
            other_size = int(rng.integers(olo, ohi + 1))
            big = max(size, other_size)
            anchor = _place(rng, shape, big, n, target_color, [])
            target = _place(rng, shape, size, n, target_color, [], center=anchor.center)
            after = _place(rng, shape, other_size, n, target_color, [], center=anchor.center)
        else:
            target = _place(rng, shape, size, n, target_color, [])

    persistent: list[_Obj] = []
    blockers = [o for o in (target, after) if o is not None]
    for _ in range(int(rng.integers(cfg.max_persistent + 1))):
        pshape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        _, plo, phi = classes[int(rng.integers(len(classes)))]
        obj = _place(rng, pshape, int(rng.integers(plo, phi + 1)), n, rng.uniform(0.65, 1.0, size=3), blockers + persistent, tries=20)
        if obj is not None:
            persistent.append(obj)

    img1 = base.copy()
    for o in persistent:
        _draw(img1, o)
    img2 = img1.copy()
    if change == "appear":
        _draw(img2, target)
    elif change == "disappear":
        _draw(img1, target)
    elif change in ("grow", "shrink"):
        _draw(img1, target)
        _draw(img2, after)

    amp = cfg.noise
    t1 = np.clip(img1 + rng.uniform(-amp, amp, size=img1.shape), 0, 1).astype(np.float32)
    if change == "none":
        t2 = t1.copy()
    else:
        t2 = np.clip(img2 + rng.uniform(-amp, amp, size=img2.shape), 0, 1).astype(np.float32)

    record = {"type": change, "persistent": len(persistent)}
    fill = {}
    if target is not None:
        pos = _position_word(target, n)
        record.update(shape=shape, size_class=size_name, size_px=size, position=pos)
        changed = [target] + ([after] if after is not None else [])
        y0 = min(o.y for o in changed)
        x0 = min(o.x for o in changed)
        y1 = max(o.y + o.size for o in changed)
        x1 = max(o.x + o.size for o in changed)
        record["bbox"] = [y0, x0, y1, x1]
        fill = {"size": size_name, "shape": shape, "pos": pos}
    templates = TEMPLATES[change]
    picks = rng.integers(len(templates), size=cfg.captions_per_sample)
    captions = [templates[int(i)].format(**fill) for i in picks]
    return BitemporalSample(sample_id or f"seed{seed}", t1, t2, captions, record)


def generate_dataset(seed: int, count: int, cfg: SceneConfig = SceneConfig()) -> list[BitemporalSample]:
    return [generate_sample(derive_seed(seed, f"sample:{i}"), cfg, f"{i:06d}") for i in range(count)]


def grammar_vocabulary() -> set[str]:
    """Every word the caption templates can emit."""
    words = set()
    fills = {
        "size": ["small", "medium", "large"],
        "shape": list(SHAPES),
        "pos": [p for row in POSITIONS for p in row],
    }
    for templates in TEMPLATES.values():
        for t in templates:
            for token in t.split():
                if token.startswith("{"):
                    for option in fills[token.strip("{}")]:
                        words.update(option.split())
                else:
                    words.add(token)
    return words


# ---------------------------------------------------------------------------
# vocabulary


def normalize(text: str) -> list[str]:
    """Lowercase, whitespace-split, strip surrounding punctuation."""
    words = (w.strip(".,;:!?\"'") for w in text.lower().split())
    return [w for w in words if w]


class Vocabulary:
    """Word <-> id map; ids 0..3 are PAD, BOS, EOS, UNK."""

    def __init__(self, words: Iterable[str]):
        self.itos: list[str] = list(SPECIALS)
        for w in words:
            if w in SPECIALS or w in self.itos:
                raise ContractError(f"duplicate or reserved word {w!r}")
            self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    @property
    def words(self) -> list[str]:
        return self.itos[len(SPECIALS):]


def build_vocab(corpus: Iterable[str]) -> Vocabulary:
    counts = Counter()
    n = 0
    for caption in corpus:
        counts.update(normalize(caption))
        n += 1
    if n == 0:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocabulary(ordered)


def encode_caption(text: str, vocab: Vocabulary, max_len: int) -> list[int]:
    """BOS + word ids + EOS, truncated to ``max_len`` with EOS kept last."""
    if max_len < 2:
        raise ContractError("max_len must be at least 2")
    ids = [BOS] + [vocab.stoi.get(w, UNK) for w in normalize(text)] + [EOS]
    if len(ids) > max_len:
        ids = ids[: max_len - 1] + [EOS]
    return ids


def decode_caption(ids: Iterable[int], vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        words.append(vocab.itos[i] if 0 <= i < len(vocab) else SPECIALS[UNK])
    return " ".join(words)


# ---------------------------------------------------------------------------
# persistence

_FIELDS = ("id", "shape", "t1", "t2", "captions", "change_record")


def _format_floats(a: np.ndarray) -> str:
    # 9 significant digits round-trip any float32 exactly
    return "[" + ",".join(f"{v:.9g}" for v in a.reshape(-1).tolist()) + "]"


def sample_to_line(s: BitemporalSample) -> str:
    head = json.dumps(
        {"id": s.id, "shape": list(s.t1.shape), "captions": s.captions, "change_record": s.change_record},
        sort_keys=True,
        separators=(",", ":"),
    )
    t1 = _format_floats(s.t1.astype(np.float32))
    t2 = _format_floats(s.t2.astype(np.float32))
    return head[:-1] + f',"t1":{t1},"t2":{t2}' + "}"


def sample_from_record(rec: dict, line: int | None = None) -> BitemporalSample:
    missing = [f for f in _FIELDS if f not in rec]
    if missing:
        where = f"line {line}: " if line is not None else ""
        raise SchemaError(f"{where}record missing field(s) {missing}")
    shape = tuple(int(v) for v in rec["shape"])
    if len(shape) != 3 or shape[2] != 3:
        raise SchemaError(f"line {line}: shape must be [H, W, 3], got {list(shape)}")
    try:
        t1 = np.asarray(rec["t1"], dtype=np.float32).reshape(shape)
        t2 = np.asarray(rec["t2"], dtype=np.float32).reshape(shape)
    except ValueError as exc:
        raise SchemaError(f"line {line}: pixel array does not match shape {list(shape)}") from exc
    return BitemporalSample(str(rec["id"]), t1, t2, list(rec["captions"]), dict(rec["change_record"]))


def write_dataset(samples: Iterable[BitemporalSample], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(sample_to_line(s))
            fh.write("\n")


def iter_dataset(path: str | os.PathLike) -> Iterator[BitemporalSample]:
    """Stream samples one line at a time."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed record ({exc.msg})", lineno) from exc
            if not isinstance(rec, dict):
                raise ParseError("record is not an object", lineno)
            yield sample_from_record(rec, lineno)


def read_dataset(path: str | os.PathLike) -> list[BitemporalSample]:
    return list(iter_dataset(path))


def census(samples: Iterable[BitemporalSample]) -> dict[str, int]:
    counts = Counter(s.change_record.get("type", "unknown") for s in samples)
    return {t: counts.get(t, 0) for t in CHANGE_TYPES}
