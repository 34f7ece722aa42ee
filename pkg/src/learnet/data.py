"""Character datasets, synthetic glyphs and tracking sequences.

On disk a character dataset is a tree ``root/<split>/<alphabet>/<character>/<n>.pgm``
of 8-bit binary PGM files. A tracking sequence is a directory of numbered
PGM frames plus ``boxes.csv`` (``frame,cx,cy,w,h``).
"""
from __future__ import annotations

import csv
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from learnet.training import Triplet, TripletBatch

IMAGE_SIZE = 28
SPLITS = ("background", "evaluation")


class PGMError(ValueError):
    """Malformed or unsupported PGM file."""


class DatasetError(ValueError):
    """Dataset directory does not follow the expected layout."""


# ====================================================================== PGM

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary (P5) PGM as a ``uint8`` array of shape ``(H, W)``."""
    path = Path(path)
    raw = path.read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise PGMError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise PGMError(f"{path}: not a binary PGM (magic {tokens[0][:8]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMError(f"{path}: malformed PGM header") from None
    if width < 1 or height < 1:
        raise PGMError(f"{path}: invalid size {width}x{height}")
    if not 0 < maxval < 256:
        raise PGMError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    if pos >= len(raw) or raw[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise PGMError(f"{path}: truncated PGM header")
    pos += 1
    need = width * height
    if len(raw) - pos < need:
        raise PGMError(f"{path}: truncated pixel data ({len(raw) - pos} of {need} bytes)")
    img = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(height, width)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * (255.0 / maxval)).clip(0, 255).astype(np.uint8)
    return img.copy()


def to_uint8(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image: np.ndarray):
    """Write a ``(H, W)`` image; floats are taken to lie in [0, 1]."""
    img = to_uint8(np.asarray(image))
    if img.ndim != 2:
        raise ValueError(f"PGM images are 2-D, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


# ====================================================================== resize

def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row ``j`` holds the input weights of output sample ``j`` along one axis."""
    mat = np.zeros((n_out, n_in))
    if n_in >= 2 * n_out:
        # area averaging: overlap of each input cell with the output footprint
        scale = n_in / n_out
        for j in range(n_out):
            lo, hi = j * scale, (j + 1) * scale
            for i in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
                mat[j, i] = min(hi, i + 1) - max(lo, i)
        mat /= mat.sum(axis=1, keepdims=True)
    else:
        # bilinear with pixel-centre alignment, clamped at the borders
        scale = n_in / n_out
        for j in range(n_out):
            src = min(max((j + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
            i0 = int(math.floor(src))
            i1 = min(i0 + 1, n_in - 1)
            t = src - i0
            mat[j, i0] += 1.0 - t
            mat[j, i1] += t
    return mat


def resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample a ``(H, W)`` image. Reductions of 2x or more average areas;
    everything else is bilinear. Same-size input comes back as a copy."""
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be positive")
    image = np.asarray(image)
    h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    rows, cols = _resample_matrix(h, out_h), _resample_matrix(w, out_w)
    out = rows @ image.astype(np.float64) @ cols.T
    lo, hi = float(image.min()), float(image.max())
    return np.clip(out, lo, hi).astype(image.dtype if image.dtype.kind == "f" else np.float64)


# ====================================================================== character datasets

@dataclass
class Alphabet:
    name: str
    split: str
    characters: list            # list of (name, images (n, 28, 28) float32)

    @property
    def n_characters(self) -> int:
        return len(self.characters)


@dataclass
class CharacterDataset:
    alphabets: list = field(default_factory=list)

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [a for a in self.alphabets if a.split == name]

    def inventory(self) -> dict:
        out = {}
        for s in SPLITS:
            alphas = self.split(s)
            out[s] = {
                "alphabets": len(alphas),
                "characters": sum(a.n_characters for a in alphas),
                "images": sum(len(imgs) for a in alphas for _, imgs in a.characters),
            }
        return out

    def equals(self, other: "CharacterDataset") -> bool:
        if len(self.alphabets) != len(other.alphabets):
            return False
        for a, b in zip(self.alphabets, other.alphabets):
            if (a.name, a.split, len(a.characters)) != (b.name, b.split, len(b.characters)):
                return False
            for (na, ia), (nb, ib) in zip(a.characters, b.characters):
                if na != nb or ia.shape != ib.shape or ia.tobytes() != ib.tobytes():
                    return False
        return True


def load_pgm_dataset(root) -> CharacterDataset:
    """Load ``root/<split>/<alphabet>/<character>/*.pgm`` in sorted order,
    scaling to [0, 1] and resizing to 28x28."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    alphabets = []
    found_split = False
    for split in SPLITS:
        split_dir = root / split
        if not split_dir.is_dir():
            continue
        found_split = True
        for alpha_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            chars = []
            for char_dir in sorted(p for p in alpha_dir.iterdir() if p.is_dir()):
                files = sorted(char_dir.glob("*.pgm"))
                if len(files) < 2:
                    raise DatasetError(f"{char_dir}: needs at least 2 instances, found {len(files)}")
                imgs = []
                for f in files:
                    img = read_pgm(f).astype(np.float32) / np.float32(255.0)
                    if img.shape != (IMAGE_SIZE, IMAGE_SIZE):
                        img = resize(img, IMAGE_SIZE, IMAGE_SIZE).astype(np.float32)
                    imgs.append(img)
                chars.append((char_dir.name, np.stack(imgs)))
            if not chars:
                raise DatasetError(f"{alpha_dir}: alphabet without characters")
            alphabets.append(Alphabet(alpha_dir.name, split, chars))
    if not found_split:
        raise DatasetError(f"{root}: expected '{SPLITS[0]}' and/or '{SPLITS[1]}' subdirectories")
    return CharacterDataset(alphabets)


def export_dataset(dataset: CharacterDataset, root):
    root = Path(root)
    for alpha in dataset.alphabets:
        for cname, imgs in alpha.characters:
            d = root / alpha.split / alpha.name / cname
            d.mkdir(parents=True, exist_ok=True)
            for i, img in enumerate(imgs):
                write_pgm(d / f"{i:03d}.pgm", img)


# ---------------------------------------------------------------------- glyphs

_GRID = np.stack(np.meshgrid(np.arange(IMAGE_SIZE) + 0.5, np.arange(IMAGE_SIZE) + 0.5, indexing="xy"), -1)


def random_glyph(rng: np.random.Generator) -> list:
    """A character prototype: 1-3 polylines of 2-4 points inside the canvas."""
    strokes = []
    for _ in range(rng.integers(1, 4)):
        n = rng.integers(2, 5)
        strokes.append(rng.uniform(5.0, 23.0, size=(n, 2)))
    return strokes


def render_strokes(strokes, size: int = IMAGE_SIZE, width: float = 1.2) -> np.ndarray:
    """Anti-aliased rendering of polylines (ink 1 on background 0)."""
    if size == IMAGE_SIZE:
        grid = _GRID
    else:
        grid = np.stack(np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="xy"), -1)
    pts = grid.reshape(-1, 2)
    best = np.full(len(pts), np.inf)
    for poly in strokes:
        a, b = poly[:-1], poly[1:]
        ab = b - a
        denom = np.maximum((ab * ab).sum(1), 1e-12)
        t = np.clip(((pts[:, None, :] - a[None]) * ab[None]).sum(-1) / denom, 0.0, 1.0)
        closest = a[None] + t[..., None] * ab[None]
        d = np.sqrt(((pts[:, None, :] - closest) ** 2).sum(-1)).min(axis=1)
        best = np.minimum(best, d)
    return np.clip(width + 0.5 - best, 0.0, 1.0).reshape(size, size)


def jitter_strokes(strokes, rng: np.random.Generator, size: int = IMAGE_SIZE):
    """Random rotation (up to 15 degrees), scale in [0.9, 1.1] and shift (up to 2 px)
    about the canvas centre."""
    angle = np.deg2rad(rng.uniform(-15.0, 15.0))
    scale = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-2.0, 2.0, size=2)
    c, s = math.cos(angle), math.sin(angle)
    rot = scale * np.array([[c, -s], [s, c]])
    centre = np.array([size / 2.0, size / 2.0])
    return [(p - centre) @ rot.T + centre + shift for p in strokes]


def glyph_instance(strokes, rng: np.random.Generator, noise: float = 0.05) -> np.ndarray:
    img = render_strokes(jitter_strokes(strokes, rng))
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_glyph_dataset(rng: np.random.Generator, n_background: int = 30, n_eval: int = 20,
                      chars_per_alphabet: int = 12, instances_per_char: int = 20) -> CharacterDataset:
    """Alphabets of random stroke characters; instances are jittered, noisy renderings."""
    if min(n_background, n_eval, chars_per_alphabet) < 1:
        raise ValueError("alphabet and character counts must be >= 1")
    if instances_per_char < 2:
        raise ValueError("instances_per_char must be >= 2")
    alphabets = []
    for split, count in (("background", n_background), ("evaluation", n_eval)):
        for a in range(count):
            chars = []
            for c in range(chars_per_alphabet):
                proto = random_glyph(rng)
                imgs = np.stack([glyph_instance(proto, rng) for _ in range(instances_per_char)])
                chars.append((f"char{c:02d}", imgs))
            alphabets.append(Alphabet(f"{split[:2]}{a:02d}", split, chars))
    return CharacterDataset(alphabets)


def holdout_alphabets(alphabets: Sequence[Alphabet], fraction: float = 0.1):
    """Split off the last ``ceil(fraction * n)`` alphabets (at least one if there
    are two or more) for validation."""
    n = len(alphabets)
    k = 0 if n < 2 or fraction <= 0 else max(1, int(math.ceil(fraction * n)))
    return list(alphabets[:n - k]), list(alphabets[n - k:])


# ---------------------------------------------------------------------- triplets

def sample_triplet(alphabets: Sequence[Alphabet], rng: np.random.Generator,
                   positive_fraction: float = 0.5) -> Triplet:
    """Positive: two distinct instances of one character. Negative: instances
    of two different characters of the same alphabet."""
    usable = [a for a in alphabets if a.n_characters >= 2]
    if not usable:
        raise DatasetError("need an alphabet with at least two characters")
    positive = rng.random() < positive_fraction
    alpha = usable[rng.integers(len(usable))]
    if positive:
        while True:
            _, imgs = alpha.characters[rng.integers(alpha.n_characters)]
            if len(imgs) >= 2:
                break
            alpha = usable[rng.integers(len(usable))]
        i, j = rng.choice(len(imgs), size=2, replace=False)
        return Triplet(imgs[i][..., None], imgs[j][..., None], 1)
    ci, cj = rng.choice(alpha.n_characters, size=2, replace=False)
    zi = alpha.characters[ci][1]
    xj = alpha.characters[cj][1]
    return Triplet(zi[rng.integers(len(zi))][..., None], xj[rng.integers(len(xj))][..., None], -1)


class CharacterTriplets:
    """Triplet source over a list of alphabets."""

    def __init__(self, alphabets: Sequence[Alphabet], positive_fraction: float = 0.5):
        self.alphabets = list(alphabets)
        self.positive_fraction = positive_fraction

    def sample(self, rng: np.random.Generator, n: int) -> TripletBatch:
        return TripletBatch.stack([sample_triplet(self.alphabets, rng, self.positive_fraction)
                                   for _ in range(n)])


# ====================================================================== tracking

@dataclass
class SyntheticSequence:
    frames: np.ndarray      # (T, H, W) float32 in [0, 1]
    boxes: np.ndarray       # (T, 4) float64: cx, cy, w, h

    def __len__(self):
        return len(self.frames)


def _smooth_noise(rng, h, w, cell=8):
    coarse = rng.uniform(0.0, 1.0, size=(h // cell + 2, w // cell + 2))
    return resize(coarse, h + 2 * cell, w + 2 * cell)[cell:cell + h, cell:cell + w]


def gen_object_patch(rng: np.random.Generator, object_size: int) -> np.ndarray:
    """A bright glyph with texture on a dark square."""
    glyph = render_strokes([s * (object_size / IMAGE_SIZE) for s in random_glyph(rng)],
                           size=object_size, width=max(1.0, 1.2 * object_size / IMAGE_SIZE))
    texture = rng.uniform(0.7, 1.0, size=(object_size, object_size))
    return (0.1 + 0.9 * glyph * texture).astype(np.float32)


def gen_tracking_sequence(rng: np.random.Generator, length: int = 50, frame_size: int = 96,
                          object_size: int = 16, max_step: int = 3,
                          patch: Optional[np.ndarray] = None) -> SyntheticSequence:
    """A glyph patch moving by a smoothed random walk (integer steps of at most
    ``max_step`` px per axis) over a smooth noise background."""
    if object_size > frame_size:
        raise ValueError("object does not fit in the frame")
    if length < 1:
        raise ValueError("length must be >= 1")
    if patch is None:
        patch = gen_object_patch(rng, object_size)
    background = (0.25 + 0.35 * _smooth_noise(rng, frame_size, frame_size)).astype(np.float32)
    hi = frame_size - object_size
    pos = rng.integers(0, hi + 1, size=2).astype(np.int64)   # top-left (x, y)
    vel = np.zeros(2)
    frames = np.empty((length, frame_size, frame_size), dtype=np.float32)
    boxes = np.empty((length, 4))
    for t in range(length):
        if t > 0:
            vel = np.clip(0.8 * vel + rng.normal(0.0, 1.0, size=2), -max_step, max_step)
            step = np.clip(np.round(vel), -max_step, max_step).astype(np.int64)
            new = pos + step
            for k in range(2):
                if not 0 <= new[k] <= hi:
                    vel[k] = -vel[k]
                    new[k] = min(max(pos[k] - step[k], 0), hi)
            pos = new
        frame = background.copy()
        frame[pos[1]:pos[1] + object_size, pos[0]:pos[0] + object_size] = patch
        frames[t] = frame
        boxes[t] = (pos[0] + object_size / 2.0, pos[1] + object_size / 2.0, object_size, object_size)
    return SyntheticSequence(frames, boxes)


def crop(frame: np.ndarray, cx: float, cy: float, side: float, out_size: int) -> np.ndarray:
    """Square window of ``side`` px centred at ``(cx, cy)``, padded with the frame's
    mean value outside the frame and resampled to ``out_size``."""
    side_px = max(1, int(round(side)))
    x0 = int(round(cx - side_px / 2.0))
    y0 = int(round(cy - side_px / 2.0))
    h, w = frame.shape
    fill = frame.mean(dtype=np.float64).astype(frame.dtype)
    out = np.full((side_px, side_px), fill, dtype=frame.dtype)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + side_px, w), min(y0 + side_px, h)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = frame[sy0:sy1, sx0:sx1]
    return resize(out, out_size, out_size)


def object_side(box) -> float:
    return math.sqrt(box[2] * box[3])


def exemplar_crop(frame, box, size: int) -> np.ndarray:
    """Context crop twice the object's size."""
    return crop(frame, box[0], box[1], 2.0 * object_side(box), size)


def search_crop(frame, box, size: int, centre=None) -> np.ndarray:
    """Search crop four times the object's size, centred on ``centre`` (default the box)."""
    cx, cy = (box[0], box[1]) if centre is None else centre
    return crop(frame, cx, cy, 4.0 * object_side(box), size)


def tracking_label_map(map_size: int, label: int) -> np.ndarray:
    """``(map_size, map_size)`` labels: -1 everywhere, except the central 2x2
    block which is +1 for a positive pair."""
    if map_size < 2:
        raise ValueError("score map must be at least 2x2")
    labels = -np.ones((map_size, map_size))
    if label == 1:
        r0 = (map_size - 2) // 2
        labels[r0:r0 + 2, r0:r0 + 2] = 1.0
    return labels


def map_reference(map_size: int) -> float:
    """Score-map coordinate whose window is centred on the search crop's centre."""
    return (map_size - 1) / 2.0


def make_tracking_triplet(sequences: Sequence[SyntheticSequence], rng: np.random.Generator,
                          positive_fraction: float = 0.75, exemplar_size: int = 32,
                          search_size: int = 64, max_gap: int = 50) -> Triplet:
    """Exemplar from one frame; the candidate comes from a nearby frame of the
    same sequence (positive) or from another sequence (negative)."""
    positive = rng.random() < positive_fraction
    if positive:
        eligible = [s for s in sequences if len(s) >= 2]
        if not eligible:
            raise DatasetError("a positive pair needs a sequence with at least 2 frames")
    elif len(sequences) < 2:
        raise DatasetError("a negative pair needs at least two sequences")
    else:
        eligible = list(sequences)
    i = rng.integers(len(eligible))
    seq = eligible[i]
    a = rng.integers(len(seq))
    z = exemplar_crop(seq.frames[a], seq.boxes[a], exemplar_size)
    if positive:
        lo, hi = max(0, a - max_gap), min(len(seq) - 1, a + max_gap)
        b = a
        while b == a:
            b = rng.integers(lo, hi + 1)
        x = search_crop(seq.frames[b], seq.boxes[b], search_size)
    else:
        j = rng.integers(len(eligible) - 1)
        other = eligible[j + (j >= i)]
        b = rng.integers(len(other))
        x = search_crop(other.frames[b], other.boxes[b], search_size)
    return Triplet(z[..., None], x[..., None], 1 if positive else -1)


class TrackingTriplets:
    """Triplet source with dense label maps for convolutional scoring."""

    def __init__(self, sequences, map_size: int, positive_fraction: float = 0.75,
                 exemplar_size: int = 32, search_size: int = 64, max_gap: int = 50):
        self.sequences = list(sequences)
        self.map_size = map_size
        self.positive_fraction = positive_fraction
        self.exemplar_size, self.search_size, self.max_gap = exemplar_size, search_size, max_gap

    def sample(self, rng: np.random.Generator, n: int) -> TripletBatch:
        triplets = [make_tracking_triplet(self.sequences, rng, self.positive_fraction,
                                          self.exemplar_size, self.search_size, self.max_gap)
                    for _ in range(n)]
        maps = [tracking_label_map(self.map_size, t.label) for t in triplets]
        return TripletBatch.stack(triplets, maps)


def gen_tracking_sequences(rng: np.random.Generator, n: int, length: int = 50, frame_size: int = 96,
                           object_size: int = 16) -> list:
    return [gen_tracking_sequence(rng, length, frame_size, object_size) for _ in range(n)]


def save_sequence(seq: SyntheticSequence, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        write_pgm(directory / f"{t:04d}.pgm", frame)
    with open(directory / "boxes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "cx", "cy", "w", "h"])
        for t, box in enumerate(seq.boxes):
            w.writerow([t] + [repr(float(v)) for v in box])


def load_sequence(directory) -> SyntheticSequence:
    directory = Path(directory)
    box_file = directory / "boxes.csv"
    if not box_file.is_file():
        raise DatasetError(f"{directory}: missing boxes.csv")
    with open(box_file, newline="") as fh:
        rows = list(csv.DictReader(fh))
    frames = sorted(directory.glob("*.pgm"))
    if not frames or len(frames) != len(rows):
        raise DatasetError(f"{directory}: {len(frames)} frames but {len(rows)} boxes")
    try:
        boxes = np.array([[float(r[k]) for k in ("cx", "cy", "w", "h")] for r in rows])
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"{box_file}: malformed row ({exc})") from None
    imgs = np.stack([read_pgm(f).astype(np.float32) / np.float32(255.0) for f in frames])
    return SyntheticSequence(imgs, boxes)


def load_sequences(root) -> list:
    root = Path(root)
    if (root / "boxes.csv").is_file():
        return [load_sequence(root)]
    dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not dirs:
        raise DatasetError(f"{root}: no sequence directories")
    return [load_sequence(d) for d in dirs]
