"""Triplet corpora: a synthetic generator with a known gloss-to-text grammar,
SLTF feature files, JSONL manifests and feature-level frame-rate augmentation."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CorpusError, SLTError

SLTF_MAGIC = b"SLTF"
SLTF_VERSION = 1
_HEADER = struct.Struct("<4sIII")

_WORDS = [
    "WETTER", "REGEN", "SONNE", "WIND", "SCHNEE", "NEBEL", "WOLKE", "GEWITTER",
    "NORD", "SUED", "WEST", "OST", "MORGEN", "HEUTE", "ABEND", "NACHT",
    "WARM", "KALT", "STARK", "SCHWACH", "MEHR", "WENIG", "FREUNDLICH", "FROST",
    "TEMPERATUR", "GRAD", "LAND", "KUESTE", "BERG", "TAL",
]
FUNCTION_WORD = "und"


class CorpusIOError(SLTError, OSError):
    pass


@dataclass
class Triplet:
    id: str
    features: np.ndarray
    gloss: list[str]
    text: str

    def __post_init__(self):
        if not self.gloss:
            raise CorpusError(f"sample {self.id}: gloss sequence is empty")
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise CorpusError(f"sample {self.id}: features must be (T, D)")

    def __eq__(self, other):
        return (
            isinstance(other, Triplet)
            and self.id == other.id
            and self.gloss == other.gloss
            and self.text == other.text
            and np.array_equal(self.features, other.features)
        )


@dataclass
class SyntheticSpec:
    num_glosses: int = 20
    frames_per_gloss: int = 8
    d_in: int = 64
    noise: float = 0.1
    min_len: int = 2
    max_len: int = 6
    lang: str = "de_DE"
    seed: int = 0

    def validate(self):
        if self.num_glosses < 2:
            raise CorpusError("need at least 2 glosses")
        if self.frames_per_gloss < 4 or self.frames_per_gloss % 4:
            raise CorpusError("frames_per_gloss must be a positive multiple of 4")
        if not 1 <= self.min_len <= self.max_len:
            raise CorpusError("need 1 <= min_len <= max_len")
        if self.noise < 0:
            raise CorpusError("noise must be non-negative")

    def to_dict(self):
        return asdict(self)


def gloss_labels(k: int) -> list[str]:
    return [_WORDS[i] if i < len(_WORDS) else f"G{i:03d}" for i in range(k)]


def grammar(gloss: Sequence[str]) -> str:
    """Swap each adjacent pair, lowercase, and join pairs with a function word.

    ``A B C D E`` becomes ``b a und d c und e``.
    """
    words = [g.lower() for g in gloss]
    chunks = []
    for i in range(0, len(words), 2):
        chunks.append(" ".join(reversed(words[i : i + 2])))
    return f" {FUNCTION_WORD} ".join(chunks)


def invert_grammar(text: str) -> list[str]:
    glosses = []
    for chunk in text.split(f" {FUNCTION_WORD} "):
        glosses.extend(w.upper() for w in reversed(chunk.split()))
    return glosses


def prototypes(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 1])
    p = rng.standard_normal((spec.num_glosses, spec.d_in))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def generate_corpus(spec: SyntheticSpec, n_train: int, n_dev: int, n_test: int):
    """(train, dev, test) triplet lists; gloss sequences never repeat across or within splits.

    Adjacent glosses always differ, since equal neighbours would be visually
    indistinguishable from one long sign.
    """
    spec.validate()
    if min(n_train, n_dev, n_test) < 1:
        raise CorpusError("every split needs at least one sample")
    k = spec.num_glosses
    capacity = sum(k * (k - 1) ** (n - 1) for n in range(spec.min_len, spec.max_len + 1))
    if n_train + n_dev + n_test > capacity:
        raise CorpusError(f"only {capacity} distinct gloss sequences exist for these generator settings")
    labels = gloss_labels(k)
    protos = prototypes(spec)
    rng = np.random.default_rng([spec.seed, 2])
    seen: set[tuple[int, ...]] = set()
    splits = []
    for name, n in (("train", n_train), ("dev", n_dev), ("test", n_test)):
        samples = []
        while len(samples) < n:
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            seq = [int(rng.integers(k))]
            while len(seq) < length:
                nxt = int(rng.integers(k - 1))
                seq.append(nxt + (nxt >= seq[-1]))
            key = tuple(seq)
            if key in seen:
                continue
            seen.add(key)
            frames = np.repeat(protos[seq], spec.frames_per_gloss, axis=0)
            frames = frames + spec.noise * rng.standard_normal(frames.shape)
            gloss = [labels[i] for i in seq]
            samples.append(
                Triplet(
                    id=f"{name}_{len(samples):05d}",
                    # stored as float32 on disk, so keep exactly representable values
                    features=frames.astype(np.float32).astype(np.float64),
                    gloss=gloss,
                    text=grammar(gloss),
                )
            )
        splits.append(samples)
    return tuple(splits)


def write_sltf(path, features: np.ndarray):
    features = np.asarray(features)
    if features.ndim != 2:
        raise CorpusError("features must be (T, D)")
    t, d = features.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(SLTF_MAGIC, SLTF_VERSION, t, d))
        f.write(features.astype("<f4").tobytes())


def read_sltf(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorpusError(
            f"{path}: truncated header, expected {_HEADER.size} bytes, got {len(data)}"
        )
    magic, version, t, d = _HEADER.unpack_from(data)
    if magic != SLTF_MAGIC:
        raise CorpusError(f"{path}: not an SLTF file")
    if version != SLTF_VERSION:
        raise CorpusError(f"{path}: unsupported SLTF version {version}")
    expected = _HEADER.size + 4 * t * d
    if len(data) != expected:
        raise CorpusError(f"{path}: expected {expected} bytes, got {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(t, d)
    return arr.astype(np.float64)


def write_corpus(triplets: Sequence[Triplet], out_dir, split: str) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / f"{split}.jsonl"
    with open(manifest, "w", encoding="utf-8") as f:
        for s in triplets:
            rel = f"features/{s.id}.sltf"
            write_sltf(out_dir / rel, s.features)
            row = {"id": s.id, "features": rel, "gloss": " ".join(s.gloss), "text": s.text}
            f.write(json.dumps(row, ensure_ascii=False) + "\n")
    return manifest


def load_corpus(path) -> list[Triplet]:
    """Parse a JSONL manifest; feature paths resolve relative to its directory."""
    path = Path(path)
    if not path.is_file():
        raise CorpusIOError(f"manifest not found: {path}")
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            sid, rel, gloss, text = row["id"], row["features"], row["gloss"], row["text"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise CorpusError(f"{path}:{lineno}: malformed manifest line ({e})") from None
        feat_path = path.parent / rel
        if not feat_path.is_file():
            raise CorpusIOError(f"sample {sid}: feature file not found: {feat_path}")
        try:
            feats = read_sltf(feat_path)
        except CorpusError as e:
            raise CorpusError(f"sample {sid}: {e}") from None
        out.append(Triplet(id=sid, features=feats, gloss=gloss.split(), text=text))
    return out


def load_splits(data_dir, splits=("train", "dev", "test")) -> dict[str, list[Triplet]]:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise CorpusIOError(f"data directory not found: {data_dir}")
    return {s: load_corpus(data_dir / f"{s}.jsonl") for s in splits}


def frame_rate_augment(features: np.ndarray, rate: float) -> np.ndarray:
    """Linearly resample the time axis to round(T * rate) frames (at least 4)."""
    if not 0.5 <= rate <= 1.5:
        raise ValueError(f"frame-rate factor must lie in [0.5, 1.5], got {rate}")
    features = np.asarray(features, dtype=np.float64)
    t = features.shape[0]
    new_t = max(4, int(np.floor(t * rate + 0.5)))
    if new_t == t:
        return features.copy()
    pos = np.linspace(0.0, t - 1, new_t)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, t - 1)
    w = (pos - lo)[:, None]
    return features[lo] + w * (features[hi] - features[lo])


def random_frame_rate(features: np.ndarray, rng: np.random.Generator, low=0.5, high=1.5):
    return frame_rate_augment(features, float(rng.uniform(low, high)))
