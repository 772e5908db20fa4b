"""Synthetic acoustic-scene world.

Generates ground-truth scenes over a small event vocabulary, renders them to
real-valued feature frames (the stand-in for audio), writes templated
reference captions, and exposes an oracle joint embedder for the audio and
text sides. The embedding space has one axis per event plus a null axis, so
retrieval geometry is exact: a caption naming exactly a scene's events lands
on the scene's own unit vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import FeatureSeq
from .errors import ConfigError, DataError, InputError
from .text import tokenize

# name, noun (the keyword), article, simple verb, progressive verb, plural
_EVENT_TABLE = [
    ("dog_barks", "dog", "a", "barks", "barking", False),
    ("rain_falls", "rain", "", "falls", "falling", False),
    ("car_passes", "car", "a", "passes", "passing", False),
    ("birds_chirp", "birds", "", "chirp", "chirping", True),
    ("door_creaks", "door", "a", "creaks", "creaking", False),
    ("wind_blows", "wind", "the", "blows", "blowing", False),
    ("people_talk", "people", "", "talk", "talking", True),
    ("bell_rings", "bell", "a", "rings", "ringing", False),
    ("engine_idles", "engine", "an", "idles", "idling", False),
    ("water_drips", "water", "", "drips", "dripping", False),
    ("thunder_rolls", "thunder", "", "rolls", "rolling", False),
    ("footsteps_tap", "footsteps", "", "tap", "tapping", True),
]

ADVERBS = ["loudly", "softly", "steadily", "faintly", "gently", "repeatedly", "briefly", "slowly"]
CONNECTIVES = ["while", "and", "as"]
TAILS = ["in the background", "in the distance"]

DEFAULT_DURATION_RANGE_S = (0.5, 40.0)
MAX_EVENTS_PER_SCENE = 4


@dataclass(frozen=True)
class EventDef:
    name: str
    noun: str
    article: str
    verb: str
    verb_prog: str
    plural: bool

    @property
    def keywords(self) -> frozenset[str]:
        return frozenset({self.noun})


@dataclass
class EventVocab:
    """Event inventory: names, orthonormal feature signatures, caption keywords."""

    events: list[EventDef]
    base_vectors: np.ndarray  # (n_events, d)
    seed: int

    def __post_init__(self):
        self.base_vectors = np.asarray(self.base_vectors, dtype=np.float64)
        n = len(self.events)
        if n == 0:
            raise ConfigError("vocab needs at least one event")
        if self.base_vectors.shape[0] != n:
            raise ConfigError("one base vector per event required")
        if self.base_vectors.shape[1] < n:
            raise ConfigError("feature dimension must be >= number of events")
        seen: set[str] = set()
        for ev in self.events:
            if ev.keywords & seen:
                raise ConfigError(f"keyword overlap at event {ev.name!r}")
            seen |= ev.keywords
        gram = self.base_vectors @ self.base_vectors.T
        if not np.allclose(gram, np.eye(n), atol=1e-8):
            raise ConfigError("base vectors must be orthonormal")

    @property
    def n_events(self) -> int:
        return len(self.events)

    @property
    def d(self) -> int:
        return self.base_vectors.shape[1]

    @property
    def embedding_dim(self) -> int:
        # one axis per event plus the null axis for keyword-free captions
        return len(self.events) + 1

    def keyword_to_event(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for i, ev in enumerate(self.events):
            for kw in ev.keywords:
                out[kw] = i
        return out


@dataclass
class Scene:
    """Ground truth for one clip: which events sound, and when."""

    events: list[tuple[int, int, int]]  # (event id, start frame, end frame)
    duration_s: float
    frame_rate_hz: float
    n_frames: int

    def __post_init__(self):
        if self.duration_s <= 0:
            raise DataError("duration_s must be > 0")
        if not 1 <= len(self.events) <= MAX_EVENTS_PER_SCENE:
            raise DataError("scene must contain 1..4 events")
        for eid, start, end in self.events:
            if not (0 <= start < end <= self.n_frames):
                raise DataError(f"bad span ({start}, {end}) for T={self.n_frames}")

    @property
    def event_ids(self) -> list[int]:
        return [eid for eid, _, _ in self.events]


@dataclass
class SeqEmbedding:
    """Unit-norm vector summarizing a whole clip or caption."""

    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-6:
            raise InputError(f"embedding norm {norm} != 1")


def cosine(a: SeqEmbedding, b: SeqEmbedding) -> float:
    if a.vector.shape != b.vector.shape:
        raise InputError("embedding dimension mismatch")
    return float(a.vector @ b.vector)


def build_default_vocab(n_events: int = 12, d: int = 16, seed: int = 0) -> EventVocab:
    """Orthonormal event signatures from a seeded QR factorization."""
    if not 1 <= n_events <= len(_EVENT_TABLE):
        raise ConfigError(f"n_events must be in 1..{len(_EVENT_TABLE)}")
    if d < n_events:
        raise ConfigError("d must be >= n_events for orthonormal signatures")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    base = q[:, :n_events].T.copy()
    events = [EventDef(*row) for row in _EVENT_TABLE[:n_events]]
    return EventVocab(events=events, base_vectors=base, seed=seed)


# ---------------------------------------------------------------------------
# scene sampling and rendering


def sample_scene(
    vocab: EventVocab,
    rng: np.random.Generator,
    duration_range_s: tuple[float, float] = DEFAULT_DURATION_RANGE_S,
    frame_rate_hz: float = 4.0,
) -> Scene:
    """Draw 1..4 distinct events with spans inside a random-length clip."""
    lo, hi = duration_range_s
    duration = float(rng.uniform(lo, hi))
    n_frames = max(2, int(round(duration * frame_rate_hz)))
    k = int(rng.integers(1, min(MAX_EVENTS_PER_SCENE, vocab.n_events) + 1))
    ids = rng.choice(vocab.n_events, size=k, replace=False)
    events = []
    for eid in ids:
        length = int(rng.integers(max(1, n_frames // 3), n_frames + 1))
        start = int(rng.integers(0, n_frames - length + 1))
        events.append((int(eid), start, start + length))
    events.sort(key=lambda t: (t[1], t[2], t[0]))
    return Scene(
        events=events,
        duration_s=duration,
        frame_rate_hz=frame_rate_hz,
        n_frames=n_frames,
    )


def render_frames(
    scene: Scene,
    vocab: EventVocab,
    noise_sigma: float,
    rng: np.random.Generator,
) -> FeatureSeq:
    """Frame t = sum of base vectors of events active at t, plus Gaussian noise."""
    frames = np.zeros((scene.n_frames, vocab.d), dtype=np.float64)
    for eid, start, end in scene.events:
        frames[start:end] += vocab.base_vectors[eid]
    if noise_sigma > 0:
        frames += rng.normal(0.0, noise_sigma, size=frames.shape)
    return FeatureSeq(frames=frames, frame_rate_hz=scene.frame_rate_hz)


def _event_phrase(ev: EventDef, rng: np.random.Generator) -> str:
    words = []
    if ev.article:
        words.append(ev.article)
    words.append(ev.noun)
    if rng.random() < 0.5:
        words.append("are" if ev.plural else "is")
        words.append(ev.verb_prog)
    else:
        words.append(ev.verb)
    if rng.random() < 0.3:
        words.append(str(rng.choice(ADVERBS)))
    return " ".join(words)


def render_caption(scene: Scene, vocab: EventVocab, rng: np.random.Generator) -> str:
    ids = list(scene.event_ids)
    if rng.random() < 0.5:
        rng.shuffle(ids)
    phrases = [_event_phrase(vocab.events[eid], rng) for eid in ids]
    parts = [phrases[0]]
    for phrase in phrases[1:]:
        parts.append(str(rng.choice(CONNECTIVES)))
        parts.append(phrase)
    if rng.random() < 0.25:
        parts.append(str(rng.choice(TAILS)))
    return " ".join(parts)


def render_captions(
    scene: Scene, vocab: EventVocab, n_refs: int, rng: np.random.Generator
) -> list[str]:
    """n_refs templated captions, each naming exactly the scene's events."""
    if n_refs < 1:
        raise InputError("n_refs must be >= 1")
    return [render_caption(scene, vocab, rng) for _ in range(n_refs)]


def caption_word_list(vocab: EventVocab) -> list[str]:
    """Every word the template grammar can emit, sorted."""
    words = {"a", "an", "the", "is", "are"}
    words.update(CONNECTIVES)
    words.update(ADVERBS)
    for tail in TAILS:
        words.update(tail.split())
    for ev in vocab.events:
        words.update({ev.noun, ev.verb, ev.verb_prog})
        if ev.article:
            words.add(ev.article)
    return sorted(words)


def content_word_list(vocab: EventVocab) -> frozenset[str]:
    """Words that carry scene content: event nouns and verbs."""
    out: set[str] = set()
    for ev in vocab.events:
        out |= {ev.noun, ev.verb, ev.verb_prog}
    return frozenset(out)


def default_content_words() -> frozenset[str]:
    """Content words of the full event table, without building signatures."""
    out: set[str] = set()
    for _, noun, _, verb, verb_prog, _ in _EVENT_TABLE:
        out |= {noun, verb, verb_prog}
    return frozenset(out)


# ---------------------------------------------------------------------------
# oracle joint embedder (CLAP stand-in)


def extract_event_ids(caption: str, vocab: EventVocab) -> list[int]:
    """Event ids whose keyword appears in the caption, ascending."""
    tokens = set(tokenize(caption))
    kw = vocab.keyword_to_event()
    return sorted({kw[t] for t in tokens if t in kw})


def _indicator_embedding(ids, vocab: EventVocab) -> SeqEmbedding:
    vec = np.zeros(vocab.embedding_dim, dtype=np.float64)
    vec[list(ids)] = 1.0
    return SeqEmbedding(vector=vec / np.linalg.norm(vec))


def oracle_audio_embedding(scene: Scene, vocab: EventVocab) -> SeqEmbedding:
    """Normalized indicator of the scene's event set."""
    ids = sorted(set(scene.event_ids))
    if not ids:
        raise InputError("scene has no events")
    return _indicator_embedding(ids, vocab)


def oracle_text_embedding(caption: str, vocab: EventVocab) -> SeqEmbedding:
    """Normalized indicator of the events a caption mentions.

    A caption hitting no keyword maps to the null axis, orthogonal to every
    event axis, so it scores cosine 0 against any scene.
    """
    ids = extract_event_ids(caption, vocab)
    if not ids:
        vec = np.zeros(vocab.embedding_dim, dtype=np.float64)
        vec[-1] = 1.0
        return SeqEmbedding(vector=vec)
    return _indicator_embedding(ids, vocab)


# ---------------------------------------------------------------------------
# serialization


def vocab_to_json(vocab: EventVocab) -> dict:
    return {
        "format": "capforge-world-v1",
        "seed": vocab.seed,
        "d": vocab.d,
        "events": [
            {
                "name": ev.name,
                "noun": ev.noun,
                "article": ev.article,
                "verb": ev.verb,
                "verb_prog": ev.verb_prog,
                "plural": ev.plural,
                "base_vector": vocab.base_vectors[i].tolist(),
            }
            for i, ev in enumerate(vocab.events)
        ],
    }


def vocab_from_json(obj: dict) -> EventVocab:
    try:
        events = [
            EventDef(
                name=e["name"],
                noun=e["noun"],
                article=e["article"],
                verb=e["verb"],
                verb_prog=e["verb_prog"],
                plural=e["plural"],
            )
            for e in obj["events"]
        ]
        base = np.asarray([e["base_vector"] for e in obj["events"]], dtype=np.float64)
        return EventVocab(events=events, base_vectors=base, seed=obj.get("seed", 0))
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed world blob: {exc}") from exc


def scene_to_row(item_id: str, scene: Scene) -> dict:
    return {
        "id": item_id,
        "duration_s": scene.duration_s,
        "frame_rate_hz": scene.frame_rate_hz,
        "n_frames": scene.n_frames,
        "events": [[eid, start, end] for eid, start, end in scene.events],
    }


def scene_from_row(row: dict) -> tuple[str, Scene]:
    try:
        scene = Scene(
            events=[(int(e), int(s), int(t)) for e, s, t in row["events"]],
            duration_s=float(row["duration_s"]),
            frame_rate_hz=float(row["frame_rate_hz"]),
            n_frames=int(row["n_frames"]),
        )
        return str(row["id"]), scene
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed scene row: {exc}") from exc
