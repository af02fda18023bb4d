"""Synthetic multi-channel feature corpora from a planar microphone array.

Delays are deliberately exaggerated: a real inter-microphone delay is well
under one 10 ms frame, so distances are scaled by ``exaggeration`` frames per
meter and rounded to whole frames. This keeps the delay structure visible
to frame-level attention and makes delay recovery exactly testable.

Each token owns a fixed template of ``frames_per_token`` unit-norm feature
rows. A source writes its templates back to back starting at its start
frame plus its per-channel delay; overlapping sources add.
"""

import concurrent.futures
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .sot import SotUtterance, SpeakerSegment, Vocabulary
from .tensor import Rng

FRAME_SHIFT = 0.01  # seconds per frame


@dataclass
class ArrayGeometry:
    positions: np.ndarray
    sound_speed: float = 343.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        if len(self.positions) < 1:
            raise ContractError("array needs at least one microphone")
        if len({tuple(p) for p in self.positions.tolist()}) != len(self.positions):
            raise ContractError("microphone positions must be distinct")

    @property
    def channels(self):
        return len(self.positions)

    @classmethod
    def circular(cls, n=8, radius=0.05):
        """``n`` microphones evenly spaced on a circle, mic 0 on the +x axis."""
        ang = 2 * np.pi * np.arange(n) / n
        return cls(np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1))


def channel_delays(geometry, source, exaggeration):
    """Integer frame delay per microphone, nearest microphone at 0.

    delay_c = floor(|source - mic_c| * exaggeration + 1/2) - min over c.
    """
    if exaggeration < 0:
        raise ContractError(f"exaggeration must be >= 0, got {exaggeration}")
    dist = np.linalg.norm(geometry.positions - np.asarray(source, dtype=np.float64), axis=1)
    raw = np.floor(dist * exaggeration + 0.5).astype(np.int64)
    return raw - raw.min()


@dataclass
class SourceEvent:
    speaker: str
    position: tuple
    start_frame: int
    tokens: tuple

    def __post_init__(self):
        if self.start_frame < 0:
            raise ContractError(f"start frame must be >= 0, got {self.start_frame}")


@dataclass
class SimUtterance:
    id: str
    features: np.ndarray
    sot: SotUtterance
    delays: np.ndarray
    spans: list = field(default_factory=list)


def token_templates(vocab_tokens, frames_per_token, dim, rng):
    """Unit-norm random feature rows: token -> [frames_per_token, dim]."""
    out = {}
    for tok in vocab_tokens:
        t = rng.standard_normal((frames_per_token, dim))
        out[tok] = t / np.linalg.norm(t, axis=1, keepdims=True)
    return out


def event_length(event, templates):
    return sum(len(templates[t]) for t in event.tokens)


def render_utterance(events, geometry, sigma, rng, T, D, templates, exaggeration, utt_id="utt"):
    C = geometry.channels
    feats = np.zeros((C, T, D))
    delays = np.zeros((len(events), C), dtype=np.int64)
    spans = []
    for k, ev in enumerate(events):
        d = channel_delays(geometry, ev.position, exaggeration)
        delays[k] = d
        block = np.concatenate([templates[t] for t in ev.tokens], axis=0)
        if block.shape[1] != D:
            raise ContractError(f"template width {block.shape[1]} does not match D={D}")
        n = len(block)
        if ev.start_frame + n + d.max() > T:
            raise ContractError(
                f"event of {ev.speaker} ({n} frames from {ev.start_frame}, max delay {d.max()}) "
                f"does not fit in T={T}")
        for c in range(C):
            s = ev.start_frame + d[c]
            feats[c, s:s + n] += block
        spans.append((ev.start_frame, ev.start_frame + n))
    if sigma > 0:
        feats = feats + rng.normal(0.0, sigma, size=feats.shape)
    sot = SotUtterance(
        [SpeakerSegment(ev.speaker, ev.start_frame * FRAME_SHIFT, tuple(ev.tokens)) for ev in events],
        features=feats,
    )
    return SimUtterance(utt_id, feats, sot, delays, spans)


def overlap_ratio(spans):
    """Frames covered by two or more spans over frames covered by any span."""
    points = sorted([(s, 1) for s, _ in spans] + [(e, -1) for _, e in spans])
    active = covered = overlapped = 0
    prev = None
    for pos, step in points:
        if prev is not None and pos > prev:
            if active >= 1:
                covered += pos - prev
            if active >= 2:
                overlapped += pos - prev
        active += step
        prev = pos
    return overlapped / covered if covered else 0.0


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------

@dataclass
class CorpusConfig:
    n_train: int = 64
    n_eval: int = 16
    speakers: tuple = (2, 2)
    overlap: tuple = (0.15, 0.40)
    vocab_size: int = 20
    seed: int = 0
    channels: int = 8
    feature_dim: int = 16
    tokens_per_speaker: tuple = (2, 4)
    frames_per_token: int = 2
    sigma: float = 0.05
    radius: float = 0.05
    exaggeration: float = 20.0
    source_distance: tuple = (1.0, 3.0)
    max_tries: int = 500
    distinct_tokens: bool = False  # no token repeats within an utterance

    def __post_init__(self):
        if self.n_train < 1 or self.n_eval < 1:
            raise ContractError("corpus needs at least one train and one eval utterance")
        lo, hi = self.speakers
        if not 1 <= lo <= hi:
            raise ContractError(f"invalid speaker range {self.speakers}")
        if not 0.0 <= self.overlap[0] <= self.overlap[1] < 1.0:
            raise ContractError(f"invalid overlap range {self.overlap}")
        if self.vocab_size < 1 or self.tokens_per_speaker[0] < 1:
            raise ContractError("vocabulary and token counts must be positive")

    def geometry(self):
        return ArrayGeometry.circular(self.channels, self.radius)

    def max_delay(self):
        return int(math.floor(2 * self.radius * self.exaggeration + 0.5)) + 1

    def frames(self):
        longest = self.speakers[1] * self.tokens_per_speaker[1] * self.frames_per_token
        return 1 + longest + self.max_delay() + 1

    def token_names(self):
        return [f"w{i:02d}" for i in range(self.vocab_size)]

    def vocabulary(self):
        return Vocabulary(self.token_names())

    def echo(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _sample_events(cfg, rng, templates):
    lo, hi = cfg.speakers
    n = int(rng.integers(lo, hi + 1))
    names = cfg.token_names()
    token_lists = []
    pool = list(rng.permutation(len(names))) if cfg.distinct_tokens else None
    for _ in range(n):
        k = int(rng.integers(cfg.tokens_per_speaker[0], cfg.tokens_per_speaker[1] + 1))
        if pool is None:
            picks = rng.integers(0, len(names), size=k)
        else:
            if k > len(pool):
                raise ContractError("vocabulary too small for distinct tokens")
            picks, pool = pool[:k], pool[k:]
        token_lists.append(tuple(names[i] for i in picks))
    lengths = [sum(len(templates[t]) for t in toks) for toks in token_lists]
    positions = []
    for _ in range(n):
        r = rng.uniform(*cfg.source_distance)
        a = rng.uniform(0, 2 * np.pi)
        positions.append((float(r * np.cos(a)), float(r * np.sin(a))))
    lead = 1
    starts = [lead]
    if n > 1:
        for _ in range(cfg.max_tries):
            starts = [lead]
            end = lead + lengths[0]
            for L in lengths[1:]:
                s = int(rng.integers(lead, end + 1))
                starts.append(s)
                end = max(end, s + L)
            ratio = overlap_ratio([(s, s + L) for s, L in zip(starts, lengths)])
            if cfg.overlap[0] <= ratio <= cfg.overlap[1]:
                break
        else:
            raise ContractError(
                f"could not reach overlap in {cfg.overlap} for speech lengths {lengths}")
    return [
        SourceEvent(f"spk{i}", positions[i], starts[i], token_lists[i]) for i in range(n)
    ]


def _render_one(args):
    cfg, split_idx, idx, templates = args
    rng = Rng(cfg.seed, split_idx, idx)
    events = _sample_events(cfg, rng, templates)
    name = ("train", "eval")[split_idx]
    return render_utterance(
        events, cfg.geometry(), cfg.sigma, rng, cfg.frames(), cfg.feature_dim,
        templates, cfg.exaggeration, utt_id=f"{name}-{idx:05d}")


def corpus_templates(cfg):
    return token_templates(cfg.token_names(), cfg.frames_per_token, cfg.feature_dim, Rng(cfg.seed, 7919))


def generate(cfg, jobs=1):
    """Render all utterances; returns {"train": [...], "eval": [...]} in index order."""
    templates = corpus_templates(cfg)
    tasks = [(cfg, 0, i, templates) for i in range(cfg.n_train)]
    tasks += [(cfg, 1, i, templates) for i in range(cfg.n_eval)]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(jobs) as pool:
            utts = list(pool.map(_render_one, tasks))
    else:
        utts = [_render_one(t) for t in tasks]
    return {"train": utts[:cfg.n_train], "eval": utts[cfg.n_train:]}


def encode_features(x):
    return np.ascontiguousarray(x, dtype="<f8").tobytes().hex()


def decode_features(text, shape):
    return np.frombuffer(bytes.fromhex(text), dtype="<f8").reshape(shape).astype(np.float64)


def utterance_record(u):
    C, T, D = u.features.shape
    speakers = []
    for seg, (s, e) in zip(u.sot.speakers, u.spans):
        speakers.append({"id": seg.speaker, "start_frame": int(s), "end_frame": int(e),
                         "tokens": list(seg.tokens)})
    return {
        "id": u.id, "C": C, "T": T, "D": D,
        "features": encode_features(u.features),
        "speakers": speakers,
        "delays": u.delays.tolist(),
    }


def record_utterance(rec):
    feats = decode_features(rec["features"], (rec["C"], rec["T"], rec["D"]))
    segs = [SpeakerSegment(s["id"], s["start_frame"] * FRAME_SHIFT, tuple(s["tokens"]))
            for s in rec["speakers"]]
    spans = [(s["start_frame"], s["end_frame"]) for s in rec["speakers"]]
    return SimUtterance(rec["id"], feats, SotUtterance(segs, features=feats),
                        np.asarray(rec["delays"], dtype=np.int64), spans)


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_split(path, utts):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u in utts:
            fh.write(_dumps(utterance_record(u)) + "\n")


def read_split(path):
    with open(path, encoding="utf-8") as fh:
        return [record_utterance(json.loads(line)) for line in fh if line.strip()]


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def make_corpus(out_dir, cfg, jobs=1):
    """Write train.jsonl, eval.jsonl, vocab.txt and manifest.json to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = generate(cfg, jobs)
    for name, utts in splits.items():
        write_split(out / f"{name}.jsonl", utts)
    cfg.vocabulary().save(out / "vocab.txt")
    manifest = {
        "splits": {name: [u.id for u in utts] for name, utts in splits.items()},
        "files": {"train": "train.jsonl", "eval": "eval.jsonl", "vocab": "vocab.txt"},
        "config": cfg.echo(),
        "frame_shift": FRAME_SHIFT,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n",
                                       encoding="utf-8")
    return splits
