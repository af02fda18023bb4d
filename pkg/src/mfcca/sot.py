"""Serialized multi-speaker targets, vocabulary files and character error rate."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ContractError, VocabularyError

PAD, SOS, EOS, SC = "<pad>", "<sos>", "<eos>", "<sc>"
SPECIALS = (PAD, SOS, EOS, SC)


class Vocabulary:
    """Dense token <-> id map with the four specials at ids 0..3."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        if len(set(tokens)) != len(tokens):
            raise ContractError("vocabulary tokens must be unique")
        self.tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._ids

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    pad_id = property(lambda self: 0)
    sos_id = property(lambda self: 1)
    eos_id = property(lambda self: 2)
    sc_id = property(lambda self: 3)

    def id_of(self, token):
        try:
            return self._ids[token]
        except KeyError:
            raise VocabularyError(f"token {token!r} is not in the vocabulary") from None

    def encode(self, tokens):
        return [self.id_of(t) for t in tokens]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path):
        tokens = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
        if tuple(tokens[:4]) != SPECIALS:
            raise ContractError(f"vocabulary file must start with {', '.join(SPECIALS)}")
        return cls(tokens)


@dataclass(frozen=True)
class SpeakerSegment:
    speaker: str
    start: float
    tokens: tuple

    def __post_init__(self):
        if not self.tokens:
            raise ContractError(f"speaker {self.speaker} has an empty token sequence")
        if self.start != self.start or self.start in (float("inf"), float("-inf")):
            raise ContractError(f"speaker {self.speaker} has a non-finite start time")


@dataclass
class SotUtterance:
    speakers: list
    features: object = None
    meta: dict = field(default_factory=dict)

    def ordered(self):
        """Speakers by start time, ties broken by ascending speaker id."""
        return sorted(self.speakers, key=lambda s: (s.start, s.speaker))


def serialize_sot(utt, vocab, wrap=True):
    """Token ids of all speakers joined by <sc>, in start-time order."""
    ids = [vocab.sos_id] if wrap else []
    for i, seg in enumerate(utt.ordered()):
        if i:
            ids.append(vocab.sc_id)
        ids.extend(vocab.encode(seg.tokens))
    if wrap:
        ids.append(vocab.eos_id)
    return ids


def split_speakers(ids, sc_id):
    parts, cur = [], []
    for t in ids:
        if t == sc_id:
            parts.append(cur)
            cur = []
        else:
            cur.append(t)
    parts.append(cur)
    return parts


def _as_ids(*seqs):
    # the edit-distance kernels work on integers; map arbitrary hashable tokens
    if all(isinstance(t, (int, np.integer)) for s in seqs for t in s):
        return seqs
    table = {}
    return tuple([table.setdefault(t, len(table)) for t in s] for s in seqs)


def error_counts(ref, hyp, sc_id=None, keep_sc=False, per_speaker=False):
    """(edit errors, reference length) for one utterance.

    By default <sc> is removed from both sides before alignment. With
    ``per_speaker`` the sequences are split at <sc> and segment i of the
    hypothesis is scored against segment i of the reference; unmatched
    segments count in full.
    """
    ref, hyp = list(ref), list(hyp)
    if per_speaker and sc_id is not None:
        rs, hs = split_speakers(ref, sc_id), split_speakers(hyp, sc_id)
        n = max(len(rs), len(hs))
        rs += [[]] * (n - len(rs))
        hs += [[]] * (n - len(hs))
        errors = sum(_kernels.edit_distance(*_as_ids(r, h)) for r, h in zip(rs, hs))
        length = sum(len(r) for r in rs)
    else:
        if sc_id is not None and not keep_sc:
            ref = [t for t in ref if t != sc_id]
            hyp = [t for t in hyp if t != sc_id]
        errors = _kernels.edit_distance(*_as_ids(ref, hyp))
        length = len(ref)
    if length == 0:
        raise ContractError("character error rate needs a non-empty reference")
    return errors, length


def cer(ref, hyp, sc_id=None, keep_sc=False, per_speaker=False):
    """(substitutions + insertions + deletions) / len(ref)."""
    errors, length = error_counts(ref, hyp, sc_id, keep_sc, per_speaker)
    return errors / length


def corpus_cer(pairs, sc_id=None, keep_sc=False, per_speaker=False):
    """Total errors over total reference length for (ref, hyp) pairs."""
    errors = length = 0
    for ref, hyp in pairs:
        e, n = error_counts(ref, hyp, sc_id, keep_sc, per_speaker)
        errors += e
        length += n
    if length == 0:
        raise ContractError("character error rate needs a non-empty reference")
    return errors / length
