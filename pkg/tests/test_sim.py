import json

import numpy as np
import pytest

import oracles
from mfcca import sim
from mfcca.errors import ContractError
from mfcca.sot import Vocabulary
from mfcca.tensor import Rng


# --- delays ---------------------------------------------------------------------

def test_delays_hand_table():
    # mic k at angle 45k deg on the unit circle, source (2, 0):
    # distance sqrt(5 - 4 cos(45k deg)) = 1, 1.4736, 2.2361, 2.7979, 3, ...
    # times 4 and rounded: 4, 6, 9, 11, 12, 11, 9, 6; minus 4
    g = sim.ArrayGeometry.circular(8, 1.0)
    assert sim.channel_delays(g, (2.0, 0.0), 4.0).tolist() == [0, 2, 5, 7, 8, 7, 5, 2]


def test_center_source_gives_zero_delays():
    g = sim.ArrayGeometry.circular(8, 0.05)
    assert not sim.channel_delays(g, (0.0, 0.0), 20.0).any()


def test_source_on_mic_ray():
    g = sim.ArrayGeometry.circular(6, 1.0)
    d = sim.channel_delays(g, (5.0, 0.0), 10.0)
    assert d[0] == 0 and d[3] == d.max() and d.max() > 0


def test_negative_exaggeration_rejected():
    with pytest.raises(ContractError):
        sim.channel_delays(sim.ArrayGeometry.circular(), (1.0, 0.0), -1.0)


def test_geometry_validation():
    with pytest.raises(ContractError):
        sim.ArrayGeometry(np.zeros((2, 2)))


# --- rendering ------------------------------------------------------------------------

def _templates(D=6, fpt=2):
    return sim.token_templates(["a", "b", "c", "d"], fpt, D, Rng(0))


def test_zero_exaggeration_gives_identical_channels():
    tpl = _templates()
    ev = sim.SourceEvent("s", (1.0, 2.0), 1, ("a", "b"))
    u = sim.render_utterance([ev], sim.ArrayGeometry.circular(), 0.0, Rng(1), 8, 6, tpl, 0.0)
    assert all(np.array_equal(u.features[0], u.features[c]) for c in range(8))


def test_render_is_additive():
    tpl = _templates()
    g = sim.ArrayGeometry.circular(4, 0.05)
    a = sim.SourceEvent("A", (1.0, 0.0), 0, ("a",))
    b = sim.SourceEvent("B", (0.0, 2.0), 6, ("b", "c"))
    args = (g, 0.0, Rng(0), 14, 6, tpl, 20.0)
    both = sim.render_utterance([a, b], *args).features
    sep = sim.render_utterance([a], *args).features + sim.render_utterance([b], *args).features
    assert np.array_equal(both, sep)


def test_render_overflow_rejected():
    tpl = _templates()
    ev = sim.SourceEvent("s", (1.0, 0.0), 5, ("a", "b", "c"))
    with pytest.raises(ContractError):
        sim.render_utterance([ev], sim.ArrayGeometry.circular(), 0.0, Rng(0), 8, 6, tpl, 20.0)


def test_render_deterministic():
    tpl = _templates()
    ev = [sim.SourceEvent("s", (1.0, 0.5), 0, ("a", "d"))]
    args = (ev, sim.ArrayGeometry.circular(), 0.1, None, 10, 6, tpl, 20.0)
    a = sim.render_utterance(*args[:3], Rng(3), *args[4:]).features
    b = sim.render_utterance(*args[:3], Rng(3), *args[4:]).features
    assert a.tobytes() == b.tobytes()


def test_recorded_delays_recoverable_by_cross_correlation():
    cfg = sim.CorpusConfig(n_train=20, n_eval=1, speakers=(1, 1), sigma=0.0, distinct_tokens=True)

    def shifted(a, s):  # a delayed by s frames, zero fill, no wrap
        out = np.zeros_like(a)
        if s >= 0:
            out[s:] = a[:len(a) - s]
        else:
            out[:s] = a[-s:]
        return out

    for u in sim.generate(cfg)["train"]:
        x = u.features
        d = u.delays[0]
        T = x.shape[1]
        for c in range(1, x.shape[0]):
            best = max(range(-T + 1, T), key=lambda s: float((shifted(x[0], s) * x[c]).sum()))
            assert best == d[c] - d[0]


def test_overlap_ratio_matches_frame_counter():
    r = Rng(8)
    for _ in range(200):
        spans = [(int(s), int(s) + int(n)) for s, n in zip(r.integers(0, 20, 3), r.integers(1, 10, 3))]
        assert sim.overlap_ratio(spans) == pytest.approx(oracles.overlap_by_frames(spans), abs=1e-15)


# --- corpus -----------------------------------------------------------------------------

def test_default_corpus(tmp_path):
    cfg = sim.CorpusConfig()
    sim.make_corpus(tmp_path, cfg)
    recs = [json.loads(line) for line in (tmp_path / "train.jsonl").read_text().splitlines()]
    assert len(recs) == 64
    assert len((tmp_path / "eval.jsonl").read_text().splitlines()) == 16
    for rec in recs:
        spans = [(s["start_frame"], s["end_frame"]) for s in rec["speakers"]]
        assert len(spans) == 2
        assert 0.15 <= oracles.overlap_by_frames(spans) <= 0.40
        assert set(rec) >= {"id", "C", "T", "D", "features", "speakers", "delays"}
    vocab = Vocabulary.load(tmp_path / "vocab.txt")
    assert len(vocab) == 24
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["splits"]["train"]) == 64 and manifest["config"]["seed"] == 0


def test_feature_encoding_is_bit_exact(small_corpus):
    out, _ = small_corpus
    line = (out / "train.jsonl").read_text().splitlines()[0]
    rec = json.loads(line)
    feats = np.frombuffer(bytes.fromhex(rec["features"]), dtype="<f8").reshape(rec["C"], rec["T"], rec["D"])
    u = sim.read_split(out / "train.jsonl")[0]
    assert feats.tobytes() == u.features.tobytes()
    assert sim.encode_features(u.features) == rec["features"]


def test_single_speaker_corpus_has_no_sc(tmp_path):
    cfg = sim.CorpusConfig(n_train=5, n_eval=2, speakers=(1, 1))
    vocab = cfg.vocabulary()
    from mfcca.sot import serialize_sot
    for u in sim.generate(cfg)["train"]:
        assert vocab.sc_id not in serialize_sot(u.sot, vocab)


def test_corpus_byte_identical_across_runs(tmp_path):
    cfg = sim.CorpusConfig(n_train=6, n_eval=2, seed=5)
    sim.make_corpus(tmp_path / "a", cfg)
    sim.make_corpus(tmp_path / "b", cfg, jobs=2)
    for f in ("train.jsonl", "eval.jsonl", "vocab.txt", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_infeasible_overlap_rejected():
    cfg = sim.CorpusConfig(n_train=2, n_eval=1, overlap=(0.95, 0.99), max_tries=20)
    with pytest.raises(ContractError):
        sim.generate(cfg)


def test_distinct_tokens_option():
    cfg = sim.CorpusConfig(n_train=30, n_eval=1, speakers=(1, 3), overlap=(0.0, 0.9),
                           distinct_tokens=True)
    for u in sim.generate(cfg)["train"]:
        toks = [t for s in u.sot.speakers for t in s.tokens]
        assert len(toks) == len(set(toks))


def test_corpus_config_validation():
    with pytest.raises(ContractError):
        sim.CorpusConfig(n_train=0)
    with pytest.raises(ContractError):
        sim.CorpusConfig(speakers=(3, 2))
