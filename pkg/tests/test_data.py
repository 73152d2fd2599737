import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from skillrank.data import (
    ClipFormatError,
    FeatureClip,
    SyntheticSpec,
    generate_synthetic,
    generate_video,
    load_clips,
    load_pairs,
    pair_label,
    read_clip,
    read_ground_truth,
    sample_segments,
    segment_bounds,
    write_clip,
    write_dataset,
)
from skillrank.pairs import PairLabel, PairSet
from skillrank.ranking import ranking_accuracy

import oracles


# -- segment sampling --------------------------------------------------------

def test_segments_t100_n25():
    assert sample_segments(100, 25, "test") == list(range(3, 100, 4))


def test_segments_t_equals_n():
    assert sample_segments(9, 9, "test") == list(range(9))


def test_segments_short_clip_borrows():
    idx = sample_segments(5, 8, "test")
    assert len(idx) == 8 and idx == sorted(idx) and max(idx) < 5
    assert idx == oracles.segment_last_frames(5, 8)
    assert sample_segments(1, 4, "train", seed=0) == [0, 0, 0, 0]


@given(st.integers(1, 300), st.integers(1, 40), st.integers(0, 2**31))
def test_segments_properties(T, N, seed):
    bounds = segment_bounds(T, N)
    assert bounds[0][0] == 0 and bounds[-1][1] == T
    assert all(a[1] == b[0] for a, b in zip(bounds, bounds[1:]))
    assert sample_segments(T, N, "test") == oracles.segment_last_frames(T, N)
    tr = sample_segments(T, N, "train", seed)
    assert tr == sample_segments(T, N, "train", seed)
    for i, (lo, hi) in zip(tr, bounds):
        assert lo <= i < hi if hi > lo else i == max(lo - 1, 0)


def test_segments_reject_bad_arguments():
    with pytest.raises(ValueError):
        sample_segments(0, 4)
    with pytest.raises(ValueError):
        sample_segments(4, 4, "middle")


# -- clip files --------------------------------------------------------------

def make_clip(T=8, channels=(16, 16), hw=(7, 7), seed=0):
    rng = np.random.default_rng(seed)
    return FeatureClip("c", channels, rng.normal(size=(T, sum(channels), *hw)))


def test_clip_round_trip(tmp_path):
    clip = make_clip()
    write_clip(clip, tmp_path / "c.fclp")
    back = read_clip(tmp_path / "c.fclp")
    assert back.video_id == "c" and back.stream_channels == (16, 16)
    assert np.array_equal(back.data, clip.data.astype(np.float32))


def test_clip_header_arithmetic(tmp_path):
    write_clip(make_clip(), tmp_path / "c.fclp")
    buf = (tmp_path / "c.fclp").read_bytes()
    header = 4 + 4 * 7
    assert buf[:4] == b"FCLP"
    assert struct.unpack_from("<7I", buf, 4) == (1, 8, 2, 16, 16, 7, 7)
    assert len(buf) - header == 4 * 8 * 32 * 49


def test_clip_payload_order(tmp_path):
    data = np.arange(2 * 3 * 2 * 2, dtype=np.float32).reshape(2, 3, 2, 2)
    write_clip(FeatureClip("o", (1, 2), data), tmp_path / "o.fclp")
    buf = (tmp_path / "o.fclp").read_bytes()
    values = struct.unpack_from("<24f", buf, 4 + 4 * 7)
    assert list(values) == list(range(24))


def test_clip_truncated_reports_lengths(tmp_path):
    write_clip(make_clip(), tmp_path / "c.fclp")
    p = tmp_path / "t.fclp"
    full = (tmp_path / "c.fclp").read_bytes()
    p.write_bytes(full[:-5])
    with pytest.raises(ClipFormatError, match=f"expected {len(full)}.*got {len(full) - 5}"):
        read_clip(p)
    p.write_bytes(full[:10])
    with pytest.raises(ClipFormatError, match="byte 8"):
        read_clip(p)


def test_clip_bad_magic_and_version(tmp_path):
    write_clip(make_clip(T=1), tmp_path / "c.fclp")
    full = bytearray((tmp_path / "c.fclp").read_bytes())
    bad = tmp_path / "b.fclp"
    bad.write_bytes(b"XXXX" + full[4:])
    with pytest.raises(ClipFormatError, match="magic.*byte 0"):
        read_clip(bad)
    full[4:8] = struct.pack("<I", 7)
    bad.write_bytes(bytes(full))
    with pytest.raises(ClipFormatError, match="version 7 at byte 4"):
        read_clip(bad)


def test_feature_clip_validates_shape():
    with pytest.raises(ValueError):
        FeatureClip("x", (2, 2), np.zeros((3, 5, 2, 2)))
    with pytest.raises(ValueError):
        FeatureClip("x", (2,), np.zeros((0, 2, 2, 2)))


def test_load_clips_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope"):
        load_clips(tmp_path, ["nope"])


# -- pairs -------------------------------------------------------------------

def test_pair_antisymmetry_canonical():
    assert PairLabel("a", "b", 1).canonical() == PairLabel("b", "a", -1).canonical()
    assert PairLabel("b", "a", 0).canonical() == PairLabel("a", "b", 0)


def test_load_pairs_canonicalizes_and_counts_ties(tmp_path):
    p = tmp_path / "pairs.txt"
    p.write_text("# comment\na,b,1\nc,a,-1\n\nb,c,0\n")
    ps = load_pairs(p)
    assert ps.pairs == [PairLabel("a", "b", 1), PairLabel("a", "c", 1)]
    assert ps.ties == 1


def test_load_pairs_reversed_duplicate_is_identical_record(tmp_path):
    one, two = tmp_path / "1.txt", tmp_path / "2.txt"
    one.write_text("a,b,1\n")
    two.write_text("b,a,-1\n")
    assert load_pairs(one).pairs == load_pairs(two).pairs


@pytest.mark.parametrize("text,match", [
    ("a,b,1\nb,a,1\n", "line 2: contradictory"),
    ("a,b,1\nb,a,-1\n", "line 2: duplicate"),
    ("a,b\n", "line 1"),
    ("a,b,2\n", "line 1"),
    ("a,a,1\n", "line 1"),
])
def test_load_pairs_rejects(tmp_path, text, match):
    p = tmp_path / "p.txt"
    p.write_text(text)
    with pytest.raises(ValueError, match=match):
        load_pairs(p)


def test_pair_set_bounds():
    ids = [f"v{i}" for i in range(6)]
    full = PairSet([PairLabel(a, b, 1) for i, a in enumerate(ids) for b in ids[i + 1:]])
    assert len(full) == 6 * 5 // 2
    with pytest.raises(ValueError):
        PairSet([PairLabel("a", "b", 1), PairLabel("b", "a", -1).canonical()])


# -- synthetic generator -----------------------------------------------------

def patch_score(data, spec):
    """Mean of the signal channels over each frame's planted patch."""
    sig = spec.signal_slice
    return {v: float(np.mean([c.data[t, sig][:, m] for t, m in enumerate(data.mask(v))]))
            for v, c in data.clips.items()}


def test_noiseless_patch_mean_equals_scaled_skill():
    spec = SyntheticSpec(videos=4, noise=0.0, gain=5.0, seed=1)
    data = generate_synthetic(spec)
    for v, clip in data.clips.items():
        m = data.mask(v)
        vals = np.stack([clip.data[t, spec.signal_slice][:, m[t]] for t in range(len(m))])
        np.testing.assert_allclose(vals, np.float32(data.skills[v] * 5.0), rtol=0, atol=0)


def test_masks_cover_p_squared_cells_in_bounds():
    spec = SyntheticSpec(videos=6, patch=3, seed=2)
    data = generate_synthetic(spec)
    for v in data.clips:
        m = data.mask(v)
        assert m.shape == (data.clips[v].timesteps, 7, 7)
        assert (m.sum(axis=(1, 2)) == 9).all()
        steps = np.abs(np.diff(data.origins[v], axis=0))
        assert steps.max(initial=0) <= 1
        assert (data.origins[v] >= 0).all() and (data.origins[v] <= 4).all()


def test_labels_follow_threshold_rule():
    data = generate_synthetic(SyntheticSpec(videos=30, delta=0.2, seed=4))
    for lab in data.labels:
        d = data.skills[lab.id_a] - data.skills[lab.id_b]
        assert lab.label == (0 if abs(d) <= 0.2 else int(np.sign(d)))
    assert pair_label(0.5, 0.45, 0.1) == 0 and pair_label(0.9, 0.3, 0.1) == 1
    assert pair_label(0.3, 0.9, 0.1) == -1 and pair_label(0.3, 0.3, 0.1) == 0


def test_skill_oracle_is_perfect_on_kept_pairs():
    data = generate_synthetic(SyntheticSpec(videos=20, seed=5))
    assert ranking_accuracy(data.pairs, data.skills) == 1.0
    assert data.pairs.ties == sum(lab.label == 0 for lab in data.labels)


def test_signal_free_control_is_chance():
    base = dict(videos=200, t_min=4, t_max=6, stream_channels=(4, 4), seed=6)
    with_signal = generate_synthetic(SyntheticSpec(**base))
    assert ranking_accuracy(with_signal.pairs, patch_score(with_signal, with_signal.spec)) > 0.9
    control = generate_synthetic(SyntheticSpec(**base, gain=0.0))
    acc = ranking_accuracy(control.pairs, patch_score(control, control.spec))
    # a rank statistic over 200 videos has standard deviation near 0.025
    assert abs(acc - 0.5) < 0.1


def test_generation_is_order_independent():
    spec = SyntheticSpec(videos=5, seed=7)
    data = generate_synthetic(spec)
    clip, skill, origins = generate_video(spec, 3)
    assert np.array_equal(clip.data, data.clips["v003"].data)
    assert skill == data.skills["v003"] and np.array_equal(origins, data.origins["v003"])


def test_signal_stream_flag_moves_signal():
    spec = SyntheticSpec(videos=2, noise=0.0, gain=3.0, signal_stream=0, seed=8)
    data = generate_synthetic(spec)
    assert spec.signal_slice == slice(0, 2)
    clip, m = data.clips["v000"], data.mask("v000")
    np.testing.assert_array_equal(clip.data[0, 0][m[0]], np.float32(3.0 * data.skills["v000"]))


@pytest.mark.parametrize("kw", [dict(patch=8), dict(delta=0.0), dict(videos=1),
                                dict(signal_channels=17)])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        SyntheticSpec(**kw)


def test_dataset_files_round_trip(tmp_path):
    data = generate_synthetic(SyntheticSpec(videos=3, t_min=2, t_max=3, seed=9))
    write_dataset(data, tmp_path)
    clips = load_clips(tmp_path / "clips")
    assert sorted(clips) == ["v000", "v001", "v002"]
    assert all(np.array_equal(clips[v].data, data.clips[v].data) for v in clips)
    skills, origins = read_ground_truth(tmp_path / "ground_truth.jsonl")
    assert skills == data.skills
    assert all(np.array_equal(origins[v], data.origins[v]) for v in origins)
    assert load_pairs(tmp_path / "pairs.txt").pairs == data.pairs.pairs
