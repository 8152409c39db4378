"""Generator ground truth against brute-force rasterization, event semantics,
and exact on-disk round trips."""

import math

import numpy as np
import pytest

from emaseg.rng import CounterRng
from emaseg.synth import (DeformationInterval, EllipseTrack, OcclusionEvent,
                          SceneFamily, SceneSpec, SequenceFormatError,
                          SpeckleParams, ellipse_mask, generate,
                          lesion_template, quantize, read_pgm, read_sequence,
                          write_pgm, write_sequence)


def simple_spec(events=(), noise=True, decoy=None, frames=8, drift=(0.0, 0.0),
                deformations=(), seed=11):
    return SceneSpec(
        height=32, width=32, frames=frames,
        lesion=EllipseTrack(center=(15.0, 14.0), radii=(5.0, 7.0),
                            contrast=-0.3, drift_amp=drift),
        decoy=decoy,
        background=0.6,
        speckle=SpeckleParams(enabled=noise),
        deformations=tuple(deformations),
        events=tuple(events),
        shadow_factor=0.55,
        shadow_margin=3.0,
        seed=seed,
    )


def brute_force_ellipse(h, w, center, radii):
    out = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            dy = (y - center[0]) / radii[0]
            dx = (x - center[1]) / radii[1]
            out[y, x] = dy * dy + dx * dx <= 1.0
    return out


def test_masks_match_per_pixel_inequality_oracle():
    spec = simple_spec(frames=5, drift=(2.0, 1.5),
                       deformations=[DeformationInterval(2, 4, 0.8, 1.0)])
    seq = generate(spec)
    for t in range(5):
        want = brute_force_ellipse(32, 32, spec.lesion.center_at(t), spec.radii_at(t))
        np.testing.assert_array_equal(seq.masks[t], want)


def test_noise_free_contrast_is_exact():
    spec = simple_spec(noise=False)
    seq = generate(spec)
    for t, frame in enumerate(seq.frames):
        inside = seq.masks[t]
        got = frame.pixels[inside].mean() - frame.pixels[~inside].mean()
        # intensities are 8-bit quantized, so exactness is at grid resolution
        assert abs(got - spec.lesion.contrast) < 1.0 / 255.0


def test_same_seed_bit_identical():
    a = generate(simple_spec())
    b = generate(simple_spec())
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa.pixels, fb.pixels)
    for ma, mb in zip(a.masks, b.masks):
        np.testing.assert_array_equal(ma, mb)


def test_different_seed_differs():
    a = generate(simple_spec(seed=1))
    b = generate(simple_spec(seed=2))
    assert any(not np.array_equal(fa.pixels, fb.pixels)
               for fa, fb in zip(a.frames, b.frames))


def _ncc_at(frame, template, cy, cx):
    th, tw = template.shape
    y0 = int(round(cy)) - th // 2
    x0 = int(round(cx)) - tw // 2
    patch = frame[y0:y0 + th, x0:x0 + tw]
    p = patch - patch.mean()
    t = template - template.mean()
    denom = math.sqrt(float((p * p).sum()) * float((t * t).sum()))
    if denom == 0.0:
        return 0.0
    return float((p * t).sum() / denom)


def test_replace_event_semantics():
    spec = simple_spec(events=[OcclusionEvent(4, 6, "replace")], frames=8)
    seq = generate(spec)
    template = lesion_template(spec)
    for t in (4, 5):
        assert not seq.masks[t].any()
        assert seq.visibility[t] is False
        cy, cx = spec.lesion.center_at(t)
        assert _ncc_at(seq.frames[t].pixels, template, cy, cx) < 0.3
    # adjacent visible frame correlates strongly
    cy, cx = spec.lesion.center_at(3)
    assert seq.visibility[3] is True
    assert _ncc_at(seq.frames[3].pixels, template, cy, cx) > 0.6


def test_shadow_event_keeps_mask_and_hides_lesion():
    spec = simple_spec(events=[OcclusionEvent(2, 5, "shadow")], frames=8)
    seq = generate(spec)
    for t in (2, 3, 4):
        assert seq.masks[t].any()
        assert seq.visibility[t] is False
        cy, cx = spec.lesion.center_at(t)
        template = lesion_template(spec)
        assert _ncc_at(seq.frames[t].pixels, template, cy, cx) < 0.3


def test_replace_frame_differs_from_visible_frame():
    spec = simple_spec(events=[OcclusionEvent(4, 5, "replace")])
    clean = simple_spec()
    a = generate(spec)
    b = generate(clean)
    assert not np.array_equal(a.frames[4].pixels, b.frames[4].pixels)
    np.testing.assert_array_equal(a.frames[3].pixels, b.frames[3].pixels)


def test_out_of_bounds_trajectory_rejected():
    spec = simple_spec(drift=(20.0, 0.0))
    with pytest.raises(ValueError, match="leaves the frame"):
        generate(spec)


def test_event_outside_range_rejected():
    spec = simple_spec(events=[OcclusionEvent(6, 12, "replace")])
    with pytest.raises(ValueError, match="outside frame range"):
        generate(spec)


def test_bad_event_kind_rejected():
    spec = simple_spec(events=[OcclusionEvent(1, 3, "fog")])
    with pytest.raises(ValueError, match="unknown event kind"):
        generate(spec)


def test_visibility_consistent_with_schedule():
    spec = simple_spec(events=[OcclusionEvent(2, 4, "shadow"),
                               OcclusionEvent(6, 7, "replace")])
    seq = generate(spec)
    for t in range(8):
        expected = not (2 <= t < 4 or 6 <= t < 7)
        assert seq.visibility[t] == expected


def test_quantize_snaps_to_8bit_grid():
    x = np.array([[0.123456, 1.7], [-0.4, 0.5]])
    q = quantize(x)
    np.testing.assert_array_equal(q, np.round(np.clip(x, 0, 1) * 255) / 255)


# ---------------------------------------------------------------------------
# PGM and manifest round trips
# ---------------------------------------------------------------------------

def test_pgm_round_trip(tmp_path):
    rng = CounterRng(500)
    img = quantize(rng.uniform((12, 17)))
    write_pgm(tmp_path / "x.pgm", img)
    back = read_pgm(tmp_path / "x.pgm")
    np.testing.assert_array_equal(back, img)


def test_pgm_truncated_rejected(tmp_path):
    write_pgm(tmp_path / "x.pgm", np.zeros((4, 4)))
    blob = (tmp_path / "x.pgm").read_bytes()
    (tmp_path / "bad.pgm").write_bytes(blob[:-3])
    with pytest.raises(SequenceFormatError, match="expected 16 pixels"):
        read_pgm(tmp_path / "bad.pgm")


def test_sequence_round_trip_exact(tmp_path):
    spec = simple_spec(events=[OcclusionEvent(2, 4, "shadow")],
                       decoy=EllipseTrack(center=(8.0, 25.0), radii=(3.0, 3.0),
                                          contrast=-0.15))
    seq = generate(spec)
    write_sequence(seq, tmp_path / "seq")
    back = read_sequence(tmp_path / "seq")
    assert len(back) == len(seq)
    for fa, fb in zip(seq.frames, back.frames):
        np.testing.assert_array_equal(fa.pixels, fb.pixels)
    for ma, mb in zip(seq.masks, back.masks):
        np.testing.assert_array_equal(ma, mb)
    assert back.visibility == seq.visibility
    assert back.events == seq.events
    assert back.spec.lesion.radii == seq.spec.lesion.radii
    # a second write of the reread sequence is byte-identical
    write_sequence(back, tmp_path / "seq2")
    for name in ("manifest.yaml", "frame_0003.pgm", "mask_0003.pgm"):
        assert (tmp_path / "seq" / name).read_bytes() == \
            (tmp_path / "seq2" / name).read_bytes()


def test_truncated_frame_file_names_index(tmp_path):
    seq = generate(simple_spec())
    write_sequence(seq, tmp_path / "seq")
    target = tmp_path / "seq" / "frame_0002.pgm"
    target.write_bytes(target.read_bytes()[:-5])
    with pytest.raises(SequenceFormatError, match="frame 2"):
        read_sequence(tmp_path / "seq")


def test_zero_length_manifest_rejected(tmp_path):
    seq = generate(simple_spec())
    write_sequence(seq, tmp_path / "seq")
    manifest = (tmp_path / "seq" / "manifest.yaml").read_text()
    manifest = manifest.replace("length: 8", "length: 0")
    (tmp_path / "seq" / "manifest.yaml").write_text(manifest)
    with pytest.raises(SequenceFormatError, match="invalid sequence length"):
        read_sequence(tmp_path / "seq")


def test_missing_manifest_rejected(tmp_path):
    with pytest.raises(SequenceFormatError, match="missing manifest"):
        read_sequence(tmp_path / "nowhere")


# ---------------------------------------------------------------------------
# Scene families
# ---------------------------------------------------------------------------

def test_family_sample_is_deterministic_and_valid():
    fam = SceneFamily()
    a = fam.sample(seed=42)
    b = fam.sample(seed=42)
    assert a == b
    a.validate()
    seq = generate(a)
    assert len(seq) == fam.frames


def test_family_event_kinds():
    none = SceneFamily(events_kind="none").sample(seed=3)
    assert none.events == ()
    rep = SceneFamily(events_kind="replace").sample(seed=3)
    assert len(rep.events) == 1 and rep.events[0].kind == "replace"
    assert rep.events[0].end - rep.events[0].start == 10
    sh = SceneFamily(events_kind="shadow").sample(seed=3)
    assert sh.events[0].kind == "shadow"
    assert sh.events[0].end - sh.events[0].start == 15


def test_family_samples_vary_with_seed():
    fam = SceneFamily()
    specs = [fam.sample(seed=s) for s in range(6)]
    centers = {tuple(round(c, 6) for c in s.lesion.center) for s in specs}
    assert len(centers) == 6


def test_family_decoy_disjoint_from_lesion():
    fam = SceneFamily()
    for seed in range(20):
        spec = fam.sample(seed=seed)
        seq_mask = ellipse_mask(spec.height, spec.width,
                                spec.lesion.center_at(0), spec.lesion.radii)
        decoy_mask = ellipse_mask(spec.height, spec.width,
                                  spec.decoy.center_at(0), spec.decoy.radii)
        overlap = (seq_mask & decoy_mask).sum()
        assert overlap == 0
