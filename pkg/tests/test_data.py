import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from learnet import data as D


@given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_pgm_round_trip(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("pgm") / "img.pgm"
    D.write_pgm(path, img)
    assert np.array_equal(D.read_pgm(path), img)


def test_pgm_header_with_comment_and_low_maxval(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n15\n" + bytes([0, 15]))
    assert D.read_pgm(path).tolist() == [[0, 255]]


@pytest.mark.parametrize("payload, message", [
    (b"P2\n1 1\n255\n0", "binary"),
    (b"P5\n2 2\n255\n\x00", "truncated pixel"),
    (b"P5\n2 2\n65535\n" + bytes(8), "8-bit"),
    (b"P5\n2", "truncated PGM header"),
])
def test_pgm_errors_name_the_file(tmp_path, payload, message):
    path = tmp_path / "bad.pgm"
    path.write_bytes(payload)
    with pytest.raises(D.PGMError, match=message) as exc:
        D.read_pgm(path)
    assert "bad.pgm" in str(exc.value)


def test_float_images_are_clipped_when_written(tmp_path):
    D.write_pgm(tmp_path / "f.pgm", np.array([[-1.0, 0.5, 2.0]]))
    assert D.read_pgm(tmp_path / "f.pgm").tolist() == [[0, 128, 255]]


@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 40), st.integers(1, 40), st.floats(0, 1))
def test_resize_preserves_constants_and_shape(h, w, oh, ow, value):
    out = D.resize(np.full((h, w), value), oh, ow)
    assert out.shape == (oh, ow)
    np.testing.assert_allclose(out, value, atol=1e-12)


def test_resize_area_average_and_identity():
    img = np.arange(16.0).reshape(4, 4)
    np.testing.assert_allclose(D.resize(img, 2, 2), [[2.5, 4.5], [10.5, 12.5]])
    same = D.resize(img, 4, 4)
    assert np.array_equal(same, img) and same is not img


def test_glyph_dataset_is_deterministic_and_shaped():
    a = D.gen_glyph_dataset(np.random.default_rng(5), 2, 1, 3, 4)
    b = D.gen_glyph_dataset(np.random.default_rng(5), 2, 1, 3, 4)
    assert a.equals(b)
    assert a.inventory() == {"background": {"alphabets": 2, "characters": 6, "images": 24},
                             "evaluation": {"alphabets": 1, "characters": 3, "images": 12}}
    imgs = a.split("background")[0].characters[0][1]
    assert imgs.shape == (4, 28, 28) and imgs.dtype == np.float32
    assert 0 <= imgs.min() and imgs.max() <= 1
    with pytest.raises(D.DatasetError):
        a.split("train")


def test_dataset_export_and_load(tmp_path):
    ds = D.gen_glyph_dataset(np.random.default_rng(0), 2, 1, 2, 3)
    D.export_dataset(ds, tmp_path)
    back = D.load_pgm_dataset(tmp_path)
    assert [a.name for a in back.alphabets] == [a.name for a in ds.alphabets]
    for a, b in zip(ds.alphabets, back.alphabets):
        for (_, ia), (_, ib) in zip(a.characters, b.characters):
            np.testing.assert_allclose(ia, ib, atol=0.5 / 255 + 1e-7)


def test_dataset_loader_errors(tmp_path):
    with pytest.raises(D.DatasetError):
        D.load_pgm_dataset(tmp_path / "missing")
    char = tmp_path / "background" / "a" / "c"
    char.mkdir(parents=True)
    D.write_pgm(char / "0.pgm", np.zeros((28, 28)))
    with pytest.raises(D.DatasetError, match="at least 2"):
        D.load_pgm_dataset(tmp_path)


def test_loader_resizes_other_sizes(tmp_path):
    char = tmp_path / "evaluation" / "a" / "c"
    char.mkdir(parents=True)
    for i in range(2):
        D.write_pgm(char / f"{i}.pgm", np.ones((56, 40)))
    ds = D.load_pgm_dataset(tmp_path)
    assert ds.split("evaluation")[0].characters[0][1].shape == (2, 28, 28)


def test_holdout_alphabets():
    alphas = [D.Alphabet(str(i), "background", []) for i in range(30)]
    fit, val = D.holdout_alphabets(alphas, 0.1)
    assert len(fit) == 27 and [a.name for a in val] == ["27", "28", "29"]
    assert D.holdout_alphabets(alphas[:1], 0.1) == (alphas[:1], [])


def test_character_triplets_follow_labels():
    ds = D.gen_glyph_dataset(np.random.default_rng(0), 2, 1, 3, 4)
    lookup = {}
    for a in ds.alphabets:
        for name, imgs in a.characters:
            for img in imgs:
                lookup[img.tobytes()] = (a.name, name)
    batch = D.CharacterTriplets(ds.split("background")).sample(np.random.default_rng(1), 200)
    assert batch.z.shape == (200, 28, 28, 1)
    for z, x, label in zip(batch.z, batch.x, batch.labels):
        (az, cz), (ax, cx) = lookup[z[..., 0].tobytes()], lookup[x[..., 0].tobytes()]
        assert az == ax
        assert (cz == cx) == (label == 1)
        if label == 1:
            assert not np.array_equal(z, x)
    assert 0.4 < (batch.labels == 1).mean() < 0.6


def test_tracking_label_map():
    m = D.tracking_label_map(9, 1)
    assert m.sum() == 4 - 77 and m[3:5, 3:5].min() == 1
    assert (D.tracking_label_map(9, -1) == -1).all()
    assert D.tracking_label_map(8, 1)[3:5, 3:5].min() == 1
    assert D.map_reference(9) == 4.0


def test_tracking_sequence_motion_and_crops():
    seq = D.gen_tracking_sequence(np.random.default_rng(0), 30, 96, 16)
    assert seq.frames.shape == (30, 96, 96) and len(seq) == 30
    steps = np.abs(np.diff(seq.boxes[:, :2], axis=0))
    assert steps.max() <= 3 and np.all(steps == np.round(steps))
    assert np.all(seq.boxes[:, :2] >= 8) and np.all(seq.boxes[:, :2] <= 88)
    box = seq.boxes[0]
    z, x = D.exemplar_crop(seq.frames[0], box, 32), D.search_crop(seq.frames[0], box, 64)
    assert z.shape == (32, 32) and x.shape == (64, 64)
    # with 64 px crops of a 64 px window the search crop is a plain copy, centred on the object
    np.testing.assert_array_equal(x[16:48, 16:48], D.crop(seq.frames[0], box[0], box[1], 32, 32))


def test_crop_pads_with_frame_mean():
    frame = np.arange(16, dtype=np.float64).reshape(4, 4)
    out = D.crop(frame, 0.0, 0.0, 4, 4)
    assert out[0, 0] == frame.mean() and out[2, 2] == frame[0, 0]


def test_tracking_triplets(tmp_path):
    seqs = D.gen_tracking_sequences(np.random.default_rng(0), 3, 6)
    batch = D.TrackingTriplets(seqs, 9, positive_fraction=0.75).sample(np.random.default_rng(0), 40)
    assert batch.z.shape == (40, 32, 32, 1) and batch.x.shape == (40, 64, 64, 1)
    assert batch.labels.shape == (40, 9, 9)
    positives = batch.labels.max(axis=(1, 2)) == 1
    assert 0.5 < positives.mean() < 0.95
    with pytest.raises(D.DatasetError):
        D.make_tracking_triplet(seqs[:1], np.random.default_rng(0), positive_fraction=0.0)


def test_sequence_save_load(tmp_path):
    seqs = D.gen_tracking_sequences(np.random.default_rng(0), 2, 4, 48, 12)
    for i, s in enumerate(seqs):
        D.save_sequence(s, tmp_path / f"seq{i:03d}")
    back = D.load_sequences(tmp_path)
    assert len(back) == 2
    np.testing.assert_array_equal(back[1].boxes, seqs[1].boxes)
    np.testing.assert_allclose(back[1].frames, seqs[1].frames, atol=0.5 / 255 + 1e-6)
    assert len(D.load_sequences(tmp_path / "seq000")) == 1
    (tmp_path / "seq001" / "0003.pgm").unlink()
    with pytest.raises(D.DatasetError):
        D.load_sequence(tmp_path / "seq001")
