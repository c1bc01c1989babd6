import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smallface.dataio import (PackingError, ParseError, SyntheticSceneSpec, format_detection_records,
                              format_fddb, format_wider, format_wider_submission, generate_synthetic,
                              load_dataset, parse_detection_records, parse_fddb_text, parse_wider_text,
                              parse_wider_submission, read_image, read_pnm, read_tensor, write_dataset,
                              write_pnm, write_tensor)

WIDER = """0--Parade/a.jpg
2
10 20 30 40 0 0 0 0 0 0
5 5 12 14 1 0 0 0 0 0
0--Parade/b.jpg
0
0 0 0 0 0 0 0 0 0 0
0--Parade/c.jpg
1
1 2 0 8 0 0 0 0 1 0
"""


def test_wider_parse():
    anns = parse_wider_text(WIDER)
    assert [a.path for a in anns] == ["0--Parade/a.jpg", "0--Parade/b.jpg", "0--Parade/c.jpg"]
    assert anns[0].boxes.tolist() == [[10, 20, 40, 60], [5, 5, 17, 19]]
    assert anns[0].tags == ["medium", "hard"]
    assert anns[1].faces == [] and anns[1].placeholder is not None
    # zero width or the invalid flag marks an ignore face
    assert anns[2].boxes.shape == (0, 4) and anns[2].ignore_boxes.shape == (0, 4)


def test_wider_round_trip_is_byte_identical():
    assert format_wider(parse_wider_text(WIDER)) == WIDER


def test_wider_count_mismatch_names_block_and_line():
    bad = "a.jpg\n3\n1 1 5 5 0 0 0 0 0 0\n1 1 5 5 0 0 0 0 0 0\nb.jpg\n0\n"
    with pytest.raises(ParseError, match=r"<string>:5:.*'a.jpg'"):
        parse_wider_text(bad)
    with pytest.raises(ParseError, match="ends after 1"):
        parse_wider_text("a.jpg\n2\n1 1 5 5 0 0 0 0 0 0\n")
    with pytest.raises(ParseError, match="malformed count"):
        parse_wider_text("a.jpg\nmany\n")


FDDB = """2002/08/11/big/img_591
1
123.583300 85.549500 1.265839 269.693400 161.781200  1
2002/08/26/big/img_265
2
67.363819 44.511485 -1.476417 105.249970 87.209036  1
20.0 30.0 0.5 50.0 60.0 1
"""


def test_fddb_parse_and_round_trip():
    anns = parse_fddb_text(FDDB)
    assert len(anns) == 2 and len(anns[1].ellipses) == 2
    e = anns[0].ellipses[0]
    assert (e.ra, e.rb, e.cx, e.cy) == (123.5833, 85.5495, 269.6934, 161.7812)
    # ra < rb is normalised by swapping axes
    e = anns[1].ellipses[1]
    assert (e.ra, e.rb) == (30.0, 20.0) and e.theta == pytest.approx(0.5 + math.pi / 2)
    assert format_fddb(anns) == FDDB


def test_fddb_malformed():
    with pytest.raises(ParseError, match=":3:"):
        parse_fddb_text("img\n1\n1 2 3\n")


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3]), st.booleans())
def test_pnm_round_trip(tmp_path_factory, h, w, c, sixteen):
    p = tmp_path_factory.mktemp("pnm") / ("x.ppm" if c == 3 else "x.pgm")
    rng = np.random.default_rng(h * 10 + w)
    img = rng.integers(0, 256, (c, h, w)) / 255.0
    write_pnm(p, img)
    back = read_pnm(p)
    assert back.shape == (c, h, w) and np.array_equal(back, img)
    if sixteen:
        raw = f"P5\n{w} {h}\n65535\n".encode() + (rng.integers(0, 65536, (h, w)).astype(">u2")).tobytes()
        p.write_bytes(raw)
        assert read_pnm(p).max() <= 1.0


def test_pnm_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# comment\n2 1\n255\n\x00\xff")
    assert read_pnm(p).tolist() == [[[0.0, 1.0]]]
    assert read_image(p).shape == (3, 1, 2)


def test_tensor_round_trip(tmp_path):
    a = np.random.default_rng(0).random((3, 5, 7))
    write_tensor(tmp_path / "a.tensor", a)
    assert np.array_equal(read_tensor(tmp_path / "a.tensor"), a)


def test_detection_records_round_trip():
    boxes = np.array([[1.23456, 2.0, 30.5, 40.25], [0, 0, 5, 5]])
    lines = format_detection_records("img", boxes, np.array([0.9, 0.1234567]), np.array([0, 3]), np.array([1, 2]))
    assert lines[0] == "img 1.2346 2.0000 30.5000 40.2500 0.900000 0 1"
    parsed = parse_detection_records("\n".join(lines))
    assert np.allclose(parsed["img"][0], boxes, atol=5e-5)
    with pytest.raises(ParseError):
        parse_detection_records("img 1 2 3")


def test_wider_submission_round_trip():
    text = format_wider_submission("a.jpg", np.array([[10.0, 20.0, 40.0, 60.0]]), np.array([0.5]))
    assert text == "a.jpg\n1\n10.0 20.0 30.0 40.0 0.500000\n"
    name, boxes, scores = parse_wider_submission(text)
    assert name == "a.jpg" and boxes.tolist() == [[10, 20, 40, 60]] and scores.tolist() == [0.5]


def test_synthetic_is_deterministic_and_well_formed():
    spec = SyntheticSceneSpec(min_side=6, max_side=120, max_overlap_iou=0.0, seed=5)
    a = generate_synthetic(spec, 4)
    b = generate_synthetic(spec, 4)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.boxes, y.boxes)
    for s in a:
        assert 1 <= len(s.boxes) <= 6 and s.image.shape == (3, 256, 256)
        sides = s.boxes[:, 2] - s.boxes[:, 0]
        assert sides.min() >= 6 and sides.max() <= 120
        assert np.all(s.boxes >= 0) and np.all(s.boxes <= 256)


def test_explicit_sides_and_packing_error():
    s = generate_synthetic(SyntheticSceneSpec(sides=(10, 40), seed=1), 1)[0]
    assert sorted((s.boxes[:, 2] - s.boxes[:, 0]).tolist()) == [10, 40]
    with pytest.raises(PackingError):
        generate_synthetic(SyntheticSceneSpec(height=64, width=64, sides=(60, 60), max_overlap_iou=0.0,
                                              max_attempts=5), 1)
    with pytest.raises(ValueError):
        SyntheticSceneSpec(min_side=2)


def test_dataset_round_trip(tmp_path):
    scenes = generate_synthetic(SyntheticSceneSpec(min_side=8, max_side=64, seed=2), 3)
    write_dataset(tmp_path, scenes)
    loaded = load_dataset(tmp_path)
    for s, (ann, img) in zip(scenes, loaded):
        assert ann.path == f"{s.name}.ppm"
        assert np.array_equal(ann.boxes, s.boxes)
        assert np.array_equal(img, s.image)


def test_synthetic_difficulty_tags_follow_side():
    s = generate_synthetic(SyntheticSceneSpec(sides=(4, 20, 120), seed=3), 1)[0]
    tags = dict(zip((s.boxes[:, 2] - s.boxes[:, 0]).tolist(), s.tags))
    assert tags == {4: "hard", 20: "hard", 120: "easy"}
