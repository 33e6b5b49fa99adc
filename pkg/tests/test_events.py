import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatrack.events import (Event, EventArray, EventCursor, EventFormatError, FrontendConfig,
                              accumulate, iter_keyframes, next_keyframe, parse_events,
                              polarity_free, write_events)


def test_parse_single_line(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("0.5 10 20 1\n")
    ev = parse_events(p)
    assert ev[0] == Event(0.5, 10, 20, 1)


def test_zero_polarity_maps_to_negative(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("0.1 1 2 0\n0.2 1 2 1\n")
    np.testing.assert_array_equal(parse_events(p).p, [-1, 1])


@pytest.mark.parametrize("text,fragment", [
    ("0.1 1 2 1\n0.05 1 2 1\n", "line 2"),
    ("0.1 1 2\n", "line 1"),
    ("0.1 1 2 5\n", "polarity"),
    ("0.1 1 x 1\n", "line 1"),
])
def test_malformed_files(tmp_path, text, fragment):
    p = tmp_path / "e.txt"
    p.write_text(text)
    with pytest.raises(EventFormatError, match=fragment):
        parse_events(p)


def test_out_of_bounds_pixel(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("0.1 400 2 1\n")
    with pytest.raises(EventFormatError, match="out of bounds"):
        parse_events(p, 346, 260)


def test_round_trip_million(tmp_path):
    rng = np.random.default_rng(0)
    n = 1_000_000
    ev = EventArray(np.sort(rng.uniform(0, 10, n)), rng.integers(0, 346, n),
                    rng.integers(0, 260, n), rng.choice([-1, 1], n))
    path = tmp_path / "big.txt"
    write_events(ev, path)
    assert parse_events(path) == ev


def test_gzip_round_trip(tmp_path):
    ev = EventArray([0.1, 0.2], [1, 2], [3, 4], [1, -1])
    write_events(ev, tmp_path / "e.txt.gz")
    assert parse_events(tmp_path / "e.txt.gz") == ev


def test_single_pixel_accumulation():
    ev = EventArray([0.0, 0.1, 0.2], [5] * 3, [5] * 3, [1] * 3)
    kf = next_keyframe(EventCursor(ev), FrontendConfig(3, 10, 10))
    assert kf.delta_Ie[5, 5] == 3
    assert kf.delta_Ie.sum() == 3


def test_cancellation():
    ev = EventArray([0.0, 0.1], [5, 5], [5, 5], [1, -1])
    kf = next_keyframe(EventCursor(ev), FrontendConfig(2, 10, 10))
    assert not kf.delta_Ie.any()
    assert kf.count == 2


def test_timestamps():
    ev = EventArray([1.0, 1.2], [0, 1], [0, 0], [1, 1])
    kf = next_keyframe(EventCursor(ev), FrontendConfig(2, 10, 10))
    assert kf.tau == pytest.approx(1.1)
    assert kf.delta_tau == pytest.approx(0.2)


def test_partial_tail_dropped():
    ev = EventArray(np.arange(7) * 0.1, [0] * 7, [0] * 7, [1] * 7)
    kfs = list(iter_keyframes(ev, FrontendConfig(3, 4, 4)))
    assert len(kfs) == 2
    assert [k.first_index for k in kfs] == [0, 3]


def test_polarity_free_examples():
    np.testing.assert_array_equal(polarity_free(np.array([-2.0, 0, 3])), [2, 0, 3])
    np.testing.assert_array_equal(polarity_free(np.zeros((3, 3))), 0)


def test_polarity_free_matches_positive_reaccumulation():
    rng = np.random.default_rng(3)
    n = 500
    x, y = rng.integers(0, 20, n), rng.integers(0, 15, n)
    # sign-pure stream: polarity is a fixed function of the pixel
    p = np.where((x + y) % 2 == 0, 1, -1)
    ev = EventArray(np.arange(n) * 1e-3, x, y, p)
    kf = next_keyframe(EventCursor(ev), FrontendConfig(n, 20, 15))
    plus = EventArray(ev.t, ev.x, ev.y, np.ones(n))
    np.testing.assert_array_equal(polarity_free(kf), accumulate(plus, 20, 15))


@given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 5), st.sampled_from([-1, 1])),
                min_size=1, max_size=60))
@settings(max_examples=50, deadline=None)
def test_accumulation_conserves_polarity(rows):
    x, y, p = map(np.array, zip(*rows))
    ev = EventArray(np.arange(len(rows)) * 1e-3, x, y, p)
    img = accumulate(ev, 8, 6)
    assert img.sum() == p.sum()
    assert np.abs(img).sum() <= len(rows)


def test_config_validation():
    with pytest.raises(ValueError):
        FrontendConfig(0)
