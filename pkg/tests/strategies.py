"""Shared hypothesis strategies for the test suite."""

from hypothesis import strategies as st

from d2af.core import BoundingBox


@st.composite
def int_boxes(draw, lo=-50, hi=50, max_size=40):
    """Boxes with integer corners and strictly positive area."""
    x_min = draw(st.integers(lo, hi - 1))
    y_min = draw(st.integers(lo, hi - 1))
    w = draw(st.integers(1, max_size))
    h = draw(st.integers(1, max_size))
    return BoundingBox(x_min, y_min, min(x_min + w, hi), min(y_min + h, hi))


@st.composite
def float_boxes(draw, lo=-100.0, hi=100.0):
    """Boxes with float corners and strictly positive area."""
    xs = draw(
        st.tuples(
            st.floats(lo, hi, allow_nan=False, allow_infinity=False),
            st.floats(lo, hi, allow_nan=False, allow_infinity=False),
        ).filter(lambda t: abs(t[0] - t[1]) > 1e-6)
    )
    ys = draw(
        st.tuples(
            st.floats(lo, hi, allow_nan=False, allow_infinity=False),
            st.floats(lo, hi, allow_nan=False, allow_infinity=False),
        ).filter(lambda t: abs(t[0] - t[1]) > 1e-6)
    )
    return BoundingBox(min(xs), min(ys), max(xs), max(ys))


caption_words = st.lists(
    st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=8),
    min_size=1,
    max_size=12,
)
