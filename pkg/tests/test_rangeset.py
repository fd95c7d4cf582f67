from hypothesis import given, strategies as st

from flowsplit.rangeset import RangeSet

ops = st.lists(st.tuples(st.booleans(), st.integers(0, 200), st.integers(0, 60)), max_size=60)


def as_set(rs: RangeSet) -> set[int]:
    return {x for s, e in rs for x in range(s, e)}


@given(ops)
def test_matches_a_python_set(seq):
    rs = RangeSet()
    ref: set[int] = set()
    for add, start, length in seq:
        span = set(range(start, start + length))
        if add:
            assert rs.add(start, start + length) == len(span - ref)
            ref |= span
        else:
            assert rs.subtract(start, start + length) == len(span & ref)
            ref -= span
        rs.check()
        assert as_set(rs) == ref
        assert rs.total == len(ref)


@given(ops, st.integers(0, 260), st.integers(0, 30))
def test_queries_match_a_python_set(seq, x, n):
    rs = RangeSet()
    ref: set[int] = set()
    for add, start, length in seq:
        if add:
            rs.add(start, start + length)
            ref |= set(range(start, start + length))
        else:
            rs.subtract(start, start + length)
            ref -= set(range(start, start + length))
    assert rs.contains(x) == (x in ref)
    assert rs.covers(x, x + n) == all(y in ref for y in range(x, x + n))
    gap = x
    while gap in ref:
        gap += 1
    assert rs.first_gap_from(x) == gap
    above = {y for s, e in rs.above(x) for y in range(s, e)}
    assert above == {y for y in ref if y >= x}


def test_touching_ranges_merge():
    rs = RangeSet([(0, 5), (5, 10)])
    assert list(rs) == [(0, 10)]
    rs.trim_below(3)
    assert list(rs) == [(3, 10)]
    assert rs == RangeSet([(3, 10)])
