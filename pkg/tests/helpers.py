"""Assertion helpers shared across test modules."""

from __future__ import annotations


def assert_rankings_match(
    got: list[tuple[str, float]],
    want: list[tuple[str, float]],
    tol: float = 1e-9,
) -> None:
    """Two score-descending rankings must agree up to numerical ties.

    Positionwise scores must match within ``tol``.  An id may sit at a
    different position only if the two positions' scores tie within ``tol``
    (float summation order may legitimately permute exact ties); an id
    present in only one list must tie with the truncation boundary.
    """
    assert len(got) == len(want), f"lengths differ: {len(got)} vs {len(want)}"
    if not got:
        return
    for (_, got_score), (_, want_score) in zip(got, want):
        assert abs(got_score - want_score) <= tol, (got_score, want_score)
    for ranking in (got, want):
        for (_, a), (_, b) in zip(ranking, ranking[1:]):
            assert a >= b - tol, "ranking not score-descending"

    got_pos = {item_id: i for i, (item_id, _) in enumerate(got)}
    want_pos = {item_id: i for i, (item_id, _) in enumerate(want)}
    boundary = want[-1][1]
    for i, (item_id, score) in enumerate(got):
        if item_id in want_pos:
            other = want[want_pos[item_id]][1]
            assert abs(score - other) <= tol, (
                f"{item_id} moved across a non-tie: {score} vs {other}"
            )
        else:
            assert abs(score - boundary) <= tol, (
                f"{item_id} only in one ranking yet not at the boundary tie"
            )
    for item_id, score in want:
        if item_id not in got_pos:
            assert abs(score - boundary) <= tol, (
                f"{item_id} dropped despite not tying at the boundary"
            )
