import pytest

from hiercls.aggregation import (
    read_slide_votes_csv,
    slide_metrics,
    slide_mode,
    write_slide_votes_csv,
)
from hiercls.rng import Rng
from hiercls.taxonomy import load_default_taxonomy


@pytest.fixture(scope="module")
def tax():
    return load_default_taxonomy()


class TestSlideMode:
    def test_strict_majority(self, tax):
        votes = slide_mode(["s1"] * 3, ["ALL", "ALL", "AML"], [0.9, 0.8, 0.99], tax)
        v = votes[0]
        assert v.winner == "ALL"
        assert abs(v.support - 2 / 3) < 1e-15
        assert v.tie_break_used == 0

    def test_confidence_tie_break(self, tax):
        votes = slide_mode(
            ["s1", "s1"], ["CLL", "CML"], [0.60, 0.55], tax
        )
        assert votes[0].winner == "CLL"
        assert votes[0].tie_break_used == 1

    def test_confidence_tie_break_other_way(self, tax):
        votes = slide_mode(
            ["s1", "s1"], ["CLL", "CML"], [0.55, 0.60], tax
        )
        assert votes[0].winner == "CML"
        assert votes[0].tie_break_used == 1

    def test_leaf_order_tie_break(self, tax):
        votes = slide_mode(
            ["s1", "s1"], ["CML", "CLL"], [0.5, 0.5], tax
        )
        assert votes[0].winner == "CLL"  # lower leaf_order index
        assert votes[0].tie_break_used == 2

    def test_single_patch(self, tax):
        votes = slide_mode(["s1"], ["APML"], [0.7], tax)
        assert votes[0].winner == "APML"
        assert votes[0].support == 1.0

    def test_slides_keep_first_appearance_order(self, tax):
        votes = slide_mode(
            ["b", "a", "b", "a"],
            ["ALL", "CML", "ALL", "CML"],
            [0.5, 0.5, 0.5, 0.5],
            tax,
        )
        assert [v.slide_id for v in votes] == ["b", "a"]

    def test_winner_among_patches(self, tax):
        r = Rng(900)
        slides = [f"s{i % 7}" for i in range(100)]
        leaves = [tax.leaf_order[r.randint(7)] for _ in range(100)]
        confs = list(r.uniforms(100))
        for v in slide_mode(slides, leaves, confs, tax):
            assert v.winner in v.patch_leaves
            assert 0.0 < v.support <= 1.0
            counts = {leaf: v.patch_leaves.count(leaf) for leaf in set(v.patch_leaves)}
            assert counts[v.winner] == max(counts.values())

    def test_errors(self, tax):
        with pytest.raises(ValueError):
            slide_mode([], [], [], tax)
        with pytest.raises(ValueError):
            slide_mode([""], ["ALL"], [0.5], tax)
        with pytest.raises(ValueError):
            slide_mode(["a", "b"], ["ALL"], [0.5], tax)


class TestSlideMetrics:
    def test_unanimous_correct(self, tax):
        votes = slide_mode(
            ["s1"] * 3 + ["s2"] * 3,
            ["ALL"] * 3 + ["CML"] * 3,
            [0.9] * 6,
            tax,
        )
        rep = slide_metrics(votes, {"s1": "ALL", "s2": "CML"}, tax)
        assert rep.accuracy == 1.0
        assert rep.n_samples == 2

    def test_majority_beats_minority_errors(self, tax):
        votes = slide_mode(
            ["s1"] * 5,
            ["ALL", "ALL", "ALL", "AML", "CML"],
            [0.9] * 5,
            tax,
        )
        rep = slide_metrics(votes, {"s1": "ALL"}, tax)
        assert rep.accuracy == 1.0

    def test_missing_truth(self, tax):
        votes = slide_mode(["s1"], ["ALL"], [0.9], tax)
        with pytest.raises(ValueError):
            slide_metrics(votes, {}, tax)


class TestSlideCsv:
    def test_round_trip(self, tax, tmp_path):
        votes = slide_mode(
            ["s1", "s1", "s2"],
            ["CLL", "CML", "Normal"],
            [0.60, 0.55, 0.8],
            tax,
        )
        path = tmp_path / "slides.csv"
        write_slide_votes_csv(path, votes)
        rows = read_slide_votes_csv(path)
        assert rows[0]["slide_id"] == "s1"
        assert rows[0]["winner"] == "CLL"
        assert rows[0]["tie_break_used"] == "1"
        assert abs(float(rows[0]["support"]) - 0.5) < 1e-15
        assert rows[1]["winner"] == "Normal"
