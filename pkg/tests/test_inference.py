import numpy as np
import pytest

from hiercls.errors import LayoutMismatchError
from hiercls.inference import (
    Prediction,
    compose_base,
    decode_flat,
    decode_greedy,
    decode_marginal,
    leaf_marginals,
    read_predictions_csv,
    write_predictions_csv,
)
from hiercls.objective import softmax
from hiercls.rng import Rng
from hiercls.taxonomy import load_default_taxonomy


@pytest.fixture(scope="module")
def tax():
    return load_default_taxonomy()


def random_groups(tax, rng, scale=3.0):
    return [rng.normals(seg.length) * scale for seg in tax.logit_layout().segments]


def marginal_oracle(groups, tax):
    """Exhaustive per-leaf product of conditionals, straight off the tree."""
    lay = tax.logit_layout()
    probs = {seg.group: softmax(np.asarray(g)) for seg, g in zip(lay.segments, groups)}
    out = {}
    for leaf in tax.leaf_order:
        p = 1.0
        node = leaf
        while tax.node(node).parent is not None:
            parent = tax.node(node).parent
            seg = lay.segment_for(parent)
            p *= probs[parent][seg.children.index(node)]
            node = parent
        out[leaf] = p
    return np.array([out[leaf] for leaf in tax.leaf_order])


class TestDecodeFlat:
    def test_dominant_cml(self, tax):
        s = np.zeros(7)
        s[tax.leaf_order.index("CML")] = 50.0
        pred = decode_flat(s, tax)
        assert pred.path.leaf == "CML"
        assert pred.path.path == ("Leukemia", "Chronic", "CML")

    def test_tie_takes_first_leaf(self, tax):
        pred = decode_flat(np.zeros(7), tax)
        assert pred.path.leaf == tax.leaf_order[0] == "ALL"

    def test_agrees_with_max_scan(self, tax):
        r = Rng(700)
        for _ in range(100):
            s = r.normals(7) * 4
            pred = decode_flat(s, tax)
            best, best_i = -np.inf, -1
            for i, v in enumerate(s):
                if v > best:
                    best, best_i = v, i
            assert pred.path.leaf == tax.leaf_order[best_i]

    def test_confidence_is_softmax_of_winner(self, tax):
        s = np.array([1.0, 0.0, -1.0, 2.0, 0.5, -0.5, 0.25])
        pred = decode_flat(s, tax)
        i = tax.leaf_order.index(pred.path.leaf)
        assert abs(pred.confidence - softmax(s)[i]) < 1e-12
        assert abs(float(np.sum(pred.leaf_probs)) - 1.0) < 1e-9

    def test_length_mismatch(self, tax):
        with pytest.raises(LayoutMismatchError):
            decode_flat(np.zeros(6), tax)


class TestDecodeGreedy:
    def test_shallow_leaf_stops(self, tax):
        lay = tax.logit_layout()
        groups = [np.zeros(seg.length) for seg in lay.segments]
        groups[0] = np.array([0.0, 10.0, 0.0])  # Normal dominates level 1
        pred = decode_greedy(groups, tax)
        assert pred.path.leaf == "Normal"
        assert pred.path.path == ("Normal",)

    def test_uniform_ties_to_all(self, tax):
        lay = tax.logit_layout()
        groups = [np.zeros(seg.length) for seg in lay.segments]
        pred = decode_greedy(groups, tax)
        assert pred.path.leaf == "ALL"
        assert abs(pred.confidence - 1.0 / 18.0) < 1e-12

    def test_group_probs_cover_all_groups(self, tax):
        r = Rng(701)
        pred = decode_greedy(random_groups(tax, r), tax)
        assert set(pred.group_probs) == set(tax.group_order)
        for gid, p in pred.group_probs.items():
            assert abs(float(np.sum(p)) - 1.0) < 1e-12

    def test_never_internal(self, tax):
        r = Rng(702)
        for _ in range(200):
            pred = decode_greedy(random_groups(tax, r), tax)
            assert tax.node(pred.path.leaf).is_leaf

    def test_agrees_with_marginal_argmax_when_coincide(self, tax):
        r = Rng(703)
        agree = 0
        for _ in range(300):
            groups = random_groups(tax, r)
            g_pred = decode_greedy(groups, tax)
            marg = marginal_oracle(groups, tax)
            if g_pred.path.leaf == tax.leaf_order[int(np.argmax(marg))]:
                agree += 1
                assert abs(g_pred.confidence - float(np.max(marg))) < 1e-12
        assert agree > 200  # they usually coincide on smooth random scores

    def test_layout_mismatch(self, tax):
        lay = tax.logit_layout()
        groups = [np.zeros(seg.length) for seg in lay.segments]
        groups[2] = np.zeros(4)
        with pytest.raises(LayoutMismatchError):
            decode_greedy(groups, tax)


class TestLeafMarginals:
    def test_uniform_hand_values(self, tax):
        lay = tax.logit_layout()
        groups = [np.zeros(seg.length) for seg in lay.segments]
        marg = leaf_marginals(groups, tax)
        expected = {
            "Normal": 1 / 3,
            "Reactive": 1 / 3,
            "ALL": 1 / 18,
            "AML": 1 / 18,
            "APML": 1 / 18,
            "CLL": 1 / 12,
            "CML": 1 / 12,
        }
        for leaf, want in expected.items():
            assert abs(marg[tax.leaf_order.index(leaf)] - want) < 1e-12

    def test_partition_of_unity(self, tax):
        r = Rng(704)
        for _ in range(100):
            marg = leaf_marginals(random_groups(tax, r, scale=6.0), tax)
            assert abs(float(np.sum(marg)) - 1.0) < 1e-9

    def test_saturated_scores_concentrate(self, tax):
        lay = tax.logit_layout()
        groups = [np.full(seg.length, -1000.0) for seg in lay.segments]
        for seg, g, pick in zip(lay.segments, groups, ["Leukemia", "Chronic", "ALL", "CML"]):
            if pick in seg.children:
                g[seg.children.index(pick)] = 1000.0
        marg = leaf_marginals(groups, tax)
        assert marg[tax.leaf_order.index("CML")] > 1.0 - 1e-9

    def test_matches_exhaustive_oracle(self, tax):
        r = Rng(705)
        for _ in range(50):
            groups = random_groups(tax, r)
            assert np.max(np.abs(leaf_marginals(groups, tax) - marginal_oracle(groups, tax))) < 1e-12

    def test_flat_self_consistency(self, tax):
        # flat decode over log-marginals agrees with marginal argmax
        r = Rng(706)
        for _ in range(50):
            groups = random_groups(tax, r)
            marg = leaf_marginals(groups, tax)
            flat_pred = decode_flat(np.log(marg), tax)
            marg_pred = decode_marginal(groups, tax)
            assert flat_pred.path.leaf == marg_pred.path.leaf


class TestDecodeMarginal:
    def test_confidence_equals_leaf_prob(self, tax):
        r = Rng(707)
        for _ in range(50):
            groups = random_groups(tax, r)
            pred = decode_marginal(groups, tax)
            i = tax.leaf_order.index(pred.path.leaf)
            assert pred.confidence == pred.leaf_probs[i]
            assert pred.leaf_probs[i] == float(np.max(pred.leaf_probs))


class Counting:
    def __init__(self, scores):
        self.scores = np.asarray(scores, dtype=np.float64)
        self.calls = 0

    def __call__(self, sample):
        self.calls += 1
        return self.scores


class TestComposeBase:
    def test_routing_skips_unused(self, tax):
        level1 = Counting([0.0, 9.0, 0.0])  # Normal
        level2 = Counting([0.0, 0.0])
        acute3 = Counting([0.0, 0.0, 0.0])
        chronic3 = Counting([0.0, 0.0])
        pred = compose_base(level1, level2, acute3, chronic3, "sample", tax)
        assert pred.path.leaf == "Normal"
        assert level1.calls == 1
        assert level2.calls == acute3.calls == chronic3.calls == 0

    def test_routes_to_cml(self, tax):
        level1 = Counting([9.0, 0.0, 0.0])   # Leukemia
        level2 = Counting([0.0, 9.0])        # Chronic
        acute3 = Counting([0.0, 0.0, 0.0])
        chronic3 = Counting([0.0, 9.0])      # CML
        pred = compose_base(level1, level2, acute3, chronic3, "s", tax)
        assert pred.path.leaf == "CML"
        assert acute3.calls == 0
        assert chronic3.calls == 1

    def test_all_uniform_ties_to_all(self, tax):
        preds = [Counting(np.zeros(k)) for k in (3, 2, 3, 2)]
        pred = compose_base(*preds, "s", tax)
        assert pred.path.leaf == "ALL"
        assert abs(pred.confidence - 1.0 / 18.0) < 1e-12
        assert pred.leaf_probs is None  # chronic group never scored

    def test_equals_greedy_on_shared_scores(self, tax):
        r = Rng(708)
        lay = tax.logit_layout()
        for _ in range(1000):
            groups = random_groups(tax, r)
            members = [Counting(g) for g in groups]
            pred_b = compose_base(*members, "s", tax)
            pred_g = decode_greedy(groups, tax)
            assert pred_b.path == pred_g.path
            assert abs(pred_b.confidence - pred_g.confidence) < 1e-12

    def test_shape_mismatch(self, tax):
        preds = [Counting(np.zeros(k)) for k in (3, 2, 3, 2)]
        preds[0] = Counting(np.zeros(4))
        with pytest.raises(LayoutMismatchError):
            compose_base(*preds, "s", tax)


class TestPredictionCsv:
    def test_round_trip(self, tax, tmp_path):
        r = Rng(709)
        preds, sids, slides = [], [], []
        for i in range(10):
            preds.append(decode_greedy(random_groups(tax, r), tax))
            sids.append(f"s{i:03d}")
            slides.append(f"slide{i % 3}")
        preds.append(decode_flat(r.normals(7), tax))
        sids.append("s_flat")
        slides.append("slideX")
        path = tmp_path / "preds.csv"
        write_predictions_csv(path, sids, slides, preds, tax)
        rows = read_predictions_csv(path)
        assert len(rows) == 11
        assert rows[0]["sample_id"] == "s000"
        assert rows[0]["decoded_leaf"] == preds[0].path.leaf
        assert abs(float(rows[0]["confidence"]) - preds[0].confidence) < 1e-15
        # marginal columns exist for every non-root node
        for node in tax.node_order[1:]:
            assert node in rows[0]

    def test_partial_marginals_empty_cells(self, tax, tmp_path):
        members = [Counting([0.0, 9.0, 0.0]), Counting([0.0] * 2),
                   Counting([0.0] * 3), Counting([0.0] * 2)]
        pred = compose_base(*members, "s", tax)
        path = tmp_path / "partial.csv"
        write_predictions_csv(path, ["a"], ["sl"], [pred], tax)
        row = read_predictions_csv(path)[0]
        assert row["Normal"] != ""
        assert row["ALL"] == ""  # acute group never invoked

    def test_internal_node_marginals_from_flat(self, tax, tmp_path):
        s = np.array([2.0, 1.0, 0.5, -1.0, 0.0, 1.5, -0.5])
        pred = decode_flat(s, tax)
        p = softmax(s)
        path = tmp_path / "flat.csv"
        write_predictions_csv(path, ["a"], ["sl"], [pred], tax)
        row = read_predictions_csv(path)[0]
        leuk = sum(p[tax.leaf_order.index(x)] for x in ("ALL", "AML", "APML", "CLL", "CML"))
        assert abs(float(row["Leukemia"]) - leuk) < 1e-12
