import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgrag.errors import InputError
from sgrag.evaluation import (
    PRF,
    AttributeScores,
    EvalItem,
    ExtractedMentions,
    GroundTruthRecord,
    PipelineConfig,
    ablation_report,
    aggregate,
    attribute_counts,
    evaluate_answers,
    extract_mentions,
    item_from_dict,
    item_to_dict,
    normalize_answer,
    prf_from_counts,
    render_report,
    run_ablation,
    score_attributes,
    vqa_accuracy,
)
from sgrag.scene_graph import GridCell
from sgrag.synthetic import make_corpus

GOLDEN = __import__("pathlib").Path(__file__).parent / "golden"


def test_extract_quantity_and_location():
    m = extract_mentions("There are 3 cars in the top-left region.", {"car"}, set())
    assert m.categories == {"car"}
    assert m.quantities == {"car": 3}
    assert m.locations == {"car": {GridCell.TOP_LEFT}}
    assert m.relations == set()


def test_extract_relation():
    m = extract_mentions("A car is parked-on the road.", {"car", "road"}, {"parked-on"})
    assert m.relations == {"car parked-on road"}


def test_extract_empty():
    assert extract_mentions("", {"car"}, {"on"}) == ExtractedMentions()
    assert extract_mentions("Nothing to see here.", {"car"}, {"on"}) == ExtractedMentions()


def test_extract_rules():
    vocab = {"car", "storage-tank", "tennis-court", "bus"}
    m = extract_mentions(
        "Two storage tanks sit in the upper left. Four buses; five cars are in the middle! The tennis court is far away.",
        vocab,
        set(),
    )
    assert m.categories == {"storage-tank", "bus", "car", "tennis-court"}
    assert m.quantities == {"storage-tank": 2, "bus": 4, "car": 5}
    assert m.locations == {"storage-tank": {GridCell.TOP_LEFT}, "car": {GridCell.CENTER}}
    # a number four tokens away is out of the window
    assert extract_mentions("7 of the big red cars", {"car"}, set()).quantities == {}
    # the first claim per category wins
    assert extract_mentions("3 cars. Actually 4 cars.", {"car"}, set()).quantities == {"car": 3}


def test_metric_examples():
    truth = GroundTruthRecord("i", {"car": 1, "tree": 2, "building": 1}, {}, frozenset())
    perfect = score_attributes(ExtractedMentions.from_truth(truth), truth)
    assert all(s == PRF(1.0, 1.0, 1.0) for s in perfect.as_tuple())

    m = ExtractedMentions(categories={"car", "tree", "road"})
    s = score_attributes(m, truth).category
    assert (s.recall, s.precision, s.f1) == pytest.approx((2 / 3, 2 / 3, 2 / 3))

    full = GroundTruthRecord(
        "i", {"car": 2}, {"car": {GridCell.CENTER: 2}}, frozenset({"car near car"})
    )
    disjoint = ExtractedMentions({"boat"}, {"boat": 2}, {"boat": {GridCell.TOP_LEFT}}, {"boat on boat"})
    assert all(s == PRF(0.0, 0.0, 0.0) for s in score_attributes(disjoint, full).as_tuple())


def test_both_sides_empty_is_perfect():
    assert prf_from_counts(0, 0, 0) == PRF(1.0, 1.0, 1.0)
    assert prf_from_counts(0, 0, 3) == PRF(0.0, 0.0, 0.0)
    assert prf_from_counts(0, 2, 0) == PRF(0.0, 0.0, 0.0)


def test_quantity_is_exact_match():
    truth = GroundTruthRecord("i", {"car": 3, "tree": 1}, {}, frozenset())
    counts = attribute_counts(ExtractedMentions({"car", "tree"}, {"car": 3, "tree": 2}), truth)["quantity"]
    assert (counts.tp, counts.predicted, counts.actual) == (1, 2, 2)


def test_micro_average_pools_counts():
    t1 = GroundTruthRecord("a", {"car": 1}, {}, frozenset())
    t2 = GroundTruthRecord("b", {"x": 1, "y": 1, "z": 1}, {}, frozenset())
    c1 = attribute_counts(ExtractedMentions({"car"}), t1)
    c2 = attribute_counts(ExtractedMentions(set()), t2)
    # micro: 1 hit out of 4 truths, not the macro mean 0.5
    assert aggregate([c1, c2]).category.recall == pytest.approx(0.25)


labels = st.sets(st.sampled_from("abcdefghij"), max_size=8)


@settings(max_examples=1000)
@given(labels, labels)
def test_harmonic_bounds(pred, truth_labels):
    truth = GroundTruthRecord("i", {t: 1 for t in truth_labels}, {}, frozenset())
    s = score_attributes(ExtractedMentions(set(pred)), truth).category
    assert 0.0 <= s.f1 <= 1.0
    if s.precision > 0 and s.recall > 0:
        assert min(s.precision, s.recall) - 1e-12 <= s.f1 <= max(s.precision, s.recall) + 1e-12
        assert s.f1 <= (s.precision + s.recall) / 2 + 1e-12
    elif pred or truth_labels:
        assert s.f1 == 0.0


def vqa_oracle(pred, humans):
    n = len(humans)
    total = Fraction(0)
    for subset in itertools.combinations(range(n), n - 1):
        matches = sum(normalize_answer(humans[i]) == normalize_answer(pred) for i in subset)
        total += min(Fraction(matches, 3), Fraction(1))
    return total / n


def test_vqa_examples():
    assert vqa_accuracy("two", ["two"] * 10) == 1.0
    assert vqa_accuracy("two", ["three"] * 10) == 0.0
    humans = ["yes"] * 3 + ["no"] * 7
    assert vqa_accuracy("Yes.", humans) == pytest.approx(0.9)
    assert vqa_oracle("yes", humans) == Fraction(9, 10)
    with pytest.raises(InputError):
        vqa_accuracy("yes", ["yes", "yes"])


def test_vqa_matches_oracle_on_fixtures():
    rng = np.random.default_rng(42)
    words = ["yes", "no", "2", "red", "the car"]
    for _ in range(20):
        n = int(rng.integers(3, 11))
        humans = [words[int(i)] for i in rng.integers(0, len(words), n)]
        pred = words[int(rng.integers(0, len(words)))]
        assert vqa_accuracy(pred, humans) == pytest.approx(float(vqa_oracle(pred, humans)), abs=1e-12)


def test_normalize_answer():
    assert normalize_answer("The  Car!") == "car"
    assert normalize_answer("don't") == "dont"


SCORES = [
    ("k=1", AttributeScores(PRF(1.0, 1.0, 1.0), PRF(0.5, 0.25, 1 / 3), PRF(2 / 3, 0.5, 4 / 7), PRF(0.0, 0.0, 0.0))),
    ("baseline", AttributeScores(*(PRF(0.6494, 0.5, 0.565) for _ in range(4)))),
]


def test_report_golden():
    assert render_report(SCORES, "md") == (GOLDEN / "report.md").read_text()
    assert render_report(SCORES, "csv") == (GOLDEN / "report.csv").read_text()


def test_report_shapes():
    assert render_report([], "md").count("\n") == 2
    assert render_report([], "csv") == "method,recall_category,recall_quantity,recall_location,recall_relation,f1_category,f1_quantity,f1_location,f1_relation\n"
    row = render_report(SCORES[:1]).splitlines()[2]
    assert len(row.strip("| ").split(" | ")) == 9
    with pytest.raises(InputError):
        render_report(SCORES, "xlsx")
    assert AttributeScores.from_dict(SCORES[0][1].to_dict()) == SCORES[0][1]


def test_items_roundtrip():
    graphs, items = make_corpus(3)
    for item in items:
        assert item_from_dict(item_to_dict(item)) == item


def test_evaluate_answers_truth_scoping(car_road):
    items = [EvalItem("carroad", "Where is the car?"), EvalItem("missing", "?")]
    result = evaluate_answers([car_road], items, ["There is 1 car in the center.", "x"])
    assert result.answered == 1 and result.failures == 1
    # whole-image truth has a road too, so recall is 1/2 but precision is perfect
    assert result.scores.category == PRF(0.5, 1.0, pytest.approx(2 / 3))
    assert result.scores.quantity == PRF(0.5, 1.0, pytest.approx(2 / 3))
    assert result.scores.relation == PRF(0.0, 0.0, 0.0)
    assert result.vqa_accuracy is None

    scoped = EvalItem("carroad", "Where is the car?", GroundTruthRecord.from_dict("carroad", {
        "categories": {"car": 1}, "locations": {"car": {"center": 1}}}), ("1 car",) * 3)
    result = evaluate_answers([car_road], [scoped], ["There is 1 car in the center."])
    assert all(s == PRF(1.0, 1.0, 1.0) for s in result.scores.as_tuple())
    assert result.vqa_accuracy == 0.0


def test_ablation_rows_and_failures(car_road):
    graphs, items = make_corpus(4, seed=1)
    rows = run_ablation(graphs, items + [EvalItem("ghost", "?")], k_values=[4])
    assert [r.k for r in rows] == [4]
    assert rows[0].answered == 4 and rows[0].failures == 1
    with pytest.raises(InputError):
        run_ablation(graphs, items, k_values=[0])


def test_ablation_parallel_matches_serial():
    graphs, items = make_corpus(6, seed=3)
    serial = run_ablation(graphs, items, config=PipelineConfig(jobs=1))
    parallel = run_ablation(graphs, items, config=PipelineConfig(jobs=4))
    assert ablation_report(serial, "csv") == ablation_report(parallel, "csv")
    assert [r.k for r in serial] == [1, 2, 4, 8, 16]
