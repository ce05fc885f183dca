import json

import pytest

from sgrag.scene_graph import parse_scene_graph

CAR_ROAD = {
    "image_id": "carroad",
    "width": 300,
    "height": 300,
    "objects": [
        {"id": 1, "label": "car", "bbox": [130, 130, 170, 170]},
        {"id": 2, "label": "road", "bbox": [0, 200, 300, 260]},
    ],
    "relations": [{"subject": 1, "predicate": "parked-on", "object": 2}],
}


@pytest.fixture
def car_road_doc():
    return json.loads(json.dumps(CAR_ROAD))


@pytest.fixture
def car_road(car_road_doc):
    return parse_scene_graph(car_road_doc)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
