import json
import math

import pytest
from hypothesis import given, strategies as st

from roomforge.errors import ParseError, SchemaError, ValidationError
from roomforge.scene import (SemanticBox, ViewLimits, Viewpoint, load_proxy, point_in_box,
                             serialize_proxy, validate_viewpoint)

from conftest import standard_room

MINIMAL = {
    "style_prompt": "a cozy bedroom",
    "shell": {"floor_polygon": [[-2, -2], [2, -2], [2, 2], [-2, 2]], "height": 3},
    "palette": [
        {"id": 1, "name": "wall", "color": [200, 200, 200]},
        {"id": 2, "name": "floor", "color": [120, 90, 60]},
        {"id": 3, "name": "ceiling", "color": [230, 230, 230]},
        {"id": 4, "name": "bed", "color": [60, 90, 200]},
    ],
    "boxes": [
        {"instance_id": 1, "class": "bed", "center": [0, 0.4, 1.0], "size": [1.8, 0.8, 1.4]},
    ],
}


def doc(**changes):
    d = json.loads(json.dumps(MINIMAL))
    d.update(changes)
    return json.dumps(d).encode()


class TestLoadProxy:
    def test_minimal_file(self):
        room = load_proxy(doc())
        assert len(room.boxes) == 1
        assert room.palette.count >= 4
        assert room.boxes[0].class_id == 4
        assert room.shell.height == 3.0

    def test_malformed_json(self):
        with pytest.raises(ParseError):
            load_proxy(b"{not json")

    def test_missing_field(self):
        d = json.loads(json.dumps(MINIMAL))
        del d["shell"]
        with pytest.raises(SchemaError, match="shell"):
            load_proxy(json.dumps(d).encode())

    def test_extra_field(self):
        d = json.loads(json.dumps(MINIMAL))
        d["extra"] = 1
        with pytest.raises(SchemaError, match="extra"):
            load_proxy(json.dumps(d).encode())

    def test_zero_size_box(self):
        boxes = [{"instance_id": 1, "class": "bed", "center": [0, 0.5, 0], "size": [0, 1, 1]}]
        with pytest.raises(ValidationError, match="size.x"):
            load_proxy(doc(boxes=boxes))

    def test_duplicate_instance_id(self):
        boxes = [
            {"instance_id": 5, "class": "bed", "center": [0, 0.5, 1], "size": [1, 1, 1]},
            {"instance_id": 5, "class": "bed", "center": [0, 0.5, -1], "size": [1, 1, 1]},
        ]
        with pytest.raises(ValidationError, match="duplicate instance id"):
            load_proxy(doc(boxes=boxes))

    def test_unknown_class_name(self):
        boxes = [{"instance_id": 1, "class": "dragon", "center": [0, 0.5, 0], "size": [1, 1, 1]}]
        with pytest.raises(ValidationError, match="dragon"):
            load_proxy(doc(boxes=boxes))

    def test_box_outside_shell(self):
        boxes = [{"instance_id": 1, "class": "bed", "center": [50, 0.5, 0], "size": [1, 1, 1]}]
        with pytest.raises(ValidationError, match="shell"):
            load_proxy(doc(boxes=boxes))

    def test_empty_prompt(self):
        with pytest.raises(ValidationError, match="style_prompt"):
            load_proxy(doc(style_prompt=""))

    def test_missing_reserved_class(self):
        palette = json.loads(json.dumps([e for e in MINIMAL["palette"]
                                         if e["name"] != "ceiling"]))
        for i, e in enumerate(palette):
            e["id"] = i + 1
        with pytest.raises(ValidationError, match="ceiling"):
            load_proxy(doc(palette=palette))

    def test_sparse_palette_ids(self):
        palette = json.loads(json.dumps(MINIMAL["palette"]))
        palette[-1]["id"] = 9
        with pytest.raises(ValidationError, match="dense"):
            load_proxy(doc(palette=palette))

    def test_self_intersecting_polygon(self):
        shell = {"floor_polygon": [[-2, -2], [2, 1], [2, -2], [-2, 2]], "height": 3}
        with pytest.raises(ValidationError, match="self-intersecting"):
            load_proxy(doc(shell=shell))

    def test_round_trip_identity(self):
        room = standard_room()
        assert load_proxy(serialize_proxy(room)) == room

    def test_round_trip_from_file(self):
        room = load_proxy(doc())
        again = load_proxy(serialize_proxy(room))
        assert again == room


class TestPointInBox:
    BOX = SemanticBox(instance_id=1, class_id=4, center=(0.0, 0.0, 0.0), size=(2.0, 2.0, 2.0))

    def test_center(self):
        assert point_in_box(self.BOX, (0, 0, 0), 0)

    def test_outside_then_inflated(self):
        assert not point_in_box(self.BOX, (1.05, 0, 0), 0)
        assert point_in_box(self.BOX, (1.05, 0, 0), 0.1)

    def test_closed_corner(self):
        assert point_in_box(self.BOX, (1.0, 1.0, 1.0), 0)

    @given(
        point=st.tuples(*[st.floats(-3, 3) for _ in range(3)]),
        eps1=st.floats(0, 2),
        eps2=st.floats(0, 2),
    )
    def test_monotone_in_inflation(self, point, eps1, eps2):
        lo, hi = sorted((eps1, eps2))
        if point_in_box(self.BOX, point, lo):
            assert point_in_box(self.BOX, point, hi)


class TestValidateViewpoint:
    def look(self, pos, roll=0.0):
        return Viewpoint(pos, yaw=0.0, roll=roll, fov_h=90.0, width=64, height=64)

    def test_center_of_empty_room_passes(self, empty_room):
        report = validate_viewpoint(empty_room, self.look((0.0, 1.5, 0.0)))
        assert report.ok, report.flags

    def test_excessive_roll(self, empty_room):
        report = validate_viewpoint(empty_room, self.look((0.0, 1.5, 0.0),
                                                          roll=math.radians(10)))
        assert any("roll" in f for f in report.flags)
        ok = validate_viewpoint(empty_room, self.look((0.0, 1.5, 0.0), roll=math.radians(8.0)))
        assert not any("roll" in f for f in ok.flags)

    def test_camera_inside_box(self, five_box_room):
        box = five_box_room.boxes[0]
        report = validate_viewpoint(five_box_room, self.look(box.center))
        assert any("inside object" in f for f in report.flags)

    def test_camera_outside_shell(self, empty_room):
        report = validate_viewpoint(empty_room, self.look((10.0, 1.5, 0.0)))
        assert any("outside shell" in f for f in report.flags)

    def test_class_coverage_flag(self, five_box_room):
        # nose against the bed: one object class fills most of the view
        bed = five_box_room.boxes[0]
        pos = (bed.center[0], 0.6, bed.center[2] + bed.size[2] / 2 + 0.2)
        report = validate_viewpoint(five_box_room,
                                    Viewpoint(pos, yaw=math.pi, fov_h=90.0,
                                              width=64, height=64))
        assert any("covers" in f for f in report.flags)

    def test_shell_classes_do_not_trip_coverage(self, empty_room):
        report = validate_viewpoint(empty_room, self.look((0.0, 1.5, 1.5)))
        assert not any("covers" in f for f in report.flags)

    def test_depth_cap(self):
        from conftest import _room

        long_room = _room(size=(40.0, 40.0))
        report = validate_viewpoint(long_room, self.look((-19.0, 1.5, -19.0)))
        assert any("depth" in f for f in report.flags)
        small = validate_viewpoint(_room(), self.look((0.0, 1.5, 0.0)),
                                   ViewLimits(max_depth=15.0))
        assert not any("depth" in f for f in small.flags)


class TestPaletteReferences:
    def test_every_box_class_in_palette(self, five_box_room):
        for box in five_box_room.boxes:
            assert five_box_room.palette.name_of(box.class_id)
