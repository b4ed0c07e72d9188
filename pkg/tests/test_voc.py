import pytest

from src.errors import AnnotationParseError, ContractError
from src.parse.voc import (
    AnnotationSet,
    BoundingBox,
    clip_annotations,
    parse_annotations,
    render_annotations,
    scale_boxes,
)

TWO_OBJECTS = """<?xml version="1.0"?>
<annotation>
  <folder>night</folder>
  <filename>000123.png</filename>
  <size><width>640</width><height>512</height><depth>3</depth></size>
  <object>
    <name>People</name>
    <pose>Unspecified</pose>
    <bndbox><xmin>10</xmin><ymin>20</ymin><xmax>50</xmax><ymax>80</ymax></bndbox>
  </object>
  <object>
    <name>Car</name>
    <difficult>0</difficult>
    <bndbox><xmin>100</xmin><ymin>40</ymin><xmax>180</xmax><ymax>90</ymax></bndbox>
  </object>
</annotation>
"""


def _doc(*objects, size="<size><width>100</width><height>60</height></size>"):
    body = "".join(
        f"<object><name>{name}</name><bndbox><xmin>{x0}</xmin><ymin>{y0}</ymin>"
        f"<xmax>{x1}</xmax><ymax>{y1}</ymax></bndbox></object>"
        for name, x0, y0, x1, y1 in objects
    )
    return f"<annotation><filename>img.png</filename>{size}{body}</annotation>"


class TestParse:
    def test_two_objects(self):
        ann = parse_annotations(TWO_OBJECTS)
        assert ann.image_id == "000123"
        assert ann.image_size == (512, 640)
        assert ann.boxes == [
            BoundingBox(9, 19, 50, 80, "People"),
            BoundingBox(99, 39, 180, 90, "Car"),
        ]
        assert [(b.width, b.height) for b in ann] == [(41, 61), (81, 51)]
        assert ann.skipped == 0

    def test_no_objects(self):
        ann = parse_annotations("<annotation><filename>a.png</filename></annotation>")
        assert len(ann) == 0
        assert ann.image_size is None

    def test_degenerate_box_dropped(self):
        ann = parse_annotations(_doc(("a", 30, 10, 30, 20), ("b", 5, 5, 10, 10)))
        assert [b.label for b in ann] == ["b"]
        assert ann.skipped == 1

    def test_box_clipped_to_image(self):
        ann = parse_annotations(_doc(("a", 90, 50, 150, 70)))
        assert ann.boxes == [BoundingBox(89, 49, 100, 60, "a")]

    def test_box_outside_image_dropped(self):
        ann = parse_annotations(_doc(("a", 120, 10, 130, 20)))
        assert len(ann) == 0
        assert ann.skipped == 1

    def test_explicit_size_wins(self):
        ann = parse_annotations(_doc(("a", 1, 1, 80, 50)), image_id="x", image_size=(20, 30))
        assert ann.image_id == "x"
        assert ann.boxes == [BoundingBox(0, 0, 30, 20, "a")]

    def test_fractional_coordinates_truncate(self):
        ann = parse_annotations(_doc(("a", "10.0", "5.7", "20.2", "15")))
        assert ann.boxes == [BoundingBox(9, 4, 20, 15, "a")]

    def test_missing_coordinate_names_element(self):
        doc = _doc(("a", 1, 1, 5, 5)).replace("<xmax>5</xmax>", "")
        with pytest.raises(AnnotationParseError, match=r"object\[1\]/bndbox/xmax"):
            parse_annotations(doc)

    def test_non_numeric_coordinate(self):
        with pytest.raises(AnnotationParseError, match="ymin"):
            parse_annotations(_doc(("a", 1, "top", 5, 5)))

    def test_missing_bndbox(self):
        with pytest.raises(AnnotationParseError, match=r"object\[1\]/bndbox"):
            parse_annotations("<annotation><object><name>a</name></object></annotation>")

    def test_malformed_xml(self):
        with pytest.raises(AnnotationParseError):
            parse_annotations("<annotation><object>")


class TestScale:
    def test_identity(self):
        ann = AnnotationSet("x", [BoundingBox(10, 20, 50, 80, "p")])
        assert scale_boxes(ann, (100, 100), (100, 100)).boxes == ann.boxes

    def test_double(self):
        ann = AnnotationSet("x", [BoundingBox(10, 20, 50, 80, "p")])
        scaled = scale_boxes(ann, (100, 100), (200, 200))
        assert scaled.boxes == [BoundingBox(20, 40, 100, 160, "p")]
        assert scaled.image_size == (200, 200)

    def test_floor_and_ceil(self):
        ann = AnnotationSet("x", [BoundingBox(3, 3, 7, 7)])
        assert scale_boxes(ann, (10, 10), (4, 4)).boxes == [BoundingBox(1, 1, 3, 3)]

    def test_collapsed_box_dropped(self):
        ann = AnnotationSet("x", [BoundingBox(5, 5, 6, 6), BoundingBox(0, 0, 50, 50)])
        scaled = scale_boxes(ann, (100, 100), (10, 10))
        assert scaled.boxes == [BoundingBox(0, 0, 5, 5)]
        assert scaled.skipped == 1

    def test_bad_sizes(self):
        with pytest.raises(ContractError):
            scale_boxes(AnnotationSet("x"), (0, 10), (10, 10))


class TestRender:
    def test_roundtrip(self):
        ann = AnnotationSet("img7", [BoundingBox(0, 0, 4, 3, "target"), BoundingBox(10, 12, 30, 20, "car")])
        back = parse_annotations(render_annotations(ann, (40, 50)))
        assert back.image_id == "img7"
        assert back.image_size == (40, 50)
        assert back.boxes == ann.boxes

    def test_clip_annotations(self):
        ann = AnnotationSet("x", [BoundingBox(-3, 2, 5, 9), BoundingBox(20, 20, 25, 25)])
        clipped = clip_annotations(ann, 8, 10)
        assert clipped.boxes == [BoundingBox(0, 2, 5, 8)]
        assert clipped.skipped == 1
