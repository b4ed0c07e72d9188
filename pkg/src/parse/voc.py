"""
Pascal-VOC style annotation files.

Coordinates in the file are 1-based and inclusive; in memory a box is 0-based
and half-open, so file (xmin, ymin, xmax, ymax) becomes
(xmin - 1, ymin - 1, xmax, ymax). A box whose file xmax <= xmin or ymax <= ymin
is degenerate and is dropped, as is a box that clips to nothing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

from lxml import etree

from ..errors import AnnotationParseError, ContractError
from ..log import get_logger

log = get_logger("voc")

_COORDS = ("xmin", "ymin", "xmax", "ymax")


@dataclass(frozen=True)
class BoundingBox:
    xmin: int
    ymin: int
    xmax: int
    ymax: int
    label: str = ""

    @property
    def width(self) -> int:
        return self.xmax - self.xmin

    @property
    def height(self) -> int:
        return self.ymax - self.ymin

    def clipped(self, height: int, width: int) -> Optional["BoundingBox"]:
        """Clip to [0, width) x [0, height); None if nothing is left."""
        x0, y0 = max(0, self.xmin), max(0, self.ymin)
        x1, y1 = min(width, self.xmax), min(height, self.ymax)
        if x1 <= x0 or y1 <= y0:
            return None
        return replace(self, xmin=x0, ymin=y0, xmax=x1, ymax=y1)


@dataclass
class AnnotationSet:
    image_id: str
    boxes: List[BoundingBox] = field(default_factory=list)
    skipped: int = 0
    image_size: Optional[Tuple[int, int]] = None  # (H, W) when known

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)


def clip_annotations(ann: AnnotationSet, height: int, width: int) -> AnnotationSet:
    kept: List[BoundingBox] = []
    dropped = 0
    for box in ann.boxes:
        c = box.clipped(height, width)
        if c is None:
            dropped += 1
        else:
            kept.append(c)
    if dropped:
        log.warning("%s: %d box(es) fell outside %dx%d and were dropped", ann.image_id, dropped, height, width)
    return AnnotationSet(ann.image_id, kept, ann.skipped + dropped, (height, width))


def _coordinate(bndbox: etree._Element, tag: str, where: str) -> int:
    text = bndbox.findtext(tag)
    if text is None or not text.strip():
        raise AnnotationParseError(f"{where}/bndbox/{tag} is missing")
    try:
        return int(float(text.strip()))
    except ValueError as e:
        raise AnnotationParseError(f"{where}/bndbox/{tag} is not a number: {text.strip()!r}") from e


def _size_of(root: etree._Element) -> Optional[Tuple[int, int]]:
    size = root.find("size")
    if size is None:
        return None
    try:
        w = int(float(size.findtext("width") or "0"))
        h = int(float(size.findtext("height") or "0"))
    except ValueError:
        return None
    return (h, w) if h > 0 and w > 0 else None


def parse_annotations(
    xml_text: str | bytes,
    image_id: Optional[str] = None,
    image_size: Optional[Tuple[int, int]] = None,
) -> AnnotationSet:
    """
    Parse one VOC document into an AnnotationSet.

    `image_size` (H, W) wins over the document's <size> element for clipping.
    Unknown elements are ignored; a missing name, bndbox or coordinate raises
    AnnotationParseError naming the element, e.g. "object[2]/bndbox/xmax".
    """
    raw = xml_text.encode("utf-8") if isinstance(xml_text, str) else xml_text
    parser = etree.XMLParser(resolve_entities=False, no_network=True)
    try:
        root = etree.fromstring(raw, parser)
    except etree.XMLSyntaxError as e:
        raise AnnotationParseError(f"malformed annotation XML: {e}") from e

    if image_id is None:
        filename = (root.findtext("filename") or "").strip()
        image_id = filename.rsplit(".", 1)[0] if filename else ""
    size = image_size or _size_of(root)

    boxes: List[BoundingBox] = []
    skipped = 0
    for i, obj in enumerate(root.findall("object"), 1):
        where = f"object[{i}]"
        name = obj.findtext("name")
        if name is None:
            raise AnnotationParseError(f"{where}/name is missing")
        bndbox = obj.find("bndbox")
        if bndbox is None:
            raise AnnotationParseError(f"{where}/bndbox is missing")
        xmin, ymin, xmax, ymax = (_coordinate(bndbox, tag, where) for tag in _COORDS)
        if xmax <= xmin or ymax <= ymin:
            skipped += 1
            log.warning("%s %s: degenerate box (%d,%d)-(%d,%d) dropped", image_id, where, xmin, ymin, xmax, ymax)
            continue
        box: Optional[BoundingBox] = BoundingBox(xmin - 1, ymin - 1, xmax, ymax, name.strip())
        if size is not None:
            box = box.clipped(*size)
        elif box.xmax <= 0 or box.ymax <= 0:
            box = None
        else:
            box = replace(box, xmin=max(0, box.xmin), ymin=max(0, box.ymin))
        if box is None:
            skipped += 1
            log.warning("%s %s: box lies outside the image and was dropped", image_id, where)
            continue
        boxes.append(box)
    return AnnotationSet(image_id, boxes, skipped, size)


def scale_boxes(
    ann: AnnotationSet,
    from_hw: Tuple[int, int],
    to_hw: Tuple[int, int],
    min_extent: float = 0.5,
) -> AnnotationSet:
    """
    Rescale boxes from an image of size `from_hw` to `to_hw`.

    Mins are floored and maxes ceiled, then clipped. A box whose scaled extent
    is below `min_extent` pixels on either axis has collapsed and is dropped.
    """
    (fh, fw), (th, tw) = from_hw, to_hw
    if min(fh, fw, th, tw) <= 0:
        raise ContractError(f"scale_boxes needs positive sizes, got {from_hw} -> {to_hw}")
    sy, sx = th / fh, tw / fw
    kept: List[BoundingBox] = []
    dropped = 0
    for box in ann.boxes:
        if box.width * sx < min_extent or box.height * sy < min_extent:
            dropped += 1
            continue
        scaled = BoundingBox(
            math.floor(box.xmin * sx),
            math.floor(box.ymin * sy),
            math.ceil(box.xmax * sx),
            math.ceil(box.ymax * sy),
            box.label,
        ).clipped(th, tw)
        if scaled is None:
            dropped += 1
        else:
            kept.append(scaled)
    if dropped:
        log.warning("%s: %d box(es) collapsed when rescaling %s -> %s", ann.image_id, dropped, from_hw, to_hw)
    return AnnotationSet(ann.image_id, kept, ann.skipped + dropped, (th, tw))


def render_annotations(
    ann: AnnotationSet,
    image_size: Tuple[int, int],
    filename: Optional[str] = None,
) -> bytes:
    """Serialize back to a VOC document (1-based inclusive coordinates)."""
    h, w = image_size
    root = etree.Element("annotation")
    etree.SubElement(root, "filename").text = filename or f"{ann.image_id}.png"
    size = etree.SubElement(root, "size")
    etree.SubElement(size, "width").text = str(w)
    etree.SubElement(size, "height").text = str(h)
    etree.SubElement(size, "depth").text = "1"
    for b in ann.boxes:
        obj = etree.SubElement(root, "object")
        etree.SubElement(obj, "name").text = b.label
        coords = (b.xmin + 1, b.ymin + 1, b.xmax, b.ymax)
        bndbox = etree.SubElement(obj, "bndbox")
        for tag, value in zip(_COORDS, coords):
            etree.SubElement(bndbox, tag).text = str(value)
    return etree.tostring(root, pretty_print=True, xml_declaration=True, encoding="utf-8")
