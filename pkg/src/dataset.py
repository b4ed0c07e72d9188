"""
On-disk dataset layout:

    root/ir/<id>.png     infrared, 8-bit gray (RGB is reduced to luminance)
    root/vis/<id>.png    visible, 8-bit RGB (gray is replicated)
    root/ann/<id>.xml    optional VOC annotations

An id is usable when both images exist; a missing annotation means an empty
ROI set.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .errors import DatasetError
from .images import ImagePair, load_pair, resize_pair
from .log import get_logger
from .parse.voc import AnnotationSet, clip_annotations, parse_annotations, scale_boxes

log = get_logger("dataset")

IR_DIR, VIS_DIR, ANN_DIR = "ir", "vis", "ann"
MANIFEST_HEADER = "# fusion manifest v1"


@dataclass
class DatasetManifest:
    root: str
    ids: List[str] = field(default_factory=list)

    @property
    def ir_dir(self) -> str:
        return os.path.join(self.root, IR_DIR)

    @property
    def vis_dir(self) -> str:
        return os.path.join(self.root, VIS_DIR)

    @property
    def ann_dir(self) -> str:
        return os.path.join(self.root, ANN_DIR)

    def ir_path(self, pair_id: str) -> str:
        return os.path.join(self.ir_dir, f"{pair_id}.png")

    def vis_path(self, pair_id: str) -> str:
        return os.path.join(self.vis_dir, f"{pair_id}.png")

    def ann_path(self, pair_id: str) -> str:
        return os.path.join(self.ann_dir, f"{pair_id}.xml")

    def __len__(self) -> int:
        return len(self.ids)


def _png_stems(directory: str) -> set[str]:
    return {name[:-4] for name in os.listdir(directory) if name.endswith(".png")}


def _read_split(path: str) -> List[str]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [line.strip() for line in f if line.strip() and not line.startswith("#")]
    except OSError as e:
        raise DatasetError(f"{path}: cannot read split list ({e})") from e


def build_manifest(root: str, split: Optional[str] = None) -> DatasetManifest:
    """
    List ids present in both root/ir and root/vis, sorted lexicographically.

    With `split`, only ids named in that file (one per line) are kept.
    """
    for sub in (IR_DIR, VIS_DIR):
        path = os.path.join(root, sub)
        if not os.path.isdir(path):
            raise DatasetError(f"{path}: required directory is missing")
    ids = _png_stems(os.path.join(root, IR_DIR)) & _png_stems(os.path.join(root, VIS_DIR))
    if split is not None:
        wanted = set(_read_split(split))
        missing = wanted - ids
        if missing:
            log.warning("%d id(s) from split %s have no image pair: %s", len(missing), split, ", ".join(sorted(missing)[:5]))
        ids &= wanted
    manifest = DatasetManifest(root, sorted(ids))
    if not manifest.ids:
        log.warning("No IR/VIS pairs found under %s", root)
    else:
        log.info("Manifest: %d pair(s) under %s", len(manifest), root)
    return manifest


def write_manifest(manifest: DatasetManifest, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"{MANIFEST_HEADER}\n")
        f.write(f"root={manifest.root}\n")
        for pair_id in manifest.ids:
            f.write(f"{pair_id}\n")


def read_manifest(path: str) -> DatasetManifest:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [line.rstrip("\n") for line in f]
    except OSError as e:
        raise DatasetError(f"{path}: cannot read manifest ({e})") from e
    if len(lines) < 2 or lines[0] != MANIFEST_HEADER or not lines[1].startswith("root="):
        raise DatasetError(f"{path}: not a manifest file")
    ids = [line for line in lines[2:] if line]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{path}: duplicate ids in manifest")
    return DatasetManifest(lines[1][len("root="):], ids)


def load_annotations(manifest: DatasetManifest, pair_id: str, image_size: Tuple[int, int]) -> AnnotationSet:
    path = manifest.ann_path(pair_id)
    if not os.path.isfile(path):
        return AnnotationSet(pair_id, [], 0, image_size)
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DatasetError(f"{path}: cannot read annotations ({e})") from e
    return parse_annotations(raw, image_id=pair_id, image_size=image_size)


def load_sample(
    manifest: DatasetManifest,
    pair_id: str,
    size: Optional[Tuple[int, int]] = None,
) -> Tuple[ImagePair, AnnotationSet]:
    """Load a pair at its native size, then resize it and its boxes to `size` if given."""
    native = load_pair(pair_id, manifest.ir_path(pair_id), manifest.vis_path(pair_id))
    ann = load_annotations(manifest, pair_id, native.size)
    if size is None or tuple(size) == native.size:
        return native, ann
    pair = resize_pair(native, tuple(size))
    return pair, clip_annotations(scale_boxes(ann, native.size, tuple(size)), *size)
