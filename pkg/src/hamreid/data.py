"""Manifests, image loading and the procedural pedestrian generator."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import load_tensor, make_rng

SPLITS = ("train", "query", "gallery")
MANIFEST_HEADER = ["path", "pid", "camid", "split"]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    path: Path
    pid: int
    camid: int
    split: str


@dataclass
class Manifest:
    records: list[Record]

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[Record]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def write(self, path: str | Path) -> None:
        path = Path(path)
        root = path.parent.resolve()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(MANIFEST_HEADER)
            for r in self.records:
                p = r.path.resolve()
                rel = p.relative_to(root) if p.is_relative_to(root) else p
                w.writerow([rel.as_posix(), r.pid, r.camid, r.split])


def load_manifest(path: str | Path, check_files: bool = True) -> Manifest:
    """Parse ``path,pid,camid,split`` rows; relative paths resolve against the file's folder."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"{path}: manifest not found")
    root = path.parent
    records, seen = [], set()
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(f"{path}:1: header must be {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(rows, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            p, pid, cam, split = (c.strip() for c in row)
            try:
                pid, cam = int(pid), int(cam)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: pid and camid must be integers") from None
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: bad split {split!r}")
            if pid < 0 and split != "gallery":
                raise ManifestError(f"{path}:{lineno}: junk pid {pid} only allowed in gallery")
            full = Path(p) if Path(p).is_absolute() else root / p
            if full in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate path {p}")
            if check_files and not full.is_file():
                raise ManifestError(f"{path}:{lineno}: missing image {p}")
            seen.add(full)
            records.append(Record(full, pid, cam, split))
    return Manifest(records)


def load_image(path: str | Path, hw: tuple[int, int]) -> np.ndarray:
    """``3×H×W`` float image in [0, 1], resized bilinearly to ``hw`` if needed.

    PNG (or anything Pillow reads) and tensor dumps (``.tensor``) are accepted.
    """
    path = Path(path)
    if path.suffix == ".tensor":
        arr = load_tensor(path)
        if arr.shape != (3,) + tuple(hw):
            raise ValueError(f"{path}: expected shape (3, {hw[0]}, {hw[1]}), got {arr.shape}")
        return arr
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (hw[1], hw[0]):
            im = im.resize((hw[1], hw[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def load_images(records: list[Record], hw: tuple[int, int]) -> np.ndarray:
    if not records:
        return np.zeros((0, 3) + tuple(hw))
    return np.stack([load_image(r.path, hw) for r in records])


def relabel(pids) -> tuple[np.ndarray, dict[int, int]]:
    """Map arbitrary pids to contiguous class indices in sorted pid order."""
    uniq = sorted(set(int(p) for p in pids))
    mapping = {p: i for i, p in enumerate(uniq)}
    return np.array([mapping[int(p)] for p in pids], dtype=np.intp), mapping


# ---------------------------------------------------------------------------
# synthetic pedestrians


@dataclass(frozen=True)
class Identity:
    torso: np.ndarray
    legs: np.ndarray
    frequency: int


def _identity(rng) -> Identity:
    return Identity(rng.uniform(0.05, 0.95, 3), rng.uniform(0.05, 0.95, 3), int(rng.integers(0, 4)))


def render_person(ident: Identity, hw: tuple[int, int], cam_gain: float, cam_bias: float,
                  rng) -> np.ndarray:
    h, w = hw
    img = np.empty((3, h, w))
    img[:] = rng.uniform(0.2, 0.6)
    img += rng.normal(0, 0.05, size=(3, 1, 1))
    dy, dx = rng.integers(-2, 3, size=2) * max(1, h // 48)
    ys = np.arange(h)[:, None] - dy
    xs = np.arange(w)[None, :] - dx
    cx = w / 2
    head = (ys - 0.09 * h) ** 2 / (0.07 * h) ** 2 + (xs - cx) ** 2 / (0.12 * w) ** 2 <= 1
    torso = (ys >= 0.17 * h) & (ys < 0.56 * h) & (np.abs(xs - cx) < 0.27 * w)
    legs = (ys >= 0.56 * h) & (ys < 0.95 * h) & (np.abs(xs - cx) < 0.22 * w) \
        & (np.abs(xs - cx) > 0.03 * w)
    stripes = np.broadcast_to(
        1.0 - 0.35 * (np.sin(2 * np.pi * ident.frequency * (ys - 0.17 * h) / (0.39 * h)) > 0.3), (h, w))
    for c in range(3):
        img[c][head] = (0.85, 0.65, 0.5)[c]
        img[c][torso] = (ident.torso[c] * stripes)[torso] if ident.frequency else ident.torso[c]
        img[c][legs] = ident.legs[c]
    img = img * cam_gain + cam_bias + rng.normal(0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_generate(n_ids: int, imgs_per_id: int, cams: int, hw: tuple[int, int], seed: int,
                   out_dir: str | Path, test_ids: int | None = None,
                   closed_set: bool = False) -> Manifest:
    """Write procedural pedestrians plus ``manifest.csv`` to ``out_dir``.

    Image ``j`` of an identity is shot by camera ``j % cams``. By default the
    last ``test_ids`` identities (half unless given) are held out entirely:
    their camera-0 images form the query split and the other cameras the
    gallery. With ``closed_set`` every identity trains on its first half of
    images and the second half is split into query (camera 0) and gallery.
    """
    if n_ids < 2:
        raise ValueError("need at least 2 identities")
    if cams < 1 or imgs_per_id < 1:
        raise ValueError("need at least one camera and one image per identity")
    test_ids = n_ids // 2 if test_ids is None else test_ids
    if closed_set and (cams < 2 or imgs_per_id < 4):
        raise ValueError("closed-set splits need >= 2 cameras and >= 4 images per identity")
    if test_ids and (cams < 2 or imgs_per_id < 2):
        raise ValueError("held-out identities need >= 2 cameras and >= 2 images each")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed, 0x5E7)
    idents = [_identity(rng) for _ in range(n_ids)]
    gains = 1.0 + rng.uniform(-0.25, 0.25, size=cams)
    biases = rng.uniform(-0.08, 0.08, size=cams)
    records = []
    for pid, ident in enumerate(idents):
        for j in range(imgs_per_id):
            held = j >= imgs_per_id // 2 if closed_set else pid >= n_ids - test_ids
            cam = j % cams
            img = render_person(ident, hw, gains[cam], biases[cam], make_rng(seed, pid, j))
            path = out / "images" / f"{pid:04d}_c{cam}_{j:03d}.png"
            Image.fromarray(np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)).save(path)
            split = ("query" if cam == 0 else "gallery") if held else "train"
            records.append(Record(path, pid, cam, split))
    manifest = Manifest(records)
    manifest.write(out / "manifest.csv")
    return manifest


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """Binary 8-bit graymap of a 2-d array in [0, 1], scaled to 0-255."""
    v = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if v.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got shape {v.shape}")
    px = np.clip(np.round(v * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode())
        fh.write(px.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, dims, maxval, data = fh.read().split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(t) for t in dims.split())
    return np.frombuffer(data, dtype=np.uint8, count=w * h).reshape(h, w)


def save_embeddings(prefix: str | Path, descriptors: np.ndarray, records: list[Record]) -> None:
    """``<prefix>.tensor`` with one descriptor row per image, plus ``<prefix>.csv``."""
    from .tensor import save_tensor

    prefix = Path(prefix)
    save_tensor(prefix.with_name(prefix.name + ".tensor"), descriptors)
    with open(prefix.with_name(prefix.name + ".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "pid", "camid"])
        for r in records:
            w.writerow([Path(r.path).as_posix(), r.pid, r.camid])


def load_embeddings(prefix: str | Path):
    """Inverse of :func:`save_embeddings`; accepts the prefix or the ``.tensor`` path."""
    prefix = Path(prefix)
    if prefix.suffix in (".tensor", ".csv"):
        prefix = prefix.with_suffix("")
    desc = load_tensor(prefix.with_name(prefix.name + ".tensor"))
    with open(prefix.with_name(prefix.name + ".csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != len(desc):
        raise ValueError(f"{prefix}: {len(desc)} descriptors but {len(rows)} sidecar rows")
    return (desc, [r["path"] for r in rows], np.array([int(r["pid"]) for r in rows]),
            np.array([int(r["camid"]) for r in rows]))
