"""Synthetic echo phantoms, PGM (P5) files, dataset manifests and metrics CSV."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError, FormatError, IntegrityError, PhantomSpecError

# class intensities: background tissue, blood pool (dark), myocardial ring (bright)
INTENSITY = (70.0, 20.0, 170.0)


@dataclass
class PhantomSpec:
    height: int = 112
    width: int = 112
    cx: float = 56.0
    cy: float = 56.0
    a: float = 20.0
    b: float = 12.0
    theta: float = 0.0
    ring: float = 4.0
    speckle: float = 0.3
    blur: float = 1.0
    background: float = INTENSITY[0]
    classes: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.a < 3 or self.b < 3:
            raise PhantomSpecError(f"semi-axes must be >= 3 px, got a={self.a}, b={self.b}")
        if self.classes not in (2, 3):
            raise PhantomSpecError(f"phantoms have 2 or 3 classes, got {self.classes}")
        # extents of the outer (ring) ellipse along the canvas axes
        ao, bo = self.a + self.ring, self.b + self.ring
        c, s = math.cos(self.theta), math.sin(self.theta)
        ex = math.hypot(ao * c, bo * s)
        ey = math.hypot(ao * s, bo * c)
        if self.cx - ex < 0 or self.cx + ex > self.width or self.cy - ey < 0 or self.cy + ey > self.height:
            raise PhantomSpecError(
                f"ellipse (center {self.cx:.1f},{self.cy:.1f}, extents {ex:.1f}x{ey:.1f}) "
                f"leaves the {self.width}x{self.height} canvas"
            )


def ellipse_mask(h: int, w: int, cx: float, cy: float, a: float, b: float,
                 theta: float) -> np.ndarray:
    """Pixels whose centres (col + 0.5, row + 0.5) fall inside the rotated ellipse."""
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    c, s = math.cos(theta), math.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return (uint8 image, uint8 mask) for one phantom."""
    spec.validate()
    h, w = spec.height, spec.width
    cavity = ellipse_mask(h, w, spec.cx, spec.cy, spec.a, spec.b, spec.theta)
    outer = ellipse_mask(h, w, spec.cx, spec.cy, spec.a + spec.ring, spec.b + spec.ring, spec.theta)
    ring = outer & ~cavity

    classes = np.zeros((h, w), dtype=np.uint8)
    classes[ring] = 2
    classes[cavity] = 1
    base = np.choose(classes, (spec.background, INTENSITY[1], INTENSITY[2])).astype(np.float64)
    if spec.blur > 0:
        base = gaussian_filter(base, spec.blur, mode="nearest")
    if spec.speckle > 0:
        rng = np.random.default_rng(spec.seed)
        noise = gaussian_filter(rng.standard_normal((h, w)), 1.0, mode="wrap")
        noise /= noise.std()
        base = base * (1.0 + spec.speckle * noise)
    image = np.clip(np.rint(base), 0, 255).astype(np.uint8)

    mask = classes if spec.classes == 3 else cavity.astype(np.uint8)
    return image, mask


def random_spec(seed: int, classes: int = 2, size: int = 112) -> PhantomSpec:
    """Draw a plausible left-ventricle-like phantom from a per-sample seed."""
    rng = np.random.default_rng([seed, 7919])
    for _ in range(100):
        a = rng.uniform(0.14, 0.26) * size
        b = rng.uniform(0.09, 0.16) * size
        spec = PhantomSpec(
            height=size, width=size,
            cx=rng.uniform(0.35, 0.65) * size, cy=rng.uniform(0.35, 0.65) * size,
            a=a, b=b, theta=rng.uniform(0, math.pi), ring=rng.uniform(0.03, 0.06) * size,
            speckle=rng.uniform(0.2, 0.4), blur=rng.uniform(0.5, 1.5),
            background=rng.uniform(55, 85), classes=classes, seed=int(seed),
        )
        try:
            spec.validate()
            return spec
        except PhantomSpecError:
            continue
    raise PhantomSpecError(f"could not place a phantom for seed {seed}")


# -- PGM ---------------------------------------------------------------------

def _header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping '#' comments."""
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise IntegrityError(f"PGM header truncated at byte {start}")
    return buf[start:pos], pos


def decode_pgm(buf: bytes) -> np.ndarray:
    """Parse a binary P5 PGM with maxval 255 into an H x W uint8 array."""
    if buf[:2] != b"P5":
        raise FormatError(f"bad PGM magic {buf[:2]!r} at byte 0 (expected b'P5')")
    pos = 2
    values = []
    for what in ("width", "height", "maxval"):
        tok, end = _header_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"PGM {what} {tok!r} at byte {end - len(tok)} is not a positive integer")
        values.append(int(tok))
        pos = end
    width, height, maxval = values
    if maxval != 255:
        raise FormatError(f"PGM maxval {maxval} at byte {pos - len(str(maxval))} unsupported (need 255)")
    if width <= 0 or height <= 0:
        raise FormatError(f"PGM extents {width}x{height} must be positive")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise IntegrityError(f"PGM header not terminated by whitespace at byte {pos}")
    pos += 1
    need = width * height
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise IntegrityError(f"PGM payload truncated: expected {need} bytes from byte {pos}, "
                             f"found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def encode_pgm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise DataError(f"PGM holds a 2-D array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating):
            arr = np.clip(np.rint(arr * 255.0), 0, 255)
        if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
            raise DataError("PGM values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    h, w = arr.shape
    return b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes()


def write_pgm(path, arr: np.ndarray) -> None:
    """Write uint8 values as-is; float images in [0, 1] are scaled to 0..255."""
    Path(path).write_bytes(encode_pgm(arr))


def read_pgm(path, as_mask: bool = False) -> np.ndarray:
    """Image -> float32 in [0, 1]; mask (``as_mask``) -> raw uint8 class indices."""
    raw = decode_pgm(Path(path).read_bytes())
    return raw if as_mask else raw.astype(np.float32) / np.float32(255.0)


# -- datasets ----------------------------------------------------------------

MANIFEST = "manifest.csv"


@dataclass
class SampleRecord:
    id: str
    image: str
    mask: str
    split: str
    spec: PhantomSpec


def _split_for(index: int, count: int, val_fraction: float) -> str:
    n_val = int(round(count * val_fraction))
    return "val" if index >= count - n_val else "train"


def synthesize_dataset(out_dir, count: int, seed: int, classes: int = 2, size: int = 112,
                       val_fraction: float = 0.0) -> list[SampleRecord]:
    """Write ``count`` phantoms (per-sample seed = seed + index) plus a manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        spec = random_spec(seed + i, classes, size)
        image, mask = generate_phantom(spec)
        sid = f"{i:05d}"
        rec = SampleRecord(sid, f"images/{sid}.pgm", f"masks/{sid}.pgm",
                           _split_for(i, count, val_fraction), spec)
        write_pgm(out / rec.image, image)
        write_pgm(out / rec.mask, mask)
        records.append(rec)
    write_manifest(out / MANIFEST, records)
    return records


_SPEC_FIELDS = [f.name for f in fields(PhantomSpec)]


def write_manifest(path, records: Iterable[SampleRecord]) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["id", "image", "mask", "split"] + _SPEC_FIELDS)
    for r in records:
        spec = asdict(r.spec)
        wr.writerow([r.id, r.image, r.mask, r.split] + [repr(spec[k]) for k in _SPEC_FIELDS])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_manifest(path) -> list[SampleRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            kw ={f.name: (int(row[f.name]) if f.type == "int" else float(row[f.name]))
                  for f in fields(PhantomSpec)}
            out.append(SampleRecord(row["id"], row["image"], row["mask"], row["split"],
                                    PhantomSpec(**kw)))
    return out


def load_dataset(data_dir, split: str | None = None) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Stack images (N x 1 x H x W float32 in [0, 1]) and masks (N x H x W int64)."""
    root = Path(data_dir)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise DataError(f"no {MANIFEST} in {root}")
    recs = [r for r in read_manifest(manifest) if split is None or r.split == split]
    if not recs:
        raise DataError(f"no samples with split {split!r} in {root}")
    images = np.stack([read_pgm(root / r.image) for r in recs])[:, None]
    masks = np.stack([read_pgm(root / r.mask, as_mask=True) for r in recs]).astype(np.int64)
    if images.shape[2:] != masks.shape[1:]:
        raise DataError(f"image extents {images.shape[2:]} != mask extents {masks.shape[1:]}")
    return images, masks, [r.id for r in recs]


def phantom_arrays(count: int, seed: int, classes: int = 2, size: int = 112):
    """In-memory equivalent of :func:`synthesize_dataset` + :func:`load_dataset`."""
    imgs, masks = [], []
    for i in range(count):
        img, msk = generate_phantom(random_spec(seed + i, classes, size))
        imgs.append(img.astype(np.float32) / np.float32(255.0))
        masks.append(msk.astype(np.int64))
    return np.stack(imgs)[:, None], np.stack(masks)


# -- metrics CSV -------------------------------------------------------------

CSV_HEADER = ["step", "split", "class", "dice", "loss_main", "loss_aux_sum", "loss_total"]


def format_metrics_csv(rows) -> str:
    lines = [",".join(CSV_HEADER)]
    for r in rows:
        lines.append(",".join([str(int(r.step)), r.split, str(r.cls), repr(float(r.dice)),
                               repr(float(r.loss_main)), repr(float(r.loss_aux_sum)),
                               repr(float(r.loss_total))]))
    return "\n".join(lines) + "\n"


def emit_metrics_csv(rows, path) -> None:
    Path(path).write_bytes(format_metrics_csv(rows).encode("utf-8"))


def parse_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != CSV_HEADER:
            raise FormatError(f"unexpected metrics header {rd.fieldnames}")
        out = []
        for row in rd:
            row = dict(row)
            row["step"] = int(row["step"])
            for k in ("dice", "loss_main", "loss_aux_sum", "loss_total"):
                row[k] = float(row[k])
            out.append(row)
        return out
