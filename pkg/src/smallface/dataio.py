"""Annotation formats, images, detection files and the synthetic scene generator.

WIDER-style annotations::

    path/to/img.jpg
    2
    x y w h blur expression illumination invalid occlusion pose
    ...

An image with no faces carries a count of 0 followed by a placeholder line
of zeros. FDDB-style folds list ``path``, ``count`` and one
``major_radius minor_radius angle center_x center_y 1`` line per face.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .evaluation import difficulty_for_side
from .geometry import BoundingBox, Ellipse

WIDER_ATTRIBUTES = ("blur", "expression", "illumination", "invalid", "occlusion", "pose")
PLACEHOLDER = "0 0 0 0 0 0 0 0 0 0"


class ParseError(ValueError):
    pass


# ---------------------------------------------------------------------------
# WIDER-style annotations

@dataclass
class WiderFace:
    x: float
    y: float
    w: float
    h: float
    attributes: dict[str, int] = field(default_factory=dict)
    line: str | None = None

    @property
    def box(self) -> BoundingBox:
        return BoundingBox(self.x, self.y, self.x + max(self.w, 0.0), self.y + max(self.h, 0.0))

    @property
    def ignore(self) -> bool:
        return self.attributes.get("invalid", 0) == 1 or self.w <= 0 or self.h <= 0

    @property
    def difficulty(self) -> str:
        return difficulty_for_side(max(self.w, self.h))

    def format(self) -> str:
        if self.line is not None:
            return self.line
        attrs = " ".join(str(self.attributes.get(a, 0)) for a in WIDER_ATTRIBUTES)
        return f"{_num(self.x)} {_num(self.y)} {_num(self.w)} {_num(self.h)} {attrs}"


@dataclass
class WiderAnnotation:
    path: str
    faces: list[WiderFace] = field(default_factory=list)
    placeholder: str | None = None

    @property
    def boxes(self) -> np.ndarray:
        kept = [f.box.as_array() for f in self.faces if not f.ignore]
        return np.array(kept).reshape(-1, 4)

    @property
    def ignore_boxes(self) -> np.ndarray:
        kept = [f.box.as_array() for f in self.faces if f.ignore and not f.box.is_degenerate]
        return np.array(kept).reshape(-1, 4)

    @property
    def tags(self) -> list[str]:
        return [f.difficulty for f in self.faces if not f.ignore]


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def parse_wider_text(text: str, source: str = "<string>") -> list[WiderAnnotation]:
    lines = text.splitlines()
    out: list[WiderAnnotation] = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        path = lines[i].strip()
        path_lineno = i + 1
        toks = path.split()
        if len(toks) > 1 and all(_is_number(t) for t in toks):
            prev = out[-1].path if out else "<start>"
            raise ParseError(f"{source}:{path_lineno}: face line where an image path was expected "
                             f"(block {prev!r} lists more faces than its count)")
        i += 1
        if i >= len(lines):
            raise ParseError(f"{source}:{i}: block {path!r} has no face-count line")
        try:
            count = int(lines[i].strip())
        except ValueError:
            raise ParseError(f"{source}:{i + 1}: malformed count line {lines[i]!r} in block {path!r}") from None
        if count < 0:
            raise ParseError(f"{source}:{i + 1}: negative face count in block {path!r}")
        i += 1
        ann = WiderAnnotation(path)
        if count == 0:
            if i < len(lines):
                toks = lines[i].split()
                if len(toks) >= 4 and all(_is_number(t) and float(t) == 0 for t in toks):
                    ann.placeholder = lines[i].rstrip()
                    i += 1
            out.append(ann)
            continue
        for k in range(count):
            if i >= len(lines):
                raise ParseError(f"{source}:{i}: block {path!r} declares {count} faces but the file "
                                 f"ends after {k}")
            toks = lines[i].split()
            if len(toks) < 4 or not all(_is_number(t) for t in toks):
                raise ParseError(f"{source}:{i + 1}: block {path!r} declares {count} faces but line "
                                 f"{i + 1} is not a face line: {lines[i]!r}")
            vals = [float(t) for t in toks]
            attrs = {a: int(v) for a, v in zip(WIDER_ATTRIBUTES, vals[4:])}
            ann.faces.append(WiderFace(vals[0], vals[1], vals[2], vals[3], attrs, lines[i].rstrip()))
            i += 1
        out.append(ann)
    return out


def parse_wider(path) -> list[WiderAnnotation]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ParseError(f"cannot read annotation file {p}: {e}") from None
    return parse_wider_text(text, str(p))


def format_wider(annotations: Iterable[WiderAnnotation]) -> str:
    lines = []
    for ann in annotations:
        lines.append(ann.path)
        lines.append(str(len(ann.faces)))
        if not ann.faces:
            lines.append(ann.placeholder if ann.placeholder is not None else PLACEHOLDER)
        lines.extend(f.format() for f in ann.faces)
    return "\n".join(lines) + "\n"


def write_wider(path, annotations: Iterable[WiderAnnotation]) -> None:
    Path(path).write_text(format_wider(annotations))


# ---------------------------------------------------------------------------
# FDDB-style folds

@dataclass
class FddbAnnotation:
    path: str
    ellipses: list[Ellipse] = field(default_factory=list)
    lines: list[str | None] = field(default_factory=list)


def parse_fddb_text(text: str, source: str = "<string>") -> list[FddbAnnotation]:
    lines = text.splitlines()
    out: list[FddbAnnotation] = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        ann = FddbAnnotation(lines[i].strip())
        i += 1
        try:
            count = int(lines[i].strip())
        except (IndexError, ValueError):
            raise ParseError(f"{source}:{i + 1}: malformed count line in block {ann.path!r}") from None
        i += 1
        for _ in range(count):
            if i >= len(lines):
                raise ParseError(f"{source}:{i}: block {ann.path!r} ends before its {count} ellipses")
            toks = lines[i].split()
            try:
                if len(toks) != 6:
                    raise ValueError
                ra, rb, theta, cx, cy = (float(t) for t in toks[:5])
                float(toks[5])
                if ra <= 0 or rb <= 0:
                    raise ValueError
            except ValueError:
                raise ParseError(f"{source}:{i + 1}: malformed ellipse line {lines[i]!r}") from None
            ann.ellipses.append(Ellipse.normalized(cx, cy, ra, rb, theta))
            ann.lines.append(lines[i].rstrip())
            i += 1
        out.append(ann)
    return out


def parse_fddb(path) -> list[FddbAnnotation]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ParseError(f"cannot read fold file {p}: {e}") from None
    return parse_fddb_text(text, str(p))


def format_fddb(annotations: Iterable[FddbAnnotation]) -> str:
    lines = []
    for ann in annotations:
        lines.append(ann.path)
        lines.append(str(len(ann.ellipses)))
        raw = ann.lines or [None] * len(ann.ellipses)
        for e, line in zip(ann.ellipses, raw):
            lines.append(line if line is not None else
                         f"{e.ra:.6f} {e.rb:.6f} {e.theta:.6f} {e.cx:.6f} {e.cy:.6f} 1")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# images

def _read_header(data: bytes) -> tuple[list[bytes], int]:
    toks: list[bytes] = []
    i = 0
    while len(toks) < 4:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ParseError("truncated PNM header")
        toks.append(data[i:j])
        i = j
    return toks, i + 1


def read_pnm(path) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6) as a ``[C, H, W]`` float array of ``value / maxval``."""
    p = Path(path)
    data = p.read_bytes()
    try:
        toks, start = _read_header(data)
    except (ParseError, IndexError):
        raise ParseError(f"{p}: truncated or malformed PNM header") from None
    magic = toks[0]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"{p}: unsupported image format {magic!r} (need P5 or P6)")
    w, h, maxval = int(toks[1]), int(toks[2]), int(toks[3])
    c = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * c
    if len(data) < start + n * dtype.itemsize:
        raise ParseError(f"{p}: pixel data truncated")
    px = np.frombuffer(data, dtype=dtype, count=n, offset=start).astype(np.float64)
    return (px.reshape(h, w, c).transpose(2, 0, 1) / maxval)


def quantize8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_pnm(path, image: np.ndarray) -> None:
    """Write ``[1|3, H, W]`` values in [0, 1] as 8-bit P5/P6."""
    image = np.asarray(image)
    c, h, w = image.shape
    if c not in (1, 3):
        raise ValueError(f"PNM images have 1 or 3 channels, got {c}")
    magic = "P5" if c == 1 else "P6"
    body = quantize8(image).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(f"{magic}\n{w} {h}\n255\n".encode() + body)


TENSOR_MAGIC = b"SFTENSR1"


def write_tensor(path, arr: np.ndarray) -> None:
    """Raw container: magic, uint32 ndim, uint64 dims, float64 little-endian data."""
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(head + arr.tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != TENSOR_MAGIC:
        raise ParseError(f"{path}: not a raw tensor file")
    (ndim,) = struct.unpack_from("<I", data, 8)
    shape = struct.unpack_from(f"<{ndim}Q", data, 12)
    off = 12 + 8 * ndim
    return np.frombuffer(data, dtype="<f8", offset=off, count=int(np.prod(shape))).reshape(shape).astype(np.float64)


def read_image(path) -> np.ndarray:
    """Any supported image as ``[3, H, W]``; grayscale is replicated."""
    p = Path(path)
    if p.suffix in (".tensor", ".raw"):
        img = read_tensor(p)
    elif p.suffix in (".ppm", ".pgm", ".pnm"):
        img = read_pnm(p)
    else:
        raise ParseError(f"{p}: unsupported image type (use .ppm, .pgm or .tensor)")
    if img.ndim == 2:
        img = img[None]
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return img


# ---------------------------------------------------------------------------
# detection files

def format_detection_records(image_id: str, boxes: np.ndarray, scores: np.ndarray,
                             branches: np.ndarray, scales: np.ndarray) -> list[str]:
    return [f"{image_id} {b[0]:.4f} {b[1]:.4f} {b[2]:.4f} {b[3]:.4f} {s:.6f} {int(br)} {int(sc)}"
            for b, s, br, sc in zip(boxes, scores, branches, scales)]


def parse_detection_records(text: str, source: str = "<string>") -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """``image_id x1 y1 x2 y2 score branch scale`` lines → {image_id: (boxes, scores)}."""
    acc: dict[str, tuple[list, list]] = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        toks = line.split()
        if len(toks) < 6:
            raise ParseError(f"{source}:{n}: detection record needs at least 6 fields: {line!r}")
        try:
            box = [float(t) for t in toks[1:5]]
            score = float(toks[5])
        except ValueError:
            raise ParseError(f"{source}:{n}: malformed detection record {line!r}") from None
        b, s = acc.setdefault(toks[0], ([], []))
        b.append(box)
        s.append(score)
    return {k: (np.array(b).reshape(-1, 4), np.array(s)) for k, (b, s) in acc.items()}


def format_wider_submission(image_name: str, boxes: np.ndarray, scores: np.ndarray) -> str:
    lines = [image_name, str(len(scores))]
    for b, s in zip(boxes, scores):
        lines.append(f"{b[0]:.1f} {b[1]:.1f} {b[2] - b[0]:.1f} {b[3] - b[1]:.1f} {s:.6f}")
    return "\n".join(lines) + "\n"


def parse_wider_submission(text: str) -> tuple[str, np.ndarray, np.ndarray]:
    lines = [l for l in text.splitlines() if l.strip()]
    name, count = lines[0].strip(), int(lines[1])
    rows = np.array([[float(t) for t in l.split()[:5]] for l in lines[2:2 + count]]).reshape(-1, 5)
    boxes = np.column_stack([rows[:, 0], rows[:, 1], rows[:, 0] + rows[:, 2], rows[:, 1] + rows[:, 3]])
    return name, boxes, rows[:, 4]


# ---------------------------------------------------------------------------
# synthetic scenes

class PackingError(RuntimeError):
    pass


@dataclass
class SyntheticSceneSpec:
    height: int = 256
    width: int = 256
    min_faces: int = 1
    max_faces: int = 6
    min_side: int = 4
    max_side: int = 512
    sides: tuple[int, ...] | None = None
    shapes: tuple[str, ...] = ("square", "ellipse")
    background: tuple[float, float] = (0.05, 0.45)
    face_intensity: tuple[float, float] = (0.6, 1.0)
    noise_std: float = 0.05
    max_overlap_iou: float = 0.3
    max_attempts: int = 200
    seed: int = 0

    def __post_init__(self):
        if not (4 <= self.min_side <= self.max_side <= 512):
            raise ValueError(f"face sides must lie within [4, 512], got [{self.min_side}, {self.max_side}]")
        if self.min_side > min(self.height, self.width):
            raise ValueError("smallest face does not fit the canvas")
        if not (0 <= self.min_faces <= self.max_faces):
            raise ValueError("need 0 <= min_faces <= max_faces")
        if any(s not in ("square", "ellipse") for s in self.shapes):
            raise ValueError(f"unknown face shape in {self.shapes}")


@dataclass
class Scene:
    name: str
    image: np.ndarray
    boxes: np.ndarray
    tags: list[str]

    def annotation(self) -> WiderAnnotation:
        faces = [WiderFace(b[0], b[1], b[2] - b[0], b[3] - b[1], {a: 0 for a in WIDER_ATTRIBUTES})
                 for b in self.boxes]
        return WiderAnnotation(f"{self.name}.ppm", faces)


def _overlaps(box: np.ndarray, placed: Sequence[np.ndarray], max_iou: float) -> bool:
    for p in placed:
        iw = min(box[2], p[2]) - max(box[0], p[0])
        ih = min(box[3], p[3]) - max(box[1], p[1])
        if iw <= 0 or ih <= 0:
            continue
        inter = iw * ih
        union = (box[2] - box[0]) * (box[3] - box[1]) + (p[2] - p[0]) * (p[3] - p[1]) - inter
        if inter / union > max_iou:
            return True
    return False


def _sample_layout(spec: SyntheticSceneSpec, rng: np.random.Generator) -> list[np.ndarray] | None:
    hi = min(spec.max_side, spec.height, spec.width)
    if spec.sides is not None:
        sides = list(spec.sides)
    else:
        n = int(rng.integers(spec.min_faces, spec.max_faces + 1))
        sides = [int(round(math.exp(rng.uniform(math.log(spec.min_side), math.log(hi))))) for _ in range(n)]
    placed: list[np.ndarray] = []
    for side in sorted(sides, reverse=True):
        if side > min(spec.height, spec.width):
            return None
        for _ in range(spec.max_attempts):
            x = int(rng.integers(0, spec.width - side + 1))
            y = int(rng.integers(0, spec.height - side + 1))
            box = np.array([x, y, x + side, y + side], dtype=np.float64)
            if not _overlaps(box, placed, spec.max_overlap_iou):
                placed.append(box)
                break
        else:
            return None
    return placed


def render_scene(spec: SyntheticSceneSpec, boxes: Sequence[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    bg = rng.uniform(*spec.background)
    img = bg + spec.noise_std * rng.standard_normal((spec.height, spec.width))
    yy, xx = np.mgrid[0:spec.height, 0:spec.width] + 0.5
    for b in boxes:
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        val = rng.uniform(*spec.face_intensity)
        x1, y1, x2, y2 = (int(v) for v in b)
        if shape == "square":
            img[y1:y2, x1:x2] = val + spec.noise_std * rng.standard_normal((y2 - y1, x2 - x1))
        else:
            cx, cy, r = (x1 + x2) / 2, (y1 + y2) / 2, (x2 - x1) / 2
            m = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
            img[m] = val + spec.noise_std * rng.standard_normal(int(m.sum()))
    img = quantize8(img[None]).astype(np.float64) / 255.0
    return np.repeat(img, 3, axis=0)


def generate_synthetic(spec: SyntheticSceneSpec, count: int, prefix: str = "scene",
                       max_scene_attempts: int = 50) -> list[Scene]:
    """Seeded scenes of bright squares/discs on noisy background; gts are the shapes' tight boxes.

    Images are quantised to 8 bits so they survive a PPM round trip unchanged.
    """
    scenes = []
    for k in range(count):
        rng = np.random.default_rng([spec.seed, k])
        for _ in range(max_scene_attempts):
            layout = _sample_layout(spec, rng)
            if layout is not None:
                break
        else:
            raise PackingError(f"could not place the requested faces on a {spec.height}x{spec.width} "
                               f"canvas after {max_scene_attempts} attempts (scene {k})")
        img = render_scene(spec, layout, rng)
        boxes = np.array(layout).reshape(-1, 4)
        tags = [difficulty_for_side(s) for s in np.maximum(boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1])]
        scenes.append(Scene(f"{prefix}_{k:05d}", img, boxes, tags))
    return scenes


def write_dataset(root, scenes: Sequence[Scene]) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for s in scenes:
        write_pnm(root / "images" / f"{s.name}.ppm", s.image)
    write_wider(root / "annotations.txt", [s.annotation() for s in scenes])
    return root


def load_dataset(root, annotation_file: str = "annotations.txt") -> list[tuple[WiderAnnotation, np.ndarray]]:
    root = Path(root)
    anns = parse_wider(root / annotation_file)
    out = []
    for a in anns:
        img_path = root / "images" / a.path
        if not img_path.exists():
            img_path = root / a.path
        if not img_path.exists():
            raise ParseError(f"image for annotation {a.path!r} not found under {root}")
        out.append((a, read_image(img_path)))
    return out
