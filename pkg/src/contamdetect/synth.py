"""Seeded synthetic X-ray-like garment scenes with planted contaminants.

Scenes are a light noisy background with clouds of small scanner specks,
garment parts that look like contaminations at some threshold (buttons,
drawstrings with knots, seams, zip teeth) and the contaminants themselves.
Every number here is invented to exercise the detector; none of it is
measured from a real scanner.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from . import imaging
from .cnn.dataset import read_crop_dataset, write_crop_dataset  # noqa: F401  (re-exported)
from .mtfilter import Contamination, GroundTruthAnnotation

SS = 4  # supersampling factor for shape rasterization
CLIP_MAX_SOLIDITY = 0.8  # clips are visibly bent


@dataclass
class ContaminantSpec:
    kind: str
    count: int = 1
    gray: tuple[float, float] = (20.0, 70.0)
    area: tuple[int, int] = (12, 40)
    elongation: tuple[float, float] = (1.0, 2.0)

    def __post_init__(self):
        if self.kind not in RENDERERS:
            raise ValueError(f"unknown contaminant kind {self.kind!r}")
        if self.count < 0:
            raise ValueError("count must be >= 0")
        lo, hi = self.gray
        if not (0 <= lo <= hi <= 255):
            raise ValueError(f"gray range {self.gray} invalid")
        if not (1 <= self.area[0] <= self.area[1]):
            raise ValueError(f"area range {self.area} invalid")
        if not (1 <= self.elongation[0] <= self.elongation[1]):
            raise ValueError(f"elongation range {self.elongation} invalid")

    @classmethod
    def default(cls, kind: str, count: int = 1) -> "ContaminantSpec":
        presets = {
            "pebble": dict(gray=(150.0, 172.0), area=(5, 30), elongation=(1.0, 1.8)),
            "needle_bit": dict(gray=(20.0, 70.0), area=(10, 40), elongation=(4.0, 9.0)),
            "clip": dict(gray=(30.0, 70.0), area=(25, 70), elongation=(1.0, 3.0)),
            "plastic": dict(gray=(100.0, 140.0), area=(30, 120), elongation=(1.0, 3.0)),
        }
        return cls(kind=kind, count=count, **presets[kind])


@dataclass
class SceneSpec:
    width: int = 4080
    height: int = 1664
    background_mean: float = 230.0
    background_std: float = 3.0
    artefact_clouds: int = 6
    cloud_radius: tuple[float, float] = (25.0, 60.0)
    cloud_specks: tuple[int, int] = (15, 50)
    speck_gray: tuple[float, float] = (180.0, 220.0)
    buttons: int = 4
    button_gray: tuple[float, float] = (40.0, 80.0)
    drawstrings: int = 1
    knots_per_string: tuple[int, int] = (1, 3)
    string_gray: tuple[float, float] = (125.0, 140.0)
    knot_gray: tuple[float, float] = (90.0, 115.0)
    seams: int = 6
    seam_gray: tuple[float, float] = (120.0, 160.0)
    zips: int = 1
    zip_gray: tuple[float, float] = (60.0, 90.0)
    contaminants: list[ContaminantSpec] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise ValueError("scene must be at least 32x32")
        for name in ("artefact_clouds", "buttons", "drawstrings", "seams", "zips"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("speck_gray", "button_gray", "string_gray", "knot_gray", "seam_gray", "zip_gray"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi <= 255):
                raise ValueError(f"{name} {getattr(self, name)} invalid")
        if not 0 <= self.background_mean <= 255:
            raise ValueError("background_mean must lie in [0, 255]")
        self.contaminants = [c if isinstance(c, ContaminantSpec) else ContaminantSpec(**c) for c in self.contaminants]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        tuples = [k for k, v in asdict(cls()).items() if isinstance(v, tuple)]
        for k in tuples:
            if k in d:
                d[k] = tuple(d[k])
        d["contaminants"] = [
            ContaminantSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in c.items()})
            for c in d.get("contaminants", [])
        ]
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


class PlacementError(RuntimeError):
    def __init__(self, unplaced):
        self.unplaced = list(unplaced)
        super().__init__(f"could not place without overlap: {', '.join(self.unplaced)}")


@dataclass
class PlacedObject:
    """A rendered object in scene coordinates (used to build crop datasets)."""

    category: str  # contaminant kind or decoy name
    center: tuple[float, float]
    is_contaminant: bool


# --------------------------------------------------------------------------- rasterization


def _canvas(extent: float):
    n = int(math.ceil(extent)) + 4
    return np.zeros((n * SS, n * SS), dtype=np.uint8), n


def _coverage(canvas: np.ndarray, n: int) -> np.ndarray:
    return cv2.resize(canvas, (n, n), interpolation=cv2.INTER_AREA).astype(float) / 255.0


def _pts(points) -> np.ndarray:
    # (row, col) in pixel units -> cv2 (x, y) fixed-point with 2 fractional bits
    p = np.asarray(points, dtype=float)
    return np.round(p[:, ::-1] * SS * 4).astype(np.int32)


def _polyline(points, thickness: float, extent: float):
    canvas, n = _canvas(extent)
    pts = _pts(points)
    cv2.polylines(canvas, [pts], False, 255, thickness=max(1, int(round(thickness * SS))),
                  lineType=cv2.LINE_8, shift=2)
    return _coverage(canvas, n)


def _polygon(points, extent: float):
    canvas, n = _canvas(extent)
    cv2.fillPoly(canvas, [_pts(points)], 255, lineType=cv2.LINE_8, shift=2)
    return _coverage(canvas, n)


def _blob_outline(rng, center, a, b, angle, jitter=0.15, n_vertices=14):
    t = np.linspace(0, 2 * np.pi, n_vertices, endpoint=False)
    rad = 1 + rng.uniform(-jitter, jitter, n_vertices)
    x = a * np.cos(t) * rad
    y = b * np.sin(t) * rad
    ca, sa = math.cos(angle), math.sin(angle)
    rows = center + (x * sa + y * ca)
    cols = center + (x * ca - y * sa)
    return np.stack([rows, cols], axis=1)


def _render_pebble(rng, area, elong):
    b = math.sqrt(area / (math.pi * elong))
    a = b * elong
    ext = 2 * a + 4
    return _polygon(_blob_outline(rng, ext / 2 + 2, a, b, rng.uniform(0, np.pi)), ext + 4)


def _render_needle(rng, area, elong):
    width = math.sqrt(area / elong)
    length = math.sqrt(area * elong) - width  # round caps add about one width
    ang = rng.uniform(0, np.pi)
    c = length / 2 + width + 3
    d = np.array([math.sin(ang), math.cos(ang)]) * length / 2
    return _polyline([(c - d[0], c - d[1]), (c + d[0], c + d[1])], width, length + 2 * width + 6)


def _render_clip(rng, area, elong):
    # Bent wire of width 2; elongation steers the bend angle.
    total = area / 2.0
    arm = total / 2.2
    ang = rng.uniform(0, 2 * np.pi)
    bend = np.interp(elong, (1.0, 3.0), (2.2, 0.5))
    c = total / 2 + 4
    p0 = np.array([c, c])
    d1 = np.array([math.sin(ang), math.cos(ang)])
    d2 = np.array([math.sin(ang + bend), math.cos(ang + bend)])
    pts = [p0 - d1 * arm, p0, p0 + d2 * arm * 1.2]
    return _polyline(pts, 2.0, total + 10)


def _render_plastic(rng, area, elong):
    b = math.sqrt(area / (math.pi * elong))
    a = b * elong
    ext = 2 * a + 4
    return _polygon(_blob_outline(rng, ext / 2 + 2, a, b, rng.uniform(0, np.pi), jitter=0.35), ext + 4)


RENDERERS = {
    "pebble": _render_pebble,
    "needle_bit": _render_needle,
    "clip": _render_clip,
    "plastic": _render_plastic,
}


class Scene:
    """Mutable canvas with an occupancy mask for non-overlapping placement."""

    def __init__(self, spec: SceneSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        h, w = spec.height, spec.width
        noise = rng.normal(spec.background_mean, spec.background_std, size=(h, w))
        self.img = noise
        self.occupied = np.zeros((h, w), dtype=bool)
        self.objects: list[PlacedObject] = []
        self.annotation: list[Contamination] = []

    def _try_place(self, cover: np.ndarray, margin: int, attempts: int = 200):
        h, w = self.img.shape
        ph, pw = cover.shape
        if ph >= h or pw >= w:
            return None
        foot = cover > 0.05
        if margin:
            foot = cv2.dilate(foot.astype(np.uint8), np.ones((2 * margin + 1,) * 2, np.uint8),
                              borderType=cv2.BORDER_CONSTANT, borderValue=0).astype(bool)
        for _ in range(attempts):
            top = int(self.rng.integers(0, h - ph))
            left = int(self.rng.integers(0, w - pw))
            if not (self.occupied[top : top + ph, left : left + pw] & foot).any():
                self.occupied[top : top + ph, left : left + pw] |= foot
                return top, left
        return None

    def stamp(self, top, left, cover, gray):
        """Darken toward ``gray``: fully inside where coverage >= 0.5, blended on the rim."""
        ph, pw = cover.shape
        region = self.img[top : top + ph, left : left + pw]
        gray = np.broadcast_to(gray, cover.shape)
        blended = region - cover * (region - gray)
        new = np.where(cover >= 0.5, gray, blended)
        self.img[top : top + ph, left : left + pw] = np.minimum(region, new)

    def place(self, cover, gray, margin, category, contaminant_kind=None, gray_range=None):
        pos = self._try_place(cover, margin)
        if pos is None:
            return False
        top, left = pos
        self.stamp(top, left, cover, gray)
        core = np.argwhere(cover >= 0.5)
        if core.size == 0:
            core = np.argwhere(cover == cover.max())
        mean = core.mean(axis=0)
        if contaminant_kind is not None:
            # Annotate the member pixel nearest the centroid and pin it inside the gray range.
            pick = core[np.argmin(((core - mean) ** 2).sum(axis=1))]
            r, c = int(pick[0] + top), int(pick[1] + left)
            lo, hi = gray_range
            self.img[r, c] = float(np.clip(self.img[r, c], lo, hi))
            self.annotation.append(Contamination(float(r), float(c), contaminant_kind))
            self.objects.append(PlacedObject(contaminant_kind, (float(r), float(c)), True))
        else:
            self.objects.append(PlacedObject(category, (float(mean[0] + top), float(mean[1] + left)), False))
        return True

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.round(self.img), 0, 255).astype(np.uint8)


def _object_gray(rng, cover, lo, hi, sd=2.0):
    g = rng.uniform(lo, hi)
    return np.clip(g + rng.normal(0, sd, cover.shape), lo, hi)


def _cloud(scene: Scene):
    rng, spec = scene.rng, scene.spec
    radius = rng.uniform(*spec.cloud_radius)
    n = int(rng.integers(spec.cloud_specks[0], spec.cloud_specks[1] + 1))
    size = int(2 * radius) + 5
    cover = np.zeros((size, size))
    gray = np.full((size, size), 255.0)
    shapes = [np.array([[1]]), np.array([[1, 1]]), np.array([[1], [1]]), np.array([[1, 1], [1, 0]]),
              np.array([[1, 1], [1, 1]])]
    for _ in range(n):
        rr = radius * math.sqrt(rng.uniform())
        th = rng.uniform(0, 2 * np.pi)
        r = int(size / 2 + rr * math.sin(th))
        c = int(size / 2 + rr * math.cos(th))
        s = shapes[int(rng.integers(len(shapes)))]
        r, c = min(r, size - 2), min(c, size - 2)
        g = rng.uniform(*spec.speck_gray)
        m = s.astype(bool)
        cover[r : r + s.shape[0], c : c + s.shape[1]][m] = 1.0
        gray[r : r + s.shape[0], c : c + s.shape[1]][m] = np.minimum(gray[r : r + s.shape[0], c : c + s.shape[1]][m], g)
    return cover, gray


def _button(scene: Scene):
    rng, spec = scene.rng, scene.spec
    rad = rng.uniform(6, 12)
    ext = 2 * rad + 4
    c = ext / 2 + 2
    canvas, n = _canvas(ext + 4)
    cv2.circle(canvas, (int(c * SS * 4), int(c * SS * 4)), int(rad * SS * 4), 255, -1, shift=2)
    holes = int(rng.choice([2, 4]))
    for i in range(holes):
        a = 2 * np.pi * i / holes + rng.uniform(0, 0.3)
        hr = c + rad / 3 * math.sin(a)
        hc = c + rad / 3 * math.cos(a)
        cv2.circle(canvas, (int(hc * SS * 4), int(hr * SS * 4)), int(1.3 * SS * 4), 0, -1, shift=2)
    cover = _coverage(canvas, n)
    return cover, _object_gray(rng, cover, *spec.button_gray)


def _smooth_curve(rng, length, bends=3):
    n = 40
    heading = rng.uniform(0, 2 * np.pi)
    turn = np.cumsum(rng.normal(0, bends / n * 1.5, n))
    step = length / n
    rows = np.cumsum(step * np.sin(heading + turn))
    cols = np.cumsum(step * np.cos(heading + turn))
    pts = np.stack([rows, cols], axis=1)
    pts -= pts.min(axis=0)
    return pts


def _short_side(spec: SceneSpec) -> float:
    return float(min(spec.width, spec.height))


def _drawstring(scene: Scene):
    rng, spec = scene.rng, scene.spec
    pts = _smooth_curve(rng, min(rng.uniform(150, 350), 0.6 * _short_side(spec))) + 8
    ext = float(pts.max()) + 10
    string = _polyline(pts, 3.0, ext)
    gray = _object_gray(rng, string, *spec.string_gray)
    knots = []
    n_knots = int(rng.integers(spec.knots_per_string[0], spec.knots_per_string[1] + 1))
    for i in rng.choice(np.arange(5, len(pts) - 5), size=min(n_knots, len(pts) - 10), replace=False):
        a = rng.uniform(2.3, 4.0)
        b = rng.uniform(2.0, 3.2)
        knot = _polygon(_blob_outline(rng, 0.0, a, b, rng.uniform(0, np.pi), jitter=0.2) + pts[i], ext)
        kg = _object_gray(rng, knot, *spec.knot_gray)
        gray = np.where(knot >= 0.5, np.minimum(gray, kg), gray)
        string = np.maximum(string, knot)
        knots.append((float(pts[i][0]), float(pts[i][1])))
    return string, gray, knots


def _seam(scene: Scene):
    rng, spec = scene.rng, scene.spec
    pts = _smooth_curve(rng, min(rng.uniform(100, 500), 0.6 * _short_side(spec)), bends=1) + 4
    cover = _polyline(pts, 1.0, float(pts.max()) + 8)
    return cover, _object_gray(rng, cover, *spec.seam_gray, sd=3.0)


def _zip(scene: Scene):
    rng, spec = scene.rng, scene.spec
    n_teeth = int(rng.integers(15, 60))
    vertical = bool(rng.integers(2))
    length = n_teeth * 5 + 30
    h, w = (length, 16) if vertical else (16, length)
    cover = np.zeros((h, w))
    for i in range(n_teeth):
        off = 5 * i + 2
        side = (i % 2) * 3
        if vertical:
            cover[off : off + 2, 4 + side : 9 + side] = 1.0
        else:
            cover[4 + side : 9 + side, off : off + 2] = 1.0
    # Puller at one end.
    if vertical:
        cover[length - 26 : length - 2, 3:13] = 1.0
    else:
        cover[3:13, length - 26 : length - 2] = 1.0
    return cover, _object_gray(rng, cover, *spec.zip_gray)


def _sample_contaminant(rng, spec: ContaminantSpec, attempts: int = 50):
    """Rasterize a contaminant with uniformly drawn target area and elongation.

    Renderer parameters are corrected multiplicatively toward the targets; a
    shape is accepted once its measured core is within 20 % of the target area,
    10 % of the target elongation, and inside the spec ranges.
    """
    for _ in range(attempts):
        target_area = rng.uniform(*spec.area)
        target_elong = rng.uniform(*spec.elongation)
        area, elong = target_area, target_elong
        for _ in range(6):
            cover = RENDERERS[spec.kind](rng, area, elong)
            core = np.argwhere(cover >= 0.5)
            n = len(core)
            if n == 0:
                area *= 1.5
                continue
            st = imaging.shape_stats(core)
            ratio = st.aspect_ratio
            if spec.kind == "clip" and st.solidity > CLIP_MAX_SOLIDITY:
                break
            if (spec.area[0] <= n <= spec.area[1] and abs(n - target_area) <= 0.2 * target_area
                    and spec.elongation[0] <= ratio <= spec.elongation[1]
                    and abs(ratio - target_elong) <= 0.1 * target_elong):
                return cover
            area *= target_area / n
            elong = max(1.0, elong * target_elong / ratio)
    raise PlacementError([f"{spec.kind} (no shape meets area {spec.area} and elongation {spec.elongation})"])


def generate_scene(spec: SceneSpec, seed: int | None = None) -> tuple[np.ndarray, GroundTruthAnnotation, list[PlacedObject]]:
    """Render one scene. Returns ``(image, annotation, placed_objects)``."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    scene = Scene(spec, rng)
    unplaced = []
    for _ in range(spec.artefact_clouds):
        cover, gray = _cloud(scene)
        if not scene.place(cover, gray, 2, "artefact_cloud"):
            unplaced.append("artefact_cloud")
    for _ in range(spec.buttons):
        cover, gray = _button(scene)
        if not scene.place(cover, gray, 4, "button"):
            unplaced.append("button")
    for _ in range(spec.drawstrings):
        cover, gray, knots = _drawstring(scene)
        pos = scene._try_place(cover, 4)
        if pos is None:
            unplaced.append("drawstring")
            continue
        scene.stamp(*pos, cover, gray)
        for kr, kc in knots:
            scene.objects.append(PlacedObject("drawstring_knot", (kr + pos[0], kc + pos[1]), False))
    for _ in range(spec.seams):
        cover, gray = _seam(scene)
        if not scene.place(cover, gray, 3, "seam"):
            unplaced.append("seam")
    for _ in range(spec.zips):
        cover, gray = _zip(scene)
        if not scene.place(cover, gray, 4, "zip"):
            unplaced.append("zip")
    for cspec in spec.contaminants:
        for _ in range(cspec.count):
            cover = _sample_contaminant(rng, cspec)
            gray = _object_gray(rng, cover, *cspec.gray)
            if not scene.place(cover, gray, 12, cspec.kind, cspec.kind, cspec.gray):
                unplaced.append(cspec.kind)
    if unplaced:
        raise PlacementError(unplaced)
    img = scene.to_uint8()
    ann = GroundTruthAnnotation(image="", contaminations=list(scene.annotation), shape=img.shape)
    return img, ann, scene.objects


def derive_seed(seed: int, index: int) -> int:
    """Independent per-item seed for embarrassingly parallel generation."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


FC_SOURCES = ("drawstring_knot", "button", "zip", "artefact_cloud", "seam")


def generate_crop_dataset(n_tc: int, n_fc: int, specs: SceneSpec, seed: int, size: int = 120,
                          fc_sources=FC_SOURCES, profile=None, out_dir=None):
    """Labeled crops: TC centred on planted contaminants, FC on garment parts.

    When ``profile`` (a calibrated filter profile) is given, FC crops are
    preferentially taken at the filter's own false alarms on the generated
    scenes, which is what the classifier meets in the pipeline.

    Returns ``(crops, labels, meta)`` with ``labels`` 1 for TC and 0 for FC.
    """
    from .mtfilter import detect

    if n_tc < 1 or n_fc < 1:
        raise ValueError("need at least one crop per class")
    tc, fc = [], []
    i = 0
    while len(tc) < n_tc or len(fc) < n_fc:
        img, ann, objects = generate_scene(specs, seed=derive_seed(seed, i))
        i += 1
        for o in objects:
            if o.is_contaminant and len(tc) < n_tc:
                tc.append((imaging.crop(img, o.center, size), {"source": o.category, "scene": i - 1,
                                                             "row": o.center[0], "col": o.center[1]}))
        if profile is not None:
            truth = np.array([(c.row, c.col) for c in ann.contaminations]).reshape(-1, 2)
            for d in detect(img, profile):
                if len(fc) >= n_fc:
                    break
                if truth.size and np.min(np.hypot(*(truth - np.array(d.centroid)).T)) <= 12:
                    continue
                fc.append((imaging.crop(img, d.centroid, size), {"source": "filter_false_alarm", "scene": i - 1,
                                                               "row": d.centroid[0], "col": d.centroid[1]}))
        decoys = [o for o in objects if not o.is_contaminant and o.category in fc_sources]
        for o in decoys:
            if len(fc) >= n_fc:
                break
            fc.append((imaging.crop(img, o.center, size), {"source": o.category, "scene": i - 1,
                                                         "row": o.center[0], "col": o.center[1]}))
        if i > 50 * (n_tc + n_fc):
            raise RuntimeError("scene spec yields too few objects for the requested crop counts")
    crops = [c for c, _ in tc] + [c for c, _ in fc]
    labels = [1] * len(tc) + [0] * len(fc)
    meta = [m for _, m in tc] + [m for _, m in fc]
    if out_dir is not None:
        write_crop_dataset(out_dir, crops, labels, meta)
    return crops, labels, meta


def write_dataset(out_dir, spec: SceneSpec, n_images: int, seed: int, fmt: str = "png") -> list[Path]:
    """Generate ``n_images`` scenes into ``out_dir`` with one JSON annotation per image."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_images):
        img, ann, _ = generate_scene(spec, seed=derive_seed(seed, i))
        name = f"scene_{i:04d}.{fmt}"
        imaging.write_image(out / name, img)
        ann.image = name
        ann.save(out / f"scene_{i:04d}.json")
        paths.append(out / name)
    meta = {
        "generator": "contamdetect.synth",
        "seed": seed,
        "n_images": n_images,
        "scene_spec": spec.to_dict(),
        "note": "artefact and garment statistics are invented, not measured from a scanner",
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths
