"""Procedural head-plane phantoms with masks, concept labels and SP/NSP labels.

A phantom is a standard plane (SP) iff the thalamus (TH) and cavum septi
pellucidi (CSP) are visible, the fossa posterior (FP) is not, the skull ring is
nearly complete and the image is sharp. Everything else is a non-standard plane.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

H, W = 28, 36
RULE_VERSION = "sp-rule-v1"
COMPLETENESS_MIN = 0.9
SIGMA_MAX = 0.9
CLINICAL_SP_SHARE = 240 / 1579  # 240 SP among 1579 clinical planes; selected by class_balance="paper"
MAX_TRIES = 10_000

NSP, SP = 0, 1
LABEL_NAMES = ("NSP", "SP")
CLASSES = ("background", "skull", "TH", "CSP", "FP")
BACKGROUND, SKULL, TH, CSP, FP = range(5)
CONCEPTS = ("th_present", "csp_present", "fp_absent", "skull_complete", "sharp")


@dataclass(frozen=True)
class Blob:
    present: bool
    dx: float  # offset along the head's long axis, in units of that semi-axis
    dy: float
    intensity: float


@dataclass(frozen=True)
class PhantomSpec:
    cy: float
    cx: float
    ay: float
    ax: float
    rotation: float
    ring_intensity: float
    completeness: float
    gap_angle: float
    th: Blob
    csp: Blob
    fp: Blob
    blur_sigma: float
    speckle: float
    gain: float
    noise_seed: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for k in ("th", "csp", "fp"):
            d[k] = Blob(**d[k])
        return cls(**d)


@dataclass
class PhantomSample:
    image: np.ndarray  # (H, W) float32 in [-1, 1]
    mask: np.ndarray  # (H, W) uint8 class indices
    concepts: dict
    label: int


@dataclass
class Generator:
    """Sampling ranges of the phantom distribution. These are difficulty knobs, not rules."""

    p_th: float = 0.72
    p_csp: float = 0.72
    p_fp: float = 0.3
    p_complete: float = 0.65
    p_sharp: float = 0.7
    incomplete_range: tuple[float, float] = (0.45, 0.8)
    sharp_range: tuple[float, float] = (0.0, 0.6)
    blurred_range: tuple[float, float] = (1.2, 2.0)
    speckle_range: tuple[float, float] = (0.05, 0.14)


DEFAULT_GENERATOR = Generator()


def label_spec(spec: PhantomSpec) -> int:
    ok = (spec.th.present and spec.csp.present and not spec.fp.present
          and spec.completeness >= COMPLETENESS_MIN and spec.blur_sigma <= SIGMA_MAX)
    return SP if ok else NSP


def concept_vector(spec: PhantomSpec) -> np.ndarray:
    return np.array([spec.th.present, spec.csp.present, not spec.fp.present,
                     spec.completeness >= COMPLETENESS_MIN, spec.blur_sigma <= SIGMA_MAX], dtype=np.float32)


def _unconditioned(rng: np.random.Generator, gen: Generator) -> PhantomSpec:
    ax = rng.uniform(13.0, 15.0)
    ay = rng.uniform(9.5, 11.5)
    rot = rng.uniform(-0.25, 0.25)
    # bounding half-extents of the rotated ellipse plus the ring half-width
    hx = math.sqrt((ax * math.cos(rot)) ** 2 + (ay * math.sin(rot)) ** 2) + 1.0
    hy = math.sqrt((ax * math.sin(rot)) ** 2 + (ay * math.cos(rot)) ** 2) + 1.0
    cx = rng.uniform(max(hx, W / 2 - 1.5), min(W - hx, W / 2 + 1.5))
    cy = rng.uniform(max(hy, H / 2 - 1.5), min(H - hy, H / 2 + 1.5))
    complete = rng.random() < gen.p_complete
    completeness = rng.uniform(COMPLETENESS_MIN, 1.0) if complete else rng.uniform(*gen.incomplete_range)
    sharp = rng.random() < gen.p_sharp
    blur = rng.uniform(*gen.sharp_range) if sharp else rng.uniform(*gen.blurred_range)
    th = Blob(bool(rng.random() < gen.p_th), rng.uniform(-0.12, 0.02), rng.uniform(0.2, 0.28), rng.uniform(0.45, 0.7))
    csp = Blob(bool(rng.random() < gen.p_csp), rng.uniform(0.3, 0.42), rng.uniform(-0.04, 0.04), rng.uniform(0.5, 0.8))
    fp = Blob(bool(rng.random() < gen.p_fp), rng.uniform(-0.68, -0.55), rng.uniform(-0.05, 0.05),
              rng.uniform(0.45, 0.7))
    return PhantomSpec(
        cy=float(cy), cx=float(cx), ay=float(ay), ax=float(ax), rotation=float(rot),
        ring_intensity=float(rng.uniform(0.75, 1.0)), completeness=float(completeness),
        gap_angle=float(rng.uniform(-math.pi, math.pi)), th=th, csp=csp, fp=fp,
        blur_sigma=float(blur), speckle=float(rng.uniform(*gen.speckle_range)),
        gain=float(rng.uniform(0.85, 1.1)), noise_seed=int(rng.integers(0, 2**31 - 1)),
    )


def sample_spec(rng: np.random.Generator, target_label: int | None = None,
                gen: Generator = DEFAULT_GENERATOR) -> PhantomSpec:
    for _ in range(MAX_TRIES):
        spec = _unconditioned(rng, gen)
        if target_label is None or label_spec(spec) == target_label:
            return spec
    raise RuntimeError(f"sample_spec: no spec with label {target_label} after {MAX_TRIES} tries")


def _frame(spec: PhantomSpec):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    c, s = math.cos(spec.rotation), math.sin(spec.rotation)
    u = (xx - spec.cx) * c + (yy - spec.cy) * s  # along the long axis
    v = -(xx - spec.cx) * s + (yy - spec.cy) * c
    return u, v


def _blob_field(u, v, spec: PhantomSpec, blob: Blob, su: float, sv: float) -> np.ndarray:
    bu, bv = blob.dx * spec.ax, blob.dy * spec.ay
    return np.exp(-0.5 * (((u - bu) / su) ** 2 + ((v - bv) / sv) ** 2))


def render(spec: PhantomSpec) -> PhantomSample:
    u, v = _frame(spec)
    r = np.sqrt((u / spec.ax) ** 2 + (v / spec.ay) ** 2)
    mean_axis = 0.5 * (spec.ax + spec.ay)
    dist = (r - 1.0) * mean_axis  # approx. signed pixel distance to the skull line

    # ring with a missing arc of (1 - completeness) of the circumference
    theta = np.arctan2(v / spec.ay, u / spec.ax)
    gap_half = (1.0 - spec.completeness) * math.pi
    dtheta = np.abs(np.angle(np.exp(1j * (theta - spec.gap_angle))))
    arc = np.clip((dtheta - gap_half) * mean_axis / 0.7 + 0.5, 0.0, 1.0) if gap_half > 0 else np.ones_like(r)
    ring = np.clip(1.6 - np.abs(dist) / 0.8, 0.0, 1.0) * arc

    tissue = 0.22 * np.clip(0.5 - dist, 0.0, 1.0)
    img = 0.04 + tissue + spec.ring_intensity * ring * 0.9

    fields = {}
    if spec.th.present:
        left = _blob_field(u, v, spec, spec.th, 2.3, 1.7)
        right = _blob_field(u, v, spec, dataclasses.replace(spec.th, dy=-spec.th.dy), 2.3, 1.7)
        fields[TH] = np.maximum(left, right)
        img = img + spec.th.intensity * fields[TH] * 0.7
    if spec.csp.present:
        fields[CSP] = _blob_field(u, v, spec, spec.csp, 2.2, 1.5)
        img = img - spec.csp.intensity * fields[CSP] * 0.3
    if spec.fp.present:
        fields[FP] = _blob_field(u, v, spec, spec.fp, 1.8, 3.6)
        img = img + spec.fp.intensity * fields[FP] * 0.8

    mask = np.zeros((H, W), dtype=np.uint8)
    mask[ring >= 0.5] = SKULL
    for cls in (TH, CSP, FP):
        if cls in fields:
            mask[fields[cls] >= 0.5] = cls

    if spec.blur_sigma > 0:
        img = gaussian_filter(img, spec.blur_sigma, mode="nearest")
    noise = np.random.default_rng(spec.noise_seed).standard_normal((H, W))
    img = img * np.exp(spec.speckle * noise - 0.5 * spec.speckle**2) * spec.gain
    image = np.clip(2.0 * img - 1.0, -1.0, 1.0).astype(np.float32)

    concepts = {name: bool(val) for name, val in zip(CONCEPTS, concept_vector(spec))}
    concepts.update(
        th_quality=spec.th.intensity if spec.th.present else 0.0,
        csp_quality=spec.csp.intensity if spec.csp.present else 0.0,
        fp_quality=1.0 - (spec.fp.intensity if spec.fp.present else 0.0),
        skull_quality=spec.completeness * math.exp(-spec.blur_sigma),
    )
    return PhantomSample(image=image, mask=mask, concepts=concepts, label=label_spec(spec))


# -- datasets -----------------------------------------------------------------
def quantize(image: np.ndarray) -> np.ndarray:
    return np.round((np.clip(image, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def dequantize(q: np.ndarray) -> np.ndarray:
    return (q.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def write_pgm(path: str | Path, u8: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(u8, dtype=np.uint8), mode="L").save(path, format="PPM")


def read_pgm(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im, dtype=np.uint8)


@dataclass
class PhantomSet:
    ids: list[str]
    images: np.ndarray  # (N, H, W) float32, already 8-bit quantised
    masks: np.ndarray  # (N, H, W) uint8
    labels: np.ndarray  # (N,) int64, 1 = SP
    concepts: np.ndarray  # (N, len(CONCEPTS)) float32
    specs: list[PhantomSpec]

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx: Iterable[int]) -> "PhantomSet":
        idx = list(idx)
        return PhantomSet([self.ids[i] for i in idx], self.images[idx], self.masks[idx], self.labels[idx],
                          self.concepts[idx], [self.specs[i] for i in idx])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.images, self.masks, self.labels, self.concepts):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("".join(self.ids).encode())
        return h.hexdigest()


def resolve_balance(class_balance) -> float:
    if class_balance == "paper":
        return CLINICAL_SP_SHARE
    b = float(class_balance)
    if not 0.0 <= b <= 1.0:
        raise ValueError(f"class_balance must be in [0, 1] or 'paper', got {class_balance}")
    return b


def generate_split(n: int, class_balance, seed: int, split: str = "train",
                   gen: Generator = DEFAULT_GENERATOR) -> PhantomSet:
    """``n`` phantoms, exactly ``round(n * balance)`` of them SP, in a seeded random order."""
    if n < 1:
        raise ValueError("n must be >= 1")
    n_sp = int(round(n * resolve_balance(class_balance)))
    root = np.random.SeedSequence([seed, int.from_bytes(split.encode(), "little") % (2**32)])
    order_rng = np.random.default_rng(root.spawn(1)[0])
    targets = np.array([SP] * n_sp + [NSP] * (n - n_sp))
    order_rng.shuffle(targets)
    specs, samples = [], []
    for child, target in zip(root.spawn(n), targets):
        spec = sample_spec(np.random.default_rng(child), int(target), gen)
        specs.append(spec)
        samples.append(render(spec))
    q = np.stack([quantize(s.image) for s in samples])
    return PhantomSet(
        ids=[f"{split}-{i:05d}" for i in range(n)],
        images=dequantize(q),
        masks=np.stack([s.mask for s in samples]),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        concepts=np.stack([concept_vector(sp) for sp in specs]),
        specs=specs,
    )


def save_split(directory: str | Path, data: PhantomSet) -> list[dict]:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, sid in enumerate(data.ids):
        write_pgm(root / f"{sid}.pgm", quantize(data.images[i]))
        write_pgm(root / f"{sid}.mask.pgm", data.masks[i])
        rows.append({"id": sid, "label": LABEL_NAMES[int(data.labels[i])],
                     "concepts": {k: bool(v) for k, v in zip(CONCEPTS, data.concepts[i])},
                     "spec": data.specs[i].to_dict()})
    return rows


def generate_dataset(directory: str | Path, splits: dict[str, int], class_balance, seed: int,
                     gen: Generator = DEFAULT_GENERATOR) -> dict:
    """Render and persist every split, returning the manifest that is also written to disk."""
    root = Path(directory)
    try:
        root.mkdir(parents=True, exist_ok=True)
        manifest: dict = {"rule_version": RULE_VERSION, "seed": seed, "shape": [H, W],
                          "class_balance": resolve_balance(class_balance),
                          "generator": dataclasses.asdict(gen), "splits": {}}
        for split, n in splits.items():
            data = generate_split(n, class_balance, seed, split, gen)
            rows = save_split(root / split, data)
            manifest["splits"][split] = {
                "n": n, "n_sp": int(data.labels.sum()), "n_nsp": int(n - data.labels.sum()),
                "content_hash": data.content_hash(), "samples": rows,
            }
        text = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
        (root / "manifest.json").write_text(text)
    except OSError as exc:
        raise OSError(f"generate_dataset: cannot write to {root}: {exc}") from exc
    manifest["hash"] = hashlib.sha256(text.encode()).hexdigest()
    return manifest


def load_split(directory: str | Path, split: str) -> PhantomSet:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    rows = manifest["splits"][split]["samples"]
    ids = [r["id"] for r in rows]
    images = dequantize(np.stack([read_pgm(root / split / f"{i}.pgm") for i in ids]))
    masks = np.stack([read_pgm(root / split / f"{i}.mask.pgm") for i in ids])
    labels = np.array([LABEL_NAMES.index(r["label"]) for r in rows], dtype=np.int64)
    concepts = np.array([[r["concepts"][k] for k in CONCEPTS] for r in rows], dtype=np.float32)
    specs = [PhantomSpec.from_dict(r["spec"]) for r in rows]
    return PhantomSet(ids, images, masks, labels, concepts, specs)
