"""Dataset and protocol handling.

Pairs-protocol files, identity-folder galleries, horizontal-flip
augmentation, cross-validation splits, and a deterministic synthetic
blob-face generator so the whole pipeline can be exercised without any
restricted dataset. Images are referenced lazily by path and decoded through
a small shared LRU cache.
"""

from __future__ import annotations

import json
import threading
from collections import OrderedDict
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError, PairsParseError, ResolutionError
from .preprocess import flip_horizontal, read_image, write_pgm

MATCH = 1
MISMATCH = 0

IMAGE_EXTENSIONS = (".png", ".ppm", ".pgm")


@dataclass(frozen=True)
class ImageRef:
    """Lazy reference to an image file, optionally mirrored on decode."""

    path: str
    flipped: bool = False

    @property
    def key(self) -> tuple[str, bool]:
        return (self.path, self.flipped)


@dataclass(frozen=True)
class FacePair:
    image_a: ImageRef
    image_b: ImageRef
    label: int | None = None  # MATCH / MISMATCH / None for unlabeled pools


@dataclass
class PairProtocol:
    """Ordered folds, each a list of matched then mismatched pairs."""

    folds: list[list[FacePair]]

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    def all_pairs(self) -> list[FacePair]:
        return [p for fold in self.folds for p in fold]


class ImageStore:
    """Thread-safe LRU cache of decoded (and possibly flipped) images.

    Cache hits and misses return identical arrays, so sharing one store
    across parallel feature extraction cannot change results.
    """

    def __init__(self, capacity: int = 256):
        if capacity < 1:
            raise DataError("cache capacity must be >= 1")
        self.capacity = capacity
        self._lock = threading.Lock()
        self._cache: OrderedDict[tuple[str, bool], np.ndarray] = OrderedDict()
        self.hits = 0
        self.misses = 0

    def get(self, ref: ImageRef) -> np.ndarray:
        with self._lock:
            cached = self._cache.get(ref.key)
            if cached is not None:
                self._cache.move_to_end(ref.key)
                self.hits += 1
                return cached
        img = read_image(ref.path)
        if ref.flipped:
            img = flip_horizontal(img)
        img.setflags(write=False)
        with self._lock:
            self.misses += 1
            self._cache[ref.key] = img
            if len(self._cache) > self.capacity:
                self._cache.popitem(last=False)
        return img


def resolve_image_path(root: Path, name: str, number: int) -> Path | None:
    """Find root/<name>/<name>_<NNNN>.<ext> trying the supported extensions."""
    stem = root / name / f"{name}_{number:04d}"
    for ext in IMAGE_EXTENSIONS:
        candidate = stem.with_suffix(ext)
        if candidate.exists():
            return candidate
    return None


def parse_pairs_file(path: str | Path, image_root: str | Path) -> PairProtocol:
    """Parse a pairs-protocol text file and resolve every image path.

    Format: a header line ``<n_folds> <pairs_per_fold>`` followed, per fold,
    by that many matched lines ``name i j`` and then that many mismatched
    lines ``name1 i name2 j``. Parsing is strict: any malformed line raises
    with its line number, and missing image files are reported together.
    """
    root = Path(image_root)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read pairs file {path}: {exc}") from None
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise PairsParseError("empty pairs file", 1)

    header = lines[0].split()
    if len(header) != 2:
        raise PairsParseError(f"header must be '<folds> <pairs-per-fold>', got {lines[0]!r}", 1)
    try:
        n_folds, per_fold = int(header[0]), int(header[1])
    except ValueError:
        raise PairsParseError(f"non-integer header fields in {lines[0]!r}", 1) from None
    if n_folds < 1 or per_fold < 1:
        raise PairsParseError("fold count and pair count must be >= 1", 1)

    expected = 1 + n_folds * per_fold * 2
    body = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if len(body) != expected:
        raise PairsParseError(
            f"expected {expected} non-empty lines for {n_folds} folds x {per_fold} pairs, got {len(body)}",
            len(lines),
        )

    missing: list[str] = []
    unresolved: dict[tuple[str, int], Path] = {}

    def ref(lineno: int, name: str, num_text: str) -> ImageRef:
        try:
            number = int(num_text)
        except ValueError:
            raise PairsParseError(f"bad image number {num_text!r}", lineno) from None
        key = (name, number)
        if key not in unresolved:
            found = resolve_image_path(root, name, number)
            if found is None:
                missing.append(str(root / name / f"{name}_{number:04d}.png"))
                found = root / name / f"{name}_{number:04d}.png"
            unresolved[key] = found
        return ImageRef(path=str(unresolved[key]))

    folds: list[list[FacePair]] = []
    cursor = 1  # body index; 0 is the header
    for _ in range(n_folds):
        fold: list[FacePair] = []
        for _ in range(per_fold):
            lineno, line = body[cursor]
            cursor += 1
            parts = line.split()
            if len(parts) != 3:
                raise PairsParseError(f"matched pair needs 'name i j', got {line!r}", lineno)
            fold.append(FacePair(ref(lineno, parts[0], parts[1]), ref(lineno, parts[0], parts[2]), MATCH))
        for _ in range(per_fold):
            lineno, line = body[cursor]
            cursor += 1
            parts = line.split()
            if len(parts) != 4:
                raise PairsParseError(f"mismatched pair needs 'name1 i name2 j', got {line!r}", lineno)
            fold.append(
                FacePair(ref(lineno, parts[0], parts[1]), ref(lineno, parts[2], parts[3]), MISMATCH)
            )
        folds.append(fold)
    if missing:
        raise ResolutionError(sorted(set(missing)))
    return PairProtocol(folds=folds)


def augment_flip(pairs: list[FacePair]) -> list[FacePair]:
    """Append the horizontally mirrored copy of every pair (same label)."""
    for i, p in enumerate(pairs):
        if p.label is None:
            raise DataError(f"pair {i} is unlabeled; augmentation is for training pairs")
    flipped = [
        FacePair(
            image_a=replace(p.image_a, flipped=not p.image_a.flipped),
            image_b=replace(p.image_b, flipped=not p.image_b.flipped),
            label=p.label,
        )
        for p in pairs
    ]
    return list(pairs) + flipped


def kfold_split(protocol: PairProtocol, held_out_fold: int) -> tuple[list[FacePair], list[FacePair]]:
    """Held-out-fold split: test = the fold, train = union of the others."""
    if protocol.n_folds < 2:
        raise DataError("need at least 2 folds to hold one out")
    if not (0 <= held_out_fold < protocol.n_folds):
        raise DataError(f"fold index {held_out_fold} out of range [0, {protocol.n_folds})")
    train = [p for i, fold in enumerate(protocol.folds) if i != held_out_fold for p in fold]
    return train, list(protocol.folds[held_out_fold])


# ---------------------------------------------------------------------------
# synthetic blob faces


@dataclass(frozen=True)
class SyntheticSpec:
    n_identities: int
    images_per_identity: int
    intra_class_noise: float
    seed: int
    n_pairs: int | None = None  # None -> every matched pair plus as many mismatched

    def __post_init__(self):
        if self.n_identities < 1 or self.images_per_identity < 1:
            raise DataError("identity and image counts must be >= 1")
        if self.intra_class_noise < 0:
            raise DataError("noise sigma must be >= 0")


def _blob(grid: np.ndarray, cy: float, cx: float, sy: float, sx: float, amp: float) -> np.ndarray:
    yy, xx = grid
    return amp * np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))


def _identity_template(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """One smooth face-like template: two eye blobs, a nose bar, a mouth bar.

    Blob positions and intensities are identity-specific, which is what makes
    identities separable after the transform.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    grid = (yy, xx)
    base = 120.0 + rng.uniform(-25, 25)
    face = np.full((size, size), base)
    face += _blob(grid, cy=size * 0.56, cx=size * 0.5, sy=size * 0.42, sx=size * 0.34, amp=rng.uniform(30, 60))
    eye_y = size * rng.uniform(0.3, 0.42)
    eye_dx = size * rng.uniform(0.16, 0.24)
    eye_s = size * rng.uniform(0.045, 0.085)
    eye_amp = rng.uniform(-90, -50)
    face += _blob(grid, eye_y, size * 0.5 - eye_dx, eye_s, eye_s, eye_amp)
    face += _blob(grid, eye_y, size * 0.5 + eye_dx, eye_s, eye_s, eye_amp)
    face += _blob(
        grid,
        cy=size * rng.uniform(0.5, 0.62),
        cx=size * 0.5,
        sy=size * rng.uniform(0.1, 0.18),
        sx=size * rng.uniform(0.03, 0.06),
        amp=rng.uniform(25, 60),
    )
    face += _blob(
        grid,
        cy=size * rng.uniform(0.72, 0.84),
        cx=size * 0.5,
        sy=size * rng.uniform(0.03, 0.06),
        sx=size * rng.uniform(0.14, 0.26),
        amp=rng.uniform(-80, -40),
    )
    return np.clip(face, 0, 255)


def make_synthetic(spec: SyntheticSpec) -> tuple[list[list[np.ndarray]], list[tuple[int, int, int, int, int]]]:
    """Deterministic synthetic gallery.

    Returns per-identity grayscale uint8 images and a balanced pair list of
    (identity_a, image_a, identity_b, image_b, label) index tuples.
    """
    rng = np.random.default_rng(spec.seed)
    images: list[list[np.ndarray]] = []
    for _ in range(spec.n_identities):
        template = _identity_template(rng)
        variants = []
        for _ in range(spec.images_per_identity):
            noisy = template + rng.normal(0.0, spec.intra_class_noise, template.shape)
            variants.append(np.clip(np.floor(noisy + 0.5), 0, 255).astype(np.uint8))
        images.append(variants)

    matched: list[tuple[int, int, int, int, int]] = []
    for ident in range(spec.n_identities):
        for i in range(spec.images_per_identity):
            for j in range(i + 1, spec.images_per_identity):
                matched.append((ident, i, ident, j, MATCH))
    n_each = len(matched) if spec.n_pairs is None else spec.n_pairs // 2
    if n_each > len(matched):
        raise DataError(f"cannot build {n_each} matched pairs from {len(matched)} available")
    if spec.n_pairs is not None:
        pick = rng.choice(len(matched), size=n_each, replace=False)
        matched = [matched[i] for i in sorted(pick)]

    mismatched: list[tuple[int, int, int, int, int]] = []
    seen: set[tuple[int, int, int, int]] = set()
    if spec.n_identities > 1:
        attempts = 0
        while len(mismatched) < n_each:
            attempts += 1
            if attempts > 100 * n_each:
                raise DataError("cannot draw enough distinct mismatched pairs; add identities or images")
            a, b = rng.choice(spec.n_identities, size=2, replace=False)
            ia = int(rng.integers(spec.images_per_identity))
            ib = int(rng.integers(spec.images_per_identity))
            key = (int(a), ia, int(b), ib) if (a, ia) < (b, ib) else (int(b), ib, int(a), ia)
            if key in seen:  # each unordered image pair appears at most once
                continue
            seen.add(key)
            mismatched.append((int(a), ia, int(b), ib, MISMATCH))
    pairs = matched + mismatched
    order = rng.permutation(len(pairs))
    return images, [pairs[i] for i in order]


def write_synthetic_dataset(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Emit a synthetic dataset as PGM files plus a JSON manifest.

    The manifest records identities, image paths, the generator seed, and the
    pair list with labels; it is the on-disk interface consumed by the CLI and
    the annotation service.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, pairs = make_synthetic(spec)
    identities = []
    for ident, variants in enumerate(images):
        name = f"id{ident:03d}"
        folder = out / name
        folder.mkdir(exist_ok=True)
        paths = []
        for num, img in enumerate(variants, start=1):
            p = folder / f"{name}_{num:04d}.pgm"
            write_pgm(p, img)
            paths.append(str(p.relative_to(out)))
        identities.append({"name": name, "images": paths})
    manifest = {
        "kind": "sslface-synthetic",
        "seed": spec.seed,
        "intra_class_noise": spec.intra_class_noise,
        "identities": identities,
        "pairs": [
            {
                "a": identities[ia]["images"][na],
                "b": identities[ib]["images"][nb],
                "label": label,
            }
            for ia, na, ib, nb, label in pairs
        ],
        "notes": "mismatched pairs drawn from distinct identities",
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return manifest_path


def load_manifest_pairs(manifest_path: str | Path) -> list[FacePair]:
    """Pairs referenced by a synthetic-dataset manifest, labels included."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from None
    if manifest.get("kind") != "sslface-synthetic":
        raise DataError(f"{manifest_path}: not a synthetic dataset manifest")
    root = manifest_path.parent
    return [
        FacePair(
            ImageRef(str(root / entry["a"])),
            ImageRef(str(root / entry["b"])),
            int(entry["label"]),
        )
        for entry in manifest["pairs"]
    ]


def scan_identity_folders(root: str | Path) -> dict[str, list[Path]]:
    """Identity -> image paths for a root/<identity>/<identity>_<NNNN>.<ext> tree."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    gallery: dict[str, list[Path]] = {}
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(f for f in folder.iterdir() if f.suffix.lower() in IMAGE_EXTENSIONS)
        if files:
            gallery[folder.name] = files
    return gallery


def make_gallery_pairs(
    gallery: dict[str, list[Path]],
    probes: dict[str, list[Path]],
    n_random: int,
    seed: int,
) -> list[FacePair]:
    """Training pairs for identification: probe-vs-gallery plus random mismatches.

    Every probe is paired with every gallery image (label by identity match),
    then ``n_random`` extra mismatched pairs are drawn, seeded, from distinct
    identities across the probe set.
    """
    pairs: list[FacePair] = []
    for g_ident, g_paths in gallery.items():
        for g_path in g_paths:
            for p_ident, p_paths in probes.items():
                for p_path in p_paths:
                    label = MATCH if g_ident == p_ident else MISMATCH
                    pairs.append(FacePair(ImageRef(str(p_path)), ImageRef(str(g_path)), label))
    idents = sorted(probes)
    rng = np.random.default_rng(seed)
    if n_random > 0 and len(idents) > 1:
        for _ in range(n_random):
            a, b = rng.choice(len(idents), size=2, replace=False)
            pa = probes[idents[int(a)]]
            pb = probes[idents[int(b)]]
            pairs.append(
                FacePair(
                    ImageRef(str(pa[int(rng.integers(len(pa)))])),
                    ImageRef(str(pb[int(rng.integers(len(pb)))])),
                    MISMATCH,
                )
            )
    return pairs
