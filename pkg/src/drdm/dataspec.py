"""Dataset manifests, class splits, episodic sampling and the synthetic FGVC generator.

Manifests are JSON-lines files, one record per image::

    {"path": "img/c003_0007.png", "class_id": 3, "class_name": "Crested Auklet"}

Optional keys: ``split`` (free-form tag), ``provenance`` (``"real"`` or
``"generated"``) and ``dataset`` (name of the source dataset).  Paths are
resolved relative to the manifest's directory.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

MANIFEST_FILENAME = "manifest.jsonl"

# Table I class counts (C_train, C_val, C_test).
SPLIT_PRESETS = {
    "cub": (100, 50, 50),
    "cars": (130, 17, 49),
    "dogs": (60, 30, 30),
}


class ManifestError(ValueError):
    pass


class SplitError(ValueError):
    pass


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    class_id: int
    class_name: str
    split: str | None = None
    provenance: str | None = None

    def to_record(self) -> dict:
        rec = {"path": self.path, "class_id": self.class_id, "class_name": self.class_name}
        if self.split is not None:
            rec["split"] = self.split
        if self.provenance is not None:
            rec["provenance"] = self.provenance
        return rec


@dataclass
class DatasetManifest:
    name: str
    entries: list[ManifestEntry]
    class_count: int
    root: Path = field(default_factory=Path)

    def class_names(self) -> list[str]:
        names = [""] * self.class_count
        for e in self.entries:
            names[e.class_id] = e.class_name
        return names

    def indices_by_class(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {c: [] for c in range(self.class_count)}
        for i, e in enumerate(self.entries):
            out[e.class_id].append(i)
        return out

    def resolve(self, path: str) -> Path:
        return self.root / path


def _check_entries(entries: Sequence[ManifestEntry], source: str, contiguous: bool = True) -> int:
    if not entries:
        raise ManifestError(f"empty manifest: {source}")
    seen: dict[str, int] = {}
    names: dict[int, str] = {}
    for row, e in enumerate(entries, start=1):
        if e.path in seen:
            raise ManifestError(
                f"{source}: duplicate path {e.path!r} on row {row} (first seen on row {seen[e.path]})"
            )
        seen[e.path] = row
        if e.class_id < 0:
            raise ManifestError(f"{source}: negative class_id {e.class_id} on row {row}")
        prev = names.setdefault(e.class_id, e.class_name)
        if prev != e.class_name:
            raise ManifestError(
                f"{source}: class_id {e.class_id} named {e.class_name!r} on row {row}, "
                f"but {prev!r} earlier"
            )
    count = max(names) + 1
    missing = sorted(set(range(count)) - set(names))
    if missing and contiguous:
        # name the first row that breaks contiguity
        bad_row = next(r for r, e in enumerate(entries, start=1) if e.class_id > missing[0])
        raise ManifestError(
            f"{source}: non-contiguous class ids, missing {missing[:10]}; "
            f"row {bad_row} uses class_id {entries[bad_row - 1].class_id}"
        )
    return count


def load_manifest(path: str | Path, contiguous: bool = True) -> DatasetManifest:
    """Read a JSON-lines manifest and check its invariants.

    ``contiguous=False`` accepts sparse class ids, as found in generated
    manifests that only cover some of the base classes.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    name = None
    with path.open() as fh:
        for row, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                entry = ManifestEntry(
                    path=str(rec["path"]),
                    class_id=int(rec["class_id"]),
                    class_name=str(rec["class_name"]),
                    split=rec.get("split"),
                    provenance=rec.get("provenance"),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}: malformed record on row {row}: {exc}") from exc
            if name is None:
                name = rec.get("dataset")
            entries.append(entry)
    class_count = _check_entries(entries, str(path), contiguous)
    return DatasetManifest(
        name=name or path.parent.name, entries=entries, class_count=class_count, root=path.parent
    )


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for i, e in enumerate(manifest.entries):
            rec = e.to_record()
            if i == 0:
                rec["dataset"] = manifest.name
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def append_manifest_entries(path: str | Path, entries: Iterable[ManifestEntry]) -> None:
    with Path(path).open("a") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_record(), sort_keys=True) + "\n")


# --------------------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitSpec:
    train_classes: frozenset[int]
    val_classes: frozenset[int]
    test_classes: frozenset[int]

    @classmethod
    def from_lists(cls, train, val, test) -> "SplitSpec":
        return cls(frozenset(map(int, train)), frozenset(map(int, val)), frozenset(map(int, test)))

    @classmethod
    def from_counts(cls, class_count: int, counts: Sequence[int], seed: int = 0) -> "SplitSpec":
        """Shuffle ``range(class_count)`` with ``seed`` and cut it into (train, val, test)."""
        n_train, n_val, n_test = (int(c) for c in counts)
        if n_train + n_val + n_test > class_count:
            raise SplitError(
                f"split counts {n_train}/{n_val}/{n_test} exceed class count {class_count}"
            )
        order = np.random.default_rng(seed).permutation(class_count).tolist()
        return cls.from_lists(
            order[:n_train], order[n_train : n_train + n_val],
            order[n_train + n_val : n_train + n_val + n_test],
        )

    def subset(self, name: str) -> frozenset[int]:
        try:
            return {"train": self.train_classes, "val": self.val_classes, "test": self.test_classes}[name]
        except KeyError:
            raise SplitError(f"unknown split subset {name!r}") from None

    def to_dict(self) -> dict:
        return {k: sorted(self.subset(k)) for k in ("train", "val", "test")}


@dataclass(frozen=True)
class SplitReport:
    counts: dict[str, int]
    disjoint: bool
    expected: tuple[int, int, int] | None = None


def validate_split(
    manifest: DatasetManifest, split: SplitSpec, expected: Sequence[int] | None = None
) -> SplitReport:
    """Check that the three subsets are disjoint and known to the manifest.

    Raises :class:`SplitError` on overlap, unknown ids, or a size mismatch
    against ``expected`` (train, val, test) counts.
    """
    subsets = {k: split.subset(k) for k in ("train", "val", "test")}
    known = set(range(manifest.class_count))
    for k, ids in subsets.items():
        unknown = sorted(ids - known)
        if unknown:
            raise SplitError(f"unknown class id(s) {unknown} in {k} subset of {manifest.name}")
    names = list(subsets)
    for a in range(3):
        for b in range(a + 1, 3):
            both = subsets[names[a]] & subsets[names[b]]
            if both:
                raise SplitError(f"overlap {set(sorted(both))} between {names[a]} and {names[b]}")
    counts = {k: len(v) for k, v in subsets.items()}
    if expected is not None:
        exp = tuple(int(x) for x in expected)
        got = (counts["train"], counts["val"], counts["test"])
        if got != exp:
            raise SplitError(f"split sizes {got} do not match configured {exp}")
        return SplitReport(counts, True, exp)
    return SplitReport(counts, True)


# --------------------------------------------------------------------------- episodes


@dataclass(frozen=True)
class EpisodeItem:
    path: str
    label: int  # episode class index; N.. for external items
    source: str  # "<manifest name>:<class id>"


@dataclass(frozen=True)
class EpisodeSpec:
    way: int
    shot: int
    query_per_class: int
    external_way: int
    support: tuple[EpisodeItem, ...]
    query: tuple[EpisodeItem, ...]
    external: tuple[EpisodeItem, ...]

    def digest(self) -> str:
        h = hashlib.sha1()
        for part in (self.support, self.query, self.external):
            for item in part:
                h.update(f"{item.source}|{item.path}|{item.label};".encode())
            h.update(b"#")
        return h.hexdigest()[:16]


@dataclass
class ClassPool:
    """Class-partitioned view over a manifest used for episode sampling.

    ``extra_support`` holds additional support-only candidates per class
    (for example diffusion-generated images); queries are never drawn from it.
    """

    manifest: DatasetManifest
    classes: list[int]
    extra_support: dict[int, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        by_class = self.manifest.indices_by_class()
        self.paths = {c: [self.manifest.entries[i].path for i in by_class[c]] for c in self.classes}

    @classmethod
    def from_split(
        cls, manifest: DatasetManifest, split: SplitSpec | None, subset: str | None = None
    ) -> "ClassPool":
        if split is None or subset is None:
            return cls(manifest, list(range(manifest.class_count)))
        return cls(manifest, sorted(split.subset(subset)))

    def key(self, class_id: int) -> str:
        return f"{self.manifest.name}:{class_id}"


def episode_rng(run_seed: int, stream: str, index: int) -> np.random.Generator:
    """Independent generator for episode ``index`` of a named stream."""
    return np.random.default_rng([int(run_seed), zlib.crc32(stream.encode()), int(index)])


def sample_episode(
    rng: np.random.Generator,
    pool: ClassPool,
    extra_pool: ClassPool | None,
    N: int,
    K: int,
    U: int,
    W: int = 0,
) -> EpisodeSpec:
    """Draw an N-way K-shot episode with U queries per class and W external classes."""
    if N < 1 or K < 1 or U < 0 or W < 0:
        raise EpisodeError(f"invalid episode shape N={N} K={K} U={U} W={W}")

    def support_candidates(c):
        return len(pool.paths[c]) + len(pool.extra_support.get(c, []))

    eligible = [c for c in pool.classes if len(pool.paths[c]) >= U and support_candidates(c) >= K + U]
    if len(eligible) < N:
        raise EpisodeError(
            f"pool {pool.manifest.name} has {len(eligible)} classes with >= {K}+{U} images, need N={N}"
        )
    chosen = rng.choice(len(eligible), size=N, replace=False)
    support, query = [], []
    episode_keys = set()
    for label, idx in enumerate(chosen):
        c = eligible[int(idx)]
        episode_keys.add(pool.key(c))
        real = pool.paths[c]
        gen = pool.extra_support.get(c, [])
        q_idx = rng.choice(len(real), size=U, replace=False)
        q_set = set(int(i) for i in q_idx)
        s_cands = [p for i, p in enumerate(real) if i not in q_set] + list(gen)
        s_idx = rng.choice(len(s_cands), size=K, replace=False)
        support += [EpisodeItem(s_cands[int(i)], label, pool.key(c)) for i in s_idx]
        query += [EpisodeItem(real[int(i)], label, pool.key(c)) for i in q_idx]

    external = []
    if W > 0:
        if extra_pool is None:
            raise EpisodeError(f"W={W} external classes requested without an extra pool")
        ext_eligible = [
            c for c in extra_pool.classes
            if len(extra_pool.paths[c]) >= K and extra_pool.key(c) not in episode_keys
        ]
        if len(ext_eligible) < W:
            raise EpisodeError(
                f"extra pool {extra_pool.manifest.name} has {len(ext_eligible)} usable classes, need W={W}"
            )
        ext_chosen = rng.choice(len(ext_eligible), size=W, replace=False)
        for j, idx in enumerate(ext_chosen):
            c = ext_eligible[int(idx)]
            paths = extra_pool.paths[c]
            for i in rng.choice(len(paths), size=K, replace=False):
                external.append(EpisodeItem(paths[int(i)], N + j, extra_pool.key(c)))
    return EpisodeSpec(N, K, U, W, tuple(support), tuple(query), tuple(external))


def check_episode(ep: EpisodeSpec, novel_keys: Iterable[str] = ()) -> None:
    """Raise :class:`EpisodeError` if any cardinality or disjointness rule is broken."""
    N, K, U, W = ep.way, ep.shot, ep.query_per_class, ep.external_way
    if len(ep.support) != N * K or len(ep.query) != N * U or len(ep.external) != W * K:
        raise EpisodeError(
            f"cardinality |S|={len(ep.support)} |Q|={len(ep.query)} |E|={len(ep.external)} "
            f"for N={N} K={K} U={U} W={W}"
        )
    s_cls = {(i.label, i.source) for i in ep.support}
    q_cls = {(i.label, i.source) for i in ep.query}
    if U > 0 and s_cls != q_cls:
        raise EpisodeError("support and query classes differ")
    if {(i.source, i.path) for i in ep.support} & {(i.source, i.path) for i in ep.query}:
        raise EpisodeError("support and query share an image")
    ext_src = {i.source for i in ep.external}
    if ext_src & {s for _, s in s_cls}:
        raise EpisodeError("external classes overlap episode classes")
    if ext_src & set(novel_keys):
        raise EpisodeError("external classes overlap novel classes")


# --------------------------------------------------------------------------- synthetic data

GROUP_NOUNS = [
    "Auklet", "Warbler", "Sparrow", "Tern", "Gull", "Wren", "Flycatcher", "Vireo",
    "Kingfisher", "Grebe", "Oriole", "Cormorant", "Jay", "Swallow", "Woodpecker", "Cuckoo",
]
EXTRA_GROUP_NOUNS = [
    "Pipit", "Finch", "Heron", "Plover", "Thrush", "Owl", "Egret", "Falcon",
]
MODIFIERS = [
    "Crested", "Parakeet", "Least", "Rhinoceros", "Whiskered", "Black", "Yellow", "Spotted",
    "Arctic", "Common", "Forsters", "Elegant", "Western", "Eastern", "Golden", "Rusty",
    "Scarlet", "Hooded", "Pine", "Cape",
]


@dataclass(frozen=True)
class SyntheticFGConfig:
    group_count: int = 4
    classes_per_group: int = 5
    images_per_class: int = 30
    image_size: int = 32
    patch_size: int = 8
    noise_std: float = 0.1
    seed: int = 7
    name: str = "synthetic-fgvc"
    vocabulary: str = "default"  # "default" or "extra" group nouns
    patch_jitter: int = 4

    def __post_init__(self):
        if self.patch_size >= self.image_size:
            raise ValueError(
                f"patch_size {self.patch_size} must be smaller than image_size {self.image_size}"
            )
        if min(self.group_count, self.classes_per_group, self.images_per_class) < 1:
            raise ValueError("group_count, classes_per_group and images_per_class must be >= 1")
        nouns = EXTRA_GROUP_NOUNS if self.vocabulary == "extra" else GROUP_NOUNS
        if self.group_count > len(nouns) or self.classes_per_group > len(MODIFIERS):
            raise ValueError("not enough names in the synthetic vocabulary for this config")

    @property
    def class_count(self) -> int:
        return self.group_count * self.classes_per_group


def synthetic_class_names(config: SyntheticFGConfig) -> list[str]:
    nouns = EXTRA_GROUP_NOUNS if config.vocabulary == "extra" else GROUP_NOUNS
    rng = np.random.default_rng([config.seed, 17])
    names = []
    for g in range(config.group_count):
        mods = rng.choice(len(MODIFIERS), size=config.classes_per_group, replace=False)
        names += [f"{MODIFIERS[int(m)]} {nouns[g]}" for m in mods]
    return names


def _render_synthetic(config: SyntheticFGConfig) -> tuple[list[str], list[np.ndarray], np.ndarray]:
    """Return (class names, per-class image stacks in [0, 1], labels)."""
    rng = np.random.default_rng(config.seed)
    S, P = config.image_size, config.patch_size
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) / S

    groups = []
    for g in range(config.group_count):
        hue = (g + rng.uniform(0.0, 0.5)) / config.group_count
        base = 0.35 + 0.3 * np.array([np.cos(2 * np.pi * (hue + k / 3)) for k in range(3)])
        groups.append({
            "base": base,
            "freq": rng.uniform(2.0, 5.0),
            "theta": rng.uniform(0, np.pi),
            "amp": rng.uniform(0.08, 0.15),
        })

    # class motifs: an oriented stripe patch; siblings share the group's two
    # motif colours and differ in stripe angle and period
    motifs = []
    py, px = np.mgrid[0:P, 0:P].astype(np.float64)
    for g in range(config.group_count):
        fg = rng.uniform(0.1, 0.9, size=3)
        bg = np.clip(1.0 - fg + rng.uniform(-0.1, 0.1, size=3), 0.0, 1.0)
        start = rng.uniform(0, np.pi)
        order = rng.permutation(config.classes_per_group)
        for k in order:
            angle = start + np.pi * k / config.classes_per_group + rng.normal(0.0, 0.05)
            period = rng.uniform(3.0, 5.0)
            motifs.append((angle, period, fg, bg))

    names = synthetic_class_names(config)
    images, labels = [], []
    lo = (S - P) // 2 - config.patch_jitter // 2
    lo = max(0, lo)
    hi = min(S - P, lo + config.patch_jitter)
    for c in range(config.class_count):
        grp = groups[c // config.classes_per_group]
        angle, period, fg, bg = motifs[c]
        proj_patch = np.cos(angle) * px + np.sin(angle) * py
        stack = np.empty((config.images_per_class, S, S, 3))
        for i in range(config.images_per_class):
            phase = rng.uniform(0, 2 * np.pi)
            proj = np.cos(grp["theta"]) * xx + np.sin(grp["theta"]) * yy
            wave = grp["amp"] * np.sin(2 * np.pi * grp["freq"] * proj + phase)
            img = grp["base"][None, None, :] + wave[..., None] + rng.uniform(-0.04, 0.04)
            r0, c0 = rng.integers(lo, hi + 1, size=2)
            stripe = 0.5 + 0.5 * np.sin(2 * np.pi * proj_patch / period + rng.uniform(0, 2 * np.pi))
            tone = rng.uniform(-0.05, 0.05)
            img[r0 : r0 + P, c0 : c0 + P] = stripe[..., None] * fg + (1 - stripe[..., None]) * bg + tone
            img = img + rng.normal(0.0, config.noise_std, size=img.shape)
            stack[i] = np.clip(img, 0.0, 1.0)
        images.append(stack)
        labels.append(np.full(config.images_per_class, c))
    return names, images, np.concatenate(labels)


def generate_synthetic_fgvc(config: SyntheticFGConfig, out_dir: str | Path) -> DatasetManifest:
    """Write a synthetic fine-grained dataset (PNG images + manifest) to ``out_dir``.

    Classes come in groups that share a background grating and colour; within
    a group classes differ only by a small patch motif placed near the centre.
    Class names are "<modifier> <group noun>" so siblings share their noun.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    names, images, _ = _render_synthetic(config)
    entries = []
    for c, stack in enumerate(images):
        for i, img in enumerate(stack):
            rel = f"images/c{c:03d}_{i:04d}.png"
            Image.fromarray(np.round(img * 255).astype(np.uint8)).save(out_dir / rel, optimize=False)
            entries.append(ManifestEntry(rel, c, names[c], provenance="real"))
    manifest = DatasetManifest(config.name, entries, config.class_count, out_dir)
    write_manifest(manifest, out_dir / MANIFEST_FILENAME)
    return manifest


# --------------------------------------------------------------------------- image io


def load_image(path: str | Path, size: int | None = None) -> np.ndarray:
    """Load an RGB image as float32 HxWx3 in [-1, 1], resized to ``size`` if given."""
    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 127.5 - 1.0


def save_image(array: np.ndarray, path: str | Path) -> None:
    """Save a CxHxW or HxWx3 array with values in [-1, 1] as PNG."""
    a = np.asarray(array)
    if a.ndim == 3 and a.shape[0] in (1, 3) and a.shape[-1] not in (1, 3):
        a = np.transpose(a, (1, 2, 0))
    a = np.clip((a + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    if a.shape[-1] == 1:
        a = a[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(a).save(path)
