"""In-memory image store and class pools for episodic training and evaluation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..dataspec import (
    MANIFEST_FILENAME, ClassPool, DatasetManifest, EpisodeSpec, SplitSpec, SyntheticFGConfig,
    generate_synthetic_fgvc, load_image, load_manifest, validate_split,
)
from .config import DataSection, RunConfig


class ImageStore:
    """Decoded images keyed by ``(dataset name, relative path)``."""

    def __init__(self, image_size: int):
        self.image_size = image_size
        self._cache: dict[tuple[str, str], torch.Tensor] = {}
        self._roots: dict[str, Path] = {}
        self._files: dict[tuple[str, str], Path] = {}

    def register(self, manifest: DatasetManifest, root: Path | None = None):
        self._roots[manifest.name] = Path(root or manifest.root)

    def register_file(self, dataset: str, path: str, location: Path):
        """Make ``path`` of ``dataset`` resolve to a file stored elsewhere."""
        self._files[(dataset, path)] = Path(location)

    def put(self, dataset: str, path: str, image: torch.Tensor):
        self._cache[(dataset, path)] = image

    def get(self, dataset: str, path: str) -> torch.Tensor:
        key = (dataset, path)
        img = self._cache.get(key)
        if img is None:
            location = self._files.get(key) or self._roots[dataset] / path
            arr = load_image(location, self.image_size)
            img = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
            self._cache[key] = img
        return img

    def batch(self, items) -> torch.Tensor:
        return torch.stack([self.get(i.source.rsplit(":", 1)[0], i.path) for i in items])


@dataclass
class FewShotData:
    manifest: DatasetManifest
    split: SplitSpec
    store: ImageStore
    extra: DatasetManifest | None = None
    augmented: dict[int, list[str]] = field(default_factory=dict)

    def pool(self, subset: str) -> ClassPool:
        pool = ClassPool.from_split(self.manifest, self.split, subset)
        if subset == "train" and self.augmented:
            # generated images join base classes as support-only candidates
            pool.extra_support = {c: list(v) for c, v in self.augmented.items() if c in pool.paths}
        return pool

    def extra_pool(self) -> ClassPool | None:
        return None if self.extra is None else ClassPool.from_split(self.extra, None)

    def novel_keys(self) -> set[str]:
        return {f"{self.manifest.name}:{c}" for c in self.split.val_classes | self.split.test_classes}

    def episode_tensors(self, ep: EpisodeSpec):
        S = self.store.batch(ep.support)
        Q = self.store.batch(ep.query)
        E = self.store.batch(ep.external) if ep.external else S.new_zeros((0, *S.shape[1:]))
        return S, Q, E

    def with_augmented(self, entries, root=None) -> "FewShotData":
        """Copy with generated ``entries`` as extra support candidates.

        ``root`` is the directory the entry paths are relative to, when it is
        not the main manifest's root.
        """
        aug: dict[int, list[str]] = {}
        for e in entries:
            if e.class_id not in self.split.train_classes:
                raise ValueError(f"generated images for non-base class {e.class_id} are not allowed")
            if root is not None:
                self.store.register_file(self.manifest.name, e.path, Path(root) / e.path)
            aug.setdefault(e.class_id, []).append(e.path)
        return FewShotData(self.manifest, self.split, self.store, self.extra, aug)


def split_from_section(manifest: DatasetManifest, section) -> SplitSpec:
    if section.train is not None:
        return SplitSpec.from_lists(section.train, section.val or [], section.test or [])
    if section.counts is None:
        raise ValueError("split needs either explicit class lists or counts")
    return SplitSpec.from_counts(manifest.class_count, section.counts, section.seed)


def synthetic_config(section) -> SyntheticFGConfig:
    return SyntheticFGConfig(**vars(section))


def generate_data(data: DataSection, out_dir) -> tuple[Path, Path | None]:
    """Generate the main (and extra) synthetic datasets under ``out_dir``."""
    out_dir = Path(out_dir)
    if data.synthetic is None:
        raise ValueError("data.synthetic is not configured")
    generate_synthetic_fgvc(synthetic_config(data.synthetic), out_dir / "main")
    extra = None
    if data.extra_synthetic is not None:
        generate_synthetic_fgvc(synthetic_config(data.extra_synthetic), out_dir / "extra")
        extra = out_dir / "extra" / MANIFEST_FILENAME
    return out_dir / "main" / MANIFEST_FILENAME, extra


DATA_STAMP = "synthetic.json"


def _asdict(section):
    return None if section is None else dataclasses.asdict(section)


def resolve_manifests(cfg: RunConfig, data_dir) -> tuple[Path, Path | None]:
    """Configured manifest paths, generating synthetic data into ``data_dir`` when absent."""
    main = Path(cfg.data.manifest) if cfg.data.manifest else None
    extra = Path(cfg.data.extra_manifest) if cfg.data.extra_manifest else None
    if main is None:
        data_dir = Path(data_dir)
        main_path = data_dir / "main" / MANIFEST_FILENAME
        stamp_path = data_dir / DATA_STAMP
        stamp = json.dumps({"synthetic": _asdict(cfg.data.synthetic),
                            "extra_synthetic": _asdict(cfg.data.extra_synthetic)}, sort_keys=True)
        if not main_path.is_file():
            generate_data(cfg.data, data_dir)
            stamp_path.write_text(stamp + "\n")
        elif stamp_path.is_file() and stamp_path.read_text().strip() != stamp:
            raise ValueError(f"{data_dir} holds synthetic data generated from different settings; "
                             "use a fresh data directory")
        main = main_path
        if extra is None and cfg.data.extra_synthetic is not None:
            extra = data_dir / "extra" / MANIFEST_FILENAME
    return main, extra


def load_fewshot_data(cfg: RunConfig, data_dir) -> FewShotData:
    main, extra = resolve_manifests(cfg, data_dir)
    manifest = load_manifest(main)
    split = split_from_section(manifest, cfg.data.split)
    validate_split(manifest, split)
    store = ImageStore(cfg.data.image_size)
    store.register(manifest)
    extra_manifest = None
    if extra is not None:
        extra_manifest = load_manifest(extra)
        if extra_manifest.name == manifest.name:
            raise ValueError("extra dataset must be a different dataset from the main one")
        store.register(extra_manifest)
    return FewShotData(manifest, split, store, extra_manifest)


def class_images(data: FewShotData, classes, manifest: DatasetManifest | None = None):
    """All real images of ``classes`` as ``(images, labels)`` with manifest class ids."""
    manifest = manifest or data.manifest
    imgs, labels = [], []
    wanted = set(classes)
    for e in manifest.entries:
        if e.class_id in wanted:
            imgs.append(data.store.get(manifest.name, e.path))
            labels.append(e.class_id)
    return torch.stack(imgs), np.asarray(labels)
