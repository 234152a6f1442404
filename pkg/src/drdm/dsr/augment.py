"""Write DSR samples to disk as manifest entries tagged ``provenance="generated"``."""

from __future__ import annotations

from pathlib import Path

from ..dataspec import ManifestEntry, append_manifest_entries, load_manifest, save_image
from .training import DSRModel, generate


def augment_class(model: DSRModel, class_id: int, n: int, out_dir, out_manifest=None, seed: int = 0,
                  steps: int | None = 50, existing_paths=(), guidance: float = 1.0) -> list[ManifestEntry]:
    """Generate ``n`` images for manifest class ``class_id`` into ``out_dir/generated``.

    Entries are appended to ``out_manifest`` (a JSON-lines path) when given.
    Files are named by class and index, so a rerun with the same seed
    rewrites identical files.
    """
    if class_id not in model.class_ids:
        raise KeyError(f"class id {class_id} is not known to the DSR model")
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    out_dir = Path(out_dir)
    taken = set(existing_paths)
    if out_manifest is not None and Path(out_manifest).is_file():
        taken |= {e.path for e in load_manifest(out_manifest, contiguous=False).entries}
    idx = model.class_ids.index(class_id)
    images = generate(model, idx, n, seed=seed, steps=steps, guidance=guidance)
    entries = []
    for k, img in enumerate(images):
        rel = f"generated/c{class_id:03d}_s{seed}_{k:04d}.png"
        if rel in taken:
            raise FileExistsError(f"generated path {rel} already present in the manifest")
        save_image(img.numpy(), out_dir / rel)
        entries.append(ManifestEntry(rel, class_id, model.class_names[idx], provenance="generated"))
    if out_manifest is not None:
        append_manifest_entries(out_manifest, entries)
    return entries
