"""Synthetic per-region embedding populations with controllable makeup damage.

Each subject gets a random unit identity vector per region. A "before"
image embeds as identity + noise; an "after" image adds a per-subject makeup
offset of fixed length along a random direction. Regions with small offsets
stay discriminative under makeup, which is the situation fusion exploits.
"""

from dataclasses import dataclass, field

import numpy as np

from .config import parse_config
from .embeddings import EmbeddingRecord, EmbeddingStore
from .errors import DataError
from .landmarks import REGION_TAGS
from .protocols import DatasetManifest, ManifestEntry


@dataclass(frozen=True)
class ScenarioSpec:
    n_subjects: int
    dim: int
    region_noise: dict
    makeup_shift: dict = field(default_factory=dict)
    seed: int = 0
    images_per_state: int = 1
    provider_id: str = "synth"
    dataset_id: str = "custom"

    def __post_init__(self):
        if self.n_subjects < 2:
            raise ValueError("n_subjects must be >= 2")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.images_per_state < 1:
            raise ValueError("images_per_state must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")
        for name in ("region_noise", "makeup_shift"):
            for region, val in getattr(self, name).items():
                if region not in REGION_TAGS:
                    raise ValueError(f"{name}: unknown region {region!r}")
                if not (np.isfinite(val) and val >= 0):
                    raise ValueError(f"{name}[{region}] must be finite and >= 0")

    @property
    def regions(self):
        keys = set(self.region_noise) | set(self.makeup_shift)
        return tuple(r for r in REGION_TAGS if r in keys)


def _unit(rng, dim):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def generate(spec):
    """Build (manifest, store) for a scenario; identical seeds give identical output."""
    rng = np.random.default_rng(spec.seed)
    prefix = "" if spec.dataset_id == "custom" else f"{spec.dataset_id}_"
    entries = []
    records = []
    noise_scale = 1.0 / np.sqrt(spec.dim)
    for i in range(spec.n_subjects):
        subject = f"{prefix}s{i:04d}"
        images = [(f"{subject}_{st[0]}{j}", st) for st in ("before", "after")
                  for j in range(spec.images_per_state)]
        entries += [ManifestEntry(subject, img, st) for img, st in images]
        for region in spec.regions:
            sigma = spec.region_noise.get(region, 0.0)
            delta = spec.makeup_shift.get(region, 0.0)
            identity = _unit(rng, spec.dim)
            makeup = delta * _unit(rng, spec.dim)
            for img, state in images:
                vec = identity + sigma * noise_scale * rng.standard_normal(spec.dim)
                if state == "after":
                    vec = vec + makeup
                records.append(EmbeddingRecord(subject, img, region, spec.provider_id, vec))
    return DatasetManifest(spec.dataset_id, entries), EmbeddingStore(records)


def scenario_s1(seed, n_subjects=200, dim=64):
    """Holistic heavily perturbed by makeup; nose and lower third untouched.

    Parts are individually weak (noisy) and the holistic region is strong
    but shifted, so only fusion can recover the makeup-robust signal.
    """
    noise = {r: 2.5 for r in REGION_TAGS}
    shift = {r: 1.0 for r in REGION_TAGS}
    noise["holistic"] = 1.0
    shift["holistic"] = 1.6
    shift["nose"] = 0.0
    shift["third_lower"] = 0.0
    return ScenarioSpec(n_subjects, dim, noise, shift, seed)


def scenario_s2(seed, n_subjects=200, dim=64):
    """Every region perturbed identically."""
    return ScenarioSpec(n_subjects, dim, {r: 2.5 for r in REGION_TAGS},
                        {r: 1.0 for r in REGION_TAGS}, seed)


def parse_scenario(text, source="<scenario>"):
    """Read a TOML scenario: scalar keys plus [region_noise] and [makeup_shift] tables."""
    cfg = parse_config(text, source)
    try:
        return ScenarioSpec(
            n_subjects=int(cfg["n_subjects"]),
            dim=int(cfg["dim"]),
            region_noise={k: float(v) for k, v in cfg.get("region_noise", {}).items()},
            makeup_shift={k: float(v) for k, v in cfg.get("makeup_shift", {}).items()},
            seed=int(cfg.get("seed", 0)),
            images_per_state=int(cfg.get("images_per_state", 1)),
            provider_id=str(cfg.get("provider_id", "synth")),
            dataset_id=str(cfg.get("dataset_id", "custom")),
        )
    except KeyError as exc:
        raise DataError("malformed-file", f"{source}: missing key {exc.args[0]}") from None
    except (TypeError, ValueError) as exc:
        raise DataError("malformed-file", f"{source}: {exc}") from None
