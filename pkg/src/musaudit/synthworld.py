"""Parametric simulator of generators in embedding space.

Each simulated track has a latent caption vector ``c``. A shared random
projection maps it into the encoder's embedding space; the generator adds a
style offset. Originals and generations are that point plus Gaussian noise:
member generations use the member noise, non-member generations use the
larger non-member noise (member noise + alignment gap). With a zero gap the
two classes are identically distributed.

Short-clip generators amplify the alignment gap by ``regime_multiplier``.
Their non-member pairs drift much further apart, so an auditor fit on them
learns a loose decision boundary that does not carry over to long-form
generators, while the reverse direction still works.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embeddings import AggregatedEmbedding, ManifestRecord
from .errors import ValidationError
from .numerics import make_rng

REGIME_DURATION_S = {"long": 150.0, "short": 10.0}
DEFAULT_SHORT_MULTIPLIER = 3.0


@dataclass
class SimGeneratorSpec:
    generator_id: str
    embedding_shape: tuple = (32,)
    semantic_dim: int = 16
    content_scale: float = 0.5
    alignment_gap: float = 1.0
    member_noise: float = 0.5
    style_offset: np.ndarray | None = None
    clip_regime: str = "long"
    regime_multiplier: float = 1.0
    projection_seed: int = 0

    def __post_init__(self):
        self.embedding_shape = tuple(int(s) for s in self.embedding_shape)
        if len(self.embedding_shape) not in (1, 2) or min(self.embedding_shape) < 1:
            raise ValidationError(f"embedding shape must be (dim,) or (L, D), got {self.embedding_shape}")
        if self.content_scale < 0:
            raise ValidationError("content_scale must be >= 0")
        if self.member_noise <= 0:
            raise ValidationError("member_noise must be > 0")
        if self.alignment_gap < 0:
            raise ValidationError("alignment_gap must be >= 0")
        if self.clip_regime not in REGIME_DURATION_S:
            raise ValidationError(f"clip_regime must be one of {sorted(REGIME_DURATION_S)}")
        if self.regime_multiplier < 1:
            raise ValidationError("regime_multiplier must be >= 1")
        if self.style_offset is None:
            self.style_offset = np.zeros(self.embedding_shape)
        self.style_offset = np.asarray(self.style_offset, dtype=np.float64)
        if self.style_offset.shape != self.embedding_shape:
            raise ValidationError(f"style_offset shape {self.style_offset.shape} != {self.embedding_shape}")

    @property
    def embedding_form(self) -> str:
        return "vector" if len(self.embedding_shape) == 1 else "map"

    @property
    def nonmember_noise(self) -> float:
        return self.member_noise + self.alignment_gap

    @property
    def effective_nonmember_noise(self) -> float:
        return self.member_noise + self.regime_multiplier * self.alignment_gap


def projection(spec: SimGeneratorSpec) -> np.ndarray:
    """Shared caption->embedding map; projected entries have standard deviation content_scale."""
    dim = int(np.prod(spec.embedding_shape))
    rng = make_rng(spec.projection_seed, "projection", dim, spec.semantic_dim)
    return rng.standard_normal((spec.semantic_dim, dim)) * (spec.content_scale / np.sqrt(spec.semantic_dim))


def sample_world(spec: SimGeneratorSpec, n_pairs_member: int, n_pairs_nonmember: int, seed: int):
    """Draw one generator's aligned groups.

    Returns ``(manifest, embeddings_by_item)``; members come first, then
    non-members, each pair contributing an original and a generation.
    """
    if n_pairs_member < 1 or n_pairs_nonmember < 1:
        raise ValidationError("pair counts must be >= 1")
    proj = projection(spec)
    rng = make_rng(seed, "world", spec.generator_id)
    gid = spec.generator_id
    duration = REGIME_DURATION_S[spec.clip_regime]
    manifest = []
    embeddings = {}
    n_total = n_pairs_member + n_pairs_nonmember
    # draw everything in a fixed order so the output depends only on (spec, seed)
    latents = rng.standard_normal((n_total, spec.semantic_dim))
    orig_noise = rng.standard_normal((n_total,) + spec.embedding_shape)
    gen_noise = rng.standard_normal((n_total,) + spec.embedding_shape)
    centres = (latents @ proj).reshape((n_total,) + spec.embedding_shape) + spec.style_offset
    for i in range(n_total):
        member = i < n_pairs_member
        k = i if member else i - n_pairs_member
        tag = "m" if member else "n"
        pair_id = f"{gid}-{tag}{k:05d}"
        gen_sigma = spec.member_noise if member else spec.effective_nonmember_noise
        original = centres[i] + spec.member_noise * orig_noise[i]
        generation = centres[i] + gen_sigma * gen_noise[i]
        for role, suffix, values in (
            ("member" if member else "nonmember", "orig", original),
            ("gen_member" if member else "gen_nonmember", "gen", generation),
        ):
            item_id = f"{pair_id}-{suffix}"
            manifest.append(
                ManifestRecord(
                    item_id=item_id,
                    generator_id=gid,
                    role=role,
                    pair_id=pair_id,
                    source_path=f"synthetic://{gid}/{item_id}",
                    duration_s=duration,
                )
            )
            embeddings[item_id] = AggregatedEmbedding(values, "synth")
    return manifest, embeddings


@dataclass
class WorldSuite:
    specs: list
    datasets: dict = field(default_factory=dict)  # generator_id -> (manifest, embeddings)


SUITE_IDS = ("gen_a", "gen_m", "gen_s")


def make_three_world_suite(
    base_seed: int,
    alignment_gap: float | None = None,
    member_noise: float = 0.5,
    n_pairs_member: int = 1000,
    n_pairs_nonmember: int = 1000,
    embedding_shape: tuple = (32,),
    semantic_dim: int = 16,
    content_scale: float = 0.5,
    short_multiplier: float = DEFAULT_SHORT_MULTIPLIER,
    offset_scale: float = 0.1,
) -> WorldSuite:
    """Three generators: two long-form, one short-form (the middle one).

    ``alignment_gap`` defaults to twice the member noise.
    """
    gap = 2.0 * member_noise if alignment_gap is None else alignment_gap
    rng = make_rng(base_seed, "suite-offsets")
    specs = []
    for gid in SUITE_IDS:
        short = gid == "gen_m"
        specs.append(
            SimGeneratorSpec(
                generator_id=gid,
                embedding_shape=embedding_shape,
                semantic_dim=semantic_dim,
                content_scale=content_scale,
                alignment_gap=gap,
                member_noise=member_noise,
                style_offset=offset_scale * rng.standard_normal(tuple(embedding_shape)),
                clip_regime="short" if short else "long",
                regime_multiplier=short_multiplier if short else 1.0,
                projection_seed=base_seed,
            )
        )
    suite = WorldSuite(specs)
    for spec in specs:
        suite.datasets[spec.generator_id] = sample_world(spec, n_pairs_member, n_pairs_nonmember, base_seed)
    return suite
