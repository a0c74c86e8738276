"""Per-site spheres in embedding space: centroid, MAD radius, overlap repair."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path

import numpy as np

PROFILE_VERSION = 1


class DegenerateVectorError(ValueError):
    pass


class IndistinguishableSitesError(ValueError):
    pass


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise DegenerateVectorError("cosine distance undefined for a near-zero vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


def cosine_distances(centroids: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Distances between every row of ``centroids`` and every row of ``z``.

    Returns shape ``(len(z), len(centroids))``; a 1-D ``z`` gives one row.
    """
    C = np.asarray(centroids, dtype=np.float64)
    Z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    cn = np.linalg.norm(C, axis=1)
    zn = np.linalg.norm(Z, axis=1)
    if np.any(cn < 1e-12) or np.any(zn < 1e-12):
        raise DegenerateVectorError("cosine distance undefined for a near-zero vector")
    return 1.0 - (Z @ C.T) / (zn[:, None] * cn[None, :])


def compute_centroid(embeddings) -> np.ndarray:
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim != 2 or len(E) == 0:
        raise ValueError("need a non-empty (k, eta) array of embeddings")
    c = E.mean(axis=0)
    if np.linalg.norm(c) < 1e-6:
        raise DegenerateVectorError("site centroid has near-zero norm")
    return c


def compute_radius(distances) -> float:
    """Median absolute deviation of ``distances`` from their median."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("need at least one distance")
    m = np.median(d)
    return float(np.median(np.abs(d - m)))


@dataclass(frozen=True)
class WebsiteProfile:
    site: str
    centroid: np.ndarray
    radius: float
    support: int = 0

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"negative radius for {self.site!r}")
        if np.linalg.norm(self.centroid) <= 1e-6:
            raise DegenerateVectorError(f"degenerate centroid for {self.site!r}")


@dataclass
class ProfileStore:
    profiles: dict
    eta: int
    model_ref: str = ""
    created: dict = field(default_factory=dict)

    @property
    def sites(self) -> list[str]:
        return sorted(self.profiles)

    def __len__(self):
        return len(self.profiles)

    def arrays(self):
        """``(sites, centroids (m, eta), radii (m,))`` in sorted site order."""
        sites = self.sites
        C = np.stack([self.profiles[s].centroid for s in sites])
        r = np.array([self.profiles[s].radius for s in sites])
        return sites, C, r

    def overlapping_pairs(self, tol=1e-9):
        sites, C, r = self.arrays()
        bad = []
        for i, j in combinations(range(len(sites)), 2):
            if r[i] + r[j] > cosine_distance(C[i], C[j]) + tol:
                bad.append((sites[i], sites[j]))
        return bad

    def to_dict(self):
        return {
            "version": PROFILE_VERSION,
            "eta": self.eta,
            "model_ref": self.model_ref,
            "created": self.created,
            "sites": [
                {
                    "site": s,
                    "centroid": self.profiles[s].centroid.tolist(),
                    "radius": self.profiles[s].radius,
                    "support": self.profiles[s].support,
                }
                for s in self.sites
            ],
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()) + "\n")
        return path

    @classmethod
    def from_dict(cls, data):
        if data.get("version") != PROFILE_VERSION:
            raise ValueError(f"unsupported profile store version {data.get('version')!r}")
        profiles = {}
        for row in data["sites"]:
            c = np.asarray(row["centroid"], dtype=np.float64)
            if len(c) != data["eta"]:
                raise ValueError(f"centroid of {row['site']!r} has length {len(c)}, eta={data['eta']}")
            profiles[row["site"]] = WebsiteProfile(row["site"], c, float(row["radius"]), int(row.get("support", 0)))
        return cls(profiles, int(data["eta"]), data.get("model_ref", ""), data.get("created", {}))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def resolve_overlaps(store: ProfileStore) -> ProfileStore:
    """Shrink radii pairwise (ascending site order) until no spheres overlap.

    For an overlapping pair each radius loses its proportional share of the
    overlap, which leaves ``r_i + r_j == d`` exactly.
    """
    sites = store.sites
    radii = {s: store.profiles[s].radius for s in sites}
    for a, b in combinations(sites, 2):
        d = cosine_distance(store.profiles[a].centroid, store.profiles[b].centroid)
        ra, rb = radii[a], radii[b]
        total = ra + rb
        if total >= d:
            if total == 0:
                raise IndistinguishableSitesError(f"sites {a!r} and {b!r} share a centroid")
            excess = total - d
            # r - r/(ra+rb) * excess == r * d / (ra+rb); the second form cannot go negative
            radii[a] = max(0.0, ra - ra / total * excess)
            radii[b] = max(0.0, rb - rb / total * excess)
    profiles = {s: replace(store.profiles[s], radius=radii[s]) for s in sites}
    return ProfileStore(profiles, store.eta, store.model_ref, dict(store.created))


def profiles_from_embeddings(embeddings, labels, model_ref="", resolve=True) -> ProfileStore:
    Z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    profiles = {}
    for site in sorted(set(labels.tolist())):
        Zs = Z[labels == site]
        c = compute_centroid(Zs)
        r = compute_radius(cosine_distances(c[None], Zs)[:, 0])
        profiles[site] = WebsiteProfile(site, c, r, len(Zs))
    store = ProfileStore(profiles, Z.shape[1], model_ref, {"embeddings": int(len(Z))})
    return resolve_overlaps(store) if resolve else store


def build_profiles(model, dataset, model_ref="") -> ProfileStore:
    """Embed the monitored traces of ``dataset`` and build a resolved store."""
    traces = [t for t in dataset.traces if t.is_monitored]
    labels = [t.label for t in traces]
    counts = {s: labels.count(s) for s in set(labels)}
    thin = sorted(s for s, k in counts.items() if k < 2)
    if thin:
        raise ValueError(f"need >= 2 embeddings per site; too few for {thin}")
    Z = model.embed_traces(traces)
    return profiles_from_embeddings(Z, labels, model_ref)
