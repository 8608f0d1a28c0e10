"""Synthetic multi-domain classification data.

All domains share the same class prototypes; a domain only changes the
"style" of its samples through an invertible affine map (rotation,
anisotropic scale, translation) whose magnitude grows with
``shift_strength``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .errors import ConfigError

TRAIN_FRACTION = 0.8


@dataclass
class DomainSpec:
    domain_id: int
    rotation: np.ndarray
    scales: np.ndarray
    translation: np.ndarray
    noise: float

    @property
    def matrix(self) -> np.ndarray:
        return self.rotation * self.scales[None, :]

    def apply(self, z: np.ndarray) -> np.ndarray:
        return z @ self.matrix.T + self.translation


@dataclass
class DomainDataset:
    domain_id: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    spec: DomainSpec | None = field(default=None, repr=False)

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    @property
    def d_in(self) -> int:
        return self.x_train.shape[1]


def _rotation(rng: np.random.Generator, d: int, angle: float) -> np.ndarray:
    g = rng.normal(size=(d, d))
    skew = g - g.T
    skew /= np.linalg.norm(skew, 2)
    return expm(angle * skew)


def _stratified_split(y: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    train, test = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        n_tr = int(round(TRAIN_FRACTION * len(idx)))
        n_tr = min(max(n_tr, 1), len(idx) - 1)
        train.append(idx[:n_tr])
        test.append(idx[n_tr:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def _moons(rng: np.random.Generator, n_per_class: int, d_in: int, embed: np.ndarray) -> tuple:
    t0 = rng.uniform(0, np.pi, n_per_class)
    t1 = rng.uniform(0, np.pi, n_per_class)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    z2 = np.concatenate([upper, lower]) * 2.0
    y = np.repeat([0, 1], n_per_class)
    return z2 @ embed, y


def make_domains(n_domains: int = 4, n_classes: int = 5, n_per_class: int = 200, d_in: int = 16,
                 shift_strength: float = 1.0, seed: int = 0, noise: float = 1.0,
                 prototype_scale: float = 1.0, generator: str = "blobs") -> list[DomainDataset]:
    """Generate ``n_domains`` datasets sharing class semantics.

    Sample ``x = A_d (mu_y + noise * eps) + t_d`` for gaussian blobs. With
    ``shift_strength == 0`` every ``A_d`` is the identity and ``t_d = 0``.
    """
    if n_domains < 2:
        raise ConfigError("need at least 2 domains", field="dataset.n_domains")
    if n_classes < 2:
        raise ConfigError("need at least 2 classes", field="dataset.n_classes")
    if n_per_class < 2 or d_in < 2:
        raise ConfigError("n_per_class and d_in must be at least 2", field="dataset")
    if generator not in ("blobs", "moons"):
        raise ConfigError(f"unknown generator {generator!r}", field="dataset.generator")
    if generator == "moons" and n_classes != 2:
        raise ConfigError("moons generator has exactly 2 classes", field="dataset.n_classes")
    if shift_strength < 0 or noise < 0:
        raise ConfigError("shift_strength and noise must be nonnegative", field="dataset")

    root = np.random.SeedSequence(seed)
    proto_seq, *dom_seqs = root.spawn(n_domains + 1)
    proto_rng = np.random.default_rng(proto_seq)
    prototypes = proto_rng.normal(0.0, prototype_scale, size=(n_classes, d_in))
    embed = np.linalg.qr(proto_rng.normal(size=(d_in, d_in)))[0][:2]

    out = []
    for d, seq in enumerate(dom_seqs):
        style_rng, sample_rng, split_rng = (np.random.default_rng(s) for s in seq.spawn(3))
        angle = shift_strength * style_rng.uniform(0.25, 0.5) * np.pi
        rot = _rotation(style_rng, d_in, angle)
        scales = np.exp(shift_strength * style_rng.normal(0.0, 0.3, size=d_in))
        trans = shift_strength * style_rng.normal(0.0, 1.0, size=d_in)
        spec = DomainSpec(d, rot, scales, trans, noise)

        if generator == "blobs":
            y = np.repeat(np.arange(n_classes), n_per_class)
            z = prototypes[y] + noise * sample_rng.normal(size=(len(y), d_in))
        else:
            z, y = _moons(sample_rng, n_per_class, d_in, embed)
            z = z + 0.1 * noise * sample_rng.normal(size=z.shape)
        x = spec.apply(z)
        tr, te = _stratified_split(y, split_rng)
        out.append(DomainDataset(d, x[tr], y[tr], x[te], y[te], spec))
    return out


def leave_one_out(domains: list[DomainDataset], target_index: int):
    """Split into (sources, target); the target only ever supplies its test split."""
    if not 0 <= target_index < len(domains):
        raise ConfigError(f"target index {target_index} out of range for {len(domains)} domains",
                          field="target")
    sources = [d for i, d in enumerate(domains) if i != target_index]
    return sources, domains[target_index]


@dataclass
class ClientData:
    client_id: int
    domain_id: int
    x: np.ndarray
    y: np.ndarray

    @property
    def n(self) -> int:
        return len(self.y)


def _clients_per_domain(n_sources: int, k: int) -> list[int]:
    base, extra = divmod(k, n_sources)
    return [base + (1 if i < extra else 0) for i in range(n_sources)]


def _label_preserving_shards(y: np.ndarray, m: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Deal each class's (shuffled) indices round-robin into ``m`` shards."""
    shards: list[list[int]] = [[] for _ in range(m)]
    offset = 0
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        for j, i in enumerate(idx):
            shards[(j + offset) % m].append(int(i))
        offset += len(idx)
    return [np.sort(np.asarray(s, dtype=int)) for s in shards]


def partition_clients(sources: list[DomainDataset], k: int, seed: int = 0,
                      mode: str = "domain") -> list[ClientData]:
    """Assign source training data to ``k`` clients.

    ``mode="domain"``: every client holds data from exactly one domain; with
    more clients than domains each domain's train split is dealt into
    class-balanced shards (domains get ``k // n`` or ``k // n + 1`` clients).
    ``mode="pooled"``: the pooled source set is sharded, any ``k >= 1``.
    """
    n_src = len(sources)
    if k < 1:
        raise ConfigError("need at least one client", field="clients")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    clients: list[ClientData] = []
    if mode == "domain":
        if k < n_src:
            raise ConfigError(f"domain-split mode needs K >= {n_src} source domains, got K={k}",
                              field="clients")
        for dom, m in zip(sources, _clients_per_domain(n_src, k)):
            for shard in _label_preserving_shards(dom.y_train, m, rng):
                if shard.size == 0:
                    raise ConfigError(f"too many clients: domain {dom.domain_id} has an empty shard",
                                      field="clients")
                clients.append(ClientData(len(clients), dom.domain_id, dom.x_train[shard],
                                          dom.y_train[shard]))
    elif mode == "pooled":
        x = np.concatenate([d.x_train for d in sources])
        y = np.concatenate([d.y_train for d in sources])
        for shard in _label_preserving_shards(y, k, rng):
            if shard.size == 0:
                raise ConfigError("too many clients for the pooled source set", field="clients")
            clients.append(ClientData(len(clients), -1, x[shard], y[shard]))
    else:
        raise ConfigError(f"unknown partition mode {mode!r}", field="partition")
    return clients


def to_csv(domains: list[DomainDataset], path) -> None:
    """Header ``domain_id, split, y, x_0..x_{d-1}``; floats written with repr precision."""
    d_in = domains[0].d_in
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain_id", "split", "y"] + [f"x_{i}" for i in range(d_in)])
        for dom in domains:
            for split, xs, ys in (("train", dom.x_train, dom.y_train), ("test", dom.x_test, dom.y_test)):
                for xv, yv in zip(xs, ys):
                    w.writerow([dom.domain_id, split, int(yv)] + [repr(float(v)) for v in xv])


def from_csv(path) -> list[DomainDataset]:
    rows: dict[int, dict[str, tuple[list, list]]] = {}
    with open(Path(path), newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:3] != ["domain_id", "split", "y"]:
            raise ConfigError(f"unexpected CSV header {header[:3]}", field="dataset.csv")
        for row in r:
            dom = rows.setdefault(int(row[0]), {"train": ([], []), "test": ([], [])})
            xs, ys = dom[row[1]]
            ys.append(int(row[2]))
            xs.append([float(v) for v in row[3:]])
    d_in = len(header) - 3
    out = []
    for did in sorted(rows):
        tr, te = rows[did]["train"], rows[did]["test"]
        out.append(DomainDataset(did, np.array(tr[0]).reshape(-1, d_in), np.array(tr[1], dtype=int),
                                 np.array(te[0]).reshape(-1, d_in), np.array(te[1], dtype=int)))
    return out
