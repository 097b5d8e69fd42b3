"""Activation profiling, per-layer neuron clustering and network abstraction.

Each hidden site's neurons are treated as points in image-sample space (one
coordinate per profiled image, raw post-activation values). Lloyd k-means
with k-means++ seeding picks clusters; the cluster representative (CR) is the
member closest to the centroid, ties to the lowest flat index. Abstraction
keeps only CRs: a CR keeps its own incoming weights and bias, and every
deleted neuron's outgoing weights are added onto its CR's outgoing column.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetUnsatisfiable, EmptyDataset, InvalidConfig, UnsupportedLayer
from .nn import (
    DTYPE,
    FullyConnected,
    Network,
    NeuronAddress,
    accuracy,
    forward,
    hidden_sites,
)

ABSTRACTABLE_KINDS = {"fully_connected", "sparse_fc", "relu", "flatten", "softmax"}


@dataclass
class ActivationProfile:
    site_index: int
    shape: tuple
    matrix: np.ndarray = field(repr=False)  # images x flattened neurons
    per_neuron_max: np.ndarray = field(repr=False)

    @property
    def width(self):
        return self.matrix.shape[1]


def profile_images(dataset_size, sample_cap, seed):
    """Indices of the profiling subsample: fixed-seed uniform pick, sorted."""
    if dataset_size == 0:
        raise EmptyDataset("cannot profile an empty dataset")
    if sample_cap < 1:
        raise InvalidConfig("sample_cap must be >= 1")
    if sample_cap >= dataset_size:
        return np.arange(dataset_size)
    perm = np.random.RandomState(seed).permutation(dataset_size)
    return np.sort(perm[:sample_cap])


def profile_activations(net, images, sample_cap=5000, seed=42):
    """One ActivationProfile per hidden site over the profiling subsample."""
    idx = profile_images(len(images), sample_cap, seed)
    sites = hidden_sites(net)
    rows = {s.site_index: [] for s in sites}
    for i in idx:
        trace = forward(net, images[i])
        for s in sites:
            rows[s.site_index].append(trace.activations[s.site_index].reshape(-1).copy())
    profiles = []
    for s in sites:
        matrix = np.vstack(rows[s.site_index])
        profiles.append(ActivationProfile(site_index=s.site_index, shape=s.shape,
                                          matrix=matrix, per_neuron_max=matrix.max(axis=0)))
    return profiles


@dataclass
class ClusterAssignment:
    site_index: int
    k: int
    assignment: np.ndarray = field(repr=False)  # neuron -> cluster id
    centroids: np.ndarray = field(repr=False)
    representatives: np.ndarray = field(repr=False)  # cluster id -> neuron flat index
    rng_seed: int = 0


def _dist2(points, centroids):
    d2 = (
        (points * points).sum(axis=1)[:, None]
        + (centroids * centroids).sum(axis=1)[None, :]
        - 2.0 * points @ centroids.T
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(points, k, rs):
    n = len(points)
    chosen = [int(rs.randint(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        total = d2.sum()
        if total <= 0.0:
            # remaining mass is zero: fill with the lowest unchosen indices
            taken = set(chosen)
            chosen.extend(i for i in range(n) if i not in taken)
            chosen = chosen[:k]
            break
        nxt = int(rs.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[chosen].copy()


def kmeans(profile, k, seed=42, max_iter=300):
    """Deterministic Lloyd k-means over the profile's neuron columns."""
    width = profile.width
    if not 1 <= k <= width:
        raise InvalidConfig(f"k={k} outside 1..{width}")
    points = profile.matrix.T.astype(np.float64)

    if k == width:
        return ClusterAssignment(profile.site_index, k, np.arange(width),
                                 points.copy(), np.arange(width), seed)
    if np.all(points == points[0]):
        # all neurons identical: balanced contiguous blocks by index order
        assignment = (np.arange(width) * k) // width
        reps = np.array([int(np.argmax(assignment == c)) for c in range(k)])
        centroids = points[reps].copy()
        return ClusterAssignment(profile.site_index, k, assignment, centroids, reps, seed)

    rs = np.random.RandomState(seed)
    centroids = _kmeans_pp_init(points, k, rs)
    assignment = None
    for _ in range(max_iter):
        d2 = _dist2(points, centroids)
        new_assign = np.argmin(d2, axis=1)
        # deterministic empty-cluster repair: move the farthest point out of
        # a multi-member cluster (lowest index on ties)
        sizes = np.bincount(new_assign, minlength=k)
        for c in range(k):
            if sizes[c] == 0:
                eligible = np.where(sizes[new_assign] > 1)[0]
                far = eligible[int(np.argmax(d2[eligible, new_assign[eligible]]))]
                sizes[new_assign[far]] -= 1
                new_assign[far] = c
                sizes[c] = 1
        if assignment is not None and np.array_equal(new_assign, assignment):
            break
        assignment = new_assign
        for c in range(k):
            members = points[assignment == c]
            centroids[c] = members.mean(axis=0)

    reps = np.empty(k, dtype=np.int64)
    for c in range(k):
        members = np.flatnonzero(assignment == c)
        dd = ((points[members] - centroids[c]) ** 2).sum(axis=1)
        reps[c] = members[int(np.argmin(dd))]

    # canonical cluster order: ascending representative index, so identity
    # abstraction (k == width) reproduces the original neuron order exactly
    order = np.argsort(reps, kind="stable")
    remap = np.empty(k, dtype=np.int64)
    remap[order] = np.arange(k)
    return ClusterAssignment(profile.site_index, k, remap[assignment],
                             centroids[order], reps[order], seed)


def select_representatives(ca, shape):
    """CR addresses plus their unflattened positions (row-major inverse)."""
    out = []
    for flat in ca.representatives:
        pos = tuple(int(v) for v in np.unravel_index(int(flat), shape)) \
            if len(shape) > 1 else (int(flat),)
        out.append((NeuronAddress(ca.site_index, int(flat)), pos))
    return out


@dataclass
class CRSet:
    clustering_rate: float
    seed: int
    assignments: list  # ClusterAssignment per hidden site, in site order

    def by_site(self):
        return {ca.site_index: ca for ca in self.assignments}


def cluster_count(rate, width):
    # round first: 0.1 * 510 is 51.000000000000004 in binary floats and must
    # still yield ceil == 51
    return min(width, max(1, math.ceil(round(rate * width, 9))))


def cluster_sites(profiles, rate, seed, k_override=None):
    """CRSet for all hidden sites at one clustering rate."""
    if not 0 < rate <= 1:
        raise InvalidConfig(f"clustering rate {rate} outside (0,1]")
    assignments = []
    for p in profiles:
        k = (k_override or {}).get(p.site_index) or cluster_count(rate, p.width)
        assignments.append(kmeans(p, k, seed=seed))
    return CRSet(clustering_rate=rate, seed=seed, assignments=assignments)


@dataclass
class AbstractNetwork:
    network: Network
    crset: CRSet
    site_indices: list           # hidden site indices, in order
    cr_flat: dict                # site_index -> array: abstract idx -> original flat
    assignment: dict             # site_index -> array: original flat -> abstract idx
    accuracy_drop: float = 0.0

    def to_original(self, addr):
        """Abstract neuron address -> the CR's address in the original net."""
        return NeuronAddress(addr.layer_index, int(self.cr_flat[addr.layer_index][addr.flat_index]))


def _dense_rows(layer, rows):
    if layer.kind == "fully_connected":
        return layer.weight[rows]
    return np.vstack([layer.dense_row(int(r)) for r in rows])


def _merge_columns(w, assignment, k):
    """Sum outgoing weight columns of each cluster onto its CR column.

    Member columns are added in ascending neuron order, keeping the reduction
    order fixed regardless of worker count.
    """
    merged = np.zeros((w.shape[0], k), dtype=DTYPE)
    for c in range(k):
        members = np.flatnonzero(assignment == c)
        merged[:, c] = w[:, members].sum(axis=1, dtype=DTYPE)
    return merged


def abstract_network(net_fc, crset):
    """CR-only network with redirected weights (FC/flatten nets only)."""
    for layer in net_fc.layers:
        if layer.kind not in ABSTRACTABLE_KINDS:
            raise UnsupportedLayer(layer.kind, layer.name)
    sites = hidden_sites(net_fc)
    by_site = crset.by_site()
    if [s.site_index for s in sites] != sorted(by_site):
        raise InvalidConfig("cluster assignments do not match the network's hidden sites")

    new_layers = list(net_fc.layers)
    prev_ca = None
    for s in sites:
        ca = by_site[s.site_index]
        layer = net_fc.layers[s.param_index]
        w = _dense_rows(layer, ca.representatives)
        if prev_ca is not None:
            w = _merge_columns(w, prev_ca.assignment, prev_ca.k)
        b = layer.bias[ca.representatives]
        new_layers[s.param_index] = FullyConnected(layer.name, w, b)
        prev_ca = ca

    # final classifier: keep all rows, merge columns of the last hidden site
    last_param = max(i for i, l in enumerate(net_fc.layers) if l.kind in
                     ("fully_connected", "sparse_fc"))
    out_layer = net_fc.layers[last_param]
    w = _dense_rows(out_layer, np.arange(out_layer.out_size))
    w = _merge_columns(w, prev_ca.assignment, prev_ca.k)
    new_layers[last_param] = FullyConnected(out_layer.name, w, out_layer.bias)

    abstract = Network(net_fc.input_shape, new_layers, net_fc.class_count)
    return AbstractNetwork(
        network=abstract,
        crset=crset,
        site_indices=[s.site_index for s in sites],
        cr_flat={s.site_index: by_site[s.site_index].representatives for s in sites},
        assignment={s.site_index: by_site[s.site_index].assignment for s in sites},
    )


RATE_GRID = [round(0.05 * i, 2) for i in range(1, 21)]


def choose_abstraction_rate(net_fc, images, labels, drop_budget, seed=42,
                            sample_cap=5000, profiles=None, deadline=None):
    """Smallest grid rate whose abstraction stays within the accuracy budget.

    Binary search over RATE_GRID; rate 1.0 is the identity abstraction and
    always qualifies, so the search is well-defined.
    """
    if not 0 < drop_budget < 1:
        raise InvalidConfig(f"drop budget {drop_budget} outside (0,1)")
    idx = profile_images(len(images), sample_cap, seed)
    eval_images = [images[i] for i in idx]
    eval_labels = [int(labels[i]) for i in idx]
    if profiles is None:
        profiles = profile_activations(net_fc, images, sample_cap=sample_cap, seed=seed)
    base_acc = accuracy(net_fc, eval_images, eval_labels)

    cache = {}

    def evaluate(rate):
        if rate not in cache:
            crset = cluster_sites(profiles, rate, seed)
            abs_net = abstract_network(net_fc, crset)
            abs_net.accuracy_drop = base_acc - accuracy(abs_net.network, eval_images,
                                                        eval_labels)
            cache[rate] = abs_net
        return cache[rate]

    lo, hi = 0, len(RATE_GRID) - 1
    while lo < hi:
        if deadline is not None and deadline.expired():
            break
        mid = (lo + hi) // 2
        if evaluate(RATE_GRID[mid]).accuracy_drop <= drop_budget:
            hi = mid
        else:
            lo = mid + 1
    chosen = evaluate(RATE_GRID[hi])
    if chosen.accuracy_drop > drop_budget:
        raise BudgetUnsatisfiable(
            f"identity abstraction should never drop accuracy, measured "
            f"{chosen.accuracy_drop:.4f} > {drop_budget}")
    return RATE_GRID[hi], chosen
