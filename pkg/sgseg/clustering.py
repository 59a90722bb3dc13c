"""
HDBSCAN: hierarchical density-based clustering with noise.

The pipeline follows the usual five steps:

1. core distance of every point (distance to its ``min_samples``-th neighbour),
2. mutual reachability ``max(core_i, core_j, d(i, j))``,
3. minimum spanning tree over mutual reachability (dense Prim),
4. single linkage tree condensed at ``min_cluster_size``,
5. excess-of-mass selection of the most stable clusters.

Everything is dense ``O(n^2)`` numpy; corpora here are a few thousand reports.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from sgseg.exceptions import SGSegFormatException

logger = logging.getLogger(__name__)

CONDENSED_DTYPE = np.dtype([
    ("parent", np.intp),
    ("child", np.intp),
    ("lambda_val", np.float64),
    ("child_size", np.intp),
])

# zero distances (duplicated points) are lifted to this fraction of the largest distance
_ZERO_DISTANCE_FLOOR = 1e-12


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    stabilities: np.ndarray
    probabilities: np.ndarray
    condensed_tree: np.ndarray = None

    @property
    def n_clusters(self):
        return len(self.stabilities)

    def members(self, cluster):
        return np.flatnonzero(self.labels == cluster)


def core_distances(distance_matrix, min_samples):
    k = min(min_samples, distance_matrix.shape[0] - 1)
    return np.sort(distance_matrix, axis=1)[:, k]


def mutual_reachability(distance_matrix, min_samples):
    core = core_distances(distance_matrix, min_samples)
    return np.maximum(distance_matrix, np.maximum.outer(core, core))


def minimum_spanning_tree(graph):
    """
    Prim's algorithm on a dense symmetric matrix.

    :return: ``(n - 1, 3)`` array of ``(from, to, weight)`` rows
    """
    n = graph.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    source = np.zeros(n, dtype=np.intp)
    edges = np.zeros((n - 1, 3))

    current = 0
    in_tree[current] = True
    for e in range(n - 1):
        candidate = graph[current] < best
        candidate &= ~in_tree
        best[candidate] = graph[current][candidate]
        source[candidate] = current

        masked = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(masked))
        edges[e] = (source[nxt], nxt, best[nxt])
        in_tree[nxt] = True
        current = nxt

    return edges


def single_linkage(mst, n_points):
    """
    Scipy-style linkage matrix from MST edges: ``(left, right, distance, size)``;
    merged clusters get ids ``n_points, n_points + 1, ...``.
    """
    order = np.argsort(mst[:, 2], kind="mergesort")
    mst = mst[order]

    parent = np.arange(2 * n_points - 1)
    size = np.ones(2 * n_points - 1, dtype=np.intp)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    linkage = np.zeros((n_points - 1, 4))
    next_label = n_points
    for i, (a, b, dist) in enumerate(mst):
        ra, rb = find(int(a)), find(int(b))
        linkage[i] = (ra, rb, dist, size[ra] + size[rb])
        parent[ra] = parent[rb] = next_label
        size[next_label] = size[ra] + size[rb]
        next_label += 1

    return linkage


def _bfs_from_hierarchy(hierarchy, root, n_points):
    process = [root]
    result = []
    while process:
        result.extend(process)
        process = [
            int(child)
            for node in process if node >= n_points
            for child in hierarchy[node - n_points, :2]
        ]
    return result


def condense_tree(hierarchy, min_cluster_size):
    n_points = hierarchy.shape[0] + 1
    root = 2 * hierarchy.shape[0]
    next_label = n_points + 1

    relabel = np.empty(root + 1, dtype=np.intp)
    relabel[root] = n_points
    ignore = np.zeros(root + 1, dtype=bool)
    rows = []

    def count(node):
        return int(hierarchy[node - n_points, 3]) if node >= n_points else 1

    def drop_subtree(node, parent_label, lambda_value):
        for sub_node in _bfs_from_hierarchy(hierarchy, node, n_points):
            if sub_node < n_points:
                rows.append((parent_label, sub_node, lambda_value, 1))
            ignore[sub_node] = True

    for node in _bfs_from_hierarchy(hierarchy, root, n_points):
        if ignore[node] or node < n_points:
            continue

        left, right, distance, _ = hierarchy[node - n_points]
        left, right = int(left), int(right)
        lambda_value = 1.0 / distance
        left_count, right_count = count(left), count(right)

        if left_count >= min_cluster_size and right_count >= min_cluster_size:
            relabel[left] = next_label
            rows.append((relabel[node], next_label, lambda_value, left_count))
            relabel[right] = next_label + 1
            rows.append((relabel[node], next_label + 1, lambda_value, right_count))
            next_label += 2
        elif left_count < min_cluster_size and right_count < min_cluster_size:
            drop_subtree(left, relabel[node], lambda_value)
            drop_subtree(right, relabel[node], lambda_value)
        elif left_count < min_cluster_size:
            relabel[right] = relabel[node]
            drop_subtree(left, relabel[node], lambda_value)
        else:
            relabel[left] = relabel[node]
            drop_subtree(right, relabel[node], lambda_value)

    return np.array(rows, dtype=CONDENSED_DTYPE)


def compute_stability(condensed_tree):
    parents = condensed_tree["parent"]
    children = condensed_tree["child"]
    lambdas = condensed_tree["lambda_val"]
    sizes = condensed_tree["child_size"]

    root = parents.min()
    births = {int(root): 0.0}
    for child, lam, size in zip(children, lambdas, sizes):
        if size > 1:
            births[int(child)] = lam

    stability = {c: 0.0 for c in births}
    for parent, lam, size in zip(parents, lambdas, sizes):
        stability[int(parent)] += (lam - births[int(parent)]) * size

    return stability


def _cluster_descendants(cluster_tree, node):
    result = []
    process = [node]
    while process:
        result.extend(process)
        process = [
            int(c) for c in cluster_tree["child"][np.isin(cluster_tree["parent"], process)]
        ]
    return result


def select_clusters(condensed_tree, stability, allow_single_cluster=False):
    """
    Excess-of-mass selection. When a node's own stability equals the summed
    stability of its children the children win.
    """
    stability = dict(stability)
    root = int(condensed_tree["parent"].min())
    cluster_tree = condensed_tree[condensed_tree["child_size"] > 1]

    nodes = sorted(stability, reverse=True)
    if not allow_single_cluster:
        nodes = [n for n in nodes if n != root]

    is_cluster = {n: True for n in nodes}
    for node in nodes:
        children = cluster_tree["child"][cluster_tree["parent"] == node]
        if len(children):
            subtree_stability = sum(stability[int(c)] for c in children)
            if subtree_stability >= stability[node]:
                is_cluster[node] = False
                stability[node] = subtree_stability
                continue
        for sub_node in _cluster_descendants(cluster_tree, node):
            if sub_node != node:
                is_cluster[sub_node] = False

    return sorted(n for n, selected in is_cluster.items() if selected)


def _label_points(condensed_tree, clusters, n_points):
    parent_of = dict(zip(condensed_tree["child"].tolist(), condensed_tree["parent"].tolist()))
    label_map = {c: i for i, c in enumerate(clusters)}

    labels = np.full(n_points, -1, dtype=np.intp)
    for point in range(n_points):
        node = parent_of.get(point)
        while node is not None:
            if node in label_map:
                labels[point] = label_map[node]
                break
            node = parent_of.get(node)
    return labels


def _membership(condensed_tree, clusters, labels):
    """Point lambda relative to the deepest lambda of its cluster."""
    deaths = {}
    for parent, lam in zip(condensed_tree["parent"], condensed_tree["lambda_val"]):
        deaths[int(parent)] = max(deaths.get(int(parent), 0.0), lam)

    point_lambda = {
        int(c): lam
        for c, lam, size in zip(
            condensed_tree["child"], condensed_tree["lambda_val"], condensed_tree["child_size"]
        )
        if size == 1
    }

    probabilities = np.zeros(len(labels))
    for point, label in enumerate(labels):
        if label < 0:
            continue
        max_lambda = deaths[clusters[label]]
        if max_lambda == 0.0 or not np.isfinite(max_lambda):
            probabilities[point] = 1.0
        else:
            probabilities[point] = min(point_lambda[point], max_lambda) / max_lambda
    return probabilities


def hdbscan_cluster(vectors, min_cluster_size=5, min_samples=None, allow_single_cluster=False):
    """
    Cluster ``vectors`` (``(n, d)`` array-like) with HDBSCAN.

    :return: :class:`ClusterAssignment` with labels ``0..K-1`` and ``-1`` for noise
    """
    data = np.asarray(vectors, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    n_points = data.shape[0]
    if min_samples is None:
        min_samples = min_cluster_size

    if n_points < 1:
        raise SGSegFormatException("Need at least one vector to cluster")
    if min_cluster_size < 2:
        raise SGSegFormatException("min_cluster_size must be >= 2")
    if not 1 <= min_samples <= n_points:
        raise SGSegFormatException(
            "min_samples must be between 1 and the number of vectors ({})".format(n_points)
        )
    if not np.all(np.isfinite(data)):
        raise SGSegFormatException("Cannot cluster non-finite vectors")

    if n_points < min_cluster_size:
        logger.debug("%d points < min_cluster_size=%d, all noise", n_points, min_cluster_size)
        return ClusterAssignment(
            labels=np.full(n_points, -1, dtype=np.intp),
            stabilities=np.zeros(0),
            probabilities=np.zeros(n_points),
        )

    distances = cdist(data, data)
    largest = distances.max()
    if largest == 0.0:
        # all points identical: one cluster
        return ClusterAssignment(
            labels=np.zeros(n_points, dtype=np.intp),
            stabilities=np.array([np.inf]),
            probabilities=np.ones(n_points),
        )

    reachability = mutual_reachability(distances, min_samples)
    reachability = np.maximum(reachability, largest * _ZERO_DISTANCE_FLOOR)

    mst = minimum_spanning_tree(reachability)
    hierarchy = single_linkage(mst, n_points)
    condensed = condense_tree(hierarchy, min_cluster_size)
    stability = compute_stability(condensed)
    clusters = select_clusters(condensed, stability, allow_single_cluster)

    labels = _label_points(condensed, clusters, n_points)
    probabilities = _membership(condensed, clusters, labels)

    logger.debug(
        "hdbscan: %d points, %d clusters, %d noise",
        n_points, len(clusters), int(np.sum(labels < 0)),
    )

    return ClusterAssignment(
        labels=labels,
        stabilities=np.array([stability[c] for c in clusters]),
        probabilities=probabilities,
        condensed_tree=condensed,
    )
