"""
Location pseudo-labels from structured chest X-ray reports.

Reports follow a small grammar::

    No pulmonary infection.
    Unilateral pulmonary infection, one infected area, middle left lung.
    Bilateral pulmonary infection, two infected areas, upper left lung and lower right lung.

:func:`parse_report` is the rule-based label oracle, :func:`synthesize_report`
its inverse. :func:`pseudo_label_corpus` labels a whole corpus and audits it by
clustering bag-of-words embeddings with HDBSCAN.
"""

import logging
import re
from collections import Counter, namedtuple
from dataclasses import dataclass, field

import numpy as np

from sgseg.clustering import ClusterAssignment, hdbscan_cluster
from sgseg.exceptions import SGSegFormatException
from sgseg.utils import bits2str, str2bits

logger = logging.getLogger(__name__)

SIDES = ("left", "right")
ZONES = ("upper", "middle", "lower")
# canonical order: L-upper, L-middle, L-lower, R-upper, R-middle, R-lower
REGIONS = tuple((side, zone) for side in SIDES for zone in ZONES)
NUM_REGIONS = len(REGIONS)

COUNT_WORDS = ("zero", "one", "two", "three", "four", "five", "six")

LOCATION_WORDS = frozenset(ZONES + SIDES)
FILLER_WORDS = frozenset(("pulmonary", "infection", "area", "areas"))

GRAMMAR_WORDS = (
    "no", "unilateral", "bilateral", "pulmonary", "infection",
    "one", "two", "three", "four", "five", "six",
    "infected", "area", "areas",
    "upper", "middle", "lower", "left", "right", "lung", "and",
)

_re_space = re.compile(r"\s+")
_re_word = re.compile(r"[a-z0-9]+")
_re_zone = re.compile(r"\b(?P<zone>upper|middle|lower)\s+(?P<side>left|right)\s+lung\b")
_re_count = re.compile(
    r"\b(?P<count>zero|one|two|three|four|five|six|\d+)\s+infected\s+areas?\b"
)
_re_status = re.compile(r"\b(?P<status>no|unilateral|bilateral)\s+pulmonary\s+infection\b")


class LocationLabel(tuple):
    """Six binary zone bits in canonical region order."""

    def __new__(cls, bits=(0,) * NUM_REGIONS):
        bits = tuple(int(b) for b in bits)
        if len(bits) != NUM_REGIONS or any(b not in (0, 1) for b in bits):
            raise SGSegFormatException(
                "A location label needs {} binary values, got {!r}".format(NUM_REGIONS, bits)
            )
        return super().__new__(cls, bits)

    @classmethod
    def from_str(cls, str_bits):
        return cls(str2bits(str_bits))

    @classmethod
    def from_regions(cls, indices):
        bits = [0] * NUM_REGIONS
        for i in indices:
            bits[i] = 1
        return cls(bits)

    @property
    def popcount(self):
        return sum(self)

    @property
    def sides(self):
        return tuple(
            side for s, side in enumerate(SIDES)
            if any(self[s * len(ZONES):(s + 1) * len(ZONES)])
        )

    def __str__(self):
        return bits2str(self)

    def __repr__(self):
        return "LocationLabel('{}')".format(bits2str(self))


EMPTY_LABEL = LocationLabel()


def all_labels():
    for n in range(2 ** NUM_REGIONS):
        yield LocationLabel((n >> (NUM_REGIONS - 1 - i)) & 1 for i in range(NUM_REGIONS))


def zone_phrase(region_index):
    side, zone = REGIONS[region_index]
    return "{} {} lung".format(zone, side)


def normalize_text(text):
    return _re_space.sub(" ", text.strip().lower())


ParseResult = namedtuple("ParseResult", ["label", "warnings"])


def parse_report_detailed(text):
    norm = normalize_text(text or "")
    warnings = []

    found = set()
    for match in _re_zone.finditer(norm):
        found.add(REGIONS.index((match["side"], match["zone"])))
    label = LocationLabel.from_regions(found)

    status = _re_status.search(norm)
    if status is None:
        if not found:
            warnings.append("unparseable report, using empty label")
        else:
            warnings.append("missing infection status clause")
    else:
        expected = {0: "no", 1: "unilateral", 2: "bilateral"}[len(label.sides)]
        if status["status"] != expected:
            warnings.append(
                "status '{}' disagrees with zones found ({} side(s))".format(
                    status["status"], len(label.sides)
                )
            )

    count = _re_count.search(norm)
    if count is not None:
        value = count["count"]
        value = int(value) if value.isdigit() else COUNT_WORDS.index(value)
        if value != label.popcount:
            warnings.append(
                "count {} disagrees with {} zone(s) found".format(value, label.popcount)
            )
    elif found:
        warnings.append("missing infected area count")

    for warning in warnings:
        logger.debug("%s: %r", warning, text)

    return ParseResult(label, warnings)


def parse_report(text):
    return parse_report_detailed(text).label


def synthesize_report(label):
    label = LocationLabel(label)
    sides = label.sides
    if not sides:
        return "No pulmonary infection."

    status = "Unilateral" if len(sides) == 1 else "Bilateral"
    count = label.popcount
    areas = "{} infected area{}".format(COUNT_WORDS[count], "" if count == 1 else "s")

    zones = [zone_phrase(i) for i, bit in enumerate(label) if bit]
    if len(zones) == 1:
        zone_list = zones[0]
    else:
        zone_list = ", ".join(zones[:-1]) + " and " + zones[-1]

    return "{} pulmonary infection, {}, {}.".format(status, areas, zone_list)


EMBEDDING_VOCAB = GRAMMAR_WORDS + ("[OOV]",)
_embedding_index = {word: i for i, word in enumerate(EMBEDDING_VOCAB)}


def report_word_counts(text):
    counts = np.zeros(len(EMBEDDING_VOCAB), dtype=np.float64)
    for word in _re_word.findall(normalize_text(text or "")):
        counts[_embedding_index.get(word, len(EMBEDDING_VOCAB) - 1)] += 1
    return counts


def embed_report(text):
    counts = report_word_counts(text)
    norm = np.linalg.norm(counts)
    return counts / norm if norm > 0 else counts


@dataclass
class ClusterPurity:
    cluster: int
    size: int
    modal_label: LocationLabel
    purity: float


@dataclass
class CorpusAudit:
    status: str
    min_cluster_size: int
    assignment: ClusterAssignment = None
    clusters: list = field(default_factory=list)
    noise: int = 0
    warnings: int = 0

    def to_text(self):
        lines = [
            "status = {}".format(self.status),
            "min_cluster_size = {}".format(self.min_cluster_size),
            "reports_with_warnings = {}".format(self.warnings),
        ]
        if self.assignment is not None:
            lines.append("clusters = {}".format(len(self.clusters)))
            lines.append("noise = {}".format(self.noise))
            for c in self.clusters:
                lines.append(
                    "cluster.{}.size = {}".format(c.cluster, c.size)
                )
                lines.append(
                    "cluster.{}.modal_label = {}".format(c.cluster, c.modal_label)
                )
                lines.append(
                    "cluster.{}.purity = {:.6f}".format(c.cluster, c.purity)
                )
        return "\n".join(lines) + "\n"


def pseudo_label_corpus(reports, min_cluster_size=5, min_samples=None):
    """
    Label every report with :func:`parse_report` and audit the corpus.

    The audit clusters report embeddings and measures, per cluster, which
    fraction of members shares the cluster's most common label. It never
    changes the returned labels.

    :return: ``(labels, audit)``
    """
    reports = list(reports)
    if not reports:
        raise SGSegFormatException("Cannot pseudo-label an empty corpus")

    parsed = [parse_report_detailed(r) for r in reports]
    labels = [p.label for p in parsed]
    warned = sum(1 for p in parsed if p.warnings)

    if len(reports) < min_cluster_size:
        return labels, CorpusAudit(
            status="skipped: insufficient data",
            min_cluster_size=min_cluster_size,
            warnings=warned,
        )

    vectors = np.stack([embed_report(r) for r in reports])
    if min_samples is None:
        min_samples = min(min_cluster_size, len(reports))
    assignment = hdbscan_cluster(vectors, min_cluster_size, min_samples)

    clusters = []
    for cluster in range(assignment.n_clusters):
        members = [labels[i] for i in np.flatnonzero(assignment.labels == cluster)]
        modal_label, modal_count = Counter(members).most_common(1)[0]
        clusters.append(ClusterPurity(
            cluster=cluster,
            size=len(members),
            modal_label=modal_label,
            purity=modal_count / len(members),
        ))

    return labels, CorpusAudit(
        status="clustered",
        min_cluster_size=min_cluster_size,
        assignment=assignment,
        clusters=clusters,
        noise=int(np.sum(assignment.labels == -1)),
        warnings=warned,
    )


def write_label_file(path, image_paths, labels, provenance=None):
    with open(path, "w", encoding="utf-8") as fp:
        if provenance:
            fp.write("# {}\n".format(provenance))
        for image_path, label in zip(image_paths, labels):
            fp.write("{},{}\n".format(image_path, bits2str(label)))


def read_label_file(path):
    """:return: ordered dict-like list of ``(image_path, LocationLabel)``"""
    records = []
    with open(path, encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            image_path, sep, bits = line.rpartition(",")
            if not sep:
                raise SGSegFormatException(
                    "Malformed label line {}: {!r}".format(lineno, line)
                )
            records.append((image_path, LocationLabel.from_str(bits)))
    return records
