"""Fault-revealing test-case generation over the two-stage latent space.

The loop draws a target class, draws (random mode) or searches for (search
mode) a second-stage code, decodes it, and keeps the image when the model
under test disagrees with the target class and no retained code of that
class lies within ``k``.
"""

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cvae import sample_pipeline
from .datasets import to_bytes
from .errors import ConfigurationError, ParameterError
from .search import FitnessWeights, LatentFitness, SwarmConfig, pso_run

VERDICTS = ("unknown", "valid", "invalid")
MANIFEST_FIELDS = ("id", "expected", "predicted", "fitness", "verdict")


@dataclass(frozen=True)
class TestCase:
    __test__ = False  # not a pytest class

    id: str
    image: np.ndarray
    expected: int
    predicted: int
    latent: np.ndarray
    fitness: float = None
    verdict: str = "unknown"


@dataclass
class TestSuite:
    __test__ = False

    cases: list
    num_classes: int
    image_shape: tuple

    def __len__(self):
        return len(self.cases)

    def __iter__(self):
        return iter(self.cases)

    def images(self):
        if not self.cases:
            return np.zeros((0, *self.image_shape), dtype=np.float32)
        return np.stack([c.image for c in self.cases])

    def by_class(self, c):
        return [case for case in self.cases if case.expected == c]


class DedupIndex:
    """Retained latent codes per class, with an L2 distance threshold ``k``."""

    def __init__(self, k, num_classes):
        if k < 0:
            raise ParameterError(f"k must be non-negative, got {k}")
        self.k = float(k)
        self.num_classes = int(num_classes)
        self._codes = [[] for _ in range(num_classes)]

    def vectors(self, c):
        rows = self._codes[c]
        return np.array(rows) if rows else np.zeros((0, 0))

    def add(self, u, c):
        self._codes[c].append(np.asarray(u, dtype=np.float64).copy())

    def __len__(self):
        return sum(len(rows) for rows in self._codes)


def is_duplicate(u, y_hat, index):
    """True iff a code retained for class ``y_hat`` lies strictly within ``index.k`` of ``u``."""
    stored = index.vectors(y_hat)
    if stored.size == 0:
        return False
    u = np.asarray(u, dtype=np.float64)
    if stored.shape[1] != u.shape[-1]:
        raise ParameterError(f"code length {u.shape[-1]} != indexed length {stored.shape[1]}")
    return bool(np.min(np.linalg.norm(stored - u, axis=1)) < index.k)


def min_pairwise_distance(codes):
    """Smallest L2 distance between distinct rows; ``inf`` for fewer than two rows."""
    codes = np.asarray(codes, dtype=np.float64)
    if len(codes) < 2:
        return math.inf
    diff = codes[:, None, :] - codes[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    return float(dist[np.triu_indices(len(codes), 1)].min())


@dataclass
class GenerationConfig:
    n_tests: int = 50
    mode: str = "random"
    k: float = 0.5
    max_attempts: int = None  # defaults to 1000 * n_tests
    seed: int = 0
    passes: int = 32
    swarm: SwarmConfig = field(default_factory=SwarmConfig)
    weights: FitnessWeights = field(default_factory=FitnessWeights)
    normalized_o2: bool = True
    harvest: bool = False
    batch_size: int = 256

    def __post_init__(self):
        if self.n_tests < 1:
            raise ParameterError("n_tests must be >= 1")
        if self.max_attempts is None:
            self.max_attempts = 1000 * self.n_tests
        if self.max_attempts < self.n_tests:
            raise ParameterError(f"max_attempts ({self.max_attempts}) must be >= n_tests ({self.n_tests})")
        if self.mode not in ("random", "search"):
            raise ParameterError(f"mode must be 'random' or 'search', got {self.mode!r}")
        if self.k < 0:
            raise ParameterError("k must be non-negative")
        if self.passes < 1 or self.batch_size < 1:
            raise ParameterError("passes and batch_size must be positive")


@dataclass
class RunReport:
    mode: str
    target: int
    retained: int = 0
    attempts: int = 0
    non_faults: int = 0
    duplicates: int = 0
    exhausted: bool = False
    searches: int = 0
    fitness_evaluations: int = 0
    per_class: list = None
    wall_time: float = 0.0
    trajectories: list = field(default_factory=list, repr=False)

    def to_dict(self):
        """Seed-deterministic fields only (wall time and trajectories are left out)."""
        return {
            "mode": self.mode,
            "target": self.target,
            "retained": self.retained,
            "attempts": self.attempts,
            "non_faults": self.non_faults,
            "duplicates": self.duplicates,
            "exhausted": self.exhausted,
            "searches": self.searches,
            "fitness_evaluations": self.fitness_evaluations,
            "per_class": list(self.per_class),
        }

    def consistent(self):
        return self.attempts == self.retained + self.non_faults + self.duplicates


def _check_models(mut, stage1, stage2):
    if stage1.stage != 1 or stage2.stage != 2:
        raise ConfigurationError("expected a stage-1 and a stage-2 model")
    if stage2.input_dim != stage1.latent_dim:
        raise ConfigurationError(
            f"stage-2 input width {stage2.input_dim} != stage-1 latent size {stage1.latent_dim}")
    classes = {stage1.num_classes, stage2.num_classes, mut.num_classes_}
    if len(classes) != 1:
        raise ConfigurationError(
            f"class counts disagree: stage1={stage1.num_classes} stage2={stage2.num_classes} "
            f"model={mut.num_classes_}")
    width = getattr(mut, "n_features_in_", stage1.input_dim)
    if width != stage1.input_dim:
        raise ConfigurationError(f"model input width {width} != decoder output width {stage1.input_dim}")


def _image_shape(mut, stage1):
    shape = getattr(mut, "image_shape_", None)
    if shape is not None:
        return tuple(shape)
    side = math.isqrt(stage1.input_dim)
    if side * side != stage1.input_dim:
        return (stage1.input_dim,)
    return (side, side, 1)


def _predict(mut, images, expected):
    if getattr(mut, "label_aware", False):
        return np.asarray(mut.predict(images, expected))
    return np.asarray(mut.predict(images))


def _attempt_rng(seed, i):
    return np.random.default_rng([int(seed), int(i)])


class _Collector:
    """Serial retention step shared by both modes."""

    def __init__(self, config, num_classes, image_shape, report):
        self.config = config
        self.index = DedupIndex(config.k, num_classes)
        self.cases = []
        self.image_shape = image_shape
        self.report = report

    @property
    def done(self):
        return self.report.retained >= self.config.n_tests

    @property
    def budget_left(self):
        return self.config.max_attempts - self.report.attempts

    def offer(self, u, y_hat, image, y, fitness=None):
        rep = self.report
        rep.attempts += 1
        if y == y_hat:
            rep.non_faults += 1
            return False
        if is_duplicate(u, y_hat, self.index):
            rep.duplicates += 1
            return False
        self.index.add(u, y_hat)
        self.cases.append(TestCase(
            id=f"case{len(self.cases):04d}",
            image=np.asarray(image, dtype=np.float32).reshape(self.image_shape),
            expected=int(y_hat),
            predicted=int(y),
            latent=np.asarray(u, dtype=np.float64).copy(),
            fitness=None if fitness is None else float(fitness),
        ))
        rep.retained += 1
        rep.per_class[y_hat] += 1
        return True


def _run_random(mut, stage1, stage2, config, collector, num_classes):
    kappa = stage2.latent_dim
    drawn = 0
    while not collector.done and collector.budget_left > 0:
        size = min(config.batch_size, collector.budget_left)
        ys = np.empty(size, dtype=np.int64)
        us = np.empty((size, kappa))
        for j in range(size):
            rng = _attempt_rng(config.seed, drawn + j)
            ys[j] = rng.integers(num_classes)
            us[j] = rng.standard_normal(kappa)
        drawn += size
        images = sample_pipeline(us, ys, stage1, stage2)
        preds = _predict(mut, images, ys)
        for j in range(size):
            collector.offer(us[j], ys[j], images[j], preds[j])
            if collector.done:
                break


def _run_search(mut, stage1, stage2, config, collector, num_classes):
    kappa = stage2.latent_dim
    search = 0
    rep = collector.report
    while not collector.done and collector.budget_left > 0:
        rng = _attempt_rng(config.seed, search)
        y_hat = int(rng.integers(num_classes))
        objective = LatentFitness(y_hat, mut, stage1, stage2, config.weights, config.passes,
                                  seed=int(rng.integers(2**63)), normalized=config.normalized_o2)
        result = pso_run(objective, kappa, config.swarm, rng)
        rep.searches += 1
        rep.fitness_evaluations += objective.evaluations
        rep.trajectories.append({"search": search, "expected": y_hat, "trajectory": result.trajectory})
        search += 1
        codes = [result.best_position]
        scores = [result.best_fitness]
        if config.harvest:
            for p in result.particles:
                if not np.array_equal(p.best_position, result.best_position):
                    codes.append(p.best_position)
                    scores.append(p.best_fitness)
        codes = np.array(codes)
        ys = np.full(len(codes), y_hat)
        images = sample_pipeline(codes, ys, stage1, stage2)
        preds = _predict(mut, images, ys)
        for j in range(len(codes)):
            if collector.done or collector.budget_left == 0:
                break
            collector.offer(codes[j], y_hat, images[j], preds[j], scores[j])


def generate(mut, stage1, stage2, config=None, image_shape=None):
    """Collect up to ``config.n_tests`` fault-revealing, mutually distant cases.

    Stops early with ``report.exhausted`` set once ``config.max_attempts``
    candidates have been checked. Candidate ``i`` (random mode) or search
    ``i`` (search mode) draws from a stream seeded by ``(config.seed, i)``,
    so the result depends only on the seed and the config. ``image_shape``
    defaults to the model's input shape.

    Returns ``(suite, report)``.
    """
    config = config or GenerationConfig()
    _check_models(mut, stage1, stage2)
    num_classes = stage2.num_classes
    report = RunReport(mode=config.mode, target=config.n_tests, per_class=[0] * num_classes)
    shape = tuple(image_shape) if image_shape else _image_shape(mut, stage1)
    collector = _Collector(config, num_classes, shape, report)
    start = time.perf_counter()
    if config.mode == "random":
        _run_random(mut, stage1, stage2, config, collector, num_classes)
    else:
        _run_search(mut, stage1, stage2, config, collector, num_classes)
    report.wall_time = time.perf_counter() - start
    report.exhausted = not collector.done
    return TestSuite(collector.cases, num_classes, collector.image_shape), report


# -- export / import -----------------------------------------------------------

def write_pgm(path, image):
    """Write a 2-D array in [0, 1] as binary 8-bit PGM (P5)."""
    raw = to_bytes(np.asarray(image).reshape(np.asarray(image).shape[:2]))
    h, w = raw.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raw.tobytes())


def read_pgm(path):
    """Read a binary PGM written by :func:`write_pgm`; returns ``uint8 [H, W]``."""
    blob = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(blob[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def contact_sheet(images, columns=None, gap=1):
    """Tile ``[n, H, W(, 1)]`` images row-major into one 2-D sheet with a zero gutter."""
    images = np.asarray(images)
    if images.ndim == 4:
        images = images[..., 0]
    n, h, w = images.shape
    columns = columns or max(1, math.ceil(math.sqrt(n)))
    rows = max(1, math.ceil(n / columns))
    sheet = np.zeros((rows * (h + gap) - gap, columns * (w + gap) - gap), dtype=np.float32)
    for i in range(n):
        r, c = divmod(i, columns)
        sheet[r * (h + gap):r * (h + gap) + h, c * (w + gap):c * (w + gap) + w] = images[i]
    return sheet


def _format_fitness(value):
    return "-" if value is None else repr(float(value))


def manifest_lines(suite):
    yield "\t".join(MANIFEST_FIELDS) + "\tlatent"
    for case in suite.cases:
        cols = [case.id, str(case.expected), str(case.predicted), _format_fitness(case.fitness), case.verdict]
        cols += [repr(float(v)) for v in case.latent]
        yield "\t".join(cols)


def write_manifest(suite, path):
    Path(path).write_text("\n".join(manifest_lines(suite)) + "\n")


def export_suite(suite, out_dir):
    """Write a suite for review; returns ``{class: [case ids on its contact sheet]}``.

    Layout: ``manifest.tsv`` (one row per case), ``images.npy`` (exact
    pixels), ``images/<id>.pgm``, ``sheets/class_<c>.pgm`` and ``suite.json``.
    """
    if len(suite) == 0:
        raise ParameterError("cannot export an empty suite")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "sheets").mkdir(exist_ok=True)
    write_manifest(suite, out / "manifest.tsv")
    np.save(out / "images.npy", suite.images())
    for case in suite.cases:
        write_pgm(out / "images" / f"{case.id}.pgm", case.image)
    sheets = {}
    for c in range(suite.num_classes):
        members = suite.by_class(c)
        if members:
            write_pgm(out / "sheets" / f"class_{c}.pgm", contact_sheet([m.image for m in members]))
            sheets[c] = [m.id for m in members]
    meta = {"num_classes": suite.num_classes, "image_shape": list(suite.image_shape),
            "cases": len(suite), "sheets": {str(c): ids for c, ids in sheets.items()}}
    (out / "suite.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return sheets


def load_suite(out_dir):
    out = Path(out_dir)
    meta = json.loads((out / "suite.json").read_text())
    images = np.load(out / "images.npy")
    lines = (out / "manifest.tsv").read_text().splitlines()
    cases = []
    for i, line in enumerate(lines[1:]):
        cols = line.split("\t")
        cases.append(TestCase(
            id=cols[0], image=images[i], expected=int(cols[1]), predicted=int(cols[2]),
            latent=np.array([float(v) for v in cols[5:]]),
            fitness=None if cols[3] == "-" else float(cols[3]),
            verdict=cols[4],
        ))
    return TestSuite(cases, meta["num_classes"], tuple(meta["image_shape"]))


# -- human verdicts -------------------------------------------------------------

class VerdictParseError(ValueError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


def parse_verdicts(path, known_ids):
    """Read ``<id> <valid|invalid>`` lines; ``#`` starts a comment."""
    known = set(known_ids)
    verdicts = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in ("valid", "invalid"):
                raise VerdictParseError(path, lineno, f"expected '<id> valid|invalid', got {raw.strip()!r}")
            case_id, verdict = parts
            if case_id not in known:
                raise VerdictParseError(path, lineno, f"unknown case id {case_id!r}")
            if verdicts.get(case_id, verdict) != verdict:
                raise VerdictParseError(path, lineno, f"conflicting verdict for {case_id}")
            verdicts[case_id] = verdict
    return verdicts


@dataclass
class ValidityReport:
    per_class: list  # dicts with valid / invalid / unknown / total / valid_ratio
    valid: int
    invalid: int
    unknown: int
    total: int

    @property
    def valid_ratio(self):
        return self.valid / self.total if self.total else 0.0

    def lines(self):
        yield "class\tvalid\tinvalid\tunknown\ttotal\tvalid_ratio"
        for c, row in enumerate(self.per_class):
            yield f"{c}\t{row['valid']}\t{row['invalid']}\t{row['unknown']}\t{row['total']}\t{row['valid_ratio']:.3f}"
        yield f"all\t{self.valid}\t{self.invalid}\t{self.unknown}\t{self.total}\t{self.valid_ratio:.3f}"


def validity_report(suite):
    def tally(cases):
        counts = {v: sum(c.verdict == v for c in cases) for v in VERDICTS}
        total = len(cases)
        return {"valid": counts["valid"], "invalid": counts["invalid"], "unknown": counts["unknown"],
                "total": total, "valid_ratio": counts["valid"] / total if total else 0.0}

    overall = tally(suite.cases)
    return ValidityReport([tally(suite.by_class(c)) for c in range(suite.num_classes)],
                          overall["valid"], overall["invalid"], overall["unknown"], overall["total"])


def apply_verdicts(suite, verdict_file):
    """Return ``(suite with verdicts set, ValidityReport)``; cases not listed keep their verdict."""
    verdicts = parse_verdicts(verdict_file, [c.id for c in suite.cases])
    cases = [replace(c, verdict=verdicts.get(c.id, c.verdict)) for c in suite.cases]
    updated = TestSuite(cases, suite.num_classes, suite.image_shape)
    return updated, validity_report(updated)
