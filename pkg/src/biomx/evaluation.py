"""Few-shot MCQA evaluation over several seeds, accuracy statistics and calibration error."""

import csv
import io
import json
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive_int, check_seed
from .bench_data import get_template, render_prompt, sample_few_shots
from .exceptions import ScoringError
from .scoring import score_options

DEFAULT_BINS = 10


@dataclass(frozen=True)
class EvalRecord:
    item_id: str
    seed: int
    predicted: str
    gold: str
    correct: bool
    confidence: float


@dataclass(frozen=True)
class CalibrationBin:
    lo: float
    hi: float
    count: int
    avg_confidence: float = None
    accuracy: float = None


@dataclass(frozen=True)
class CalibrationReport:
    bins: list
    ece: float
    n: int

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls([CalibrationBin(**b) for b in d["bins"]], d["ece"], d["n"])


@dataclass
class EvalReport:
    task: str
    backend: str
    seeds: list
    per_seed_accuracy: dict
    mean_accuracy: float
    std_accuracy: float
    records: list
    failures: list = field(default_factory=list)
    calibration: CalibrationReport = None
    template: str = ""
    k_shots: int = 0
    run_config: dict = None

    def to_dict(self):
        d = asdict(self)
        d["per_seed_accuracy"] = {str(k): v for k, v in self.per_seed_accuracy.items()}
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["per_seed_accuracy"] = {int(k): v for k, v in d["per_seed_accuracy"].items()}
        d["records"] = [EvalRecord(**r) for r in d["records"]]
        if d.get("calibration") is not None:
            d["calibration"] = CalibrationReport.from_dict(d["calibration"])
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def accuracy_stats(per_seed):
    """Arithmetic mean and population standard deviation."""
    values = [float(v) for v in per_seed]
    if not values:
        raise ValueError("accuracy_stats needs at least one value")
    if any(math.isnan(v) for v in values):
        return math.nan, math.nan
    return statistics.fmean(values), statistics.pstdev(values)


def _bin_index(confidence, m_bins):
    return min(int(math.floor(confidence * m_bins)), m_bins - 1)


def ece(records, m_bins=DEFAULT_BINS):
    """Expected calibration error over equal-width confidence bins.

    A confidence ``c`` falls in bin ``floor(c * m_bins)``; ``c == 1`` joins the last bin.
    """
    m_bins = check_positive_int(m_bins, "m_bins")
    records = list(records)
    members = [[] for _ in range(m_bins)]
    for r in records:
        c = float(r.confidence)
        if not 0.0 <= c <= 1.0:
            raise ValueError(f"confidence {c!r} of item {r.item_id!r} is outside [0, 1]")
        members[_bin_index(c, m_bins)].append(r)
    n = len(records)
    bins = []
    terms = []
    for i, group in enumerate(members):
        lo, hi = i / m_bins, (i + 1) / m_bins
        if not group:
            bins.append(CalibrationBin(lo, hi, 0))
            continue
        conf = math.fsum(r.confidence for r in group) / len(group)
        acc = sum(1 for r in group if r.correct) / len(group)
        bins.append(CalibrationBin(lo, hi, len(group), conf, acc))
        terms.append(len(group) / n * abs(acc - conf))
    return CalibrationReport(bins, math.fsum(terms), n)


def _score_item(backend, template, item, shots, seed):
    prompt = render_prompt(template, item, shots)
    try:
        s = score_options(backend, prompt, item.letters, item.id)
    except ScoringError as exc:
        return None, {"seed": seed, "item_id": item.id, "error": str(exc)}
    rec = EvalRecord(item.id, seed, s.predicted, item.gold, s.predicted == item.gold, s.confidence)
    return rec, None


def run_eval(
    test,
    train,
    backend,
    template="mcqa-default",
    k_shots=3,
    seeds=(1, 2, 3),
    m_bins=DEFAULT_BINS,
    task="task",
    n_jobs=None,
    run_config=None,
):
    """Score every test item once per seed, with one few-shot set drawn per seed.

    Items whose scoring fails are listed in ``failures`` and left out of the
    accuracy denominator of their seed.
    """
    test = list(test)
    train = list(train)
    if not test:
        raise ValueError("test set is empty")
    ids = [item.id for item in test]
    if len(set(ids)) != len(ids):
        raise ValueError("test item ids must be unique")
    seeds = [check_seed(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    if isinstance(template, str):
        template = get_template(template)

    records, failures, per_seed = [], [], {}
    for seed in seeds:
        shots = sample_few_shots(train, k_shots, seed)
        work = lambda item: _score_item(backend, template, item, shots, seed)  # noqa: E731
        if n_jobs is not None and n_jobs != 1:
            with ThreadPoolExecutor(max_workers=None if n_jobs < 0 else n_jobs) as pool:
                results = list(pool.map(work, test))
        else:
            results = [work(item) for item in test]
        done = [r for r, _ in results if r is not None]
        failures.extend(f for _, f in results if f is not None)
        per_seed[seed] = sum(r.correct for r in done) / len(done) if done else math.nan
        records.extend(done)

    records.sort(key=lambda r: (r.seed, r.item_id))
    failures.sort(key=lambda f: (f["seed"], f["item_id"]))
    mean, std = accuracy_stats(per_seed.values())
    return EvalReport(
        task=task,
        backend=getattr(backend, "label", type(backend).__name__),
        seeds=seeds,
        per_seed_accuracy=per_seed,
        mean_accuracy=mean,
        std_accuracy=std,
        records=records,
        failures=failures,
        calibration=ece(records, m_bins) if m_bins else None,
        template=template.name,
        k_shots=k_shots,
        run_config=run_config,
    )


def format_mean_std(mean, std):
    """Percent with one decimal, e.g. ``52.0 ±1.6``."""
    return f"{100 * mean:.1f} ±{100 * std:.1f}"


def _markdown(report):
    seeds = ", ".join(str(s) for s in report.seeds)
    lines = [
        "| task | backend | shots | seeds | accuracy |",
        "|---|---|---|---|---|",
        f"| {report.task} | {report.backend} | {report.k_shots} | {seeds} | "
        f"{format_mean_std(report.mean_accuracy, report.std_accuracy)} |",
        "",
        "| seed | accuracy |",
        "|---|---|",
    ]
    lines += [f"| {s} | {100 * a:.1f} |" for s, a in report.per_seed_accuracy.items()]
    if report.calibration is not None:
        lines += ["", f"ECE ({len(report.calibration.bins)} bins, n={report.calibration.n}): "
                      f"{100 * report.calibration.ece:.1f}"]
    if report.failures:
        lines += ["", f"failed items: {len(report.failures)}"]
    return "\n".join(lines) + "\n"


def _csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["item_id", "seed", "predicted", "gold", "correct", "confidence"])
    for r in report.records:
        writer.writerow([r.item_id, r.seed, r.predicted, r.gold, int(r.correct), repr(r.confidence)])
    return buf.getvalue()


def render_report(report, fmt="json"):
    if fmt == "json":
        return report.to_json() + "\n"
    if fmt == "csv":
        return _csv(report)
    if fmt in ("markdown", "md"):
        return _markdown(report)
    raise ValueError(f"unknown report format {fmt!r}")


def records_from_csv(text):
    rows = csv.DictReader(io.StringIO(text))
    return [
        EvalRecord(
            r["item_id"], int(r["seed"]), r["predicted"], r["gold"], r["correct"] in ("1", "True", "true"),
            float(r["confidence"]),
        )
        for r in rows
    ]


class MCQAEvaluator(BaseEstimator):
    """Estimator wrapper around :func:`run_eval`.

    ``fit(train)`` stores the exemplar pool; ``evaluate(test)`` returns an
    :class:`EvalReport`; ``predict`` uses the first seed's exemplars; ``score``
    is the mean accuracy over seeds.
    """

    def __init__(
        self, backend=None, template="mcqa-default", k_shots=3, seeds=(1, 2, 3), m_bins=DEFAULT_BINS,
        n_jobs=None,
    ):
        self.backend = backend
        self.template = template
        self.k_shots = k_shots
        self.seeds = seeds
        self.m_bins = m_bins
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        self.train_ = list(X)
        if self.k_shots > len(self.train_):
            raise ValueError(f"k_shots={self.k_shots} exceeds {len(self.train_)} training items")
        return self

    def evaluate(self, X, task="task"):
        check_is_fitted(self, "train_")
        self.report_ = run_eval(
            X, self.train_, self.backend, self.template, self.k_shots, self.seeds, self.m_bins,
            task=task, n_jobs=self.n_jobs,
        )
        return self.report_

    def predict(self, X):
        check_is_fitted(self, "train_")
        template = get_template(self.template) if isinstance(self.template, str) else self.template
        shots = sample_few_shots(self.train_, self.k_shots, self.seeds[0])
        return [
            score_options(self.backend, render_prompt(template, item, shots), item.letters, item.id).predicted
            for item in X
        ]

    def score(self, X, y=None):
        return self.evaluate(X).mean_accuracy
