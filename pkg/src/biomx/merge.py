"""Parameter-space merging: linear averaging, SLERP, TIES and DARE.

All arithmetic is carried out in float64 on promoted copies of the inputs and
rounded back to each tensor's storage dtype once, at the end. Every merge is a
pure function of its inputs and recipe; per-tensor work may be spread across
threads (``n_jobs``) without changing a single output bit.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from sklearn.base import BaseEstimator

from ._prng import MASK64, splitmix64, uniform_block
from ._validation import check_interval, check_seed, check_weights
from .exceptions import MergeError
from .tensor_store import FLOAT_DTYPES, Checkpoint, Tensor, validate_compat

METHODS = ("linear", "slerp", "ties", "dare-linear", "dare-ties")
SLERP_EPS = 1e-6


@dataclass
class MergeRecipe:
    method: str
    t: float = 0.5
    weights: list = None
    density: float = 0.5
    drop_rate: float = 0.5
    lam: float = 1.0
    seed: int = 0

    def validate(self, n_models=None):
        if self.method not in METHODS:
            raise ValueError(f"unknown merge method {self.method!r}; expected one of {METHODS}")
        check_interval(self.t, "t", 0.0, 1.0)
        check_interval(self.density, "density", 0.0, 1.0, lo_open=True)
        check_interval(self.drop_rate, "drop_rate", 0.0, 1.0, hi_open=True)
        if not math.isfinite(self.lam):
            raise ValueError(f"lambda must be finite, got {self.lam}")
        check_seed(self.seed)
        if self.weights is not None:
            check_weights(self.weights, len(self.weights))
        if n_models is not None:
            if self.weights is not None and len(self.weights) != n_models:
                raise ValueError(f"{len(self.weights)} weights for {n_models} models")
            if self.method == "slerp" and n_models != 2:
                raise ValueError(f"slerp merges exactly two models, got {n_models}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if "p" in d:
            d["drop_rate"] = d.pop("p")
        unknown = set(d) - {"method", "t", "weights", "density", "drop_rate", "lam", "seed"}
        if unknown:
            raise ValueError(f"unknown recipe fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class TaskVector:
    """Per-tensor float32 deltas ``tuned - base``."""

    deltas: dict = field(default_factory=dict)
    source: str = ""

    def names(self):
        return sorted(self.deltas)

    def __getitem__(self, name):
        return self.deltas[name]

    def __eq__(self, other):
        if not isinstance(other, TaskVector):
            return NotImplemented
        return (
            self.source == other.source
            and self.names() == other.names()
            and all(
                self.deltas[n].shape == other.deltas[n].shape
                and self.deltas[n].tobytes() == other.deltas[n].tobytes()
                for n in self.names()
            )
        )


def _check_float(ckpt):
    for t in ckpt.tensors.values():
        if t.dtype not in FLOAT_DTYPES:
            raise MergeError(f"tensor {t.name!r}: cannot merge dtype {t.dtype}")


def _check_all_compatible(ckpts):
    if not ckpts:
        raise ValueError("need at least one checkpoint")
    for i, c in enumerate(ckpts[1:], start=1):
        report = validate_compat(ckpts[0], c)
        if not report.compatible:
            raise MergeError(
                f"checkpoint 0 and {i} are incompatible: {report.describe()}", report.mismatches
            )
    for c in ckpts:
        _check_float(c)


def _f64(tensor):
    return tensor.numpy().astype(np.float64)


def _map_names(fn, names, n_jobs):
    if n_jobs is None or n_jobs == 1 or len(names) < 2:
        return [fn(n) for n in names]
    with ThreadPoolExecutor(max_workers=None if n_jobs < 0 else n_jobs) as pool:
        return list(pool.map(fn, names))


def _output(template, results, recipe, extra=None):
    """Assemble a checkpoint shaped like ``template`` from ``{name: float64 array}``."""
    tensors = {}
    for name, arr in results.items():
        src = template.tensors[name]
        tensors[name] = Tensor.from_array(name, arr.reshape(src.shape), src.dtype)
    metadata = {"merge_recipe": recipe.to_json()}
    if "base_model" in template.metadata:
        metadata["base_model"] = template.metadata["base_model"]
    metadata.update(extra or {})
    return Checkpoint(tensors, metadata)


def linear_merge(ckpts, weights=None, *, n_jobs=None):
    """Weighted average of compatible checkpoints, entry by entry."""
    ckpts = list(ckpts)
    weights = check_weights(weights, len(ckpts))
    _check_all_compatible(ckpts)

    def merge_one(name):
        acc = np.zeros(ckpts[0].tensors[name].shape, dtype=np.float64)
        for w, c in zip(weights, ckpts):
            acc += w * _f64(c.tensors[name])
        return acc

    names = ckpts[0].names()
    results = dict(zip(names, _map_names(merge_one, names, n_jobs)))
    return _output(ckpts[0], results, MergeRecipe("linear", weights=weights))


def slerp_unit(u, v, t):
    """Spherical interpolation between unit vectors; ``None`` when they are (anti)parallel."""
    dot = float(np.clip(np.dot(u, v), -1.0, 1.0))
    omega = math.acos(dot)
    so = math.sin(omega)
    if so < SLERP_EPS:
        return None
    return (math.sin((1.0 - t) * omega) / so) * u + (math.sin(t * omega) / so) * v


def slerp_arrays(a, b, t):
    """SLERP of directions with linearly interpolated magnitude.

    Falls back to ``(1-t)*a + t*b`` for zero-norm or (anti)parallel inputs.
    """
    shape = np.shape(a)
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return ((1.0 - t) * a + t * b).reshape(shape)
    direction = slerp_unit(a / na, b / nb, t)
    if direction is None:
        return ((1.0 - t) * a + t * b).reshape(shape)
    return (((1.0 - t) * na + t * nb) * direction).reshape(shape)


def slerp_merge(a, b, t=0.5, *, n_jobs=None):
    """Per-tensor spherical interpolation of two compatible checkpoints."""
    t = check_interval(t, "t", 0.0, 1.0)
    _check_all_compatible([a, b])

    def merge_one(name):
        return slerp_arrays(_f64(a.tensors[name]), _f64(b.tensors[name]), t)

    names = a.names()
    results = dict(zip(names, _map_names(merge_one, names, n_jobs)))
    return _output(a, results, MergeRecipe("slerp", t=t))


def task_vector(base, tuned, source=None):
    """Deltas ``tuned - base`` for every tensor."""
    _check_all_compatible([base, tuned])
    deltas = {}
    for name in base.names():
        d = np.array(_f64(tuned.tensors[name]) - _f64(base.tensors[name]), dtype=np.float32)
        d.flags.writeable = False
        deltas[name] = d
    if source is None:
        source = tuned.metadata.get("base_model", "")
    return TaskVector(deltas, source)


def _check_vectors(base, vectors):
    if not vectors:
        raise ValueError("need at least one task vector")
    _check_float(base)
    names = base.names()
    for i, v in enumerate(vectors):
        if v.names() != names:
            missing = sorted(set(names) ^ set(v.names()))
            raise MergeError(
                f"task vector {i} names differ from base: {missing}",
                [(n, "missing-in-b" if n in base.tensors else "missing-in-a") for n in missing],
            )
        for n in names:
            if tuple(v.deltas[n].shape) != base.tensors[n].shape:
                raise MergeError(f"task vector {i}: tensor {n!r} shape mismatch", [(n, "shape")])


def trim_count(density, n):
    """``ceil(density * n)`` evaluated exactly on the binary value of ``density``."""
    return min(n, math.ceil(Fraction(density) * n))


def trim_top_k(delta, density):
    """Keep the ``ceil(density*n)`` largest-magnitude entries; ties go to the lower flat index."""
    flat = np.asarray(delta, dtype=np.float64).ravel()
    k = trim_count(density, flat.size)
    if k >= flat.size:
        return flat.reshape(np.shape(delta)).copy()
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    keep = order[:k]
    out[keep] = flat[keep]
    return out.reshape(np.shape(delta))


def ties_deltas(deltas, weights, density):
    """Trim, elect sign, and take the disjoint weighted mean of stacked deltas.

    ``deltas`` is a sequence of same-shape arrays; returns the merged delta.
    """
    shape = np.shape(deltas[0])
    trimmed = np.stack([trim_top_k(d, density).ravel() for d in deltas])
    w = np.asarray(weights, dtype=np.float64)[:, None]
    elected = np.sign((w * trimmed).sum(axis=0))
    agree = (np.sign(trimmed) == elected) & (elected != 0)
    num = (w * trimmed * agree).sum(axis=0)
    den = (w * agree).sum(axis=0)
    merged = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return merged.reshape(shape)


def ties_merge(base, vectors, density=0.5, weights=None, lam=1.0, *, n_jobs=None, _recipe=None):
    """TIES merge of task vectors back onto ``base``."""
    vectors = list(vectors)
    density = check_interval(density, "density", 0.0, 1.0, lo_open=True)
    _check_vectors(base, vectors)
    weights = check_weights(weights, len(vectors))

    def merge_one(name):
        merged = ties_deltas([v.deltas[name] for v in vectors], weights, density)
        return _f64(base.tensors[name]) + lam * merged

    names = base.names()
    results = dict(zip(names, _map_names(merge_one, names, n_jobs)))
    recipe = _recipe or MergeRecipe("ties", weights=weights, density=density, lam=lam)
    return _output(base, results, recipe)


def dare_sparsify(vector, p, seed):
    """Drop each delta entry with probability ``p`` and rescale survivors by ``1/(1-p)``.

    Entries are visited in lexicographic tensor order, row-major within a
    tensor; entry ``k`` is dropped when draw ``k`` of the SplitMix64 stream
    seeded with ``seed`` is below ``p``.
    """
    p = check_interval(p, "p", 0.0, 1.0, hi_open=True)
    seed = check_seed(seed)
    out = {}
    offset = 0
    for name in vector.names():
        d = np.asarray(vector.deltas[name])
        u = uniform_block(seed, offset, d.size)
        offset += d.size
        kept = np.where(u >= p, d.ravel().astype(np.float64) / (1.0 - p), 0.0)
        arr = np.array(kept, dtype=np.float32).reshape(d.shape)
        arr.flags.writeable = False
        out[name] = arr
    return TaskVector(out, vector.source)


def dare_merge(base, vectors, p=0.5, weights=None, seed=0, mode="linear", lam=1.0, *, n_jobs=None):
    """DARE-sparsify each task vector, then recombine linearly or with TIES."""
    vectors = list(vectors)
    p = check_interval(p, "p", 0.0, 1.0, hi_open=True)
    seed = check_seed(seed)
    if mode not in ("linear", "ties"):
        raise ValueError(f"mode must be 'linear' or 'ties', got {mode!r}")
    _check_vectors(base, vectors)
    weights = check_weights(weights, len(vectors))
    sparse = [dare_sparsify(v, p, splitmix64((seed + i) & MASK64)) for i, v in enumerate(vectors)]
    recipe = MergeRecipe(f"dare-{mode}", weights=weights, drop_rate=p, lam=lam, seed=seed, density=1.0)
    if mode == "ties":
        return ties_merge(base, sparse, 1.0, weights, lam, n_jobs=n_jobs, _recipe=recipe)

    def merge_one(name):
        acc = _f64(base.tensors[name]).copy()
        total = np.zeros_like(acc)
        for w, v in zip(weights, sparse):
            total += w * v.deltas[name].astype(np.float64)
        return acc + lam * total

    names = base.names()
    results = dict(zip(names, _map_names(merge_one, names, n_jobs)))
    return _output(base, results, recipe)


def merge_checkpoints(recipe, models, base=None, *, n_jobs=None):
    """Apply ``recipe`` to ``models`` (tuned checkpoints); TIES/DARE also need ``base``."""
    models = list(models)
    recipe.validate(len(models))
    if recipe.method == "linear":
        return linear_merge(models, recipe.weights, n_jobs=n_jobs)
    if recipe.method == "slerp":
        return slerp_merge(models[0], models[1], recipe.t, n_jobs=n_jobs)
    if base is None:
        raise ValueError(f"{recipe.method} needs a base checkpoint")
    vectors = [task_vector(base, m) for m in models]
    if recipe.method == "ties":
        return ties_merge(base, vectors, recipe.density, recipe.weights, recipe.lam, n_jobs=n_jobs)
    mode = recipe.method.split("-", 1)[1]
    return dare_merge(
        base, vectors, recipe.drop_rate, recipe.weights, recipe.seed, mode, recipe.lam, n_jobs=n_jobs
    )


class CheckpointMerger(BaseEstimator):
    """Estimator front-end over :func:`merge_checkpoints`.

    ``fit(models, base=None)`` merges and stores the result in ``merged_``.

    Parameters
    ----------
    method : {"linear", "slerp", "ties", "dare-linear", "dare-ties"}
    t : float
        Interpolation factor for SLERP.
    weights : list of float or None
        Per-model weights summing to 1; uniform when None.
    density : float
        Fraction of entries TIES keeps per tensor.
    drop_rate : float
        DARE drop probability.
    lam : float
        Scale applied to the merged task vector.
    seed : int
        DARE PRNG seed.
    n_jobs : int or None
        Threads for per-tensor work.
    """

    def __init__(
        self,
        method="slerp",
        t=0.5,
        weights=None,
        density=0.5,
        drop_rate=0.5,
        lam=1.0,
        seed=0,
        n_jobs=None,
    ):
        self.method = method
        self.t = t
        self.weights = weights
        self.density = density
        self.drop_rate = drop_rate
        self.lam = lam
        self.seed = seed
        self.n_jobs = n_jobs

    def _recipe(self):
        return MergeRecipe(
            self.method, self.t, self.weights, self.density, self.drop_rate, self.lam, self.seed
        )

    def fit(self, models, base=None):
        self.recipe_ = self._recipe().validate(len(models))
        self.merged_ = merge_checkpoints(self.recipe_, models, base, n_jobs=self.n_jobs)
        return self
