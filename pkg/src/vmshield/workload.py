"""Resource-usage store and the per-VM usage forecaster.

The forecaster is a linear autoregressive model per resource dimension
(bias + ``lags`` previous samples) fitted by batch gradient descent on the
mean squared one-step error over sliding windows of normalised history.
"""

from __future__ import annotations

import csv
import enum
from collections import deque
from dataclasses import dataclass, field, replace
from itertools import islice
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import ResourceVector, Server, ModelError, rv_sum

N_DIMS = 4
CSV_COLUMNS = ("time", "vm_id", "server_id", "cpu", "mem", "disk", "bw")


class OrderingError(ValueError):
    pass


class DegenerateSeriesError(ValueError):
    pass


class NotEnoughHistoryError(ValueError):
    pass


class IncompleteForecastError(KeyError):
    pass


@dataclass(frozen=True, slots=True)
class UsageRecord:
    time: int
    vm_id: int
    server_id: Optional[int]
    usage: ResourceVector


class WorkloadStore:
    """Append-only usage log with per-VM histories and horizon-based eviction.

    Records with ``time < latest - retention_horizon`` are evicted, but each VM
    always keeps its newest ``keep_last`` samples so a training window is never
    cut short.
    """

    def __init__(self, retention_horizon: int = 1000, keep_last: int = 0):
        if retention_horizon < 0:
            raise ValueError("retention_horizon must be >= 0")
        self.retention_horizon = retention_horizon
        self.keep_last = keep_last
        self.latest_time: Optional[int] = None
        self._by_vm: dict[int, deque[UsageRecord]] = {}

    def __len__(self):
        return sum(len(d) for d in self._by_vm.values())

    def __contains__(self, vm_id):
        return vm_id in self._by_vm

    def records(self) -> list[UsageRecord]:
        """All retained records ordered by (time, vm_id)."""
        out = [r for d in self._by_vm.values() for r in d]
        out.sort(key=lambda r: (r.time, r.vm_id))
        return out

    def history(self, vm_id: int) -> Sequence[UsageRecord]:
        return self._by_vm.get(vm_id, ())

    def count(self, vm_id: int) -> int:
        return len(self._by_vm.get(vm_id, ()))

    def last_time(self, vm_id: int) -> Optional[int]:
        d = self._by_vm.get(vm_id)
        return d[-1].time if d else None

    def series(self, vm_id: int, last: Optional[int] = None) -> np.ndarray:
        """Usage history of ``vm_id`` as an ``(n, 4)`` array, oldest first."""
        d = self._by_vm.get(vm_id)
        if not d:
            return np.empty((0, N_DIMS))
        if last is None or last >= len(d):
            recs = list(d)
        else:
            recs = list(islice(reversed(d), last))[::-1]
        return np.array([r.usage.as_tuple() for r in recs], dtype=float)

    def append(self, rec: UsageRecord) -> None:
        d = self._by_vm.get(rec.vm_id)
        if d is None:
            d = self._by_vm[rec.vm_id] = deque()
        elif rec.time < d[-1].time:
            raise OrderingError(
                f"record for VM {rec.vm_id} at t={rec.time} precedes latest t={d[-1].time}")
        d.append(rec)
        if self.latest_time is None or rec.time > self.latest_time:
            self.latest_time = rec.time
            self.evict()

    def evict(self) -> None:
        if self.latest_time is None:
            return
        cutoff = self.latest_time - self.retention_horizon
        for d in self._by_vm.values():
            while len(d) > self.keep_last and d[0].time < cutoff:
                d.popleft()

    def forget(self, vm_id: int) -> None:
        self._by_vm.pop(vm_id, None)

    def dump_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.records():
                w.writerow([r.time, r.vm_id, "" if r.server_id is None else r.server_id,
                            *(repr(float(x)) for x in r.usage.as_tuple())])


def record_usage(store: WorkloadStore, rec: UsageRecord) -> WorkloadStore:
    store.append(rec)
    return store


def load_csv(path, retention_horizon: int = 10**9) -> WorkloadStore:
    store = WorkloadStore(retention_horizon)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        for row in reader:
            server = int(row["server_id"]) if row["server_id"] else None
            usage = ResourceVector.of(float(row[k]) for k in ("cpu", "mem", "disk", "bw"))
            store.append(UsageRecord(int(row["time"]), int(row["vm_id"]), server, usage))
    return store


# --------------------------------------------------------------------------
# normalisation

class NormMethod(str, enum.Enum):
    MINMAX = "minmax"
    ZSCORE = "zscore"
    CLIP = "clip"


@dataclass(frozen=True)
class Normalizer:
    """Affine map ``(clip(x, lo, hi) - offset) / scale``.

    MinMax uses offset=min, scale=max-min; ZScore uses offset=mean,
    scale=population stddev; Clip keeps the identity map but clips to
    mean +/- ``CLIP_SIGMAS`` stddevs of the fitting series.
    """

    method: NormMethod
    offset: float
    scale: float
    lo: float = -np.inf
    hi: float = np.inf

    def apply(self, x):
        return (np.clip(x, self.lo, self.hi) - self.offset) / self.scale

    def invert(self, z):
        return np.asarray(z) * self.scale + self.offset


CLIP_SIGMAS = 3.0


def fit_normalizer(series, method=NormMethod.MINMAX) -> Normalizer:
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        raise ValueError("cannot fit a normalizer on an empty series")
    method = NormMethod(method)
    if method is NormMethod.MINMAX:
        lo, hi = float(x.min()), float(x.max())
        if hi - lo <= 0:
            return Normalizer(method, lo, 1.0)
        return Normalizer(method, lo, hi - lo)
    mean, std = float(x.mean()), float(x.std())
    if method is NormMethod.ZSCORE:
        if std <= 1e-12 * max(1.0, abs(mean)):
            raise DegenerateSeriesError("constant series has zero stddev")
        return Normalizer(method, mean, std)
    return Normalizer(method, 0.0, 1.0, mean - CLIP_SIGMAS * std, mean + CLIP_SIGMAS * std)


def fit_normalizer_safe(series, method=NormMethod.MINMAX) -> Normalizer:
    """Like :func:`fit_normalizer` but a degenerate ZScore falls back to unit-range MinMax."""
    try:
        return fit_normalizer(series, method)
    except DegenerateSeriesError:
        return fit_normalizer(series, NormMethod.MINMAX)


# --------------------------------------------------------------------------
# feature selection

def select_features(store: WorkloadStore, vm_id: int, variance_floor: float = 1e-12) -> list[int]:
    """Resource dimensions ranked by variance, near-constant ones dropped."""
    x = store.series(vm_id)
    return rank_features(x, variance_floor)


def rank_features(x: np.ndarray, variance_floor: float = 1e-12) -> list[int]:
    if len(x) < 2:
        return list(range(N_DIMS))
    # stable sort keeps declaration order on ties
    return _rank_from_var(np.asarray(x, float).var(axis=0), variance_floor)


# --------------------------------------------------------------------------
# linear autoregressive predictor

@dataclass(frozen=True)
class Predictor:
    lags: int = 12
    learning_rate: float = 0.01
    method: NormMethod = NormMethod.ZSCORE
    train_window: Optional[int] = None
    weights: Optional[np.ndarray] = None          # (4, lags + 1); column 0 is the bias
    normalizers: Optional[tuple[Normalizer, ...]] = None
    features: tuple[int, ...] = tuple(range(N_DIMS))
    trained_at: Optional[int] = None
    loss_history: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    @property
    def trained(self) -> bool:
        return self.weights is not None

    def initial_weights(self) -> np.ndarray:
        return np.zeros((N_DIMS, self.lags + 1))


def design_matrix(z: np.ndarray, lags: int) -> tuple[np.ndarray, np.ndarray]:
    """Sliding windows over a 1-D series: rows ``[1, z[t-k], ..., z[t-1]]`` with target ``z[t]``."""
    n = len(z)
    if n < lags + 1:
        raise NotEnoughHistoryError(f"need at least {lags + 1} samples, got {n}")
    windows = np.lib.stride_tricks.sliding_window_view(z[:-1], lags)
    X = np.hstack([np.ones((n - lags, 1)), windows])
    return X, z[lags:]


def mse_loss(w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    r = X @ w - y
    return float(r @ r) / len(y)


def gram_stats(X: np.ndarray, y: np.ndarray):
    n = len(y)
    return X.T @ X / n, X.T @ y / n, float(y @ y) / n


def mse_grad(w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Analytic gradient of :func:`mse_loss`, in the second-moment form used by training."""
    G, b, _ = gram_stats(X, y)
    return 2.0 * (G @ w - b)


def _gd(W, G, b, c, lr, epochs, mask):
    """Batched monotone gradient descent on quadratic MSE.

    W: (B, p) weights, G: (B, p, p), b: (B, p), c: (B,). A step that would
    raise a row's loss is rejected and that row's step size halved, so the
    loss sequence is non-increasing.
    """
    def matvec(v):
        return np.matmul(G, v[:, :, None])[:, :, 0]

    def loss(W, GW):
        return (W * (GW - 2.0 * b)).sum(axis=1) + c

    lr = np.full(len(W), lr, dtype=float)
    frozen = ~mask
    GW = matvec(W)
    cur = loss(W, GW)
    history = np.empty((epochs + 1, len(W)))
    history[0] = cur
    for e in range(1, epochs + 1):
        grad = 2.0 * (GW - b)
        grad[frozen] = 0.0
        step = lr[:, None] * grad
        cand = W - step
        cand_GW = GW - matvec(step)
        new = loss(cand, cand_GW)
        ok = new <= cur
        if ok.all():
            W, GW, cur = cand, cand_GW, new
        else:
            W = np.where(ok[:, None], cand, W)
            GW = np.where(ok[:, None], cand_GW, GW)
            cur = np.where(ok, new, cur)
            lr = np.where(ok, lr, lr * 0.5)
        history[e] = cur
    return W, history


def _norm_params(x: np.ndarray, method: NormMethod):
    """Vectorised normalizer fit over ``x`` of shape ``(B, n, 4)``.

    Returns (used_minmax, offset, scale, lo, hi), each ``(B, 4)``.
    """
    lo = np.full(x.shape[::2], -np.inf)
    hi = np.full(x.shape[::2], np.inf)
    xmin, xmax = x.min(axis=1), x.max(axis=1)
    span = xmax - xmin
    mm_scale = np.where(span > 0, span, 1.0)
    if method is NormMethod.MINMAX:
        return np.ones_like(lo, dtype=bool), xmin, mm_scale, lo, hi
    mean, std = x.mean(axis=1), x.std(axis=1)
    if method is NormMethod.ZSCORE:
        degenerate = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        return (degenerate, np.where(degenerate, xmin, mean),
                np.where(degenerate, mm_scale, std), lo, hi)
    return (np.zeros_like(lo, dtype=bool), np.zeros_like(mean), np.ones_like(mean),
            mean - CLIP_SIGMAS * std, mean + CLIP_SIGMAS * std)


def _normalizers(method, params, i) -> tuple[Normalizer, ...]:
    used_mm, off, scl, lo, hi = params
    return tuple(
        Normalizer(NormMethod.MINMAX if used_mm[i, d] else method, float(off[i, d]),
                   float(scl[i, d]), float(lo[i, d]), float(hi[i, d]))
        for d in range(N_DIMS))


def fit_normalizers(x: np.ndarray, method=NormMethod.ZSCORE) -> tuple[Normalizer, ...]:
    """One normalizer per column of ``x``, degenerate ZScore columns falling back to MinMax."""
    method = NormMethod(method)
    return _normalizers(method, _norm_params(np.asarray(x, float)[None], method), 0)


def _prepare_batch(method: NormMethod, lags: int, x: np.ndarray):
    """Normalise ``(B, n, 4)`` histories and build per-dimension second moments."""
    B, n, _ = x.shape
    if n < lags + 2:
        raise NotEnoughHistoryError(f"need at least {lags + 2} samples to train, got {n}")
    params = _norm_params(x, method)
    _, off, scl, lo, hi = params
    z = (np.clip(x, lo[:, None], hi[:, None]) - off[:, None]) / scl[:, None]   # (B, n, 4)
    N = n - lags
    windows = np.lib.stride_tricks.sliding_window_view(z[:, :-1], lags, axis=1)  # (B, N, 4, k)
    X = np.concatenate([np.ones((B, N_DIMS, N, 1)), windows.transpose(0, 2, 1, 3)],
                       axis=3)                                                  # (B, 4, N, p)
    y = z[:, lags:].transpose(0, 2, 1)                                          # (B, 4, N)
    Xt = X.transpose(0, 1, 3, 2)
    G = np.matmul(Xt, X) / N
    b = np.matmul(Xt, y[..., None])[..., 0] / N
    c = (y * y).sum(axis=2) / N
    var = x.var(axis=1)
    features = []
    mask = np.zeros((B, N_DIMS), dtype=bool)
    for i in range(B):
        f = tuple(_rank_from_var(var[i]))
        features.append(f)
        mask[i, list(f)] = True
    return params, features, G, b, c, mask


def _rank_from_var(var, variance_floor: float = 1e-12) -> list[int]:
    order = sorted(range(N_DIMS), key=lambda i: -var[i])
    kept = [i for i in order if var[i] >= variance_floor]
    return kept or [order[0] if var[order[0]] > 0 else 0]


def train_many(preds: Sequence[Predictor], histories: Sequence[np.ndarray], epochs: int,
               now: Optional[int] = None) -> list[Predictor]:
    """Train several predictors in one batched descent.

    All predictors must share ``lags``, ``learning_rate`` and normalisation
    method. Each starts from its current weights (zeros when untrained), so
    retraining never raises the loss on the fitting set.
    """
    if not preds:
        return []
    lags, lr, method = preds[0].lags, preds[0].learning_rate, preds[0].method
    if any(p.lags != lags or p.learning_rate != lr or p.method != method for p in preds):
        raise ValueError("batched predictors must share lags, learning_rate and method")
    xs = []
    for p, x in zip(preds, histories):
        x = np.asarray(x, dtype=float)
        if p.train_window is not None:
            x = x[-p.train_window:]
        xs.append(x)
    # group equal-length histories so each group is prepared in one shot
    groups: dict[int, list[int]] = {}
    for i, x in enumerate(xs):
        groups.setdefault(len(x), []).append(i)
    p_ = lags + 1
    G = np.empty((len(preds), N_DIMS, p_, p_))
    b = np.empty((len(preds), N_DIMS, p_))
    c = np.empty((len(preds), N_DIMS))
    mask = np.empty((len(preds), N_DIMS), dtype=bool)
    norms: list = [None] * len(preds)
    features: list = [None] * len(preds)
    for n, idx in groups.items():
        params, feats, Gg, bg, cg, mg = _prepare_batch(method, lags, np.stack([xs[i] for i in idx]))
        G[idx], b[idx], c[idx], mask[idx] = Gg, bg, cg, mg
        for j, i in enumerate(idx):
            norms[i] = _normalizers(method, params, j)
            features[i] = feats[j]
    W0 = np.stack([(p.weights if p.weights is not None else p.initial_weights()) for p in preds])
    W0[~mask] = 0.0
    W, hist = _gd(W0.reshape(-1, p_), G.reshape(-1, p_, p_), b.reshape(-1, p_), c.reshape(-1),
                  lr, epochs, mask.reshape(-1))
    W = W.reshape(len(preds), N_DIMS, p_)
    hist = hist.reshape(len(hist), len(preds), N_DIMS).sum(axis=2)
    return [replace(p, weights=W[i], normalizers=norms[i], features=features[i],
                    trained_at=now, loss_history=hist[:, i])
            for i, p in enumerate(preds)]


def train(pred: Predictor, store: WorkloadStore, vm_id: int, epochs: int = 200,
          now: Optional[int] = None) -> Predictor:
    if now is None:
        now = store.last_time(vm_id)
    return train_many([pred], [store.series(vm_id)], epochs, now)[0]


def fitting_loss(pred: Predictor, history: np.ndarray) -> float:
    """Summed per-dimension MSE of ``pred`` on windows of ``history`` under its normalizers."""
    if pred.train_window is not None:
        history = history[-pred.train_window:]
    total = 0.0
    for d in range(N_DIMS):
        X, y = design_matrix(pred.normalizers[d].apply(history[:, d]), pred.lags)
        total += mse_loss(pred.weights[d], X, y)
    return total


def rollout_many(preds: Sequence[Predictor], windows: np.ndarray, horizon: int) -> np.ndarray:
    """Iterated one-step forecasts for several trained predictors.

    ``windows`` is ``(B, lags, 4)`` of raw recent usage; returns ``(B, 4)`` raw forecasts.
    """
    B = len(preds)
    lags = preds[0].lags
    W = np.stack([p.weights for p in preds])                        # (B, 4, p)
    off = np.array([[n.offset for n in p.normalizers] for p in preds])  # (B, 4)
    scl = np.array([[n.scale for n in p.normalizers] for p in preds])
    lo = np.array([[n.lo for n in p.normalizers] for p in preds])
    hi = np.array([[n.hi for n in p.normalizers] for p in preds])
    z = (np.clip(windows, lo[:, None, :], hi[:, None, :]) - off[:, None, :]) / scl[:, None, :]
    z = np.transpose(z, (0, 2, 1)).copy()                          # (B, 4, lags)
    last = z[:, :, -1]
    for _ in range(horizon):
        last = W[:, :, 0] + np.einsum("bdk,bdk->bd", W[:, :, 1:], z)
        z = np.concatenate([z[:, :, 1:], last[:, :, None]], axis=2)
    assert z.shape == (B, N_DIMS, lags)
    return last * scl + off


def predict_vm(pred: Predictor, store: WorkloadStore, vm_id: int, horizon: int,
               capacity: ResourceVector) -> ResourceVector:
    """Forecast usage ``horizon`` ticks ahead, clamped to ``[0, capacity]``.

    An untrained predictor, a zero horizon, or too short a history all yield the
    last observed usage.
    """
    hist = store.series(vm_id, last=pred.lags)
    if len(hist) == 0:
        raise NotEnoughHistoryError(f"no usage recorded for VM {vm_id}")
    if horizon <= 0 or not pred.trained or len(hist) < pred.lags:
        raw = hist[-1]
    else:
        raw = rollout_many([pred], hist[None, :, :], horizon)[0]
    return clamp_to_capacity(raw, capacity)


def clamp_to_capacity(raw: Iterable[float], capacity: ResourceVector) -> ResourceVector:
    return ResourceVector(*(min(max(float(v), 0.0), c)
                            for v, c in zip(raw, capacity.as_tuple())))


def predict_server(forecasts: Mapping[int, ResourceVector], server: Server,
                   active_vm_ids: Optional[Iterable[int]] = None) -> ResourceVector:
    """Sum of the forecasts of every VM hosted on ``server``."""
    ids = server.hosted_vm_ids if active_vm_ids is None else active_vm_ids
    missing = [v for v in ids if v not in forecasts]
    if missing:
        raise IncompleteForecastError(f"no forecast for VMs {sorted(missing)} on server {server.id}")
    return rv_sum(forecasts[v] for v in ids)


class WorkloadAnalyzer:
    """Owns the usage store and one predictor per VM; retrains on a schedule."""

    def __init__(self, lags=12, learning_rate=0.01, epochs=200, retrain_every=24,
                 train_window=96, method=NormMethod.ZSCORE, retention_horizon=None):
        self.template = Predictor(lags=lags, learning_rate=learning_rate,
                                  method=NormMethod(method), train_window=train_window)
        self.epochs = epochs
        self.retrain_every = retrain_every
        need = (train_window or 0) + lags + 2
        if retention_horizon is None:
            retention_horizon = need
        self.store = WorkloadStore(retention_horizon, keep_last=need)
        self.predictors: dict[int, Predictor] = {}

    def record(self, time: int, vm_id: int, server_id, usage: ResourceVector) -> None:
        self.store.append(UsageRecord(time, vm_id, server_id, usage))

    def forget(self, vm_id: int) -> None:
        self.store.forget(vm_id)
        self.predictors.pop(vm_id, None)

    def due_for_training(self, vm_ids: Iterable[int], now: int) -> list[int]:
        need = self.template.lags + 2
        due = []
        for v in vm_ids:
            p = self.predictors.get(v)
            if self.store.count(v) < need:
                continue
            if p is None or p.trained_at is None or now - p.trained_at >= self.retrain_every:
                due.append(v)
        return due

    def retrain(self, vm_ids: Iterable[int], now: int) -> None:
        ids = self.due_for_training(vm_ids, now)
        if not ids:
            return
        preds = [self.predictors.get(v, self.template) for v in ids]
        window = self.template.train_window
        hists = [self.store.series(v, last=window) for v in ids]
        for v, p in zip(ids, train_many(preds, hists, self.epochs, now)):
            self.predictors[v] = p

    def forecast(self, vms: Mapping[int, ResourceVector], horizon: int) -> dict[int, ResourceVector]:
        """Clamped forecasts for every VM in ``vms`` (id -> capacity)."""
        out: dict[int, ResourceVector] = {}
        lags = self.template.lags
        batch, windows = [], []
        for v, cap in vms.items():
            p = self.predictors.get(v)
            if horizon > 0 and p is not None and p.trained and self.store.count(v) >= lags:
                batch.append(v)
                windows.append(self.store.series(v, last=lags))
            else:
                hist = self.store.history(v)
                if not hist:
                    raise ModelError(f"no usage history for VM {v}")
                out[v] = clamp_to_capacity(hist[-1].usage.as_tuple(), cap)
        if batch:
            raw = rollout_many([self.predictors[v] for v in batch], np.stack(windows), horizon)
            for v, r in zip(batch, raw):
                out[v] = clamp_to_capacity(r, vms[v])
        return {v: out[v] for v in vms}
