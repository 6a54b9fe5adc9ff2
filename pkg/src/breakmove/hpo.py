"""Asynchronous successive halving (ASHA) over head, loss and training settings.

A trial is trained to each rung resource ``r_min * eta**k`` in turn (capped
by ``r_max``). After each report it is promoted only if its objective is
among the top ``1/eta`` of everything reported at that rung so far, so no
decision ever waits on slower trials. Resources are training epochs.
"""

from __future__ import annotations

import json
import math
from collections import deque
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dataset import EmbeddingDataset
from .errors import CorruptFile, InvalidArgument, InvalidRung
from .head import HeadConfig
from .objective import LossConfig
from .rng import derive_seed, substream
from .train import TrainConfig, fit

Objective = Callable[[dict, int, int], float]


# ---------------------------------------------------------------------------
# search space


@dataclass(frozen=True)
class Choice:
    values: tuple

    def sample(self, rng: np.random.Generator):
        v = self.values[int(rng.integers(len(self.values)))]
        return v.item() if isinstance(v, np.generic) else v


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high)) if self.high > self.low else float(self.low)


@dataclass(frozen=True)
class LogUniform:
    low: float
    high: float

    def __post_init__(self):
        if not 0 < self.low <= self.high:
            raise InvalidArgument(f"log-uniform bounds must satisfy 0 < low <= high, got {self.low}, {self.high}")

    def sample(self, rng: np.random.Generator) -> float:
        if self.high == self.low:
            return float(self.low)
        return float(10.0 ** rng.uniform(math.log10(self.low), math.log10(self.high)))


def default_space() -> dict:
    return {
        "n_fm": Choice((0, 1, 2, 3, 4)),
        "n_hidden": Choice((0, 1, 2, 3)),
        "scale": Choice((1.5, 2.0, 4.0)),
        "margin": Uniform(0.0, 0.9),
        "c_u": LogUniform(1e-3, 10.0),
        "weight_decay": LogUniform(1e-6, 1e-2),
        "learning_rate": LogUniform(1e-5, 1e-2),
        "batch_size": Choice((32, 64, 128)),
    }


def suggest(space: dict, rng: np.random.Generator) -> dict:
    """One point of ``space``; dimensions are drawn in their declared order."""
    return {name: dim.sample(rng) for name, dim in space.items()}


# ---------------------------------------------------------------------------
# scheduler


@dataclass
class TrialRecord:
    trial_id: int
    config: dict
    seed: int
    reports: list = field(default_factory=list)  # (resource, objective)
    status: str = "running"  # running | promoted | stopped | completed | failed
    error: str | None = None

    @property
    def last_resource(self) -> int | None:
        return self.reports[-1][0] if self.reports else None

    @property
    def last_objective(self) -> float:
        return self.reports[-1][1] if self.reports else -math.inf

    def objective_at(self, resource: int) -> float | None:
        for r, obj in self.reports:
            if r == resource:
                return obj
        return None


def asha_rungs(r_min: int, eta: int, r_max: int) -> list[int]:
    """Rung resources ``r_min * eta**k`` below ``r_max``, then ``r_max`` itself."""
    if r_min < 1 or eta < 2 or r_max < r_min:
        raise InvalidArgument(f"need r_min >= 1, eta >= 2, r_max >= r_min (got {r_min}, {eta}, {r_max})")
    rungs = []
    r = r_min
    while r < r_max:
        rungs.append(r)
        r *= eta
    rungs.append(r_max)
    return rungs


def promotion_threshold(objectives, eta: int) -> float:
    """Smallest objective still inside the top ``ceil(n / eta)`` of ``objectives``."""
    ranked = sorted(objectives, reverse=True)
    return ranked[math.ceil(len(ranked) / eta) - 1]


def asha_decide(trials, reporting: TrialRecord, eta: int, r_min: int, r_max: int) -> str:
    """``"promote"``, ``"stop"`` or ``"complete"`` for the trial that just reported.

    Ties with the threshold promote. Trials that reported the top rung are
    complete and never promoted.
    """
    rungs = asha_rungs(r_min, eta, r_max)
    r = reporting.last_resource
    if r is None or r not in rungs:
        raise InvalidRung(f"trial {reporting.trial_id} reported at resource {r}, rungs are {rungs}")
    if r == rungs[-1]:
        return "complete"
    peers = [obj for t in trials if (obj := t.objective_at(r)) is not None]
    if not any(t is reporting for t in trials):
        peers.append(reporting.last_objective)
    return "promote" if reporting.last_objective >= promotion_threshold(peers, eta) else "stop"


@dataclass
class SearchResult:
    best: TrialRecord | None
    trials: list[TrialRecord]
    events: list[dict]


class AshaScheduler:
    """Serialized ASHA state. All mutations go through :meth:`record`."""

    def __init__(self, space: dict, budget: int, eta: int, r_min: int, r_max: int, seed: int):
        if budget < 1:
            raise InvalidArgument("budget must be at least 1")
        self.space, self.budget, self.eta, self.seed = space, budget, eta, seed
        self.r_min, self.r_max = r_min, r_max
        self.rungs = asha_rungs(r_min, eta, r_max)
        self.trials: dict[int, TrialRecord] = {}
        self.events: list[dict] = []
        self.promotions: deque = deque()
        self.fresh: deque = deque(range(budget))
        self._listeners: list[Callable[[dict], None]] = []

    def on_event(self, fn: Callable[[dict], None]) -> None:
        self._listeners.append(fn)

    def make_trial(self, trial_id: int) -> TrialRecord:
        config = suggest(self.space, substream(self.seed, "hpo", trial_id))
        return TrialRecord(trial_id, config, derive_seed(self.seed, "trial", trial_id))

    def next_job(self) -> tuple[TrialRecord, int] | None:
        """Pending promotions first, then new trials."""
        if self.promotions:
            return self.promotions.popleft()
        if self.fresh:
            trial = self.make_trial(self.fresh.popleft())
            self.trials[trial.trial_id] = trial
            return trial, self.rungs[0]
        return None

    def _emit(self, trial: TrialRecord, event: str, resource: int, objective) -> None:
        rec = {
            "trial": trial.trial_id,
            "event": event,
            "rung": resource,
            "objective": objective if objective is None or math.isfinite(objective) else None,
            "config": trial.config,
            "seed": trial.seed,
        }
        self.events.append(rec)
        for fn in self._listeners:
            fn(rec)

    def record(self, trial: TrialRecord, resource: int, objective: float | None, error: str | None = None) -> str:
        if error is not None:
            # failed trials rank last at their rung so the quantile stays well defined
            trial.reports.append((resource, -math.inf))
            trial.status, trial.error = "failed", error
            self._emit(trial, "fail", resource, None)
            return "fail"
        trial.reports.append((resource, float(objective)))
        self._emit(trial, "report", resource, float(objective))
        return self._decide(trial)

    def _decide(self, trial: TrialRecord) -> str:
        resource = trial.last_resource
        decision = asha_decide(list(self.trials.values()), trial, self.eta, self.r_min, self.r_max)
        trial.status = {"promote": "promoted", "stop": "stopped", "complete": "completed"}[decision]
        self._emit(trial, decision, resource, trial.last_objective)
        if decision == "promote":
            self.promotions.append((trial, self.rungs[self.rungs.index(resource) + 1]))
        return decision

    def restore(self, events: list[dict]) -> None:
        """Rebuild state from ledger events; unfinished work is re-queued."""
        for ev in events:
            tid = int(ev["trial"])
            trial = self.trials.get(tid)
            if trial is None:
                trial = self.make_trial(tid)
                if trial.config != ev["config"]:
                    raise CorruptFile(f"ledger trial {tid} config does not match seed {self.seed}")
                self.trials[tid] = trial
            kind, r = ev["event"], int(ev["rung"])
            if kind == "report":
                trial.reports.append((r, float(ev["objective"])))
            elif kind == "fail":
                trial.reports.append((r, -math.inf))
                trial.status = "failed"
            else:
                trial.status = {"promote": "promoted", "stop": "stopped", "complete": "completed"}[kind]
            self.events.append(ev)
        self.fresh = deque(t for t in range(self.budget) if t not in self.trials)
        for trial in sorted(self.trials.values(), key=lambda t: t.trial_id):
            last = trial.last_resource
            if trial.status == "promoted":
                self.promotions.append((trial, self.rungs[self.rungs.index(last) + 1]))
            elif trial.status == "running":
                if trial.reports:
                    # interrupted between report and decision: decide now
                    self._decide(trial)
                else:
                    self.promotions.append((trial, self.rungs[0]))

    def best(self) -> TrialRecord | None:
        """Highest final-rung objective; falls back to the furthest-progressed trial."""
        candidates = [t for t in self.trials.values() if t.reports and math.isfinite(t.last_objective)]
        if not candidates:
            return None
        return max(candidates, key=lambda t: (t.last_resource, t.last_objective, -t.trial_id))


def _run_job(objective: Objective, trial: TrialRecord, resource: int):
    try:
        value = float(objective(dict(trial.config), resource, trial.seed))
        if not math.isfinite(value):
            return None, f"non-finite objective {value}"
        return value, None
    except Exception as exc:  # a failing trial never aborts the search
        return None, f"{type(exc).__name__}: {exc}"


def read_ledger(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        return []
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    events = []
    for k, line in enumerate(lines):
        try:
            events.append(json.loads(line))
        except json.JSONDecodeError:
            # a torn final line from an interrupted write is dropped
            if k == len(lines) - 1:
                break
            raise CorruptFile(f"{path}: invalid JSON on event {k + 1}") from None
    return events


def run_search(
    objective: Objective,
    space: dict | None = None,
    budget: int = 20,
    eta: int = 4,
    r_min: int = 2,
    r_max: int = 32,
    parallelism: int = 1,
    seed: int = 0,
    ledger_path=None,
    resume: bool = False,
) -> SearchResult:
    """Run ASHA with ``objective(config, resource, seed) -> float`` (higher is better).

    Results are reproducible under ``seed`` when ``parallelism == 1``. With a
    ``ledger_path`` every event is appended as one JSON line; ``resume=True``
    restores a previous ledger and only runs the work it lacks.
    """
    space = default_space() if space is None else space
    sched = AshaScheduler(space, budget, eta, r_min, r_max, seed)
    fh = None
    if ledger_path is not None:
        ledger_path = Path(ledger_path)
        if resume:
            sched.restore(read_ledger(ledger_path))
            # rewrite cleanly so a torn trailing line does not survive
            ledger_path.write_text("".join(json.dumps(e) + "\n" for e in sched.events), encoding="utf-8")
        fh = open(ledger_path, "a" if resume else "w", encoding="utf-8")

        def _write(ev):
            fh.write(json.dumps(ev) + "\n")
            fh.flush()

        sched.on_event(_write)

    try:
        if parallelism <= 1:
            while (job := sched.next_job()) is not None:
                trial, resource = job
                value, err = _run_job(objective, trial, resource)
                sched.record(trial, resource, value, err)
        else:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                running = {}
                while True:
                    while len(running) < parallelism and (job := sched.next_job()) is not None:
                        trial, resource = job
                        running[pool.submit(_run_job, objective, trial, resource)] = job
                    if not running:
                        break
                    done, _ = wait(running, return_when=FIRST_COMPLETED)
                    for fut in sorted(done, key=lambda f: running[f][0].trial_id):
                        trial, resource = running.pop(fut)
                        value, err = fut.result()
                        sched.record(trial, resource, value, err)
    finally:
        if fh is not None:
            fh.close()
    trials = sorted(sched.trials.values(), key=lambda t: t.trial_id)
    return SearchResult(sched.best(), trials, list(sched.events))


# ---------------------------------------------------------------------------
# head training as an ASHA objective


def configs_from_point(point: dict, d: int, seed: int, base: TrainConfig | None = None, epochs: int | None = None):
    """Split a search-space point into head, loss and train configs."""
    base = base or TrainConfig()
    head = HeadConfig(
        d=d,
        n_fm=int(point.get("n_fm", 1)),
        n_hidden=int(point.get("n_hidden", 1)),
        scale=float(point.get("scale", 2.0)),
        seed=seed,
    )
    loss = LossConfig(
        margin=float(point.get("margin", 0.5)),
        c_u=float(point.get("c_u", 0.1)),
        weight_decay=float(point.get("weight_decay", 1e-4)),
    )
    epochs = base.epochs if epochs is None else epochs
    train = TrainConfig(
        **{
            **asdict(base),
            "learning_rate": float(point.get("learning_rate", base.learning_rate)),
            "batch_size": int(point.get("batch_size", base.batch_size)),
            "epochs": epochs,
            # every rung trains its full resource
            "patience": epochs + 1,
            "seed": seed,
        }
    )
    return head, loss, train


def head_objective(dataset: EmbeddingDataset, base: TrainConfig | None = None) -> Objective:
    """Objective that trains a head for ``resource`` epochs and returns its best validation frame accuracy."""

    def objective(point: dict, resource: int, seed: int) -> float:
        head, loss, train = configs_from_point(point, dataset.dim, seed, base, epochs=resource)
        _, report = fit(dataset, head, loss, train)
        return report.best_val_accuracy

    return objective
