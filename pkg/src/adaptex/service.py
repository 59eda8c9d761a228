"""Real-time experiment server.

Experiments, participants, and per-trial adaptive decisions are exposed over
an HTTP/JSON API. Every state change is appended to a per-experiment JSONL
event log before the response is sent; recovery replays the log (optionally
from a posterior snapshot), and replay reproduces the live posterior because
every refit seed is logged.

Endpoints:
    POST /experiments
    POST /experiments/{id}/participants
    GET  /experiments/{id}/participants/{pid}/next
    POST /trials/{token}/answer
    GET  /experiments/{id}/report
    GET  /experiments/{id}/calibration
    GET  /healthz
"""

from __future__ import annotations

import json
import os
import threading
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel, Field

from . import __version__
from .calibration import reliability_bins, reliability_csv
from .inference import (
    GroupedTreatmentPosterior,
    MeanFieldPosterior,
    ViConfig,
    fit_mean_field,
)
from .model import ItemBank, PriorSpec, ResponseRecord, sigmoid
from .objectives import (
    ClampDiagnostics,
    PreferencePrior,
    SampleBudget,
    score_testing_candidates,
    score_treatment_candidates,
)
from .policies import StoppingConfig, select_greedy_eig, select_min_efe

SNAPSHOT_EVERY = 10


class ApiError(Exception):
    """Service error carried to the client as {code, message, field?}."""

    def __init__(self, code: str, message: str, status: int, field_path: str | None = None):
        super().__init__(message)
        self.code = code
        self.message = message
        self.status = status
        self.field_path = field_path


def not_found(message: str) -> ApiError:
    return ApiError("not_found", message, 404)


def conflict(message: str) -> ApiError:
    return ApiError("conflict", message, 409)


def validation_error(message: str, field_path: str | None = None) -> ApiError:
    return ApiError("validation_error", message, 400, field_path)


class PriorModel(BaseModel):
    theta_mean: float = 0.0
    theta_sd: float = 2.0
    delta_sd: float = 1.0
    b_mean: float = 0.0
    b_sd: float = 1.0


class StoppingModel(BaseModel):
    epsilon: float = 0.01
    min_trials: int = 1


class BudgetModel(BaseModel):
    n_outer: int = 512
    n_inner: int = 512
    s_util: int = 512


class ViModel(BaseModel):
    step_count: int = 150
    learning_rate: float = 0.05
    mc_samples_per_step: int = 8


class ExperimentCreateRequest(BaseModel):
    mode: Literal["adaptive-testing", "treatment-assignment"]
    item_bank: str = Field(description="path to an item CSV, or 'sample' for the bundled bank")
    prior: PriorModel = PriorModel()
    stopping: Optional[StoppingModel] = None
    fixed_trials: Optional[int] = None
    preference_gamma: float = 0.1
    budget: BudgetModel = BudgetModel()
    vi: ViModel = ViModel()
    seed: int = 0
    idempotency_key: Optional[str] = None


class RegisterRequest(BaseModel):
    participant_id: str
    group: Optional[int] = None


class AnswerRequest(BaseModel):
    answer: str
    duration_s: float


def _load_bank(reference: str) -> ItemBank:
    if reference == "sample":
        return ItemBank.bundled_sample()
    path = Path(reference)
    if not path.exists():
        raise validation_error(f"item bank not found: {path}", field_path="item_bank")
    try:
        return ItemBank.from_csv(path)
    except ValueError as exc:
        raise validation_error(f"bad item bank {path}: {exc}", field_path="item_bank")


def _validate_config(req: ExperimentCreateRequest) -> None:
    if req.fixed_trials is None and req.stopping is None:
        raise validation_error("either stopping or fixed_trials is required", field_path="stopping")
    if req.fixed_trials is not None and req.fixed_trials < 1:
        raise validation_error("fixed_trials must be at least 1", field_path="fixed_trials")
    if req.mode == "treatment-assignment" and req.fixed_trials is None:
        raise validation_error(
            "treatment-assignment runs on a fixed per-participant budget", field_path="fixed_trials"
        )


class EventStore:
    """Append-only JSONL log plus a posterior snapshot per experiment."""

    def __init__(self, data_dir: Path, experiment_id: str):
        self.dir = Path(data_dir) / "experiments" / experiment_id
        self.dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.dir / "events.jsonl"
        self.snapshot_path = self.dir / "snapshot.json"

    def append(self, event: dict) -> None:
        with self.log_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(event) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def read_all(self) -> list[dict]:
        if not self.log_path.exists():
            return []
        return [
            json.loads(line)
            for line in self.log_path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]

    def write_snapshot(self, doc: dict) -> None:
        tmp = self.snapshot_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc), encoding="utf-8")
        tmp.replace(self.snapshot_path)

    def read_snapshot(self) -> dict | None:
        if not self.snapshot_path.exists():
            return None
        return json.loads(self.snapshot_path.read_text(encoding="utf-8"))


@dataclass
class ParticipantState:
    index: int
    participant_id: str
    group: int | None
    administered: list[int] = field(default_factory=list)
    answers: list[int] = field(default_factory=list)
    finished: bool = False


@dataclass
class PendingTrial:
    token: str
    participant_id: str
    item_id: int
    prediction: float


class ExperimentEngine:
    """All mutable state of one experiment behind a single-writer lock."""

    def __init__(self, experiment_id: str, request: ExperimentCreateRequest, store: EventStore):
        self.experiment_id = experiment_id
        self.request = request
        self.store = store
        self.lock = threading.RLock()
        self.bank = _load_bank(request.item_bank)
        self.prior = PriorSpec(**request.prior.model_dump())
        self.budget = SampleBudget(**request.budget.model_dump())
        self.stopping = (
            StoppingConfig(**request.stopping.model_dump()) if request.stopping else None
        )
        self.pref = PreferencePrior(request.preference_gamma)
        self.vi = ViConfig(seed=request.seed, **request.vi.model_dump())
        self.mode = request.mode
        self.participants: dict[str, ParticipantState] = {}
        self.pending: dict[str, PendingTrial] = {}
        self.pending_by_participant: dict[str, str] = {}
        self.records: list[ResponseRecord] = []
        self.predictions: list[tuple[float, int]] = []
        self.trial_counter = 0
        self.answer_counter = 0
        self.diagnostics = ClampDiagnostics()
        self.posterior = MeanFieldPosterior.from_prior(self.prior, 0, len(self.bank))
        self.gp = GroupedTreatmentPosterior.uniform(len(self.bank))

    # -- persistence ---------------------------------------------------------

    @classmethod
    def create(cls, experiment_id: str, request: ExperimentCreateRequest, data_dir: Path):
        _validate_config(request)
        store = EventStore(data_dir, experiment_id)
        engine = cls(experiment_id, request, store)
        store.append(
            {
                "type": "experiment_created",
                "experiment_id": experiment_id,
                "config": request.model_dump(),
                "version": __version__,
            }
        )
        return engine

    @classmethod
    def recover(cls, experiment_id: str, data_dir: Path):
        store = EventStore(data_dir, experiment_id)
        events = store.read_all()
        if not events or events[0]["type"] != "experiment_created":
            raise not_found(f"experiment {experiment_id} has no persisted log")
        request = ExperimentCreateRequest(**events[0]["config"])
        engine = cls(experiment_id, request, store)
        snapshot = store.read_snapshot()
        start_answers = 0
        if snapshot is not None and engine.mode == "adaptive-testing":
            engine.posterior = MeanFieldPosterior.from_json(snapshot["posterior"])
            start_answers = int(snapshot["answer_count"])
        engine._replay(events[1:], skip_refits_before=start_answers)
        return engine

    def _replay(self, events: list[dict], skip_refits_before: int = 0) -> None:
        answers_seen = 0
        for event in events:
            kind = event["type"]
            if kind == "participant_registered":
                self._apply_registration(event["participant_id"], event.get("group"))
            elif kind == "trial_issued":
                self._apply_issue(
                    event["participant_id"],
                    int(event["item_id"]),
                    event["token"],
                    float(event["prediction"]),
                )
                self.trial_counter = max(self.trial_counter, int(event["trial_index"]) + 1)
            elif kind == "participant_finished":
                state = self.participants[event["participant_id"]]
                state.finished = True
            elif kind == "answer_recorded":
                answers_seen += 1
                refit = answers_seen > skip_refits_before
                self._apply_answer(
                    event["token"],
                    int(event["y"]),
                    event.get("duration_s"),
                    int(event["refit_seed"]),
                    refit=refit,
                )

    def replay_posterior(self):
        """Rebuild the posterior by replaying the full persisted log from scratch."""
        fresh = ExperimentEngine(self.experiment_id, self.request, self.store)
        fresh._replay(self.store.read_all()[1:])
        return fresh.posterior if self.mode == "adaptive-testing" else fresh.gp

    def _maybe_snapshot(self) -> None:
        if self.mode != "adaptive-testing" or self.answer_counter % SNAPSHOT_EVERY:
            return
        self.store.write_snapshot(
            {"posterior": self.posterior.to_json(), "answer_count": self.answer_counter}
        )

    # -- state transitions (shared by live path and replay) -------------------

    def _apply_registration(self, participant_id: str, group) -> ParticipantState:
        state = ParticipantState(
            index=len(self.participants),
            participant_id=participant_id,
            group=None if group is None else int(group),
        )
        self.participants[participant_id] = state
        self.posterior = self.posterior.expand_participants(len(self.participants), self.prior)
        return state

    def _apply_issue(self, participant_id: str, item_id: int, token: str, prediction: float) -> None:
        trial = PendingTrial(
            token=token, participant_id=participant_id, item_id=item_id, prediction=prediction
        )
        self.pending[token] = trial
        self.pending_by_participant[participant_id] = token

    def _apply_answer(self, token: str, y: int, duration_s, refit_seed: int, refit: bool = True) -> None:
        trial = self.pending.pop(token)
        self.pending_by_participant.pop(trial.participant_id, None)
        state = self.participants[trial.participant_id]
        state.administered.append(trial.item_id)
        state.answers.append(y)
        record = ResponseRecord(
            participant_id=state.index,
            item_id=trial.item_id,
            y=y,
            z=state.group,
            duration_s=duration_s,
            timestamp=self.trial_counter,
        )
        self.records.append(record)
        self.predictions.append((trial.prediction, y))
        self.answer_counter += 1
        if self.mode == "adaptive-testing":
            if refit:
                self.posterior = fit_mean_field(
                    self.prior,
                    self.records,
                    replace(self.vi, seed=refit_seed),
                    n_participants=len(self.participants),
                    n_items=len(self.bank),
                    init=self.posterior,
                )
        else:
            self.gp.update(trial.item_id, state.group, y)

    # -- public operations ----------------------------------------------------

    def register_participant(self, participant_id: str, group) -> dict:
        with self.lock:
            if self.mode == "treatment-assignment" and group not in (0, 1):
                raise validation_error(
                    "treatment-assignment requires group 0 or 1", field_path="group"
                )
            if group is not None and group not in (0, 1):
                raise validation_error("group must be 0 or 1 when present", field_path="group")
            existing = self.participants.get(participant_id)
            if existing is not None:
                if group is not None and existing.group != group:
                    raise conflict(f"participant {participant_id} already registered with another group")
                state = existing
            else:
                state = self._apply_registration(participant_id, group)
                self.store.append(
                    {
                        "type": "participant_registered",
                        "participant_id": participant_id,
                        "group": state.group,
                    }
                )
            return {
                "participant_id": participant_id,
                "status": "finished" if state.finished else "active",
                "trials_done": len(state.administered),
            }

    def _predicted_success(self, state: ParticipantState, item_id: int) -> float:
        if self.mode == "treatment-assignment":
            return self.gp.predictive(item_id, state.group)
        # posterior predictive by sampling the (theta, delta) factors
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=self.request.seed, spawn_key=(3, self.trial_counter))
        )
        i = state.index
        theta = rng.normal(self.posterior.theta_mean[i], self.posterior.theta_sd[i], size=512)
        delta = rng.normal(self.posterior.delta_mean[item_id], self.posterior.delta_sd[item_id], size=512)
        return float(np.mean(sigmoid(theta - delta)))

    def next_trial(self, participant_id: str) -> dict:
        with self.lock:
            state = self.participants.get(participant_id)
            if state is None:
                raise not_found(f"unknown participant {participant_id}")
            if state.finished:
                return {"status": "finished", "trials_done": len(state.administered)}
            token = self.pending_by_participant.get(participant_id)
            if token is not None:
                trial = self.pending[token]
                return self._offer(trial, state)
            trials_done = len(state.administered)
            if self.request.fixed_trials is not None and trials_done >= self.request.fixed_trials:
                return self._finish(state)
            candidates = [j for j in range(len(self.bank)) if j not in state.administered]
            if not candidates:
                return self._finish(state)
            rng = np.random.default_rng(
                np.random.SeedSequence(
                    entropy=self.request.seed, spawn_key=(1, self.trial_counter)
                )
            )
            if self.mode == "adaptive-testing":
                scores = score_testing_candidates(
                    self.posterior, state.index, candidates, self.budget, rng, self.diagnostics
                )
                if self.stopping is not None:
                    decision = select_greedy_eig(scores, self.stopping, trials_done)
                else:
                    # fixed-budget mode: pure argmax, the stopping rule never engages
                    never = StoppingConfig(epsilon=0.0, min_trials=1 << 62)
                    decision = select_greedy_eig(scores, never, trials_done)
            else:
                scores = score_treatment_candidates(
                    self.gp, state.group, candidates, self.pref, self.budget.s_util, rng
                )
                allow_stop = self.stopping is not None and trials_done >= self.stopping.min_trials
                decision = select_min_efe(scores, allow_no_action=allow_stop)
            if decision.stopped:
                return self._finish(state, decision)
            token = uuid.uuid4().hex
            prediction = self._predicted_success(state, decision.chosen)
            self.store.append(
                {
                    "type": "trial_issued",
                    "participant_id": participant_id,
                    "item_id": decision.chosen,
                    "token": token,
                    "trial_index": self.trial_counter,
                    "prediction": prediction,
                    "decision": decision.as_dict(seed=self.trial_counter),
                }
            )
            self._apply_issue(participant_id, decision.chosen, token, prediction)
            self.trial_counter += 1
            return self._offer(self.pending[token], state)

    def _offer(self, trial: PendingTrial, state: ParticipantState) -> dict:
        return {
            "status": "active",
            "item_id": trial.item_id,
            "prompt": self.bank.prompt(trial.item_id),
            "trial_token": trial.token,
            "trials_done": len(state.administered),
        }

    def _finish(self, state: ParticipantState, decision=None) -> dict:
        state.finished = True
        self.store.append(
            {
                "type": "participant_finished",
                "participant_id": state.participant_id,
                "decision": None if decision is None else decision.as_dict(),
            }
        )
        return {"status": "finished", "trials_done": len(state.administered)}

    def submit_answer(self, token: str, raw_answer: str, duration_s: float) -> dict:
        with self.lock:
            trial = self.pending.get(token)
            if trial is None:
                raise conflict("unknown or already consumed trial token")
            state = self.participants[trial.participant_id]
            if state.finished:
                raise conflict("participant already finished")
            if not duration_s > 0:
                raise validation_error("duration_s must be positive", field_path="duration_s")
            y = self.bank.grade(trial.item_id, raw_answer)
            refit_seed = int(
                np.random.SeedSequence(
                    entropy=self.request.seed, spawn_key=(2, self.answer_counter)
                ).generate_state(1)[0]
            )
            self.store.append(
                {
                    "type": "answer_recorded",
                    "token": token,
                    "participant_id": trial.participant_id,
                    "item_id": trial.item_id,
                    "y": y,
                    "duration_s": duration_s,
                    "refit_seed": refit_seed,
                }
            )
            self._apply_answer(token, y, duration_s, refit_seed)
            self._maybe_snapshot()
            return {"y": y, "updated": True}

    def report(self) -> dict:
        with self.lock:
            per_participant = []
            for pid_text, state in self.participants.items():
                i = state.index
                entry = {
                    "participant_id": pid_text,
                    "group": state.group,
                    "status": "finished" if state.finished else "active",
                    "trials": len(state.administered),
                    "administered_items": list(state.administered),
                    "answers": list(state.answers),
                }
                if self.mode == "adaptive-testing":
                    sd = float(self.posterior.theta_sd[i])
                    entry["theta_mean"] = float(self.posterior.theta_mean[i])
                    entry["theta_sd"] = sd
                    entry["information_gain"] = float(np.log(self.prior.theta_sd / sd))
                per_participant.append(entry)
            freq = np.zeros(len(self.bank), dtype=int)
            for state in self.participants.values():
                for j in state.administered:
                    freq[j] += 1
            doc = {
                "experiment_id": self.experiment_id,
                "mode": self.mode,
                "n_participants": len(self.participants),
                "total_trials": int(freq.sum()),
                "item_frequencies": freq.tolist(),
                "participants": per_participant,
                "clamp_count": self.diagnostics.floor_hits,
            }
            if self.mode == "adaptive-testing":
                doc["posterior"] = json.loads(self.posterior.to_json())
                igs = [p["information_gain"] for p in per_participant]
                doc["mean_information_gain"] = float(np.mean(igs)) if igs else 0.0
            else:
                doc["posterior"] = json.loads(self.gp.to_json())
            return doc

    def calibration(self, n_bins: int = 10) -> str:
        with self.lock:
            return reliability_csv(reliability_bins(self.predictions, n_bins))


@dataclass
class ServiceConfig:
    data_dir: Path
    host: str = "127.0.0.1"
    port: int = 8000
    bearer_token: str | None = None

    @classmethod
    def load(cls, path=None, env=None) -> "ServiceConfig":
        """One JSON config file plus environment overrides for port and data dir."""
        env = os.environ if env is None else env
        doc = {}
        if path is not None:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        data_dir = env.get("ADAPTEX_DATA_DIR", doc.get("data_dir", "./adaptex-data"))
        port = int(env.get("ADAPTEX_PORT", doc.get("port", 8000)))
        return cls(
            data_dir=Path(data_dir),
            host=doc.get("host", "127.0.0.1"),
            port=port,
            bearer_token=doc.get("bearer_token"),
        )


class ServiceState:
    """Registry of live engines plus the create-experiment idempotency index."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.lock = threading.Lock()
        self.engines: dict[str, ExperimentEngine] = {}
        self.config.data_dir.mkdir(parents=True, exist_ok=True)
        self.index_path = self.config.data_dir / "idempotency.json"
        self._load_existing()

    def _load_existing(self) -> None:
        root = self.config.data_dir / "experiments"
        if not root.exists():
            return
        for child in sorted(root.iterdir()):
            if (child / "events.jsonl").exists():
                self.engines[child.name] = ExperimentEngine.recover(child.name, self.config.data_dir)

    def _idempotency_index(self) -> dict:
        if self.index_path.exists():
            return json.loads(self.index_path.read_text(encoding="utf-8"))
        return {}

    def create_experiment(self, request: ExperimentCreateRequest) -> str:
        with self.lock:
            if request.idempotency_key:
                index = self._idempotency_index()
                if request.idempotency_key in index:
                    return index[request.idempotency_key]
            experiment_id = uuid.uuid4().hex[:12]
            engine = ExperimentEngine.create(experiment_id, request, self.config.data_dir)
            self.engines[experiment_id] = engine
            if request.idempotency_key:
                index = self._idempotency_index()
                index[request.idempotency_key] = experiment_id
                self.index_path.write_text(json.dumps(index), encoding="utf-8")
            return experiment_id

    def engine(self, experiment_id: str) -> ExperimentEngine:
        engine = self.engines.get(experiment_id)
        if engine is None:
            raise not_found(f"unknown experiment {experiment_id}")
        return engine

    def flush_snapshots(self) -> None:
        for engine in self.engines.values():
            with engine.lock:
                if engine.mode == "adaptive-testing":
                    engine.store.write_snapshot(
                        {"posterior": engine.posterior.to_json(), "answer_count": engine.answer_counter}
                    )


def create_app(config: ServiceConfig) -> FastAPI:
    from contextlib import asynccontextmanager

    state = ServiceState(config)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        state.flush_snapshots()

    app = FastAPI(title="adaptex session service", version=__version__, lifespan=lifespan)
    app.state.service = state

    def check_auth(request: Request) -> None:
        if config.bearer_token is None:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {config.bearer_token}":
            raise ApiError("unauthorized", "missing or invalid bearer token", 401)

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, exc: ApiError):
        body = {"code": exc.code, "message": exc.message}
        if exc.field_path:
            body["field"] = exc.field_path
        return JSONResponse(status_code=exc.status, content=body)

    @app.exception_handler(RequestValidationError)
    async def handle_validation(request: Request, exc: RequestValidationError):
        first = exc.errors()[0] if exc.errors() else {}
        field_path = ".".join(str(p) for p in first.get("loc", []) if p != "body")
        return JSONResponse(
            status_code=400,
            content={
                "code": "validation_error",
                "message": first.get("msg", "invalid request"),
                "field": field_path or None,
            },
        )

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "version": __version__}

    @app.post("/experiments")
    def create_experiment(request: Request, body: ExperimentCreateRequest):
        check_auth(request)
        experiment_id = state.create_experiment(body)
        return {"experiment_id": experiment_id}

    @app.post("/experiments/{experiment_id}/participants")
    def register(request: Request, experiment_id: str, body: RegisterRequest):
        check_auth(request)
        return state.engine(experiment_id).register_participant(body.participant_id, body.group)

    @app.get("/experiments/{experiment_id}/participants/{participant_id}/next")
    def next_trial(request: Request, experiment_id: str, participant_id: str):
        check_auth(request)
        return state.engine(experiment_id).next_trial(participant_id)

    @app.post("/trials/{token}/answer")
    def answer(request: Request, token: str, body: AnswerRequest):
        check_auth(request)
        for engine in state.engines.values():
            if token in engine.pending:
                return engine.submit_answer(token, body.answer, body.duration_s)
        raise conflict("unknown or already consumed trial token")

    @app.get("/experiments/{experiment_id}/report")
    def report(request: Request, experiment_id: str):
        check_auth(request)
        return state.engine(experiment_id).report()

    @app.get("/experiments/{experiment_id}/calibration")
    def calibration(request: Request, experiment_id: str, bins: int = 10):
        check_auth(request)
        return PlainTextResponse(state.engine(experiment_id).calibration(bins), media_type="text/csv")

    return app
