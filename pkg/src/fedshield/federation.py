"""Federated orchestration: aggregation, round loop and the phase driver.

Clients are in-process actors that exchange only expert parameter blobs with
the server; attention parameters never leave a client, which is what makes
the models personalized. Aggregation is sample-size-weighted averaging with
a deterministic pairwise summation order keyed by client id.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import artifacts
from .attack import evaluate_attack
from .config import ExperimentConfig
from .data import ClientDataset, SampleSet, load_dataset, partition_clients, \
    select_classes, split_fraction, take
from .detector import MAEModel, calibrate_threshold, detection_scores, train_mae
from .moe import ClientModel, clean_accuracy, client_loss, expert_state_dicts, \
    init_client_model, load_expert_state_dicts, local_update
from .purifier import PurifierUNet, PurifyPolicy, build_schedule, train_diffusion
from .seeding import derive_seed, numpy_rng


class ClientUpdateError(RuntimeError):
    def __init__(self, client_id: int, cause: Exception):
        super().__init__(f"client {client_id} failed: {cause}")
        self.client_id = client_id


@dataclass
class FederationState:
    """Global expert parameters plus bookkeeping for weighted aggregation."""

    global_experts: list[dict]  # K expert state dicts
    counts: list[int]           # per-client sample counts n_i
    round: int = 0

    @property
    def n(self) -> int:
        return sum(self.counts)


@dataclass
class RoundReport:
    round: int
    client_losses: list[float]
    clean_accuracy: float
    adv_accuracy: float
    wall_time_s: float


def _pairwise_sum(tensors: list[torch.Tensor]) -> torch.Tensor:
    """Fixed-order pairwise tree reduction (reproducible across schedulers)."""
    items = list(tensors)
    while len(items) > 1:
        items = [items[i] + items[i + 1] if i + 1 < len(items) else items[i]
                 for i in range(0, len(items), 2)]
    return items[0]


def fedavg(client_params: list[dict], weights: list[float],
           ids: list[int] | None = None) -> dict:
    """Sample-size-weighted mean of shape-congruent parameter dicts.

    Accumulates in float64 with a pairwise tree summation keyed by client id
    when ``ids`` are given, making the result independent of upload order.
    """
    if len(client_params) != len(weights):
        raise ValueError("one weight per client parameter set required")
    if ids is not None:
        order = sorted(range(len(ids)), key=lambda i: ids[i])
        client_params = [client_params[i] for i in order]
        weights = [weights[i] for i in order]
    total = float(sum(weights))
    if total <= 0:
        raise ValueError("total weight must be positive")
    keys = list(client_params[0].keys())
    for params in client_params[1:]:
        if list(params.keys()) != keys:
            raise ValueError("parameter sets are not shape-congruent")
    out = {}
    for key in keys:
        shapes = {tuple(p[key].shape) for p in client_params}
        if len(shapes) > 1:
            raise ValueError(f"shape mismatch for {key}: {shapes}")
        ref_dtype = client_params[0][key].dtype
        weighted = [p[key].to(torch.float64) * (w / total)
                    for p, w in zip(client_params, weights)]
        out[key] = _pairwise_sum(weighted).to(ref_dtype)
    return out


def fedavg_experts(state: FederationState, uploads: list[list[dict]],
                   weights: list[float], ids: list[int] | None = None) -> list[dict]:
    """Aggregate each of the K experts across clients."""
    K = len(uploads[0])
    return [fedavg([u[k] for u in uploads], weights, ids) for k in range(K)]


def broadcast(state: FederationState, clients: list[ClientModel]) -> None:
    """Copy global expert parameters into every client; attention stays local."""
    for client in clients:
        load_expert_state_dicts(client, [copy.deepcopy(sd)
                                         for sd in state.global_experts])


def init_federation(cfg: ExperimentConfig, client_data: list[ClientDataset],
                    channels: int) -> tuple[FederationState, list[ClientModel]]:
    clients = [init_client_model(cfg.model, derive_seed(cfg.seed, "client", cd.client_id),
                                 channels=channels, client_id=cd.client_id)
               for cd in client_data]
    reference = init_client_model(cfg.model, derive_seed(cfg.seed, "global"),
                                  channels=channels)
    state = FederationState(global_experts=expert_state_dicts(reference),
                            counts=[cd.n_i for cd in client_data])
    return state, clients


def run_round(state: FederationState, clients: list[ClientModel],
              client_data: list[ClientDataset], cfg: ExperimentConfig,
              eval_set: SampleSet | None = None, defense_hook=None,
              log=None) -> tuple[FederationState, list[ClientModel], RoundReport]:
    """One communication round: broadcast, local training, upload, aggregate.

    Trains copies of the client models and commits only on success, so a
    client failure leaves both the state and the clients unchanged.
    """
    t0 = time.perf_counter()
    round_idx = state.round + 1
    rng = numpy_rng(cfg.seed, "round", round_idx)
    n_part = max(1, int(round(cfg.fed.participation * len(clients))))
    participants = sorted(rng.choice(len(clients), size=n_part, replace=False).tolist()) \
        if n_part < len(clients) else list(range(len(clients)))

    new_clients = [copy.deepcopy(c) for c in clients]
    losses: list[float] = []
    for idx in participants:
        client, data = new_clients[idx], client_data[idx]
        load_expert_state_dicts(client, [copy.deepcopy(sd)
                                         for sd in state.global_experts])
        try:
            local_update(client, data, cfg.fed.local_epochs, cfg.optim, cfg.loss,
                         seed=derive_seed(cfg.seed, "round", round_idx, "train"),
                         defense_hook=defense_hook,
                         augment_data=cfg.dataset.augment)
            with torch.no_grad():
                images, labels = data.samples.images, data.samples.labels
                loss = float(client_loss(client, images, labels, cfg.loss,
                                         reduction="mean"))
        except Exception as exc:  # noqa: BLE001 - surface with client id
            raise ClientUpdateError(data.client_id, exc) from exc
        losses.append(loss)

    uploads = [expert_state_dicts(new_clients[i]) for i in participants]
    weights = [client_data[i].n_i for i in participants]
    upload_ids = [client_data[i].client_id for i in participants]
    new_state = FederationState(
        global_experts=fedavg_experts(state, uploads, weights, upload_ids),
        counts=list(state.counts), round=round_idx)

    clean_acc, adv_acc = float("nan"), float("nan")
    if eval_set is not None and len(eval_set) > 0:
        accs, advs = [], []
        for idx in participants:
            model = new_clients[idx]
            accs.append(clean_accuracy(model, eval_set, cfg.eval.batch_size))
            advs.append(evaluate_attack(model, eval_set, cfg.attack,
                                        numpy_rng(cfg.seed, "round", round_idx,
                                                  "attack", idx),
                                        cfg.eval.batch_size))
        clean_acc, adv_acc = float(np.mean(accs)), float(np.mean(advs))

    report = RoundReport(round=round_idx, client_losses=losses,
                         clean_accuracy=clean_acc, adv_accuracy=adv_acc,
                         wall_time_s=time.perf_counter() - t0)
    if log is not None:
        log(f"round {round_idx}: mean loss {np.mean(losses):.4f}, "
            f"clean {clean_acc:.3f}, adv {adv_acc:.3f}")
    return new_state, new_clients, report


@dataclass
class DataBundle:
    train: SampleSet
    val: SampleSet
    test: SampleSet


@dataclass
class TrainingArtifacts:
    purifier: PurifierUNet
    schedule: object
    mae: MAEModel
    calibration: object
    state: FederationState
    clients: list[ClientModel]
    client_data: list[ClientDataset]
    data: DataBundle
    reports: list[RoundReport] = field(default_factory=list)


def prepare_data(cfg: ExperimentConfig) -> DataBundle:
    d = cfg.dataset
    if d.name == "synthetic":
        from . import synthetic
        train_full = synthetic.generate(d.synthetic_train, cfg.seed, "train")
        test = synthetic.generate(d.synthetic_test, cfg.seed, "test")
    else:
        train_full = load_dataset(d.path, "train", d.image_size, d.channels, d.strict)
        test = load_dataset(d.path, "test", d.image_size, d.channels, d.strict)
    if d.classes:
        train_full = select_classes(train_full, d.classes)
        test = select_classes(test, d.classes)
    train_full = take(train_full, d.max_train)
    test = take(test, d.max_test)
    train, val = split_fraction(train_full, d.val_fraction,
                                derive_seed(cfg.seed, "valsplit"))
    return DataBundle(train=train, val=val, test=test)


def train_phase1(cfg: ExperimentConfig, data: DataBundle, out: Path, resume: bool,
                 log=None):
    """Diffusion purifier pretraining on benign images."""
    schedule = build_schedule(cfg.diffusion.T, cfg.diffusion.beta1, cfg.diffusion.betaT)
    if resume and (out / artifacts.PURIFIER_FILE).exists():
        if log:
            log("phase 1: reusing existing purifier checkpoint")
        return artifacts.load_purifier(out)
    torch.manual_seed(derive_seed(cfg.seed, "purifier", "init"))
    model = PurifierUNet(cfg.diffusion, channels=cfg.dataset.channels)
    train_diffusion(model, data.train, schedule, cfg.diffusion.epochs,
                    cfg.diffusion.lr, cfg.diffusion.batch_size,
                    derive_seed(cfg.seed, "purifier", "train"), log=log)
    artifacts.save_purifier(model, schedule, cfg.diffusion, cfg.dataset.channels,
                            cfg.seed, out)
    return model, schedule


def train_phase2(cfg: ExperimentConfig, data: DataBundle, out: Path, resume: bool,
                 log=None):
    """MAE detector training plus threshold calibration on clean validation."""
    if resume and (out / artifacts.MAE_FILE).exists() \
            and (out / artifacts.CALIBRATION_FILE).exists():
        if log:
            log("phase 2: reusing existing detector checkpoint")
        return artifacts.load_mae(out), artifacts.load_calibration(out)
    torch.manual_seed(derive_seed(cfg.seed, "mae", "init"))
    mae = MAEModel(cfg.mae, cfg.dataset.image_size, cfg.dataset.channels)
    train_mae(mae, data.train, cfg.mae.epochs, cfg.mae.lr, cfg.mae.batch_size,
              derive_seed(cfg.seed, "mae", "train"), log=log)
    val = data.val if len(data.val) >= 20 else data.train
    scores = detection_scores(mae, val.images, cfg.detector.n_draws,
                              derive_seed(cfg.seed, "calibrate"),
                              sample_ids=[f"cal{i}" for i in range(len(val))],
                              ratio=cfg.detector.score_mask_ratio,
                              masked=cfg.detector.masked_scoring)
    calibration = calibrate_threshold(scores, cfg.detector.kappa)
    artifacts.save_mae(mae, cfg.mae, cfg.dataset.image_size, cfg.dataset.channels,
                       cfg.seed, out)
    artifacts.save_calibration(calibration, out)
    return mae, calibration


def train_phase3(cfg: ExperimentConfig, data: DataBundle, out: Path, resume: bool,
                 defense_hook=None, log=None):
    """Personalized federated optimization with per-round monitoring."""
    client_data = partition_clients(data.train, cfg.fed.n_clients, cfg.partition,
                                    derive_seed(cfg.seed, "data"))
    if resume and (out / artifacts.STATE_FILE).exists():
        blob, clients = artifacts.load_federation(out)
        state = FederationState(global_experts=blob["global_experts"],
                                counts=blob["counts"], round=blob["round"])
        if log:
            log(f"phase 3: resuming at round {state.round}")
    else:
        state, clients = init_federation(cfg, client_data, cfg.dataset.channels)
    eval_set = take(data.test, cfg.eval.round_eval_samples) \
        if cfg.eval.round_eval_samples else None
    reports = []
    while state.round < cfg.fed.rounds:
        state, clients, report = run_round(state, clients, client_data, cfg,
                                           eval_set=eval_set,
                                           defense_hook=defense_hook, log=log)
        reports.append(report)
        artifacts.save_federation(state.global_experts, state.counts, state.round,
                                  clients, cfg.model, cfg.dataset.channels,
                                  cfg.seed, out)
    return state, clients, client_data, reports


def run_training(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                 resume: bool = False, log=None) -> TrainingArtifacts:
    """Execute the three phases in order and persist all artifacts."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    if log:
        log(f"data: {len(data.train)} train / {len(data.val)} val / "
            f"{len(data.test)} test")

    purifier, schedule = train_phase1(cfg, data, out, resume, log=log)
    mae, calibration = train_phase2(cfg, data, out, resume, log=log)

    defense_hook = None
    if cfg.fed.defense_in_training:
        from .pipeline import DefenseStack, make_training_hook
        stack = DefenseStack(model=None, mae=mae, calibration=calibration,
                             purifier=purifier, schedule=schedule,
                             policy=PurifyPolicy(cfg.purify.t_min, cfg.purify.t_max,
                                                 cfg.purify.sigma_mode),
                             n_draws=cfg.detector.n_draws,
                             masked_scoring=cfg.detector.masked_scoring,
                             score_ratio=cfg.detector.score_mask_ratio,
                             master_seed=cfg.seed)
        defense_hook = make_training_hook(stack)

    state, clients, client_data, reports = train_phase3(
        cfg, data, out, resume, defense_hook=defense_hook, log=log)
    artifacts.write_manifest(out, cfg, {"rounds_completed": state.round})
    return TrainingArtifacts(purifier=purifier, schedule=schedule, mae=mae,
                             calibration=calibration, state=state, clients=clients,
                             client_data=client_data, data=data, reports=reports)
