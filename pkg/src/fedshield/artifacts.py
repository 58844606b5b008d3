"""Checkpoint persistence for the three training phases.

Each artifact is written atomically (tmp file + rename) together with enough
metadata to rebuild the module: config section, shapes, seed, round number.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch

from .config import DiffusionConfig, ExperimentConfig, MAEConfig, ModelConfig
from .detector import DetectorCalibration, MAEModel
from .moe import ClientModel
from .purifier import NoiseSchedule, PurifierUNet, build_schedule

PURIFIER_FILE = "purifier.pt"
MAE_FILE = "mae.pt"
CALIBRATION_FILE = "calibration.json"
STATE_FILE = "state.pt"
CLIENTS_DIR = "clients"


class ArtifactError(RuntimeError):
    """Missing or inconsistent checkpoint."""


def _atomic_save(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(obj, tmp)
    tmp.replace(path)


def file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def save_purifier(model: PurifierUNet, schedule: NoiseSchedule,
                  cfg: DiffusionConfig, channels: int, seed: int, out: Path) -> Path:
    path = Path(out) / PURIFIER_FILE
    _atomic_save({
        "state_dict": model.state_dict(),
        "config": cfg.__dict__,
        "channels": channels,
        "schedule": {"T": schedule.T, "beta1": float(schedule.betas[1]),
                     "betaT": float(schedule.betas[schedule.T])},
        "seed": seed,
    }, path)
    return path


def load_purifier(out: Path) -> tuple[PurifierUNet, NoiseSchedule]:
    path = Path(out) / PURIFIER_FILE
    if not path.exists():
        raise ArtifactError(f"missing checkpoint: {path}")
    blob = torch.load(path, weights_only=False)
    cfg = DiffusionConfig(**blob["config"])
    model = PurifierUNet(cfg, channels=blob["channels"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    sched = blob["schedule"]
    return model, build_schedule(sched["T"], sched["beta1"], sched["betaT"])


def save_mae(model: MAEModel, cfg: MAEConfig, image_size: int, channels: int,
             seed: int, out: Path) -> Path:
    path = Path(out) / MAE_FILE
    _atomic_save({
        "state_dict": model.state_dict(),
        "config": cfg.__dict__,
        "image_size": image_size,
        "channels": channels,
        "seed": seed,
    }, path)
    return path


def load_mae(out: Path) -> MAEModel:
    path = Path(out) / MAE_FILE
    if not path.exists():
        raise ArtifactError(f"missing checkpoint: {path}")
    blob = torch.load(path, weights_only=False)
    model = MAEModel(MAEConfig(**blob["config"]), blob["image_size"], blob["channels"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


def save_calibration(cal: DetectorCalibration, out: Path) -> Path:
    path = Path(out) / CALIBRATION_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    cal.to_json(path)
    return path


def load_calibration(out: Path) -> DetectorCalibration:
    path = Path(out) / CALIBRATION_FILE
    if not path.exists():
        raise ArtifactError(f"missing checkpoint: {path}")
    return DetectorCalibration.from_json(path)


def save_federation(global_experts: list[dict], counts: list[int], round_idx: int,
                    clients: list[ClientModel], cfg: ModelConfig, channels: int,
                    seed: int, out: Path) -> None:
    out = Path(out)
    _atomic_save({
        "global_experts": global_experts,
        "counts": counts,
        "round": round_idx,
        "K": cfg.K,
        "config": cfg.__dict__,
        "channels": channels,
        "seed": seed,
    }, out / STATE_FILE)
    for client in clients:
        _atomic_save({"state_dict": client.state_dict(),
                      "client_id": client.client_id},
                     out / CLIENTS_DIR / f"client_{client.client_id:03d}.pt")


def load_federation(out: Path) -> tuple[dict, list[ClientModel]]:
    out = Path(out)
    path = out / STATE_FILE
    if not path.exists():
        raise ArtifactError(f"missing checkpoint: {path}")
    blob = torch.load(path, weights_only=False)
    cfg = ModelConfig(**blob["config"])
    clients = []
    for f in sorted((out / CLIENTS_DIR).glob("client_*.pt")):
        cblob = torch.load(f, weights_only=False)
        model = ClientModel(cfg, channels=blob["channels"],
                            client_id=cblob["client_id"])
        model.load_state_dict(cblob["state_dict"])
        model.eval()
        clients.append(model)
    if len(clients) != len(blob["counts"]):
        raise ArtifactError("client checkpoints do not match federation state")
    return blob, clients


def write_manifest(out: Path, cfg: ExperimentConfig, extra: dict | None = None) -> Path:
    out = Path(out)
    manifest = {
        "config_hash": cfg.content_hash(),
        "seed": cfg.seed,
        "torch_version": torch.__version__,
        "artifacts": {p.name: file_hash(p) for p in sorted(out.glob("*.pt"))},
    }
    manifest.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path
