"""Versioned artifact files: npz archives with an embedded JSON header.

Every artifact records the format version, its kind, and the hash of the
experiment config that produced it; loading checks all three so a stage can
never silently reuse output from a different configuration.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn
from .edge import EdgeArtifact, EdgeModelConfig, build_edge_model
from .vae import Vae

FORMAT_VERSION = 1


class ArtifactError(RuntimeError):
    pass


def save_artifact(path, kind: str, arrays: dict, meta: dict) -> None:
    header = {"format_version": FORMAT_VERSION, "kind": kind, **meta}
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"),
                                        dtype=np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **payload)


def load_artifact(path, kind: str, config_hash: Optional[str] = None):
    """Return (arrays, meta) after validating version, kind, and config hash."""
    p = Path(path)
    if not p.exists():
        raise ArtifactError(f"missing artifact file: {p}")
    try:
        with np.load(p, allow_pickle=False) as z:
            if "__meta__" not in z:
                raise ArtifactError(f"{p}: not an artifact file (no header)")
            meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
            arrays = {k: z[k] for k in z.files if k != "__meta__"}
    except (OSError, ValueError) as exc:
        raise ArtifactError(f"{p}: corrupt artifact ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise ArtifactError(f"{p}: format version {meta.get('format_version')} != {FORMAT_VERSION}")
    if meta.get("kind") != kind:
        raise ArtifactError(f"{p}: artifact kind {meta.get('kind')!r}, expected {kind!r}")
    if config_hash is not None and meta.get("config_hash") != config_hash:
        raise ArtifactError(f"{p}: config hash mismatch (stage artifacts are stale)")
    return arrays, meta


# ---------------------------------------------------------------------------
# Edge artifacts
# ---------------------------------------------------------------------------

def save_edge_artifact(path, artifact: EdgeArtifact, config_hash: str, edge_index: int) -> None:
    cfg = artifact.config
    meta = {
        "config_hash": config_hash,
        "edge_index": edge_index,
        "task": cfg.task,
        "specs": [s.to_dict() for s in cfg.specs],
        "input_shape": list(cfg.input_shape),
        "epochs": cfg.epochs,
        "feature_width": cfg.feature_width,
        "seed": cfg.seed,
        "n_classes": cfg.n_classes,
        "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "f_e": cfg.f_e,
        "loss_trace": [float(v) for v in artifact.loss_trace],
        "epochs_run": artifact.epochs_run,
        "n_train": artifact.n_train,
        "train_accuracy": artifact.train_accuracy,
        "param_count": artifact.param_count(),
    }
    save_artifact(path, "edge", artifact.model.get_parameters(), meta)


def load_edge_artifact(path, config_hash: Optional[str] = None) -> EdgeArtifact:
    arrays, meta = load_artifact(path, "edge", config_hash)
    cfg = EdgeModelConfig(
        task=meta["task"],
        specs=tuple(nn.LayerSpec.from_dict(d) for d in meta["specs"]),
        input_shape=tuple(meta["input_shape"]),
        epochs=meta["epochs"],
        feature_width=meta["feature_width"],
        seed=meta["seed"],
        n_classes=meta["n_classes"],
        lr=meta["lr"],
        batch_size=meta["batch_size"],
        f_e=meta.get("f_e"),
    )
    model = build_edge_model(cfg)
    model.set_parameters(arrays)
    from .edge import embedding_tap_index
    return EdgeArtifact(config=cfg, model=model,
                        tap_index=embedding_tap_index(cfg.specs, cfg.feature_width),
                        loss_trace=meta["loss_trace"], epochs_run=meta["epochs_run"],
                        n_train=meta["n_train"], train_accuracy=meta.get("train_accuracy"))


# ---------------------------------------------------------------------------
# VAE artifacts
# ---------------------------------------------------------------------------

def save_vae_artifact(path, vae: Vae, config_hash: str, edge_index: int,
                      loss_trace=None) -> None:
    meta = {
        "config_hash": config_hash,
        "edge_index": edge_index,
        "feature_width": vae.feature_width,
        "latent_dim": vae.latent_dim,
        "hidden": vae.hidden,
        "seed": vae.seed,
        "steps_run": vae.steps_run,
        "loss_trace": [float(v) for v in (loss_trace or [])],
        "param_count": vae.param_count(),
    }
    save_artifact(path, "vae", vae.get_parameters(), meta)


def load_vae_artifact(path, config_hash: Optional[str] = None) -> Vae:
    arrays, meta = load_artifact(path, "vae", config_hash)
    vae = Vae(feature_width=meta["feature_width"], latent_dim=meta["latent_dim"],
              hidden=meta["hidden"], seed=meta["seed"])
    vae.set_parameters(arrays)
    vae.steps_run = meta["steps_run"]
    return vae


# ---------------------------------------------------------------------------
# Ensemble artifacts
# ---------------------------------------------------------------------------

def save_ensemble_artifact(path, model: nn.Model, config_hash: str, meta_extra: dict) -> None:
    meta = {
        "config_hash": config_hash,
        "specs": [s.to_dict() for s in model.specs],
        "input_shape": list(model.input_shape),
        "seed": model.seed,
        "param_count": model.param_count(),
        **meta_extra,
    }
    save_artifact(path, "ensemble", model.get_parameters(), meta)


def load_ensemble_artifact(path, config_hash: Optional[str] = None):
    arrays, meta = load_artifact(path, "ensemble", config_hash)
    specs = tuple(nn.LayerSpec.from_dict(d) for d in meta["specs"])
    model = nn.Model(specs, tuple(meta["input_shape"]), seed=meta["seed"])
    model.set_parameters(arrays)
    return model, meta
