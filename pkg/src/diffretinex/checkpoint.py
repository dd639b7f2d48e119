"""Named-array parameter archives.

A checkpoint is a zip file (readable by ``numpy.load``) holding one ``.npy``
member per named array plus a ``meta.json`` member with a format version, the
model kind, architecture descriptors, and any extra metadata (for diffusion
stages: the noise schedule, so sampling is reproducible against the file).
Members are written in sorted order with fixed timestamps, so saving the same
state twice produces byte-identical files.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from typing import Mapping

import numpy as np
import torch

from .errors import ConfigError, InputError

FORMAT_VERSION = 1
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def save_archive(
    path: str | os.PathLike,
    kind: str,
    descriptors: Mapping[str, dict],
    arrays: Mapping[str, np.ndarray],
    extra: dict | None = None,
) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "descriptors": {k: dict(v) for k, v in descriptors.items()},
        "extra": extra or {},
        "array_names": sorted(arrays),
    }
    with zipfile.ZipFile(path, "w") as zf:
        def write_member(name: str, payload: bytes) -> None:
            info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, payload)

        write_member("meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]))
            write_member(f"arrays/{name}.npy", buf.getvalue())


def load_archive(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    if not os.path.exists(path):
        raise InputError(f"{path}: checkpoint not found")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = {}
            for name in meta["array_names"]:
                with zf.open(f"arrays/{name}.npy") as f:
                    arrays[name] = np.lib.format.read_array(f)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: not a valid checkpoint archive ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise InputError(
            f"{path}: format version {meta.get('format_version')} != {FORMAT_VERSION}"
        )
    return meta, arrays


def state_dict_to_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_from_arrays(
    module: torch.nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = ""
) -> None:
    state = {}
    for k, v in arrays.items():
        if k.startswith(prefix):
            state[k[len(prefix):]] = torch.from_numpy(np.array(v))
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint arrays do not fit the descriptor: {exc}") from exc


# --------------------------------------------------------------------------
# Model-specific wrappers
# --------------------------------------------------------------------------


def save_decomposer(path, model, extra: dict | None = None) -> None:
    save_archive(
        path,
        kind="decomposer",
        descriptors={"model": model.descriptor.to_dict()},
        arrays=state_dict_to_arrays(model),
        extra=extra,
    )


def load_decomposer(path):
    from .tdn import DecomNet, DecomposerDescriptor

    meta, arrays = load_archive(path)
    if meta["kind"] != "decomposer":
        raise InputError(f"{path}: expected a decomposer checkpoint, got {meta['kind']!r}")
    model = DecomNet(DecomposerDescriptor.from_dict(meta["descriptors"]["model"]))
    load_state_from_arrays(model, arrays)
    model.eval()
    return model


def save_diffusion_stage(path, stage: str, denoiser, consistency, schedule, extra=None) -> None:
    from .diffusion import NoiseSchedule

    assert isinstance(schedule, NoiseSchedule)
    arrays = state_dict_to_arrays(denoiser, prefix="denoiser/")
    arrays.update(state_dict_to_arrays(consistency, prefix="consistency/"))
    meta_extra = {"stage": stage, "schedule": {"T": schedule.T, "beta": schedule.beta.tolist()}}
    meta_extra.update(extra or {})
    save_archive(
        path,
        kind="diffusion-stage",
        descriptors={
            "denoiser": denoiser.descriptor.to_dict(),
            "consistency": consistency.descriptor.to_dict(),
        },
        arrays=arrays,
        extra=meta_extra,
    )


def load_diffusion_stage(path):
    """Return (denoiser, consistency, schedule, stage name) from a stage archive."""
    from .denoisers import ConsistencyDescriptor, DenoiserDescriptor, UNetDenoiser, build_refiner
    from .diffusion import schedule_from_betas

    meta, arrays = load_archive(path)
    if meta["kind"] != "diffusion-stage":
        raise InputError(f"{path}: expected a diffusion-stage checkpoint, got {meta['kind']!r}")
    denoiser = UNetDenoiser(DenoiserDescriptor.from_dict(meta["descriptors"]["denoiser"]))
    consistency = build_refiner(ConsistencyDescriptor.from_dict(meta["descriptors"]["consistency"]))
    load_state_from_arrays(denoiser, arrays, prefix="denoiser/")
    load_state_from_arrays(consistency, arrays, prefix="consistency/")
    denoiser.eval()
    consistency.eval()
    schedule = schedule_from_betas(np.array(meta["extra"]["schedule"]["beta"]))
    return denoiser, consistency, schedule, meta["extra"]["stage"]
