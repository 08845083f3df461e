"""Single-file checkpoints: a zip of ``.npy`` arrays plus ``header.json``.

Array keys are ``detector/<module path>`` for the deployable detector and
``adaptation/<module path>`` for the training-only domain classifiers.  The
archive is readable with ``numpy.load``.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .model import Detector, DetectorConfig, ValidationError

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _put(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def save_checkpoint(path, model, config, step: int) -> Path:
    """Write ``model`` (a DAYolo or bare Detector) to ``path``; identical inputs give identical bytes."""
    path = Path(path)
    detector = model.detector if hasattr(model, "detector") else model
    adaptation = getattr(model, "adaptation", None)
    dc = detector.config
    header = {
        "format": "dayolo-checkpoint/1",
        "config_hash": config.hash() if config is not None else None,
        "config": config.to_dict() if config is not None else None,
        "step": int(step),
        "anchors": [[list(a) for a in s] for s in dc.anchors],
        "detector": {"num_classes": dc.num_classes, "widths": list(dc.widths),
                     "num_anchors": dc.num_anchors, "head_hidden": dc.head_hidden},
        "sections": ["detector"] + (["adaptation"] if adaptation is not None else []),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w") as zf:
            _put(zf, "header.json", json.dumps(header, indent=2, sort_keys=True).encode())
            sections = [("detector", detector)]
            if adaptation is not None:
                sections.append(("adaptation", adaptation))
            for section, module in sections:
                for key, t in module.state_dict().items():
                    buf = io.BytesIO()
                    np.lib.format.write_array(buf, t.detach().cpu().numpy(), allow_pickle=False)
                    _put(zf, f"{section}/{key}.npy", buf.getvalue())
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e
    return path


def read_header(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("header.json"))


def read_arrays(path, section: str) -> dict[str, np.ndarray]:
    out = {}
    prefix = section + "/"
    with zipfile.ZipFile(path) as zf:
        for name in zf.namelist():
            if name.startswith(prefix) and name.endswith(".npy"):
                out[name[len(prefix):-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)))
    return out


def load_checkpoint(path, with_adaptation: bool = False):
    """Return ``(detector, adaptation_or_None, header)``.

    The detector is returned in eval mode.  Adaptation weights are only
    materialized when asked for, mirroring test-time deployment.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.npz"
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    header = read_header(path)
    d = header["detector"]
    anchors = tuple(tuple(tuple(a) for a in s) for s in header["anchors"])
    detector = Detector(DetectorConfig(num_classes=d["num_classes"], widths=tuple(d["widths"]),
                                       num_anchors=d["num_anchors"], anchors=anchors,
                                       head_hidden=d["head_hidden"]))
    state = {k: torch.from_numpy(v) for k, v in read_arrays(path, "detector").items()}
    try:
        detector.load_state_dict(state)
    except RuntimeError as e:
        raise ValidationError(f"checkpoint {path} does not match its header: {e}") from e
    detector.eval()
    adaptation = None
    if with_adaptation and "adaptation" in header["sections"]:
        from .adaptation import DomainAdaptation

        pool = (header.get("config") or {}).get("pool_size", 3)
        adaptation = DomainAdaptation(detector.config.tap_channels, pool)
        adaptation.load_state_dict(
            {k: torch.from_numpy(v) for k, v in read_arrays(path, "adaptation").items()})
        adaptation.eval()
    return detector, adaptation, header


def load_into(model, path, sections=("detector", "adaptation")) -> dict:
    """Copy weights from a checkpoint into an existing DAYolo; returns the header."""
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.npz"
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    header = read_header(path)
    for section in sections:
        if section not in header["sections"]:
            continue
        module = getattr(model, section)
        state = {k: torch.from_numpy(v) for k, v in read_arrays(path, section).items()}
        try:
            module.load_state_dict(state)
        except RuntimeError as e:
            raise ValidationError(f"checkpoint {path} does not fit the model: {e}") from e
    return header
