"""Model state and the single-file checkpoint archive.

The archive is a zip holding ``header.json`` (format, step, config hash and,
per model, arch_id, arch and parameter shapes), one raw little-endian float32
payload per parameter, and the optimizer state(s) as ``optimizer.pt``.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import nets

FORMAT = "crowdlab-ckpt-1"


@dataclass
class ModelState:
    arch_id: str
    arch: dict
    parameters: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in self.parameters.items():
            if not np.isfinite(arr).all():
                raise ValueError(f"parameter {name} of {self.arch_id} is not finite")

    @classmethod
    def from_module(cls, module) -> "ModelState":
        params = {k: v.detach().cpu().numpy().astype("<f4", copy=True) for k, v in module.state_dict().items()}
        meta = {"in_channels": module.arch.get("in_channels", module.arch.get("channels")),
                "stride": getattr(module, "stride", None)}
        return cls(module.arch_id, dict(module.arch), params, meta)

    def to_module(self):
        module = nets.build(self.arch)
        module.load_state_dict({k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in self.parameters.items()})
        return module


def save_checkpoint(path, models, optimizers=None, step: int = 0, config_hash: str = "") -> Path:
    """`models` maps name -> module (a bare module is stored as "model")."""
    if isinstance(models, torch.nn.Module):
        models = {"model": models}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT, "step": int(step), "config_hash": config_hash, "models": {}}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, module in models.items():
            st = ModelState.from_module(module)
            header["models"][name] = {"arch_id": st.arch_id, "arch": st.arch, "meta": st.meta,
                                      "params": {k: list(v.shape) for k, v in st.parameters.items()}}
            for k, v in st.parameters.items():
                zf.writestr(f"params/{name}/{k}.f32", v.tobytes())
        if optimizers:
            buf = io.BytesIO()
            opts = optimizers if isinstance(optimizers, dict) else {"optimizer": optimizers}
            torch.save({k: o.state_dict() for k, o in opts.items()}, buf)
            zf.writestr("optimizer.pt", buf.getvalue())
        zf.writestr("header.json", json.dumps(header, indent=1))
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Return (header, {name: ModelState}, optimizer state dicts or None)."""
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != FORMAT:
            raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
        states = {}
        for name, entry in header["models"].items():
            params = {k: np.frombuffer(zf.read(f"params/{name}/{k}.f32"), dtype="<f4").reshape(shape).copy()
                      for k, shape in entry["params"].items()}
            states[name] = ModelState(entry["arch_id"], entry["arch"], params, entry["meta"])
        opt = None
        if "optimizer.pt" in zf.namelist():
            opt = torch.load(io.BytesIO(zf.read("optimizer.pt")), weights_only=False)
    return header, states, opt


def load_model(path, name: str = "model"):
    _, states, _ = load_checkpoint(path)
    if name not in states:
        name = next(iter(states))
    return states[name].to_module()
