"""Backbone truncation and interchange export.

Takes a ResNet-style classification backbone, cuts it at the mid-level
convolutional stage and serializes the truncated network to an ONNX file
plus a JSON sidecar declaring stride, output channels and the input
normalization constants.  The export is validated by running a fixed probe
image through both the source network and the exported file (evaluated with
filigree's interchange runtime) before anything is moved into place.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torchvision.models as tvm
from torchvision.models.resnet import BasicBlock

from filigree.onnxlite import load_model, run as onnx_run

from .onnx_writer import GraphBuilder

# the mid-level stage names map onto torchvision's layer indices
STAGE_TO_LAYER = {"conv3": "layer2", "conv4": "layer3", "conv5": "layer4"}
STAGE_STRIDE = {"conv3": 8, "conv4": 16, "conv5": 32}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

PROBE_SIDE = 352
PROBE_SEED = 1234
VALIDATION_MAX_ABS = 1e-4


class ExportError(Exception):
    """Raised when building or validating the export fails."""


@dataclass(frozen=True)
class ExportSpec:
    """What to export and where.

    ``source`` is either a torchvision architecture name ("resnet18") built
    with randomly initialized weights, or that architecture loaded from a
    local ``checkpoint`` state-dict.  ``layer`` names the truncation stage
    ("conv4" keeps everything through the third residual stage: stride 16,
    256 channels for ResNet-18).
    """

    out_path: str
    source: str = "resnet18"
    layer: str = "conv4"
    checkpoint: str | None = None
    seed: int = 0
    normalize_mean: tuple[float, float, float] = IMAGENET_MEAN
    normalize_std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if self.layer not in STAGE_TO_LAYER:
            raise ValueError(f"unknown truncation layer {self.layer!r}; "
                             f"expected one of {sorted(STAGE_TO_LAYER)}")

    @property
    def stride(self) -> int:
        return STAGE_STRIDE[self.layer]


def build_backbone(spec: ExportSpec) -> nn.Module:
    """Construct the source network and truncate it after the target stage."""
    if spec.source != "resnet18":
        raise ExportError(f"unsupported source architecture {spec.source!r}")
    torch.manual_seed(spec.seed)
    net = tvm.resnet18(weights=None)
    if spec.checkpoint:
        state = torch.load(spec.checkpoint, map_location="cpu",
                           weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        net.load_state_dict(state, strict=False)
    stages = [net.conv1, net.bn1, net.relu, net.maxpool, net.layer1,
              net.layer2]
    if spec.layer in ("conv4", "conv5"):
        stages.append(net.layer3)
    if spec.layer == "conv5":
        stages.append(net.layer4)
    trunk = nn.Sequential(*stages)
    trunk.eval()
    return trunk


def _emit(module: nn.Module, x: str, g: GraphBuilder) -> str:
    if isinstance(module, nn.Sequential):
        for child in module:
            x = _emit(child, x, g)
        return x
    if isinstance(module, nn.Conv2d):
        if module.dilation != (1, 1) or module.groups != 1:
            raise ExportError("only dense ungrouped convolutions are supported")
        w = module.weight.detach().numpy()
        b = module.bias.detach().numpy() if module.bias is not None else None
        return g.conv(x, w, b, module.stride, module.padding)
    if isinstance(module, nn.BatchNorm2d):
        return g.batch_norm(
            x, module.weight.detach().numpy(), module.bias.detach().numpy(),
            module.running_mean.detach().numpy(),
            module.running_var.detach().numpy(), float(module.eps))
    if isinstance(module, nn.ReLU):
        return g.relu(x)
    if isinstance(module, nn.MaxPool2d):
        def pair(v):
            return (v, v) if isinstance(v, int) else tuple(v)
        if module.dilation not in (1, (1, 1)) or module.ceil_mode:
            raise ExportError("dilated/ceil-mode pooling is not supported")
        return g.max_pool(x, pair(module.kernel_size), pair(module.stride),
                          pair(module.padding))
    if isinstance(module, BasicBlock):
        identity = x
        out = g.conv(x, module.conv1.weight.detach().numpy(), None,
                     module.conv1.stride, module.conv1.padding)
        out = _emit(module.bn1, out, g)
        out = g.relu(out)
        out = g.conv(out, module.conv2.weight.detach().numpy(), None,
                     module.conv2.stride, module.conv2.padding)
        out = _emit(module.bn2, out, g)
        if module.downsample is not None:
            identity = _emit(module.downsample, x, g)
        out = g.add(out, identity)
        return g.relu(out)
    raise ExportError(f"unsupported module type {type(module).__name__}")


def _probe_image(side: int) -> np.ndarray:
    rng = np.random.default_rng(PROBE_SEED)
    return rng.uniform(0.0, 1.0, size=(1, 3, side, side)).astype(np.float32)


def export(spec: ExportSpec) -> dict:
    """Write the truncated network + sidecar; dual-run validate first.

    Returns a summary dict (paths, output shape, max-abs validation error).
    Nothing is written to the final paths unless validation passes.
    """
    trunk = build_backbone(spec)

    g = GraphBuilder()
    out_name = _emit(trunk, "image", g)
    probe = _probe_image(PROBE_SIDE)
    grid = PROBE_SIDE // spec.stride
    with torch.no_grad():
        ref = trunk(torch.from_numpy(probe)).numpy()
    dim = ref.shape[1]
    if ref.shape != (1, dim, grid, grid):
        raise ExportError(f"truncated network produced {ref.shape}, expected "
                          f"(1, {dim}, {grid}, {grid}) for a {PROBE_SIDE} probe")

    # rename the graph output to the stable public name
    blob = g.serialize("image", (1, 3, PROBE_SIDE, PROBE_SIDE),
                       out_name, (1, dim, grid, grid))

    out_path = Path(spec.out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp_model = out_path.with_suffix(out_path.suffix + ".tmp")
    tmp_model.write_bytes(blob)
    try:
        model = load_model(tmp_model)
        got = onnx_run(model, {"image": probe})[out_name]
        err = float(np.abs(got - ref).max())
        if got.shape != ref.shape or err > VALIDATION_MAX_ABS:
            raise ExportError(
                f"dual-run validation failed: shape {got.shape} vs {ref.shape}, "
                f"max-abs error {err:.3e} (limit {VALIDATION_MAX_ABS:.0e})")
    except Exception:
        tmp_model.unlink(missing_ok=True)
        raise
    os.replace(tmp_model, out_path)

    sidecar = {
        "stride": spec.stride,
        "dim": int(dim),
        "input_name": "image",
        "output_name": out_name,
        "normalize_mean": list(spec.normalize_mean),
        "normalize_std": list(spec.normalize_std),
        "source": spec.source,
        "truncation": spec.layer,
        "checkpoint": spec.checkpoint,
        "layout": "NCHW",
    }
    sidecar_path = out_path.with_suffix(".json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return {"model": str(out_path), "sidecar": str(sidecar_path),
            "output_shape": tuple(ref.shape), "validation_max_abs": err}
