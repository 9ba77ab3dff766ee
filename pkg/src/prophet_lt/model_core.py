"""Backbone + linear classifier with a plain (STD) and a noise-injecting (GN) forward path."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ValidationError
from .propheter_layer import DTYPE, KernelMask, PropheterLayer

CHECKPOINT_FORMAT = "prophet_lt.checkpoint"
CHECKPOINT_VERSION = 1
FINAL_FEATURE = "after_final_feature"

_ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh, "gelu": nn.GELU}


@dataclass(frozen=True)
class BackboneSpec:
    """``input_shape`` is ``(D_in,)`` for the MLP and ``(channels, H, W)`` for the convnet.

    ``widths`` gives one entry per block; the last one is the feature dim D.
    """

    family: str = "mlp"
    input_shape: tuple = (32,)
    widths: tuple = (64, 64, 64)
    activation: str = "relu"
    batch_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        if self.family not in ("mlp", "small_convnet"):
            raise ValidationError(f"unknown backbone family {self.family!r}")
        if not self.widths:
            raise ValidationError("backbone needs at least one block")
        if min(self.widths) < 1:
            raise ValidationError("block widths must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValidationError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        if self.family == "mlp" and len(self.input_shape) != 1:
            raise ValidationError("mlp input_shape must be (D_in,)")
        if self.family == "small_convnet" and len(self.input_shape) != 3:
            raise ValidationError("small_convnet input_shape must be (channels, H, W)")

    @property
    def num_blocks(self) -> int:
        return len(self.widths)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]


def normalize_insertion_points(points, num_blocks: int) -> tuple:
    """Map names to canonical ``after_block_k`` (1-based); ``after_final_feature`` is the last block."""
    out = []
    for p in points:
        name = f"after_block_{num_blocks}" if p == FINAL_FEATURE else str(p)
        if not name.startswith("after_block_"):
            raise ValidationError(f"unknown insertion point {p!r}")
        try:
            k = int(name[len("after_block_"):])
        except ValueError:
            raise ValidationError(f"unknown insertion point {p!r}") from None
        if not 1 <= k <= num_blocks:
            raise ValidationError(f"insertion point {p!r} refers to a missing block (backbone has {num_blocks})")
        if name not in out:
            out.append(name)
    return tuple(sorted(out, key=lambda n: int(n.rsplit("_", 1)[1])))


def _child_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


def _make_blocks(spec: BackboneSpec) -> nn.ModuleList:
    act = _ACTIVATIONS[spec.activation]
    blocks = nn.ModuleList()
    prev = spec.input_shape[0]
    for i, w in enumerate(spec.widths):
        if spec.family == "mlp":
            layers = [nn.Linear(prev, w)]
            if spec.batch_norm:
                layers.append(nn.BatchNorm1d(w))
        else:
            stride = 1 if i == 0 else 2
            layers = [nn.Conv2d(prev, w, 3, stride=stride, padding=1)]
            if spec.batch_norm:
                layers.append(nn.BatchNorm2d(w))
        layers.append(act())
        blocks.append(nn.Sequential(*layers))
        prev = w
    return blocks


class LTModel(nn.Module):
    """Feature extractor, linear classifier and optional per-block residual layers."""

    def __init__(self, spec: BackboneSpec, num_classes: int, insertion_points=(FINAL_FEATURE,),
                 seed: int = 0, per_dim_params: bool = False, spatial_noise: str = "broadcast"):
        super().__init__()
        if num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        self.spec = spec
        self.num_classes = num_classes
        self.seed = seed
        self.per_dim_params = per_dim_params
        self.spatial_noise = spatial_noise
        self.insertion_points = normalize_insertion_points(insertion_points, spec.num_blocks)
        self.blocks = _make_blocks(spec)
        self.classifier = nn.Linear(spec.feature_dim, num_classes)
        self.gn = nn.ModuleDict()
        for name in self.insertion_points:
            k = int(name.rsplit("_", 1)[1])
            self.gn[name] = PropheterLayer(
                num_classes, _child_seed(seed, 1, k),
                dim=spec.widths[k - 1] if per_dim_params else None,
                spatial_noise=spatial_noise,
            )
        self.to(DTYPE)
        self._init_weights(seed)

    def _init_weights(self, seed: int):
        g = torch.Generator().manual_seed(_child_seed(seed, 0))
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Linear, nn.Conv2d)):
                    nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), generator=g)
                    fan_in = m.weight[0].numel()
                    bound = 1.0 / math.sqrt(fan_in)
                    nn.init.uniform_(m.bias, -bound, bound, generator=g)

    @property
    def has_gn(self) -> bool:
        return len(self.gn) > 0

    def backbone_parameters(self):
        """Everything except the residual-layer params."""
        return [p for n, p in self.named_parameters() if not n.startswith("gn.")]

    def propheter_parameters(self):
        return list(self.gn.parameters())

    def project_(self):
        for layer in self.gn.values():
            layer.project_()

    def _check_inputs(self, inputs) -> torch.Tensor:
        x = torch.as_tensor(inputs, dtype=DTYPE)
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ValidationError(
                f"inputs have per-sample shape {tuple(x.shape[1:])}, model expects {self.spec.input_shape}"
            )
        return x

    def _pool(self, h: torch.Tensor) -> torch.Tensor:
        return h.mean(dim=(2, 3)) if h.dim() == 4 else h

    def block_outputs(self, inputs) -> list:
        """Per-block activations on the STD path (convnet outputs are spatially averaged)."""
        h = self._check_inputs(inputs)
        outs = []
        for block in self.blocks:
            h = block(h)
            outs.append(self._pool(h))
        return outs

    def forward_std(self, inputs):
        h = self._check_inputs(inputs)
        for block in self.blocks:
            h = block(h)
        features = self._pool(h)
        return features, self.classifier(features)

    def forward_gn(self, inputs, labels, generator: torch.Generator, mask: KernelMask | None = None):
        """GN path: add the class-conditional residual after every configured block.

        With ``mask`` the residual is applied only at the final block, on the
        channels selected for each sample's class.
        """
        if labels is None:
            raise ValidationError("the GN path needs labels")
        labels = torch.as_tensor(labels, dtype=torch.long)
        h = self._check_inputs(inputs)
        if labels.shape != (h.shape[0],):
            raise ValidationError("labels must be a vector with one entry per input")
        last = f"after_block_{self.spec.num_blocks}"
        if mask is not None:
            if last not in self.gn:
                raise ValidationError("a kernel mask needs a residual layer after the final block")
            if mask.num_classes != self.num_classes:
                raise ValidationError(f"mask covers {mask.num_classes} classes, model has {self.num_classes}")
        for k, block in enumerate(self.blocks, start=1):
            h = block(h)
            name = f"after_block_{k}"
            if name not in self.gn:
                continue
            if mask is None:
                h = self.gn[name](h, labels, generator)
            elif name == last:
                h = self.gn[name](h, labels, generator, mask=mask)
        features = self._pool(h)
        return features, self.classifier(features)

    def forward(self, inputs):
        return self.forward_std(inputs)[1]


def build_model(spec: BackboneSpec, num_classes: int, insertion_points=(FINAL_FEATURE,), seed: int = 0, **kw) -> LTModel:
    return LTModel(spec, num_classes, insertion_points, seed=seed, **kw)


def forward_std(model: LTModel, inputs):
    return model.forward_std(inputs)


def forward_gn(model: LTModel, inputs, labels, generator, mask=None):
    return model.forward_gn(inputs, labels, generator, mask)


def strip_gn(model: LTModel) -> LTModel:
    """Copy of ``model`` with the same backbone/classifier weights and no residual layers."""
    clone = LTModel(model.spec, model.num_classes, (), seed=model.seed,
                    per_dim_params=model.per_dim_params, spatial_noise=model.spatial_noise)
    state = {k: v for k, v in model.state_dict().items() if not k.startswith("gn.")}
    clone.load_state_dict(state)
    return clone


def clone_model(model: LTModel) -> LTModel:
    clone = LTModel(model.spec, model.num_classes, model.insertion_points, seed=model.seed,
                    per_dim_params=model.per_dim_params, spatial_noise=model.spatial_noise)
    clone.load_state_dict(model.state_dict())
    return clone


def parameter_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _manifest(model: LTModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "backbone": asdict(model.spec),
        "num_classes": model.num_classes,
        "insertion_points": list(model.insertion_points),
        "seed": model.seed,
        "per_dim_params": model.per_dim_params,
        "spatial_noise": model.spatial_noise,
        "params": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in model.state_dict().items()},
    }


def save_checkpoint(model: LTModel, path):
    """Uncompressed ``.npz``: a JSON manifest under ``__manifest__`` plus one array per state entry."""
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    manifest = np.frombuffer(json.dumps(_manifest(model), sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __manifest__=manifest, **arrays)


def load_checkpoint(path, spec: BackboneSpec | None = None) -> LTModel:
    """Rebuild a model from ``path``; with ``spec`` the weights are loaded into that backbone instead."""
    try:
        with np.load(path, allow_pickle=False) as data:
            manifest = json.loads(data["__manifest__"].tobytes().decode())
            arrays = {k: data[k] for k in data.files if k != "__manifest__"}
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a model checkpoint")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {manifest.get('version')!r} is not supported (expected {CHECKPOINT_VERSION})"
        )
    if spec is None:
        spec = BackboneSpec(**manifest["backbone"])
    try:
        model = LTModel(spec, manifest["num_classes"], manifest["insertion_points"], seed=manifest["seed"],
                        per_dim_params=manifest["per_dim_params"], spatial_noise=manifest["spatial_noise"])
    except ValidationError as exc:
        raise CheckpointError(f"checkpoint does not fit the requested backbone: {exc}") from exc

    state = model.state_dict()
    missing = sorted(set(state) - set(arrays))
    extra = sorted(set(arrays) - set(state))
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for name, target in state.items():
        if tuple(arrays[name].shape) != tuple(target.shape):
            raise CheckpointError(
                f"shape mismatch for parameter {name!r}: checkpoint {tuple(arrays[name].shape)}, model {tuple(target.shape)}"
            )
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    return model
