"""Extract backbone features into interchange dataset directories.

Runs a ResNet-50 or ConvNeXt backbone in eval mode over an image folder
and writes the captured activations as a dataset directory consumed by
the scoring toolkit: ``features.npy`` (N x d, float32), plus
``logits.npy`` and ``head_w.npy``/``head_b.npy`` for the final stage,
and a ``manifest.json`` mapping every image to its row index.

Stage taxonomy: ``stage0`` .. ``stage3`` are the four residual/block
stages of the backbone, spatially global-average-pooled to vectors;
``final_gap`` is the exact vector the classifier consumes (for ResNet-50
the pooled features, for ConvNeXt the pooled-and-normalized features),
so ``logits = features @ head_w.T + head_b`` holds by construction.

Weights come from torchvision's pretrained registry (``pretrained``), a
local checkpoint path, or a seeded random initialization (``random``)
for pipeline testing when no checkpoint is available. Inference is
deterministic: eval mode, no augmentation, images processed in sorted
order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision import transforms
from torchvision.models import convnext_tiny, resnet50

BACKBONES = ("resnet50", "convnext")
STAGES = ("stage0", "stage1", "stage2", "stage3", "final_gap")

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")

_IMAGENET_EVAL_TRANSFORM = transforms.Compose(
    [
        transforms.Resize(256),
        transforms.CenterCrop(224),
        transforms.ToTensor(),
        transforms.Normalize(mean=[0.485, 0.456, 0.406], std=[0.229, 0.224, 0.225]),
    ]
)


@dataclass(frozen=True)
class ExportSpec:
    """What to extract: backbone, stage, images, weights, destination."""

    backbone: str
    stage: str
    image_dirs: tuple[str, ...]
    output_dir: str
    batch_size: int = 16
    weights: str = "pretrained"  # "pretrained", "random", or a checkpoint path
    seed: int = 0

    def __post_init__(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}, expected one of {BACKBONES}")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}, expected one of {STAGES}")
        if not self.image_dirs:
            raise ValueError("at least one image directory is required")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        object.__setattr__(self, "image_dirs", tuple(str(p) for p in self.image_dirs))
        object.__setattr__(self, "output_dir", str(self.output_dir))


def _build_model(spec: ExportSpec):
    """Instantiate the backbone, its eval transform, stage modules, and head."""
    torch.manual_seed(spec.seed)  # pins the "random" initialization
    transform = _IMAGENET_EVAL_TRANSFORM

    if spec.backbone == "resnet50":
        if spec.weights == "pretrained":
            from torchvision.models import ResNet50_Weights

            enum = ResNet50_Weights.IMAGENET1K_V2
            model = resnet50(weights=enum)
            transform = enum.transforms()
        else:
            model = resnet50()
        stage_modules = {
            "stage0": model.layer1,
            "stage1": model.layer2,
            "stage2": model.layer3,
            "stage3": model.layer4,
        }
        head = model.fc
    else:
        if spec.weights == "pretrained":
            from torchvision.models import ConvNeXt_Tiny_Weights

            enum = ConvNeXt_Tiny_Weights.IMAGENET1K_V1
            model = convnext_tiny(weights=enum)
            transform = enum.transforms()
        else:
            model = convnext_tiny()
        stage_modules = {
            "stage0": model.features[1],
            "stage1": model.features[2],
            "stage2": model.features[3],
            "stage3": model.features[4],
        }
        head = model.classifier[2]

    if spec.weights not in ("pretrained", "random"):
        state = torch.load(spec.weights, map_location="cpu", weights_only=True)
        model.load_state_dict(state)

    model.eval()
    return model, transform, stage_modules, head


def _collect_images(image_dirs: tuple[str, ...]) -> list[tuple[str, Path]]:
    """(manifest name, path) pairs in deterministic sorted order."""
    entries: list[tuple[str, Path]] = []
    for index, folder in enumerate(image_dirs):
        root = Path(folder)
        if not root.is_dir():
            raise FileNotFoundError(f"no such image directory: {root}")
        prefix = f"{index}:" if len(image_dirs) > 1 else ""
        for path in sorted(root.iterdir()):
            if path.is_file() and path.suffix.lower() in _IMAGE_SUFFIXES:
                entries.append((prefix + path.name, path))
    if not entries:
        raise ValueError(f"no images found under {list(image_dirs)}")
    return entries


def export_features(spec: ExportSpec) -> Path:
    """Run the backbone over the images and write the dataset directory.

    Undecodable images are skipped and listed in the manifest; the row
    count of features.npy equals the number of successfully processed
    images.
    """
    model, transform, stage_modules, head = _build_model(spec)

    captured: dict[str, torch.Tensor] = {}
    if spec.stage == "final_gap":
        hooked = head
        def hook(_module, inputs, _output):
            captured["value"] = inputs[0].detach()
    else:
        hooked = stage_modules[spec.stage]
        def hook(_module, _inputs, output):
            captured["value"] = output.detach()
    handle = hooked.register_forward_hook(hook)

    names: list[str] = []
    tensors: list[torch.Tensor] = []
    skipped: dict[str, str] = {}
    for name, path in _collect_images(spec.image_dirs):
        try:
            with Image.open(path) as img:
                tensors.append(transform(img.convert("RGB")))
            names.append(name)
        except Exception as exc:  # decode/transform failure: note and move on
            skipped[name] = f"{type(exc).__name__}: {exc}"
    if not names:
        raise ValueError("every image failed to decode")

    feature_blocks: list[np.ndarray] = []
    logit_blocks: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(tensors), spec.batch_size):
            batch = torch.stack(tensors[start : start + spec.batch_size])
            logits = model(batch)
            value = captured.pop("value")
            if value.ndim == 4:  # conv stage: pool spatial dims to a vector
                value = value.mean(dim=(2, 3))
            feature_blocks.append(value.numpy().astype(np.float32))
            logit_blocks.append(logits.numpy().astype(np.float32))
    handle.remove()

    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    features = np.concatenate(feature_blocks)
    np.save(out / "features.npy", features)
    if spec.stage == "final_gap":
        np.save(out / "logits.npy", np.concatenate(logit_blocks))
        np.save(out / "head_w.npy", head.weight.detach().numpy().astype(np.float32))
        np.save(out / "head_b.npy", head.bias.detach().numpy().astype(np.float32))

    manifest = {
        "schema_version": 1,
        "backbone": spec.backbone,
        "stage": spec.stage,
        "weights": spec.weights,
        "seed": spec.seed,
        "n_rows": int(features.shape[0]),
        "feature_dim": int(features.shape[1]),
        "images": {name: i for i, name in enumerate(names)},
        "skipped": skipped,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out
