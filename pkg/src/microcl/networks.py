"""Network layouts: the five-stage CNN extractor, projection head, classifier."""

from __future__ import annotations

from typing import List

from .autodiff import LayerSpec

STAGES = ("stage1", "stage2", "stage3", "stage4", "stage5")

# Named probe layers of the full-size backbone mirrored by the five stages.
REFERENCE_LAYERS = dict(zip(STAGES, ("conv1", "dense1c", "dense2d", "dense3f", "dense4c")))


def stage_tap(stage: str) -> str:
    """Layer whose output is the feature map of ``stage``."""
    return f"{stage}_relu"


def build_extractor(in_channels: int = 3, base_channels: int = 16, z_dim: int = 128) -> List[LayerSpec]:
    """conv+bn+relu+maxpool for stages 1-4 (channels doubling), conv+bn+relu+GAP for stage 5."""
    net = []
    c_in, c_out = in_channels, base_channels
    for i, stage in enumerate(STAGES):
        if i == len(STAGES) - 1:
            c_out = z_dim
        net.append(LayerSpec("conv2d", stage, in_channels=c_in, out_channels=c_out, kernel=3))
        net.append(LayerSpec("batchnorm", f"{stage}_bn", in_channels=c_out))
        net.append(LayerSpec("relu", stage_tap(stage)))
        if i < len(STAGES) - 1:
            net.append(LayerSpec("maxpool2d", f"{stage}_pool", kernel=2))
        c_in, c_out = c_out, c_out * 2
    net.append(LayerSpec("avgpool-global", "gap"))
    return net


def build_head(z_dim: int = 128, hidden: int = 64, v_dim: int = 32, k_percent: float = 20.0) -> List[LayerSpec]:
    return [
        LayerSpec("dense", "head1", in_channels=z_dim, units=hidden),
        LayerSpec("batchnorm", "head_bn", in_channels=hidden),
        LayerSpec("ksparse", "head_sparse", k_percent=k_percent),
        LayerSpec("dense", "head2", in_channels=hidden, units=v_dim),
    ]


def build_classifier(z_dim: int = 128, hidden: int = 64, n_classes: int = 4) -> List[LayerSpec]:
    return [
        LayerSpec("dense", "cls1", in_channels=z_dim, units=hidden),
        LayerSpec("relu", "cls_relu"),
        LayerSpec("dense", "cls2", in_channels=hidden, units=n_classes),
    ]
