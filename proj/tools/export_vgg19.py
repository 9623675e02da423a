"""Writes ImageNet VGG-19 conv weights in the layout `swaptext train` expects.

    python3 tools/export_vgg19.py vgg19.pth

Needs torch and torchvision; downloads the torchvision weights on first use.
Only the `features.N.weight` / `features.N.bias` entries are kept.
"""
import argparse

import torch
from torchvision.models import VGG19_Weights, vgg19


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", help="output .pth file")
    args = parser.parse_args()
    model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
    state = {k: v.detach().clone() for k, v in model.state_dict().items() if k.startswith("features.")}
    torch.save(state, args.out)
    print(f"wrote {len(state)} tensors to {args.out}")


if __name__ == "__main__":
    main()
