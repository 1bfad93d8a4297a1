#!/usr/bin/env python3
"""Convert torchvision AlexNet weights into the PCPTWTS1 container read by load_extractor.

Only the first two convolutions are kept (features.0 -> conv1, features.3 -> conv2).

    python3 tools/convert_alexnet.py alexnet-owt-7be5be79.pth alexnet_prefix.wts
    python3 tools/convert_alexnet.py --download alexnet_prefix.wts
"""

import argparse
import struct
import sys

import numpy as np

MAGIC = b"PCPTWTS1"
KEEP = {
    "features.0.weight": ("conv1.weight", (64, 3, 11, 11)),
    "features.0.bias": ("conv1.bias", (64,)),
    "features.3.weight": ("conv2.weight", (192, 64, 5, 5)),
    "features.3.bias": ("conv2.bias", (192,)),
}


def load_state_dict(args):
    import torch

    if args.download:
        from torchvision.models import AlexNet_Weights, alexnet

        return alexnet(weights=AlexNet_Weights.IMAGENET1K_V1).state_dict()
    state = torch.load(args.source, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    return state


def write_container(path, entries):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, array in entries:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", 1, array.ndim))
            f.write(struct.pack("<%dQ" % array.ndim, *array.shape))
            f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("source", nargs="?", help="torchvision AlexNet state dict (.pth)")
    ap.add_argument("output", help="destination weights file")
    ap.add_argument("--download", action="store_true", help="fetch the ImageNet weights through torchvision")
    args = ap.parse_args()
    if not args.download and not args.source:
        ap.error("give a .pth file or --download")

    state = load_state_dict(args)
    entries = []
    for key, (name, shape) in KEEP.items():
        if key not in state:
            sys.exit("missing %s in %s" % (key, args.source))
        array = state[key].detach().cpu().numpy().astype(np.float32)
        if array.shape != shape:
            sys.exit("%s has shape %s, expected %s" % (key, array.shape, shape))
        entries.append((name, array))
    write_container(args.output, entries)
    print("wrote %s (%d tensors)" % (args.output, len(entries)))


if __name__ == "__main__":
    main()
