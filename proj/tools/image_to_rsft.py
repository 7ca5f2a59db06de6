#!/usr/bin/env python3
# Copyright 2026 The RepSF Authors. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.


"""Convert an image file to an RSFT float32 tensor of shape (1, 3, H, W).

Pixels are scaled to [0, 1]. The image is zero-padded on the right and
bottom (or cropped with --crop) to a multiple of --multiple.
"""

import argparse
import struct
import sys

import numpy as np
from PIL import Image

MAGIC = b"RSFT"
VERSION = 1
DTYPE_F32 = 1


def encode_rsft(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + bytes([VERSION, DTYPE_F32, array.ndim, 0])
    header += struct.pack("<%dQ" % array.ndim, *array.shape)
    return header + array.tobytes()


def fit(pixels: np.ndarray, multiple: int, crop: bool) -> np.ndarray:
    h, w = pixels.shape[:2]
    if crop:
        return pixels[: h - h % multiple, : w - w % multiple]
    ph, pw = -h % multiple, -w % multiple
    return np.pad(pixels, ((0, ph), (0, pw), (0, 0)))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("image")
    parser.add_argument("out")
    parser.add_argument("--multiple", type=int, default=32)
    parser.add_argument("--crop", action="store_true", help="crop instead of padding")
    args = parser.parse_args(argv)

    pixels = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
    pixels = fit(pixels, args.multiple, args.crop)
    if pixels.shape[0] == 0 or pixels.shape[1] == 0:
        print("error: image smaller than --multiple", file=sys.stderr)
        return 1
    tensor = pixels.transpose(2, 0, 1)[np.newaxis]
    with open(args.out, "wb") as f:
        f.write(encode_rsft(tensor))
    print("wrote %s: %dx%d (W x H)" % (args.out, tensor.shape[3], tensor.shape[2]))
    return 0


if __name__ == "__main__":
    sys.exit(main())
