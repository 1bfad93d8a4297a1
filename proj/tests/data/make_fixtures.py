"""Regenerates the tiny SVHN-format fixtures used by test_formats."""
import numpy as np
from scipy.io import savemat

n = 4
r, c, ch, k = np.meshgrid(np.arange(32), np.arange(32), np.arange(3), np.arange(n), indexing="ij")
X = ((r * 7 + c * 3 + ch * 50 + k * 11) % 256).astype(np.uint8)
y = np.array([[10], [1], [2], [9]], dtype=np.float64)
savemat("svhn_tiny_plain.mat", {"X": X, "y": y}, do_compression=False)
savemat("svhn_tiny_compressed.mat", {"X": X, "y": y}, do_compression=True)
