"""Train the bundled toy LeNet-5 and write the committed fixtures.

Outputs (under assets/):
  data/digits16-{train,test}-{images,labels}.idx   IDX containers, 16x16 u8 images
  models/toy_lenet.lsnm                             model in LSNM v1 format
  models/toy_lenet.fixture                          32 reference logits (LSFX v1)

The digits come from scikit-learn's bundled 8x8 handwritten digits, upscaled
bilinearly to 16x16 and quantised to u8. Run from the workspace root.
"""

import struct
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.datasets import load_digits

SEED = 20240517
TEST_COUNT = 500
FIXTURE_COUNT = 32
MIN_ACCURACY = 0.97

ROOT = Path(__file__).resolve().parent.parent / "assets"


def write_idx_images(path, images):
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


class LeNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 6, 5)
        self.conv2 = nn.Conv2d(6, 16, 3)
        self.fc1 = nn.Linear(64, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, 10)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2, 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2, 2)
        x = torch.flatten(x, 1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.fc3(x)


def layer_record(kind, params, blob):
    out = struct.pack("<B", kind)
    out += struct.pack("<I", len(params)) + struct.pack(f"<{len(params)}I", *params)
    data = np.ascontiguousarray(blob, dtype="<f4").tobytes()
    out += struct.pack("<Q", len(data)) + data
    return out


def export_lsnm(model, path):
    t = lambda p: p.detach().numpy().astype(np.float32).ravel()
    recs = [
        layer_record(1, [1, 16, 16, 6, 5, 5, 1, 0], np.concatenate([t(model.conv1.weight), t(model.conv1.bias)])),
        layer_record(3, [6, 12, 12], []),
        layer_record(4, [6, 12, 12, 2, 2], []),
        layer_record(1, [6, 6, 6, 16, 3, 3, 1, 0], np.concatenate([t(model.conv2.weight), t(model.conv2.bias)])),
        layer_record(3, [16, 4, 4], []),
        layer_record(4, [16, 4, 4, 2, 2], []),
        layer_record(6, [16, 2, 2], []),
        layer_record(2, [64, 120], np.concatenate([t(model.fc1.weight), t(model.fc1.bias)])),
        layer_record(3, [120], []),
        layer_record(2, [120, 84], np.concatenate([t(model.fc2.weight), t(model.fc2.bias)])),
        layer_record(3, [84], []),
        layer_record(2, [84, 10], np.concatenate([t(model.fc3.weight), t(model.fc3.bias)])),
    ]
    with open(path, "wb") as f:
        f.write(b"LSNM" + struct.pack("<HH", 1, len(recs)))
        for r in recs:
            f.write(r)


def export_fixture(model, images, labels, path):
    with torch.no_grad():
        logits = model(torch.from_numpy(images)).numpy().astype(np.float32)
    n = len(labels)
    with open(path, "wb") as f:
        f.write(b"LSFX" + struct.pack("<HIII", 1, n, 256, 10))
        for i in range(n):
            f.write(struct.pack("<I", int(labels[i])))
            f.write(images[i].astype("<f4").tobytes())
            f.write(logits[i].astype("<f4").tobytes())


def main():
    torch.manual_seed(SEED)
    rng = np.random.default_rng(SEED)
    digits = load_digits()
    small = torch.from_numpy(digits.images.astype(np.float32) / 16.0).unsqueeze(1)
    big = F.interpolate(small, size=(16, 16), mode="bilinear", align_corners=False)
    pixels = np.clip(np.rint(big.squeeze(1).numpy() * 255.0), 0, 255).astype(np.uint8)
    labels = digits.target.astype(np.int64)

    order = rng.permutation(len(labels))
    test_idx, train_idx = order[:TEST_COUNT], order[TEST_COUNT:]
    (ROOT / "data").mkdir(parents=True, exist_ok=True)
    (ROOT / "models").mkdir(parents=True, exist_ok=True)
    write_idx_images(ROOT / "data/digits16-train-images.idx", pixels[train_idx])
    write_idx_labels(ROOT / "data/digits16-train-labels.idx", labels[train_idx])
    write_idx_images(ROOT / "data/digits16-test-images.idx", pixels[test_idx])
    write_idx_labels(ROOT / "data/digits16-test-labels.idx", labels[test_idx])

    x = (pixels.astype(np.float32) / 255.0)[:, None, :, :]
    xtr, ytr = torch.from_numpy(x[train_idx]), torch.from_numpy(labels[train_idx])
    xte, yte = torch.from_numpy(x[test_idx]), torch.from_numpy(labels[test_idx])

    model = LeNet()
    opt = torch.optim.Adam(model.parameters(), lr=2e-3)
    for epoch in range(60):
        model.train()
        perm = torch.randperm(len(ytr))
        for i in range(0, len(ytr), 32):
            b = perm[i : i + 32]
            opt.zero_grad()
            loss = F.cross_entropy(model(xtr[b]), ytr[b])
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        acc = (model(xte).argmax(1) == yte).float().mean().item()
    print(f"test accuracy {acc:.4f}")
    if acc < MIN_ACCURACY:
        sys.exit("accuracy below threshold, refusing to export")
    export_lsnm(model, ROOT / "models/toy_lenet.lsnm")
    pick = rng.choice(len(test_idx), FIXTURE_COUNT, replace=False)
    export_fixture(model, x[test_idx][pick], labels[test_idx][pick], ROOT / "models/toy_lenet.fixture")


if __name__ == "__main__":
    main()
