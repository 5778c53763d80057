"""Synthetic domain-shift tasks and the on-disk dataset bundle.

A bundle is a directory holding ``meta.json`` and ``source.csv``,
``target.csv``, ``test.csv``. CSVs have float columns ``x0..x{d-1}`` and an
integer ``label`` column. Target labels are stored for evaluation only.
"""
from __future__ import annotations

import csv
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.datasets import make_blobs, make_circles, make_moons

from imed.errors import ConfigError

GENERATORS = ("moons", "blobs", "rings")
MOONS_CENTER = (0.5, 0.25)
SPLITS = ("source", "target", "test")


@dataclass
class DomainData:
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray  # evaluation only
    test_x: np.ndarray
    test_y: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def d_in(self) -> int:
        return self.source_x.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.meta.get("num_classes", int(self.source_y.max()) + 1))

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return getattr(self, f"{name}_x"), getattr(self, f"{name}_y")


def rotate(x: np.ndarray, degrees: float, center=(0.0, 0.0)) -> np.ndarray:
    theta = np.deg2rad(degrees)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    c = np.asarray(center)
    return (x - c) @ rot.T + c


def _moons(n: int, seed: int, shift: float, noise: float):
    xs, ys = make_moons(n, noise=noise, random_state=seed)
    xt, yt = make_moons(n, noise=noise, random_state=seed + 1)
    xe, ye = make_moons(n, noise=noise, random_state=seed + 2)
    return xs, ys, rotate(xt, shift, MOONS_CENTER), yt, rotate(xe, shift, MOONS_CENTER), ye


BLOB_CENTERS = np.array([[0.0, 2.0], [2.0, 0.0], [0.0, -2.0], [-2.0, 0.0]])


def _blobs(n: int, seed: int, shift: float, noise: float):
    std = 0.6 + noise
    # target: centers translated along (1, 0.5) and spread inflated
    direction = np.array([1.0, 0.5]) / np.linalg.norm([1.0, 0.5])
    shifted = BLOB_CENTERS + shift * direction
    t_std = std * (1 + 0.25 * shift)
    xs, ys = make_blobs(n, centers=BLOB_CENTERS, cluster_std=std, random_state=seed)
    xt, yt = make_blobs(n, centers=shifted, cluster_std=t_std, random_state=seed + 1)
    xe, ye = make_blobs(n, centers=shifted, cluster_std=t_std, random_state=seed + 2)
    return xs, ys, xt, yt, xe, ye


def _rings(n: int, seed: int, shift: float, noise: float):
    xs, ys = make_circles(n, noise=noise, factor=0.5, random_state=seed)
    xt, yt = make_circles(n, noise=noise, factor=0.5, random_state=seed + 1)
    xe, ye = make_circles(n, noise=noise, factor=0.5, random_state=seed + 2)
    return xs, ys, xt * (1 + shift), yt, xe * (1 + shift), ye


_DEFAULT_NOISE = {"moons": 0.1, "blobs": 0.0, "rings": 0.05}
_DEFAULT_SHIFT = {"moons": 30.0, "blobs": 1.5, "rings": 0.3}


def generate(kind: str, shift: float | None = None, n: int = 1000, seed: int = 0, noise: float | None = None) -> DomainData:
    """Build a synthetic UDA task.

    ``moons``: target rotated by ``shift`` degrees about (0.5, 0.25).
    ``blobs``: four Gaussian classes, target means translated by ``shift`` and
    spread scaled by ``1 + shift/4``. ``rings``: concentric circles, target
    radius scaled by ``1 + shift``.
    """
    if kind not in GENERATORS:
        raise ConfigError(f"unknown generator {kind!r}; choose from {GENERATORS}")
    if n <= 0:
        raise ConfigError("n must be positive")
    shift = _DEFAULT_SHIFT[kind] if shift is None else float(shift)
    noise = _DEFAULT_NOISE[kind] if noise is None else float(noise)
    make = {"moons": _moons, "blobs": _blobs, "rings": _rings}[kind]
    xs, ys, xt, yt, xe, ye = make(n, seed, shift, noise)
    meta = {
        "generator": kind,
        "shift": shift,
        "noise": noise,
        "seed": seed,
        "n": n,
        "d_in": int(xs.shape[1]),
        "num_classes": int(ys.max()) + 1,
    }
    return DomainData(xs, ys.astype(np.int64), xt, yt.astype(np.int64), xe, ye.astype(np.int64), meta)


def _write_csv(path: Path, x: np.ndarray, y: np.ndarray):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(x.shape[1])] + ["label"])
        for row, label in zip(x, y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def _read_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-1] != "label":
        raise ConfigError(f"{path}: last column must be 'label'")
    x = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64).reshape(len(body), len(header) - 1)
    y = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return x, y


def prepare_output_dir(out: Path, force: bool):
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} exists and is not empty (use --force to overwrite)")


def atomic_write_dir(out: Path, write) -> Path:
    """Populate a sibling temp dir via ``write(tmp)`` then swap it into place."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        write(tmp)
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


def save_bundle(data: DomainData, out: Path, force: bool = False) -> Path:
    prepare_output_dir(out, force)

    def write(tmp: Path):
        for name in SPLITS:
            _write_csv(tmp / f"{name}.csv", *data.split(name))
        (tmp / "meta.json").write_text(json.dumps(data.meta, indent=2, sort_keys=True) + "\n")

    return atomic_write_dir(out, write)


def load_bundle(path: Path) -> DomainData:
    path = Path(path)
    missing = [f for f in ["meta.json", *(f"{s}.csv" for s in SPLITS)] if not (path / f).exists()]
    if missing:
        raise ConfigError(f"dataset bundle {path} is missing {missing}")
    meta = json.loads((path / "meta.json").read_text())
    arrays = {}
    for s in SPLITS:
        arrays[f"{s}_x"], arrays[f"{s}_y"] = _read_csv(path / f"{s}.csv")
    dims = {arrays[f"{s}_x"].shape[1] for s in SPLITS}
    if len(dims) != 1:
        raise ConfigError(f"splits of {path} have different feature counts {sorted(dims)}")
    return DomainData(meta=meta, **arrays)


def load_dataset(spec: dict) -> DomainData:
    """Resolve a config ``dataset`` entry: ``{"path": ...}`` or generator kwargs."""
    if "path" in spec:
        return load_bundle(Path(spec["path"]))
    kwargs = {k: spec[k] for k in ("shift", "n", "seed", "noise") if k in spec}
    return generate(spec.get("kind", "moons"), **kwargs)


class BatchStream:
    """Endless seed-deterministic mini-batches from one domain (reshuffled per pass)."""

    def __init__(self, x: np.ndarray, y: np.ndarray | None, batch_size: int, seed: int, dtype=torch.float32):
        self.x = torch.as_tensor(x, dtype=dtype)
        self.y = None if y is None else torch.as_tensor(y, dtype=torch.long)
        self.batch_size = min(batch_size, self.x.shape[0])
        self.gen = torch.Generator().manual_seed(seed)
        self._order = torch.empty(0, dtype=torch.long)
        self._pos = 0

    def next(self) -> tuple[torch.Tensor, torch.Tensor | None]:
        if self._pos + self.batch_size > self._order.numel():
            self._order = torch.randperm(self.x.shape[0], generator=self.gen)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.x[idx], None if self.y is None else self.y[idx]


def two_sample_mmd(x: np.ndarray, y: np.ndarray, bandwidth: float = 1.0) -> float:
    """Biased Gaussian-kernel squared MMD between two samples (numpy)."""
    def k(a, b):
        d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        return np.exp(-d / (2 * bandwidth**2))

    return float(k(x, x).mean() + k(y, y).mean() - 2 * k(x, y).mean())
