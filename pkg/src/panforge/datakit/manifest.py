"""On-disk paired datasets described by a manifest file.

The manifest is plain text: one header line ``# task=<t> seed=<n> params=<json>``
then one ``id<TAB>input_path<TAB>target_path`` line per pair. Paths are
relative to the manifest's directory. Ids start with ``train-`` or
``test-``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from panforge.datakit.imageio import load_image, save_image
from panforge.datakit.synth import TASKS, generate
from panforge.errors import ConfigError

MANIFEST_NAME = "manifest.tsv"
SPLITS = ("train", "test")


@dataclass
class ManifestEntry:
    id: str
    input: str
    target: str

    @property
    def split(self):
        return self.id.split("-", 1)[0]


@dataclass
class DatasetManifest:
    root: str
    task: str
    seed: int
    params: dict = field(default_factory=dict)
    entries: list = field(default_factory=list)

    @property
    def path(self):
        return os.path.join(self.root, MANIFEST_NAME)

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def load_split(self, name):
        """(inputs, targets, ids) with images stacked as (n, 3, H, W) float32."""
        entries = self.split(name)
        if not entries:
            raise ConfigError(f"manifest {self.path} has no {name!r} pairs", field="data")
        xs = np.stack([load_image(os.path.join(self.root, e.input)) for e in entries])
        ys = np.stack([load_image(os.path.join(self.root, e.target)) for e in entries])
        return xs, ys, [e.id for e in entries]


def sample_seed(seed, split, index):
    """Per-sample generator seed; the split tag keeps train and test streams apart."""
    ss = np.random.SeedSequence([int(seed), SPLITS.index(split), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def build_manifest(task, n_train, n_test, seed, out_dir, size=(64, 64), **params) -> DatasetManifest:
    """Generate ``n_train + n_test`` pairs as PNG files plus the manifest."""
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}", field="task")
    if n_train < 1 or n_test < 1:
        raise ConfigError(f"need at least one train and one test pair, got {n_train}/{n_test}",
                          field="n_train" if n_train < 1 else "n_test")
    if not out_dir:
        raise ConfigError("an output directory is required", field="out_dir")
    try:
        for split in SPLITS:
            os.makedirs(os.path.join(out_dir, split), exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create {out_dir}: {exc.strerror}", field="out_dir") from exc
    size = tuple(int(v) for v in size)
    man = DatasetManifest(out_dir, task, int(seed), dict(params, size=list(size)))
    for split, count in zip(SPLITS, (n_train, n_test)):
        for i in range(count):
            sample = generate(task, sample_seed(seed, split, i), size, **params)
            sid = f"{split}-{i:04d}"
            entry = ManifestEntry(sid, f"{split}/{sid}_in.png", f"{split}/{sid}_gt.png")
            save_image(sample.input, os.path.join(out_dir, entry.input))
            save_image(sample.target, os.path.join(out_dir, entry.target))
            man.entries.append(entry)
    write_manifest(man)
    return man


def write_manifest(man: DatasetManifest):
    lines = [f"# task={man.task} seed={man.seed} params={json.dumps(man.params, sort_keys=True)}"]
    lines += [f"{e.id}\t{e.input}\t{e.target}" for e in man.entries]
    tmp = man.path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, man.path)


def load_manifest(path) -> DatasetManifest:
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc.strerror}", field="data") from exc
    if not lines or not lines[0].startswith("# "):
        raise ConfigError(f"{path}: missing manifest header line", field="data")
    head = lines[0][2:]
    try:
        pre, params = head.split(" params=", 1)
        kv = dict(tok.split("=", 1) for tok in pre.split())
        man = DatasetManifest(os.path.dirname(os.path.abspath(path)), kv["task"], int(kv["seed"]),
                              json.loads(params))
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: malformed manifest header {lines[0]!r}", field="data") from exc
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ConfigError(f"{path}:{n}: expected id, input and target separated by tabs", field="data")
        man.entries.append(ManifestEntry(*parts))
    return man
