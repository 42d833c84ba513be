"""Synthetic-data experiment driver: data, classifier, attacks, purification, reports.

Every stage writes plain files under one output directory:

    out/
      prior.json                 mixture used as image prior and data source
      data/<split>/manifest.json NAPT images with labels
      classifier.json
      attacks/<attack>/manifest.json
      purified/<defense>/<attack|clean>/manifest.json
      report.json, report.csv    accuracy table
      timing.json                wall-clock per stage (kept out of the report)

Images are stored as 32-bit floats; stages hand each other the stored
values so that running the stages one by one reproduces ``run`` exactly.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from nappure import _kernels
from nappure import transforms as T
from nappure.attack import AttackConfig, SoftmaxClassifier, evaluate, pgd_attack, train_classifier
from nappure.prior import GmmPrior
from nappure.purifier import PurifyConfig, lm_purify, nappure_purify
from nappure.tensor import derive_rng, export_ppm, image_strip, make_rng, read_tensor, write_tensor

log = logging.getLogger(__name__)

DEFENSES = ("none", "lm", "nappure", "nappure-joint")
SPLIT_SALT = {"eval": 0, "val": 1 << 40, "train": 2 << 40}


class StageError(RuntimeError):
    def __init__(self, stage: str, config_hash: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed (config {config_hash[:12]}): {cause}")
        self.stage = stage
        self.config_hash = config_hash


# configuration ----------------------------------------------------------------


def default_config() -> dict:
    """Desk benchmark: three classes of 1x8x8 images."""
    joint_children = [
        {"kind": "conv", "kernel_size": 3},
        {"kind": "patch", "tau": 0.5},
        {"kind": "flow"},
        {"kind": "additive"},
    ]
    return {
        "seed": 1,
        "shape": [1, 8, 8],
        "prior": {"classes": 3, "s_data": 0.05, "mean_seed": 0, "min_distance": 2.0, "smoothness": 0.5},
        "data": {"train": 768, "eval": 256, "val": 256},
        "classifier": {"epochs": 300, "lr": 0.5, "init_scale": 6.0, "bias_scale": 200.0},
        "attacks": {
            "conv": {"spec": {"kind": "conv", "kernel_size": 3}, "box": {"kind": "linf", "radius": 0.025}},
            "patch": {"spec": {"kind": "patch"}, "box": {"kind": "patch", "a": 2, "b": 2, "s": 3}},
            "flow": {
                "spec": {"kind": "flow", "smooth_kernel": 3, "smooth_std": 1.0},
                "box": {"kind": "linf", "radius": 1.0},
            },
            "additive": {"spec": {"kind": "additive"}, "box": {"kind": "linf", "radius": 24 / 255}},
        },
        # all four families at reduced magnitude, applied in sequence
        "composite_attack": {
            "spec": {"kind": "composite", "children": [
                {"kind": "conv", "kernel_size": 3},
                {"kind": "patch"},
                {"kind": "flow", "smooth_kernel": 3, "smooth_std": 1.0},
                {"kind": "additive"},
            ]},
            "box": {"kind": "composite", "weight": 1.0, "children": [
                {"kind": "linf", "radius": 0.0125},
                {"kind": "patch", "a": 3, "b": 3, "s": 2},
                {"kind": "linf", "radius": 0.5},
                {"kind": "linf", "radius": 12 / 255},
            ]},
        },
        "defenses": list(DEFENSES),
        "defense_specs": {
            "conv": {"kind": "conv", "kernel_size": 3},
            "patch": {"kind": "patch", "tau": 0.5},
            "flow": {"kind": "flow"},
            "additive": {"kind": "additive"},
        },
        "joint_spec": {"kind": "composite", "children": joint_children},
        "purify": PurifyConfig().to_dict(),
        "purify_overrides": {
            "conv": {"lambda1": 0.01, "lambda2": 5.0},
            "patch": {"lambda1": 0.01, "lambda2": 5.0},
            "flow": {"lambda1": 0.01, "lambda2": 5.0},
            "additive": {"lambda1": 0.01, "lambda2": 5.0},
            # picked by a validation-split grid under the composite attack
            "joint": {"lambda1": 0.01, "lambda2": 10.0},
        },
        "export_ppm": False,
    }


def full32_config() -> dict:
    """Full-size attack geometries on 3x32x32 images (slow; not part of the tests)."""
    cfg = default_config()
    cfg["shape"] = [3, 32, 32]
    cfg["prior"]["min_distance"] = 8.0
    cfg["prior"]["smoothness"] = 1.0
    cfg["attacks"]["conv"]["spec"]["kernel_size"] = 5
    cfg["attacks"]["patch"]["box"] = {"kind": "patch", "a": 12, "b": 12, "s": 7}
    cfg["attacks"]["flow"] = {
        "spec": {"kind": "flow", "smooth_kernel": 9, "smooth_std": 1.5},
        "box": {"kind": "linf", "radius": 1.2},
    }
    cfg["defense_specs"]["conv"]["kernel_size"] = 5
    cfg["joint_spec"]["children"][0]["kernel_size"] = 5
    return cfg


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("spec", "box"):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None = None, **overrides) -> dict:
    cfg = default_config()
    if path is not None:
        cfg = merge(cfg, json.loads(Path(path).read_text()))
    return merge(cfg, overrides)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def stored(x: np.ndarray) -> np.ndarray:
    """Values as they come back from a NAPT file."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


# prior and data ---------------------------------------------------------------


def desk_means(k: int, shape, seed: int = 0, min_distance: float = 2.0, smoothness: float = 0.5,
               contrast: float = 0.25, level: float = 0.5, brightness: float = 0.0, max_tries: int = 1000) -> np.ndarray:
    """Smooth random class templates in [0, 1] with pairwise l2 distance >= ``min_distance``.

    Each template is ``base + contrast * z`` with ``z`` standardised smoothed
    noise and ``base`` drawn from ``level +- brightness``.
    """
    rng = make_rng(seed)
    shape = tuple(shape)
    kern = T.gaussian_kernel(5, smoothness)
    for _ in range(max_tries):
        z = rng.standard_normal((k,) + shape)
        z = _kernels.correlate(z, np.broadcast_to(kern, (k,) + kern.shape))
        z = (z - z.mean(axis=(1, 2, 3), keepdims=True)) / z.std(axis=(1, 2, 3), keepdims=True)
        base = level + brightness * rng.uniform(-1.0, 1.0, size=(k, 1, 1, 1))
        m = np.clip(base + contrast * z, 0.0, 1.0)
        flat = m.reshape(k, -1)
        d = np.sqrt(((flat[:, None] - flat[None]) ** 2).sum(axis=2))
        if k < 2 or d[np.triu_indices(k, 1)].min() >= min_distance:
            return m
    raise RuntimeError(f"no means with pairwise distance >= {min_distance} after {max_tries} tries")


def build_prior(cfg: dict) -> GmmPrior:
    p = cfg["prior"]
    if "means" in p:
        return GmmPrior.from_dict(p, base_dir=p.get("base_dir"))
    means = desk_means(p["classes"], cfg["shape"], p["mean_seed"], p["min_distance"], p["smoothness"],
                       p.get("contrast", 0.25), p.get("level", 0.5), p.get("brightness", 0.0))
    k = p["classes"]
    return GmmPrior(np.full(k, 1.0 / k), means.reshape(k, -1), p["s_data"])


@dataclass
class DatasetManifest:
    root: Path
    shape: tuple
    classes: int
    entries: list = field(default_factory=list)  # dicts: file, label, split
    seed: int | None = None
    prior: str | None = None

    def to_dict(self) -> dict:
        d = {"shape": list(self.shape), "classes": self.classes, "entries": self.entries}
        if self.seed is not None:
            d["seed"] = self.seed
        if self.prior is not None:
            d["prior"] = self.prior
        return d

    def save(self) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        d = json.loads(path.read_text())
        m = cls(path.parent, tuple(d["shape"]), int(d["classes"]), d["entries"], d.get("seed"), d.get("prior"))
        m.validate()
        return m

    def validate(self) -> None:
        for e in self.entries:
            if not 0 <= e["label"] < self.classes:
                raise ValueError(f"label {e['label']} out of range for {self.classes} classes")
            if not (self.root / e["file"]).exists():
                raise FileNotFoundError(self.root / e["file"])

    def images(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0,) + tuple(self.shape))
        return np.stack([read_tensor(self.root / e["file"]) for e in self.entries])

    def labels(self) -> np.ndarray:
        return np.array([e["label"] for e in self.entries], dtype=np.int64)

    def indices(self) -> list[int]:
        return [int(e.get("index", i)) for i, e in enumerate(self.entries)]


def write_images(root: Path, images, labels, split: str, shape, classes: int, seed=None, prior=None,
                 indices=None) -> DatasetManifest:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    indices = range(len(labels)) if indices is None else indices
    for idx, x, y in zip(indices, images, labels):
        name = f"{split}_{int(idx):05d}.napt"
        write_tensor(root / name, x)
        entries.append({"file": name, "label": int(y), "split": split, "index": int(idx)})
    m = DatasetManifest(root, tuple(shape), classes, entries, seed, prior)
    m.save()
    return m


def sample_split(prior: GmmPrior, n: int, shape, seed: int, split: str = "eval"):
    """Balanced labels ``i mod K``; image i drawn from its own derived stream."""
    k = prior.n_components
    labels = np.arange(n) % k
    base = (int(seed) + SPLIT_SALT.get(split, 3 << 40)) & ((1 << 64) - 1)
    images = np.empty((n,) + tuple(shape))
    for i, y in enumerate(labels):
        rng = derive_rng(base, i)
        images[i] = (prior.means[y] + prior.s_data * rng.standard_normal(prior.dim)).reshape(shape)
    return stored(np.clip(images, 0.0, 1.0)), labels


def gen_dataset(prior: GmmPrior, per_class: int, shape, seed: int, out_dir, split: str = "eval",
                prior_ref: str | None = None) -> DatasetManifest:
    """Sample ``per_class`` images of every mixture component and write them."""
    if per_class <= 0:
        raise ValueError("per_class must be positive")
    if int(np.prod(shape)) != prior.dim:
        raise ValueError(f"shape {shape} does not match prior dimension {prior.dim}")
    images, labels = sample_split(prior, per_class * prior.n_components, shape, seed, split)
    return write_images(Path(out_dir), images, labels, split, shape, prior.n_components, seed, prior_ref)


# stages -----------------------------------------------------------------------


def attack_config(cfg: dict, name: str) -> AttackConfig:
    return AttackConfig.from_dict(cfg["attacks"][name])


def purify_config(cfg: dict, key: str | None, seed: int) -> PurifyConfig:
    base = dict(cfg["purify"])
    if key is not None:
        base.update(cfg.get("purify_overrides", {}).get(key, {}))
    base["seed"] = seed
    return PurifyConfig.from_dict(base)


def defend(defense: str, images, indices, attack: str | None, prior: GmmPrior, cfg: dict, seed: int,
           **cfg_overrides) -> np.ndarray:
    """Apply one defense mode to a batch of images."""
    if defense == "none":
        return np.array(images, dtype=np.float64)
    if defense == "lm":
        pcfg = replace(purify_config(cfg, None, seed), **cfg_overrides)
        return lm_purify(images, prior, pcfg, indices).x_star
    if defense == "nappure":
        if attack is None:
            raise ValueError("nappure needs the attack family to pick its transform")
        spec = T.TransformSpec.from_dict(cfg["defense_specs"][attack])
        pcfg = replace(purify_config(cfg, attack, seed), **cfg_overrides)
        return nappure_purify(images, spec, prior, pcfg, indices).x_star
    if defense == "nappure-joint":
        spec = T.TransformSpec.from_dict(cfg["joint_spec"])
        pcfg = replace(purify_config(cfg, "joint", seed), **cfg_overrides)
        return nappure_purify(images, spec, prior, pcfg, indices).x_star
    raise ValueError(f"unknown defense {defense!r}")


def run_attack(clf: SoftmaxClassifier, images, labels, acfg: AttackConfig) -> np.ndarray:
    _, x_adv = pgd_attack(images, labels, clf, acfg)
    return stored(x_adv)


@dataclass
class RunReport:
    rows: list
    clean_accuracy: float
    config: dict
    config_hash: str
    seed: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "clean_accuracy": self.clean_accuracy,
            "rows": self.rows,
            "extra": self.extra,
            "config": self.config,
        }

    def row(self, defense: str, attack: str) -> dict:
        for r in self.rows:
            if r["defense"] == defense and r["attack"] == attack:
                return r
        raise KeyError((defense, attack))

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        with open(out / "report.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["defense", "attack", "clean_acc", "robust_acc"])
            for r in self.rows:
                wr.writerow([r["defense"], r["attack"], repr(r["clean_acc"]), repr(r["robust_acc"])])


class _Timer:
    def __init__(self):
        self.times: dict[str, float] = {}

    def __call__(self, stage):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.times[stage] = timer.times.get(stage, 0.0) + time.perf_counter() - self.t0

        return _Ctx()


def _stage(name, h, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
        raise StageError(name, h, exc) from exc


def stage_gen(cfg: dict, out_dir):
    """Write ``prior.json`` and one manifest per data split; returns ``(prior, {split: (x, y)})``."""
    out = Path(out_dir)
    h = config_hash(cfg)
    seed = int(cfg["seed"])
    shape = tuple(cfg["shape"])
    prior = _stage("gen", h, build_prior, cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "prior.json").write_text(prior.to_json())
    data = {}
    for split, n in cfg["data"].items():
        if n <= 0:
            continue
        imgs, labs = _stage("gen", h, sample_split, prior, n, shape, seed, split)
        _stage("gen", h, write_images, out / "data" / split, imgs, labs, split, shape, prior.n_components,
               seed, "../../prior.json")
        data[split] = (imgs, labs)
    return prior, data


def load_prior(out_dir) -> GmmPrior:
    return GmmPrior.from_json((Path(out_dir) / "prior.json").read_text(), base_dir=out_dir)


def load_split(out_dir, split: str):
    m = DatasetManifest.load(Path(out_dir) / "data" / split)
    return m.images(), m.labels()


def load_classifier(out_dir) -> SoftmaxClassifier:
    return SoftmaxClassifier.from_dict(json.loads((Path(out_dir) / "classifier.json").read_text()))


def stage_train(cfg: dict, out_dir, data=None):
    """Train on the stored train split; writes ``classifier.json``."""
    out = Path(out_dir)
    h = config_hash(cfg)
    c = cfg["classifier"]
    if data is not None and "train" in data:
        xtr, ytr = data["train"]
    else:
        xtr, ytr = _stage("train", h, load_split, out, "train")
    k = cfg["prior"].get("classes") or int(ytr.max()) + 1
    clf, train_acc = _stage("train", h, train_classifier, xtr, ytr, c["epochs"], c["lr"], int(cfg["seed"]),
                            c["init_scale"], k, c.get("bias_scale", 0.0))
    (out / "classifier.json").write_text(json.dumps({**clf.to_dict(), "train_accuracy": train_acc}))
    return clf, train_acc


def prepare(cfg: dict, out_dir):
    """Prior, data splits and classifier; shared by the studies."""
    prior, data = stage_gen(cfg, out_dir)
    clf, train_acc = stage_train(cfg, out_dir, data)
    return prior, data, clf, train_acc


def _select(names, available, what):
    if names is None:
        return list(available)
    unknown = [n for n in names if n not in available]
    if unknown:
        raise ValueError(f"unknown {what} {unknown}; available: {list(available)}")
    return list(names)


def stage_attack(cfg: dict, out_dir, attacks=None):
    """Attack the stored eval split with each named attack; writes ``attacks/<name>/``."""
    out = Path(out_dir)
    h = config_hash(cfg)
    clf = _stage("attack", h, load_classifier, out)
    x, y = _stage("attack", h, load_split, out, "eval")
    written = {}
    for a in _stage("attack", h, _select, attacks, cfg["attacks"], "attacks"):
        acfg = _stage("attack", h, attack_config, cfg, a)
        x_adv = _stage("attack", h, run_attack, clf, x, y, acfg)
        written[a] = write_images(out / "attacks" / a, x_adv, y, "eval", cfg["shape"], clf.n_classes)
    return written


def _clean_tag(defense, attack):
    return f"clean-{attack}" if defense == "nappure" else "clean-all"


def stage_purify(cfg: dict, out_dir, defenses=None, attacks=None):
    """Run each defense on the clean eval split and on every stored attacked set."""
    out = Path(out_dir)
    h = config_hash(cfg)
    seed = int(cfg["seed"])
    prior = _stage("purify", h, load_prior, out)
    x, y = _stage("purify", h, load_split, out, "eval")
    idx = list(range(len(y)))
    k = prior.n_components
    defenses = _stage("purify", h, _select, defenses, cfg["defenses"], "defenses")
    attacks = _stage("purify", h, _select, attacks, cfg["attacks"], "attacks")
    for d in defenses:
        for tag in dict.fromkeys(_clean_tag(d, a) for a in attacks):
            a = tag[len("clean-"):] if d == "nappure" else None
            xp = stored(_stage("purify", h, defend, d, x, idx, a, prior, cfg, seed))
            write_images(out / "purified" / d / tag, xp, y, "eval", cfg["shape"], k)
        for a in attacks:
            m = _stage("purify", h, DatasetManifest.load, out / "attacks" / a)
            x_adv = m.images()
            xp = stored(_stage("purify", h, defend, d, x_adv, m.indices(), a, prior, cfg, seed))
            write_images(out / "purified" / d / a, xp, m.labels(), "eval", cfg["shape"], k)
            if cfg.get("export_ppm"):
                strip_dir = out / "ppm" / d / a
                strip_dir.mkdir(parents=True, exist_ok=True)
                for i in range(min(8, len(y))):
                    export_ppm(strip_dir / f"{i:03d}.ppm", image_strip([x[i], x_adv[i], xp[i]]))


def stage_eval(cfg: dict, out_dir) -> RunReport:
    """Accuracy table recomputed from the stored tensors; writes ``report.json`` and ``report.csv``."""
    out = Path(out_dir)
    h = config_hash(cfg)
    clf = _stage("eval", h, load_classifier, out)
    x, y = _stage("eval", h, load_split, out, "eval")
    extra = {"train_accuracy": json.loads((out / "classifier.json").read_text()).get("train_accuracy")}
    rows = []

    def acc(path):
        m = DatasetManifest.load(path)
        return evaluate(clf, m.images(), m.labels())

    for a in cfg["attacks"]:
        acfg = _stage("eval", h, attack_config, cfg, a)
        if acfg.spec.kind == "conv":
            ref = T.reference_params(acfg.spec, acfg.box, x)
            blurred = stored(np.clip(T.apply(acfg.spec, x, ref, hard=True), 0.0, 1.0))
            extra[f"reference_clean_accuracy/{a}"] = evaluate(clf, blurred, y)
        for d in cfg["defenses"]:
            if d == "none":
                clean, robust = evaluate(clf, x, y), _stage("eval", h, acc, out / "attacks" / a)
            else:
                clean = _stage("eval", h, acc, out / "purified" / d / _clean_tag(d, a))
                robust = _stage("eval", h, acc, out / "purified" / d / a)
            rows.append({"defense": d, "attack": a, "clean_acc": clean, "robust_acc": robust})
    report = RunReport(rows, evaluate(clf, x, y), cfg, h, int(cfg["seed"]), extra)
    report.save(out)
    return report


def run_pipeline(cfg: dict, out_dir) -> RunReport:
    """Full experiment: data, classifier, every attack and defense, report."""
    out = Path(out_dir)
    timer = _Timer()
    with timer("gen"):
        _, data = stage_gen(cfg, out)
    with timer("train"):
        stage_train(cfg, out, data)
    with timer("attack"):
        stage_attack(cfg, out)
    with timer("purify"):
        stage_purify(cfg, out)
    with timer("eval"):
        report = stage_eval(cfg, out)
    (out / "timing.json").write_text(json.dumps(timer.times, indent=1, sort_keys=True))
    return report


# studies ----------------------------------------------------------------------


def _attacked_split(cfg, out_dir, attack: str, split: str):
    prior, data, clf, _ = prepare(cfg, out_dir)
    if split not in data:
        raise ValueError(f"config has no {split!r} split")
    x, y = data[split]
    if len(y) == 0:
        raise ValueError(f"{split} split is empty")
    x_adv = run_attack(clf, x, y, attack_config(cfg, attack))
    return prior, clf, x, x_adv, y


def grid_search(cfg: dict, lambda1_grid, lambda2_grid, out_dir, attack: str = "flow",
                validation: str | Path | None = None, defense: str = "nappure"):
    """Pick (lambda1, lambda2) by purified accuracy on the attacked validation split.

    ``validation`` may point at a manifest of already attacked images.  Ties go
    to the smaller lambda1, then the smaller lambda2.  Returns
    ``(best_pair, table)``; the table is written to ``grid.csv``.
    """
    if not len(lambda1_grid) or not len(lambda2_grid):
        raise ValueError("lambda grids must be non-empty")
    out = Path(out_dir)
    seed = int(cfg["seed"])
    if validation is not None:
        prior, _, clf, _ = prepare(cfg, out)
        m = DatasetManifest.load(validation)
        x_adv, y = m.images(), m.labels()
        if len(y) == 0:
            raise ValueError("validation set is empty")
        idx = m.indices()
    else:
        prior, clf, _, x_adv, y = _attacked_split(cfg, out, attack, "val")
        idx = list(range(len(y)))
    table = []
    for l1 in lambda1_grid:
        for l2 in lambda2_grid:
            xp = stored(defend(defense, x_adv, idx, attack, prior, cfg, seed, lambda1=float(l1), lambda2=float(l2)))
            table.append({"lambda1": float(l1), "lambda2": float(l2), "accuracy": evaluate(clf, xp, y)})
    best = min(table, key=lambda r: (-r["accuracy"], r["lambda1"], r["lambda2"]))
    with open(out / "grid.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, ["lambda1", "lambda2", "accuracy"])
        wr.writeheader()
        wr.writerows(table)
    return (best["lambda1"], best["lambda2"]), table


def iteration_sweep(cfg: dict, t_list, out_dir, attack: str = "patch", defense: str = "nappure"):
    """Purified accuracy on the attacked eval split for each iteration count."""
    if not len(t_list):
        raise ValueError("t_list must be non-empty")
    out = Path(out_dir)
    seed = int(cfg["seed"])
    prior, clf, _, x_adv, y = _attacked_split(cfg, out, attack, "eval")
    idx = list(range(len(y)))
    table = []
    for t in t_list:
        xp = stored(defend(defense, x_adv, idx, attack, prior, cfg, seed, iterations=int(t)))
        table.append({"iterations": int(t), "robust_acc": evaluate(clf, xp, y)})
    with open(out / "sweep.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, ["iterations", "robust_acc"])
        wr.writeheader()
        wr.writerows(table)
    return table


def mismatch_eval(cfg: dict, defense_spec: dict, attack_variants: dict, out_dir, attack: str = "conv"):
    """Fixed defense transform against attacks of varied geometry.

    ``attack_variants`` maps a row name to an attack-config override (merged
    over ``cfg["attacks"][attack]``).  Returns rows of
    ``(variant, undefended, purified)`` accuracies, also written to
    ``mismatch.csv``.
    """
    dspec = T.TransformSpec.from_dict(defense_spec)
    out = Path(out_dir)
    seed = int(cfg["seed"])
    table = []
    if not attack_variants:
        return table
    prior, data, clf, _ = prepare(cfg, out)
    x, y = data["eval"]
    idx = list(range(len(y)))
    local = copy.deepcopy(cfg)
    local["defense_specs"] = dict(cfg["defense_specs"], **{attack: defense_spec})
    for name, override in attack_variants.items():
        acfg = AttackConfig.from_dict(merge(cfg["attacks"][attack], override))
        if acfg.spec.kind != dspec.kind:
            raise ValueError(f"attack kind {acfg.spec.kind!r} incompatible with defense kind {dspec.kind!r}")
        x_adv = run_attack(clf, x, y, acfg)
        xp = stored(defend("nappure", x_adv, idx, attack, prior, local, seed))
        table.append({
            "variant": name,
            "undefended": evaluate(clf, x_adv, y),
            "purified": evaluate(clf, xp, y),
        })
    with open(out / "mismatch.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, ["variant", "undefended", "purified"])
        wr.writeheader()
        wr.writerows(table)
    return table


def composite_eval(cfg: dict, out_dir):
    """Composite attack against no defense, LM, NAPPure-joint and every single-family NAPPure.

    Returns ``{row name: accuracy}``; also written to ``composite.csv``.
    """
    out = Path(out_dir)
    seed = int(cfg["seed"])
    prior, data, clf, _ = prepare(cfg, out)
    x, y = data["eval"]
    idx = list(range(len(y)))
    x_adv = run_attack(clf, x, y, AttackConfig.from_dict(cfg["composite_attack"]))
    table = {"none": evaluate(clf, x_adv, y)}
    for d in ("lm", "nappure-joint"):
        table[d] = evaluate(clf, stored(defend(d, x_adv, idx, None, prior, cfg, seed)), y)
    for fam in cfg["defense_specs"]:
        table[f"nappure/{fam}"] = evaluate(clf, stored(defend("nappure", x_adv, idx, fam, prior, cfg, seed)), y)
    with open(out / "composite.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["defense", "robust_acc"])
        for k, v in table.items():
            wr.writerow([k, repr(v)])
    return table
