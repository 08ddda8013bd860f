"""End-to-end synthetic benchmark with on-disk caching.

Trains a batch-norm and an instance-norm source model on clean phantoms,
then scores every method on a shifted target set. Checkpoints and per-case
metrics are cached under a hash of everything that determines them, so a
rerun with the same configuration only reads files.

Run ``python -m muvi_tta.experiment --out DIR`` to produce the per-method
metric CSVs and the Markdown table.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .baselines import StrategyConfig, run_method
from .engine import AdaptationConfig
from .errors import NormUnsupported
from .metrics import MetricResult, aggregate, evaluate_case, read_case_csv, render_table, write_case_csv
from .model import ModelConfig, NormPolicy, SegmentationModel
from .synth import SHIFTED, SOURCE, DomainSpec, TrainConfig, generate_dataset, train_source_model

log = logging.getLogger(__name__)

CACHE_ENV = "MUVI_TTA_CACHE"

# (label, method, ablation)
BN_METHODS = (
    ("none", "none", None),
    ("ptn", "ptn", None),
    ("tent", "tent", None),
    ("bnadapt", "bnadapt", None),
    ("intent", "intent", None),
    ("memo", "memo", None),
    ("muvi", "muvi", None),
    ("muvi-no_source_bn", "muvi", "no_source_bn"),
    ("muvi-no_entropy_labels", "muvi", "no_entropy_labels"),
    ("muvi-no_consistency", "muvi", "no_consistency"),
)
IN_METHODS = (
    ("none", "none", None),
    ("memo", "memo", None),
    ("muvi", "muvi", None),
)


def default_cache() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "muvi_tta"))


@dataclass(frozen=True)
class ExperimentConfig:
    n_train: int = 40
    train_seed: int = 0
    n_val: int = 10
    val_seed: int = 1000
    n_test: int = 20
    test_seed: int = 2000
    shape: tuple[int, int, int] = (64, 64, 64)
    source: DomainSpec = SOURCE
    target: DomainSpec = SHIFTED
    channels_base: int = 8
    depth: int = 3
    model_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    # inference / adaptation window; the volumes are 64^3, so one window covers a case
    window: int = 64
    muvi_lr: float = 3e-4
    strategy: StrategyConfig = field(default_factory=StrategyConfig)

    def model_config(self, norm: str) -> ModelConfig:
        policy = NormPolicy.batch() if norm == "batch_norm" else NormPolicy.instance()
        return ModelConfig(self.channels_base, self.depth, policy, self.train.patch_size, self.model_seed)

    def muvi_config(self, model: SegmentationModel) -> AdaptationConfig:
        return AdaptationConfig(norm=model.config.norm, learning_rate=self.muvi_lr)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=list))


def _digest(obj) -> str:
    return hashlib.sha1(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


@dataclass
class ExperimentResults:
    config: ExperimentConfig
    val_dsc: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)  # (norm, label) -> list[MetricResult]
    skipped: dict = field(default_factory=dict)

    def mean_dsc(self, norm: str, label: str) -> float:
        rows = self.results[(norm, label)]
        return sum(r.dsc for r in rows) / len(rows)

    def table(self, norm: str) -> str:
        rows = [aggregate(v, label) for (n, label), v in self.results.items() if n == norm]
        return render_table(rows)


class Experiment:
    def __init__(self, config: ExperimentConfig = ExperimentConfig(), cache_dir=None):
        self.config = config
        self.cache = Path(cache_dir) if cache_dir else default_cache()
        self._test = None

    # -- data ------------------------------------------------------------
    def train_set(self):
        c = self.config
        return generate_dataset(c.n_train, c.train_seed, c.shape, c.source)

    def val_set(self):
        c = self.config
        return generate_dataset(c.n_val, c.val_seed, c.shape, c.source)

    def test_set(self):
        if self._test is None:
            c = self.config
            self._test = generate_dataset(c.n_test, c.test_seed, c.shape, c.target)
        return self._test

    # -- source models ---------------------------------------------------
    def _model_key(self, norm: str) -> str:
        c = self.config
        return _digest({"model": c.model_config(norm).to_dict(), "train": c.train.to_dict(),
                        "data": [c.n_train, c.train_seed, list(c.shape), c.source.to_dict()]})

    def source_model(self, norm: str) -> SegmentationModel:
        """Trained checkpoint (cached), returned with the experiment's inference window."""
        path = self.cache / "checkpoints" / f"{norm}-{self._model_key(norm)}.pt"
        if path.exists():
            model = SegmentationModel.load(path)
        else:
            log.info("training %s source model -> %s", norm, path)
            model, _ = train_source_model(self.train_set(), self.config.model_config(norm), self.config.train,
                                          progress=True)
            model.save(path)
        return model.with_patch_size(self.config.window)

    def validation_dsc(self, norm: str) -> list[MetricResult]:
        c = self.config
        key = _digest({"model": self._model_key(norm), "val": [c.n_val, c.val_seed, list(c.shape)],
                       "window": c.window, "strategy": c.strategy.to_dict()})
        return self._cached(f"val-{norm}-{key}", lambda: self._score(self.source_model(norm), self.val_set(),
                                                                      "none", None))

    # -- methods ---------------------------------------------------------
    def _score(self, model, cases, method, ablate) -> list[MetricResult]:
        muvi = self.config.muvi_config(model)
        out = []
        for case in cases:
            r = run_method(method, model, case.volume, muvi, self.config.strategy, ablate=ablate)
            out.append(evaluate_case(r.prediction, case.mask, case.case_id))
        return out

    def _cached(self, name: str, compute) -> list[MetricResult]:
        path = self.cache / "results" / f"{name}.csv"
        if path.exists():
            return read_case_csv(path)
        started = time.perf_counter()
        results = compute()
        write_case_csv(results, path)
        log.info("%s: %d cases in %.0fs", name, len(results), time.perf_counter() - started)
        return results

    def method_results(self, norm: str, label: str, method: str, ablate: Optional[str]) -> list[MetricResult]:
        c = self.config
        model = self.source_model(norm)
        key = _digest({"model": self._model_key(norm), "method": method, "ablate": ablate,
                       "muvi": c.muvi_config(model).to_dict(), "strategy": c.strategy.to_dict(),
                       "test": [c.n_test, c.test_seed, list(c.shape), c.target.to_dict()], "window": c.window})
        return self._cached(f"{norm}-{label}-{key}", lambda: self._score(model, self.test_set(), method, ablate))

    def run(self, norms=("batch_norm", "instance_norm")) -> ExperimentResults:
        res = ExperimentResults(self.config)
        for norm in norms:
            vals = self.validation_dsc(norm)
            res.val_dsc[norm] = sum(r.dsc for r in vals) / len(vals)
            for label, method, ablate in (BN_METHODS if norm == "batch_norm" else IN_METHODS):
                try:
                    res.results[(norm, label)] = self.method_results(norm, label, method, ablate)
                except NormUnsupported:
                    res.skipped[(norm, label)] = self.config.n_test
        return res


def write_metrics(results: ExperimentResults, out_dir) -> Path:
    """Per-method ``metrics_<label>.csv`` files, one directory per norm, plus table.md."""
    out_dir = Path(out_dir)
    for (norm, label), rows in results.results.items():
        write_case_csv(rows, out_dir / norm / f"metrics_{label}.csv")
    for norm in {n for n, _ in results.results}:
        (out_dir / norm / "table.md").write_text(results.table(norm))
    summary = {"val_dsc": results.val_dsc,
               "mean_dsc": {f"{n}/{l}": results.mean_dsc(n, l) for n, l in results.results}}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out_dir


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="synthetic shifted-domain benchmark")
    parser.add_argument("--out", required=True)
    parser.add_argument("--cache", default=None)
    parser.add_argument("--norm", nargs="+", default=["batch_norm", "instance_norm"])
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    res = Experiment(cache_dir=args.cache).run(tuple(args.norm))
    write_metrics(res, args.out)
    for norm in args.norm:
        print(f"## {norm} (source validation DSC {res.val_dsc[norm]:.4f})")
        print(res.table(norm))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
