"""Config-driven orchestration: train, attack-and-evaluate sweeps, reports.

One JSON config drives everything. A sweep takes each PGD parameter set,
draws its own reproducible subset (so per-set clean baselines are stored
and re-subsetting effects stay visible), attacks every sample with a
self-label loss built from the model's own clean greedy answer, scores
clean and adversarial answers with the VQA rule, and persists report.csv,
report.md, and records.jsonl. Outputs are byte-identical for identical
(config, seed).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

from .attacks import (
    AttackError,
    EPSILON_GRID,
    Norm,
    PgdParams,
    ThreatModel,
    hyperparameter_schedule,
    pgd,
)
from .autodiff import ContractViolation
from .models import (
    FusionKind,
    ToyVlmConfig,
    ToyVlmParams,
    default_vocab,
    generate_answer,
    load_checkpoint,
    save_checkpoint,
    self_label_loss,
    tokenize_question,
    train_toy,
)
from .data import SyntheticSpec, gen_dataset
from .seeding import derive_seed
from .vqa import (
    EvalRecord,
    EvalReport,
    PerEpsilonStats,
    accuracy_drop,
    load_image,
    load_manifest,
    margin_of_error,
    sample_subset,
    vqa_accuracy,
    vqa_match,
)

__all__ = [
    "ConfigError",
    "ModelSelector",
    "DatasetRef",
    "TrainSettings",
    "PgdSetting",
    "RunConfig",
    "load_run_config",
    "default_parameter_sets",
    "resolve_dataset",
    "train_model",
    "run_eval",
    "emit_report",
    "report_from_records",
    "fixture_report",
    "format_epsilon",
    "CONFIG_VERSION",
]

CONFIG_VERSION = 1

_SUBTLE_LIMIT = 16 / 255 + 1e-9
_EN_DASH = "–"
_FOOTNOTE = "‡"


class ConfigError(ValueError):
    """Raised for malformed or inconsistent run configuration."""


@dataclass(frozen=True)
class ModelSelector:
    """Which toy model a run is about, plus where its checkpoint lives."""

    fusion_kind: FusionKind
    image_size: tuple = (32, 32, 3)
    patch_size: int = 8
    d_model: int = 32
    max_answer_len: int = 3
    checkpoint: Optional[Path] = None
    label: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "fusion_kind", FusionKind(self.fusion_kind))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if self.checkpoint is not None:
            object.__setattr__(self, "checkpoint", Path(self.checkpoint))

    @property
    def display_label(self) -> str:
        return self.label or f"toy-{self.fusion_kind.value}"

    def to_vlm_config(self, seed: int) -> ToyVlmConfig:
        return ToyVlmConfig(
            fusion_kind=self.fusion_kind,
            image_size=self.image_size,
            patch_size=self.patch_size,
            d_model=self.d_model,
            vocab=default_vocab(),
            max_answer_len=self.max_answer_len,
            seed=seed,
        )

    def check_matches(self, config: ToyVlmConfig) -> None:
        mismatches = []
        if config.fusion_kind is not self.fusion_kind:
            mismatches.append(f"fusion_kind {config.fusion_kind.value} != {self.fusion_kind.value}")
        if config.image_size != self.image_size:
            mismatches.append(f"image_size {config.image_size} != {self.image_size}")
        if config.patch_size != self.patch_size:
            mismatches.append(f"patch_size {config.patch_size} != {self.patch_size}")
        if config.d_model != self.d_model:
            mismatches.append(f"d_model {config.d_model} != {self.d_model}")
        if config.max_answer_len != self.max_answer_len:
            mismatches.append(f"max_answer_len {config.max_answer_len} != {self.max_answer_len}")
        if mismatches:
            raise ConfigError("checkpoint does not match config: " + "; ".join(mismatches))


@dataclass(frozen=True)
class DatasetRef:
    """Either an existing manifest or a synthetic spec with a target dir."""

    manifest: Optional[Path] = None
    synthetic: Optional[SyntheticSpec] = None
    directory: Optional[Path] = None

    def __post_init__(self):
        if (self.manifest is None) == (self.synthetic is None):
            raise ConfigError("dataset needs exactly one of manifest or synthetic")
        if self.synthetic is not None and self.directory is None:
            raise ConfigError("synthetic dataset needs a directory")
        if self.manifest is not None:
            object.__setattr__(self, "manifest", Path(self.manifest))
        if self.directory is not None:
            object.__setattr__(self, "directory", Path(self.directory))


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 30
    learning_rate: float = 0.05
    batch_size: int = 32


@dataclass(frozen=True)
class PgdSetting:
    epsilon: float
    alpha: float
    iterations: int
    random_start: bool = True


@dataclass(frozen=True)
class RunConfig:
    """Everything a sweep needs; see README for the JSON schema."""

    model: ModelSelector
    dataset: DatasetRef
    subset_size: int
    seed: int
    pgd_parameter_sets: tuple
    output_dir: Path
    train_dataset: Optional[DatasetRef] = None
    train: TrainSettings = field(default_factory=TrainSettings)

    def __post_init__(self):
        object.__setattr__(self, "pgd_parameter_sets", tuple(self.pgd_parameter_sets))
        object.__setattr__(self, "output_dir", Path(self.output_dir))
        if self.subset_size < 1:
            raise ConfigError("subset_size must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


def default_parameter_sets(random_start: bool = True) -> tuple:
    """The six-budget grid with (alpha, iterations) from the schedule;
    the endpoint pairs are the published ones."""
    sets = []
    for eps in EPSILON_GRID:
        alpha, iterations = hyperparameter_schedule(eps)
        sets.append(PgdSetting(epsilon=eps, alpha=alpha, iterations=iterations,
                               random_start=random_start))
    return tuple(sets)


def _parse_epsilon(value) -> float:
    """Accept plain floats and "k/255"-style fraction strings."""
    if isinstance(value, str):
        if "/" in value:
            num, den = value.split("/", 1)
            return float(num) / float(den)
        return float(value)
    return float(value)


def _dataset_from_dict(d: dict, base: Path) -> DatasetRef:
    if "manifest" in d:
        return DatasetRef(manifest=base / d["manifest"])
    if "synthetic" in d:
        spec = SyntheticSpec.from_dict(d["synthetic"])
        directory = base / d.get("dir", d["synthetic"].get("dir", "data"))
        return DatasetRef(synthetic=spec, directory=directory)
    raise ConfigError("dataset block needs 'manifest' or 'synthetic'")


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Parse and validate a JSON run config. Paths resolve relative to the
    config file's directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    base = path.parent
    try:
        version = int(raw.get("config_version", CONFIG_VERSION))
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {version}")
        m = raw["model"]
        checkpoint = base / m["checkpoint"] if "checkpoint" in m else None
        model = ModelSelector(
            fusion_kind=FusionKind(m["fusion_kind"]),
            image_size=tuple(m.get("image_size", (32, 32, 3))),
            patch_size=int(m.get("patch_size", 8)),
            d_model=int(m.get("d_model", 32)),
            max_answer_len=int(m.get("max_answer_len", 3)),
            checkpoint=checkpoint,
            label=m.get("label"),
        )
        dataset = _dataset_from_dict(raw["dataset"], base)
        train_dataset = (_dataset_from_dict(raw["train_dataset"], base)
                         if "train_dataset" in raw else None)
        sets = []
        for entry in raw["pgd_parameter_sets"]:
            eps = _parse_epsilon(entry["epsilon"])
            if not 0.0 < eps <= 1.0:
                raise ConfigError(f"parameter set epsilon {eps} outside (0, 1]")
            if "alpha" in entry:
                alpha, iterations = float(entry["alpha"]), int(entry["iterations"])
            else:
                alpha, iterations = hyperparameter_schedule(eps)
            sets.append(PgdSetting(
                epsilon=eps, alpha=alpha, iterations=iterations,
                random_start=bool(entry.get("random_start", True)),
            ))
        t = raw.get("train", {})
        train = TrainSettings(
            epochs=int(t.get("epochs", 30)),
            learning_rate=float(t.get("learning_rate", 0.05)),
            batch_size=int(t.get("batch_size", 32)),
        )
        return RunConfig(
            model=model,
            dataset=dataset,
            subset_size=int(raw["subset_size"]),
            seed=int(raw["seed"]),
            pgd_parameter_sets=tuple(sets),
            output_dir=base / raw.get("output_dir", "runs"),
            train_dataset=train_dataset,
            train=train,
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc


def resolve_dataset(ref: DatasetRef) -> Path:
    """Manifest path for a dataset reference, generating synthetic data on
    first use (generation is deterministic, so this is safe to repeat)."""
    if ref.manifest is not None:
        if not ref.manifest.exists():
            raise FileNotFoundError(f"manifest not found: {ref.manifest}")
        return ref.manifest
    manifest = ref.directory / "manifest.jsonl"
    if not manifest.exists():
        gen_dataset(ref.synthetic, ref.directory)
    return manifest


# ---------------------------------------------------------------------------
# training entry


def train_model(config: RunConfig) -> Path:
    """Train the configured model on the train (or eval) dataset and save
    its checkpoint; returns the checkpoint path."""
    ref = config.train_dataset or config.dataset
    samples = load_manifest(resolve_dataset(ref))
    vlm_config = config.model.to_vlm_config(seed=config.seed)
    result = train_toy(samples, vlm_config, epochs=config.train.epochs,
                       learning_rate=config.train.learning_rate,
                       batch_size=config.train.batch_size)
    checkpoint = config.model.checkpoint or (config.output_dir / "checkpoint.avlm")
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, checkpoint)
    return checkpoint


# ---------------------------------------------------------------------------
# evaluation sweep


def run_eval(config: RunConfig, params: Optional[ToyVlmParams] = None,
             persist: bool = True) -> EvalReport:
    """Attack-and-evaluate sweep across the configured parameter sets.

    Per set: draw a seeded subset, compute the clean greedy answer per
    sample, run PGD against the self-label loss, score both answers, and
    aggregate. Attack errors are isolated per sample and counted; they
    never abort the sweep.
    """
    if params is None:
        if config.model.checkpoint is None:
            raise ConfigError("run_eval needs a trained checkpoint or explicit params")
        if not config.model.checkpoint.exists():
            raise FileNotFoundError(f"checkpoint not found: {config.model.checkpoint}")
        params = load_checkpoint(config.model.checkpoint)
    config.model.check_matches(params.config)

    samples = load_manifest(resolve_dataset(config.dataset))
    if config.subset_size > len(samples):
        raise ConfigError(
            f"subset_size {config.subset_size} exceeds dataset size {len(samples)}")
    by_id = {s.sample_id: s for s in samples}
    ids = [s.sample_id for s in samples]
    image_cache: dict = {}
    question_cache: dict = {}

    entries = []
    records = []
    failures = []
    for set_index, setting in enumerate(config.pgd_parameter_sets):
        subset_ids = sample_subset(ids, config.subset_size,
                                   derive_seed(config.seed, "subset", set_index))
        clean_flags = []
        adv_flags = []
        set_failures = 0
        for sample_id in subset_ids:
            sample = by_id[sample_id]
            if sample_id not in image_cache:
                image_cache[sample_id] = load_image(sample.image_ref)
                question_cache[sample_id] = tokenize_question(sample.question_text,
                                                              params.config)
            image = image_cache[sample_id]
            question = question_cache[sample_id]
            clean_answer = generate_answer(params, image, question)
            clean_ok = vqa_match(clean_answer.text, sample.ground_truth_answers)
            attack = PgdParams(
                threat=ThreatModel(epsilon=setting.epsilon, norm=Norm.LINF),
                alpha=setting.alpha,
                iterations=setting.iterations,
                random_start=setting.random_start,
                seed=derive_seed(config.seed, "pgd", set_index, sample_id),
            )
            try:
                result = pgd(self_label_loss(params, question, clean_answer), image, attack)
            except AttackError as exc:
                set_failures += 1
                failures.append({
                    "sample_id": sample_id,
                    "epsilon": setting.epsilon,
                    "attack_error": str(exc),
                })
                continue
            adv_answer = generate_answer(params, result.adversarial_image, question)
            adv_ok = vqa_match(adv_answer.text, sample.ground_truth_answers)
            clean_flags.append(clean_ok)
            adv_flags.append(adv_ok)
            records.append(EvalRecord(
                sample_id=sample_id,
                clean_answer=clean_answer.text,
                adversarial_answer=adv_answer.text,
                clean_correct=clean_ok,
                adversarial_correct=adv_ok,
                epsilon=setting.epsilon,
            ))
        if not clean_flags:
            raise ContractViolation(
                f"every attack failed for epsilon {setting.epsilon}; nothing to score")
        clean_acc = vqa_accuracy(clean_flags)
        adv_acc = vqa_accuracy(adv_flags)
        entries.append(PerEpsilonStats(
            epsilon=setting.epsilon,
            n=len(clean_flags),
            clean_accuracy=clean_acc,
            adversarial_accuracy=adv_acc,
            accuracy_drop=accuracy_drop(clean_acc, adv_acc),
            margin_of_error=margin_of_error(len(clean_flags), clean_acc / 100.0),
            attack_failures=set_failures,
        ))

    report = EvalReport(model_label=config.model.display_label,
                        entries=entries, records=records)
    if persist:
        config.output_dir.mkdir(parents=True, exist_ok=True)
        _write_records(report, failures, config.output_dir / "records.jsonl")
        emit_report(report, config.output_dir)
    return report


def _write_records(report: EvalReport, failures: Sequence[dict], path: Path) -> None:
    lines = [r.to_json() for r in report.records]
    lines += [json.dumps(f, sort_keys=True, separators=(",", ":")) for f in failures]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def report_from_records(path: Union[str, Path], model_label: str) -> EvalReport:
    """Rebuild an EvalReport from a persisted records.jsonl, so reports are
    re-derivable without re-attacking."""
    records = []
    failures_by_eps: dict = {}
    order: list = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        eps = float(row["epsilon"])
        if eps not in order:
            order.append(eps)
        if "attack_error" in row:
            failures_by_eps[eps] = failures_by_eps.get(eps, 0) + 1
            continue
        records.append(EvalRecord(
            sample_id=row["sample_id"],
            clean_answer=row["clean_answer"],
            adversarial_answer=row["adversarial_answer"],
            clean_correct=bool(row["clean_correct"]),
            adversarial_correct=bool(row["adversarial_correct"]),
            epsilon=eps,
        ))
    entries = []
    for eps in order:
        rows = [r for r in records if r.epsilon == eps]
        if not rows:
            continue
        clean_acc = vqa_accuracy([r.clean_correct for r in rows])
        adv_acc = vqa_accuracy([r.adversarial_correct for r in rows])
        entries.append(PerEpsilonStats(
            epsilon=eps,
            n=len(rows),
            clean_accuracy=clean_acc,
            adversarial_accuracy=adv_acc,
            accuracy_drop=accuracy_drop(clean_acc, adv_acc),
            margin_of_error=margin_of_error(len(rows), clean_acc / 100.0),
            attack_failures=failures_by_eps.get(eps, 0),
        ))
    return EvalReport(model_label=model_label, entries=entries, records=records)


# ---------------------------------------------------------------------------
# report emission


def format_epsilon(epsilon: float) -> str:
    """Budgets that are whole 255ths render as k/255, otherwise decimal."""
    k = epsilon * 255.0
    if abs(k - round(k)) < 1e-9:
        return f"{int(round(k))}/255"
    return f"{epsilon:.5f}"


def _round1(value: float) -> float:
    return float(f"{value:.1f}")


def _drop_cell(entry: PerEpsilonStats, marked: bool) -> str:
    """Adversarial accuracy with the parenthesized signed change."""
    adv = _round1(entry.adversarial_accuracy)
    drop = _round1(entry.clean_accuracy) - adv
    if drop >= 0.05:
        signed = f"{_EN_DASH}{drop:.1f}"
    elif drop <= -0.05:
        signed = f"+{-drop:.1f}"
    else:
        signed = "0.0"
    mark = _FOOTNOTE if marked else ""
    return f"{adv:.1f}{mark} ({signed}{mark})"


def fixture_report(model_label: str, rows: Sequence[dict]) -> EvalReport:
    """Report assembled from externally supplied accuracies, to exercise
    the formatting path alone. Rows: {epsilon, n, clean_acc, adv_acc}."""
    entries = []
    for row in rows:
        eps = _parse_epsilon(row["epsilon"])
        n = int(row.get("n", 500))
        clean = float(row["clean_acc"])
        adv = float(row["adv_acc"])
        entries.append(PerEpsilonStats(
            epsilon=eps,
            n=n,
            clean_accuracy=clean,
            adversarial_accuracy=adv,
            accuracy_drop=accuracy_drop(clean, adv),
            margin_of_error=margin_of_error(n, clean / 100.0),
        ))
    return EvalReport(model_label=model_label, entries=entries)


def _markdown_table(title: str, label: str, entries: Sequence[PerEpsilonStats],
                    baseline: float) -> str:
    header = "| Model | Clean Acc. (%) | " + " | ".join(
        f"ε={format_epsilon(e.epsilon)}" for e in entries) + " |"
    rule = "|" + "---|" * (len(entries) + 2)
    cells = []
    footnotes = []
    for e in entries:
        marked = _round1(e.clean_accuracy) != baseline
        cells.append(_drop_cell(e, marked))
        if marked:
            footnotes.append(
                f"{_FOOTNOTE} Clean accuracy was {_round1(e.clean_accuracy):.1f}% in the "
                f"ε={format_epsilon(e.epsilon)} run.")
    row = f"| {label} | {baseline:.1f} | " + " | ".join(cells) + " |"
    text = f"## {title}\n\n{header}\n{rule}\n{row}\n"
    if footnotes:
        text += "\n" + "\n".join(footnotes) + "\n"
    return text


def emit_report(report: EvalReport, output_dir: Union[str, Path],
                fixture_mode: bool = False) -> tuple:
    """Write report.csv and report.md; returns their paths.

    The Markdown splits subtle budgets (eps <= 16/255) from large ones
    (eps > 16/255), renders "adv (signed change)" cells, and footnotes any
    entry whose clean baseline differs from the table's. fixture_mode
    skips record-replay validation so externally supplied accuracies can
    be formatted directly.
    """
    if not fixture_mode:
        report.validate()
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    csv_path = output_dir / "report.csv"
    md_path = output_dir / "report.md"

    lines = ["model,epsilon,n,clean_acc,adv_acc,drop,margin"]
    for e in report.entries:
        clean = _round1(e.clean_accuracy)
        adv = _round1(e.adversarial_accuracy)
        lines.append(
            f"{report.model_label},{e.epsilon:.10g},{e.n},{clean:.1f},{adv:.1f},"
            f"{clean - adv:.1f},{e.margin_of_error:.2f}")
    csv_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    if not report.entries:
        md_path.write_text("", encoding="utf-8")
        return csv_path, md_path

    rounded = [_round1(e.clean_accuracy) for e in report.entries]
    counts: dict = {}
    for v in rounded:
        counts[v] = counts.get(v, 0) + 1
    baseline = max(counts, key=lambda v: (counts[v], -rounded.index(v)))

    subtle = [e for e in report.entries if e.epsilon <= _SUBTLE_LIMIT]
    large = [e for e in report.entries if e.epsilon > _SUBTLE_LIMIT]
    sections = []
    if subtle:
        sections.append(_markdown_table(
            "VQA Accuracy (%) under Subtle Adversarial Perturbations (ε ≤ 16/255)",
            report.model_label, subtle, baseline))
    if large:
        sections.append(_markdown_table(
            "VQA Accuracy (%) under Large Adversarial Perturbations (ε ≥ 128/255)",
            report.model_label, large, baseline))
    md_path.write_text("\n".join(sections), encoding="utf-8")
    return csv_path, md_path
