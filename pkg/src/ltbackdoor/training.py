"""Joint training of the classifier and trigger generator.

Each epoch alternates two stages. Stage 1 updates the selectors on a
small per-class sample: the clean schedule moves by +-1 against the
accuracy threshold and the backdoored selector head takes a few Adam
steps. Stage 2 sweeps the training set in stratified minibatches (poison
fraction fixed at rho), augments clean samples per the schedule and
poison samples per the head, and takes one simultaneous gradient step on
the classifier and the generator; the head and schedule stay frozen.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import data as data_mod
from .augment import AugmentRegistry, apply_pipeline, build_registry
from .backdoor_selector import SelectorHead, train_selector_head
from .clean_selector import (StrengthSchedule, choose_clean_ops,
                             evaluate_class_accuracy, initial_schedule,
                             update_strengths)
from .config import ExperimentConfig
from .data import LongTailDataset, PoisonPlan
from .errors import ConfigError, DomainError
from .metrics import (MetricsReport, evaluate, generator_trigger_fn,
                      patch_trigger_fn)
from .models import build_backbone
from .triggers import (PatchSpec, TriggerGenerator, apply_fixed_patch_trigger,
                       augment_for_backdoor, blend, diversity_loss)

# rng stream tags; every stream is derived from (seed, tag, epoch)
_TAG_TRAIN_CORPUS = 1
_TAG_TEST_CORPUS = 2
_TAG_SPLIT = 3
_TAG_LONGTAIL = 4
_TAG_POISON = 5
_TAG_MODEL_INIT = 6
_TAG_SELECTOR_SET = 7
_TAG_SELECTOR_EVAL = 8
_TAG_SELECTOR_HEAD = 9
_TAG_BATCH_ORDER = 10
_TAG_AUGMENT = 11


def _stream(seed: int, tag: int, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag, epoch]))


def _derived_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def logit_adjust(logits: torch.Tensor, priors: torch.Tensor,
                 tau: float) -> torch.Tensor:
    """Add tau * log(prior) offsets; tau = 0 returns the logits unchanged."""
    if tau == 0:
        return logits
    if (priors <= 0).any():
        raise DomainError("class priors must be strictly positive")
    return logits + tau * torch.log(priors)


def compute_total_loss(model: torch.nn.Module, clean_images: torch.Tensor,
                       clean_labels: torch.Tensor, bd_images: torch.Tensor,
                       bd_labels: torch.Tensor,
                       generator: TriggerGenerator | None = None,
                       lambda_div: float = 0.0,
                       div_pairs: tuple[torch.Tensor, torch.Tensor,
                                        torch.Tensor, torch.Tensor] | None = None,
                       tau: float = 0.0,
                       priors: torch.Tensor | None = None
                       ) -> tuple[torch.Tensor, dict[str, float]]:
    """Clean CE + backdoor CE + lambda_div * diversity, with components.

    The backdoored batch may be empty (warmup or no-poison control), in
    which case both attack terms are zero. ``div_pairs`` carries
    (x, x_partner, x_aug, x_partner_aug) for the diversity term.
    """
    if len(clean_images) == 0:
        raise DomainError("clean batch must be non-empty")
    n_clean = len(clean_images)
    if len(bd_images):
        logits = model(torch.cat([clean_images, bd_images]))
        clean_logits, bd_logits = logits[:n_clean], logits[n_clean:]
    else:
        clean_logits, bd_logits = model(clean_images), None
    if tau > 0:
        if priors is None:
            raise DomainError("logit adjustment needs class priors")
        clean_logits = logit_adjust(clean_logits, priors, tau)
    ce_clean = F.cross_entropy(clean_logits, clean_labels)
    zero = ce_clean.new_zeros(())
    ce_bd = zero
    div = zero
    if bd_logits is not None:
        if tau > 0:
            bd_logits = logit_adjust(bd_logits, priors, tau)
        ce_bd = F.cross_entropy(bd_logits, bd_labels)
        if lambda_div > 0 and div_pairs is not None and generator is not None:
            div = diversity_loss(generator, *div_pairs)
    total = ce_clean + ce_bd + lambda_div * div
    components = {
        "clean_ce": float(ce_clean.detach()),
        "backdoor_ce": float(ce_bd.detach()),
        "diversity": float(div.detach()),
        "weighted_diversity": float(lambda_div * div.detach()),
        "total": float(total.detach()),
    }
    return total, components


@dataclass
class RunState:
    """Everything a run carries between epochs and into checkpoints."""

    config: ExperimentConfig
    registry: AugmentRegistry
    model: torch.nn.Module
    generator: TriggerGenerator
    head: SelectorHead
    schedule: StrengthSchedule
    plan: PoisonPlan
    priors: torch.Tensor
    model_opt: torch.optim.Optimizer
    generator_opt: torch.optim.Optimizer
    head_opt: torch.optim.Optimizer
    epoch: int = 0
    reports: list[MetricsReport] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.config["seed"]


def init_state(config: ExperimentConfig, dataset: LongTailDataset,
               plan: PoisonPlan | None = None) -> RunState:
    """Fresh models, selectors and optimizers for one run."""
    registry = build_registry(config.operator_names(), config["selector.s_max"])
    if plan is None:
        rho = config["attack.rho"]
        if rho > 0:
            plan = data_mod.select_poison_subset(
                dataset, rho, config["attack.target_label"],
                _stream(config["seed"], _TAG_POISON))
        else:
            plan = data_mod.empty_poison_plan(config["attack.target_label"])
    torch.manual_seed(_derived_seed(config["seed"], _TAG_MODEL_INIT))
    model = build_backbone(config["training.backbone"], dataset.num_classes,
                           in_channels=config["dataset.channels"])
    generator = TriggerGenerator(channels=config["dataset.channels"],
                                 widths=config.generator_widths())
    head = SelectorHead(model.feature_dim, registry.n_operators,
                        temperature=config["selector.temperature"],
                        strength=config["selector.q"])
    schedule = initial_schedule(dataset.num_classes, config["selector.s_max"],
                                config["selector.gamma"])
    priors = torch.as_tensor(dataset.counts / dataset.counts.sum(),
                             dtype=torch.float32)
    model_opt = torch.optim.SGD(model.parameters(), lr=config["training.lr"],
                                momentum=config["training.momentum"],
                                weight_decay=config["training.weight_decay"])
    generator_opt = torch.optim.Adam(generator.parameters(),
                                     lr=config["training.generator_lr"])
    head_opt = torch.optim.Adam(head.parameters(), lr=config["selector.lr"])
    return RunState(config=config, registry=registry, model=model,
                    generator=generator, head=head, schedule=schedule,
                    plan=plan, priors=priors, model_opt=model_opt,
                    generator_opt=generator_opt, head_opt=head_opt)


def _augment_clean_batch(images: torch.Tensor, labels: torch.Tensor,
                         schedule: StrengthSchedule, registry: AugmentRegistry,
                         aug_probability: float,
                         rng: np.random.Generator) -> torch.Tensor:
    out = []
    for img, y in zip(images, labels):
        if rng.random() < aug_probability:
            ops = choose_clean_ops(schedule, int(y), registry, rng)
            out.append(apply_pipeline(registry, ops, img, rng))
        else:
            out.append(img)
    return torch.stack(out)


def run_epoch(state: RunState, dataset: LongTailDataset) -> dict:
    """One selector stage followed by one model/generator stage.

    Returns the epoch record with loss means, selector losses and the
    schedule snapshot.
    """
    cfg = state.config
    t = state.epoch + 1
    seed = state.seed
    registry = state.registry
    use_patch = cfg["attack.trigger"] == "patch"
    patch = PatchSpec(cfg["attack.patch_size"], cfg["attack.patch_position"],
                      cfg["attack.patch_pattern"])

    # stage 1: selector updates on the per-class sample
    dt_idx = data_mod.sample_selector_set(
        dataset, cfg["selector.dt_per_class"], _stream(seed, _TAG_SELECTOR_SET, t))
    dt_images, dt_labels = dataset.images[dt_idx], dataset.labels[dt_idx]
    acc = evaluate_class_accuracy(state.model, dt_images, dt_labels,
                                  state.schedule, registry,
                                  _stream(seed, _TAG_SELECTOR_EVAL, t))
    previous = np.asarray(state.schedule.scores)
    state.schedule = update_strengths(state.schedule, acc)
    deltas = np.asarray(state.schedule.scores) - previous
    if np.abs(deltas).max(initial=0) > 1:
        raise RuntimeError(f"schedule moved by more than 1: {deltas}")
    selector_losses = train_selector_head(
        state.head, state.model, dt_images, dt_labels, registry,
        cfg["selector.steps"], _stream(seed, _TAG_SELECTOR_HEAD, t),
        optimizer=state.head_opt)

    # stage 2: stratified minibatch sweep
    rng_order = _stream(seed, _TAG_BATCH_ORDER, t)
    rng_aug = _stream(seed, _TAG_AUGMENT, t)
    clean_idx = state.plan.clean_indices(len(dataset))
    poison_idx = np.asarray(state.plan.poison_indices, dtype=int)
    clean_perm = rng_order.permutation(clean_idx)
    poison_perm = rng_order.permutation(poison_idx) if len(poison_idx) else poison_idx
    n_batches = max(1, math.ceil(len(dataset) / cfg["training.batch_size"]))
    clean_chunks = np.array_split(clean_perm, n_batches)
    poison_chunks = (np.array_split(poison_perm, n_batches)
                     if len(poison_perm) else [poison_idx] * n_batches)

    state.model.train()
    state.generator.train()
    sums: dict[str, float] = {}
    lambda_div = cfg["attack.lambda_div"]
    alpha = cfg["attack.alpha"]
    tau = cfg["training.logit_adjust_tau"]
    for c_chunk, p_chunk in zip(clean_chunks, poison_chunks):
        clean_images = _augment_clean_batch(
            dataset.images[c_chunk], dataset.labels[c_chunk],
            state.schedule, registry, cfg["training.aug_probability"], rng_aug)
        clean_labels = dataset.labels[c_chunk]
        div_pairs = None
        if len(p_chunk):
            x_raw = dataset.images[p_chunk]
            x_aug = augment_for_backdoor(x_raw, state.head, state.model,
                                         registry, rng_aug)
            if use_patch:
                bd_images = apply_fixed_patch_trigger(x_aug, patch)
            else:
                bd_images = blend(x_aug, state.generator(x_aug), alpha)
                if lambda_div > 0:
                    partner_idx = rng_aug.choice(clean_idx, size=len(p_chunk))
                    p_raw = dataset.images[partner_idx]
                    p_aug = augment_for_backdoor(p_raw, state.head, state.model,
                                                 registry, rng_aug)
                    div_pairs = (x_raw, p_raw, x_aug, p_aug)
            bd_labels = torch.full((len(p_chunk),),
                                   state.plan.target_label, dtype=torch.long)
        else:
            bd_images = dataset.images[:0]
            bd_labels = dataset.labels[:0]
        total, comps = compute_total_loss(
            state.model, clean_images, clean_labels, bd_images, bd_labels,
            generator=None if use_patch else state.generator,
            lambda_div=lambda_div, div_pairs=div_pairs,
            tau=tau, priors=state.priors)
        state.model_opt.zero_grad()
        state.generator_opt.zero_grad()
        total.backward()
        state.model_opt.step()
        if not use_patch and len(p_chunk):
            state.generator_opt.step()
        for key, value in comps.items():
            sums[key] = sums.get(key, 0.0) + value

    state.epoch = t
    record = {
        "epoch": t,
        "config_hash": cfg.hash,
        "losses": {k: v / n_batches for k, v in sums.items()},
        "selector_loss_mean": (float(np.mean(selector_losses))
                               if selector_losses else None),
        "selector_class_acc": [float(a) for a in acc],
        "schedule": list(state.schedule.scores),
    }
    return record


def trigger_fn_for(state: RunState) -> Callable[[torch.Tensor], torch.Tensor]:
    if state.config["attack.trigger"] == "patch":
        return patch_trigger_fn(PatchSpec(state.config["attack.patch_size"],
                                          state.config["attack.patch_position"],
                                          state.config["attack.patch_pattern"]))
    return generator_trigger_fn(state.generator, state.config["attack.alpha"])


def prepare_datasets(config: ExperimentConfig
                     ) -> tuple[LongTailDataset, torch.Tensor, torch.Tensor]:
    """Resolve the configured source into a long-tail train set plus a
    balanced clean test set."""
    seed = config["seed"]
    source = config["dataset.source"]
    k = config["dataset.num_classes"]
    test_pc = config["dataset.test_per_class"]
    if source == "synthetic":
        images, labels = data_mod.make_synthetic_corpus(
            k, config["dataset.n_max"], config["dataset.image_size"],
            config["dataset.channels"],
            seed=_derived_seed(seed, _TAG_TRAIN_CORPUS))
        test_images, test_labels = data_mod.make_synthetic_corpus(
            k, test_pc, config["dataset.image_size"], config["dataset.channels"],
            seed=_derived_seed(seed, _TAG_TEST_CORPUS))
    else:
        path = Path(source)
        if path.suffix == ".npz":
            images, labels = data_mod.load_packed(path)
        elif path.is_dir() and (path / "train").is_dir():
            images, labels = data_mod.load_image_folder(
                path / "train", config["dataset.image_size"])
            test_images, test_labels = data_mod.load_image_folder(
                path / "test", config["dataset.image_size"])
            train = data_mod.build_longtail(
                images, labels, config["dataset.ir"],
                _stream(seed, _TAG_LONGTAIL), n_max=config["dataset.n_max"],
                profile=config["dataset.profile"], source=source)
            return train, test_images, test_labels
        elif path.is_dir():
            images, labels = data_mod.load_image_folder(
                path, config["dataset.image_size"])
        else:
            raise ConfigError(f"field 'dataset.source': no such file or directory: {source}")
        # hold out a balanced test split before building the long tail
        rng = _stream(seed, _TAG_SPLIT)
        labels_np = labels.numpy()
        test_mask = np.zeros(len(labels_np), dtype=bool)
        for c in range(int(labels_np.max()) + 1):
            pool = np.nonzero(labels_np == c)[0]
            if len(pool) <= test_pc:
                raise ConfigError(
                    f"field 'dataset.test_per_class': class {c} has only {len(pool)} samples")
            test_mask[rng.choice(pool, size=test_pc, replace=False)] = True
        test_images, test_labels = images[test_mask], labels[test_mask]
        images, labels = images[~test_mask], labels[~test_mask]
    train = data_mod.build_longtail(
        images, labels, config["dataset.ir"], _stream(seed, _TAG_LONGTAIL),
        n_max=config["dataset.n_max"], profile=config["dataset.profile"],
        source=source)
    return train, test_images, test_labels


def fit(config: ExperimentConfig, dataset: LongTailDataset | None = None,
        test_images: torch.Tensor | None = None,
        test_labels: torch.Tensor | None = None,
        state: RunState | None = None,
        epoch_callback: Callable[[dict], None] | None = None) -> RunState:
    """Run (or resume) the full alternating schedule with per-epoch eval."""
    if config["training.deterministic"]:
        torch.set_num_threads(1)
    if dataset is None:
        dataset, test_images, test_labels = prepare_datasets(config)
    if state is None:
        state = init_state(config, dataset)
    while state.epoch < config["training.epochs"]:
        record = run_epoch(state, dataset)
        t = state.epoch
        if (test_images is not None
                and (t % config["training.eval_every"] == 0
                     or t == config["training.epochs"])):
            report = evaluate(state.model, test_images, test_labels,
                              state.plan.target_label, trigger_fn_for(state),
                              epoch=t, config_hash=config.hash)
            state.reports.append(report)
            record["report"] = report.to_dict()
        state.records.append(record)
        if epoch_callback is not None:
            epoch_callback(record)
    return state


def save_checkpoint(state: RunState, path: str | Path) -> None:
    torch.save({
        "config_values": state.config.to_dict(),
        "config_hash": state.config.hash,
        "epoch": state.epoch,
        "model": state.model.state_dict(),
        "generator": state.generator.state_dict(),
        "head": state.head.state_dict(),
        "model_opt": state.model_opt.state_dict(),
        "generator_opt": state.generator_opt.state_dict(),
        "head_opt": state.head_opt.state_dict(),
        "schedule": {
            "scores": state.schedule.scores,
            "gamma": state.schedule.gamma,
            "s_max": state.schedule.s_max,
            "epoch": state.schedule.epoch,
            "history": state.schedule.history,
        },
        "plan": {
            "poison_indices": state.plan.poison_indices,
            "rate": state.plan.rate,
            "target_label": state.plan.target_label,
        },
        "priors": state.priors,
        "records": state.records,
        "reports": [r.to_dict() for r in state.reports],
        "torch_rng": torch.get_rng_state(),
    }, path)


def load_checkpoint(path: str | Path, dataset: LongTailDataset) -> RunState:
    """Rebuild a RunState; training resumes bit-identically to an
    uninterrupted run because all per-epoch rng streams derive from
    (seed, epoch)."""
    payload = torch.load(path, weights_only=False)
    config = ExperimentConfig(payload["config_values"])
    plan = PoisonPlan(tuple(payload["plan"]["poison_indices"]),
                      rate=payload["plan"]["rate"],
                      target_label=payload["plan"]["target_label"])
    state = init_state(config, dataset, plan=plan)
    state.model.load_state_dict(payload["model"])
    state.generator.load_state_dict(payload["generator"])
    state.head.load_state_dict(payload["head"])
    state.model_opt.load_state_dict(payload["model_opt"])
    state.generator_opt.load_state_dict(payload["generator_opt"])
    state.head_opt.load_state_dict(payload["head_opt"])
    sched = payload["schedule"]
    state.schedule = StrengthSchedule(
        scores=tuple(sched["scores"]), gamma=sched["gamma"],
        s_max=sched["s_max"], epoch=sched["epoch"],
        history=tuple(tuple(h) for h in sched["history"]))
    state.epoch = payload["epoch"]
    state.records = list(payload["records"])
    state.reports = [MetricsReport.from_dict(r) for r in payload["reports"]]
    torch.set_rng_state(payload["torch_rng"])
    return state


def write_metrics_jsonl(path: str | Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
