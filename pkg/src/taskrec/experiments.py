"""Assembles the two reference experiments from a parsed configuration.

* "mnist": 5 angles x 25 lines on 28x28 images, Poisson counts at 60
  photons/line, learned gradient descent + the conv classifier.
* "segmentation": 30 angles x 183 lines on 128x128 synthetic head
  phantoms, 0.1% additive Gaussian noise, learned primal-dual + U-net.

Scale presets: "desk" runs in hours on a workstation; "full" matches the
published training volume and is not part of CI.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import data as data_mod
from . import recon, report, tasks, tomo
from .config import ConfigError
from .training import JointModel, PretrainConfig, RegimeConfig

__all__ = ["ExperimentBundle", "build_experiment", "mnist_geometry",
           "segmentation_geometry", "regime_config_from"]


def mnist_geometry() -> tomo.Geometry:
    return tomo.Geometry(num_angles=5, num_lines=25, image_size=(28, 28))


def segmentation_geometry() -> tomo.Geometry:
    return tomo.Geometry(num_angles=30, num_lines=183, image_size=(128, 128))


@dataclass
class ExperimentBundle:
    """Everything a regime runner needs for one experiment."""

    name: str
    source: data_mod.TripletSource
    model_factory: Callable[[int], JointModel]
    regime_config: RegimeConfig
    geometry: tomo.Geometry
    evaluate: Callable[[JointModel], dict]
    metric_key: str  # "accuracy" | "pixel_accuracy"

    def fresh_model(self, seed: int | None = None) -> JointModel:
        return self.model_factory(
            self.regime_config.seed if seed is None else seed)


def regime_config_from(cfg: dict) -> RegimeConfig:
    pretrain = None
    if (cfg["pretrain_recon_steps"] or cfg["pretrain_task_steps"]):
        pretrain = PretrainConfig(
            recon_steps=cfg["pretrain_recon_steps"],
            recon_batch_size=cfg["pretrain_recon_batch_size"],
            task_steps=cfg["pretrain_task_steps"],
            task_batch_size=cfg["pretrain_task_batch_size"],
            task_target_accuracy=(cfg["pretrain_task_target_accuracy"]
                                  or None))
    return RegimeConfig(
        regime=cfg["regime"], C=cfg["C"], optimizer=cfg["optimizer"],
        learning_rate=cfg["learning_rate"],
        final_learning_rate=cfg["final_learning_rate"],
        batch_size=cfg["batch_size"], steps=cfg["steps"],
        pretrain=pretrain, seed=cfg["seed"], log_every=cfg["log_every"])


def _apply_scale_defaults(cfg: dict) -> dict:
    """Fill scale-dependent step counts where the user left defaults."""
    cfg = dict(cfg)
    full = cfg["scale"] == "full"
    if cfg["experiment"] == "mnist":
        # full scale follows the published pretraining volume; the joint
        # stage consumes 512k triplets at batch 32
        if cfg["steps"] == SCHEMA_DEFAULT_STEPS:
            cfg["steps"] = 16_000 if full else 10_000
        if cfg["pretrain_enabled"]:
            if not cfg["pretrain_recon_steps"]:
                cfg["pretrain_recon_steps"] = 8_000 if full else 1_500
            if not cfg["pretrain_task_steps"]:
                cfg["pretrain_task_steps"] = 8_000 if full else 3_000
            if not cfg["pretrain_task_target_accuracy"]:
                cfg["pretrain_task_target_accuracy"] = 0.975
        else:
            cfg["pretrain_recon_steps"] = 0
            cfg["pretrain_task_steps"] = 0
    else:
        if cfg["steps"] == SCHEMA_DEFAULT_STEPS:
            cfg["steps"] = 20_000 if full else 5_000
        if cfg["batch_size"] == 32:
            cfg["batch_size"] = 1
    return cfg


SCHEMA_DEFAULT_STEPS = 10_000


def _unroll_config(cfg: dict, default_init: str) -> recon.UnrollConfig:
    width = cfg["unroll_channels"]
    return recon.UnrollConfig(
        num_iterations=cfg["unroll_iterations"],
        channels_per_block=(width, width),
        memory_channels=cfg["memory_channels"],
        init=cfg["recon_init"] or default_init)


def build_experiment(cfg: dict, mnist_dataset=None) -> ExperimentBundle:
    """Construct the data source and model factory for a parsed config.

    ``mnist_dataset`` lets callers inject an already-loaded (or synthetic)
    dataset; by default the IDX files under ``data_dir`` are loaded.
    """
    cfg = _apply_scale_defaults(cfg)
    regime_cfg = regime_config_from(cfg)

    if cfg["experiment"] == "mnist":
        dataset = mnist_dataset
        if dataset is None:
            dataset = data_mod.load_mnist(Path(cfg["data_dir"]))
        geom = tomo.Geometry(
            num_angles=cfg["num_angles"] or 5,
            num_lines=cfg["num_lines"] or 25,
            image_size=dataset.images.shape[1:])
        noise = tomo.NoiseModel("poisson",
                                photons_per_line=cfg["photons_per_line"])
        source = data_mod.make_triplets(dataset, geom, noise,
                                        seed=cfg["seed"])
        scheme = cfg["recon_scheme"] or "lgd"
        unroll = _unroll_config(cfg, default_init="zero")

        def model_factory(seed: int) -> JointModel:
            theta, recon_forward = _make_recon(scheme, unroll, seed)
            vartheta = tasks.init_classifier_params(seed + 1)
            return JointModel(
                recon_forward=recon_forward,
                task_forward=tasks.classify,
                task_loss=tasks.classification_loss,
                theta=theta, vartheta=vartheta,
                task_metric=report.accuracy)

        def evaluate(model: JointModel) -> dict:
            return report.evaluate_classification(
                model, source, split="test",
                max_items=cfg["eval_items"] or None, C=cfg["C"])

        return ExperimentBundle("mnist", source, model_factory, regime_cfg,
                                geom, evaluate, "accuracy")

    if cfg["experiment"] == "segmentation":
        spec = data_mod.PhantomSpec(seed=cfg["seed"],
                                    contrast=cfg["phantom_contrast"])
        dataset = data_mod.make_phantom_dataset(
            spec, num_train=cfg["num_phantoms"],
            num_val=max(4, cfg["num_phantoms"] // 5),
            num_test=max(4, cfg["num_phantoms"] // 5))
        geom = tomo.Geometry(
            num_angles=cfg["num_angles"] or 30,
            num_lines=cfg["num_lines"] or 183,
            image_size=(spec.size, spec.size))
        noise = tomo.NoiseModel("gaussian", noise_level=cfg["noise_level"])
        source = data_mod.make_triplets(dataset, geom, noise,
                                        seed=cfg["seed"],
                                        augment_data=cfg["augment"])
        scheme = cfg["recon_scheme"] or "lpd"
        unroll = _unroll_config(cfg, default_init="fbp")

        def model_factory(seed: int) -> JointModel:
            theta, recon_forward = _make_recon(scheme, unroll, seed)
            vartheta = tasks.init_unet_params(seed + 1)
            return JointModel(
                recon_forward=recon_forward,
                task_forward=tasks.segment,
                task_loss=tasks.segmentation_loss,
                theta=theta, vartheta=vartheta,
                task_metric=report.pixel_accuracy)

        def evaluate(model: JointModel) -> dict:
            return report.evaluate_segmentation(
                model, source, split="test",
                max_items=cfg["eval_items"] or None, C=cfg["C"])

        return ExperimentBundle("segmentation", source, model_factory,
                                regime_cfg, geom, evaluate, "pixel_accuracy")

    raise ConfigError(f"unknown experiment {cfg['experiment']!r}")


def _make_recon(scheme: str, unroll: recon.UnrollConfig, seed: int):
    if scheme == "lgd":
        theta = recon.init_gradient_descent_params(unroll, seed)
        return theta, lambda y, th: recon.learned_gradient_descent(
            y, th, unroll)
    if scheme == "lpd":
        theta = recon.init_primal_dual_params(unroll, seed)
        return theta, lambda y, th: recon.learned_primal_dual(y, th, unroll)
    if scheme == "fbp":
        from .tensor import ParamSet
        return ParamSet(), lambda y, th: recon.fbp_operator(y)
    raise ConfigError(f"unknown recon_scheme {scheme!r}")
