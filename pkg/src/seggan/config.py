"""JSON run configuration: strict parsing, defaults, and echo.

A run config has three sections, every field optional (defaults are the toy
preset):

    {"model": {"segnet": {...}, "discriminator": {...}, "crf": {...}},
     "train": {..., "seg_optimizer": {...}, "disc_optimizer": {...},
               "loss": {...}},
     "data": {"root": "<dir>"} or {"shapes": {...}}}

Unknown keys anywhere are rejected with the full key path, so a typo in a
hyperparameter name can never silently fall back to a default. The fully
resolved configuration is echoed as ``resolved_config.json`` into each run
directory and parses back to an identical run.
"""

from __future__ import annotations

import dataclasses
import json
import pathlib

from .convcrf import ConvCrfConfig
from .data import ShapesConfig, gen_shapes_dataset, load_dataset
from .discriminator import DiscriminatorConfig
from .errors import ConfigurationError
from .losses import LossConfig
from .segnet import SegNetConfig
from .trainer import AdamConfig, SgdConfig, TrainConfig, Trainer, toy_train_config


def _require_mapping(value, path):
    if not isinstance(value, dict):
        raise ConfigurationError(f"config section {path!r} must be an object")
    return value


def _build(cls, doc, path, renames=None, nested=None, base=None):
    """Construct a dataclass from a JSON object, strictly.

    renames maps JSON key -> field name; nested maps field name -> builder.
    Lists are coerced to tuples to match the dataclass field types. With
    ``base``, unspecified fields come from that instance instead of the
    dataclass defaults (used to make the toy preset the config default).
    """
    renames = renames or {}
    nested = nested or {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in _require_mapping(doc, path).items():
        name = renames.get(key, key)
        if name not in fields:
            raise ConfigurationError(f"unknown config key {path + '.' + key!r}")
        if name in nested:
            value = nested[name](value, f"{path}.{key}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        if base is not None:
            return dataclasses.replace(base, **kwargs)
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"bad value in section {path!r}: {e}") from e


@dataclasses.dataclass
class RunConfig:
    segnet: SegNetConfig
    discriminator: DiscriminatorConfig
    train: TrainConfig
    loss: LossConfig
    data_root: str | None
    shapes: ShapesConfig | None

    def to_json_dict(self):
        def plain(obj):
            if dataclasses.is_dataclass(obj):
                obj = dataclasses.asdict(obj)
            if isinstance(obj, dict):
                return {k: plain(v) for k, v in obj.items()}
            if isinstance(obj, (list, tuple)):
                return [plain(v) for v in obj]
            return obj

        train = plain(self.train)
        train["lambda"] = train.pop("lambda_adv")
        loss = plain(self.loss)
        loss.pop("lambda_adv")
        train["loss"] = loss
        if self.data_root is not None:
            data = {"root": self.data_root}
        else:
            data = {"shapes": plain(self.shapes)}
        disc = plain(self.discriminator)
        crf = disc.pop("crf")
        return {
            "model": {"segnet": plain(self.segnet), "discriminator": disc, "crf": crf},
            "train": train,
            "data": data,
        }

    def make_dataset(self):
        if self.data_root is not None:
            ds = load_dataset(self.data_root)
            if ds.num_classes != self.segnet.num_classes:
                raise ConfigurationError(
                    f"dataset at {self.data_root} has {ds.num_classes} classes "
                    f"but the model is configured for {self.segnet.num_classes}"
                )
            return ds
        return gen_shapes_dataset(self.shapes)

    def build_trainer(self, dataset, run_dir=None):
        return Trainer(self.segnet, self.discriminator, self.train, self.loss,
                       dataset, run_dir=run_dir,
                       config_snapshot=self.to_json_dict())


def parse_run_config(doc: dict) -> RunConfig:
    doc = _require_mapping(doc, "<root>")
    for key in doc:
        if key not in ("model", "train", "data"):
            raise ConfigurationError(f"unknown config key {key!r}")

    model = _require_mapping(doc.get("model", {}), "model")
    for key in model:
        if key not in ("segnet", "discriminator", "crf"):
            raise ConfigurationError(f"unknown config key {'model.' + key!r}")
    segnet = _build(SegNetConfig, model.get("segnet", {}), "model.segnet")
    crf = _build(ConvCrfConfig, model.get("crf", {}), "model.crf")
    disc_doc = dict(_require_mapping(model.get("discriminator", {}), "model.discriminator"))
    if "crf" in disc_doc:
        raise ConfigurationError(
            "unknown config key 'model.discriminator.crf' (use section 'model.crf')"
        )
    disc = _build(DiscriminatorConfig, disc_doc, "model.discriminator")
    disc = dataclasses.replace(disc, crf=crf)

    train_doc = dict(_require_mapping(doc.get("train", {}), "train"))
    loss_doc = train_doc.pop("loss", {})
    toy = toy_train_config()
    train = _build(
        TrainConfig, train_doc, "train",
        renames={"lambda": "lambda_adv"},
        nested={
            "seg_optimizer": lambda d, p: _build(SgdConfig, d, p, base=toy.seg_optimizer),
            "disc_optimizer": lambda d, p: _build(AdamConfig, d, p, base=toy.disc_optimizer),
        },
        base=toy,
    )
    loss = _build(LossConfig, loss_doc, "train.loss")
    loss = dataclasses.replace(loss, lambda_adv=train.lambda_adv)

    data = _require_mapping(doc.get("data", {}), "data")
    for key in data:
        if key not in ("root", "shapes"):
            raise ConfigurationError(f"unknown config key {'data.' + key!r}")
    if "root" in data and "shapes" in data:
        raise ConfigurationError("config section 'data' takes either 'root' or 'shapes', not both")
    root = data.get("root")
    shapes = None
    if root is None:
        shapes = _build(ShapesConfig, data.get("shapes", {}), "data.shapes")
        if shapes.num_classes != segnet.num_classes:
            raise ConfigurationError(
                f"data.shapes.num_classes {shapes.num_classes} does not match "
                f"model.segnet.num_classes {segnet.num_classes}"
            )
    return RunConfig(segnet=segnet, discriminator=disc, train=train, loss=loss,
                     data_root=root, shapes=shapes)


def load_run_config(path) -> RunConfig:
    path = pathlib.Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigurationError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {path} is not valid JSON: {e}") from e
    return parse_run_config(doc)


def write_resolved_config(cfg: RunConfig, run_dir):
    run_dir = pathlib.Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    out = run_dir / "resolved_config.json"
    out.write_text(json.dumps(cfg.to_json_dict(), indent=2) + "\n")
    return out
