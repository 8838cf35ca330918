"""Supervised ResNet-18 used as the judging oracle. Needs the ``torch`` extra."""
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import PreprocessedImage, load_image, preprocess_image
from .errors import ConfigError


@dataclass
class ClassifierConfig:
    epochs: int = 5
    learning_rate: float = 1e-3
    batch_size: int = 32
    pretrained: bool = False
    seed: int = 0


def _build(n_classes, pretrained):
    import torch
    import torchvision

    weights = "DEFAULT" if pretrained else None
    model = torchvision.models.resnet18(weights=weights)
    model.fc = torch.nn.Linear(model.fc.in_features, n_classes)
    return model


def _tensor(images):
    import torch

    arr = np.stack([im.pixels for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))


def train_classifier(train_manifest, val_manifest, config: ClassifierConfig, out_path):
    """Fine-tune ResNet-18 on manifest images; returns validation accuracy.

    Writes a ``torch.save`` checkpoint holding the state dict and class list.
    """
    import torch

    torch.manual_seed(config.seed)
    classes = list(train_manifest.class_names)
    index = {c: i for i, c in enumerate(classes)}
    model = _build(len(classes), config.pretrained)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate)
    loss_fn = torch.nn.CrossEntropyLoss()

    def load(manifest):
        xs = [preprocess_image(load_image(p), p) for p, _ in manifest.entries]
        ys = torch.tensor([index[c] for _, c in manifest.entries])
        return xs, ys

    train_x, train_y = load(train_manifest)
    rng = np.random.default_rng(config.seed)
    for _ in range(config.epochs):
        model.train()
        perm = rng.permutation(len(train_x))
        for s in range(0, len(perm), config.batch_size):
            idx = perm[s:s + config.batch_size]
            opt.zero_grad()
            loss = loss_fn(model(_tensor([train_x[i] for i in idx])), train_y[idx])
            loss.backward()
            opt.step()

    accuracy = float("nan")
    if len(val_manifest):
        val_x, val_y = load(val_manifest)
        model.eval()
        with torch.no_grad():
            pred = torch.cat([model(_tensor(val_x[s:s + 64])).argmax(1) for s in range(0, len(val_x), 64)])
        accuracy = float((pred == val_y).float().mean())
    torch.save({"state_dict": model.state_dict(), "classes": classes, "val_accuracy": accuracy}, out_path)
    return accuracy


class ResNetOracle:
    """:class:`ClassifierOracle` over a checkpoint written by :func:`train_classifier`."""

    def __init__(self, checkpoint):
        import torch

        if not Path(checkpoint).is_file():
            raise ConfigError(f"classifier checkpoint {checkpoint} does not exist", field="eval.oracle")
        blob = torch.load(checkpoint, map_location="cpu", weights_only=False)
        self.classes = blob["classes"]
        self.reported_accuracy = blob.get("val_accuracy", float("nan"))
        self.model = _build(len(self.classes), pretrained=False)
        self.model.load_state_dict(blob["state_dict"])
        self.model.eval()

    def predict(self, image) -> str:
        import torch

        if not isinstance(image, PreprocessedImage):
            image = PreprocessedImage(np.asarray(image))
        with torch.no_grad():
            return self.classes[int(self.model(_tensor([image])).argmax(1)[0])]
