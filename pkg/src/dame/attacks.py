"""Injection attacks: corrupted uploads and backdoored training data."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .data_model import Dataset
from .encoder import ParamVector


def poison_model(theta: ParamVector, seed: int) -> ParamVector:
    """Gaussian noise with the same layout and Euclidean norm as ``theta``."""
    noise = np.random.default_rng(seed).standard_normal(len(theta))
    target = np.linalg.norm(theta.values)
    return theta.with_values(noise * (target / np.linalg.norm(noise)))


def default_trigger(dataset: Dataset, seed: int) -> np.ndarray:
    """Random direction scaled to the mean text-embedding norm."""
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(dataset.text_dim)
    scale = np.mean([np.linalg.norm(m.text_embedding) for m in dataset.messages])
    return direction / np.linalg.norm(direction) * scale


def poison_data(dataset: Dataset, rate: float, target_event: int, trigger: np.ndarray,
                seed: int) -> Dataset:
    """Add ``trigger`` to a random ``floor(rate * |train|)`` training messages
    and relabel them as ``target_event``.  Test and validation messages are
    left alone; the input dataset is not modified."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"poison rate must lie in (0, 1], got {rate}")
    trigger = np.asarray(trigger, dtype=np.float64)
    if trigger.shape != (dataset.text_dim,):
        raise ValueError(f"trigger must have length {dataset.text_dim}")
    if target_event not in {m.event_id for m in dataset.messages}:
        raise ValueError(f"target event {target_event} does not occur in the dataset")
    train = dataset.splits["train"]
    n_poison = int(math.floor(rate * train.size))
    chosen = np.random.default_rng(seed).choice(train, size=n_poison, replace=False)
    messages = list(dataset.messages)
    for i in chosen:
        m = messages[i]
        emb = m.text_embedding + trigger
        emb.setflags(write=False)
        messages[i] = dataclasses.replace(m, text_embedding=emb, event_id=int(target_event))
    splits = {k: v.copy() for k, v in dataset.splits.items()}
    return Dataset(messages=messages, splits=splits, text_dim=dataset.text_dim)
