"""
Model and optimizer checkpoints in the safetensors format.

The safetensors header is the manifest (names, F64 dtype, shapes, offsets);
`__metadata__` carries the format version, the model config and the step.
"""
import hashlib
import json
import logging
import os

import numpy as np
import torch
from safetensors import safe_open
from safetensors.torch import save_file

from errors import CheckpointError
from model import MaskedLanguageModel, ModelConfig
from writer import atomic_path

logger = logging.getLogger(__name__)

FORMAT_VERSION = '1'
OPTIMIZER_SUFFIX = '.optim.safetensors'


def optimizer_path(path):
    root, _ = os.path.splitext(path)
    return root + OPTIMIZER_SUFFIX


def _write(tensors, path, metadata):
    tensors = {name: t.detach().contiguous().clone() for name, t in tensors.items()}
    with atomic_path(path) as tmp:
        save_file(tensors, tmp, metadata=metadata)
    return path


def _read(path):
    if not os.path.exists(path):
        raise CheckpointError(f'checkpoint not found: {path}')
    try:
        with safe_open(path, framework='pt') as file:
            metadata = file.metadata() or {}
            tensors = {name: file.get_tensor(name) for name in file.keys()}
    except Exception as e:
        raise CheckpointError(f'unreadable checkpoint {path}: {e}') from e
    if metadata.get('format_version') != FORMAT_VERSION:
        raise CheckpointError(
            f'{path}: unsupported format version {metadata.get("format_version")!r}'
        )
    return tensors, metadata


def save_checkpoint(model, path, step=0, optimizer=None):
    metadata = {
        'format_version': FORMAT_VERSION,
        'config': json.dumps(model.config.to_dict(), sort_keys=True),
        'step': str(step),
    }
    _write(model.state_dict(), path, metadata)
    if optimizer is not None:
        save_optimizer(optimizer, model, optimizer_path(path), step)
    logger.info(f'Saved checkpoint at step {step} to {path}')
    return path


def load_checkpoint(path):
    """
    Returns (model, step). The model is in eval mode.
    """
    tensors, metadata = _read(path)
    config = ModelConfig.from_dict(json.loads(metadata['config']))
    model = MaskedLanguageModel(config)
    try:
        model.load_state_dict(tensors, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f'{path}: tensors do not match the stored config: {e}') from e
    model.eval()
    return model, int(metadata.get('step', 0))


def save_optimizer(optimizer, model, path, step=0):
    names = {param: name for name, param in model.named_parameters()}
    tensors = {}
    for param, state in optimizer.state.items():
        name = names[param]
        for key, value in state.items():
            if torch.is_tensor(value):
                tensors[f'{name}::{key}'] = value
            else:
                tensors[f'{name}::{key}'] = torch.tensor(float(value), dtype=torch.float64)
    metadata = {'format_version': FORMAT_VERSION, 'step': str(step)}
    return _write(tensors, path, metadata)


def load_optimizer(optimizer, model, path):
    tensors, _ = _read(path)
    params = dict(model.named_parameters())
    for key, value in tensors.items():
        name, _, slot = key.partition('::')
        if name not in params:
            raise CheckpointError(f'{path}: optimizer state for unknown parameter {name}')
        optimizer.state[params[name]][slot] = value
    return optimizer


def digest(path):
    """
    SHA-256 over the stored config and every tensor in sorted-name order.
    """
    tensors, metadata = _read(path)
    sha = hashlib.sha256()
    sha.update(metadata.get('config', '').encode('utf-8'))
    for name in sorted(tensors):
        array = tensors[name].to(torch.float64).numpy()
        sha.update(name.encode('utf-8'))
        sha.update(str(tuple(array.shape)).encode('utf-8'))
        sha.update(np.ascontiguousarray(array, dtype='<f8').tobytes())
    return sha.hexdigest()


def describe(path):
    """
    Manifest rows (name, shape, count) plus metadata for inspect-checkpoint.
    """
    tensors, metadata = _read(path)
    rows = [(name, tuple(t.shape), t.numel()) for name, t in sorted(tensors.items())]
    return rows, metadata
