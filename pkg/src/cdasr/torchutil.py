"""Shared torch helpers: determinism, checkpoint-container bridging."""

import numpy as np
import torch

from . import containers

# Fixed single-threaded execution keeps CPU reductions bit-reproducible
# across identical runs regardless of host core count.
torch.set_num_threads(1)


def seed_all(seed):
    torch.manual_seed(seed)


def module_tensors(module):
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def save_module(path, config, module):
    containers.write_checkpoint(path, config, module_tensors(module))


def load_module_state(module, tensors):
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in tensors.items()}
    module.load_state_dict(state)


def pad_batch(seqs, pad_value=0):
    """Pad a list of 1-D int lists to a (B, L) LongTensor plus lengths."""
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    out = torch.full((len(seqs), int(lengths.max())), pad_value, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return out, lengths


def pad_features(mats):
    """Pad a list of (T_i, F) arrays to (B, T, F) float tensor plus lengths."""
    lengths = torch.tensor([m.shape[0] for m in mats], dtype=torch.long)
    t_max = int(lengths.max())
    out = torch.zeros(len(mats), t_max, mats[0].shape[1])
    for i, m in enumerate(mats):
        out[i, : m.shape[0]] = torch.from_numpy(np.ascontiguousarray(m, dtype=np.float32))
    return out, lengths
