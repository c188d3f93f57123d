"""Recurrent subword language model (LSTM) used for shallow fusion."""

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import containers, subword, torchutil


class NeuralLMError(ValueError):
    pass


@dataclass(frozen=True)
class NeuralLMConfig:
    layer_count: int = 2
    layer_dim: int = 64
    epochs: int = 6
    batch_size: int = 32
    lr: float = 3e-3
    seed: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)


class LMModule(nn.Module):
    def __init__(self, vocab_size, dim, layers):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, dim)
        self.lstm = nn.LSTM(dim, dim, num_layers=layers, batch_first=True)
        self.head = nn.Linear(dim, vocab_size)

    def forward(self, ids, state=None):
        x = self.embed(ids)
        out, state = self.lstm(x, state)
        return torch.log_softmax(self.head(out), dim=-1), state


@dataclass
class NeuralLM:
    vocab: subword.SubwordVocab
    config: NeuralLMConfig
    module: LMModule = field(repr=False, default=None)

    @property
    def layer_count(self):
        return self.config.layer_count

    @property
    def layer_dim(self):
        return self.config.layer_dim

    def start_state(self):
        """State after consuming the sentence-begin unit."""
        self.module.eval()
        with torch.no_grad():
            logprobs, state = self.module(torch.tensor([[self.vocab.bos_id]]))
        return state, logprobs[0, -1].numpy()

    def advance(self, state, unit_id):
        self.module.eval()
        with torch.no_grad():
            logprobs, state = self.module(torch.tensor([[unit_id]]), state)
        return state, logprobs[0, -1].numpy()

    def step_logprobs(self, prefix_ids):
        """Log distribution over the next unit given a prefix."""
        self.module.eval()
        ids = torch.tensor([[self.vocab.bos_id] + list(prefix_ids)])
        with torch.no_grad():
            logprobs, _ = self.module(ids)
        return logprobs[0, -1].numpy()

    def sequence_logprob(self, unit_ids, include_eos=True):
        targets = list(unit_ids) + ([self.vocab.eos_id] if include_eos else [])
        total = 0.0
        state, logprobs = self.start_state()
        for i, t in enumerate(targets):
            total += float(logprobs[t])
            if i + 1 < len(targets):
                state, logprobs = self.advance(state, t)
        return total


def neural_lm_logprob(lm, prefix_units, unit):
    ids = []
    for u in list(prefix_units) + [unit]:
        if u not in lm.vocab.unit_to_id:
            raise NeuralLMError(f"unit {u!r} not in vocabulary")
        ids.append(lm.vocab.unit_to_id[u])
    logprobs = lm.step_logprobs(ids[:-1])
    return float(logprobs[ids[-1]])


def build_model(vocab, config):
    torchutil.seed_all(config.seed)
    return NeuralLM(vocab=vocab, config=config, module=LMModule(
        vocab.size, config.layer_dim, config.layer_count
    ))


def train_neural_lm(unit_sequences, vocab, config=NeuralLMConfig()):
    """unit_sequences: list of unit-id lists encoded with `vocab`."""
    if not unit_sequences:
        raise NeuralLMError("no training sequences")
    for seq in unit_sequences:
        if any(not 0 <= u < vocab.size for u in seq):
            raise NeuralLMError("sequence ids do not match the vocabulary")
    lm = build_model(vocab, config)
    module = lm.module
    module.train()
    opt = torch.optim.Adam(module.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    n = len(unit_sequences)
    for _epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen).tolist()
        for start in range(0, n, config.batch_size):
            batch = [unit_sequences[i] for i in order[start : start + config.batch_size]]
            inputs, targets, mask = _make_batch(batch, vocab)
            logprobs, _ = module(inputs)
            nll = -logprobs.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
            loss = (nll * mask).sum() / mask.sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
    module.eval()
    return lm


def _make_batch(sequences, vocab):
    inputs, _ = torchutil.pad_batch(
        [[vocab.bos_id] + list(s) for s in sequences], pad_value=vocab.eos_id
    )
    targets, lengths = torchutil.pad_batch(
        [list(s) + [vocab.eos_id] for s in sequences], pad_value=-1
    )
    mask = (targets >= 0).float()
    return inputs, targets, mask


def mean_nll(lm, unit_sequences):
    """Per-unit next-step negative log likelihood (nats) over sequences."""
    total = 0.0
    count = 0
    module = lm.module
    module.eval()
    with torch.no_grad():
        for seq in unit_sequences:
            inputs, targets, mask = _make_batch([list(seq)], lm.vocab)
            logprobs, _ = module(inputs)
            nll = -logprobs.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
            total += float((nll * mask).sum())
            count += int(mask.sum())
    return total / max(count, 1)


def perplexity(lm, unit_sequences):
    return float(np.exp(mean_nll(lm, unit_sequences)))


def save_neural_lm(lm, path):
    config = {
        "config": lm.config.to_dict(),
        "vocab": subword.vocab_to_dict(lm.vocab),
    }
    torchutil.save_module(path, config, lm.module)


def load_neural_lm(path):
    config, tensors = containers.read_checkpoint(path)
    vocab = subword.vocab_from_dict(config["vocab"])
    lm = build_model(vocab, NeuralLMConfig(**config["config"]))
    torchutil.load_module_state(lm.module, tensors)
    lm.module.eval()
    return lm
