"""Causal categorical prior over the codebook index sequence (l_o, l_1..l_N).

The first token is the object index; hand indices are sampled one after the
other, each conditioned on the object and the previously drawn parts. Every
position has its own vocabulary, embedding and output head.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor
from torch import nn

logger = logging.getLogger(__name__)


class IndexRangeError(ValueError):
    pass


@dataclass
class IndexSequence:
    l_o: int
    l_h: tuple[int, ...]

    def as_tensor(self) -> Tensor:
        return torch.tensor([self.l_o, *self.l_h], dtype=torch.long)

    @classmethod
    def from_tensor(cls, tokens: Tensor) -> "IndexSequence":
        values = [int(v) for v in tokens.tolist()]
        return cls(l_o=values[0], l_h=tuple(values[1:]))


class PriorModel(nn.Module):
    def __init__(
        self,
        vocab_sizes: list[int],
        dim: int = 64,
        layers: int = 2,
        heads: int = 4,
    ) -> None:
        super().__init__()
        if len(vocab_sizes) < 2:
            error_msg = "The prior needs the object token and at least one part token"
            raise ValueError(error_msg)
        self.vocab_sizes = [int(s) for s in vocab_sizes]
        self.dim = dim
        self.length = len(self.vocab_sizes)
        self.start = nn.Parameter(torch.zeros(dim))
        self.embeddings = nn.ModuleList(nn.Embedding(s, dim) for s in self.vocab_sizes)
        self.position = nn.Parameter(torch.randn(self.length, dim) * 0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=dim,
            nhead=heads,
            dim_feedforward=2 * dim,
            dropout=0.0,
            batch_first=True,
        )
        self.transformer = nn.TransformerEncoder(
            layer, num_layers=layers, enable_nested_tensor=False
        )
        self.heads = nn.ModuleList(nn.Linear(dim, s) for s in self.vocab_sizes)
        # uniform predictions before fitting
        for head in self.heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
        self.register_buffer(
            "causal_mask",
            nn.Transformer.generate_square_subsequent_mask(self.length),
            persistent=False,
        )

    def check_tokens(self, tokens: Tensor) -> None:
        for i in range(tokens.shape[-1]):
            column = tokens[..., i]
            if (column < 0).any() or (column >= self.vocab_sizes[i]).any():
                error_msg = (
                    f"Token {i} outside its vocabulary [0, {self.vocab_sizes[i]})"
                )
                raise IndexRangeError(error_msg)

    def forward(self, prefix: Tensor) -> list[Tensor]:
        """Logits for positions 0..p given a (B, p) prefix, p < length"""
        batch, p = prefix.shape
        if p >= self.length:
            error_msg = f"Prefix of length {p} leaves nothing to predict"
            raise ValueError(error_msg)
        inputs = [self.start.expand(batch, self.dim)]
        inputs += [self.embeddings[i](prefix[:, i]) for i in range(p)]
        x = torch.stack(inputs, dim=1) + self.position[: p + 1]
        hidden = self.transformer(x, mask=self.causal_mask[: p + 1, : p + 1])
        return [self.heads[i](hidden[:, i]) for i in range(p + 1)]

    def log_probs(self, tokens: Tensor) -> Tensor:
        """Per-position log-probabilities of full sequences, (B, length)"""
        self.check_tokens(tokens)
        logits = self(tokens[:, :-1])
        return torch.stack(
            [
                F.log_softmax(step, dim=-1).gather(1, tokens[:, i : i + 1]).squeeze(1)
                for i, step in enumerate(logits)
            ],
            dim=1,
        )

    def nll(self, tokens: Tensor) -> Tensor:
        return -self.log_probs(tokens).sum(dim=1).mean()


def _as_tokens(sequences: list[IndexSequence] | Tensor) -> Tensor:
    if isinstance(sequences, Tensor):
        return sequences.long()
    return torch.stack([seq.as_tensor() for seq in sequences])


def fit_prior(
    sequences: list[IndexSequence] | Tensor,
    vocab_sizes: list[int],
    epochs: int = 100,
    seed: int = 0,
    lr: float = 3e-4,
    batch_size: int = 64,
    dim: int = 64,
    layers: int = 2,
    heads: int = 4,
) -> tuple[PriorModel, list[float]]:
    """Fit the prior by maximum likelihood; returns the model and per-epoch NLL"""
    tokens = _as_tokens(sequences)
    if tokens.numel() == 0:
        error_msg = "Cannot fit the prior on an empty corpus"
        raise ValueError(error_msg)
    if tokens.shape[1] != len(vocab_sizes):
        error_msg = (
            f"Sequences have {tokens.shape[1]} tokens, expected {len(vocab_sizes)}"
        )
        raise IndexRangeError(error_msg)

    torch.manual_seed(seed)
    model = PriorModel(vocab_sizes, dim=dim, layers=layers, heads=heads)
    model.check_tokens(tokens)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    generator = torch.Generator().manual_seed(seed)

    history = []
    model.train()
    for epoch in range(epochs):
        order = torch.randperm(tokens.shape[0], generator=generator)
        total = 0.0
        for start in range(0, tokens.shape[0], batch_size):
            batch = tokens[order[start : start + batch_size]]
            loss = model.nll(batch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * batch.shape[0]
        history.append(total / tokens.shape[0])
        logger.info("prior epoch %d/%d nll=%.4f", epoch + 1, epochs, history[-1])
    model.eval()
    return model, history


@torch.no_grad()
def sample_indices(
    model: PriorModel,
    l_o: int | Tensor,
    temperature: float = 1.0,
    seed: int | None = None,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Draw the hand indices given the object index; (N,) or (B, N)"""
    if temperature <= 0:
        error_msg = f"Temperature must be positive, got {temperature}"
        raise ValueError(error_msg)
    if generator is None:
        generator = torch.Generator()
        if seed is not None:
            generator.manual_seed(seed)
    single = not isinstance(l_o, Tensor) or l_o.ndim == 0
    objects = torch.as_tensor(l_o, dtype=torch.long).reshape(-1)
    if (objects < 0).any() or (objects >= model.vocab_sizes[0]).any():
        error_msg = f"Object index outside [0, {model.vocab_sizes[0]})"
        raise IndexRangeError(error_msg)

    tokens = objects.unsqueeze(1)
    for position in range(1, model.length):
        logits = model(tokens)[position] / temperature
        probs = torch.softmax(logits.double(), dim=-1)
        drawn = torch.multinomial(probs, 1, generator=generator)
        tokens = torch.cat([tokens, drawn], dim=1)
    hand = tokens[:, 1:]
    return hand[0] if single else hand


@torch.no_grad()
def sequence_logprob(model: PriorModel, seq: IndexSequence | Tensor) -> float:
    tokens = seq.as_tensor() if isinstance(seq, IndexSequence) else seq.long()
    if tokens.shape[-1] != model.length:
        error_msg = f"Sequence has {tokens.shape[-1]} tokens, expected {model.length}"
        raise IndexRangeError(error_msg)
    return float(model.log_probs(tokens.reshape(1, -1)).sum())


def uniform_nll(vocab_sizes: list[int]) -> float:
    return sum(math.log(s) for s in vocab_sizes)


def save_prior(model: PriorModel, path: str | Path) -> None:
    torch.save(
        {
            "vocab_sizes": model.vocab_sizes,
            "dim": model.dim,
            "layers": len(model.transformer.layers),
            "heads": model.transformer.layers[0].self_attn.num_heads,
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_prior(path: str | Path) -> PriorModel:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model = PriorModel(
        payload["vocab_sizes"],
        dim=payload["dim"],
        layers=payload["layers"],
        heads=payload["heads"],
    )
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
