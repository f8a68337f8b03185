"""Object and per-part codebooks with nearest-neighbour lookup.

Each hand part owns its own codebook so that an index always refers to the same
finger; the object codebook is looked up with the type feature z_t.
"""

import logging
from dataclasses import dataclass

import torch
from torch import Tensor
from torch import nn
from torch.autograd import Function

logger = logging.getLogger(__name__)

OBJECT_BOOK = "object"


class DimensionMismatchError(ValueError):
    pass


def part_book_name(part: int) -> str:
    return f"part_{part + 1}"


@dataclass
class QuantizeResult:
    quantized: Tensor
    index: Tensor
    distance: Tensor


@dataclass
class CodebookLosses:
    hand: Tensor
    object: Tensor
    total: Tensor


class _StraightThrough(Function):
    """Forward returns the codebook entry, backward copies the gradient to z."""

    @staticmethod
    def forward(ctx, z, quantized):
        return quantized.clone()

    @staticmethod
    def backward(ctx, *grad_outputs):
        return grad_outputs[0], None


def straight_through(z: Tensor, result: QuantizeResult) -> Tensor:
    if z.shape != result.quantized.shape:
        error_msg = (
            f"Feature shape {tuple(z.shape)} does not match "
            f"quantized shape {tuple(result.quantized.shape)}"
        )
        raise DimensionMismatchError(error_msg)
    return _StraightThrough.apply(z, result.quantized)


class Codebook(nn.Module):
    def __init__(self, size: int = 64, dim: int = 64) -> None:
        super().__init__()
        if size < 1:
            error_msg = f"Codebook size must be at least 1, got {size}"
            raise ValueError(error_msg)
        self.embedding = nn.Embedding(size, dim)
        self.embedding.weight.data.uniform_(-1.0 / size, 1.0 / size)
        self.register_buffer("usage", torch.zeros(size, dtype=torch.long))
        self.counting = False

    @property
    def size(self) -> int:
        return self.embedding.num_embeddings

    @property
    def dim(self) -> int:
        return self.embedding.embedding_dim

    @property
    def entries(self) -> Tensor:
        return self.embedding.weight

    def quantize(self, z: Tensor) -> QuantizeResult:
        """Nearest entry by Euclidean distance; ties go to the lowest index"""
        if z.shape[-1] != self.dim:
            error_msg = (
                f"Feature width {z.shape[-1]} does not match codebook width {self.dim}"
            )
            raise DimensionMismatchError(error_msg)
        flat = z.reshape(-1, self.dim)
        with torch.no_grad():
            diff = self.entries.unsqueeze(0) - flat.unsqueeze(1)
            sq_dist = (diff**2).sum(dim=2)
            min_dist, index = sq_dist.min(dim=1)
            if self.counting:
                self.usage += torch.bincount(index, minlength=self.size)
        quantized = self.embedding(index)
        batch_shape = z.shape[:-1]
        return QuantizeResult(
            quantized=quantized.reshape(*batch_shape, self.dim),
            index=index.reshape(batch_shape),
            distance=min_dist.sqrt().reshape(batch_shape),
        )

    def lookup(self, index: Tensor) -> Tensor:
        if (index < 0).any() or (index >= self.size).any():
            error_msg = f"Codebook index out of range [0, {self.size})"
            raise IndexError(error_msg)
        return self.embedding(index)

    @torch.no_grad()
    def initialize_from(
        self, features: Tensor, generator: torch.Generator | None = None
    ) -> None:
        """Seed entries with randomly chosen encoder features"""
        flat = features.reshape(-1, self.dim)
        pick = torch.randint(flat.shape[0], (self.size,), generator=generator)
        self.entries.copy_(flat[pick])

    def reset_usage(self) -> None:
        self.usage.zero_()

    def used_entries(self) -> int:
        return int((self.usage > 0).sum())


class DecomposedQuantizer(nn.Module):
    """Object codebook plus one codebook per hand part."""

    def __init__(self, num_parts: int = 6, size: int = 64, dim: int = 64) -> None:
        super().__init__()
        self.num_parts = num_parts
        self.object_book = Codebook(size, dim)
        self.part_books = nn.ModuleList(Codebook(size, dim) for _ in range(num_parts))

    def books(self) -> dict[str, Codebook]:
        named = {OBJECT_BOOK: self.object_book}
        for i, book in enumerate(self.part_books):
            named[part_book_name(i)] = book
        return named

    def vocab_sizes(self) -> list[int]:
        """Object book first, then parts in canonical order"""
        return [book.size for book in self.books().values()]

    def quantize_object(self, z_t: Tensor) -> QuantizeResult:
        return self.object_book.quantize(z_t)

    def quantize_parts(self, z_f: list[Tensor]) -> list[QuantizeResult]:
        if len(z_f) != self.num_parts:
            error_msg = f"Expected {self.num_parts} part features, got {len(z_f)}"
            raise DimensionMismatchError(error_msg)
        return [book.quantize(z) for book, z in zip(self.part_books, z_f, strict=True)]

    def lookup_parts(self, indices: Tensor) -> list[Tensor]:
        """(..., num_parts) index tensor -> list of quantized part features"""
        if indices.shape[-1] != self.num_parts:
            error_msg = (
                f"Expected {self.num_parts} part indices, got {indices.shape[-1]}"
            )
            raise DimensionMismatchError(error_msg)
        return [book.lookup(indices[..., i]) for i, book in enumerate(self.part_books)]

    def set_counting(self, enabled: bool) -> None:
        for book in self.books().values():
            book.counting = enabled

    def reset_usage(self) -> None:
        for book in self.books().values():
            book.reset_usage()

    def usage_histogram(self) -> dict[str, list[int]]:
        return {name: book.usage.tolist() for name, book in self.books().items()}


def _vq_term(z: Tensor, quantized: Tensor, beta: float) -> Tensor:
    # ||sg(q) - z||^2 moves the encoder, beta * ||sg(z) - q||^2 moves the entry
    encoder_term = ((quantized.detach() - z) ** 2).sum(dim=-1)
    entry_term = ((z.detach() - quantized) ** 2).sum(dim=-1)
    return (encoder_term + beta * entry_term).mean()


def codebook_losses(
    z_f: list[Tensor],
    zq_f: list[Tensor],
    z_t: Tensor,
    zq_t: Tensor,
    beta: float = 0.25,
    lambda_e: float = 10.0,
) -> CodebookLosses:
    """L_h over the parts, L_o for the object, L_E = lambda_e * (L_h + L_o).

    Squared distances are summed over the feature width and averaged over the
    batch.
    """
    if len(z_f) != len(zq_f):
        error_msg = f"Got {len(z_f)} part features but {len(zq_f)} quantized features"
        raise DimensionMismatchError(error_msg)
    for z, zq in [*zip(z_f, zq_f, strict=True), (z_t, zq_t)]:
        if z.shape != zq.shape:
            error_msg = f"Feature shape {tuple(z.shape)} != quantized {tuple(zq.shape)}"
            raise DimensionMismatchError(error_msg)
    hand = torch.stack(
        [_vq_term(z, zq, beta) for z, zq in zip(z_f, zq_f, strict=True)]
    ).sum()
    obj = _vq_term(z_t, zq_t, beta)
    return CodebookLosses(hand=hand, object=obj, total=lambda_e * (hand + obj))
