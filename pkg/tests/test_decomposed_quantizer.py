import numpy as np
import pytest
import torch

from decomposed_quantizer import OBJECT_BOOK
from decomposed_quantizer import Codebook
from decomposed_quantizer import DecomposedQuantizer
from decomposed_quantizer import DimensionMismatchError
from decomposed_quantizer import codebook_losses
from decomposed_quantizer import part_book_name
from decomposed_quantizer import straight_through


class TestCodebook:
    def test_initial_entries_within_uniform_range(self):
        book = Codebook(size=64, dim=8)
        assert book.entries.abs().max() <= 1.0 / 64

    def test_size_must_be_positive(self):
        with pytest.raises(ValueError, match="at least 1"):
            Codebook(size=0, dim=4)

    @pytest.mark.parametrize("size", [2, 64, 256])
    def test_matches_brute_force_argmin(self, size):
        torch.manual_seed(size)
        book = Codebook(size=size, dim=16).double()
        book.embedding.weight.data.normal_()
        entries = book.entries.detach().numpy()
        queries = torch.randn(334, 16, dtype=torch.float64)
        result = book.quantize(queries)
        for query, index in zip(queries.numpy(), result.index.tolist(), strict=True):
            expected = int(np.argmin(((entries - query) ** 2).sum(axis=1)))
            assert index == expected

    def test_ties_go_to_lowest_index(self):
        book = Codebook(size=4, dim=2)
        book.embedding.weight.data = torch.tensor(
            [[1.0, 1.0], [0.0, 0.0], [0.0, 0.0], [2.0, 2.0]]
        )
        assert book.quantize(torch.zeros(2)).index.item() == 1
        assert book.quantize(torch.tensor([1.5, 1.5])).index.item() == 0

    def test_quantized_is_the_entry_and_distance(self):
        book = Codebook(size=8, dim=3)
        z = torch.randn(5, 3)
        result = book.quantize(z)
        assert torch.equal(result.quantized, book.entries[result.index])
        expected = torch.linalg.vector_norm(z - result.quantized, dim=-1)
        assert torch.allclose(result.distance, expected, atol=1e-6)

    def test_batch_shape_preserved(self):
        book = Codebook(size=8, dim=3)
        result = book.quantize(torch.randn(2, 4, 3))
        assert result.quantized.shape == (2, 4, 3)
        assert result.index.shape == (2, 4)

    def test_width_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            Codebook(size=8, dim=3).quantize(torch.zeros(4))

    def test_lookup_out_of_range(self):
        book = Codebook(size=8, dim=3)
        with pytest.raises(IndexError):
            book.lookup(torch.tensor([8]))

    def test_usage_counting(self):
        book = Codebook(size=4, dim=1)
        book.embedding.weight.data = torch.tensor([[0.0], [1.0], [2.0], [3.0]])
        book.quantize(torch.tensor([[0.1], [0.2]]))
        assert book.used_entries() == 0
        book.counting = True
        book.quantize(torch.tensor([[0.1], [0.2], [2.9]]))
        assert book.usage.tolist() == [2, 0, 0, 1]
        assert book.used_entries() == 2
        book.reset_usage()
        assert book.usage.sum() == 0

    def test_initialize_from_features(self, generator):
        book = Codebook(size=4, dim=3)
        features = torch.randn(10, 3)
        book.initialize_from(features, generator)
        rows = {tuple(r) for r in features.tolist()}
        assert all(tuple(e) in rows for e in book.entries.tolist())


class TestStraightThrough:
    def test_forward_is_bitwise_quantized(self):
        book = Codebook(size=16, dim=4)
        z = torch.randn(3, 4, requires_grad=True)
        result = book.quantize(z)
        assert torch.equal(straight_through(z, result), result.quantized)

    def test_gradient_is_identity(self):
        book = Codebook(size=16, dim=4)
        z = torch.randn(3, 4, requires_grad=True)
        out = straight_through(z, book.quantize(z))
        upstream = torch.randn(3, 4)
        out.backward(upstream)
        assert torch.equal(z.grad, upstream)
        assert book.embedding.weight.grad is None

    def test_shape_mismatch(self):
        book = Codebook(size=16, dim=4)
        result = book.quantize(torch.randn(3, 4))
        with pytest.raises(DimensionMismatchError):
            straight_through(torch.randn(2, 4), result)


class TestDecomposedQuantizer:
    def test_books_and_vocab(self):
        quantizer = DecomposedQuantizer(num_parts=6, size=32, dim=8)
        names = list(quantizer.books())
        assert names[0] == OBJECT_BOOK
        assert names[1:] == [part_book_name(i) for i in range(6)]
        assert quantizer.vocab_sizes() == [32] * 7

    def test_each_part_has_its_own_book(self):
        quantizer = DecomposedQuantizer(num_parts=6, size=32, dim=8)
        entries = [book.entries for book in quantizer.part_books]
        assert not torch.equal(entries[0], entries[1])

    def test_quantize_and_lookup_parts(self):
        quantizer = DecomposedQuantizer(num_parts=3, size=8, dim=4)
        z_f = [torch.randn(5, 4) for _ in range(3)]
        results = quantizer.quantize_parts(z_f)
        indices = torch.stack([r.index for r in results], dim=-1)
        looked_up = quantizer.lookup_parts(indices)
        for result, entry in zip(results, looked_up, strict=True):
            assert torch.equal(result.quantized, entry)

    def test_part_count_mismatch(self):
        quantizer = DecomposedQuantizer(num_parts=3, size=8, dim=4)
        with pytest.raises(DimensionMismatchError):
            quantizer.quantize_parts([torch.randn(5, 4)] * 2)
        with pytest.raises(DimensionMismatchError):
            quantizer.lookup_parts(torch.zeros(5, 2, dtype=torch.long))

    def test_usage_histogram(self):
        quantizer = DecomposedQuantizer(num_parts=2, size=4, dim=2)
        quantizer.set_counting(True)
        quantizer.quantize_object(torch.randn(6, 2))
        quantizer.quantize_parts([torch.randn(6, 2), torch.randn(6, 2)])
        histogram = quantizer.usage_histogram()
        assert sorted(histogram) == sorted([OBJECT_BOOK, "part_1", "part_2"])
        assert all(sum(counts) == 6 for counts in histogram.values())
        quantizer.reset_usage()
        assert all(sum(c) == 0 for c in quantizer.usage_histogram().values())


class TestCodebookLosses:
    def test_zero_when_features_sit_on_entries(self):
        z = torch.randn(4, 8)
        losses = codebook_losses([z, z], [z.clone(), z.clone()], z, z.clone())
        assert losses.total.item() == 0.0

    def test_known_value(self):
        z_f = [torch.zeros(2, 3)]
        zq_f = [torch.ones(2, 3)]
        z_t = torch.zeros(2, 3)
        zq_t = torch.full((2, 3), 2.0)
        losses = codebook_losses(z_f, zq_f, z_t, zq_t, beta=0.25, lambda_e=10.0)
        # per feature (1 + beta) * squared distance
        assert losses.hand.item() == pytest.approx(1.25 * 3)
        assert losses.object.item() == pytest.approx(1.25 * 12)
        assert losses.total.item() == pytest.approx(10.0 * (3.75 + 15.0))

    def test_hand_term_sums_parts(self):
        z_f = [torch.zeros(1, 2), torch.zeros(1, 2)]
        zq_f = [torch.ones(1, 2), torch.ones(1, 2)]
        losses = codebook_losses(z_f, zq_f, torch.zeros(1, 2), torch.zeros(1, 2))
        assert losses.hand.item() == pytest.approx(2 * 1.25 * 2)
        assert losses.object.item() == 0.0

    def test_gradient_routing(self):
        z = torch.zeros(1, 2, requires_grad=True)
        q = torch.ones(1, 2, requires_grad=True)
        losses = codebook_losses([z], [q], torch.zeros(1, 2), torch.zeros(1, 2), 0.25, 1.0)
        losses.total.backward()
        # encoder pulled towards the entry, entry pulled by beta towards the encoder
        assert torch.allclose(z.grad, torch.full((1, 2), -2.0))
        assert torch.allclose(q.grad, torch.full((1, 2), 0.5))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            codebook_losses([torch.zeros(2, 3)], [], torch.zeros(2, 3), torch.zeros(2, 3))
        with pytest.raises(DimensionMismatchError):
            codebook_losses(
                [torch.zeros(2, 3)], [torch.zeros(2, 4)], torch.zeros(2, 3), torch.zeros(2, 3)
            )
