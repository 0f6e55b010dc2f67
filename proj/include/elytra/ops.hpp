#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "elytra/autodiff.hpp"
#include "elytra/tensor.hpp"

/// Differentiable operations recorded on a Tape. Every op checks shapes,
/// rejects non-finite outputs, and carries a reverse-mode rule.
namespace elytra::ops {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise (Hadamard) product of equally shaped tensors.
Var mul(Var a, Var b);
Var scale(Var a, float factor);
Var add_scalar(Var a, float offset);
/// x[m×n] + bias[n] broadcast over rows. The only broadcasting op.
Var add_row_bias(Var x, Var bias);
Var gelu(Var x);
Var sign(Var x);
Var clamp(Var x, float lo, float hi);
Var sum(Var x);
Var reshape(Var x, Shape shape);

Var softmax_rows(Var x);
Var layernorm_rows(Var x, float eps = 1e-6f);
Var layernorm_rows(Var x, Var gamma, Var beta, float eps = 1e-6f);

/// Mean cross-entropy of row-wise logits against class indices.
Var cross_entropy(Var logits, std::span<const int> labels);
/// Mean difference-of-logits-ratio loss; needs at least three classes.
Var dlr_loss(Var logits, std::span<const int> labels);

/// images[B×C×H×W] -> [B·(H/p)·(W/p) × C·p·p], patches in raster order.
Var patchify(Var images, std::size_t patch);
/// Prepends the class token to every sample and adds position embeddings:
/// patches[B·P×D], cls[1×D], pos[(P+1)×D] -> [B·(P+1)×D].
Var assemble_tokens(Var patches, Var cls, Var pos, std::size_t batch);
/// Multi-head scaled dot-product attention over per-sample token blocks.
Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t heads);
Var gather_rows(Var x, std::vector<std::size_t> rows);
/// out[i] = index[i] >= 0 ? values[index[i]] : base[i].
Var overlay(Var base, Var values, std::vector<std::int64_t> index);

} // namespace elytra::ops

/// Eager (tape-free) kernels shared by the ops and by callers that only need values.
namespace elytra::eager {

Tensor matmul(const Tensor &a, const Tensor &b);
Tensor softmax_rows(const Tensor &x);
Tensor sign(const Tensor &x);
Tensor clamp(const Tensor &x, float lo, float hi);
/// Per-row cross-entropy values.
std::vector<float> cross_entropy_rows(const Tensor &logits, std::span<const int> labels);
/// Per-row DLR values.
std::vector<float> dlr_rows(const Tensor &logits, std::span<const int> labels);
std::vector<int> argmax_rows(const Tensor &logits);

} // namespace elytra::eager
