#include "elytra/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <memory>
#include <string>

#include <Eigen/Core>

#include "elytra/error.hpp"

namespace elytra {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;
using StridedC = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using StridedM = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

constexpr double kDlrFloor = 1e-12;

MapC as_mat(const Tensor &t) { return MapC(t.data(), t.rows(), t.cols()); }
MapM as_mat(Tensor &t) { return MapM(t.data(), t.rows(), t.cols()); }

void same_tape(Var a, Var b, const char *op) {
    if (a.tape == nullptr || a.tape != b.tape) {
        throw ContractError(std::string(op) + ": operands live on different tapes");
    }
}

void same_shape(const Tensor &a, const Tensor &b, const char *op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

void require_matrix(const Tensor &t, const char *op) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
    }
}

Var emit(Tape &tape, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, const char *op) {
    value.require_finite(op);
    return tape.record(std::move(value), std::move(inputs), std::move(fn));
}

void axpy(Tensor &dst, const Tensor &src, float alpha = 1.0f) {
    float *d = dst.data();
    const float *s = src.data();
    for (std::size_t i = 0; i < dst.numel(); ++i) {
        d[i] += alpha * s[i];
    }
}

void check_labels(std::span<const int> labels, std::size_t rows, std::size_t k, const char *op) {
    if (labels.size() != rows) {
        throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(rows) + " rows");
    }
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= k) {
            throw IndexError(std::string(op) + ": label " + std::to_string(y) + " outside [0," + std::to_string(k) +
                             ")");
        }
    }
}

struct DlrTerms {
    float value;
    std::size_t other;  // argmax over i != y
    std::size_t first;  // largest logit
    std::size_t third;  // third largest logit
    double num;
    double den;
};

DlrTerms dlr_row(const float *z, std::size_t k, int y) {
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [z](std::size_t a, std::size_t b) { return z[a] > z[b]; });
    std::size_t other = order[0] == static_cast<std::size_t>(y) ? order[1] : order[0];
    const double num = static_cast<double>(z[y]) - z[other];
    const double den = static_cast<double>(z[order[0]]) - z[order[2]] + kDlrFloor;
    return DlrTerms{static_cast<float>(-num / den), other, order[0], order[2], num, den};
}

} // namespace

namespace eager {

Tensor matmul(const Tensor &a, const Tensor &b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    Tensor out(Shape{a.rows(), b.cols()});
    as_mat(out).noalias() = as_mat(a) * as_mat(b);
    return out;
}

Tensor softmax_rows(const Tensor &x) {
    Tensor out = x;
    const std::size_t m = x.rows(), n = x.cols();
    for (std::size_t r = 0; r < m; ++r) {
        float *row = out.data() + r * n;
        float mx = *std::max_element(row, row + n);
        double total = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            row[c] = std::exp(row[c] - mx);
            total += row[c];
        }
        const float inv = static_cast<float>(1.0 / total);
        for (std::size_t c = 0; c < n; ++c) {
            row[c] *= inv;
        }
    }
    return out;
}

Tensor sign(const Tensor &x) {
    Tensor out = x;
    for (auto &v : out.values()) {
        v = v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f);
    }
    return out;
}

Tensor clamp(const Tensor &x, float lo, float hi) {
    if (!(lo <= hi)) {
        throw ContractError("clamp: lower bound exceeds upper bound");
    }
    Tensor out = x;
    for (auto &v : out.values()) {
        v = std::clamp(v, lo, hi);
    }
    return out;
}

std::vector<float> cross_entropy_rows(const Tensor &logits, std::span<const int> labels) {
    const std::size_t m = logits.rows(), k = logits.cols();
    check_labels(labels, m, k, "cross_entropy");
    std::vector<float> out(m);
    for (std::size_t r = 0; r < m; ++r) {
        const float *z = logits.data() + r * k;
        float mx = *std::max_element(z, z + k);
        double total = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            total += std::exp(static_cast<double>(z[c] - mx));
        }
        out[r] = static_cast<float>(std::log(total) + mx - z[labels[r]]);
    }
    return out;
}

std::vector<float> dlr_rows(const Tensor &logits, std::span<const int> labels) {
    const std::size_t m = logits.rows(), k = logits.cols();
    if (k < 3) {
        throw ContractError("dlr_loss needs at least 3 classes, got " + std::to_string(k));
    }
    check_labels(labels, m, k, "dlr_loss");
    std::vector<float> out(m);
    for (std::size_t r = 0; r < m; ++r) {
        out[r] = dlr_row(logits.data() + r * k, k, labels[r]).value;
    }
    return out;
}

std::vector<int> argmax_rows(const Tensor &logits) {
    const std::size_t m = logits.rows(), k = logits.cols();
    std::vector<int> out(m);
    for (std::size_t r = 0; r < m; ++r) {
        const float *z = logits.data() + r * k;
        out[r] = static_cast<int>(std::max_element(z, z + k) - z);
    }
    return out;
}

} // namespace eager

namespace ops {

Var matmul(Var a, Var b) {
    same_tape(a, b, "matmul");
    Tensor out = eager::matmul(a.value(), b.value());
    Tape *tape = a.tape;
    const std::size_t ia = a.id, ib = b.id;
    return emit(*tape, std::move(out), {ia, ib},
                [tape, ia, ib](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    const Tensor &av = tape->value(ia);
                    const Tensor &bv = tape->value(ib);
                    if (Tensor *ga = grads.slot(ia)) {
                        as_mat(*ga).noalias() += as_mat(g) * as_mat(bv).transpose();
                    }
                    if (Tensor *gb = grads.slot(ib)) {
                        as_mat(*gb).noalias() += as_mat(av).transpose() * as_mat(g);
                    }
                },
                "matmul");
}

Var add(Var a, Var b) {
    same_tape(a, b, "add");
    same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    axpy(out, b.value());
    const std::size_t ia = a.id, ib = b.id;
    return emit(*a.tape, std::move(out), {ia, ib},
                [ia, ib](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    if (Tensor *ga = grads.slot(ia)) axpy(*ga, g);
                    if (Tensor *gb = grads.slot(ib)) axpy(*gb, g);
                },
                "add");
}

Var sub(Var a, Var b) {
    same_tape(a, b, "sub");
    same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    axpy(out, b.value(), -1.0f);
    const std::size_t ia = a.id, ib = b.id;
    return emit(*a.tape, std::move(out), {ia, ib},
                [ia, ib](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    if (Tensor *ga = grads.slot(ia)) axpy(*ga, g);
                    if (Tensor *gb = grads.slot(ib)) axpy(*gb, g, -1.0f);
                },
                "sub");
}

Var mul(Var a, Var b) {
    same_tape(a, b, "mul");
    same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    const Tensor &bv = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] *= bv[i];
    }
    Tape *tape = a.tape;
    const std::size_t ia = a.id, ib = b.id;
    return emit(*tape, std::move(out), {ia, ib},
                [tape, ia, ib](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    const Tensor &av = tape->value(ia);
                    const Tensor &bv = tape->value(ib);
                    if (Tensor *ga = grads.slot(ia)) {
                        for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * bv[i];
                    }
                    if (Tensor *gb = grads.slot(ib)) {
                        for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * av[i];
                    }
                },
                "mul");
}

Var scale(Var a, float factor) {
    Tensor out = a.value();
    for (auto &v : out.values()) v *= factor;
    const std::size_t ia = a.id;
    return emit(*a.tape, std::move(out), {ia},
                [ia, factor](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    if (Tensor *ga = grads.slot(ia)) axpy(*ga, g, factor);
                },
                "scale");
}

Var add_scalar(Var a, float offset) {
    Tensor out = a.value();
    for (auto &v : out.values()) v += offset;
    const std::size_t ia = a.id;
    return emit(*a.tape, std::move(out), {ia},
                [ia](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    if (Tensor *ga = grads.slot(ia)) axpy(*ga, g);
                },
                "add_scalar");
}

Var add_row_bias(Var x, Var bias) {
    same_tape(x, bias, "add_row_bias");
    const Tensor &xv = x.value();
    require_matrix(xv, "add_row_bias");
    const std::size_t m = xv.rows(), n = xv.cols();
    if (bias.value().numel() != n) {
        throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " does not match rows of " +
                             shape_str(xv.shape()));
    }
    Tensor out = xv;
    const float *b = bias.value().data();
    for (std::size_t r = 0; r < m; ++r) {
        float *row = out.data() + r * n;
        for (std::size_t c = 0; c < n; ++c) row[c] += b[c];
    }
    const std::size_t ix = x.id, ib = bias.id;
    return emit(*x.tape, std::move(out), {ix, ib},
                [ix, ib, m, n](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    if (Tensor *gx = grads.slot(ix)) axpy(*gx, g);
                    if (Tensor *gb = grads.slot(ib)) {
                        for (std::size_t r = 0; r < m; ++r) {
                            const float *row = g.data() + r * n;
                            for (std::size_t c = 0; c < n; ++c) (*gb)[c] += row[c];
                        }
                    }
                },
                "add_row_bias");
}

Var gelu(Var x) {
    constexpr float kInvSqrt2 = 0.70710678118654752f;
    constexpr float kInvSqrt2Pi = 0.39894228040143268f;
    Tensor out = x.value();
    for (auto &v : out.values()) v = 0.5f * v * (1.0f + std::erf(v * kInvSqrt2));
    Tape *tape = x.tape;
    const std::size_t ix = x.id;
    return emit(*tape, std::move(out), {ix},
                [tape, ix](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    Tensor *gx = grads.slot(ix);
                    if (!gx) return;
                    const Tensor &xv = tape->value(ix);
                    for (std::size_t i = 0; i < g.numel(); ++i) {
                        const float v = xv[i];
                        const float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
                        const float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
                        (*gx)[i] += g[i] * (cdf + v * pdf);
                    }
                },
                "gelu");
}

Var sign(Var x) {
    const std::size_t ix = x.id;
    // Piecewise constant: the gradient is zero everywhere it exists.
    return emit(*x.tape, eager::sign(x.value()), {ix},
                [ix](const Tensor &, const Tensor &, GradBuffer &grads) { grads.slot(ix); }, "sign");
}

Var clamp(Var x, float lo, float hi) {
    Tape *tape = x.tape;
    const std::size_t ix = x.id;
    return emit(*tape, eager::clamp(x.value(), lo, hi), {ix},
                [tape, ix, lo, hi](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    Tensor *gx = grads.slot(ix);
                    if (!gx) return;
                    const Tensor &xv = tape->value(ix);
                    for (std::size_t i = 0; i < g.numel(); ++i) {
                        if (xv[i] >= lo && xv[i] <= hi) (*gx)[i] += g[i];
                    }
                },
                "clamp");
}

Var sum(Var x) {
    double total = 0.0;
    for (float v : x.value().values()) total += v;
    const std::size_t ix = x.id;
    return emit(*x.tape, Tensor::scalar(static_cast<float>(total)), {ix},
                [ix](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    if (Tensor *gx = grads.slot(ix)) {
                        const float s = g[0];
                        for (auto &v : gx->values()) v += s;
                    }
                },
                "sum");
}

Var reshape(Var x, Shape shape) {
    const std::size_t ix = x.id;
    return emit(*x.tape, x.value().reshaped(std::move(shape)), {ix},
                [ix](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    if (Tensor *gx = grads.slot(ix)) {
                        for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i];
                    }
                },
                "reshape");
}


Var softmax_rows(Var x) {
    require_matrix(x.value(), "softmax_rows");
    const std::size_t ix = x.id;
    return emit(*x.tape, eager::softmax_rows(x.value()), {ix},
                [ix](const Tensor &g, const Tensor &p, GradBuffer &grads) {
                    Tensor *gx = grads.slot(ix);
                    if (!gx) return;
                    const std::size_t m = p.rows(), n = p.cols();
                    for (std::size_t r = 0; r < m; ++r) {
                        const float *pr = p.data() + r * n;
                        const float *gr = g.data() + r * n;
                        float dot = 0.0f;
                        for (std::size_t c = 0; c < n; ++c) dot += pr[c] * gr[c];
                        float *out = gx->data() + r * n;
                        for (std::size_t c = 0; c < n; ++c) out[c] += pr[c] * (gr[c] - dot);
                    }
                },
                "softmax_rows");
}

namespace {

struct NormStats {
    Tensor xhat;
    std::vector<float> inv_std;
};

NormStats normalize_rows(const Tensor &x, float eps) {
    require_matrix(x, "layernorm_rows");
    const std::size_t m = x.rows(), n = x.cols();
    NormStats s{Tensor(x.shape()), std::vector<float>(m)};
    for (std::size_t r = 0; r < m; ++r) {
        const float *row = x.data() + r * n;
        double mean = 0.0;
        for (std::size_t c = 0; c < n; ++c) mean += row[c];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            const double d = row[c] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        s.inv_std[r] = static_cast<float>(inv);
        float *out = s.xhat.data() + r * n;
        for (std::size_t c = 0; c < n; ++c) out[c] = static_cast<float>((row[c] - mean) * inv);
    }
    return s;
}

// dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)), row-wise.
void layernorm_input_grad(const Tensor &dxhat, const NormStats &s, Tensor &gx) {
    const std::size_t m = dxhat.rows(), n = dxhat.cols();
    for (std::size_t r = 0; r < m; ++r) {
        const float *d = dxhat.data() + r * n;
        const float *xh = s.xhat.data() + r * n;
        double md = 0.0, mdx = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            md += d[c];
            mdx += static_cast<double>(d[c]) * xh[c];
        }
        md /= static_cast<double>(n);
        mdx /= static_cast<double>(n);
        float *out = gx.data() + r * n;
        for (std::size_t c = 0; c < n; ++c) {
            out[c] += s.inv_std[r] * static_cast<float>(d[c] - md - xh[c] * mdx);
        }
    }
}

} // namespace

Var layernorm_rows(Var x, float eps) {
    auto stats = std::make_shared<NormStats>(normalize_rows(x.value(), eps));
    Tensor out = stats->xhat;
    const std::size_t ix = x.id;
    return emit(*x.tape, std::move(out), {ix},
                [ix, stats](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    if (Tensor *gx = grads.slot(ix)) layernorm_input_grad(g, *stats, *gx);
                },
                "layernorm_rows");
}

Var layernorm_rows(Var x, Var gamma, Var beta, float eps) {
    same_tape(x, gamma, "layernorm_rows");
    same_tape(x, beta, "layernorm_rows");
    const std::size_t n = x.value().cols();
    if (gamma.value().numel() != n || beta.value().numel() != n) {
        throw DimensionError("layernorm_rows: affine parameters must have " + std::to_string(n) + " entries");
    }
    auto stats = std::make_shared<NormStats>(normalize_rows(x.value(), eps));
    const std::size_t m = x.value().rows();
    Tensor out(x.shape());
    const float *ga = gamma.value().data();
    const float *be = beta.value().data();
    for (std::size_t r = 0; r < m; ++r) {
        const float *xh = stats->xhat.data() + r * n;
        float *o = out.data() + r * n;
        for (std::size_t c = 0; c < n; ++c) o[c] = ga[c] * xh[c] + be[c];
    }
    Tape *tape = x.tape;
    const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
    return emit(*tape, std::move(out), {ix, ig, ib},
                [tape, ix, ig, ib, stats, m, n](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    if (Tensor *gg = grads.slot(ig)) {
                        for (std::size_t r = 0; r < m; ++r)
                            for (std::size_t c = 0; c < n; ++c) (*gg)[c] += g[r * n + c] * stats->xhat[r * n + c];
                    }
                    if (Tensor *gb = grads.slot(ib)) {
                        for (std::size_t r = 0; r < m; ++r)
                            for (std::size_t c = 0; c < n; ++c) (*gb)[c] += g[r * n + c];
                    }
                    if (Tensor *gx = grads.slot(ix)) {
                        const float *ga = tape->value(ig).data();
                        Tensor dxhat = g;
                        for (std::size_t r = 0; r < m; ++r)
                            for (std::size_t c = 0; c < n; ++c) dxhat[r * n + c] *= ga[c];
                        layernorm_input_grad(dxhat, *stats, *gx);
                    }
                },
                "layernorm_rows");
}

Var cross_entropy(Var logits, std::span<const int> labels) {
    const Tensor &z = logits.value();
    require_matrix(z, "cross_entropy");
    auto rows = eager::cross_entropy_rows(z, labels);
    double total = 0.0;
    for (float v : rows) total += v;
    const std::size_t m = z.rows();
    std::vector<int> y(labels.begin(), labels.end());
    Tape *tape = logits.tape;
    const std::size_t iz = logits.id;
    return emit(*tape, Tensor::scalar(static_cast<float>(total / static_cast<double>(m))), {iz},
                [tape, iz, y = std::move(y), m](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    Tensor *gz = grads.slot(iz);
                    if (!gz) return;
                    Tensor p = eager::softmax_rows(tape->value(iz));
                    const std::size_t k = p.cols();
                    const float s = g[0] / static_cast<float>(m);
                    for (std::size_t r = 0; r < m; ++r) {
                        for (std::size_t c = 0; c < k; ++c) {
                            const float target = static_cast<int>(c) == y[r] ? 1.0f : 0.0f;
                            (*gz)[r * k + c] += s * (p[r * k + c] - target);
                        }
                    }
                },
                "cross_entropy");
}

Var dlr_loss(Var logits, std::span<const int> labels) {
    const Tensor &z = logits.value();
    require_matrix(z, "dlr_loss");
    auto rows = eager::dlr_rows(z, labels);
    double total = 0.0;
    for (float v : rows) total += v;
    const std::size_t m = z.rows();
    std::vector<int> y(labels.begin(), labels.end());
    Tape *tape = logits.tape;
    const std::size_t iz = logits.id;
    return emit(*tape, Tensor::scalar(static_cast<float>(total / static_cast<double>(m))), {iz},
                [tape, iz, y = std::move(y), m](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    Tensor *gz = grads.slot(iz);
                    if (!gz) return;
                    const Tensor &zv = tape->value(iz);
                    const std::size_t k = zv.cols();
                    const float s = g[0] / static_cast<float>(m);
                    for (std::size_t r = 0; r < m; ++r) {
                        const DlrTerms t = dlr_row(zv.data() + r * k, k, y[r]);
                        float *out = gz->data() + r * k;
                        // f = -num/den, num = z_y - z_other, den = z_(1) - z_(3) + floor
                        // Summed in double so that coinciding indices cancel exactly.
                        std::vector<double> d(k, 0.0);
                        d[static_cast<std::size_t>(y[r])] -= 1.0 / t.den;
                        d[t.other] += 1.0 / t.den;
                        const double dden = t.num / (t.den * t.den);
                        d[t.first] += dden;
                        d[t.third] -= dden;
                        for (std::size_t j = 0; j < k; ++j) out[j] += static_cast<float>(s * d[j]);
                    }
                },
                "dlr_loss");
}

Var patchify(Var images, std::size_t patch) {
    const Tensor &img = images.value();
    if (img.rank() != 4) {
        throw DimensionError("patchify: expected B×C×H×W images, got " + shape_str(img.shape()));
    }
    const std::size_t b = img.dim(0), c = img.dim(1), h = img.dim(2), w = img.dim(3);
    if (patch == 0 || h % patch != 0 || w % patch != 0) {
        throw DimensionError("patchify: patch " + std::to_string(patch) + " does not tile " + shape_str(img.shape()));
    }
    const std::size_t ph = h / patch, pw = w / patch, cols = c * patch * patch;
    // index[out] = flat source offset, shared by forward and backward.
    auto index = std::make_shared<std::vector<std::size_t>>(b * ph * pw * cols);
    std::size_t o = 0;
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t py = 0; py < ph; ++py)
            for (std::size_t px = 0; px < pw; ++px)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i < patch; ++i)
                        for (std::size_t j = 0; j < patch; ++j)
                            (*index)[o++] = ((n * c + ch) * h + py * patch + i) * w + px * patch + j;
    Tensor out(Shape{b * ph * pw, cols});
    for (std::size_t i = 0; i < index->size(); ++i) out[i] = img[(*index)[i]];
    const std::size_t ii = images.id;
    return emit(*images.tape, std::move(out), {ii},
                [ii, index](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    if (Tensor *gi = grads.slot(ii)) {
                        for (std::size_t i = 0; i < index->size(); ++i) (*gi)[(*index)[i]] += g[i];
                    }
                },
                "patchify");
}

Var assemble_tokens(Var patches, Var cls, Var pos, std::size_t batch) {
    same_tape(patches, cls, "assemble_tokens");
    same_tape(patches, pos, "assemble_tokens");
    const Tensor &pv = patches.value();
    require_matrix(pv, "assemble_tokens");
    const std::size_t d = pv.cols();
    if (batch == 0 || pv.rows() % batch != 0) {
        throw DimensionError("assemble_tokens: " + std::to_string(pv.rows()) + " patch rows for batch " +
                             std::to_string(batch));
    }
    const std::size_t np = pv.rows() / batch, t = np + 1;
    if (cls.value().numel() != d || pos.value().rows() != t || pos.value().cols() != d) {
        throw DimensionError("assemble_tokens: cls " + shape_str(cls.shape()) + " / pos " + shape_str(pos.shape()) +
                             " incompatible with " + std::to_string(t) + " tokens of width " + std::to_string(d));
    }
    Tensor out(Shape{batch * t, d});
    const float *cv = cls.value().data();
    const float *po = pos.value().data();
    for (std::size_t n = 0; n < batch; ++n) {
        float *dst = out.data() + n * t * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] = cv[c] + po[c];
        for (std::size_t k = 0; k < np; ++k) {
            const float *src = pv.data() + (n * np + k) * d;
            float *row = dst + (k + 1) * d;
            const float *prow = po + (k + 1) * d;
            for (std::size_t c = 0; c < d; ++c) row[c] = src[c] + prow[c];
        }
    }
    const std::size_t ip = patches.id, ic = cls.id, io = pos.id;
    return emit(*patches.tape, std::move(out), {ip, ic, io},
                [ip, ic, io, batch, np, t, d](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    Tensor *gp = grads.slot(ip);
                    Tensor *gc = grads.slot(ic);
                    Tensor *go = grads.slot(io);
                    for (std::size_t n = 0; n < batch; ++n) {
                        const float *src = g.data() + n * t * d;
                        if (gc) {
                            for (std::size_t c = 0; c < d; ++c) (*gc)[c] += src[c];
                        }
                        if (go) {
                            for (std::size_t i = 0; i < t * d; ++i) (*go)[i] += src[i];
                        }
                        if (gp) {
                            for (std::size_t k = 0; k < np; ++k)
                                for (std::size_t c = 0; c < d; ++c)
                                    (*gp)[(n * np + k) * d + c] += src[(k + 1) * d + c];
                        }
                    }
                },
                "assemble_tokens");
}

Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t heads) {
    same_tape(q, k, "attention");
    same_tape(q, v, "attention");
    const Tensor &qv = q.value();
    require_matrix(qv, "attention");
    same_shape(qv, k.value(), "attention");
    same_shape(qv, v.value(), "attention");
    const std::size_t rows = qv.rows(), d = qv.cols();
    if (batch == 0 || rows % batch != 0 || heads == 0 || d % heads != 0) {
        throw DimensionError("attention: " + shape_str(qv.shape()) + " cannot split into batch " +
                             std::to_string(batch) + " and " + std::to_string(heads) + " heads");
    }
    const std::size_t t = rows / batch, dh = d / heads;
    const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
    const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
    auto probs = std::make_shared<std::vector<RowMat>>(batch * heads);
    Tensor out(qv.shape());
    for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = n * t * d + h * dh;
            StridedC Q(qv.data() + off, t, dh, stride);
            StridedC K(k.value().data() + off, t, dh, stride);
            StridedC V(v.value().data() + off, t, dh, stride);
            RowMat s = (Q * K.transpose()) * sc;
            for (Eigen::Index r = 0; r < s.rows(); ++r) {
                const float mx = s.row(r).maxCoeff();
                s.row(r) = (s.row(r).array() - mx).exp();
                s.row(r) /= s.row(r).sum();
            }
            StridedM O(out.data() + off, t, dh, stride);
            O.noalias() = s * V;
            (*probs)[n * heads + h] = std::move(s);
        }
    }
    Tape *tape = q.tape;
    const std::size_t iq = q.id, ik = k.id, iv = v.id;
    return emit(*tape, std::move(out), {iq, ik, iv},
                [tape, iq, ik, iv, probs, batch, heads, t, d, dh, sc](const Tensor &g, const Tensor &,
                                                                      GradBuffer &grads) {
                    Tensor *gq = grads.slot(iq);
                    Tensor *gk = grads.slot(ik);
                    Tensor *gv = grads.slot(iv);
                    const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
                    for (std::size_t n = 0; n < batch; ++n) {
                        for (std::size_t h = 0; h < heads; ++h) {
                            const std::size_t off = n * t * d + h * dh;
                            const RowMat &p = (*probs)[n * heads + h];
                            StridedC G(g.data() + off, t, dh, stride);
                            StridedC Q(tape->value(iq).data() + off, t, dh, stride);
                            StridedC K(tape->value(ik).data() + off, t, dh, stride);
                            StridedC V(tape->value(iv).data() + off, t, dh, stride);
                            if (gv) {
                                StridedM GV(gv->data() + off, t, dh, stride);
                                GV.noalias() += p.transpose() * G;
                            }
                            if (!gq && !gk) continue;
                            RowMat dp = G * V.transpose();
                            RowMat ds = p.cwiseProduct(dp);
                            const Eigen::VectorXf rowdot = ds.rowwise().sum();
                            ds -= p.cwiseProduct(rowdot.replicate(1, p.cols()));
                            ds *= sc;
                            if (gq) {
                                StridedM GQ(gq->data() + off, t, dh, stride);
                                GQ.noalias() += ds * K;
                            }
                            if (gk) {
                                StridedM GK(gk->data() + off, t, dh, stride);
                                GK.noalias() += ds.transpose() * Q;
                            }
                        }
                    }
                },
                "attention");
}

Var gather_rows(Var x, std::vector<std::size_t> rows) {
    const Tensor &xv = x.value();
    require_matrix(xv, "gather_rows");
    const std::size_t n = xv.cols();
    for (auto r : rows) {
        if (r >= xv.rows()) {
            throw IndexError("gather_rows: row " + std::to_string(r) + " outside " + shape_str(xv.shape()));
        }
    }
    if (rows.empty()) {
        throw DimensionError("gather_rows: empty row selection");
    }
    Tensor out(Shape{rows.size(), n});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(xv.data() + rows[i] * n, n, out.data() + i * n);
    }
    const std::size_t ix = x.id;
    return emit(*x.tape, std::move(out), {ix},
                [ix, rows = std::move(rows), n](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    if (Tensor *gx = grads.slot(ix)) {
                        for (std::size_t i = 0; i < rows.size(); ++i)
                            for (std::size_t c = 0; c < n; ++c) (*gx)[rows[i] * n + c] += g[i * n + c];
                    }
                },
                "gather_rows");
}

Var overlay(Var base, Var values, std::vector<std::int64_t> index) {
    same_tape(base, values, "overlay");
    const Tensor &bv = base.value();
    const Tensor &vv = values.value();
    if (index.size() != bv.numel()) {
        throw DimensionError("overlay: index map has " + std::to_string(index.size()) + " entries for " +
                             shape_str(bv.shape()));
    }
    Tensor out = bv;
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= 0) {
            if (static_cast<std::size_t>(index[i]) >= vv.numel()) {
                throw IndexError("overlay: source index out of range");
            }
            out[i] = vv[static_cast<std::size_t>(index[i])];
        }
    }
    const std::size_t ib = base.id, iv = values.id;
    return emit(*base.tape, std::move(out), {ib, iv},
                [ib, iv, index = std::move(index)](const Tensor &g, const Tensor &, GradBuffer &grads) {
                    Tensor *gb = grads.slot(ib);
                    Tensor *gv = grads.slot(iv);
                    for (std::size_t i = 0; i < index.size(); ++i) {
                        if (index[i] >= 0) {
                            if (gv) (*gv)[static_cast<std::size_t>(index[i])] += g[i];
                        } else if (gb) {
                            (*gb)[i] += g[i];
                        }
                    }
                },
                "overlay");
}

} // namespace ops
} // namespace elytra
