#pragma once

// Central finite differences (h = 1e-3) of double-precision reference graphs
// against the library's reverse-mode gradients.

#include <functional>
#include <string>
#include <vector>

#include "elytra/ops.hpp"
#include "elytra/rng.hpp"
#include "reference.hpp"

namespace gradcheck {

inline constexpr double kStep = 1e-3;

struct Result {
    std::string op;
    double max_rel_err = 0.0;
    std::size_t checked = 0;
};

/// |analytic − numeric| / max(|analytic|, |numeric|, floor) where the floor is
/// 1e-3 of the largest numeric gradient entry of the same tensor, so entries
/// that are zero up to rounding do not dominate.
inline double tensor_rel_err(const elytra::Tensor &analytic, const std::vector<double> &numeric) {
    double scale = 0.0;
    for (double v : numeric) scale = std::max(scale, std::fabs(v));
    const double floor = std::max(1e-3 * scale, 1e-7);
    double worst = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
        worst = std::max(worst, ref::rel_err(analytic[i], numeric[i], floor));
    }
    return worst;
}

using RefLoss = std::function<double(const std::vector<std::vector<double>> &)>;

inline std::vector<double> numeric_grad(const RefLoss &loss, std::vector<std::vector<double>> inputs, std::size_t which) {
    std::vector<double> g(inputs[which].size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double keep = inputs[which][i];
        inputs[which][i] = keep + kStep;
        const double up = loss(inputs);
        inputs[which][i] = keep - kStep;
        const double down = loss(inputs);
        inputs[which][i] = keep;
        g[i] = (up - down) / (2.0 * kStep);
    }
    return g;
}

inline elytra::Tensor random_tensor(elytra::Rng &rng, elytra::Shape shape, float lo = -1.0f, float hi = 1.0f) {
    elytra::Tensor t(std::move(shape));
    for (auto &v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

inline std::vector<double> to_double(const elytra::Tensor &t) { return {t.values().begin(), t.values().end()}; }

inline ref::Mat mat(const std::vector<double> &v, std::size_t r, std::size_t c) { return ref::as_mat(v, r, c); }

/// One random graph: a primitive op, an optional smooth unary tail, and a
/// random linear functional reducing it to a scalar.
inline Result random_graph(std::uint64_t seed) {
    using namespace elytra;
    Rng rng(seed);
    const std::size_t op = rng.below(17);
    const std::size_t m = 2 + rng.below(3), n = 3 + rng.below(3), k = 2 + rng.below(3);

    std::vector<Tensor> inputs;
    std::vector<int> labels;
    std::string name;
    // Builders for the library graph and its double reference.
    std::function<Var(Tape &, std::vector<Var> &)> lib;
    std::function<ref::Mat(const std::vector<std::vector<double>> &)> refop;
    std::size_t out_r = m, out_c = n;

    switch (op) {
    case 0:
        name = "matmul";
        inputs = {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})};
        lib = [](Tape &, std::vector<Var> &v) { return ops::matmul(v[0], v[1]); };
        refop = [=](const auto &in) { return ref::matmul(mat(in[0], m, k), mat(in[1], k, n)); };
        break;
    case 1:
    case 2:
    case 3: {
        name = op == 1 ? "add" : (op == 2 ? "sub" : "mul");
        inputs = {random_tensor(rng, {m, n}), random_tensor(rng, {m, n})};
        lib = [op](Tape &, std::vector<Var> &v) {
            return op == 1 ? ops::add(v[0], v[1]) : (op == 2 ? ops::sub(v[0], v[1]) : ops::mul(v[0], v[1]));
        };
        refop = [=](const auto &in) {
            ref::Mat o(m, n);
            for (std::size_t i = 0; i < m * n; ++i) {
                o.a[i] = op == 1 ? in[0][i] + in[1][i] : (op == 2 ? in[0][i] - in[1][i] : in[0][i] * in[1][i]);
            }
            return o;
        };
        break;
    }
    case 4: {
        name = "scale";
        const float f = rng.uniform(-2.0f, 2.0f);
        inputs = {random_tensor(rng, {m, n})};
        lib = [f](Tape &, std::vector<Var> &v) { return ops::add_scalar(ops::scale(v[0], f), 0.5f); };
        refop = [=](const auto &in) {
            ref::Mat o(m, n);
            for (std::size_t i = 0; i < m * n; ++i) o.a[i] = static_cast<double>(f) * in[0][i] + 0.5;
            return o;
        };
        break;
    }
    case 5:
        name = "add_row_bias";
        inputs = {random_tensor(rng, {m, n}), random_tensor(rng, {n})};
        lib = [](Tape &, std::vector<Var> &v) { return ops::add_row_bias(v[0], v[1]); };
        refop = [=](const auto &in) { return ref::add_row(mat(in[0], m, n), in[1]); };
        break;
    case 6:
        name = "gelu";
        inputs = {random_tensor(rng, {m, n}, -3.0f, 3.0f)};
        lib = [](Tape &, std::vector<Var> &v) { return ops::gelu(v[0]); };
        refop = [=](const auto &in) {
            ref::Mat o = mat(in[0], m, n);
            for (double &x : o.a) x = ref::gelu(x);
            return o;
        };
        break;
    case 7:
        name = "softmax_rows";
        inputs = {random_tensor(rng, {m, n}, -2.0f, 2.0f)};
        lib = [](Tape &, std::vector<Var> &v) { return ops::softmax_rows(v[0]); };
        refop = [=](const auto &in) { return ref::softmax_rows(mat(in[0], m, n)); };
        break;
    case 8:
        name = "layernorm_rows";
        inputs = {random_tensor(rng, {m, n}), random_tensor(rng, {n}), random_tensor(rng, {n})};
        lib = [](Tape &, std::vector<Var> &v) { return ops::layernorm_rows(v[0], v[1], v[2]); };
        refop = [=](const auto &in) { return ref::layernorm(mat(in[0], m, n), &in[1], &in[2]); };
        break;
    case 9:
    case 10: {
        const bool dlr = op == 10;
        name = dlr ? "dlr_loss" : "cross_entropy";
        const std::size_t kk = n;
        // Spread logits so the DLR ordering is stable under ±h.
        Tensor z(Shape{m, kk});
        for (std::size_t i = 0; i < m; ++i) {
            std::vector<float> base(kk);
            for (std::size_t j = 0; j < kk; ++j) base[j] = static_cast<float>(j) * 0.7f + rng.uniform(-0.2f, 0.2f);
            for (std::size_t j = kk; j > 1; --j) std::swap(base[j - 1], base[rng.below(j)]);
            for (std::size_t j = 0; j < kk; ++j) z.at(i, j) = base[j];
            labels.push_back(static_cast<int>(rng.below(kk)));
        }
        inputs = {z};
        out_r = out_c = 1;
        lib = [dlr, labels](Tape &, std::vector<Var> &v) {
            return dlr ? ops::dlr_loss(v[0], labels) : ops::cross_entropy(v[0], labels);
        };
        refop = [=](const auto &in) {
            ref::Mat o(1, 1);
            o.a[0] = dlr ? ref::dlr(mat(in[0], m, kk), labels) : ref::cross_entropy(mat(in[0], m, kk), labels);
            return o;
        };
        break;
    }
    case 11: {
        name = "attention";
        const std::size_t batch = 2, t = 3, heads = 2, d = 4;
        for (int i = 0; i < 3; ++i) inputs.push_back(random_tensor(rng, {batch * t, d}));
        out_r = batch * t;
        out_c = d;
        lib = [](Tape &, std::vector<Var> &v) { return ops::attention(v[0], v[1], v[2], 2, 2); };
        refop = [=](const auto &in) {
            return ref::attention(mat(in[0], batch * t, d), mat(in[1], batch * t, d), mat(in[2], batch * t, d), batch,
                                  heads);
        };
        break;
    }
    case 12: {
        name = "patchify";
        const std::size_t b = 2, c = 2, s = 4, p = 2, g = s / p;
        inputs = {random_tensor(rng, {b, c, s, s})};
        out_r = b * g * g;
        out_c = c * p * p;
        lib = [](Tape &, std::vector<Var> &v) { return ops::patchify(v[0], 2); };
        refop = [=](const auto &in) {
            ref::Mat o(out_r, out_c);
            for (std::size_t nn = 0; nn < b; ++nn)
                for (std::size_t py = 0; py < g; ++py)
                    for (std::size_t px = 0; px < g; ++px)
                        for (std::size_t ch = 0; ch < c; ++ch)
                            for (std::size_t i = 0; i < p; ++i)
                                for (std::size_t j = 0; j < p; ++j)
                                    o(nn * g * g + py * g + px, (ch * p + i) * p + j) =
                                        in[0][((nn * c + ch) * s + py * p + i) * s + px * p + j];
            return o;
        };
        break;
    }
    case 13: {
        name = "assemble_tokens";
        const std::size_t b = 2, pcount = 3, d = 4, t = pcount + 1;
        inputs = {random_tensor(rng, {b * pcount, d}), random_tensor(rng, {1, d}), random_tensor(rng, {t, d})};
        out_r = b * t;
        out_c = d;
        lib = [](Tape &, std::vector<Var> &v) { return ops::assemble_tokens(v[0], v[1], v[2], 2); };
        refop = [=](const auto &in) {
            ref::Mat o(out_r, out_c);
            for (std::size_t nn = 0; nn < b; ++nn)
                for (std::size_t i = 0; i < t; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        o(nn * t + i, j) = (i == 0 ? in[1][j] : in[0][(nn * pcount + i - 1) * d + j]) + in[2][i * d + j];
            return o;
        };
        break;
    }
    case 14: {
        name = "gather_rows";
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < m + 1; ++i) rows.push_back(rng.below(m));
        inputs = {random_tensor(rng, {m, n})};
        out_r = rows.size();
        lib = [rows](Tape &, std::vector<Var> &v) { return ops::gather_rows(v[0], rows); };
        refop = [=](const auto &in) {
            ref::Mat o(rows.size(), n);
            for (std::size_t i = 0; i < rows.size(); ++i)
                for (std::size_t j = 0; j < n; ++j) o(i, j) = in[0][rows[i] * n + j];
            return o;
        };
        break;
    }
    case 15: {
        name = "overlay";
        const std::size_t vals = 5;
        std::vector<std::int64_t> index(m * n);
        for (auto &ix : index) ix = rng.coin() ? static_cast<std::int64_t>(rng.below(vals)) : -1;
        inputs = {random_tensor(rng, {m, n}), random_tensor(rng, {vals})};
        lib = [index](Tape &, std::vector<Var> &v) { return ops::overlay(v[0], v[1], index); };
        refop = [=](const auto &in) {
            ref::Mat o(m, n);
            for (std::size_t i = 0; i < m * n; ++i) {
                o.a[i] = index[i] >= 0 ? in[1][static_cast<std::size_t>(index[i])] : in[0][i];
            }
            return o;
        };
        break;
    }
    default: {
        name = "clamp";
        // Keep values away from the kinks at ±0.5.
        Tensor x(Shape{m, n});
        for (auto &v : x.values()) {
            v = rng.uniform(-1.0f, 1.0f);
            if (std::fabs(std::fabs(v) - 0.5f) < 0.05f) v *= 0.5f;
        }
        inputs = {x};
        lib = [](Tape &, std::vector<Var> &v) { return ops::clamp(v[0], -0.5f, 0.5f); };
        refop = [=](const auto &in) {
            ref::Mat o(m, n);
            for (std::size_t i = 0; i < m * n; ++i) o.a[i] = std::clamp(in[0][i], -0.5, 0.5);
            return o;
        };
        break;
    }
    }

    // Smooth unary tail on matrix outputs.
    const std::size_t tail = out_r * out_c > 1 ? rng.below(3) : 2;
    Tensor weights = random_tensor(rng, {out_r, out_c});
    const std::vector<double> wd = to_double(weights);

    Tape tape;
    std::vector<Var> vars;
    for (const auto &t : inputs) vars.push_back(tape.variable(t));
    Var out = lib(tape, vars);
    if (out.value().rank() == 1 && out_r * out_c > 1) out = ops::reshape(out, {out_r, out_c});
    if (tail == 0) out = ops::gelu(out);
    if (tail == 1) out = ops::softmax_rows(out);
    const Var loss = ops::sum(ops::mul(out.value().numel() == 1 ? ops::reshape(out, {1}) : out,
                                       tape.constant(out.value().numel() == 1 ? weights.reshaped({1}) : weights)));
    const std::vector<Tensor> grads = tape.backward(loss, vars);

    const RefLoss ref_loss = [&](const std::vector<std::vector<double>> &in) {
        ref::Mat o = refop(in);
        if (tail == 0)
            for (double &x : o.a) x = ref::gelu(x);
        if (tail == 1) o = ref::softmax_rows(o);
        double s = 0.0;
        for (std::size_t i = 0; i < o.a.size(); ++i) s += o.a[i] * wd[i];
        return s;
    };
    std::vector<std::vector<double>> din;
    for (const auto &t : inputs) din.push_back(to_double(t));
    Result r{name, 0.0, 0};
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        r.max_rel_err = std::max(r.max_rel_err, tensor_rel_err(grads[i], numeric_grad(ref_loss, din, i)));
        r.checked += inputs[i].numel();
    }
    return r;
}

/// Gradient of the mean cross-entropy of the full model with respect to
/// `count` randomly sampled weights, checked against the double reference.
inline Result vit_weights(const elytra::VitConfig &cfg, const elytra::ParameterStore &store, std::size_t count,
                          std::uint64_t seed, std::size_t batch = 2) {
    using namespace elytra;
    Rng rng(seed);
    Tensor images = random_tensor(rng, cfg.image_shape(batch), 0.0f, 1.0f);
    std::vector<int> labels;
    for (std::size_t i = 0; i < batch; ++i) labels.push_back(static_cast<int>(rng.below(cfg.num_classes)));

    Tape tape;
    BoundModel model(tape, cfg, store, {}, true);
    const Var loss = ops::cross_entropy(model.logits(tape.constant(images)), labels);
    const std::vector<Tensor> grads = tape.backward(loss, model.param_vars());

    ref::Weights w = ref::weights_of(store);
    double gmax = 0.0;
    for (const auto &g : grads)
        for (float v : g.values()) gmax = std::max(gmax, static_cast<double>(std::fabs(v)));
    Result r{"vit", 0.0, 0};
    for (std::size_t s = 0; s < count; ++s) {
        const std::size_t p = rng.below(store.size());
        const std::size_t i = rng.below(store[p].value.numel());
        auto &slot = w.at(store[p].name)[i];
        const double keep = slot;
        slot = keep + kStep;
        const double up = ref::cross_entropy(ref::vit_logits(cfg, w, images), labels);
        slot = keep - kStep;
        const double down = ref::cross_entropy(ref::vit_logits(cfg, w, images), labels);
        slot = keep;
        const double numeric = (up - down) / (2.0 * kStep);
        r.max_rel_err = std::max(r.max_rel_err, ref::rel_err(grads[p][i], numeric, std::max(1e-3 * gmax, 1e-7)));
        ++r.checked;
    }
    return r;
}

} // namespace gradcheck
