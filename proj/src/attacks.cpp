#include "elytra/attacks.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "elytra/error.hpp"
#include "elytra/ops.hpp"
#include "elytra/rng.hpp"

namespace elytra {

namespace {

constexpr std::array<std::pair<AttackKind, std::string_view>, 7> kAttackNames{{
    {AttackKind::fgsm, "FGSM"},
    {AttackKind::pgd, "PGD"},
    {AttackKind::apgd_ce, "APGD_CE"},
    {AttackKind::apgd_dlr, "APGD_DLR"},
    {AttackKind::square, "SQUARE"},
    {AttackKind::patch, "PATCH"},
    {AttackKind::autoattack, "AUTOATTACK"},
}};

std::size_t sample_size(const Tensor &x) { return x.numel() / x.dim(0); }

void require_batch(const Tensor &x, std::span<const int> labels) {
    if (x.rank() != 4) throw DimensionError("attacks expect images [B×C×H×W], got " + shape_str(x.shape()));
    if (labels.size() != x.dim(0)) {
        throw DimensionError("got " + std::to_string(labels.size()) + " labels for a batch of " +
                             std::to_string(x.dim(0)));
    }
}

Tensor take_samples(const Tensor &x, std::span<const std::size_t> idx) {
    const std::size_t n = sample_size(x);
    Shape s = x.shape();
    s[0] = idx.size();
    Tensor out(std::move(s));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy_n(x.data() + idx[i] * n, n, out.data() + i * n);
    }
    return out;
}

void put_sample(Tensor &dst, std::size_t at, const Tensor &src, std::size_t from) {
    const std::size_t n = sample_size(dst);
    std::copy_n(src.data() + from * n, n, dst.data() + at * n);
}

std::vector<float> row_losses(const Tensor &logits, std::span<const int> labels, LossKind loss) {
    return loss == LossKind::ce ? eager::cross_entropy_rows(logits, labels) : eager::dlr_rows(logits, labels);
}

void check_gradient(const Tensor &g) {
    const std::size_t n = sample_size(g);
    for (std::size_t b = 0; b < g.dim(0); ++b) {
        for (std::size_t i = 0; i < n; ++i) {
            if (!std::isfinite(g[b * n + i])) {
                throw AttackError("non-finite input gradient for sample " + std::to_string(b));
            }
        }
    }
}

Tensor sign_step(const Tensor &x, const Tensor &g, std::span<const float> step) {
    const std::size_t n = sample_size(x);
    Tensor out = x;
    for (std::size_t b = 0; b < x.dim(0); ++b) {
        for (std::size_t i = 0; i < n; ++i) {
            const float gi = g[b * n + i];
            const float s = gi > 0.0f ? 1.0f : (gi < 0.0f ? -1.0f : 0.0f);
            out[b * n + i] += step[b] * s;
        }
    }
    return out;
}

class GradCounter {
public:
    explicit GradCounter(AttackStats *stats) : stats_(stats), start_(Tape::thread_backward_calls()) {}
    ~GradCounter() {
        if (stats_ != nullptr) stats_->gradient_calls += Tape::thread_backward_calls() - start_;
    }
    GradCounter(const GradCounter &) = delete;
    GradCounter &operator=(const GradCounter &) = delete;

private:
    AttackStats *stats_;
    std::uint64_t start_;
};

} // namespace

std::string_view attack_name(AttackKind kind) {
    for (const auto &[k, n] : kAttackNames) {
        if (k == kind) return n;
    }
    throw LookupError("unknown attack kind");
}

AttackKind attack_from_name(std::string_view name) {
    for (const auto &[k, n] : kAttackNames) {
        if (n == name) return k;
    }
    throw LookupError("unknown attack variant '" + std::string(name) + "'");
}

std::string_view patch_shape_name(PatchShape shape) { return shape == PatchShape::circle ? "circle" : "square"; }

PatchShape patch_shape_from_name(std::string_view name) {
    if (name == "circle") return PatchShape::circle;
    if (name == "square") return PatchShape::square;
    throw LookupError("unknown patch shape '" + std::string(name) + "'");
}

AttackSpec AttackSpec::defaults(AttackKind kind) {
    AttackSpec s;
    s.kind = kind;
    switch (kind) {
    case AttackKind::apgd_ce:
    case AttackKind::apgd_dlr:
        s.iterations = 100;
        break;
    case AttackKind::autoattack:
        s.iterations = 100;
        s.queries = 5000;
        break;
    default:
        break;
    }
    return s;
}

void AttackSpec::validate() const {
    if (!(epsilon >= 0.0f)) throw ConfigError("epsilon must be non-negative");
    if (!(step >= 0.0f) || !(apgd_step >= 0.0f)) throw ConfigError("step sizes must be non-negative");
    if (!(apgd_alpha > 0.0f && apgd_alpha <= 1.0f)) throw ConfigError("APGD alpha must lie in (0, 1]");
    if (!(square_p_init > 0.0f && square_p_init <= 1.0f)) throw ConfigError("square p_init must lie in (0, 1]");
    if (!(box_lo <= box_hi)) throw ConfigError("pixel box has lo > hi");
    const auto in_unit = [](float lo, float hi) { return lo > 0.0f && lo <= hi && hi <= 1.0f; };
    if (!in_unit(train_scale_min, train_scale_max) || !in_unit(apply_scale_min, apply_scale_max)) {
        throw ConfigError("patch scale ranges must lie in (0, 1] with min <= max");
    }
    if (!(rotation_deg >= 0.0f)) throw ConfigError("rotation range must be symmetric about 0");
    if (!(patch_lr > 0.0f)) throw ConfigError("patch learning rate must be positive");
    if (patch_batch == 0) throw ConfigError("patch batch must be positive");
}

Json AttackSpec::to_json() const {
    Json j{{"variant", std::string(attack_name(kind))},
           {"epsilon", epsilon},
           {"step", step},
           {"iterations", iterations},
           {"apgd_alpha", apgd_alpha},
           {"apgd_step", apgd_step},
           {"queries", queries},
           {"square_p_init", square_p_init},
           {"box", {box_lo, box_hi}},
           {"seed", seed}};
    if (kind == AttackKind::patch) {
        j["patch"] = Json{{"shape", std::string(patch_shape_name(patch_shape))},
                          {"iterations", patch_iterations},
                          {"lr", patch_lr},
                          {"batch", patch_batch},
                          {"train_scale", {train_scale_min, train_scale_max}},
                          {"apply_scale", {apply_scale_min, apply_scale_max}},
                          {"rotation_deg", rotation_deg}};
    }
    return j;
}

AttackSpec AttackSpec::from_json(const Json &j) {
    AttackSpec s = defaults(attack_from_name(j.at("variant").get<std::string>()));
    s.epsilon = j.value("epsilon", s.epsilon);
    s.step = j.value("step", s.step);
    s.iterations = j.value("iterations", s.iterations);
    s.apgd_alpha = j.value("apgd_alpha", s.apgd_alpha);
    s.apgd_step = j.value("apgd_step", s.apgd_step);
    s.queries = j.value("queries", s.queries);
    s.square_p_init = j.value("square_p_init", s.square_p_init);
    if (j.contains("box")) {
        s.box_lo = j.at("box").at(0).get<float>();
        s.box_hi = j.at("box").at(1).get<float>();
    }
    s.seed = j.value("seed", s.seed);
    if (j.contains("patch")) {
        const Json &p = j.at("patch");
        s.patch_shape = patch_shape_from_name(p.value("shape", std::string("circle")));
        s.patch_iterations = p.value("iterations", s.patch_iterations);
        s.patch_lr = p.value("lr", s.patch_lr);
        s.patch_batch = p.value("batch", s.patch_batch);
        if (p.contains("train_scale")) {
            s.train_scale_min = p.at("train_scale").at(0).get<float>();
            s.train_scale_max = p.at("train_scale").at(1).get<float>();
        }
        if (p.contains("apply_scale")) {
            s.apply_scale_min = p.at("apply_scale").at(0).get<float>();
            s.apply_scale_max = p.at("apply_scale").at(1).get<float>();
        }
        s.rotation_deg = p.value("rotation_deg", s.rotation_deg);
    }
    s.validate();
    return s;
}

FeasibleSet::FeasibleSet(const Tensor &center, float epsilon, float lo, float hi)
    : center_(center), epsilon_(epsilon), lo_(lo), hi_(hi) {
    if (!(epsilon >= 0.0f)) throw ContractError("feasible set radius must be non-negative");
    if (!(lo <= hi)) throw ContractError("feasible set box has lo > hi");
}

Tensor FeasibleSet::project(const Tensor &x) const {
    if (x.shape() != center_.shape()) {
        throw DimensionError("projection of " + shape_str(x.shape()) + " onto a set centred at " +
                             shape_str(center_.shape()));
    }
    Tensor out = x;
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const float c = center_[i];
        out[i] = std::clamp(std::clamp(out[i], c - epsilon_, c + epsilon_), lo_, hi_);
    }
    return out;
}

bool FeasibleSet::contains(const Tensor &x, float tol) const {
    if (x.shape() != center_.shape()) return false;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        if (std::fabs(x[i] - center_[i]) > epsilon_ + tol || x[i] < lo_ - tol || x[i] > hi_ + tol) return false;
    }
    return true;
}

LossGrad loss_and_grad(const Classifier &model, const Tensor &x, std::span<const int> labels, LossKind loss) {
    Tape tape;
    Var xv = tape.variable(x);
    Var logits = model.logits(tape, xv);
    Var l = loss == LossKind::ce ? ops::cross_entropy(logits, labels) : ops::dlr_loss(logits, labels);
    const Var wrt[] = {xv};
    LossGrad out;
    try {
        out.grad = std::move(tape.backward(l, wrt)[0]);
    } catch (const NumericError &e) {
        throw AttackError(std::string("gradient evaluation failed: ") + e.what());
    }
    check_gradient(out.grad);
    out.logits = logits.value();
    out.loss = row_losses(out.logits, labels, loss);
    return out;
}

Tensor query_logits(const Classifier &model, const Tensor &x) {
    Tape tape;
    return model.logits(tape, tape.constant(x)).value();
}

Tensor fgsm(const Classifier &model, const Tensor &x, std::span<const int> labels, float epsilon, AttackStats *stats,
            float box_lo, float box_hi) {
    require_batch(x, labels);
    GradCounter counter(stats);
    const FeasibleSet set(x, epsilon, box_lo, box_hi);
    const LossGrad lg = loss_and_grad(model, x, labels, LossKind::ce);
    const std::vector<float> step(x.dim(0), epsilon);
    return set.project(sign_step(x, lg.grad, step));
}

Tensor pgd(const Classifier &model, const Tensor &x, std::span<const int> labels, const AttackSpec &spec,
           AttackStats *stats, std::vector<Tensor> *trajectory) {
    require_batch(x, labels);
    spec.validate();
    GradCounter counter(stats);
    const FeasibleSet set(x, spec.epsilon, spec.box_lo, spec.box_hi);
    const std::vector<float> step(x.dim(0), spec.step);
    Tensor cur = x;
    if (trajectory != nullptr) trajectory->push_back(cur);
    for (std::size_t it = 0; it < spec.iterations; ++it) {
        const LossGrad lg = loss_and_grad(model, cur, labels, LossKind::ce);
        cur = set.project(sign_step(cur, lg.grad, step));
        if (trajectory != nullptr) trajectory->push_back(cur);
    }
    return cur;
}

std::vector<std::size_t> apgd_checkpoints(std::size_t iterations) {
    std::vector<std::size_t> out;
    double prev = 0.0, cur = 0.22;
    while (cur <= 1.0) {
        // The tolerance keeps accumulated rounding in p_j from pushing ⌈p_j·N⌉ up by one.
        const auto w = static_cast<std::size_t>(std::ceil(cur * static_cast<double>(iterations) - 1e-9));
        if (w > 0 && w <= iterations && (out.empty() || out.back() != w)) out.push_back(w);
        const double next = cur + std::max(cur - prev - 0.03, 0.06);
        prev = cur;
        cur = next;
    }
    return out;
}

Tensor apgd(const Classifier &model, const Tensor &x, std::span<const int> labels, const AttackSpec &spec,
            LossKind loss, AttackStats *stats, ApgdTrace *trace) {
    require_batch(x, labels);
    spec.validate();
    if (spec.iterations == 0) throw ConfigError("APGD needs at least one iteration");
    if (loss == LossKind::dlr && model.num_classes() < 3) {
        throw ContractError("DLR loss needs at least 3 classes");
    }
    GradCounter counter(stats);
    constexpr float kRho = 0.75f;
    const std::size_t batch = x.dim(0), n = sample_size(x), iters = spec.iterations;
    const FeasibleSet set(x, spec.epsilon, spec.box_lo, spec.box_hi);
    const std::vector<std::size_t> checkpoints = apgd_checkpoints(iters);
    if (trace != nullptr) {
        trace->checkpoints = checkpoints;
        trace->iterates.push_back(x);
    }

    std::vector<float> eta(batch, spec.apgd_step > 0.0f ? spec.apgd_step : 2.0f * spec.epsilon);
    Tensor cur = x, prev = x;
    LossGrad lg = loss_and_grad(model, cur, labels, loss);
    Tensor grad = lg.grad, best = cur, best_grad = grad;
    std::vector<float> cur_loss = lg.loss, best_loss = lg.loss;
    std::vector<float> best_at_check = best_loss;
    std::vector<std::size_t> increases(batch, 0);
    std::vector<bool> reduced_last(batch, false);
    std::size_t last_check = 0, next_check = 0;

    for (std::size_t k = 0; k < iters; ++k) {
        const Tensor z = set.project(sign_step(cur, grad, eta));
        const float a = k == 0 ? 1.0f : spec.apgd_alpha;
        Tensor nxt(cur.shape());
        for (std::size_t i = 0; i < cur.numel(); ++i) {
            nxt[i] = cur[i] + a * (z[i] - cur[i]) + (1.0f - a) * (cur[i] - prev[i]);
        }
        nxt = set.project(nxt);
        prev = std::move(cur);
        cur = std::move(nxt);

        std::vector<float> new_loss;
        if (k + 1 < iters) {
            lg = loss_and_grad(model, cur, labels, loss);
            grad = lg.grad;
            new_loss = lg.loss;
        } else {
            new_loss = row_losses(query_logits(model, cur), labels, loss);
            if (stats != nullptr) stats->queries += batch;
        }
        for (std::size_t b = 0; b < batch; ++b) {
            if (new_loss[b] > cur_loss[b]) ++increases[b];
            if (new_loss[b] > best_loss[b]) {
                best_loss[b] = new_loss[b];
                std::copy_n(cur.data() + b * n, n, best.data() + b * n);
                if (k + 1 < iters) std::copy_n(grad.data() + b * n, n, best_grad.data() + b * n);
            }
            cur_loss[b] = new_loss[b];
        }

        if (next_check < checkpoints.size() && k + 1 == checkpoints[next_check]) {
            const std::size_t window = checkpoints[next_check] - last_check;
            for (std::size_t b = 0; b < batch; ++b) {
                const bool few_increases = static_cast<float>(increases[b]) < kRho * static_cast<float>(window);
                const bool stalled = !reduced_last[b] && best_at_check[b] >= best_loss[b];
                const bool halve = few_increases || stalled;
                if (halve && k + 1 < iters) {
                    eta[b] *= 0.5f;
                    std::copy_n(best.data() + b * n, n, cur.data() + b * n);
                    std::copy_n(best.data() + b * n, n, prev.data() + b * n);
                    std::copy_n(best_grad.data() + b * n, n, grad.data() + b * n);
                    cur_loss[b] = best_loss[b];
                }
                reduced_last[b] = halve;
                best_at_check[b] = best_loss[b];
                increases[b] = 0;
            }
            last_check = checkpoints[next_check];
            ++next_check;
        }
        if (trace != nullptr) {
            trace->iterates.push_back(cur);
            trace->steps.push_back(eta);
        }
    }
    return best;
}

float square_p(std::size_t query, std::size_t budget, float p_init) {
    static constexpr std::array<std::size_t, 9> kThresholds{10, 50, 200, 500, 1000, 2000, 4000, 6000, 8000};
    const std::size_t it = budget == 0 ? 0 : query * 10000 / budget;
    float p = p_init;
    for (std::size_t t : kThresholds) {
        if (it > t) p *= 0.5f;
    }
    return p;
}

Tensor square_attack(const Classifier &model, const Tensor &x, std::span<const int> labels, const AttackSpec &spec,
                     std::size_t first_index, AttackStats *stats) {
    require_batch(x, labels);
    spec.validate();
    GradCounter counter(stats);
    if (spec.queries == 0) return x;
    const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), n = c * h * w;
    const float eps = spec.epsilon;
    const FeasibleSet set(x, eps, spec.box_lo, spec.box_hi);
    const auto sign_of = [](bool positive) { return positive ? 1.0f : -1.0f; };

    std::vector<Rng> rngs;
    rngs.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) rngs.emplace_back(derive_seed(spec.seed, first_index + b));

    // Vertical stripes: one ±ε sign per (channel, column).
    Tensor delta(x.shape());
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t col = 0; col < w; ++col) {
                const float s = sign_of(rngs[b].coin()) * eps;
                for (std::size_t row = 0; row < h; ++row) delta[b * n + (ch * h + row) * w + col] = s;
            }
        }
    }
    Tensor cand = x;
    for (std::size_t i = 0; i < x.numel(); ++i) cand[i] += delta[i];
    Tensor best = set.project(cand);
    for (std::size_t i = 0; i < x.numel(); ++i) delta[i] = best[i] - x[i];

    Tensor logits = query_logits(model, best);
    if (stats != nullptr) stats->queries += batch;
    std::vector<float> loss = eager::cross_entropy_rows(logits, labels);
    std::vector<int> pred = eager::argmax_rows(logits);
    std::vector<bool> done(batch);
    for (std::size_t b = 0; b < batch; ++b) done[b] = pred[b] != labels[b];

    for (std::size_t q = 1; q < spec.queries; ++q) {
        std::vector<std::size_t> active;
        for (std::size_t b = 0; b < batch; ++b) {
            if (!done[b]) active.push_back(b);
        }
        if (active.empty()) break;
        const float p = square_p(q, spec.queries, spec.square_p_init);
        const auto side = std::clamp<std::size_t>(
            static_cast<std::size_t>(std::ceil(std::sqrt(p * static_cast<float>(h * w)))), 1, std::min(h, w));

        Tensor proposal = take_samples(x, active);
        std::vector<int> active_labels;
        for (std::size_t a = 0; a < active.size(); ++a) {
            const std::size_t b = active[a];
            active_labels.push_back(labels[b]);
            Rng &rng = rngs[b];
            std::vector<float> d(delta.data() + b * n, delta.data() + (b + 1) * n);
            for (int attempt = 0; attempt < 10; ++attempt) {
                const std::size_t r0 = rng.below(h - side + 1), c0 = rng.below(w - side + 1);
                bool changed = false;
                std::vector<float> s(c);
                for (std::size_t ch = 0; ch < c; ++ch) s[ch] = sign_of(rng.coin()) * eps;
                for (std::size_t ch = 0; ch < c && !changed; ++ch) {
                    for (std::size_t row = r0; row < r0 + side && !changed; ++row) {
                        for (std::size_t col = c0; col < c0 + side; ++col) {
                            const std::size_t i = b * n + (ch * h + row) * w + col;
                            const float target = std::clamp(x[i] + s[ch], spec.box_lo, spec.box_hi) - x[i];
                            if (target != delta[i]) {
                                changed = true;
                                break;
                            }
                        }
                    }
                }
                if (!changed && attempt < 9) continue;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t row = r0; row < r0 + side; ++row) {
                        for (std::size_t col = c0; col < c0 + side; ++col) d[(ch * h + row) * w + col] = s[ch];
                    }
                }
                break;
            }
            for (std::size_t i = 0; i < n; ++i) proposal[a * n + i] += d[i];
        }
        Tensor center = take_samples(x, active);
        proposal = FeasibleSet(center, eps, spec.box_lo, spec.box_hi).project(proposal);
        const Tensor plogits = query_logits(model, proposal);
        if (stats != nullptr) stats->queries += active.size();
        const std::vector<float> ploss = eager::cross_entropy_rows(plogits, active_labels);
        const std::vector<int> ppred = eager::argmax_rows(plogits);
        for (std::size_t a = 0; a < active.size(); ++a) {
            const std::size_t b = active[a];
            if (ploss[a] > loss[b]) {
                loss[b] = ploss[a];
                put_sample(best, b, proposal, a);
                for (std::size_t i = 0; i < n; ++i) delta[b * n + i] = best[b * n + i] - x[b * n + i];
                done[b] = ppred[a] != labels[b];
            }
        }
    }
    return best;
}

Tensor autoattack_lite(const Classifier &model, const Tensor &x, std::span<const int> labels, const AttackSpec &spec,
                       std::size_t first_index, AttackStats *stats) {
    require_batch(x, labels);
    spec.validate();
    const std::size_t batch = x.dim(0);
    Tensor out = x;
    std::vector<bool> fooled(batch, false);
    {
        const std::vector<int> pred = eager::argmax_rows(query_logits(model, x));
        if (stats != nullptr) stats->queries += batch;
        for (std::size_t b = 0; b < batch; ++b) fooled[b] = pred[b] != labels[b];
    }

    enum class Stage { apgd_ce, apgd_dlr, square };
    for (Stage stage : {Stage::apgd_ce, Stage::apgd_dlr, Stage::square}) {
        if (stage == Stage::apgd_dlr && model.num_classes() < 3) continue;
        std::vector<std::size_t> todo;
        for (std::size_t b = 0; b < batch; ++b) {
            if (!fooled[b]) todo.push_back(b);
        }
        if (todo.empty()) break;
        const Tensor xs = take_samples(x, todo);
        std::vector<int> ys;
        for (std::size_t b : todo) ys.push_back(labels[b]);
        Tensor adv;
        if (stage == Stage::square) {
            // Per-sample RNG streams keep Square results independent of which samples survived.
            adv = Tensor(xs.shape());
            for (std::size_t a = 0; a < todo.size(); ++a) {
                const std::size_t idx[] = {a};
                const Tensor one = square_attack(model, take_samples(xs, idx), std::span(ys).subspan(a, 1), spec,
                                                 first_index + todo[a], stats);
                put_sample(adv, a, one, 0);
            }
        } else {
            adv = apgd(model, xs, ys, spec, stage == Stage::apgd_ce ? LossKind::ce : LossKind::dlr, stats);
        }
        const std::vector<int> pred = eager::argmax_rows(query_logits(model, adv));
        if (stats != nullptr) stats->queries += todo.size();
        for (std::size_t a = 0; a < todo.size(); ++a) {
            if (pred[a] != ys[a]) {
                fooled[todo[a]] = true;
                put_sample(out, todo[a], adv, a);
            }
        }
    }
    return out;
}

} // namespace elytra
