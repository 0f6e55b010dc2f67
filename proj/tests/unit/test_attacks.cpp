#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "elytra/archive.hpp"
#include "elytra/attacks.hpp"
#include "elytra/error.hpp"
#include "elytra/ops.hpp"
#include "elytra/patch.hpp"
#include "gradcheck.hpp"

using namespace elytra;

namespace {

/// logits = flatten(x)·W + b.
class LinearToy : public Classifier {
public:
    LinearToy(Tensor w, Tensor b) : w_(std::move(w)), b_(std::move(b)) {}
    Var logits(Tape &tape, Var x) const override {
        const std::size_t batch = x.value().dim(0);
        Var flat = ops::reshape(x, Shape{batch, x.value().numel() / batch});
        return ops::add_row_bias(ops::matmul(flat, tape.constant(w_)), tape.constant(b_));
    }
    std::size_t num_classes() const override { return w_.dim(1); }

private:
    Tensor w_, b_;
};

/// Scalar input; logits [0, (x − 2)²].
class ParabolaToy : public Classifier {
public:
    Var logits(Tape &tape, Var x) const override {
        const std::size_t batch = x.value().dim(0);
        Var d = ops::add_scalar(ops::reshape(x, Shape{batch, 1}), -2.0f);
        return ops::matmul(ops::mul(d, d), tape.constant(Tensor::from({1, 2}, {0, 1})));
    }
    std::size_t num_classes() const override { return 2; }
};

/// Logits [M − 0.5, count of +ε pixels in a window], relative to a fixed centre.
/// Class 1 wins only once every window pixel sits at +ε.
LinearToy window_toy(std::size_t side, std::size_t r0, std::size_t c0, std::size_t win, float eps, const Tensor &x0) {
    const std::size_t n = side * side;
    Tensor w(Shape{n, 2});
    double offset = 0.0;
    for (std::size_t r = r0; r < r0 + win; ++r) {
        for (std::size_t c = c0; c < c0 + win; ++c) {
            // count += ((x − x0)/ε + 1)/2
            w.at(r * side + c, 1) = 0.5f / eps;
            offset += 0.5 - 0.5 * x0[r * side + c] / eps;
        }
    }
    const auto m = static_cast<float>(win * win);
    return LinearToy(std::move(w), Tensor::from({2}, {m - 0.5f, static_cast<float>(offset)}));
}

Tensor random_images(Shape shape, std::uint64_t seed, float lo = 0.0f, float hi = 1.0f) {
    Rng rng(seed);
    return gradcheck::random_tensor(rng, std::move(shape), lo, hi);
}

std::vector<int> random_labels(std::size_t n, std::size_t k, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<int> y;
    for (std::size_t i = 0; i < n; ++i) y.push_back(static_cast<int>(rng.below(k)));
    return y;
}

VitConfig tiny_vit() {
    VitConfig c;
    c.image_size = 16;
    c.embed_dim = 16;
    c.depth = 1;
    c.heads = 2;
    c.num_classes = 4;
    c.seed = 3;
    return c;
}

ParameterStore spread_params(const VitConfig &cfg) {
    ParameterStore s = init_params(cfg);
    Rng rng(cfg.seed + 100);
    for (auto &p : s)
        for (float &v : p.value.values()) v += rng.uniform(-0.3f, 0.3f);
    return s;
}

bool feasible(const Tensor &adv, const Tensor &x, float eps) {
    return FeasibleSet(x, eps).contains(adv, 1e-6f);
}

double misclassified(const Classifier &m, const Tensor &x, std::span<const int> y) {
    const std::vector<int> p = eager::argmax_rows(query_logits(m, x));
    std::size_t n = 0;
    for (std::size_t i = 0; i < p.size(); ++i) n += p[i] != y[i] ? 1 : 0;
    return static_cast<double>(n) / static_cast<double>(p.size());
}

} // namespace

TEST_CASE("attack spec defaults, validation and serialisation") {
    const AttackSpec pgd = AttackSpec::defaults(AttackKind::pgd);
    CHECK(pgd.epsilon == 8.0f / 255.0f);
    CHECK(pgd.step == 2.0f / 255.0f);
    CHECK(pgd.iterations == 10);
    CHECK(AttackSpec::defaults(AttackKind::apgd_ce).apgd_alpha == 0.75f);
    const AttackSpec patch = AttackSpec::defaults(AttackKind::patch);
    CHECK(patch.patch_iterations == 500);
    CHECK(patch.patch_lr == 5.0f);
    CHECK(patch.rotation_deg == 22.5f);
    CHECK(patch.train_scale_min == 0.05f);
    CHECK(patch.train_scale_max == 1.0f);
    CHECK(patch.apply_scale_min == 0.1f);
    CHECK(patch.apply_scale_max == 0.5f);

    for (AttackKind k : {AttackKind::fgsm, AttackKind::pgd, AttackKind::apgd_ce, AttackKind::apgd_dlr,
                         AttackKind::square, AttackKind::patch, AttackKind::autoattack}) {
        CHECK(attack_from_name(attack_name(k)) == k);
        AttackSpec s = AttackSpec::defaults(k);
        s.seed = 99;
        CHECK(AttackSpec::from_json(s.to_json()).to_json() == s.to_json());
    }
    CHECK_THROWS_AS(attack_from_name("FAB"), LookupError);
    AttackSpec bad = pgd;
    bad.epsilon = -0.1f;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = patch;
    bad.apply_scale_max = 1.5f;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = patch;
    bad.train_scale_min = 0.0f;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("feasible-set projection is idempotent and lands in the ball and box") {
    const Tensor x0 = random_images({4, 3, 8, 8}, 1);
    const Tensor wild = random_images({4, 3, 8, 8}, 2, -0.5f, 1.5f);
    const FeasibleSet set(x0, 0.05f);
    const Tensor p = set.project(wild);
    CHECK(set.contains(p, 1e-6f));
    CHECK(set.project(p).bit_equal(p));
    CHECK_FALSE(set.contains(wild));
}

TEST_CASE("FGSM examples") {
    // Loss of class 0 grows along +w for logits [0, w·x].
    const LinearToy m(Tensor::from({2, 2}, {0, 1, 0, -2}), Tensor::from({2}, {0, 0}));
    const Tensor x = Tensor::from({1, 1, 1, 2}, {0.5f, 0.5f});
    const int y[] = {0};
    AttackStats stats;
    const Tensor adv = fgsm(m, x, y, 0.1f, &stats);
    CHECK(adv[0] == doctest::Approx(0.6f));
    CHECK(adv[1] == doctest::Approx(0.4f));
    CHECK(stats.gradient_calls == 1);
    CHECK(stats.queries == 0);
    CHECK(fgsm(m, x, y, 0.0f).bit_equal(x));
    CHECK_THROWS_AS(fgsm(m, x, std::vector<int>{0, 1}, 0.1f), DimensionError);
}

TEST_CASE("PGD follows the 1-D closed form") {
    const ParabolaToy m;
    AttackSpec s = AttackSpec::defaults(AttackKind::pgd);
    s.epsilon = 0.5f;
    s.step = 0.2f;
    s.iterations = 10;
    s.box_lo = -1.0f;
    s.box_hi = 1.0f;
    const Tensor x = Tensor::from({1, 1, 1, 1}, {0.0f});
    const int y[] = {0};
    AttackStats stats;
    std::vector<Tensor> traj;
    const Tensor adv = pgd(m, x, y, s, &stats, &traj);
    // Ascent on (x − 2)² moves away from 2: 0 → −0.2 → −0.4 → −0.5 (ball edge).
    CHECK(adv[0] == doctest::Approx(-0.5f));
    CHECK(traj.size() == 11);
    CHECK(traj[1][0] == doctest::Approx(-0.2f));
    CHECK(traj[2][0] == doctest::Approx(-0.4f));
    CHECK(stats.gradient_calls == 10);
    s.epsilon = 0.0f;
    CHECK(pgd(m, x, y, s).bit_equal(x));
}

TEST_CASE("PGD on the ViT is feasible, counted, monotone and leaves the model untouched") {
    const VitConfig cfg = tiny_vit();
    const ParameterStore store = spread_params(cfg);
    const ParameterStore before = store;
    const VitClassifier model(cfg, store);
    const Tensor x = random_images(cfg.image_shape(6), 5);
    const std::vector<int> y = random_labels(6, cfg.num_classes, 6);
    AttackSpec s = AttackSpec::defaults(AttackKind::pgd);
    s.iterations = 7;
    AttackStats stats;
    const Tensor adv = pgd(model, x, y, s, &stats);
    CHECK(stats.gradient_calls == 7);
    CHECK(feasible(adv, x, s.epsilon));
    const Tensor zl = query_logits(model, x), al = query_logits(model, adv);
    const auto l0 = eager::cross_entropy_rows(zl, y), l1 = eager::cross_entropy_rows(al, y);
    double mean0 = 0, mean1 = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        mean0 += l0[i];
        mean1 += l1[i];
    }
    CHECK(mean1 >= mean0 - 1e-6);
    CHECK(pgd(model, x, y, s).bit_equal(adv));
    CHECK(store.bit_equal(before));
}

TEST_CASE("APGD checkpoint schedule") {
    CHECK(apgd_checkpoints(100) == std::vector<std::size_t>{22, 41, 57, 70, 80, 87, 93, 99});
    for (std::size_t n : {1u, 5u, 10u, 37u, 250u}) {
        const auto c = apgd_checkpoints(n);
        REQUIRE_FALSE(c.empty());
        CHECK(c.front() == static_cast<std::size_t>(std::ceil(0.22 * static_cast<double>(n) - 1e-9)));
        for (std::size_t i = 1; i < c.size(); ++i) CHECK(c[i] > c[i - 1]);
        CHECK(c.back() <= n);
    }
}

TEST_CASE("APGD with α = 1 and no halving retraces PGD") {
    // A steep linear model keeps increasing the loss on every step inside a wide ball.
    Rng rng(4);
    const LinearToy m(gradcheck::random_tensor(rng, {16, 3}), Tensor::from({3}, {0, 0, 0}));
    const Tensor x = random_images({3, 1, 4, 4}, 7, 0.3f, 0.7f);
    const std::vector<int> y{0, 1, 2};
    AttackSpec s = AttackSpec::defaults(AttackKind::apgd_ce);
    s.epsilon = 0.25f;
    s.step = 0.01f;
    s.apgd_step = 0.01f;
    s.apgd_alpha = 1.0f;
    s.iterations = 10;
    std::vector<Tensor> traj;
    pgd(m, x, y, s, nullptr, &traj);
    ApgdTrace trace;
    AttackStats stats;
    const Tensor adv = apgd(m, x, y, s, LossKind::ce, &stats, &trace);
    REQUIRE(trace.iterates.size() == traj.size());
    for (std::size_t i = 0; i < traj.size(); ++i) CHECK(max_abs_diff(trace.iterates[i], traj[i]) <= 1e-7f);
    for (const auto &st : trace.steps)
        for (float e : st) CHECK(e == 0.01f);
    CHECK(stats.gradient_calls == 10);
    CHECK(max_abs_diff(adv, traj.back()) <= 1e-7f);
}

TEST_CASE("APGD on a monotone ramp never halves in the first window") {
    // Loss of class 0 under logits [0, x] rises monotonically with x; the ball never binds.
    const LinearToy m(Tensor::from({1, 2}, {0, 1}), Tensor::from({2}, {0, 0}));
    const Tensor x = Tensor::from({1, 1, 1, 1}, {0.0f});
    const int y[] = {0};
    AttackSpec s = AttackSpec::defaults(AttackKind::apgd_ce);
    s.epsilon = 100.0f;
    s.apgd_step = 1.0f;
    s.box_lo = -1000.0f;
    s.box_hi = 1000.0f;
    s.iterations = 20;
    ApgdTrace trace;
    apgd(m, x, y, s, LossKind::ce, nullptr, &trace);
    const std::size_t first = trace.checkpoints.front();
    CHECK(first == 5);
    for (std::size_t k = 0; k < first; ++k) CHECK(trace.steps[k][0] == 1.0f);
    for (std::size_t k = 1; k < trace.iterates.size(); ++k) CHECK(trace.iterates[k][0] > trace.iterates[k - 1][0]);
}

TEST_CASE("APGD returns the best iterate, stays feasible and needs three classes for DLR") {
    const VitConfig cfg = tiny_vit();
    const ParameterStore store = spread_params(cfg);
    const VitClassifier model(cfg, store);
    const Tensor x = random_images(cfg.image_shape(4), 8);
    const std::vector<int> y = random_labels(4, cfg.num_classes, 9);
    AttackSpec s = AttackSpec::defaults(AttackKind::apgd_dlr);
    s.iterations = 12;
    for (LossKind loss : {LossKind::ce, LossKind::dlr}) {
        AttackStats stats;
        ApgdTrace trace;
        const Tensor adv = apgd(model, x, y, s, loss, &stats, &trace);
        CHECK(stats.gradient_calls == 12);
        CHECK(feasible(adv, x, s.epsilon));
        const Tensor z = query_logits(model, adv);
        const auto best = loss == LossKind::ce ? eager::cross_entropy_rows(z, y) : eager::dlr_rows(z, y);
        for (const Tensor &it : trace.iterates) {
            CHECK(feasible(it, x, s.epsilon));
            const Tensor zi = query_logits(model, it);
            const auto li = loss == LossKind::ce ? eager::cross_entropy_rows(zi, y) : eager::dlr_rows(zi, y);
            for (std::size_t b = 0; b < y.size(); ++b) CHECK(best[b] >= li[b] - 1e-6f);
        }
    }
    const LinearToy two(Tensor::from({1, 2}, {0, 1}), Tensor::from({2}, {0, 0}));
    const int y0[] = {0};
    CHECK_THROWS_AS(apgd(two, Tensor::from({1, 1, 1, 1}, {0.5f}), y0, s, LossKind::dlr), ContractError);
}

TEST_CASE("DLR examples and shift invariance") {
    Tape tape;
    const int y0[] = {0};
    CHECK(ops::dlr_loss(tape.constant(Tensor::from({1, 3}, {3, 1, 0})), y0).value().item() ==
          doctest::Approx(-2.0 / 3.0).epsilon(1e-6));
    CHECK(ops::dlr_loss(tape.constant(Tensor::from({1, 4}, {2, 2, 2, 2})), y0).value().item() == 0.0f);
    Rng rng(12);
    Tensor z(Shape{5, 6});
    // Dyadic values keep the shifted differences exact in float.
    for (float &v : z.values()) v = static_cast<float>(rng.below(64)) / 8.0f;
    const std::vector<int> y = random_labels(5, 6, 13);
    const auto base = eager::dlr_rows(z, y);
    for (float c : {-3.0f, 0.5f, 16.0f}) {
        Tensor shifted = z;
        for (float &v : shifted.values()) v += c;
        CHECK(eager::dlr_rows(shifted, y) == base);
    }
    CHECK_THROWS_AS(ops::dlr_loss(tape.constant(Tensor::from({1, 2}, {1, 0})), y0), ContractError);
}

TEST_CASE("Square attack is query-only, feasible and batch-independent") {
    const VitConfig cfg = tiny_vit();
    const ParameterStore store = spread_params(cfg);
    const VitClassifier model(cfg, store);
    const Tensor x = random_images(cfg.image_shape(4), 14);
    const std::vector<int> y = random_labels(4, cfg.num_classes, 15);
    AttackSpec s = AttackSpec::defaults(AttackKind::square);
    s.queries = 60;
    s.seed = 5;
    AttackStats stats;
    const Tensor adv = square_attack(model, x, y, s, 10, &stats);
    CHECK(stats.gradient_calls == 0);
    CHECK(stats.queries > 0);
    CHECK(stats.queries <= 4 * 60);
    CHECK(feasible(adv, x, s.epsilon));
    // Sample 2 attacked alone with its global index gives the same result.
    const std::size_t idx = 2;
    const Tensor alone = square_attack(model, slice_batch(x, idx, idx + 1), std::span(y).subspan(idx, 1), s, 10 + idx);
    CHECK(alone.bit_equal(slice_batch(adv, idx, idx + 1)));
    s.queries = 0;
    AttackStats none;
    CHECK(square_attack(model, x, y, s, 0, &none).bit_equal(x));
    CHECK(none.queries == 0);
}

TEST_CASE("Square attack solves the window toy within 200 queries") {
    const float eps = 0.05f;
    const std::size_t side = 16, win = 4;
    int solved = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Tensor x = random_images({1, 1, side, side}, 20 + seed, 0.2f, 0.8f);
        const LinearToy toy = window_toy(side, 5, 7, win, eps, x);
        // Exhaustive optimum: every window pixel at +ε gives count M and flips the label.
        Tensor best = x;
        for (std::size_t r = 5; r < 5 + win; ++r)
            for (std::size_t c = 7; c < 7 + win; ++c) best[r * side + c] += eps;
        const int y[] = {0};
        REQUIRE(misclassified(toy, best, y) == 1.0);
        AttackSpec s = AttackSpec::defaults(AttackKind::square);
        s.epsilon = eps;
        s.queries = 200;
        s.seed = seed;
        AttackStats stats;
        const Tensor adv = square_attack(toy, x, y, s, 0, &stats);
        CHECK(stats.queries <= 200);
        solved += misclassified(toy, adv, y) == 1.0 ? 1 : 0;
        const float reached = query_logits(toy, adv).at(0, 1), optimum = query_logits(toy, best).at(0, 1);
        CHECK(reached == doctest::Approx(optimum).epsilon(1e-4));
    }
    CHECK(solved == 5);
}

TEST_CASE("circle mask covers about π/4 of its square") {
    for (std::size_t p : {8u, 16u, 32u, 64u}) {
        const auto m = patch_mask(PatchShape::circle, p);
        double on = 0;
        for (auto v : m) on += v;
        const double frac = on / static_cast<double>(p * p);
        // One ring of boundary pixels is the quantisation band.
        CHECK(std::fabs(frac - std::numbers::pi / 4.0) <= std::numbers::pi * static_cast<double>(p) /
                                                               static_cast<double>(p * p));
        const auto sq = patch_mask(PatchShape::square, p);
        CHECK(std::all_of(sq.begin(), sq.end(), [](auto v) { return v == 1; }));
    }
}

TEST_CASE("patch application is confined to the mask") {
    const std::size_t side = 32;
    PatchArtifact patch;
    patch.pixels = Tensor::full(Shape{3, side, side}, 1.0f);
    patch.shape = PatchShape::circle;
    AttackSpec s = AttackSpec::defaults(AttackKind::patch);
    const Tensor x = random_images({8, 3, side, side}, 30, 0.0f, 0.9f);

    s.apply_scale_min = s.apply_scale_max = 0.1f;
    const Tensor small = apply_patch(patch, x, s, 4);
    for (std::size_t b = 0; b < 8; ++b) {
        std::size_t changed = 0;
        for (std::size_t i = 0; i < 3 * side * side; ++i) {
            const std::size_t k = b * 3 * side * side + i;
            if (small[k] != x[k]) {
                ++changed;
                CHECK(small[k] == 1.0f);
            }
        }
        // A 3 px footprint holds at most 9 pixels per channel.
        CHECK(changed > 0);
        CHECK(changed <= 3 * 9);
    }
    CHECK(apply_patch(patch, x, s, 4).bit_equal(small));
    CHECK_FALSE(apply_patch(patch, x, s, 5).bit_equal(small));

    s.apply_scale_min = s.apply_scale_max = 0.01f;
    CHECK_THROWS_AS(apply_patch(patch, x, s, 4), PlacementError);
}

TEST_CASE("modified area over 1000 placements matches the scale range") {
    const std::size_t side = 32;
    PatchArtifact patch;
    patch.pixels = Tensor::full(Shape{1, side, side}, 1.0f);
    patch.shape = PatchShape::circle;
    const AttackSpec s = AttackSpec::defaults(AttackKind::patch);
    const Tensor x = Tensor::zeros(Shape{1000, 1, side, side});
    const Tensor adv = apply_patch(patch, x, s, 77);
    double lo = 1.0, hi = 0.0, mean = 0.0;
    for (std::size_t b = 0; b < 1000; ++b) {
        double on = 0;
        for (std::size_t i = 0; i < side * side; ++i) on += adv[b * side * side + i] != 0.0f ? 1 : 0;
        const double frac = on / static_cast<double>(side * side);
        lo = std::min(lo, frac);
        hi = std::max(hi, frac);
        mean += frac / 1000.0;
    }
    // Footprints of 3..16 px: a disc of diameter S covers ≈ (π/4)S² pixels.
    const double area = static_cast<double>(side * side);
    CHECK(lo >= 0.5 * (std::numbers::pi / 4.0) * 9.0 / area);
    CHECK(hi <= 256.0 / area);
    // E[s²] for s ~ U(0.1, 0.5) is 0.10333; a disc keeps π/4 of that.
    CHECK(mean == doctest::Approx(std::numbers::pi / 4.0 * (0.125 - 0.001) / 1.2).epsilon(0.08));
}

TEST_CASE("patch training is deterministic, box-bounded and needs data") {
    const VitConfig cfg = tiny_vit();
    const ParameterStore store = spread_params(cfg);
    const ParameterStore before = store;
    const VitClassifier model(cfg, store);
    const Tensor x = random_images(cfg.image_shape(6), 40);
    const std::vector<int> y = random_labels(6, cfg.num_classes, 41);
    AttackSpec s = AttackSpec::defaults(AttackKind::patch);
    s.patch_iterations = 0;
    const PatchArtifact init = train_patch(model, x, y, s);
    CHECK(init.pixels.shape() == Shape{3, 16, 16});
    CHECK(train_patch(model, x, y, s).pixels.bit_equal(init.pixels));
    s.patch_iterations = 5;
    s.patch_batch = 3;
    const PatchArtifact trained = train_patch(model, x, y, s, "train");
    CHECK_FALSE(trained.pixels.bit_equal(init.pixels));
    CHECK(trained.source_split == "train");
    for (float v : trained.pixels.values()) CHECK((v >= 0.0f && v <= 1.0f));
    CHECK(train_patch(model, x, y, s).content_hash() == trained.content_hash());
    CHECK(store.bit_equal(before));
    CHECK_THROWS_AS(train_patch(model, Tensor(), std::vector<int>{}, s), ContractError);

    const auto dir = std::filesystem::temp_directory_path() / "elytra_test_patch";
    std::filesystem::remove_all(dir);
    save_patch(dir, trained);
    const PatchArtifact back = load_patch(dir);
    CHECK(back.pixels.bit_equal(trained.pixels));
    CHECK(back.content_hash() == trained.content_hash());
    std::filesystem::remove_all(dir);
}

TEST_CASE("AutoAttack-lite short-circuits and dominates its components") {
    const Tensor x = random_images({1, 1, 2, 2}, 50);
    SUBCASE("constant model") {
        const LinearToy flat(Tensor::zeros(Shape{4, 3}), Tensor::from({3}, {1, 0, 0}));
        const int y[] = {0};
        AttackSpec s = AttackSpec::defaults(AttackKind::autoattack);
        s.iterations = 10;
        s.queries = 50;
        CHECK(autoattack_lite(flat, x, y, s).bit_equal(x));
    }
    SUBCASE("already misclassified") {
        const LinearToy flat(Tensor::zeros(Shape{4, 3}), Tensor::from({3}, {1, 0, 0}));
        const int y[] = {2};
        AttackStats stats;
        CHECK(autoattack_lite(flat, x, y, AttackSpec::defaults(AttackKind::autoattack), 0, &stats).bit_equal(x));
        // Only the initial classification is spent.
        CHECK(stats.gradient_calls == 0);
        CHECK(stats.queries == 1);
    }
    SUBCASE("logistic ensemble") {
        Rng rng(51);
        const LinearToy m(gradcheck::random_tensor(rng, {16, 2}, -3.0f, 3.0f), Tensor::from({2}, {0, 0}));
        const Tensor xs = random_images({40, 1, 4, 4}, 52);
        const std::vector<int> truth = eager::argmax_rows(query_logits(m, xs));
        AttackSpec s = AttackSpec::defaults(AttackKind::autoattack);
        s.epsilon = 0.03f;
        s.iterations = 20;
        s.queries = 100;
        const double aa = misclassified(m, autoattack_lite(m, xs, truth, s), truth);
        const double ce = misclassified(m, apgd(m, xs, truth, s, LossKind::ce), truth);
        const double sq = misclassified(m, square_attack(m, xs, truth, s), truth);
        MESSAGE("ensemble " << aa << " apgd-ce " << ce << " square " << sq);
        CHECK(aa > 0.0);
        CHECK(aa < 1.0);
        CHECK(aa >= std::max(ce, sq));
    }
}

TEST_CASE("archives record provenance, round-trip and regenerate identically") {
    const VitConfig cfg = tiny_vit();
    const ParameterStore store = spread_params(cfg);
    const Tensor x = random_images(cfg.image_shape(5), 60);
    const std::vector<int> y = random_labels(5, cfg.num_classes, 61);
    AttackSpec s = AttackSpec::defaults(AttackKind::fgsm);
    const AdvArchive a = generate_archive(cfg, store, x, y, s, "test", nullptr, 2);
    CHECK(a.base_hash == store.content_hash());
    CHECK(a.size() == 5);
    CHECK(a.stats.gradient_calls == 3);
    CHECK(feasible(a.images, x, s.epsilon));
    const std::vector<int> pred = predict(cfg, store, {}, a.images);
    for (std::size_t i = 0; i < 5; ++i) CHECK(a.success[i] == (pred[i] != y[i] ? 1 : 0));
    CHECK(generate_archive(cfg, store, x, y, s, "test", nullptr, 5).content_hash() == a.content_hash());

    const auto dir = std::filesystem::temp_directory_path() / "elytra_test_archive";
    std::filesystem::remove_all(dir);
    save_archive(dir, a);
    const AdvArchive back = load_archive(dir);
    CHECK(back.images.bit_equal(a.images));
    CHECK(back.labels == a.labels);
    CHECK(back.success == a.success);
    CHECK(back.content_hash() == a.content_hash());
    std::filesystem::remove_all(dir);

    CHECK_THROWS_AS(generate_archive(cfg, store, x, y, AttackSpec::defaults(AttackKind::patch), "test"),
                    MissingArtifactError);
}
