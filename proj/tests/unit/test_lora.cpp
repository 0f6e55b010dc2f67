#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>

#include "elytra/error.hpp"
#include "elytra/lora.hpp"
#include "elytra/vit.hpp"
#include "gradcheck.hpp"
#include "reference.hpp"

using namespace elytra;

namespace {

const std::vector<Role> kMatrixRoles = {Role::patch_embed, Role::wq,      Role::wk,     Role::wv,
                                        Role::wo,          Role::mlp_in, Role::mlp_out, Role::head};

/// Adapter with non-zero random factors on the given roles.
LoraAdapter random_adapter(const ParameterStore &s, const std::set<Role> &roles, std::size_t rank, std::uint64_t seed,
                           float amp = 0.05f) {
    LoraAdapter a = init_adapter(s, roles, rank, 2.0f * static_cast<float>(rank), 0.0f, seed);
    Rng rng(seed + 1000);
    for (auto &f : a.factors) {
        f.u = gradcheck::random_tensor(rng, f.u.shape(), -amp, amp);
        f.v = gradcheck::random_tensor(rng, f.v.shape(), -amp, amp);
    }
    return a;
}

double max_store_diff(const ParameterStore &a, const ParameterStore &b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<double>(max_abs_diff(a[i].value, b[i].value)));
    return m;
}

Tensor images(const VitConfig &cfg, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    return gradcheck::random_tensor(rng, cfg.image_shape(n), 0.0f, 1.0f);
}

} // namespace

TEST_CASE("materialize examples") {
    LoraAdapter a;
    a.rank = 1;
    a.alpha = 1.0f;
    a.factors.push_back({"w", Tensor::from({2, 1}, {1, 0}), Tensor::from({1, 2}, {0, 2})});
    const Tensor d = materialize(a).at("w");
    CHECK(d.bit_equal(Tensor::from({2, 2}, {0, 2, 0, 0})));

    a.factors[0].v = Tensor::zeros(Shape{1, 2});
    const Tensor zero = materialize(a).at("w");
    for (float v : zero.values()) CHECK(v == 0.0f);

    LoraAdapter p;
    p.rank = 16;
    p.alpha = 32.0f;
    CHECK(p.scaling() == 2.0f);
}

TEST_CASE("materialized deltas have rank at most r") {
    const ParameterStore s = init_params(VitConfig{});
    for (std::size_t r : {1u, 3u, 8u}) {
        const LoraAdapter a = random_adapter(s, target_preset("attn_mlp_head"), r, 40 + r, 0.5f);
        for (const auto &[name, delta] : materialize(a)) {
            Eigen::MatrixXd m(delta.rows(), delta.cols());
            for (std::size_t i = 0; i < delta.rows(); ++i)
                for (std::size_t j = 0; j < delta.cols(); ++j) m(i, j) = delta.at(i, j);
            const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues();
            REQUIRE(sv(0) > 0.0);
            for (Eigen::Index k = static_cast<Eigen::Index>(r); k < sv.size(); ++k) CHECK(sv(k) < 1e-5 * sv(0));
        }
    }
}

TEST_CASE("init_adapter errors") {
    const ParameterStore s = init_params(VitConfig{});
    CHECK_THROWS_AS(init_adapter(s, {Role::head}, 16, 32.0f, 0.1f, 1), ConfigError);
    CHECK_THROWS_AS(init_adapter(s, {Role::wq}, 0, 32.0f, 0.1f, 1), ConfigError);
    CHECK_THROWS_AS(init_adapter(s, {Role::ln_scale}, 1, 2.0f, 0.1f, 1), LookupError);
    CHECK_THROWS_AS(init_adapter(s, {}, 1, 2.0f, 0.1f, 1), LookupError);
    CHECK_THROWS_AS(target_preset("everything"), ConfigError);

    LoraAdapter a = init_adapter(s, {Role::wq}, 4, 8.0f, 0.1f, 1);
    a.factors[0].target = "blocks.9.attn.q.weight";
    CHECK_THROWS_AS(a.validate_against(s), LookupError);
    a = init_adapter(s, {Role::wq}, 4, 8.0f, 0.1f, 1);
    a.factors[0].v = Tensor::zeros(Shape{4, 65});
    CHECK_THROWS_AS(a.validate_against(s), DimensionError);
    const LoraAdapter *bad[] = {&a};
    CHECK_THROWS_AS(forward_logits(VitConfig{}, s, bad, images(VitConfig{}, 1, 1)), DimensionError);
}

TEST_CASE("trainable count equals the shape sum for random target sets") {
    const VitConfig cfg;
    const ParameterStore s = init_params(cfg);
    Rng rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        std::set<Role> roles;
        while (roles.empty())
            for (Role r : kMatrixRoles)
                if (rng.coin()) roles.insert(r);
        const std::size_t rank = 1 + rng.below(8);
        const LoraAdapter a = init_adapter(s, roles, rank, 2.0f * static_cast<float>(rank), 0.1f, trial);
        std::size_t oracle = 0;
        for (const auto &p : s)
            if (roles.contains(p.role) && p.value.rank() == 2) oracle += rank * (p.value.dim(0) + p.value.dim(1));
        CHECK(trainable_count(a) == oracle);
        CHECK(adapter_count_from_shapes(cfg, roles, rank) == oracle);
        CHECK(reduction_ratio(a, s) == doctest::Approx(1.0 - static_cast<double>(oracle) / 207944.0).epsilon(1e-15));
    }
}

TEST_CASE("default adapter accounting on the micro model") {
    const ParameterStore s = init_params(VitConfig{});
    const LoraAdapter a = init_adapter(s, target_preset(kDefaultTargetPreset), 16, 32.0f, 0.1f, 1);
    // Wq and Wv in four blocks, each 64×64.
    CHECK(a.factors.size() == 8);
    CHECK(trainable_count(a) == 8 * 16 * (64 + 64));
    CHECK(reduction_ratio(a, s) == 1.0 - 16384.0 / 207944.0);
}

TEST_CASE("reduction arithmetic at 768 dims and paper scale") {
    // Single 768×768 target at r = 16.
    CHECK(16 * (768 + 768) == 24576);
    CHECK(768 * 768 == 589824);
    const VitConfig big = vit_base_config(21);
    std::size_t total = 0;
    for (const auto &p : vit_param_shapes(big)) total += shape_numel(p.shape);
    CHECK(total > 85'000'000);
    CHECK(total < 87'000'000);
    const double qv = reduction_from_shapes(big, target_preset("attn_qv"), 16);
    CHECK(qv == doctest::Approx(1.0 - 12.0 * 2.0 * 24576.0 / static_cast<double>(total)).epsilon(1e-15));
    CHECK(qv >= 0.990);
    CHECK(qv <= 0.999);
}

TEST_CASE("fresh adapters are no-ops and side application equals merged weights") {
    const VitConfig cfg;
    ParameterStore s = init_params(cfg);
    Rng rng(5);
    for (auto &p : s)
        for (float &v : p.value.values()) v += rng.uniform(-0.05f, 0.05f);
    const Tensor x = images(cfg, 3, 2);
    const Tensor base = forward_logits(cfg, s, {}, x);

    const LoraAdapter fresh = init_adapter(s, target_preset("attn_qkvo"), 16, 32.0f, 0.1f, 9);
    const LoraAdapter *f[] = {&fresh};
    CHECK(max_abs_diff(forward_logits(cfg, s, f, x), base) < 1e-6);

    const LoraAdapter a = random_adapter(s, target_preset("attn_qkvo"), 4, 11);
    const LoraAdapter *side[] = {&a};
    const Tensor z = forward_logits(cfg, s, side, x);
    const Tensor merged = forward_logits(cfg, merge_sequential(s, std::span(&a, 1)), {}, x);
    CHECK(max_abs_diff(z, merged) < 1e-5);
    CHECK(max_abs_diff(z, base) > 1e-3);
}

TEST_CASE("parallel merge identities") {
    const VitConfig cfg;
    const ParameterStore s = init_params(cfg);
    const std::string before = s.content_hash();
    const LoraAdapter a = random_adapter(s, {Role::wq}, 4, 1), b = random_adapter(s, {Role::wv}, 4, 2),
                      c = random_adapter(s, {Role::wq, Role::wo}, 4, 3);
    const std::vector<LoraAdapter> one{a}, same{a, a}, disjoint{a, b}, three{a, b, c};

    CHECK(max_store_diff(merge_parallel(s, one, CompositionWeights{{1.0}}), merge_sequential(s, one)) == 0.0);
    CHECK(max_store_diff(merge_parallel(s, same, CompositionWeights::uniform(2)), merge_sequential(s, one)) < 1e-7);
    for (std::size_t l = 0; l < 3; ++l) {
        const ParameterStore m = merge_parallel(s, three, CompositionWeights::one_hot(3, l));
        CHECK(max_store_diff(m, merge_sequential(s, std::span(&three[l], 1))) < 1e-6);
        const LoraAdapter *only[] = {&three[l]};
        const Tensor x = images(cfg, 2, 3);
        CHECK(max_abs_diff(forward_logits(cfg, m, {}, x), forward_logits(cfg, s, only, x)) < 1e-5);
    }

    // Disjoint targets: each matrix carries half of its own adapter's delta.
    const ParameterStore half = merge_parallel(s, disjoint, CompositionWeights::uniform(2));
    const ref::Weights wa = ref::weights_of(s, {&a}), wb = ref::weights_of(s, {&b}), w0 = ref::weights_of(s);
    for (const auto &p : half) {
        const auto &orig = w0.at(p.name);
        for (std::size_t i = 0; i < p.value.numel(); ++i) {
            const double expect = orig[i] + 0.5 * (wa.at(p.name)[i] - orig[i]) + 0.5 * (wb.at(p.name)[i] - orig[i]);
            CHECK(std::fabs(p.value[i] - expect) < 1e-7);
        }
    }
    CHECK(s.content_hash() == before);
}

TEST_CASE("sequential merge identities") {
    const ParameterStore s = init_params(VitConfig{});
    const LoraAdapter a = random_adapter(s, {Role::wq}, 4, 1), b = random_adapter(s, {Role::wq, Role::wk}, 4, 2),
                      c = random_adapter(s, {Role::mlp_in}, 4, 3);
    CHECK(merge_sequential(s, std::span<const LoraAdapter>()).bit_equal(s));
    const std::vector<LoraAdapter> ab{a, b}, ba{b, a}, abc{a, b, c};
    CHECK(merge_sequential(s, ab).bit_equal(merge_sequential(s, ba)));

    // Σ Δ equals the uniform parallel merge of each Δ scaled by 3.
    std::vector<LoraAdapter> tripled = abc;
    for (auto &ad : tripled) ad.alpha *= 3.0f;
    CHECK(max_store_diff(merge_sequential(s, abc), merge_parallel(s, tripled, CompositionWeights::uniform(3))) <
          1e-6);
}

TEST_CASE("composition weight contract") {
    CHECK_NOTHROW(CompositionWeights::uniform(5).validate(5));
    CHECK_NOTHROW(CompositionWeights::one_hot(3, 1).validate(3));
    CHECK_THROWS_AS(CompositionWeights::uniform(2).validate(3), ContractError);
    CHECK_THROWS_AS((CompositionWeights{{0.5, 0.6}}.validate(2)), ContractError);
    CHECK_THROWS_AS((CompositionWeights{{1.5, -0.5}}.validate(2)), ContractError);
    CHECK_THROWS_AS(CompositionWeights::uniform(0), ContractError);
    const ParameterStore s = init_params(VitConfig{});
    const std::vector<LoraAdapter> two{random_adapter(s, {Role::wq}, 2, 1), random_adapter(s, {Role::wq}, 2, 2)};
    CHECK_THROWS_AS(merge_parallel(s, two, CompositionWeights::uniform(3)), ContractError);
}

TEST_CASE("adapter files round-trip bit-exactly") {
    const ParameterStore s = init_params(VitConfig{});
    LoraAdapter a = random_adapter(s, target_preset("attn_qv"), 4, 3);
    a.provenance = "PGD";
    a.dropout = 0.1f;
    const auto dir = std::filesystem::temp_directory_path() / "elytra_test_adapter";
    std::filesystem::remove_all(dir);
    save_adapter(dir, a);
    const LoraAdapter b = load_adapter(dir);
    CHECK(b.content_hash() == a.content_hash());
    CHECK(b.provenance == "PGD");
    CHECK(b.rank == 4);
    for (std::size_t f = 0; f < a.factors.size(); ++f) {
        CHECK(b.factors[f].u.bit_equal(a.factors[f].u));
        CHECK(b.factors[f].v.bit_equal(a.factors[f].v));
    }
    std::vector<float> blob = read_f32_blob(dir / "factors.f32");
    blob.resize(blob.size() - 1);
    write_f32_blob(dir / "factors.f32", blob);
    CHECK_THROWS_AS(load_adapter(dir), FormatError);
    std::filesystem::remove_all(dir);
}
