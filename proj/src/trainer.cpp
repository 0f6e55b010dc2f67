#include "elytra/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include "elytra/error.hpp"
#include "elytra/ops.hpp"
#include "elytra/rng.hpp"

namespace elytra {

namespace {

using Clock = std::chrono::steady_clock;

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    return idx;
}

Tensor gather(const Tensor &images, std::span<const std::size_t> idx) {
    const std::size_t per = images.numel() / images.dim(0);
    Shape s = images.shape();
    s[0] = idx.size();
    Tensor out(std::move(s));
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(images.data() + idx[i] * per, per, out.data() + i * per);
    return out;
}

void check_set(const Tensor &images, std::span<const int> labels, const char *what) {
    if (images.rank() != 4 || images.dim(0) != labels.size()) {
        throw DimensionError(std::string(what) + ": images " + shape_str(images.shape()) + " with " +
                             std::to_string(labels.size()) + " labels");
    }
}

void evaluate_into(TrainReport &report, const VitConfig &cfg, const ParameterStore &store,
                   std::span<const LoraAdapter *const> adapters, const EvalSets &eval) {
    if (eval.clean != nullptr) {
        report.clean_accuracy = accuracy(cfg, store, adapters, eval.clean->images, eval.clean->labels);
    }
    for (const LabeledSet *s : eval.attacks) {
        report.attack_accuracy[s->name] = accuracy(cfg, store, adapters, s->images, s->labels);
    }
}

/// One pass over `n` samples in shuffled batches; `step_fn` returns the batch loss.
template <typename StepFn>
double run_epoch(std::size_t n, std::size_t batch_size, std::uint64_t seed, std::size_t epoch, StepFn step_fn) {
    const std::vector<std::size_t> order = shuffled(n, seed);
    double total = 0.0;
    for (std::size_t b = 0; b < n; b += batch_size) {
        const std::size_t e = std::min(n, b + batch_size);
        const std::span<const std::size_t> idx(order.data() + b, e - b);
        double loss = 0.0;
        try {
            loss = step_fn(idx);
        } catch (const NumericError &err) {
            throw DivergenceError("training diverged in epoch " + std::to_string(epoch) + ": " + err.what());
        }
        if (!std::isfinite(loss)) {
            throw DivergenceError("non-finite loss in epoch " + std::to_string(epoch));
        }
        total += loss * static_cast<double>(e - b);
    }
    return total / static_cast<double>(n);
}

} // namespace

Json TrainReport::to_json() const {
    Json j{{"phase", phase},
           {"seed", seed},
           {"epoch_loss", epoch_loss},
           {"trainable_params", trainable_params},
           {"optimizer_keys", optimizer_keys}};
    if (clean_accuracy >= 0.0) j["clean_accuracy"] = clean_accuracy;
    if (!attack_accuracy.empty()) j["attack_accuracy"] = attack_accuracy;
    return j;
}

Json LoraSpec::to_json() const {
    return Json{{"rank", rank}, {"alpha", alpha}, {"dropout", dropout}, {"targets", targets}};
}

LoraSpec LoraSpec::from_json(const Json &j) {
    LoraSpec s;
    s.rank = j.value("rank", s.rank);
    s.alpha = j.value("alpha", s.alpha);
    s.dropout = j.value("dropout", s.dropout);
    s.targets = j.value("targets", s.targets);
    target_preset(s.targets);
    if (s.rank == 0) throw ConfigError("LoRA rank must be positive");
    if (!(s.dropout >= 0.0f && s.dropout < 1.0f)) throw ConfigError("LoRA dropout must lie in [0, 1)");
    return s;
}

double accuracy(const VitConfig &cfg, const ParameterStore &store, std::span<const LoraAdapter *const> adapters,
                const Tensor &images, std::span<const int> labels, std::vector<int> *predictions) {
    check_set(images, labels, "accuracy");
    const std::vector<int> pred = predict(cfg, store, adapters, images);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
    if (predictions != nullptr) *predictions = pred;
    return 100.0 * static_cast<double>(correct) / static_cast<double>(pred.size());
}

TrainReport fine_tune_base(const VitConfig &cfg, ParameterStore &store, const LabeledSet &train,
                           const OptimSpec &spec, std::uint64_t seed, const EvalSets &eval) {
    spec.validate(true);
    check_set(train.images, train.labels, "fine_tune_base");
    const auto start = Clock::now();
    TrainReport report{"fine_tune_base", seed, {}, -1.0, {}, store.trainable_scalars(), {}, 0.0};
    AdamW opt(spec);
    for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
        const double lr = step_lr(epoch, spec);
        report.epoch_loss.push_back(
            run_epoch(train.labels.size(), spec.batch_size, derive_seed(seed, 1, epoch), epoch, [&](auto idx) {
                std::vector<int> y;
                for (std::size_t i : idx) y.push_back(train.labels[i]);
                Tape tape;
                BoundModel model(tape, cfg, store, {}, true);
                Var loss = ops::cross_entropy(model.logits(tape.constant(gather(train.images, idx))), y);
                std::vector<Var> wrt;
                std::vector<std::size_t> which;
                for (std::size_t p = 0; p < store.size(); ++p) {
                    if (!store[p].frozen) {
                        wrt.push_back(model.param_vars()[p]);
                        which.push_back(p);
                    }
                }
                const std::vector<Tensor> grads = tape.backward(loss, wrt);
                for (std::size_t i = 0; i < which.size(); ++i) {
                    opt.step(store[which[i]].name, store[which[i]].value, grads[i], lr);
                }
                return static_cast<double>(loss.value().item());
            }));
    }
    for (const auto &[k, _] : opt.state()) report.optimizer_keys.push_back(k);
    evaluate_into(report, cfg, store, {}, eval);
    report.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    return report;
}

TrainReport train_elytra(const VitConfig &cfg, const ParameterStore &base, std::span<const LoraAdapter> priors,
                         LoraAdapter &adapter, const AdvArchive &archive, const OptimSpec &spec, std::uint64_t seed,
                         const EvalSets &eval) {
    spec.validate(true);
    const std::string base_hash = base.content_hash();
    if (archive.base_hash != base_hash) {
        throw ProvenanceError("archive for " + std::string(attack_name(archive.spec.kind)) +
                              " was generated against base " + archive.base_hash.substr(0, 12) +
                              ", not the supplied base " + base_hash.substr(0, 12));
    }
    check_set(archive.images, archive.labels, "train_elytra");
    adapter.validate_against(base);
    const auto start = Clock::now();
    const ParameterStore frozen = merge_sequential(base, priors);
    TrainReport report{"train_elytra", seed, {}, -1.0, {}, adapter.trainable_count(), {}, 0.0};
    AdamW opt(spec);
    Rng dropout_rng(derive_seed(seed, 3));
    for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
        const double lr = step_lr(epoch, spec);
        report.epoch_loss.push_back(
            run_epoch(archive.size(), spec.batch_size, derive_seed(seed, 2, epoch), epoch, [&](auto idx) {
                std::vector<int> y;
                for (std::size_t i : idx) y.push_back(archive.labels[i]);
                Tape tape;
                const AdapterUse use{&adapter, true, true};
                BoundModel model(tape, cfg, frozen, std::span(&use, 1), false, &dropout_rng);
                Var loss = ops::cross_entropy(model.logits(tape.constant(gather(archive.images, idx))), y);
                std::vector<Var> wrt;
                for (const auto &[u, v] : model.adapter_vars(0)) {
                    wrt.push_back(u);
                    wrt.push_back(v);
                }
                const std::vector<Tensor> grads = tape.backward(loss, wrt);
                for (std::size_t f = 0; f < adapter.factors.size(); ++f) {
                    auto &factor = adapter.factors[f];
                    opt.step(factor.target + "/U", factor.u, grads[2 * f], lr);
                    opt.step(factor.target + "/V", factor.v, grads[2 * f + 1], lr);
                }
                return static_cast<double>(loss.value().item());
            }));
    }
    for (const auto &[k, _] : opt.state()) report.optimizer_keys.push_back(k);
    const LoraAdapter *applied[] = {&adapter};
    evaluate_into(report, cfg, frozen, applied, eval);
    report.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    return report;
}

namespace {

std::vector<LoraAdapter> train_jobs(const VitConfig &cfg, const ParameterStore &base, std::span<const ElytraJob> jobs,
                                    const LoraSpec &lora, const OptimSpec &spec, bool sequential,
                                    std::vector<TrainReport> *reports) {
    const std::set<Role> roles = target_preset(lora.targets);
    std::vector<LoraAdapter> out;
    for (const ElytraJob &job : jobs) {
        if (job.archive == nullptr) throw MissingArtifactError("Elytra job '" + job.provenance + "' has no archive");
        LoraAdapter adapter =
            init_adapter(base, roles, lora.rank, lora.alpha, lora.dropout, job.seed, job.provenance);
        const std::span<const LoraAdapter> priors =
            sequential ? std::span<const LoraAdapter>(out) : std::span<const LoraAdapter>();
        TrainReport r = train_elytra(cfg, base, priors, adapter, *job.archive, spec, job.seed);
        r.phase = sequential ? "train_sequential" : "train_parallel";
        if (reports != nullptr) reports->push_back(std::move(r));
        out.push_back(std::move(adapter));
    }
    return out;
}

} // namespace

std::vector<LoraAdapter> train_parallel(const VitConfig &cfg, const ParameterStore &base,
                                        std::span<const ElytraJob> jobs, const LoraSpec &lora, const OptimSpec &spec,
                                        std::vector<TrainReport> *reports) {
    return train_jobs(cfg, base, jobs, lora, spec, false, reports);
}

std::vector<LoraAdapter> train_sequential(const VitConfig &cfg, const ParameterStore &base,
                                          std::span<const ElytraJob> jobs, const LoraSpec &lora,
                                          const OptimSpec &spec, std::vector<TrainReport> *reports) {
    return train_jobs(cfg, base, jobs, lora, spec, true, reports);
}

void apply_freeze_depth(const VitConfig &cfg, ParameterStore &store, std::size_t k) {
    if (k > cfg.depth) {
        throw ConfigError("freeze depth " + std::to_string(k) + " exceeds model depth " + std::to_string(cfg.depth));
    }
    const int first_open = static_cast<int>(cfg.depth - k);
    for (auto &p : store) {
        if (k == cfg.depth) {
            p.frozen = false;
        } else if (p.block >= 0) {
            p.frozen = p.block < first_open;
        } else {
            p.frozen = !(p.role == Role::head || p.name.starts_with("norm."));
        }
    }
}

TrainReport adversarial_fine_tune(const VitConfig &cfg, ParameterStore &store, std::size_t k,
                                  const LabeledSet &train, const OptimSpec &spec, std::uint64_t seed,
                                  const EvalSets &eval) {
    apply_freeze_depth(cfg, store, k);
    TrainReport r = fine_tune_base(cfg, store, train, spec, seed, eval);
    r.phase = "adversarial_fine_tune";
    return r;
}

} // namespace elytra
