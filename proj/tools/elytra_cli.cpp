#include <CLI11.hpp>

#include <cstdint>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "elytra/error.hpp"
#include "elytra/experiment.hpp"
#include "elytra/io.hpp"

using namespace elytra;

namespace {

int emit_error(const std::string &kind, const std::string &message, const std::string &command, int code) {
    std::cerr << Json{{"error", kind}, {"message", message}, {"command", command}, {"exit_code", code}}.dump()
              << std::endl;
    return code;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Elytra: LoRA security patches for a micro vision transformer"};
    app.require_subcommand(1, 1);

    std::string preset = "desk";
    std::string config_path;
    std::string out = "run";
    std::optional<std::uint64_t> seed;
    std::vector<std::string> only;
    const auto add_common = [&](CLI::App *sub) {
        sub->add_option("--preset", preset, "Named preset (desk, paper, smoke)")->capture_default_str();
        sub->add_option("--config", config_path, "JSON file merged over the preset");
        sub->add_option("--seed", seed, "Top-level seed; every stage seed derives from it");
        sub->add_option("--out", out, "Run directory")->capture_default_str();
    };

    const std::map<std::string, std::pair<std::string, std::function<void(Pipeline &)>>> commands{
        {"gen-data", {"Render the synthetic sign dataset and its splits", [](Pipeline &p) { p.gen_data(); }}},
        {"train-base", {"Train the base micro-ViT on the clean train split", [](Pipeline &p) { p.train_base(); }}},
        {"train-patch", {"Optimize the adversarial patches against the base", [](Pipeline &p) { p.train_patches(); }}},
        {"gen-attacks",
         {"Write adversarial archives for every attack and split", [&only](Pipeline &p) { p.gen_attacks(only); }}},
        {"compose", {"Train single Elytras and the sequential rollouts", [](Pipeline &p) { p.compose(); }}},
        {"evaluate", {"Evaluate every model variant on every column", [](Pipeline &p) { p.evaluate(); }}},
        {"report", {"Emit the matrix and the parameter-accounting table", [](Pipeline &p) { p.report(); }}},
        {"rank-sweep", {"Train one Elytra per rank of the sweep", [](Pipeline &p) { p.rank_sweep(); }}},
        {"freeze-sweep", {"Adversarially fine-tune per freeze depth", [](Pipeline &p) { p.freeze_sweep(); }}},
        {"run", {"gen-data through report in one go", [](Pipeline &p) { p.run_all(); }}},
        {"show-config", {"Print the resolved config", [](Pipeline &p) { std::cout << p.config().to_json().dump(2) << "\n"; }}},
    };
    for (const auto &[name, entry] : commands) {
        CLI::App *sub = app.add_subcommand(name, entry.first);
        add_common(sub);
        if (name == "gen-attacks") sub->add_option("--attack", only, "Restrict to the named attacks (repeatable)");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        return emit_error("usage", e.what(), "", 2);
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        Json overrides = Json::object();
        if (!config_path.empty()) {
            if (!std::filesystem::exists(config_path)) throw ConfigError("config file " + config_path + " not found");
            overrides = read_json(config_path);
        }
        Pipeline pipeline(resolve_config(preset, overrides, seed), out);
        commands.at(command).second(pipeline);
    } catch (const MissingArtifactError &e) {
        return emit_error(e.kind(), e.what(), command, 3);
    } catch (const ProvenanceError &e) {
        return emit_error(e.kind(), e.what(), command, 4);
    } catch (const Error &e) {
        return emit_error(e.kind(), e.what(), command, 1);
    } catch (const std::exception &e) {
        return emit_error("internal", e.what(), command, 1);
    }
    return 0;
}
