#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>
#include <sstream>

#include "hye/cli.hpp"

namespace {

std::string key_table() {
    std::ostringstream os;
    os << "\nConfiguration keys (YAML, unknown keys are rejected):\n";
    for (const auto& k : hye::config_keys()) {
        os << "  " << k.key;
        if (*k.default_value) os << " [" << k.default_value << "]";
        os << "\n      " << k.meaning << "\n";
    }
    os << "\nExit codes: 0 ok, 1 unexpected error, 2 configuration or usage, 3 data, 4 training or numeric, 5 I/O\n";
    return os.str();
}

int exit_code(const std::exception& e) {
    if (dynamic_cast<const hye::ConfigError*>(&e) || dynamic_cast<const hye::UsageError*>(&e)) return 2;
    if (dynamic_cast<const hye::DataError*>(&e) || dynamic_cast<const hye::DimensionError*>(&e)) return 3;
    if (dynamic_cast<const hye::TrainingError*>(&e) || dynamic_cast<const hye::NumericError*>(&e)) return 4;
    if (dynamic_cast<const hye::IoError*>(&e)) return 5;
    return 1;
}

} // namespace

int main(int argc, char** argv) {
    if (const char* level = std::getenv("HYE_LOG")) spdlog::set_level(spdlog::level::from_str(level));

    CLI::App app{"Synthetic SAR generation from geospatial embeddings"};
    app.require_subcommand(1);
    app.footer(key_table());

    std::string config_path, out_dir = "out", data, checkpoint, resume, real, gen, cond;
    std::uint64_t seed = 0;
    bool seed_set = false;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "YAML run configuration")->required()->check(CLI::ExistingFile);
        cmd->add_option_function<std::uint64_t>("--seed", [&](std::uint64_t s) { seed = s, seed_set = true; },
                                                "override the configured seed");
        cmd->add_option("--out", out_dir, "output directory")->capture_default_str();
    };
    auto* simulate = app.add_subcommand("simulate", "render synthetic scenes into tiles");
    auto* tile = app.add_subcommand("tile", "cut co-registered .npy rasters into tiles");
    auto* train = app.add_subcommand("train", "train the denoiser on a tile directory");
    auto* sample = app.add_subcommand("sample", "generate SAR tiles from a checkpoint");
    auto* eval = app.add_subcommand("eval", "compare generated tiles with real ones");
    for (auto* cmd : {simulate, tile, train, sample, eval}) add_common(cmd);
    train->add_option("--data", data, "tile directory (overrides paths.data)");
    train->add_option("--resume", resume, "checkpoint to continue from (overrides paths.resume)");
    sample->add_option("--checkpoint", checkpoint, "model checkpoint (overrides paths.checkpoint)");
    sample->add_option("--cond", cond, "condition tiles or embeddings (overrides sampling.condition.path)");
    eval->add_option("--real", real, "reference tiles (overrides paths.real)");
    eval->add_option("--gen", gen, "generated tiles (overrides paths.generated)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        auto cfg = hye::load_run_config(config_path);
        if (seed_set) cfg.seed = cfg.training.seed = seed;
        if (!data.empty()) cfg.paths.data = data;
        if (!resume.empty()) cfg.paths.resume = resume;
        if (!checkpoint.empty()) cfg.paths.checkpoint = checkpoint;
        if (!cond.empty()) cfg.sampling.condition_path = cond;
        if (!real.empty()) cfg.paths.real = real;
        if (!gen.empty()) cfg.paths.generated = gen;

        if (*simulate) hye::cmd_simulate(cfg, out_dir);
        else if (*tile) hye::cmd_tile(cfg, out_dir);
        else if (*train) hye::cmd_train(cfg, out_dir);
        else if (*sample) hye::cmd_sample(cfg, out_dir);
        else if (*eval) std::cout << hye::cmd_eval(cfg, out_dir).to_table();
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return exit_code(e);
    }
    return 0;
}
