#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "metakern/experiments.hpp"
#include "metakern/report_io.hpp"

namespace {

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<int> jobs;
    std::optional<std::string> format;
};

void add_common(CLI::App* sub, CommonFlags& flags) {
    sub->add_option("--config", flags.config, "flat key = value configuration file");
    sub->add_option("--seed", flags.seed, "base seed (overrides the config)");
    sub->add_option("--out", flags.out, "output directory");
    sub->add_option("--jobs", flags.jobs, "parallel jobs")->check(CLI::PositiveNumber);
    sub->add_option("--format", flags.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"metakern: infinite-width MTL and ANIL kernels, sweeps and cross-checks"};
    app.require_subcommand(1);
    CommonFlags flags;
    for (const auto& name : metakern::command_names()) add_common(app.add_subcommand(name, "run " + name), flags);
    CLI11_PARSE(app, argc, argv);

    try {
        const std::string command = app.get_subcommands().front()->get_name();
        metakern::SweepConfig cfg = flags.config.empty() ? metakern::SweepConfig{} : metakern::SweepConfig::load(flags.config);
        if (flags.seed) cfg.tasks.seed = *flags.seed;
        if (flags.out) cfg.out = *flags.out;
        if (flags.jobs) cfg.jobs = *flags.jobs;
        if (flags.format) cfg.format = metakern::parse_format(*flags.format);

        const metakern::CommandOutput result = metakern::run_command(command, cfg);
        std::filesystem::create_directories(cfg.out);
        const std::string path = (std::filesystem::path(cfg.out) / result.filename).string();
        metakern::write_text_file(path, result.content);
        std::cout << path << "\n";
    } catch (const std::exception& e) {
        std::cerr << "metakern: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
