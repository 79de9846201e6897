// pulseforge: synthesize iPPG clips, recover pulses, train CAN models and
// run evaluation sweeps.

#include <cstdlib>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "pulseforge/commands.hpp"

int main(int argc, char** argv)
{
    using namespace pulseforge;
    CLI::App app{"pulseforge: synthetic iPPG workbench"};
    app.require_subcommand(1, 1);

    std::optional<std::string> config_path, out, method;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> jobs;

    const std::map<std::string, std::string> about{
        {"synth", "render a synthetic clip dataset with manifest"},
        {"recover", "recover BVP estimates for every clip of a dataset"},
        {"train", "train a CAN model on a dataset"},
        {"eval", "score an estimate directory against a dataset manifest"},
        {"sweep", "run a method x velocity x skin type x seed sweep"}};
    for (const auto& name : cli::command_names()) {
        auto* sub = app.add_subcommand(name, about.at(name));
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--seed", seed, "base seed (overrides config)");
        sub->add_option("--out", out, "output directory (overrides config)");
        sub->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
        if (name != "synth" && name != "train")
            sub->add_option("--method", method, "recovery method: pos, chrom, ica, can");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    cli::LogLevel level;
    try {
        level = cli::parse_log_level(std::getenv("PULSEFORGE_LOG"));
    } catch (const Error& e) {
        std::cerr << "[error] " << e.what() << '\n';
        return 2;
    }
    cli::Logger log(level);
    const auto* sub = app.get_subcommands().front();
    return cli::run_command(sub->get_name(), config_path, cli::Overrides{seed, out, jobs, method}, log);
}
