#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "pulseforge/commands.hpp"

using namespace pulseforge;
namespace fs = std::filesystem;
using cli::json;

namespace {

class Commands : public ::testing::Test {
protected:
    void SetUp() override
    {
        root_ = fs::temp_directory_path() /
                ("pulseforge_cmd_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(root_);
        fs::create_directories(root_);
    }
    void TearDown() override { fs::remove_all(root_); }

    fs::path dir(const std::string& name) const { return root_ / name; }

    // 2 identities x 3 clips of 10 s
    fs::path small_dataset(const std::string& name = "ds", std::uint64_t seed = 3, unsigned jobs = 1)
    {
        const json cfg{{"seed", seed},
                       {"jobs", jobs},
                       {"out", dir(name).string()},
                       {"scene", {{"identities", 2}, {"clips_per_identity", 3}, {"clip_velocities", {0, 10, 30}}}}};
        cli::cmd_synth(cfg, {}, log_);
        return dir(name);
    }

    int run(const std::string& command, const json& cfg, const cli::Overrides& o = {})
    {
        const auto path = root_ / (command + "_config.json");
        io::atomic_write(path, cfg.dump());
        return cli::run_command(command, path.string(), o, log_);
    }

    fs::path root_;
    std::ostringstream console_;
    cli::Logger log_{cli::LogLevel::info, &console_};
};

std::size_t count_with_extension(const fs::path& d, const std::string& ext)
{
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(d))
        n += e.path().extension() == ext;
    return n;
}

std::size_t data_lines(const fs::path& csv)
{
    std::ifstream in(csv);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line))
        if (!line.empty() && line[0] != '#')
            ++n;
    return n - 1; // header
}

std::string slurp(const fs::path& p) { return io::read_file(p); }

} // namespace

TEST_F(Commands, SynthWritesClipsAndManifest)
{
    const auto ds = small_dataset();
    EXPECT_EQ(count_with_extension(ds / "clips", ".vten"), 6u);
    EXPECT_EQ(count_with_extension(ds / "clips", ".json"), 6u);
    EXPECT_EQ(data_lines(ds / "manifest.csv"), 6u);
    const auto rows = cli::read_manifest(ds / "manifest.csv");
    ASSERT_EQ(rows.size(), 6u);
    EXPECT_EQ(rows[4].clip, "id001_clip01");
    EXPECT_EQ(rows[4].velocity, 10.0);
    const auto v = io::read_video(ds / rows[0].video);
    EXPECT_EQ(v.frames, 300u);
    EXPECT_EQ(v.width, 36u);
    const auto side = json::parse(slurp(ds / rows[0].sidecar));
    EXPECT_EQ(side.at("truth"), rows[0].truth);
    EXPECT_EQ(side.at("scene").at("identities"), 2);
    EXPECT_EQ(side.at("roi_shift").size(), 300u);
    EXPECT_EQ(load_ppg_csv(ds / rows[0].truth).size(), 300u);
}

TEST_F(Commands, SynthIsByteIdenticalOnRerun)
{
    const auto a = small_dataset("a", 9, 1);
    const auto b = small_dataset("b", 9, 2);
    EXPECT_EQ(slurp(a / "manifest.csv"), slurp(b / "manifest.csv"));
    EXPECT_EQ(slurp(a / "run.json"), slurp(b / "run.json"));
    for (const auto& r : cli::read_manifest(a / "manifest.csv")) {
        EXPECT_EQ(slurp(a / r.video), slurp(b / r.video)) << r.clip;
        EXPECT_EQ(slurp(a / r.sidecar), slurp(b / r.sidecar)) << r.clip;
        EXPECT_EQ(slurp(a / r.truth), slurp(b / r.truth)) << r.clip;
    }
    const auto c = small_dataset("c", 10);
    EXPECT_NE(slurp(a / "manifest.csv"), slurp(c / "manifest.csv"));
}

TEST_F(Commands, RecoverOneEstimatePerClip)
{
    const auto ds = small_dataset();
    const json cfg{{"dataset", ds.string()}, {"out", dir("rec").string()}};
    EXPECT_EQ(run("recover", cfg, {.method = "chrom"}), 0);
    EXPECT_EQ(count_with_extension(dir("rec") / "estimates", ".csv"), 6u);
    EXPECT_EQ(count_with_extension(dir("rec") / "roi", ".csv"), 6u);
    EXPECT_EQ(data_lines(dir("rec") / "hr.csv"), 6u);
    const auto e = recovery::load_bvp_csv(dir("rec") / "estimates" / "id000_clip00.csv");
    EXPECT_EQ(e.method, "chrom");
    EXPECT_TRUE(slurp(dir("rec") / "spectra" / "id000_clip00.csv").starts_with("freq_hz,power\n"));
    EXPECT_TRUE(slurp(dir("rec") / "roi" / "id000_clip00.csv").starts_with("t_s,r,g,b\n"));
}

TEST_F(Commands, RecoverNamesMissingAndCorruptClips)
{
    const auto ds = small_dataset();
    fs::remove(ds / "clips" / "id001_clip02.vten");
    const json cfg{{"dataset", ds.string()}, {"out", dir("rec").string()}, {"method", "pos"}};
    try {
        cli::cmd_recover(cfg, {}, log_);
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("id001_clip02"), std::string::npos);
    }
    EXPECT_EQ(run("recover", cfg), 3);

    const auto ds2 = small_dataset("ds2");
    io::atomic_write(ds2 / "clips" / "id000_clip01.vten", "XXXXnot a tensor");
    const json cfg2{{"dataset", ds2.string()}, {"out", dir("rec2").string()}};
    try {
        cli::cmd_recover(cfg2, {}, log_);
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("id000_clip01.vten"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
    }
}

TEST_F(Commands, EvalOfPerfectEstimatesHasZeroError)
{
    const auto ds = small_dataset();
    const auto est_dir = dir("truth_estimates");
    for (const auto& r : cli::read_manifest(ds / "manifest.csv")) {
        const auto truth = load_ppg_csv(ds / r.truth);
        recovery::BvpEstimate e{truth.samples, 30.0, "truth", true};
        io::atomic_write(est_dir / (r.clip + ".csv"), recovery::bvp_csv(e));
    }
    const json cfg{{"dataset", ds.string()}, {"estimates", est_dir.string()}, {"out", dir("ev").string()}};
    const auto rows = cli::cmd_eval(cfg, {}, log_);
    ASSERT_FALSE(rows.empty());
    EXPECT_EQ(rows.front().mae, 0.0);
    EXPECT_EQ(rows.front().rmse, 0.0);
    EXPECT_EQ(rows.front().n_clips, 6u);
    EXPECT_EQ(rows.front().method, "truth");
    const auto csv = slurp(dir("ev") / "metrics.csv");
    EXPECT_NE(csv.find("\ntruth,NA,NA,NA,6,0,0,"), std::string::npos);
    EXPECT_EQ(data_lines(dir("ev") / "clip_scores.csv"), 6u);

    fs::remove(est_dir / "id001_clip00.csv");
    EXPECT_THROW(cli::cmd_eval(cfg, {}, log_), ParseError);
}

TEST_F(Commands, TrainWithZeroLearningRateIsFlat)
{
    json scene{{"identities", 3}, {"clips_per_identity", 1}};
    cli::cmd_synth(json{{"out", dir("ds").string()}, {"scene", scene}}, {}, log_);
    const json cfg{{"dataset", dir("ds").string()},
                   {"out", dir("tr").string()},
                   {"split", {1, 1, 1}},
                   {"training", {{"epochs", 3}, {"learning_rate", 0.0}, {"eval_pairs", 50}}}};
    const auto rep = cli::cmd_train(cfg, {.seed = 5}, log_);
    ASSERT_EQ(rep.val_mse.size(), 3u);
    for (std::size_t e = 0; e < 3; ++e) {
        EXPECT_EQ(rep.train_mse[e], rep.initial_train_mse);
        EXPECT_EQ(rep.val_mse[e], rep.initial_val_mse);
    }
    EXPECT_EQ(rep.seed, 5u);
    const auto m = neural::load_checkpoint(dir("tr") / "model.canw");
    EXPECT_EQ(m.weights, neural::CanModel<float>::init(neural::CanConfig::desk(), 5).weights);
    const auto j = json::parse(slurp(dir("tr") / "train_report.json"));
    EXPECT_EQ(j.at("val_mse").size(), 3u);
    const auto split = json::parse(slurp(dir("tr") / "split.json"));
    EXPECT_EQ(split.at("test").size(), 1u);
}

TEST_F(Commands, SweepTwelveRowsAndDeterministic)
{
    const json cfg{{"methods", {"pos", "chrom", "ica"}},
                   {"velocities", {0, 10, 20, 30}},
                   {"clips", 2},
                   {"scene", {{"clip_seconds", 20}}}};
    EXPECT_EQ(run("sweep", cfg, {.seed = 2, .out = dir("a").string()}), 0);
    EXPECT_EQ(run("sweep", cfg, {.seed = 2, .out = dir("b").string(), .jobs = 2}), 0);
    EXPECT_EQ(data_lines(dir("a") / "metrics.csv"), 12u);
    EXPECT_EQ(slurp(dir("a") / "metrics.csv"), slurp(dir("b") / "metrics.csv"));
    EXPECT_EQ(slurp(dir("a") / "metrics.json"), slurp(dir("b") / "metrics.json"));
    EXPECT_EQ(slurp(dir("a") / "run.json"), slurp(dir("b") / "run.json"));
    const auto j = json::parse(slurp(dir("a") / "metrics.json"));
    EXPECT_TRUE(j["chrom"]["20"]["I"].contains("2"));
}

TEST_F(Commands, FlagsOverrideConfig)
{
    const json cfg{{"methods", {"pos"}}, {"velocities", {0}}, {"clips", 2}, {"seed", 1},
                   {"out", dir("from_config").string()}, {"scene", {{"clip_seconds", 20}}}};
    EXPECT_EQ(run("sweep", cfg, {.seed = 7, .out = dir("from_flag").string(), .method = "ica"}), 0);
    EXPECT_FALSE(fs::exists(dir("from_config")));
    const auto csv = slurp(dir("from_flag") / "metrics.csv");
    EXPECT_NE(csv.find("\nica,0,I,7,2,"), std::string::npos);
}

TEST_F(Commands, ConfigErrorsExitWithTwo)
{
    EXPECT_EQ(run("synth", json{{"scene", {{"identities", 1}}}, {"colour", 1}}, {.out = dir("x").string()}), 2);
    EXPECT_NE(console_.str().find("unknown key 'colour'"), std::string::npos);
    EXPECT_EQ(run("sweep", json{{"methods", {"pca"}}}, {.out = dir("y").string()}), 2);
    EXPECT_NE(console_.str().find("valid: pos, chrom, ica, can"), std::string::npos);
    EXPECT_EQ(run("recover", json::object(), {.out = dir("z").string()}), 2);
    EXPECT_EQ(cli::run_command("sweep", (root_ / "absent.json").string(), {}, log_), 2);
    EXPECT_EQ(cli::run_command("plot", std::nullopt, {.out = dir("w").string()}, log_), 2);
}

TEST_F(Commands, LogFileHasTimestampsConsoleDoesNot)
{
    const json cfg{{"out", dir("ds").string()}, {"scene", {{"identities", 1}, {"clips_per_identity", 1}}}};
    EXPECT_EQ(run("synth", cfg), 0);
    const auto file = slurp(dir("ds") / cli::kLogFile);
    EXPECT_NE(file.find("Z [info] synth:"), std::string::npos);
    EXPECT_TRUE(console_.str().starts_with("[info] synth:"));
    // the log stays out of the run record
    const auto run_json = json::parse(slurp(dir("ds") / "run.json"));
    for (const auto& f : run_json.at("outputs"))
        EXPECT_NE(f.get<std::string>(), cli::kLogFile);
}

TEST(LogLevel, ParsesEnvironmentValues)
{
    EXPECT_EQ(cli::parse_log_level(nullptr), cli::LogLevel::info);
    EXPECT_EQ(cli::parse_log_level("debug"), cli::LogLevel::debug);
    EXPECT_EQ(cli::parse_log_level("error"), cli::LogLevel::error);
    EXPECT_THROW(cli::parse_log_level("loud"), ConfigError);
    std::ostringstream s;
    cli::Logger quiet(cli::LogLevel::warn, &s);
    quiet.info("hidden");
    quiet.warn("shown");
    EXPECT_EQ(s.str(), "[warn] shown\n");
}
