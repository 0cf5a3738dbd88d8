#include "memguard/archive.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#ifndef MEMGUARD_CLI
#error "MEMGUARD_CLI must name the memguard executable"
#endif

using namespace memguard;

namespace {

const std::string& dir() {
    static const std::string d = [] {
        auto p = std::filesystem::temp_directory_path() / ("memguard_cli_" + std::to_string(::getpid()));
        std::filesystem::remove_all(p);
        std::filesystem::create_directories(p);
        return p.string();
    }();
    return d;
}

int run(const std::string& args) {
    const std::string cmd = std::string(MEMGUARD_CLI) + " " + args + " > " + dir() + "/last.log 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string config_path() {
    const std::string p = dir() + "/config.json";
    if (!std::filesystem::exists(p)) {
        nlohmann::json c{
            {"schema_version", 1},
            {"model", {{"train", {{"epochs", 1}, {"batch_size", 16}}}}},
            {"dataset",
             {{"base_size", 16}, {"verbatim_prompts", 2}, {"duplication", 4}, {"template_groups", 1},
              {"template_variants", 3}}},
            {"guidance", {{"steps", 3}}},
            {"sweep",
             {{"settings", {"verbatim"}}, {"methods", {"none", "ca"}}, {"taus", {1.0}}, {"alphas", {0.5}},
              {"steps", {2}}, {"prompts_per_setting", 2}, {"filter_memorized", false}}},
            {"selection", {{"reference_align", 1.1}, {"degradation_budget", 0.01}}}};
        write_text_file(p, c.dump(2));
    }
    return p;
}

const std::string& trained() {
    static const std::string out = [] {
        const std::string o = dir() + "/train";
        EXPECT_EQ(run("train --config " + config_path() + " --seed 3 --out " + o), 0) << read_text_file(dir() + "/last.log");
        return o;
    }();
    return out;
}

}  // namespace

TEST(Cli, TrainThenGenerateIsDeterministic) {
    const std::string ck = trained() + "/checkpoint.h5";
    ASSERT_TRUE(std::filesystem::exists(ck));
    EXPECT_TRUE(std::filesystem::exists(trained() + "/training_curve.csv"));
    EXPECT_TRUE(std::filesystem::exists(trained() + "/dataset.json"));
    const std::string gen = "generate --config " + config_path() + " --checkpoint " + ck + " --prompt 'red square alpha' --seed 4";
    ASSERT_EQ(run(gen + " --out " + dir() + "/g1"), 0) << read_text_file(dir() + "/last.log");
    ASSERT_EQ(run(gen + " --out " + dir() + "/g2"), 0);
    EXPECT_EQ(read_text_file(dir() + "/g1/image.ppm"), read_text_file(dir() + "/g2/image.ppm"));
    const auto rep = nlohmann::json::parse(read_text_file(dir() + "/g1/report.json"));
    EXPECT_EQ(rep.at("steps").size(), 3u);
    EXPECT_TRUE(rep.contains("metrics"));
}

TEST(Cli, GenerateTraceThenAnalyze) {
    const std::string ck = trained() + "/checkpoint.h5";
    ASSERT_EQ(run("generate --config " + config_path() + " --checkpoint " + ck +
                  " --prompt 'red square alpha' --method guard --tau 1 --alpha 0.5 --trace --out " + dir() + "/g3"),
              0)
        << read_text_file(dir() + "/last.log");
    ASSERT_EQ(run("analyze --trace " + dir() + "/g3/trace.h5 --out " + dir() + "/a"), 0) << read_text_file(dir() + "/last.log");
    const auto csv = read_text_file(dir() + "/a/mass.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);  // header + 3 steps
    for (const char* f : {"token_mass.svg", "block_mass.svg", "token_distribution.svg"})
        EXPECT_TRUE(std::filesystem::exists(dir() + "/a/" + f)) << f;
}

TEST(Cli, SweepSelectReport) {
    const std::string ck = trained() + "/checkpoint.h5";
    const std::string out = dir() + "/sweep";
    ASSERT_EQ(run("sweep --config " + config_path() + " --checkpoint " + ck + " --out " + out), 0)
        << read_text_file(dir() + "/last.log");
    const auto count = [&] {
        int n = 0;
        for (const auto& e : std::filesystem::directory_iterator(out + "/records")) n += e.path().extension() == ".json";
        return n;
    };
    EXPECT_EQ(count(), 2);
    ASSERT_EQ(run("sweep --config " + config_path() + " --checkpoint " + ck + " --out " + out), 0);
    EXPECT_EQ(count(), 2);
    // reference 1.1 with a 1% budget puts the floor above every possible alignment
    EXPECT_EQ(run("select --config " + config_path() + " --records " + out + "/records --setting verbatim --out " + out), 3);
    const auto sel = nlohmann::json::parse(read_text_file(out + "/selection_verbatim_best-sim.json"));
    EXPECT_TRUE(sel.at("chosen").is_null());
    EXPECT_EQ(sel.at("message").get<std::string>().rfind("no feasible config", 0), 0u);
    ASSERT_EQ(run("report --records " + out + "/records --out " + out + "/report"), 0);
    const auto first = read_text_file(out + "/report/records.csv");
    ASSERT_EQ(run("report --records " + out + "/records --out " + out + "/report"), 0);
    EXPECT_EQ(read_text_file(out + "/report/records.csv"), first);
    EXPECT_TRUE(std::filesystem::exists(out + "/report/frontier_verbatim.svg"));
}

TEST(Cli, InvalidConfigExitsNonZero) {
    write_text_file(dir() + "/bad.json", R"({"schema_version": 1, "guidance": {"r": -1}})");
    EXPECT_EQ(run("train --config " + dir() + "/bad.json --out " + dir() + "/bad"), 2);
    EXPECT_NE(read_text_file(dir() + "/last.log").find("repulsion"), std::string::npos);
    EXPECT_NE(run("generate --checkpoint " + dir() + "/missing.h5 --prompt red"), 0);
    EXPECT_NE(run("frobnicate"), 0);
}
