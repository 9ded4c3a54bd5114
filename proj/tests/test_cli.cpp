#include "catmerge/catmerge.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

using namespace catmerge;
namespace fs = std::filesystem;

namespace {

fs::path fresh_workdir() { return fs::temp_directory_path() / ("catmerge_cli_" + std::to_string(::getpid())); }

const fs::path& workdir() {
    static const fs::path dir = [] {
        auto d = fresh_workdir();
        fs::remove_all(d);
        fs::create_directories(d);
        std::atexit([] { fs::remove_all(fresh_workdir()); });
        return d;
    }();
    return dir;
}

struct Run {
    int code = -1;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

Run run(const std::string& args) {
    const auto out = workdir() / "stdout.txt", err = workdir() / "stderr.txt";
    const std::string cmd = std::string(CATMERGE_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::string path(const std::string& rel) { return (workdir() / rel).string(); }

const std::string kSmall =
    " --classes 3 --input-dim 24 --hidden-dim 16 --train-samples 64 --eval-samples 32"
    " --pretrain-steps 20 --finetune-steps 20 --batch-size 16";

nlohmann::json read_json(const std::string& p) { return nlohmann::json::parse(slurp(p)); }

/// Generated once and shared; tests only read from it.
const std::string& suite_dir() {
    static const std::string dir = [] {
        const auto r = run("gen --seed 7 --tasks 4 --out " + path("suite") + kSmall);
        if (r.code != 0) throw std::runtime_error("gen failed: " + r.err);
        return path("suite");
    }();
    return dir;
}

}  // namespace

TEST(CliGen, WritesSuiteFilesAndManifest) {
    const fs::path dir = suite_dir();
    std::size_t containers = 0;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".mtc") ++containers;
    EXPECT_EQ(containers, 1u + 4u);
    EXPECT_TRUE(fs::exists(dir / "suite.json"));
    const auto m = read_json((dir / "manifest.json").string());
    EXPECT_EQ(m["command"], "gen");
    EXPECT_EQ(m["version"], kVersion);
    EXPECT_EQ(m["config"]["seed"], 7);
    EXPECT_EQ(m["config"]["tasks"], 4);
    EXPECT_EQ(m["outputs"].size(), 1u + 4u * 4u + 1u);
    for (const auto& o : m["outputs"]) EXPECT_EQ(o["digest"].get<std::string>().size(), 16u);
}

TEST(CliGen, SameFlagsGiveIdenticalDigests) {
    ASSERT_EQ(run("gen --seed 7 --tasks 4 --out " + path("suite_again") + kSmall).code, 0);
    const auto a = read_json(suite_dir() + "/manifest.json"), b = read_json(path("suite_again") + "/manifest.json");
    ASSERT_EQ(a["outputs"].size(), b["outputs"].size());
    for (std::size_t i = 0; i < a["outputs"].size(); ++i) EXPECT_EQ(a["outputs"][i]["digest"], b["outputs"][i]["digest"]);
    EXPECT_EQ(a["config"], b["config"]);
}

TEST(CliGen, UsageErrors) {
    EXPECT_EQ(run("gen --seed 1").code, 2);                        // missing --out
    EXPECT_EQ(run("gen --out " + path("noseed")).code, 2);         // randomness without a seed
    EXPECT_FALSE(fs::exists(path("noseed")));
    const auto r = run("gen --seed 1 --tasks 4 --input-dim 8 --out " + path("tiny"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("input_dim"), std::string::npos);
    EXPECT_EQ(run("").code, 2);
    EXPECT_EQ(run("frobnicate").code, 2);
}

TEST(CliGen, ConfigFileWithFlagOverride) {
    {
        std::ofstream f(path("gen.json"));
        f << R"({"seed": 3, "tasks": 2, "classes": 3, "input_dim": 24, "hidden_dim": 8, "train_samples": 32,
                 "eval_samples": 16, "pretrain_steps": 5, "finetune_steps": 5, "batch_size": 8})";
    }
    ASSERT_EQ(run("gen --config " + path("gen.json") + " --tasks 3 --out " + path("from_cfg")).code, 0);
    const auto m = read_json(path("from_cfg") + "/manifest.json");
    EXPECT_EQ(m["config"]["seed"], 3);
    EXPECT_EQ(m["config"]["tasks"], 3);
    EXPECT_EQ(m["config"]["hidden_dim"], 8);
}

TEST(CliMerge, CatWithZeroBudgetMatchesTaskArithmeticBytes) {
    ASSERT_EQ(run("merge --method cat --c 0 --suite " + suite_dir() + " --out " + path("cat0.mtc")).code, 0);
    ASSERT_EQ(run("merge --method ta --suite " + suite_dir() + " --out " + path("ta.mtc")).code, 0);
    EXPECT_EQ(slurp(path("cat0.mtc")), slurp(path("ta.mtc")));
}

TEST(CliMerge, CatWritesReportAndManifest) {
    const auto r = run("merge --suite " + suite_dir() + " --out " + path("cat.mtc"));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rep = read_json(path("cat.mtc.report.json"));
    EXPECT_EQ(rep["method"], "cat");
    EXPECT_EQ(rep["c"], 2);
    EXPECT_EQ(rep["lambda"], 0.5);
    EXPECT_EQ(rep["alpha"], 1.0);
    EXPECT_EQ(rep["exemplars_per_task"], 3);
    EXPECT_FALSE(rep["operators"].empty());
    const auto m = read_json(path("cat.mtc.manifest.json"));
    EXPECT_EQ(m["command"], "merge");
    EXPECT_EQ(m["outputs"].size(), 2u);
    EXPECT_EQ(read_container(path("cat.mtc")).meta().at("role"), "merged");
}

TEST(CliMerge, IgnoredFlagWarnsAndConfigPrecedence) {
    const auto r = run("merge --method ta --lambda 0.3 --suite " + suite_dir() + " --out " + path("ta_warn.mtc"));
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.err.find("--lambda has no effect"), std::string::npos);
    EXPECT_EQ(slurp(path("ta_warn.mtc")), slurp(path("ta.mtc")));

    {
        std::ofstream f(path("merge.json"));
        f << R"({"method": "cat", "lambda": 0.25, "c": 1})";
    }
    ASSERT_EQ(run("merge --config " + path("merge.json") + " --c 3 --suite " + suite_dir() + " --out " + path("cfg.mtc")).code, 0);
    const auto rep = read_json(path("cfg.mtc.report.json"));
    EXPECT_EQ(rep["lambda"], 0.25);
    EXPECT_EQ(rep["c"], 3);
}

TEST(CliMerge, AverageOfOneModelIsThatModel) {
    ASSERT_EQ(run("gen --seed 2 --tasks 1 --out " + path("one") + kSmall).code, 0);
    ASSERT_EQ(run("merge --method average --suite " + path("one") + " --out " + path("avg1.mtc")).code, 0);
    EXPECT_EQ(read_container(path("avg1.mtc")).entries(), widened(read_container(path("one") + "/finetuned_0.mtc")).entries());
}

TEST(CliMerge, OtherMethodsRunAndBadInputsFail) {
    for (const std::string m : {"lsq", "ties-mag", "average"})
        EXPECT_EQ(run("merge --method " + m + " --suite " + suite_dir() + " --out " + path(m + ".mtc")).code, 0) << m;
    EXPECT_EQ(run("merge --method bogus --suite " + suite_dir() + " --out " + path("x.mtc")).code, 2);
    EXPECT_EQ(run("merge --lambda -1 --suite " + suite_dir() + " --out " + path("x.mtc")).code, 2);
    EXPECT_EQ(run("merge --suite " + path("missing_suite") + " --out " + path("x.mtc")).code, 1);
    EXPECT_FALSE(fs::exists(path("x.mtc")));
}

TEST(CliEval, MatchesLibraryAndAveragesTasks) {
    const auto r = run("eval --model " + suite_dir() + "/finetuned_1.mtc --suite " + suite_dir());
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = nlohmann::json::parse(r.out);
    ASSERT_EQ(j["tasks"].size(), 4u);
    double sum = 0.0;
    for (const auto& t : j["tasks"]) sum += t["accuracy"].get<double>();
    EXPECT_NEAR(j["avg_accuracy"].get<double>(), sum / 4.0, 1e-12);

    const auto suite = load_suite(suite_dir());
    const auto lib = evaluate(suite.spec, suite.tasks[1].finetuned, suite.tasks[1].eval, LossKind::CrossEntropy);
    EXPECT_EQ(j["tasks"][1]["accuracy"].get<double>(), lib.accuracy);
    EXPECT_EQ(j["tasks"][1]["loss"].get<double>(), lib.loss);

    ASSERT_EQ(run("eval --model " + path("ta.mtc") + " --suite " + suite_dir() + " --json " + path("ta_eval.json")).code, 0);
    EXPECT_TRUE(fs::exists(path("ta_eval.json.manifest.json")));
}

TEST(CliEval, UnreadableModelLeavesNoOutput) {
    const auto r = run("eval --model " + path("nope.mtc") + " --suite " + suite_dir() + " --json " + path("nope.json"));
    EXPECT_EQ(r.code, 1);
    EXPECT_FALSE(fs::exists(path("nope.json")));
    {
        std::ofstream f(path("garbage.mtc"));
        f << "not a container";
    }
    const auto g = run("eval --model " + path("garbage.mtc") + " --suite " + suite_dir() + " --json " + path("garbage.json"));
    EXPECT_EQ(g.code, 1);
    EXPECT_NE(g.err.find("malformed or unreadable container"), std::string::npos);
    EXPECT_FALSE(fs::exists(path("garbage.json")));
}

TEST(CliConflict, SingleCellGridIsZero) {
    ASSERT_EQ(run("conflict --suite " + suite_dir() + " --task-a 0 --task-b 1 --grid 1 --csv " + path("g1.csv")).code, 0);
    const auto g = grid_from_csv(slurp(path("g1.csv")));
    ASSERT_EQ(g.values.size(), 1u);
    EXPECT_EQ(g.values[0], 0.0);
}

TEST(CliConflict, CsvShapeManifestAndReport) {
    const auto r = run("conflict --suite " + suite_dir() + " --task-a 2 --task-b 0 --grid 4 --method cat --csv " + path("g4.csv") +
                       " --report " + path("g4.json"));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto text = slurp(path("g4.csv"));
    EXPECT_EQ(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')), 4u * 4u + 1u);
    const auto m = read_json(path("g4.csv.manifest.json"));
    EXPECT_EQ(m["config"]["method"], "cat");
    EXPECT_EQ(m["config"]["trim"]["c"], 2);
    const auto rep = read_json(path("g4.json"));
    EXPECT_EQ(rep["a_given_b"]["diagnostic"], true);
    EXPECT_TRUE(rep["b_given_a"].contains("bound_holds"));
}

TEST(CliConflict, UsageErrors) {
    EXPECT_EQ(run("conflict --suite " + suite_dir() + " --task-a 1 --task-b 1 --csv " + path("same.csv")).code, 2);
    EXPECT_EQ(run("conflict --suite " + suite_dir() + " --task-a 0 --task-b 9 --csv " + path("range.csv")).code, 2);
    EXPECT_EQ(run("conflict --suite " + suite_dir() + " --task-a 0 --task-b 1").code, 2);
    EXPECT_FALSE(fs::exists(path("same.csv")));
}

TEST(CliInspect, EmptyContainerAndKindBreakdown) {
    write_container(path("empty.mtc"), Checkpoint{});
    const auto e = run("inspect --file " + path("empty.mtc"));
    EXPECT_EQ(e.code, 0);
    EXPECT_NE(e.out.find("0 tensors"), std::string::npos);

    const auto j1 = run("inspect --json --file " + suite_dir() + "/pretrained.mtc");
    ASSERT_EQ(j1.code, 0);
    const auto j = nlohmann::json::parse(j1.out);
    std::size_t total = 0;
    for (const auto& [k, n] : j["kinds"].items()) total += n.get<std::size_t>();
    EXPECT_EQ(total, j["tensor_count"].get<std::size_t>());
    EXPECT_EQ(j["kinds"]["frozen"], 2);

    const auto j2 = run("inspect --json --file " + suite_dir() + "/pretrained.mtc");
    EXPECT_EQ(j1.out, j2.out);  // checksums stable across runs

    const auto bad = run("inspect --file " + path("garbage.mtc"));
    EXPECT_EQ(bad.code, 1);
    EXPECT_NE(bad.err.find("BadMagic"), std::string::npos);
}

TEST(CliMisc, VersionAndInputsUntouched) {
    const auto v = run("--version");
    EXPECT_EQ(v.code, 0);
    EXPECT_NE(v.out.find(kVersion), std::string::npos);
    const auto before = slurp(suite_dir() + "/finetuned_0.mtc");
    run("merge --suite " + suite_dir() + " --out " + path("again.mtc"));
    EXPECT_EQ(slurp(suite_dir() + "/finetuned_0.mtc"), before);
}
