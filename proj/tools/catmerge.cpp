// catmerge: suite generation, merging, evaluation, conflict analysis and
// container inspection. Exit codes: 0 success, 1 runtime/data error, 2 usage.

#include "catmerge/catmerge.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace catmerge;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Clock = std::chrono::steady_clock;

/// Writes to a sibling temp file then renames, so a failed run leaves no partial output.
void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
        f << text;
        if (!f) throw std::runtime_error("write failed for '" + path.string() + "'");
    }
    fs::rename(tmp, path);
}

void write_checkpoint(const fs::path& path, const Checkpoint& c) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    write_container(tmp, c);
    fs::rename(tmp, path);
}

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw UsageError("cannot read config file '" + path + "'");
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("config file '" + path + "' is not valid JSON: " + e.what());
    }
}

/// Replay record written beside every output.
struct RunManifest {
    std::string command;
    std::vector<std::string> argv;
    ordered_json config;
    std::vector<std::pair<std::string, std::string>> inputs;  // path, digest
    std::vector<std::pair<std::string, std::string>> outputs;
    Clock::time_point start = Clock::now();

    void input(const fs::path& p) { inputs.emplace_back(p.string(), file_digest(p)); }
    void output(const fs::path& p) { outputs.emplace_back(p.string(), file_digest(p)); }

    ordered_json to_json() const {
        ordered_json j;
        j["tool"] = "catmerge";
        j["version"] = kVersion;
        j["command"] = command;
        j["argv"] = argv;
        j["config"] = config;
        auto files = [](const auto& v) {
            ordered_json a = ordered_json::array();
            for (const auto& [p, d] : v) a.push_back({{"path", p}, {"digest", d}});
            return a;
        };
        j["inputs"] = files(inputs);
        j["outputs"] = files(outputs);
        j["wall_time_s"] = std::chrono::duration<double>(Clock::now() - start).count();
        return j;
    }

    void write(const fs::path& path) const { write_text(path, to_json().dump(2) + "\n"); }
};

fs::path sibling(const fs::path& out, const std::string& suffix) {
    fs::path p = out;
    p += suffix;
    return p;
}

template <typename T>
void apply_json(const nlohmann::json& j, const char* key, T& dst) {
    if (!j.contains(key)) return;
    try {
        dst = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw UsageError(std::string("config field '") + key + "' has the wrong type");
    }
}

void suite_inputs(RunManifest& m, const fs::path& dir, const TaskSuite& s) {
    m.input(dir / "suite.json");
    m.input(dir / "pretrained.mtc");
    for (std::size_t k = 0; k < s.tasks.size(); ++k) m.input(dir / SuitePaths::finetuned(k));
}

std::vector<TaskVector> task_vectors(const TaskSuite& s) {
    std::vector<TaskVector> tvs;
    for (std::size_t k = 0; k < s.tasks.size(); ++k) tvs.push_back(compute_task_vector(s.pretrained, s.tasks[k].finetuned, k));
    return tvs;
}

/// Exemplars for merging: the suite's stored sets when the count matches,
/// otherwise the first n rows of each task's exemplar stream.
std::vector<Batch> exemplars_for(const TaskSuite& s, std::size_t n) {
    if (!s.tasks.empty() && s.tasks.front().exemplars.size() == n) {
        std::vector<Batch> out;
        for (const auto& t : s.tasks) out.push_back(t.exemplars);
        return out;
    }
    return exemplar_sets(s.config, n);
}

// ---------------------------------------------------------------------------
// gen

struct GenOpts {
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string config;
    std::optional<std::size_t> tasks, classes, exemplars, input_dim, hidden_dim, hidden_layers, train_samples, eval_samples,
        pretrain_steps, finetune_steps, batch_size;
    std::optional<double> lr, conflict_strength, separation, domain_offset, noise;
    std::optional<std::string> activation;
};

void register_gen(CLI::App& app, GenOpts& o) {
    auto* c = app.add_subcommand("gen", "Generate a seeded synthetic multi-task suite");
    c->add_option("--seed", o.seed, "PRNG seed (required)");
    c->add_option("--out", o.out, "Output suite directory")->required();
    c->add_option("--config", o.config, "JSON file with suite fields; flags take precedence");
    c->add_option("--tasks", o.tasks);
    c->add_option("--classes", o.classes);
    c->add_option("--exemplars", o.exemplars);
    c->add_option("--input-dim", o.input_dim);
    c->add_option("--hidden-dim", o.hidden_dim);
    c->add_option("--hidden-layers", o.hidden_layers);
    c->add_option("--train-samples", o.train_samples);
    c->add_option("--eval-samples", o.eval_samples);
    c->add_option("--pretrain-steps", o.pretrain_steps);
    c->add_option("--finetune-steps", o.finetune_steps);
    c->add_option("--batch-size", o.batch_size);
    c->add_option("--lr", o.lr);
    c->add_option("--conflict-strength", o.conflict_strength);
    c->add_option("--separation", o.separation);
    c->add_option("--domain-offset", o.domain_offset);
    c->add_option("--noise", o.noise);
    c->add_option("--activation", o.activation);
}

int run_gen(const GenOpts& o, RunManifest& m) {
    SuiteConfig cfg;
    bool have_seed = false;
    if (!o.config.empty()) {
        const auto j = read_json_file(o.config);
        try {
            cfg = suite_config_from_json(j);
        } catch (const std::exception& e) {
            throw UsageError(std::string("config file: ") + e.what());
        }
        have_seed = j.contains("seed");
    }
    if (o.seed) cfg.seed = *o.seed, have_seed = true;
    if (!have_seed) throw UsageError("gen needs --seed (all randomness derives from it)");
    auto set = [](auto& dst, const auto& src) {
        if (src) dst = *src;
    };
    set(cfg.tasks, o.tasks);
    set(cfg.classes, o.classes);
    set(cfg.exemplars, o.exemplars);
    set(cfg.input_dim, o.input_dim);
    set(cfg.hidden_dim, o.hidden_dim);
    set(cfg.hidden_layers, o.hidden_layers);
    set(cfg.train_samples, o.train_samples);
    set(cfg.eval_samples, o.eval_samples);
    set(cfg.pretrain_steps, o.pretrain_steps);
    set(cfg.finetune_steps, o.finetune_steps);
    set(cfg.batch_size, o.batch_size);
    set(cfg.lr, o.lr);
    set(cfg.conflict_strength, o.conflict_strength);
    set(cfg.separation, o.separation);
    set(cfg.domain_offset, o.domain_offset);
    set(cfg.noise, o.noise);
    try {
        if (o.activation) cfg.activation = parse_activation(*o.activation);
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(std::string("invalid suite config: ") + e.what());
    }

    m.config = to_json(cfg);
    if (!o.config.empty()) m.input(o.config);
    const TaskSuite suite = generate_suite(cfg);
    const fs::path dir = o.out;
    for (const auto& rel : save_suite(dir, suite)) m.output(dir / rel);
    m.write(dir / "manifest.json");
    std::printf("wrote suite with %zu tasks to %s\n", suite.tasks.size(), dir.string().c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// merge

struct MergeOpts {
    std::string method = "cat";
    double alpha = 1.0;
    double lambda = 0.5;
    std::size_t c = 2;
    std::size_t exemplars = 3;
    double keep_fraction = 0.2;
    bool all_eigen = false;
    std::string suite, out, config;
    CLI::App* cmd = nullptr;
};

void register_merge(CLI::App& app, MergeOpts& o) {
    auto* c = app.add_subcommand("merge", "Merge the suite's fine-tuned checkpoints");
    o.cmd = c;
    c->add_option("--method", o.method, "average | ta | ties-mag | cat | lsq")->capture_default_str();
    c->add_option("--alpha", o.alpha, "Task vector scale")->capture_default_str();
    c->add_option("--lambda", o.lambda, "Intra-task weight (cat)")->capture_default_str();
    c->add_option("--c", o.c, "Basis / mask budget (cat)")->capture_default_str();
    c->add_option("--exemplars", o.exemplars, "Unlabeled exemplars per task (cat, lsq)")->capture_default_str();
    c->add_option("--keep-fraction", o.keep_fraction, "Kept fraction per task vector (ties-mag)")->capture_default_str();
    c->add_flag("--all-eigen", o.all_eigen, "Keep non-positive eigen directions too (cat)");
    c->add_option("--suite", o.suite, "Suite directory")->required();
    c->add_option("--out", o.out, "Merged container path")->required();
    c->add_option("--config", o.config, "JSON file with merge fields; flags take precedence");
}

bool given(const CLI::App* cmd, const char* flag) { return cmd->count(flag) > 0; }

MergeConfig resolve_merge(MergeOpts& o, std::size_t& exemplars) {
    // Precedence: flags > config file > defaults.
    if (!o.config.empty()) {
        const auto j = read_json_file(o.config);
        MergeOpts f;
        apply_json(j, "method", f.method);
        apply_json(j, "alpha", f.alpha);
        apply_json(j, "lambda", f.lambda);
        apply_json(j, "c", f.c);
        apply_json(j, "exemplars", f.exemplars);
        apply_json(j, "keep_fraction", f.keep_fraction);
        bool positive_only = !f.all_eigen;
        apply_json(j, "positive_only", positive_only);
        if (!given(o.cmd, "--method")) o.method = f.method;
        if (!given(o.cmd, "--alpha")) o.alpha = f.alpha;
        if (!given(o.cmd, "--lambda")) o.lambda = f.lambda;
        if (!given(o.cmd, "--c")) o.c = f.c;
        if (!given(o.cmd, "--exemplars")) o.exemplars = f.exemplars;
        if (!given(o.cmd, "--keep-fraction")) o.keep_fraction = f.keep_fraction;
        if (!given(o.cmd, "--all-eigen")) o.all_eigen = !positive_only;
    }
    MergeConfig cfg;
    try {
        cfg.method = parse_method(o.method);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    cfg.alpha = o.alpha;
    cfg.trim.lambda = o.lambda;
    cfg.trim.c = o.c;
    cfg.trim.positive_only = !o.all_eigen;
    cfg.magnitude_keep_fraction = o.keep_fraction;
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(std::string("invalid merge config: ") + e.what());
    }
    if (o.exemplars == 0) throw UsageError("--exemplars must be >= 1");
    exemplars = o.exemplars;

    const bool trims = cfg.method == MergeMethod::Cat;
    for (const char* flag : {"--lambda", "--c", "--all-eigen"})
        if (!trims && given(o.cmd, flag))
            std::fprintf(stderr, "warning: %s has no effect with --method %s; ignored\n", flag, o.method.c_str());
    if (!trims && cfg.method != MergeMethod::Lsq && given(o.cmd, "--exemplars"))
        std::fprintf(stderr, "warning: --exemplars has no effect with --method %s; ignored\n", o.method.c_str());
    if (cfg.method != MergeMethod::MagnitudeTrim && given(o.cmd, "--keep-fraction"))
        std::fprintf(stderr, "warning: --keep-fraction has no effect with --method %s; ignored\n", o.method.c_str());
    if (cfg.method == MergeMethod::Average && given(o.cmd, "--alpha"))
        std::fprintf(stderr, "warning: --alpha has no effect with --method average; ignored\n");
    return cfg;
}

ordered_json merge_config_json(const MergeConfig& cfg, std::size_t exemplars) {
    ordered_json j;
    j["method"] = method_name(cfg.method);
    if (cfg.method != MergeMethod::Average) j["alpha"] = cfg.alpha;
    if (cfg.method == MergeMethod::Cat) {
        j["lambda"] = cfg.trim.lambda;
        j["c"] = cfg.trim.c;
        j["positive_only"] = cfg.trim.positive_only;
    }
    if (cfg.method == MergeMethod::Cat || cfg.method == MergeMethod::Lsq) j["exemplars"] = exemplars;
    if (cfg.method == MergeMethod::MagnitudeTrim) j["keep_fraction"] = cfg.magnitude_keep_fraction;
    return j;
}

int run_merge(MergeOpts& o, RunManifest& m) {
    std::size_t n_ex = 0;
    const MergeConfig cfg = resolve_merge(o, n_ex);
    const fs::path dir = o.suite;
    if (!o.config.empty()) m.input(o.config);
    const TaskSuite suite = load_suite(dir);
    suite_inputs(m, dir, suite);
    m.config = merge_config_json(cfg, n_ex);
    m.config["suite"] = o.suite;

    const auto tvs = task_vectors(suite);
    Checkpoint merged;
    ordered_json report;
    switch (cfg.method) {
        case MergeMethod::Average: {
            std::vector<Checkpoint> models;
            for (const auto& t : suite.tasks) models.push_back(t.finetuned);
            merged = merge_average(models);
            break;
        }
        case MergeMethod::TaskArithmetic: merged = merge_task_arithmetic(suite.pretrained, tvs, cfg.alpha); break;
        case MergeMethod::MagnitudeTrim:
            merged = merge_magnitude_trim(suite.pretrained, tvs, cfg.magnitude_keep_fraction, cfg.alpha);
            break;
        case MergeMethod::Cat: {
            auto res = merge_cat(suite.spec, suite.pretrained, tvs, exemplars_for(suite, n_ex), cfg);
            merged = std::move(res.merged);
            report = std::move(res.report);
            break;
        }
        case MergeMethod::Lsq: merged = merge_lsq(suite.spec, suite.pretrained, tvs, exemplars_for(suite, n_ex), cfg.alpha); break;
    }
    if (report.is_null()) {
        report = merge_config_json(cfg, n_ex);
        report["tasks"] = tvs.size();
    }

    merged.meta().erase("task");
    merged.meta()["role"] = "merged";
    const fs::path out = o.out;
    write_checkpoint(out, merged);
    const fs::path rep_path = sibling(out, ".report.json");
    write_text(rep_path, report.dump(2) + "\n");
    m.output(out);
    m.output(rep_path);
    m.write(sibling(out, ".manifest.json"));
    std::printf("merged %zu tasks with %s -> %s\n", tvs.size(), std::string(method_name(cfg.method)).c_str(), out.string().c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOpts {
    std::string model, suite, json;
};

void register_eval(CLI::App& app, EvalOpts& o) {
    auto* c = app.add_subcommand("eval", "Per-task loss and accuracy of a model on the suite's eval sets");
    c->add_option("--model", o.model, "Model container")->required();
    c->add_option("--suite", o.suite, "Suite directory")->required();
    c->add_option("--json", o.json, "Write metrics JSON here (stdout when omitted)");
}

int run_eval(const EvalOpts& o, RunManifest& m) {
    const TaskSuite suite = load_suite(o.suite);
    const Checkpoint model = widened(read_container(o.model));
    check_params(suite.spec, model);
    require_aligned(suite.pretrained, model, "eval");
    m.input(o.model);
    suite_inputs(m, o.suite, suite);
    m.config = {{"suite", o.suite}, {"model", o.model}, {"loss", "cross_entropy"}};

    ordered_json j;
    j["tasks"] = ordered_json::array();
    double sum = 0.0;
    for (std::size_t k = 0; k < suite.tasks.size(); ++k) {
        const auto r = evaluate(suite.spec, model, suite.tasks[k].eval, LossKind::CrossEntropy);
        j["tasks"].push_back({{"id", k}, {"loss", r.loss}, {"accuracy", r.accuracy}});
        sum += r.accuracy;
    }
    j["avg_accuracy"] = sum / static_cast<double>(suite.tasks.size());
    const std::string text = j.dump(2) + "\n";
    if (o.json.empty()) {
        std::fputs(text.c_str(), stdout);
    } else {
        write_text(o.json, text);
        m.output(o.json);
        m.write(sibling(o.json, ".manifest.json"));
    }
    return 0;
}

// ---------------------------------------------------------------------------
// conflict

struct ConflictOpts {
    std::string suite, csv, method = "ta", report;
    std::size_t task_a = 0, task_b = 1, grid = 11, c = 2, exemplars = 3;
    double lambda = 0.5, alpha_max = 1.0;
    CLI::App* cmd = nullptr;
};

void register_conflict(CLI::App& app, ConflictOpts& o) {
    auto* c = app.add_subcommand("conflict", "Bidirectional knowledge-conflict grid for a task pair");
    o.cmd = c;
    c->add_option("--suite", o.suite, "Suite directory")->required();
    c->add_option("--task-a", o.task_a, "First task id")->required();
    c->add_option("--task-b", o.task_b, "Second task id")->required();
    c->add_option("--grid", o.grid, "Points per axis")->capture_default_str();
    c->add_option("--alpha-max", o.alpha_max, "Largest coefficient on each axis")->capture_default_str();
    c->add_option("--method", o.method, "ta | cat")->capture_default_str();
    c->add_option("--lambda", o.lambda, "Intra-task weight (cat)")->capture_default_str();
    c->add_option("--c", o.c, "Basis / mask budget (cat)")->capture_default_str();
    c->add_option("--exemplars", o.exemplars, "Exemplars per task (cat)")->capture_default_str();
    c->add_option("--csv", o.csv, "Output CSV path")->required();
    c->add_option("--report", o.report, "Also write the layer-shift and bound diagnostics as JSON");
}

int run_conflict(const ConflictOpts& o, RunManifest& m) {
    if (o.method != "ta" && o.method != "cat") throw UsageError("--method must be ta or cat");
    if (o.task_a == o.task_b) throw UsageError("--task-a and --task-b must differ");
    if (o.grid == 0) throw UsageError("--grid must be >= 1");
    if (o.exemplars == 0) throw UsageError("--exemplars must be >= 1");
    const bool cat = o.method == "cat";
    if (!cat)
        for (const char* flag : {"--lambda", "--c", "--exemplars"})
            if (given(o.cmd, flag)) std::fprintf(stderr, "warning: %s has no effect with --method ta; ignored\n", flag);
    TrimConfig trim;
    trim.lambda = o.lambda;
    trim.c = o.c;
    try {
        trim.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(std::string("invalid trim config: ") + e.what());
    }

    const TaskSuite suite = load_suite(o.suite);
    const std::size_t K = suite.tasks.size();
    if (o.task_a >= K || o.task_b >= K)
        throw UsageError("task ids must be < " + std::to_string(K));
    suite_inputs(m, o.suite, suite);
    m.config = {{"suite", o.suite}, {"task_a", o.task_a}, {"task_b", o.task_b}, {"grid", o.grid},
                {"alpha_max", o.alpha_max}, {"method", o.method}};
    if (cat) m.config["trim"] = {{"lambda", trim.lambda}, {"c", trim.c}, {"positive_only", trim.positive_only}, {"exemplars", o.exemplars}};

    const auto tvs = task_vectors(suite);
    std::vector<TrimOperator> ops;
    if (cat) {
        MergeConfig mc;
        mc.trim = trim;
        ops = merge_cat(suite.spec, suite.pretrained, tvs, exemplars_for(suite, o.exemplars), mc).operators;
    }
    const auto axis = alpha_grid(o.grid, o.alpha_max);
    const auto g = conflict_grid(suite.spec, suite.pretrained, tvs[o.task_a], tvs[o.task_b], suite.tasks[o.task_a].eval,
                                 suite.tasks[o.task_b].eval, axis, axis, LossKind::CrossEntropy, cat ? &ops : nullptr);
    write_text(o.csv, grid_to_csv(g));
    m.output(o.csv);

    if (!o.report.empty()) {
        std::vector<TaskVector> pair{tvs[o.task_a], tvs[o.task_b]};
        if (cat) edit_task_vectors(pair, ops);
        ordered_json r;
        r["task_a"] = o.task_a;
        r["task_b"] = o.task_b;
        r["method"] = o.method;
        r["a_given_b"] = theorem_bound_check(suite.spec, suite.pretrained, pair[0].delta, pair[1].delta, suite.tasks[o.task_a].eval,
                                             LossKind::CrossEntropy)
                             .to_json();
        r["b_given_a"] = theorem_bound_check(suite.spec, suite.pretrained, pair[1].delta, pair[0].delta, suite.tasks[o.task_b].eval,
                                             LossKind::CrossEntropy)
                             .to_json();
        write_text(o.report, r.dump(2) + "\n");
        m.output(o.report);
    }
    m.write(sibling(o.csv, ".manifest.json"));
    std::printf("conflict grid %zux%zu mean %.6g -> %s\n", o.grid, o.grid, g.mean(), o.csv.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// inspect

struct InspectOpts {
    std::string file;
    bool json = false;
};

void register_inspect(CLI::App& app, InspectOpts& o) {
    auto* c = app.add_subcommand("inspect", "List the tensors of a container");
    c->add_option("--file", o.file, "Container path")->required();
    c->add_flag("--json", o.json, "Emit JSON instead of text");
}

int run_inspect(const InspectOpts& o) {
    const Checkpoint c = read_container(o.file);
    std::map<std::string, std::size_t> kinds;
    for (auto k : {ParamKind::LinearWeight, ParamKind::Scale, ParamKind::Shift, ParamKind::Frozen}) kinds[std::string(kind_name(k))] = 0;
    for (const auto& e : c.entries()) ++kinds[std::string(kind_name(e.kind))];

    if (o.json) {
        ordered_json j;
        j["file"] = o.file;
        j["tensor_count"] = c.size();
        j["tensors"] = ordered_json::array();
        for (const auto& e : c.entries())
            j["tensors"].push_back({{"name", e.name},
                                    {"kind", kind_name(e.kind)},
                                    {"dtype", dtype_name(e.tensor.dtype())},
                                    {"shape", e.tensor.shape()},
                                    {"checksum", tensor_checksum(e.tensor)}});
        j["kinds"] = kinds;
        j["meta"] = c.meta();
        std::cout << j.dump(2) << "\n";
        return 0;
    }
    std::printf("%s: %zu tensors\n", o.file.c_str(), c.size());
    for (const auto& e : c.entries())
        std::printf("  %-24s %-13s %-3s %-12s %s\n", e.name.c_str(), std::string(kind_name(e.kind)).c_str(),
                    std::string(dtype_name(e.tensor.dtype())).c_str(), shape_str(e.tensor.shape()).c_str(),
                    tensor_checksum(e.tensor).c_str());
    std::printf("kinds:");
    for (const auto& [k, n] : kinds) std::printf(" %s=%zu", k.c_str(), n);
    std::printf("\n");
    for (const auto& [k, v] : c.meta()) std::printf("meta %s = %s\n", k.c_str(), v.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"catmerge: conflict-aware task-vector merging toolkit"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    GenOpts gen;
    MergeOpts merge;
    EvalOpts eval;
    ConflictOpts conflict;
    InspectOpts inspect;
    register_gen(app, gen);
    register_merge(app, merge);
    register_eval(app, eval);
    register_conflict(app, conflict);
    register_inspect(app, inspect);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    RunManifest manifest;
    manifest.argv.assign(argv, argv + argc);
    try {
        auto* sub = app.get_subcommands().front();
        manifest.command = sub->get_name();
        if (manifest.command == "gen") return run_gen(gen, manifest);
        if (manifest.command == "merge") return run_merge(merge, manifest);
        if (manifest.command == "eval") return run_eval(eval, manifest);
        if (manifest.command == "conflict") return run_conflict(conflict, manifest);
        return run_inspect(inspect);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const ContainerError& e) {
        std::fprintf(stderr, "error: malformed or unreadable container: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
