#pragma once

// Seeded synthetic multi-task suites: a shared pretrained MLP, one fine-tuned
// checkpoint per task, and labeled/unlabeled data per task.
//
// Task geometry (input space R^D, C classes per task, K tasks):
//   - a random orthonormal frame Q of R^D is drawn from the seed;
//   - columns are handed out as: C shared directions S, then C private
//     directions P_k per task, then one domain direction d_k per task;
//   - task k's class-discriminative directions are U_k = ρ·S + sqrt(1-ρ²)·P_k,
//     with ρ = conflict_strength (0: orthogonal subspaces, 1: identical);
//   - class c of task k is centered at separation·U_k e_{π_k(c)} + domain_offset·d_k,
//     π_k a per-task label permutation drawn from the seed;
//   - samples add isotropic N(0, noise²) noise.
// Labels live in a global space: task k's class c is label k·C + c, so the
// model has K·C outputs.
//
// Stream layout of the counter PRNG (see rng.hpp), all split from the seed:
//   0 geometry, 1 model init, 2 pretraining, 100+k task k data,
//   200+k task k fine-tuning, 300+k task k exemplars.

#include "catmerge/container.hpp"
#include "catmerge/network.hpp"
#include "catmerge/parallel.hpp"
#include "catmerge/rng.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

namespace catmerge {

struct SuiteConfig {
    std::uint64_t seed = 0;
    std::size_t tasks = 4;
    std::size_t input_dim = 32;
    std::size_t hidden_dim = 64;
    std::size_t hidden_layers = 2;
    ActivationKind activation = ActivationKind::Relu;
    std::size_t classes = 4;
    std::size_t train_samples = 512;
    std::size_t eval_samples = 256;
    std::size_t exemplars = 3;
    std::size_t pretrain_steps = 600;
    std::size_t finetune_steps = 300;
    std::size_t batch_size = 64;
    double lr = 0.05;
    double conflict_strength = 0.8;
    double separation = 2.0;
    double domain_offset = 2.0;
    double noise = 0.7;
    bool frozen_head = true;

    void validate() const {
        if (tasks < 1) throw std::invalid_argument("tasks must be >= 1");
        if (classes < 2) throw std::invalid_argument("classes must be >= 2");
        if (!(conflict_strength >= 0.0 && conflict_strength <= 1.0)) throw std::invalid_argument("conflict_strength must lie in [0, 1]");
        if (train_samples == 0 || eval_samples == 0 || exemplars == 0 || batch_size == 0)
            throw std::invalid_argument("sample counts and batch size must be >= 1");
        if (hidden_dim == 0) throw std::invalid_argument("hidden_dim must be >= 1");
        if (!(lr > 0)) throw std::invalid_argument("lr must be > 0");
        const std::size_t needed = classes * (tasks + 1) + tasks;
        if (needed > input_dim)
            throw std::invalid_argument("input_dim " + std::to_string(input_dim) + " too small for " + std::to_string(tasks) +
                                        " tasks x " + std::to_string(classes) + " classes of orthogonal subspaces (needs " +
                                        std::to_string(needed) + ")");
    }

    /// Input -> [Linear -> Norm -> act] x hidden_layers -> Linear.
    ModelSpec model() const {
        ModelSpec spec;
        spec.input_dim = input_dim;
        spec.output_dim = tasks * classes;
        std::size_t d = input_dim;
        for (std::size_t h = 0; h < hidden_layers; ++h) {
            spec.layers.emplace_back(LinearLayer{d, hidden_dim, true, false});
            spec.layers.emplace_back(NormLayer{hidden_dim, 1e-5, false});
            spec.layers.emplace_back(ActivationLayer{activation});
            d = hidden_dim;
        }
        spec.layers.emplace_back(LinearLayer{d, spec.output_dim, true, frozen_head});
        spec.validate();
        return spec;
    }
};

inline nlohmann::ordered_json to_json(const SuiteConfig& c) {
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["tasks"] = c.tasks;
    j["input_dim"] = c.input_dim;
    j["hidden_dim"] = c.hidden_dim;
    j["hidden_layers"] = c.hidden_layers;
    j["activation"] = activation_name(c.activation);
    j["classes"] = c.classes;
    j["train_samples"] = c.train_samples;
    j["eval_samples"] = c.eval_samples;
    j["exemplars"] = c.exemplars;
    j["pretrain_steps"] = c.pretrain_steps;
    j["finetune_steps"] = c.finetune_steps;
    j["batch_size"] = c.batch_size;
    j["lr"] = c.lr;
    j["conflict_strength"] = c.conflict_strength;
    j["separation"] = c.separation;
    j["domain_offset"] = c.domain_offset;
    j["noise"] = c.noise;
    j["frozen_head"] = c.frozen_head;
    return j;
}

inline SuiteConfig suite_config_from_json(const nlohmann::json& j) {
    SuiteConfig c;
    c.seed = j.value("seed", c.seed);
    c.tasks = j.value("tasks", c.tasks);
    c.input_dim = j.value("input_dim", c.input_dim);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.hidden_layers = j.value("hidden_layers", c.hidden_layers);
    if (j.contains("activation")) c.activation = parse_activation(j["activation"].get<std::string>());
    c.classes = j.value("classes", c.classes);
    c.train_samples = j.value("train_samples", c.train_samples);
    c.eval_samples = j.value("eval_samples", c.eval_samples);
    c.exemplars = j.value("exemplars", c.exemplars);
    c.pretrain_steps = j.value("pretrain_steps", c.pretrain_steps);
    c.finetune_steps = j.value("finetune_steps", c.finetune_steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.conflict_strength = j.value("conflict_strength", c.conflict_strength);
    c.separation = j.value("separation", c.separation);
    c.domain_offset = j.value("domain_offset", c.domain_offset);
    c.noise = j.value("noise", c.noise);
    c.frozen_head = j.value("frozen_head", c.frozen_head);
    return c;
}

struct TaskData {
    Checkpoint finetuned;
    Batch train;
    Batch eval;
    Batch exemplars;  ///< unlabeled
};

struct TaskSuite {
    SuiteConfig config;
    ModelSpec spec;
    Checkpoint pretrained;
    std::vector<TaskData> tasks;
};

/// Per-task sampling distribution.
struct TaskDistribution {
    std::size_t task = 0;
    std::size_t classes = 0;
    std::vector<std::vector<double>> class_means;  ///< [C][D]
    double noise = 1.0;

    Batch sample(CounterRng& rng, std::size_t n, bool labeled) const {
        const std::size_t d = class_means.front().size();
        std::vector<double> x(n * d), y(n);
        for (std::size_t r = 0; r < n; ++r) {
            const std::size_t c = static_cast<std::size_t>(rng.below(classes));
            for (std::size_t j = 0; j < d; ++j) x[r * d + j] = class_means[c][j] + noise * rng.normal();
            y[r] = static_cast<double>(task * classes + c);
        }
        Batch b{Tensor(Shape{n, d}, std::move(x)), std::nullopt};
        if (labeled) b.y = Tensor(Shape{n}, std::move(y), DType::U32);
        return b;
    }
};

namespace detail {

/// Random orthonormal D x D frame (modified Gram-Schmidt on Gaussian columns).
inline Matrix random_frame(CounterRng& rng, std::size_t d) {
    Matrix q(d, d);
    for (std::size_t c = 0; c < d; ++c) {
        std::vector<double> v(d);
        for (auto& x : v) x = rng.normal();
        for (std::size_t p = 0; p < c; ++p) {
            double dot = 0.0;
            for (std::size_t r = 0; r < d; ++r) dot += v[r] * q(r, p);
            for (std::size_t r = 0; r < d; ++r) v[r] -= dot * q(r, p);
        }
        double nrm = 0.0;
        for (double x : v) nrm += x * x;
        nrm = std::sqrt(nrm);
        for (std::size_t r = 0; r < d; ++r) q(r, c) = v[r] / nrm;
    }
    return q;
}

inline std::vector<std::size_t> permutation(CounterRng& rng, std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    for (std::size_t i = n; i-- > 1;) std::swap(p[i], p[rng.below(i + 1)]);
    return p;
}

/// Rows `idx` of a batch.
inline Batch gather(const Batch& b, const std::vector<std::size_t>& idx) {
    const std::size_t d = b.x.cols();
    std::vector<double> x(idx.size() * d), y(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t j = 0; j < d; ++j) x[r * d + j] = b.x.at(idx[r], j);
        y[r] = (*b.y)[idx[r]];
    }
    return Batch{Tensor(Shape{idx.size(), d}, std::move(x)), Tensor(Shape{idx.size()}, std::move(y), b.y->dtype())};
}

inline Batch concat(const std::vector<Batch>& parts) {
    const std::size_t d = parts.front().x.cols();
    std::vector<double> x, y;
    for (const auto& p : parts) {
        x.insert(x.end(), p.x.values().begin(), p.x.values().end());
        y.insert(y.end(), p.y->values().begin(), p.y->values().end());
    }
    const std::size_t n = y.size();
    return Batch{Tensor(Shape{n, d}, std::move(x)), Tensor(Shape{n}, std::move(y), DType::U32)};
}

}  // namespace detail

/// Task distributions implied by the config's geometry.
inline std::vector<TaskDistribution> task_distributions(const SuiteConfig& cfg) {
    cfg.validate();
    CounterRng geo(cfg.seed, 0);
    const Matrix q = detail::random_frame(geo, cfg.input_dim);
    const std::size_t C = cfg.classes, K = cfg.tasks, D = cfg.input_dim;
    const double rho = cfg.conflict_strength, rho_c = std::sqrt(std::max(0.0, 1.0 - rho * rho));
    std::vector<TaskDistribution> out;
    for (std::size_t k = 0; k < K; ++k) {
        const auto perm = detail::permutation(geo, C);
        TaskDistribution td{k, C, std::vector<std::vector<double>>(C, std::vector<double>(D, 0.0)), cfg.noise};
        const std::size_t domain_col = C * (K + 1) + k;
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t shared_col = perm[c];
            const std::size_t private_col = C * (k + 1) + perm[c];
            for (std::size_t r = 0; r < D; ++r)
                td.class_means[c][r] = cfg.separation * (rho * q(r, shared_col) + rho_c * q(r, private_col)) +
                                       cfg.domain_offset * q(r, domain_col);
        }
        out.push_back(std::move(td));
    }
    return out;
}

/// The first n unlabeled exemplars of every task. Each task draws from its own
/// substream, so the first m < n rows equal exemplar_sets(cfg, m).
inline std::vector<Batch> exemplar_sets(const SuiteConfig& cfg, std::size_t n) {
    if (n == 0) throw std::invalid_argument("exemplar count must be >= 1");
    const auto dists = task_distributions(cfg);
    std::vector<Batch> out;
    for (std::size_t k = 0; k < cfg.tasks; ++k) {
        CounterRng rng(cfg.seed, 300 + k);
        out.push_back(dists[k].sample(rng, n, false));
    }
    return out;
}

/// Minibatch SGD over `data`, reshuffled every epoch from `rng`.
inline Checkpoint train_sgd(const ModelSpec& spec, Checkpoint params, const Batch& data, std::size_t steps, std::size_t batch_size,
                            double lr, CounterRng& rng) {
    const std::size_t n = data.size();
    const std::size_t bs = std::min(batch_size, n);
    std::vector<std::size_t> order;
    std::size_t cursor = n;
    for (std::size_t s = 0; s < steps; ++s) {
        if (cursor + bs > n) {
            order = detail::permutation(rng, n);
            cursor = 0;
        }
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                     order.begin() + static_cast<std::ptrdiff_t>(cursor + bs));
        cursor += bs;
        params = sgd_step(params, backward(spec, params, detail::gather(data, idx), LossKind::CrossEntropy), lr);
    }
    return params;
}

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
};

/// Mean loss and argmax accuracy (first maximal logit wins ties). For mse
/// targets, accuracy compares against the target row's argmax.
inline EvalResult evaluate(const ModelSpec& spec, const Checkpoint& params, const Batch& batch, LossKind kind) {
    if (!batch.y) throw std::invalid_argument("evaluate needs a labeled batch");
    const Matrix z = forward(spec, params, batch);
    EvalResult r;
    r.loss = loss(kind, z, *batch.y);
    auto argmax_row = [](auto&& get, std::size_t cols) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < cols; ++c)
            if (get(c) > get(best)) best = c;
        return best;
    };
    std::size_t hits = 0;
    for (std::size_t row = 0; row < z.rows(); ++row) {
        const std::size_t pred = argmax_row([&](std::size_t c) { return z(row, c); }, z.cols());
        const std::size_t truth = kind == LossKind::CrossEntropy
                                      ? static_cast<std::size_t>((*batch.y)[row])
                                      : argmax_row([&](std::size_t c) { return batch.y->at(row, c); }, z.cols());
        if (pred == truth) ++hits;
    }
    r.accuracy = static_cast<double>(hits) / static_cast<double>(z.rows());
    return r;
}

/// Deterministic in cfg (including seed).
inline TaskSuite generate_suite(const SuiteConfig& cfg) {
    cfg.validate();
    TaskSuite suite;
    suite.config = cfg;
    suite.spec = cfg.model();
    const auto dists = task_distributions(cfg);
    const std::size_t K = cfg.tasks;

    suite.tasks.resize(K);
    for (std::size_t k = 0; k < K; ++k) {
        CounterRng data_rng(cfg.seed, 100 + k);
        suite.tasks[k].train = dists[k].sample(data_rng, cfg.train_samples, true);
        suite.tasks[k].eval = dists[k].sample(data_rng, cfg.eval_samples, true);
    }
    auto ex = exemplar_sets(cfg, cfg.exemplars);
    for (std::size_t k = 0; k < K; ++k) suite.tasks[k].exemplars = std::move(ex[k]);

    // Pretraining updates every slot, including a head that fine-tuning keeps frozen.
    SuiteConfig open_cfg = cfg;
    open_cfg.frozen_head = false;
    const ModelSpec open_spec = open_cfg.model();
    CounterRng init_rng(cfg.seed, 1);
    Checkpoint params = init_params(open_spec, init_rng);
    if (cfg.pretrain_steps > 0) {
        std::vector<Batch> parts;
        for (const auto& t : suite.tasks) parts.push_back(t.train);
        CounterRng pre_rng(cfg.seed, 2);
        params = train_sgd(open_spec, std::move(params), detail::concat(parts), cfg.pretrain_steps, cfg.batch_size, cfg.lr, pre_rng);
    }
    for (const auto& slot : suite.spec.slots())
        suite.pretrained.add(slot.name, slot.frozen ? ParamKind::Frozen : slot.kind, params.tensor(slot.name));
    suite.pretrained.meta()["role"] = "pretrained";

    parallel_for(K, [&](std::size_t k) {
        CounterRng ft_rng(cfg.seed, 200 + k);
        auto ft = train_sgd(suite.spec, suite.pretrained, suite.tasks[k].train, cfg.finetune_steps, cfg.batch_size, cfg.lr, ft_rng);
        ft.meta()["role"] = "finetuned";
        ft.meta()["task"] = std::to_string(k);
        suite.tasks[k].finetuned = std::move(ft);
    });
    return suite;
}

// ---------------------------------------------------------------------------
// Persistence: a directory with
//   suite.json               manifest (version, config echo, model spec, file paths)
//   pretrained.mtc           W_0
//   finetuned_{k}.mtc        W_k
//   data/task{k}_{train,eval,exemplars}.mtc

struct SuitePaths {
    static std::string finetuned(std::size_t k) { return "finetuned_" + std::to_string(k) + ".mtc"; }
    static std::string data(std::size_t k, std::string_view part) {
        return "data/task" + std::to_string(k) + "_" + std::string(part) + ".mtc";
    }
};

inline nlohmann::ordered_json suite_manifest(const TaskSuite& s) {
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["seed"] = s.config.seed;
    j["config"] = to_json(s.config);
    j["model"] = to_json(s.spec);
    j["loss"] = "cross_entropy";
    j["pretrained"] = "pretrained.mtc";
    j["tasks"] = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < s.tasks.size(); ++k) {
        nlohmann::ordered_json t;
        t["id"] = k;
        t["finetuned"] = SuitePaths::finetuned(k);
        t["train"] = SuitePaths::data(k, "train");
        t["eval"] = SuitePaths::data(k, "eval");
        t["exemplars"] = SuitePaths::data(k, "exemplars");
        j["tasks"].push_back(std::move(t));
    }
    return j;
}

/// Writes the suite; returns the relative paths of every file written.
inline std::vector<std::string> save_suite(const std::filesystem::path& dir, const TaskSuite& s) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "data");
    std::vector<std::string> written;
    auto put = [&](const std::string& rel, const Checkpoint& c) {
        write_container(dir / rel, c);
        written.push_back(rel);
    };
    put("pretrained.mtc", s.pretrained);
    for (std::size_t k = 0; k < s.tasks.size(); ++k) {
        put(SuitePaths::finetuned(k), s.tasks[k].finetuned);
        put(SuitePaths::data(k, "train"), batch_to_checkpoint(s.tasks[k].train));
        put(SuitePaths::data(k, "eval"), batch_to_checkpoint(s.tasks[k].eval));
        put(SuitePaths::data(k, "exemplars"), batch_to_checkpoint(s.tasks[k].exemplars));
    }
    std::ofstream f(dir / "suite.json");
    if (!f) throw std::runtime_error("cannot write " + (dir / "suite.json").string());
    f << suite_manifest(s).dump(2) << "\n";
    written.push_back("suite.json");
    return written;
}

inline TaskSuite load_suite(const std::filesystem::path& dir) {
    std::ifstream f(dir / "suite.json");
    if (!f) throw std::runtime_error("cannot read suite manifest " + (dir / "suite.json").string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& ex) {
        throw std::runtime_error("malformed suite manifest: " + std::string(ex.what()));
    }
    TaskSuite s;
    s.config = suite_config_from_json(j.at("config"));
    s.spec = model_spec_from_json(j.at("model"));
    s.pretrained = widened(read_container(dir / j.at("pretrained").get<std::string>()));
    check_params(s.spec, s.pretrained);
    for (const auto& t : j.at("tasks")) {
        TaskData td;
        td.finetuned = widened(read_container(dir / t.at("finetuned").get<std::string>()));
        require_aligned(s.pretrained, td.finetuned, "load_suite");
        td.train = batch_from_checkpoint(read_container(dir / t.at("train").get<std::string>()));
        td.eval = batch_from_checkpoint(read_container(dir / t.at("eval").get<std::string>()));
        td.exemplars = batch_from_checkpoint(read_container(dir / t.at("exemplars").get<std::string>()));
        s.tasks.push_back(std::move(td));
    }
    return s;
}

}  // namespace catmerge
