#include "catmerge/container.hpp"
#include "catmerge/merging.hpp"
#include "catmerge/synthbench.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numbers>

#include <unistd.h>

using namespace catmerge;
namespace fs = std::filesystem;

namespace {

SuiteConfig small_config(std::uint64_t seed) {
    SuiteConfig cfg;
    cfg.seed = seed;
    cfg.tasks = 2;
    cfg.input_dim = 12;
    cfg.hidden_dim = 16;
    cfg.classes = 3;
    cfg.train_samples = 64;
    cfg.eval_samples = 32;
    cfg.pretrain_steps = 20;
    cfg.finetune_steps = 20;
    cfg.batch_size = 16;
    return cfg;
}

/// Single identity linear layer, so logits equal the inputs.
ModelSpec passthrough(std::size_t d, Checkpoint& params) {
    ModelSpec spec;
    spec.input_dim = d;
    spec.output_dim = d;
    spec.layers = {LinearLayer{d, d, false, false}};
    params = Checkpoint{};
    params.add("layer0.weight", ParamKind::LinearWeight, Matrix::identity(d).to_tensor());
    return spec;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("catmerge_synth_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    return p;
}

double avg_accuracy(const TaskSuite& s, const Checkpoint& m) {
    double a = 0.0;
    for (const auto& t : s.tasks) a += evaluate(s.spec, m, t.eval, LossKind::CrossEntropy).accuracy;
    return a / static_cast<double>(s.tasks.size());
}

}  // namespace

TEST(SuiteConfig, DefaultsAndValidation) {
    const SuiteConfig d;
    EXPECT_EQ(d.input_dim, 32u);
    EXPECT_EQ(d.hidden_dim, 64u);
    EXPECT_EQ(d.hidden_layers, 2u);
    EXPECT_EQ(d.tasks, 4u);
    EXPECT_EQ(d.classes, 4u);
    EXPECT_EQ(d.train_samples, 512u);
    EXPECT_EQ(d.eval_samples, 256u);
    EXPECT_EQ(d.exemplars, 3u);
    EXPECT_EQ(d.finetune_steps, 300u);
    EXPECT_EQ(d.lr, 0.05);
    EXPECT_NO_THROW(d.validate());

    SuiteConfig tight = d;
    tight.input_dim = 16;  // 4 x (4 + 1) + 4 = 24 directions needed
    try {
        tight.validate();
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("needs 24"), std::string::npos);
    }
    SuiteConfig rho = d;
    rho.conflict_strength = 1.5;
    EXPECT_THROW(rho.validate(), std::invalid_argument);
}

TEST(SuiteConfig, JsonRoundTrip) {
    SuiteConfig c = small_config(77);
    c.activation = ActivationKind::Gelu;
    c.conflict_strength = 0.25;
    c.frozen_head = false;
    const auto back = suite_config_from_json(nlohmann::json::parse(to_json(c).dump()));
    EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
}

TEST(SuiteConfig, ModelLayout) {
    const auto spec = SuiteConfig{}.model();
    EXPECT_EQ(spec.input_dim, 32u);
    EXPECT_EQ(spec.output_dim, 16u);  // global label space, 4 tasks x 4 classes
    EXPECT_EQ(spec.layers.size(), 7u);
    const auto slots = spec.slots();
    EXPECT_TRUE(slots.back().frozen);
    EXPECT_EQ(slots.back().name, "layer6.bias");
}

TEST(Evaluate, Examples) {
    Checkpoint p;
    const auto spec = passthrough(3, p);
    // perfect logits
    const Batch perfect{Tensor(Shape{3, 3}, {5, 0, 0, 0, 5, 0, 0, 0, 5}), Tensor(Shape{3}, {0, 1, 2}, DType::U32)};
    EXPECT_EQ(evaluate(spec, p, perfect, LossKind::CrossEntropy).accuracy, 1.0);
    // uniform logits
    const Batch flat{Tensor(Shape{2, 3}), Tensor(Shape{2}, {0, 2}, DType::U32)};
    EXPECT_NEAR(evaluate(spec, p, flat, LossKind::CrossEntropy).loss, std::log(3.0), 1e-15);
    // hand count: rows predict 0, 1, 0 (tie -> first), 2, 1
    const Batch five{Tensor(Shape{5, 3}, {3, 1, 0, 0, 2, 1, 1, 1, 0, 0, 0, 4, 1, 2, 1}), Tensor(Shape{5}, {0, 1, 1, 2, 0}, DType::U32)};
    EXPECT_DOUBLE_EQ(evaluate(spec, p, five, LossKind::CrossEntropy).accuracy, 3.0 / 5.0);
    const Batch unlabeled{Tensor(Shape{1, 3}), std::nullopt};
    EXPECT_THROW(evaluate(spec, p, unlabeled, LossKind::CrossEntropy), std::invalid_argument);
}

TEST(Evaluate, MseUsesTargetArgmax) {
    Checkpoint p;
    const auto spec = passthrough(2, p);
    const Batch b{Tensor(Shape{2, 2}, {1, 0, 1, 0}), Tensor(Shape{2, 2}, {0.9, 0.1, 0.2, 0.8})};
    const auto r = evaluate(spec, p, b, LossKind::Mse);
    EXPECT_EQ(r.accuracy, 0.5);
    EXPECT_NEAR(r.loss, ((0.01 + 0.01) / 2 + (0.64 + 0.64) / 2) / 2, 1e-15);
}

TEST(Distributions, LabelsAndGeometry) {
    const SuiteConfig cfg = small_config(1);
    const auto dists = task_distributions(cfg);
    ASSERT_EQ(dists.size(), 2u);
    CounterRng rng(5);
    const auto b = dists[1].sample(rng, 50, true);
    for (double y : b.y->values()) {
        EXPECT_GE(y, 3.0);
        EXPECT_LT(y, 6.0);
    }
    EXPECT_EQ(b.y->dtype(), DType::U32);
    EXPECT_FALSE(dists[0].sample(rng, 4, false).y.has_value());
}

TEST(Distributions, ZeroConflictGivesOrthogonalClassSubspaces) {
    SuiteConfig cfg = small_config(2);
    cfg.conflict_strength = 0.0;
    cfg.domain_offset = 0.0;
    const auto dists = task_distributions(cfg);
    for (const auto& a : dists[0].class_means)
        for (const auto& b : dists[1].class_means) {
            double dot = 0.0;
            for (std::size_t j = 0; j < a.size(); ++j) dot += a[j] * b[j];
            EXPECT_NEAR(dot, 0.0, 1e-12);
        }
}

TEST(Exemplars, PrefixStableAndTaskDrawn) {
    const SuiteConfig cfg = small_config(3);
    const auto three = exemplar_sets(cfg, 3), eight = exemplar_sets(cfg, 8);
    for (std::size_t k = 0; k < 2; ++k) {
        EXPECT_EQ(eight[k].head(3).x, three[k].x);
        EXPECT_FALSE(three[k].y.has_value());
    }
}

TEST(GenerateSuite, DeterministicAndAligned) {
    const auto cfg = small_config(4);
    const auto a = generate_suite(cfg), b = generate_suite(cfg);
    EXPECT_EQ(a.pretrained, b.pretrained);
    ASSERT_EQ(a.tasks.size(), 2u);
    for (std::size_t k = 0; k < 2; ++k) {
        EXPECT_EQ(a.tasks[k].finetuned, b.tasks[k].finetuned);
        EXPECT_EQ(a.tasks[k].train.x, b.tasks[k].train.x);
        EXPECT_TRUE(check_aligned(a.pretrained, a.tasks[k].finetuned));
        // the frozen head is never fine-tuned
        EXPECT_EQ(a.tasks[k].finetuned.tensor("layer6.weight"), a.pretrained.tensor("layer6.weight"));
        EXPECT_NE(a.tasks[k].finetuned.tensor("layer0.weight"), a.pretrained.tensor("layer0.weight"));
    }
    const auto other = generate_suite(small_config(5));
    EXPECT_NE(other.pretrained, a.pretrained);
}

TEST(GenerateSuite, ThreadCountDoesNotChangeResults) {
    const auto cfg = small_config(6);
    setenv("CATMERGE_THREADS", "1", 1);
    const auto a = generate_suite(cfg);
    setenv("CATMERGE_THREADS", "3", 1);
    const auto b = generate_suite(cfg);
    unsetenv("CATMERGE_THREADS");
    for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(a.tasks[k].finetuned, b.tasks[k].finetuned);
}

TEST(GenerateSuite, SavedFilesAreByteIdenticalAndReload) {
    const auto cfg = small_config(7);
    const auto d1 = scratch("a"), d2 = scratch("b");
    const auto files = save_suite(d1, generate_suite(cfg));
    save_suite(d2, generate_suite(cfg));
    EXPECT_EQ(files.size(), 1u + 2u * 4u + 1u);
    for (const auto& rel : files) EXPECT_EQ(slurp(d1 / rel), slurp(d2 / rel)) << rel;

    const auto loaded = load_suite(d1);
    const auto fresh = generate_suite(cfg);
    EXPECT_EQ(loaded.pretrained.entries(), fresh.pretrained.entries());
    for (std::size_t k = 0; k < 2; ++k) {
        EXPECT_EQ(loaded.tasks[k].finetuned.entries(), fresh.tasks[k].finetuned.entries());
        EXPECT_EQ(loaded.tasks[k].eval.y, fresh.tasks[k].eval.y);
        EXPECT_EQ(loaded.tasks[k].exemplars.x, fresh.tasks[k].exemplars.x);
    }
    EXPECT_EQ(to_json(loaded.config).dump(), to_json(cfg).dump());
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST(GenerateSuite, ZeroConflictFineTuningLearnsEachTask) {
    // isolated tasks with tighter clusters than the default noise level
    SuiteConfig cfg;
    cfg.seed = 11;
    cfg.conflict_strength = 0.0;
    cfg.noise = 0.5;
    const auto s = generate_suite(cfg);
    for (std::size_t k = 0; k < s.tasks.size(); ++k)
        EXPECT_GE(evaluate(s.spec, s.tasks[k].finetuned, s.tasks[k].eval, LossKind::CrossEntropy).accuracy, 0.9) << "task " << k;
}

TEST(GenerateSuite, FullConflictHurtsTaskArithmetic) {
    int below = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        SuiteConfig cfg;
        cfg.seed = seed;
        cfg.conflict_strength = 1.0;
        const auto s = generate_suite(cfg);
        std::vector<TaskVector> tvs;
        double individual = 0.0;
        for (std::size_t k = 0; k < s.tasks.size(); ++k) {
            tvs.push_back(compute_task_vector(s.pretrained, s.tasks[k].finetuned, k));
            individual += evaluate(s.spec, s.tasks[k].finetuned, s.tasks[k].eval, LossKind::CrossEntropy).accuracy;
        }
        individual /= static_cast<double>(s.tasks.size());
        below += avg_accuracy(s, merge_task_arithmetic(s.pretrained, tvs, 1.0)) < individual;
    }
    EXPECT_GE(below, 8);
}
