// Generates one synthetic conflict suite and prints average accuracy for
// every merge method next to the individually fine-tuned models.
//
//   merge_comparison [seed] [conflict_strength]

#include "catmerge/catmerge.hpp"

#include <cstdio>
#include <cstdlib>

using namespace catmerge;

int main(int argc, char** argv) {
    SuiteConfig cfg;
    cfg.seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 0;
    if (argc > 2) cfg.conflict_strength = std::atof(argv[2]);
    cfg.validate();

    const TaskSuite suite = generate_suite(cfg);
    std::vector<TaskVector> tvs;
    std::vector<Checkpoint> finetuned;
    std::vector<Batch> exemplars;
    for (std::size_t k = 0; k < suite.tasks.size(); ++k) {
        tvs.push_back(compute_task_vector(suite.pretrained, suite.tasks[k].finetuned, k));
        finetuned.push_back(suite.tasks[k].finetuned);
        exemplars.push_back(suite.tasks[k].exemplars);
    }

    auto report = [&](const char* name, auto&& model_for_task) {
        double sum = 0.0;
        std::printf("%-12s", name);
        for (std::size_t k = 0; k < suite.tasks.size(); ++k) {
            const double acc = evaluate(suite.spec, model_for_task(k), suite.tasks[k].eval, LossKind::CrossEntropy).accuracy;
            std::printf("  %6.3f", acc);
            sum += acc;
        }
        std::printf("  | avg %.4f\n", sum / static_cast<double>(suite.tasks.size()));
    };

    MergeConfig cat;
    const Checkpoint ta = merge_task_arithmetic(suite.pretrained, tvs, cat.alpha);
    const Checkpoint avg = merge_average(finetuned);
    const Checkpoint ties = merge_magnitude_trim(suite.pretrained, tvs, cat.magnitude_keep_fraction, cat.alpha);
    const Checkpoint lsq = merge_lsq(suite.spec, suite.pretrained, tvs, exemplars, cat.alpha);
    const MergeResult res = merge_cat(suite.spec, suite.pretrained, tvs, exemplars, cat);

    std::printf("seed %llu, conflict strength %.2f, %zu tasks\n", static_cast<unsigned long long>(cfg.seed), cfg.conflict_strength,
                suite.tasks.size());
    report("individual", [&](std::size_t k) -> const Checkpoint& { return finetuned[k]; });
    report("average", [&](std::size_t) -> const Checkpoint& { return avg; });
    report("ta", [&](std::size_t) -> const Checkpoint& { return ta; });
    report("ties-mag", [&](std::size_t) -> const Checkpoint& { return ties; });
    report("lsq", [&](std::size_t) -> const Checkpoint& { return lsq; });
    report("cat", [&](std::size_t) -> const Checkpoint& { return res.merged; });
    std::printf("cat built %zu trimming operators\n", res.operators.size());
}
