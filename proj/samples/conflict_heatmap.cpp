// Prints the bidirectional conflict grid of tasks 0 and 1, before and after
// conflict-aware trimming, as two text tables.
//
//   conflict_heatmap [seed] [grid_points]

#include "catmerge/catmerge.hpp"

#include <cstdio>
#include <cstdlib>

using namespace catmerge;

namespace {

void print_grid(const char* title, const ConflictGrid& g) {
    std::printf("%s (rows alpha_0, columns alpha_1), mean %.4f\n       ", title, g.mean());
    for (double b : g.alphas_i) std::printf(" %7.2f", b);
    std::printf("\n");
    for (std::size_t a = 0; a < g.alphas_k.size(); ++a) {
        std::printf("%7.2f", g.alphas_k[a]);
        for (std::size_t b = 0; b < g.alphas_i.size(); ++b) std::printf(" %7.4f", g.at(a, b));
        std::printf("\n");
    }
}

}  // namespace

int main(int argc, char** argv) {
    SuiteConfig cfg;
    cfg.seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 0;
    const std::size_t points = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 6;

    const TaskSuite suite = generate_suite(cfg);
    std::vector<TaskVector> tvs;
    std::vector<Batch> exemplars;
    for (std::size_t k = 0; k < suite.tasks.size(); ++k) {
        tvs.push_back(compute_task_vector(suite.pretrained, suite.tasks[k].finetuned, k));
        exemplars.push_back(suite.tasks[k].exemplars);
    }
    const auto ops = merge_cat(suite.spec, suite.pretrained, tvs, exemplars, MergeConfig{}).operators;

    const auto axis = alpha_grid(points);
    const auto& d0 = suite.tasks[0].eval;
    const auto& d1 = suite.tasks[1].eval;
    print_grid("task arithmetic", conflict_grid(suite.spec, suite.pretrained, tvs[0], tvs[1], d0, d1, axis, axis, LossKind::CrossEntropy));
    print_grid("after trimming", conflict_grid(suite.spec, suite.pretrained, tvs[0], tvs[1], d0, d1, axis, axis, LossKind::CrossEntropy, &ops));
}
