#include "catmerge/tensor.hpp"
#include "catmerge/trimming.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace catmerge;
using oracle::random_matrix;
using oracle::random_vector;

namespace {

struct LinearCase {
    std::size_t k;
    std::vector<Matrix> t, x;
};

LinearCase random_linear_case(CounterRng& rng, std::size_t K, std::size_t din, std::size_t dout) {
    LinearCase c{rng.below(K), {}, {}};
    for (std::size_t i = 0; i < K; ++i) {
        c.t.push_back(random_matrix(rng, din, dout));
        c.x.push_back(random_matrix(rng, 1 + rng.below(4), din));
    }
    return c;
}

TrimConfig cfg_of(double lambda, std::size_t c) {
    TrimConfig cfg;
    cfg.lambda = lambda;
    cfg.c = c;
    return cfg;
}

std::vector<std::uint8_t> bits(std::initializer_list<int> v) { return {v.begin(), v.end()}; }

}  // namespace

TEST(LinearBasis, DiagonalExample) {
    const std::vector<Matrix> t{Matrix(2, 2), Matrix::diagonal({2, 1})};
    const std::vector<Matrix> x{Matrix::identity(2), Matrix::identity(2)};
    const auto g = linear_score_matrix(0, t, x, 0.0);
    EXPECT_EQ(g, Matrix::diagonal({4, 1}));
    const auto b = linear_removal_basis(0, t, x, cfg_of(0.0, 1));
    ASSERT_EQ(b.basis.cols(), 1u);
    EXPECT_EQ(b.basis(0, 0), 1.0);
    EXPECT_EQ(b.basis(1, 0), 0.0);

    TrimOperator op{0, "w", b};
    ObjectiveInputs in{t, {}, x};
    EXPECT_NEAR(objective_value(SlotKind::Linear, 0, op, in, 0.0), 4.0, 1e-14);

    const Matrix phi = apply_linear_projection(t[1], b.basis);
    EXPECT_EQ(phi, Matrix(2, 2, {0, 0, 0, 1}));
}

TEST(LinearBasis, CancellationGivesEmptyBasis) {
    CounterRng rng(1);
    const Matrix x = random_matrix(rng, 3, 4);
    const std::vector<Matrix> t{random_matrix(rng, 4, 3), random_matrix(rng, 4, 3)};
    const std::vector<Matrix> xs{x, x};
    const auto b = linear_removal_basis(0, t, xs, cfg_of(1.0, 2));
    EXPECT_EQ(b.basis.rows(), 3u);
    EXPECT_EQ(b.basis.cols(), 0u);
    EXPECT_EQ(apply_linear_projection(t[1], b.basis), t[1]);
}

TEST(LinearBasis, Errors) {
    CounterRng rng(2);
    const std::vector<Matrix> t{random_matrix(rng, 3, 2), random_matrix(rng, 3, 2)};
    const std::vector<Matrix> one_trace{random_matrix(rng, 2, 3)};
    EXPECT_THROW(linear_removal_basis(0, t, one_trace, cfg_of(0.5, 1)), std::invalid_argument);
    const std::vector<Matrix> bad_width{random_matrix(rng, 2, 4), random_matrix(rng, 2, 4)};
    EXPECT_THROW(linear_removal_basis(0, t, bad_width, cfg_of(0.5, 1)), std::invalid_argument);
    const std::vector<Matrix> mixed{random_matrix(rng, 3, 2), random_matrix(rng, 2, 2)};
    const std::vector<Matrix> xs{random_matrix(rng, 2, 3), random_matrix(rng, 2, 3)};
    EXPECT_THROW(linear_removal_basis(0, mixed, xs, cfg_of(0.5, 1)), std::invalid_argument);
    EXPECT_THROW(linear_removal_basis(0, t, xs, cfg_of(-0.1, 1)), std::invalid_argument);
    EXPECT_THROW(linear_removal_basis(2, t, xs, cfg_of(0.5, 1)), std::invalid_argument);
    EXPECT_THROW(apply_linear_projection(t[0], Matrix(3, 1)), std::invalid_argument);
}

TEST(LinearBasis, BeatsRandomUnitVectors4x4) {
    CounterRng rng(3);
    const auto lc = random_linear_case(rng, 3, 4, 4);
    const auto b = linear_removal_basis(lc.k, lc.t, lc.x, cfg_of(0.5, 1));
    const double best = oracle::linear_objective(lc.k, lc.t, lc.x, b.basis, 0.5);
    for (int trial = 0; trial < 10000; ++trial) {
        const Matrix r = oracle::random_orthonormal(rng, 4, 1);
        EXPECT_GE(best, oracle::linear_objective(lc.k, lc.t, lc.x, r, 0.5) - 1e-9);
    }
}

TEST(LinearBasis, OrthonormalAndOrthogonalAfterProjection) {
    CounterRng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const auto lc = random_linear_case(rng, 2 + rng.below(3), 1 + rng.below(6), 1 + rng.below(6));
        const auto b = linear_removal_basis(lc.k, lc.t, lc.x, cfg_of(0.5, 1 + rng.below(3)));
        const Matrix btb = matmul_tn(b.basis, b.basis);
        for (std::size_t i = 0; i < btb.rows(); ++i)
            for (std::size_t j = 0; j < btb.cols(); ++j) EXPECT_NEAR(btb(i, j), i == j ? 1.0 : 0.0, 1e-10);
        for (const auto& t : lc.t) {
            const Matrix phi = apply_linear_projection(t, b.basis);
            if (b.basis.cols()) {
                EXPECT_LE(frobenius_norm(matmul(phi, b.basis)), 1e-10 * frobenius_norm(t));
            }
            // projection idempotence
            const Matrix twice = apply_linear_projection(phi, b.basis);
            for (std::size_t z = 0; z < phi.values().size(); ++z) EXPECT_NEAR(twice.values()[z], phi.values()[z], 1e-12);
            // Frobenius split
            const Matrix kept = t - phi;
            EXPECT_NEAR(frobenius_norm_sq(kept) + frobenius_norm_sq(phi), frobenius_norm_sq(t), 1e-9 * frobenius_norm_sq(t));
        }
    }
}

TEST(LinearBasis, LambdaZeroScoreMatrixIsPsd) {
    CounterRng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const auto lc = random_linear_case(rng, 2 + rng.below(3), 2 + rng.below(5), 2 + rng.below(5));
        const auto e = sym_eig(linear_score_matrix(lc.k, lc.t, lc.x, 0.0));
        for (double v : e.values) EXPECT_GE(v, -1e-10);
    }
}

TEST(LinearBasis, BudgetWiderThanLayerRemovesEverything) {
    CounterRng rng(6);
    const auto lc = random_linear_case(rng, 2, 3, 2);
    const auto b = linear_removal_basis(lc.k, lc.t, lc.x, cfg_of(0.0, 5));
    EXPECT_LE(b.basis.cols(), 2u);
}

TEST(LinearBasis, ObjectiveValueMatchesDefinition) {
    CounterRng rng(7);
    for (int trial = 0; trial < 30; ++trial) {
        const auto lc = random_linear_case(rng, 2 + rng.below(3), 1 + rng.below(6), 1 + rng.below(6));
        const std::size_t d = lc.t[0].cols();
        const Matrix b = oracle::random_orthonormal(rng, d, 1 + rng.below(d));
        const double lambda = rng.uniform(0.0, 1.5);
        TrimOperator op{lc.k, "w", LinearBasis{b, {}}};
        ObjectiveInputs in{lc.t, {}, lc.x};
        const double want = oracle::linear_objective(lc.k, lc.t, lc.x, b, lambda);
        EXPECT_NEAR(objective_value(SlotKind::Linear, lc.k, op, in, lambda), want, 1e-10 * std::max(1.0, std::abs(want)));
    }
    TrimOperator empty{0, "w", LinearBasis{Matrix(2, 0), {}}};
    EXPECT_EQ(objective_value(SlotKind::Linear, 0, empty, ObjectiveInputs{}, 0.5), 0.0);
}

TEST(ScaleMask, HandExample) {
    const std::vector<std::vector<double>> t{{0, 0, 0}, {3, -2, 1}};
    const std::vector<Matrix> x{Matrix(1, 3, {1, 1, 1}), Matrix(1, 3, {0, 0, 0})};
    const auto m = scale_mask(0, t, x, cfg_of(0.5, 1));
    EXPECT_EQ(m.scores, (std::vector<double>{9, 4, 1}));
    EXPECT_EQ(m.mask, bits({1, 0, 0}));
}

TEST(ScaleMask, ZeroVectorsGiveEmptyMask) {
    const std::vector<std::vector<double>> t{{1, 2}, {0, 0}};
    const std::vector<Matrix> x{Matrix(2, 2, 1.0), Matrix(2, 2, 1.0)};
    EXPECT_EQ(scale_mask(0, t, x, cfg_of(0.5, 2)).popcount(), 0u);
}

TEST(ScaleMask, MissingTraceThrows) {
    const std::vector<std::vector<double>> t{{1, 2}, {3, 4}};
    const std::vector<Matrix> x{Matrix(2, 2, 1.0)};
    EXPECT_THROW(scale_mask(0, t, x, cfg_of(0.5, 1)), std::invalid_argument);
}

TEST(ScaleMask, MatchesExhaustiveSearch) {
    CounterRng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t K = 2 + rng.below(3), d = 1 + rng.below(10), c = rng.below(4), k = rng.below(K);
        const double lambda = rng.uniform(0.0, 1.2);
        std::vector<std::vector<double>> t;
        std::vector<Matrix> x;
        for (std::size_t i = 0; i < K; ++i) {
            t.push_back(random_vector(rng, d));
            x.push_back(random_matrix(rng, 1 + rng.below(4), d));
        }
        const auto m = scale_mask(k, t, x, cfg_of(lambda, c));
        const auto best = oracle::best_mask(d, c, [&](const auto& mm) { return oracle::scale_objective(k, t, x, mm, lambda); });
        EXPECT_EQ(m.mask, best.mask) << trial;
        EXPECT_NEAR(oracle::scale_objective(k, t, x, m.mask, lambda), best.value, 1e-9 * std::max(1.0, best.value));
    }
}

TEST(ShiftMask, Examples) {
    const std::vector<std::vector<double>> t{{0, 0, 0}, {1, -5, 2}};
    const auto m = shift_mask(0, t, cfg_of(0.5, 2));
    EXPECT_EQ(m.scores, (std::vector<double>{1, 25, 4}));
    EXPECT_EQ(m.mask, bits({0, 1, 1}));
    EXPECT_EQ(shift_mask(0, t, cfg_of(0.5, 0)).mask, bits({0, 0, 0}));
    EXPECT_THROW(shift_mask(0, t, cfg_of(1.0, 2)), std::invalid_argument);
}

TEST(ShiftMask, LambdaFreeAndExhaustive) {
    CounterRng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t K = 2 + rng.below(3), d = 1 + rng.below(10), c = rng.below(4), k = rng.below(K);
        std::vector<std::vector<double>> t;
        for (std::size_t i = 0; i < K; ++i) t.push_back(random_vector(rng, d));
        const auto lo = shift_mask(k, t, cfg_of(0.1, c)), hi = shift_mask(k, t, cfg_of(0.9, c));
        EXPECT_EQ(lo.mask, hi.mask);
        const auto best = oracle::best_mask(d, c, [&](const auto& mm) { return oracle::shift_objective(k, t, mm); });
        EXPECT_EQ(lo.mask, best.mask);
    }
}

TEST(ShiftMask, TiesBreakByAscendingIndex) {
    const std::vector<std::vector<double>> t{{0, 0, 0, 0}, {1, 2, -2, 2}};
    EXPECT_EQ(shift_mask(0, t, cfg_of(0.5, 2)).mask, bits({0, 1, 1, 0}));
}

TEST(ApplyMask, Examples) {
    const std::vector<double> t{3, -2, 1};
    EXPECT_EQ(apply_mask(t, bits({0, 0, 0})), t);
    EXPECT_EQ(apply_mask(t, bits({1, 0, 0})), (std::vector<double>{0, -2, 1}));
    EXPECT_THROW(apply_mask(t, bits({1, 0})), std::invalid_argument);
}

TEST(ApplyMask, CountsAndIdempotence) {
    CounterRng rng(10);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t d = 1 + rng.below(12);
        const auto t = random_vector(rng, d);
        std::vector<std::uint8_t> m(d);
        for (auto& b : m) b = rng.below(2);
        const auto once = apply_mask(t, m);
        EXPECT_EQ(apply_mask(once, m), once);
        const auto zeros = static_cast<std::size_t>(std::count(once.begin(), once.end(), 0.0));
        EXPECT_EQ(zeros, static_cast<std::size_t>(std::count(m.begin(), m.end(), 1)));
    }
}

TEST(Objective, MaskDefinitionsAndKindMismatch) {
    CounterRng rng(11);
    const std::size_t d = 5;
    std::vector<std::vector<double>> t{random_vector(rng, d), random_vector(rng, d), random_vector(rng, d)};
    std::vector<Matrix> x{random_matrix(rng, 3, d), random_matrix(rng, 3, d), random_matrix(rng, 3, d)};
    const auto m = bits({1, 0, 1, 1, 0});
    TrimOperator op{1, "s", RemovalMask{m, {}}};
    ObjectiveInputs in{{}, t, x};
    EXPECT_NEAR(objective_value(SlotKind::Scale, 1, op, in, 0.3), oracle::scale_objective(1, t, x, m, 0.3), 1e-10);
    // balanced counts: (n - λn) times the λ-free shift score
    EXPECT_NEAR(objective_value(SlotKind::Shift, 1, op, in, 0.3), 3 * 0.7 * oracle::shift_objective(1, t, m), 1e-10);
    TrimOperator zero{1, "s", RemovalMask{bits({0, 0, 0, 0, 0}), {}}};
    EXPECT_EQ(objective_value(SlotKind::Scale, 1, zero, in, 0.3), 0.0);
    EXPECT_THROW(objective_value(SlotKind::Linear, 1, op, in, 0.3), std::invalid_argument);
    TrimOperator basis{1, "w", LinearBasis{Matrix(d, 0), {}}};
    EXPECT_THROW(objective_value(SlotKind::Shift, 1, basis, in, 0.3), std::invalid_argument);
}

TEST(Persistence, OperatorsRoundTrip) {
    CounterRng rng(12);
    std::vector<TrimOperator> ops;
    ops.push_back({0, "layer0.weight", LinearBasis{oracle::random_orthonormal(rng, 4, 2), {}}});
    ops.push_back({1, "layer0.weight", LinearBasis{Matrix(4, 0), {}}});
    ops.push_back({1, "layer1.scale", RemovalMask{bits({0, 1, 1, 0}), {}}});
    const auto c = operators_to_checkpoint(ops);
    EXPECT_EQ(c.size(), 2u);  // the empty basis has no tensor
    for (const auto& e : c.entries()) EXPECT_EQ(e.kind, ParamKind::Frozen);
    EXPECT_EQ(c.tensor("task1:layer1.scale").dtype(), DType::U32);

    auto back = operators_from_checkpoint(c);
    ASSERT_EQ(back.size(), 3u);
    auto find = [&](std::size_t task, const std::string& slot) {
        for (const auto& op : back)
            if (op.task == task && op.slot == slot) return op;
        throw std::runtime_error("operator missing");
    };
    EXPECT_EQ(find(0, "layer0.weight").basis().basis, ops[0].basis().basis);
    EXPECT_EQ(find(1, "layer0.weight").basis().basis.rows(), 4u);
    EXPECT_EQ(find(1, "layer0.weight").rank(), 0u);
    EXPECT_EQ(find(1, "layer1.scale").mask().mask, ops[2].mask().mask);
}
