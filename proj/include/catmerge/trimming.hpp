#pragma once

// Conflict-aware trimming operators.
//
// For a protected task k and one parameter slot, an operator removes from
// every other task's vector T_i the components that shift task k's features
// the most, traded off (weight lambda) against how much the removal changes
// task i's own features:
//
//   linear weight  Φ(T) = T - T·B·Bᵀ, B = top-c eigenvectors of
//                  G = Σ_{i≠k} T_iᵀ (X_kᵀX_k - λ X_iᵀX_i) T_i
//   scale          Φ(T) = T - T∘m, m = top-c of
//                  g_z = Σ_{i≠k} (Σ_{x∈X_k} (x_z T_iz)² - λ Σ_{x∈X_i} (x_z T_iz)²)
//   shift          Φ(T) = T - T∘m, m = top-c of g_z = Σ_{i≠k} T_iz²
//                  (valid for balanced exemplar counts and 0 <= λ < 1)

#include "catmerge/linalg.hpp"

#include <algorithm>
#include <numeric>
#include <optional>
#include <span>
#include <variant>

namespace catmerge {

struct TrimConfig {
    double lambda = 0.5;
    std::size_t c = 2;
    bool positive_only = true;

    void validate() const {
        if (!(lambda >= 0) || !std::isfinite(lambda)) throw std::invalid_argument("trim lambda must be finite and >= 0");
    }
};

enum class SlotKind { Linear, Scale, Shift };

inline std::string_view slot_kind_name(SlotKind k) {
    switch (k) {
        case SlotKind::Linear: return "linear";
        case SlotKind::Scale: return "scale";
        case SlotKind::Shift: return "shift";
    }
    return "?";
}

/// Column-orthonormal removal basis, d_{l+1} x c'.
struct LinearBasis {
    Matrix basis;
    std::vector<double> eigenvalues;  ///< full descending spectrum of G
};

/// Binary removal mask over d_l entries.
struct RemovalMask {
    std::vector<std::uint8_t> mask;
    std::vector<double> scores;  ///< g_z per entry

    std::size_t popcount() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }
};

struct TrimOperator {
    std::size_t task = 0;  ///< protected task k
    std::string slot;
    std::variant<LinearBasis, RemovalMask> op;

    bool is_basis() const { return std::holds_alternative<LinearBasis>(op); }
    const LinearBasis& basis() const { return std::get<LinearBasis>(op); }
    const RemovalMask& mask() const { return std::get<RemovalMask>(op); }
    /// c': number of basis columns or mask ones.
    std::size_t rank() const { return is_basis() ? basis().basis.cols() : mask().popcount(); }
};

namespace detail {

inline void check_task_inputs(std::size_t k, std::size_t n_vectors, std::size_t n_traces, bool need_traces) {
    if (n_vectors < 2) throw std::invalid_argument("trimming needs at least two task vectors");
    if (k >= n_vectors) throw std::invalid_argument("protected task index out of range");
    if (need_traces && n_traces != n_vectors)
        throw std::invalid_argument("missing trace: got " + std::to_string(n_traces) + " traces for " + std::to_string(n_vectors) + " tasks");
}

/// Indices of the top-c scores, descending, ties by ascending index. With
/// `positive_only`, scores <= 0 are never taken.
inline std::vector<std::uint8_t> top_c_mask(const std::vector<double>& scores, std::size_t c, bool positive_only) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<std::uint8_t> mask(scores.size(), 0);
    for (std::size_t j = 0; j < std::min(c, order.size()); ++j) {
        if (positive_only && !(scores[order[j]] > 0.0)) break;
        mask[order[j]] = 1;
    }
    return mask;
}

}  // namespace detail

/// G = Σ_{i≠k} T_iᵀ (X_kᵀX_k - λ X_iᵀX_i) T_i, assembled as Σ gram(X_k T_i) - λ gram(X_i T_i).
inline Matrix linear_score_matrix(std::size_t k, std::span<const Matrix> task_vectors, std::span<const Matrix> traces,
                                  double lambda) {
    detail::check_task_inputs(k, task_vectors.size(), traces.size(), true);
    const std::size_t d_in = task_vectors[k].rows(), d_out = task_vectors[k].cols();
    Matrix g(d_out, d_out);
    for (std::size_t i = 0; i < task_vectors.size(); ++i) {
        const auto& t = task_vectors[i];
        if (t.rows() != d_in || t.cols() != d_out) throw std::invalid_argument("task vector shapes differ across tasks");
        if (traces[i].cols() != d_in)
            throw std::invalid_argument("trace width " + std::to_string(traces[i].cols()) + " != weight input dim " + std::to_string(d_in));
        if (i == k) continue;
        g += gram(matmul(traces[k], t));
        if (lambda != 0.0) g -= lambda * gram(matmul(traces[i], t));
    }
    return g;
}

inline LinearBasis linear_removal_basis(std::size_t k, std::span<const Matrix> task_vectors, std::span<const Matrix> traces,
                                        const TrimConfig& cfg) {
    cfg.validate();
    const auto g = linear_score_matrix(k, task_vectors, traces, cfg.lambda);
    auto eig = sym_eig(g);
    LinearBasis out;
    // A budget wider than the layer removes at most every direction.
    out.basis = top_c_eigvecs(eig, std::min(cfg.c, g.rows()), cfg.positive_only);
    out.eigenvalues = std::move(eig.values);
    return out;
}

/// T - T·B·Bᵀ. An empty basis returns T unchanged.
inline Matrix apply_linear_projection(const Matrix& t, const Matrix& basis) {
    if (basis.cols() == 0) {
        if (basis.rows() != 0 && basis.rows() != t.cols()) throw std::invalid_argument("basis rows do not match task vector columns");
        return t;
    }
    if (basis.rows() != t.cols())
        throw std::invalid_argument("basis has " + std::to_string(basis.rows()) + " rows, task vector has " + std::to_string(t.cols()) + " columns");
    const Matrix tb = matmul(t, basis);
    return t - matmul(tb, basis.transpose());
}

/// Per-entry scores g_z for a scale slot.
inline std::vector<double> scale_scores(std::size_t k, std::span<const std::vector<double>> task_vectors,
                                        std::span<const Matrix> traces, double lambda) {
    detail::check_task_inputs(k, task_vectors.size(), traces.size(), true);
    const std::size_t d = task_vectors[k].size();
    for (std::size_t i = 0; i < traces.size(); ++i) {
        if (task_vectors[i].size() != d) throw std::invalid_argument("task vector lengths differ across tasks");
        if (traces[i].cols() != d) throw std::invalid_argument("trace width does not match scale dimension");
    }
    auto sq_col = [](const Matrix& x, std::size_t z) {
        double s = 0.0;
        for (std::size_t r = 0; r < x.rows(); ++r) s += x(r, z) * x(r, z);
        return s;
    };
    std::vector<double> g(d, 0.0);
    for (std::size_t z = 0; z < d; ++z) {
        const double xk = sq_col(traces[k], z);
        for (std::size_t i = 0; i < task_vectors.size(); ++i) {
            if (i == k) continue;
            const double t2 = task_vectors[i][z] * task_vectors[i][z];
            g[z] += xk * t2 - lambda * sq_col(traces[i], z) * t2;
        }
    }
    return g;
}

inline RemovalMask scale_mask(std::size_t k, std::span<const std::vector<double>> task_vectors, std::span<const Matrix> traces,
                              const TrimConfig& cfg) {
    cfg.validate();
    RemovalMask out;
    out.scores = scale_scores(k, task_vectors, traces, cfg.lambda);
    out.mask = detail::top_c_mask(out.scores, cfg.c, cfg.positive_only);
    return out;
}

/// g_z = Σ_{i≠k} T_iz². Lambda only gates validity: the balanced-count
/// derivation multiplies the objective by (1 - λ), so λ >= 1 is rejected.
inline RemovalMask shift_mask(std::size_t k, std::span<const std::vector<double>> task_vectors, const TrimConfig& cfg) {
    cfg.validate();
    if (cfg.lambda >= 1.0)
        throw std::invalid_argument("shift trimming needs lambda < 1 (got " + std::to_string(cfg.lambda) + ")");
    detail::check_task_inputs(k, task_vectors.size(), 0, false);
    const std::size_t d = task_vectors[k].size();
    RemovalMask out;
    out.scores.assign(d, 0.0);
    for (std::size_t i = 0; i < task_vectors.size(); ++i) {
        if (task_vectors[i].size() != d) throw std::invalid_argument("task vector lengths differ across tasks");
        if (i == k) continue;
        for (std::size_t z = 0; z < d; ++z) out.scores[z] += task_vectors[i][z] * task_vectors[i][z];
    }
    // Zero scores carry no conflict, so they are never selected.
    out.mask = detail::top_c_mask(out.scores, cfg.c, true);
    return out;
}

/// T - T∘m: entries under the mask become zero, the rest are untouched.
inline std::vector<double> apply_mask(const std::vector<double>& t, const std::vector<std::uint8_t>& mask) {
    if (t.size() != mask.size())
        throw std::invalid_argument("mask length " + std::to_string(mask.size()) + " != vector length " + std::to_string(t.size()));
    std::vector<double> out(t);
    for (std::size_t z = 0; z < t.size(); ++z)
        if (mask[z]) out[z] = 0.0;
    return out;
}

/// Inputs for objective_value; which fields are needed depends on the kind.
struct ObjectiveInputs {
    std::span<const Matrix> linear_vectors;          ///< linear: per-task [d_l, d_{l+1}]
    std::span<const std::vector<double>> vectors;    ///< scale/shift: per-task [d]
    std::span<const Matrix> traces;                  ///< linear/scale features; shift uses row counts only
};

/// The maximization form of the layer objective for a given operator:
///   linear: Σ_{i≠k} ‖X_k T_i B Bᵀ‖² - λ‖X_i T_i B Bᵀ‖²
///   scale:  Σ_{i≠k} Σ_{x_k}‖x_k∘T_i∘m‖² - λ Σ_{x_i}‖x_i∘T_i∘m‖²
///   shift:  Σ_{i≠k} (n_k - λ n_i) ‖T_i∘m‖²   (n = trace rows, 1 when no traces given)
inline double objective_value(SlotKind kind, std::size_t k, const TrimOperator& op, const ObjectiveInputs& in, double lambda) {
    double total = 0.0;
    if (kind == SlotKind::Linear) {
        if (!op.is_basis()) throw std::invalid_argument("objective_value: linear slot needs a basis operator");
        const auto& b = op.basis().basis;
        if (b.cols() == 0) return 0.0;
        const Matrix bbt = matmul(b, b.transpose());
        for (std::size_t i = 0; i < in.linear_vectors.size(); ++i) {
            if (i == k) continue;
            const Matrix proj = matmul(in.linear_vectors[i], bbt);
            total += frobenius_norm_sq(matmul(in.traces[k], proj)) - lambda * frobenius_norm_sq(matmul(in.traces[i], proj));
        }
        return total;
    }
    if (op.is_basis()) throw std::invalid_argument("objective_value: scale/shift slot needs a mask operator");
    const auto& m = op.mask().mask;
    for (std::size_t i = 0; i < in.vectors.size(); ++i) {
        if (i == k) continue;
        const auto& t = in.vectors[i];
        if (kind == SlotKind::Scale) {
            for (std::size_t r = 0; r < in.traces[k].rows(); ++r)
                for (std::size_t z = 0; z < t.size(); ++z)
                    if (m[z]) total += std::pow(in.traces[k](r, z) * t[z], 2);
            for (std::size_t r = 0; r < in.traces[i].rows(); ++r)
                for (std::size_t z = 0; z < t.size(); ++z)
                    if (m[z]) total -= lambda * std::pow(in.traces[i](r, z) * t[z], 2);
        } else {
            const double nk = in.traces.empty() ? 1.0 : static_cast<double>(in.traces[k].rows());
            const double ni = in.traces.empty() ? 1.0 : static_cast<double>(in.traces[i].rows());
            double sq = 0.0;
            for (std::size_t z = 0; z < t.size(); ++z)
                if (m[z]) sq += t[z] * t[z];
            total += (nk - lambda * ni) * sq;
        }
    }
    return total;
}

// ---------------------------------------------------------------------------
// Persistence of operator sets as MTC1 checkpoints.
//
// Each non-empty operator becomes a Frozen tensor named "task{k}:{slot}":
// the basis as [d, c'] f64, the mask as [d] u32. Meta entry with the same
// name records "basis <d> <c'>" or "mask <d> <popcount>", which also covers
// empty bases that have no tensor.

inline std::string operator_key(const TrimOperator& op) { return "task" + std::to_string(op.task) + ":" + op.slot; }

inline Checkpoint operators_to_checkpoint(const std::vector<TrimOperator>& ops) {
    Checkpoint c;
    for (const auto& op : ops) {
        const auto key = operator_key(op);
        if (op.is_basis()) {
            const auto& b = op.basis().basis;
            c.meta()[key] = "basis " + std::to_string(b.rows()) + " " + std::to_string(b.cols());
            if (!b.empty()) c.add(key, ParamKind::Frozen, b.to_tensor());
        } else {
            const auto& m = op.mask().mask;
            c.meta()[key] = "mask " + std::to_string(m.size()) + " " + std::to_string(op.mask().popcount());
            c.add(key, ParamKind::Frozen, Tensor(Shape{m.size()}, std::vector<double>(m.begin(), m.end()), DType::U32));
        }
    }
    return c;
}

inline std::vector<TrimOperator> operators_from_checkpoint(const Checkpoint& c) {
    std::vector<TrimOperator> out;
    for (const auto& [key, desc] : c.meta()) {
        if (key.rfind("task", 0) != 0) continue;
        const auto colon = key.find(':');
        if (colon == std::string::npos) continue;
        TrimOperator op;
        op.task = std::stoul(key.substr(4, colon - 4));
        op.slot = key.substr(colon + 1);
        std::istringstream in(desc);
        std::string type;
        std::size_t d = 0, r = 0;
        in >> type >> d >> r;
        if (type == "basis") {
            LinearBasis b;
            b.basis = r == 0 ? Matrix(d, 0) : Matrix::from_tensor(c.tensor(key));
            op.op = std::move(b);
        } else if (type == "mask") {
            RemovalMask m;
            const auto& t = c.tensor(key);
            m.mask.assign(t.values().begin(), t.values().end());
            op.op = std::move(m);
        } else {
            throw std::invalid_argument("unknown operator type '" + type + "' for " + key);
        }
        out.push_back(std::move(op));
    }
    return out;
}

}  // namespace catmerge
