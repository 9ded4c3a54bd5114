#pragma once

// Task-vector algebra and merge strategies.

#include "catmerge/network.hpp"
#include "catmerge/parallel.hpp"
#include "catmerge/trimming.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>

namespace catmerge {

/// T_k = W_k - W_0 for one task.
struct TaskVector {
    std::size_t task = 0;
    Checkpoint delta;
};

enum class MergeMethod { Average, TaskArithmetic, MagnitudeTrim, Cat, Lsq };

inline std::string_view method_name(MergeMethod m) {
    switch (m) {
        case MergeMethod::Average: return "average";
        case MergeMethod::TaskArithmetic: return "ta";
        case MergeMethod::MagnitudeTrim: return "ties-mag";
        case MergeMethod::Cat: return "cat";
        case MergeMethod::Lsq: return "lsq";
    }
    return "?";
}

inline MergeMethod parse_method(std::string_view s) {
    if (s == "average") return MergeMethod::Average;
    if (s == "ta" || s == "task_arithmetic") return MergeMethod::TaskArithmetic;
    if (s == "ties-mag" || s == "magnitude_trim") return MergeMethod::MagnitudeTrim;
    if (s == "cat") return MergeMethod::Cat;
    if (s == "lsq") return MergeMethod::Lsq;
    throw std::invalid_argument("unknown merge method '" + std::string(s) + "'");
}

struct MergeConfig {
    MergeMethod method = MergeMethod::Cat;
    double alpha = 1.0;
    TrimConfig trim;
    double magnitude_keep_fraction = 0.2;

    void validate() const {
        if (!std::isfinite(alpha)) throw std::invalid_argument("alpha must be finite");
        trim.validate();
        if (!(magnitude_keep_fraction > 0.0 && magnitude_keep_fraction <= 1.0))
            throw std::invalid_argument("magnitude_keep_fraction must lie in (0, 1]");
    }
};

inline TaskVector compute_task_vector(const Checkpoint& w0, const Checkpoint& wk, std::size_t task = 0) {
    require_aligned(w0, wk, "compute_task_vector");
    Checkpoint d;
    for (std::size_t i = 0; i < w0.size(); ++i) {
        const auto& a = w0.entries()[i];
        const auto& b = wk.entries()[i];
        std::vector<double> v(a.tensor.numel());
        for (std::size_t j = 0; j < v.size(); ++j) v[j] = b.tensor[j] - a.tensor[j];
        d.add(a.name, a.kind, Tensor(a.tensor.shape(), std::move(v), a.tensor.dtype()));
    }
    return {task, std::move(d)};
}

namespace detail {

inline void require_all_aligned(const Checkpoint& w0, const std::vector<TaskVector>& tvs, std::string_view what) {
    for (const auto& tv : tvs)
        if (!check_aligned(w0, tv.delta))
            throw std::invalid_argument(std::string(what) + ": task vector " + std::to_string(tv.task) + " is not aligned to the base checkpoint");
}

}  // namespace detail

/// W_0 + α Σ_k T_k; per element the sum runs in task-list order, α is applied once.
inline Checkpoint merge_task_arithmetic(const Checkpoint& w0, const std::vector<TaskVector>& tvs, double alpha) {
    detail::require_all_aligned(w0, tvs, "merge_task_arithmetic");
    Checkpoint out;
    for (std::size_t s = 0; s < w0.size(); ++s) {
        const auto& base = w0.entries()[s];
        std::vector<double> v(base.tensor.numel());
        for (std::size_t j = 0; j < v.size(); ++j) {
            double acc = 0.0;
            for (const auto& tv : tvs) acc += tv.delta.entries()[s].tensor[j];
            v[j] = base.tensor[j] + alpha * acc;
        }
        out.add(base.name, base.kind, Tensor(base.tensor.shape(), std::move(v), base.tensor.dtype()));
    }
    out.meta() = w0.meta();
    return out;
}

/// Element-wise mean of mutually aligned checkpoints.
inline Checkpoint merge_average(const std::vector<Checkpoint>& ckpts) {
    if (ckpts.empty()) throw std::invalid_argument("merge_average: no checkpoints");
    for (const auto& c : ckpts) require_aligned(ckpts.front(), c, "merge_average");
    const double k = static_cast<double>(ckpts.size());
    Checkpoint out;
    for (std::size_t s = 0; s < ckpts.front().size(); ++s) {
        const auto& first = ckpts.front().entries()[s];
        std::vector<double> v(first.tensor.numel(), 0.0);
        for (std::size_t j = 0; j < v.size(); ++j) {
            double acc = 0.0;
            for (const auto& c : ckpts) acc += c.entries()[s].tensor[j];
            v[j] = acc / k;
        }
        out.add(first.name, first.kind, Tensor(first.tensor.shape(), std::move(v), first.tensor.dtype()));
    }
    out.meta() = ckpts.front().meta();
    return out;
}

/// Number of entries a magnitude trim keeps out of `total`.
inline std::size_t magnitude_keep_count(std::size_t total, double keep_fraction) {
    // The small offset keeps exact fractions such as 0.3 * 10 from flooring to 2.
    return std::min(total, static_cast<std::size_t>(std::floor(keep_fraction * static_cast<double>(total) + 1e-9)));
}

/// Keeps the top-|v| entries of one task vector (non-frozen slots, ties by
/// position) and zeroes the rest.
inline TaskVector magnitude_trim(const TaskVector& tv, double keep_fraction) {
    struct Ref {
        std::size_t slot, idx;
        double mag;
    };
    std::vector<Ref> refs;
    for (std::size_t s = 0; s < tv.delta.size(); ++s) {
        const auto& e = tv.delta.entries()[s];
        if (e.kind == ParamKind::Frozen) continue;
        for (std::size_t j = 0; j < e.tensor.numel(); ++j) refs.push_back({s, j, std::abs(e.tensor[j])});
    }
    const std::size_t keep = magnitude_keep_count(refs.size(), keep_fraction);
    std::stable_sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) { return a.mag > b.mag; });
    TaskVector out = tv;
    for (std::size_t r = keep; r < refs.size(); ++r) out.delta.entries()[refs[r].slot].tensor[refs[r].idx] = 0.0;
    return out;
}

inline Checkpoint merge_magnitude_trim(const Checkpoint& w0, const std::vector<TaskVector>& tvs, double keep_fraction, double alpha) {
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw std::invalid_argument("keep_fraction must lie in (0, 1]");
    detail::require_all_aligned(w0, tvs, "merge_magnitude_trim");
    std::vector<TaskVector> trimmed;
    trimmed.reserve(tvs.size());
    for (const auto& tv : tvs) trimmed.push_back(magnitude_trim(tv, keep_fraction));
    return merge_task_arithmetic(w0, trimmed, alpha);
}

inline SlotKind slot_kind_for(ParamKind k) {
    switch (k) {
        case ParamKind::LinearWeight: return SlotKind::Linear;
        case ParamKind::Scale: return SlotKind::Scale;
        default: return SlotKind::Shift;
    }
}

/// Φ applied to one slot tensor of another task's vector.
inline Tensor apply_operator(const TrimOperator& op, const Tensor& t) {
    if (op.is_basis()) return apply_linear_projection(Matrix::from_tensor(t), op.basis().basis).to_tensor();
    return Tensor(t.shape(), apply_mask(t.values(), op.mask().mask), DType::F64);
}

/// Edit phase: operators are applied in ascending protected-task order; each
/// operator of task k edits the slot of every task vector i != k, ascending i.
/// Projections do not commute, so this order is part of the contract.
inline void edit_task_vectors(std::vector<TaskVector>& tvs, std::vector<TrimOperator> ops) {
    std::stable_sort(ops.begin(), ops.end(), [](const TrimOperator& a, const TrimOperator& b) { return a.task < b.task; });
    std::vector<std::size_t> order(tvs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return tvs[a].task < tvs[b].task; });
    for (const auto& op : ops) {
        if (op.rank() == 0) continue;
        for (std::size_t i : order) {
            if (tvs[i].task == op.task) continue;
            auto& e = tvs[i].delta.entry(op.slot);
            if (e.kind == ParamKind::Frozen) continue;
            e.tensor = Tensor(e.tensor.shape(), apply_operator(op, e.tensor).values(), e.tensor.dtype());
        }
    }
}

/// Merge output plus the operators and a JSON report.
struct MergeResult {
    Checkpoint merged;
    std::vector<TrimOperator> operators;
    nlohmann::ordered_json report;
};

namespace detail {

inline void check_exemplars(const ModelSpec& spec, const std::vector<TaskVector>& tvs, const std::vector<Batch>& exemplars) {
    if (tvs.empty()) throw std::invalid_argument("merge needs at least one task vector");
    if (exemplars.size() != tvs.size())
        throw std::invalid_argument("missing exemplars: " + std::to_string(exemplars.size()) + " sets for " + std::to_string(tvs.size()) + " tasks");
    for (const auto& b : exemplars) {
        if (b.x.rank() != 2 || b.x.cols() != spec.input_dim) throw std::invalid_argument("exemplar width does not match model input_dim");
        if (b.size() != exemplars.front().size())
            throw std::invalid_argument("exemplar counts differ across tasks (" + std::to_string(b.size()) + " vs " +
                                        std::to_string(exemplars.front().size()) + ")");
    }
}

/// Feature traces of each task's exemplars under that task's fine-tuned parameters W_0 + T_k.
inline std::vector<FeatureTrace> collect_traces(const ModelSpec& spec, const Checkpoint& w0, const std::vector<TaskVector>& tvs,
                                                const std::vector<Batch>& exemplars) {
    std::vector<FeatureTrace> traces(tvs.size());
    parallel_for(tvs.size(), [&](std::size_t k) { traces[k] = forward_collect(spec, add(w0, tvs[k].delta), exemplars[k]).second; });
    return traces;
}

inline std::vector<double> head_of(const std::vector<double>& v, std::size_t n) {
    return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size()))};
}

}  // namespace detail

/// All operators for every (protected task, slot), computed from the original
/// task vectors and traces. Frozen slots get none.
inline std::vector<TrimOperator> compute_operators(const Checkpoint& w0, const std::vector<TaskVector>& tvs,
                                                   const std::vector<FeatureTrace>& traces, const TrimConfig& cfg) {
    const std::size_t K = tvs.size();
    if (K < 2) return {};
    struct Job {
        std::size_t k, slot;
    };
    std::vector<Job> jobs;
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t s = 0; s < w0.size(); ++s)
            if (w0.entries()[s].kind != ParamKind::Frozen) jobs.push_back({k, s});

    TrimConfig shift_cfg = cfg;
    shift_cfg.lambda = std::min(cfg.lambda, std::nextafter(1.0, 0.0));

    std::vector<TrimOperator> ops(jobs.size());
    parallel_for(jobs.size(), [&](std::size_t j) {
        const auto [k, s] = jobs[j];
        const auto& entry = w0.entries()[s];
        TrimOperator op;
        op.task = tvs[k].task;
        op.slot = entry.name;
        switch (slot_kind_for(entry.kind)) {
            case SlotKind::Linear: {
                std::vector<Matrix> vecs, xs;
                for (std::size_t i = 0; i < K; ++i) {
                    vecs.push_back(Matrix::from_tensor(tvs[i].delta.entries()[s].tensor));
                    xs.push_back(traces[i].at(entry.name));
                }
                op.op = linear_removal_basis(k, vecs, xs, cfg);
                break;
            }
            case SlotKind::Scale: {
                std::vector<std::vector<double>> vecs;
                std::vector<Matrix> xs;
                for (std::size_t i = 0; i < K; ++i) {
                    vecs.push_back(tvs[i].delta.entries()[s].tensor.values());
                    xs.push_back(traces[i].at(entry.name));
                }
                op.op = scale_mask(k, vecs, xs, cfg);
                break;
            }
            case SlotKind::Shift: {
                std::vector<std::vector<double>> vecs;
                for (std::size_t i = 0; i < K; ++i) vecs.push_back(tvs[i].delta.entries()[s].tensor.values());
                op.op = shift_mask(k, vecs, shift_cfg);
                break;
            }
        }
        ops[j] = std::move(op);
    });
    return ops;
}

/// Conflict-aware trimming then Task Arithmetic:
///   1. traces of each task's exemplars under W_0 + T_k;
///   2. every operator computed from the unedited vectors;
///   3. edit phase (see edit_task_vectors);
///   4. W_0 + α Σ edited T_k.
inline MergeResult merge_cat(const ModelSpec& spec, const Checkpoint& w0, const std::vector<TaskVector>& tvs,
                             const std::vector<Batch>& exemplars, const MergeConfig& cfg) {
    cfg.validate();
    check_params(spec, w0);
    detail::require_all_aligned(w0, tvs, "merge_cat");
    detail::check_exemplars(spec, tvs, exemplars);

    const auto traces = detail::collect_traces(spec, w0, tvs, exemplars);
    MergeResult res;
    res.operators = compute_operators(w0, tvs, traces, cfg.trim);

    std::vector<TaskVector> edited = tvs;
    edit_task_vectors(edited, res.operators);
    res.merged = merge_task_arithmetic(w0, edited, cfg.alpha);

    auto& rep = res.report;
    rep["method"] = "cat";
    rep["alpha"] = cfg.alpha;
    rep["lambda"] = cfg.trim.lambda;
    rep["c"] = cfg.trim.c;
    rep["positive_only"] = cfg.trim.positive_only;
    rep["tasks"] = tvs.size();
    rep["exemplars_per_task"] = exemplars.front().size();
    rep["operators"] = nlohmann::ordered_json::array();
    for (const auto& op : res.operators) {
        nlohmann::ordered_json o;
        o["task"] = op.task;
        o["slot"] = op.slot;
        o["kind"] = op.is_basis() ? "basis" : "mask";
        o["rank"] = op.rank();
        if (op.is_basis()) {
            o["dim"] = op.basis().basis.rows();
            o["spectrum"] = detail::head_of(op.basis().eigenvalues, cfg.trim.c + 4);
        } else {
            auto sorted = op.mask().scores;
            std::stable_sort(sorted.begin(), sorted.end(), std::greater<>());
            o["dim"] = op.mask().mask.size();
            o["spectrum"] = detail::head_of(sorted, cfg.trim.c + 4);
        }
        rep["operators"].push_back(std::move(o));
    }
    return res;
}

/// Closed-form least-squares merge of the per-slot layer outputs:
///   linear: (Σ X_kᵀX_k) T = Σ X_kᵀX_k T_k, solved as mean(T_k) plus the
///           minimum-norm correction, so directions no exemplar excites keep
///           the plain mean;
///   scale:  T_z = Σ_k Σ_x x_z² T_kz / Σ_k Σ_x x_z² (plain mean where the denominator is 0);
///   shift:  mean of T_k (balanced exemplar counts).
/// Frozen slots take the Task Arithmetic sum. Returns W_0 + α T.
inline Checkpoint merge_lsq(const ModelSpec& spec, const Checkpoint& w0, const std::vector<TaskVector>& tvs,
                            const std::vector<Batch>& exemplars, double alpha) {
    if (!std::isfinite(alpha)) throw std::invalid_argument("alpha must be finite");
    check_params(spec, w0);
    detail::require_all_aligned(w0, tvs, "merge_lsq");
    detail::check_exemplars(spec, tvs, exemplars);
    const auto traces = detail::collect_traces(spec, w0, tvs, exemplars);
    const std::size_t K = tvs.size();
    const double kd = static_cast<double>(K);

    Checkpoint out;
    for (std::size_t s = 0; s < w0.size(); ++s) {
        const auto& base = w0.entries()[s];
        const std::size_t n = base.tensor.numel();
        std::vector<double> mean(n, 0.0), sum(n, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            for (const auto& tv : tvs) sum[j] += tv.delta.entries()[s].tensor[j];
            mean[j] = sum[j] / kd;
        }
        std::vector<double> merged;
        if (base.kind == ParamKind::Frozen) {
            merged = sum;
        } else if (base.kind == ParamKind::LinearWeight) {
            const std::size_t d_in = base.tensor.rows(), d_out = base.tensor.cols();
            Matrix a(d_in, d_in), r(d_in, d_out);
            const Matrix mean_m(d_in, d_out, mean);
            for (std::size_t k = 0; k < K; ++k) {
                const Matrix g = gram(traces[k].at(base.name));
                a += g;
                r += matmul(g, Matrix::from_tensor(tvs[k].delta.entries()[s].tensor) - mean_m);
            }
            merged = (mean_m + spd_solve(a, r)).values();
        } else if (base.kind == ParamKind::Scale) {
            merged = mean;
            for (std::size_t z = 0; z < n; ++z) {
                double num = 0.0, den = 0.0;
                for (std::size_t k = 0; k < K; ++k) {
                    const auto& x = traces[k].at(base.name);
                    for (std::size_t row = 0; row < x.rows(); ++row) {
                        const double x2 = x(row, z) * x(row, z);
                        num += x2 * tvs[k].delta.entries()[s].tensor[z];
                        den += x2;
                    }
                }
                if (den > 0.0) merged[z] = num / den;
            }
        } else {
            merged = mean;
        }
        std::vector<double> v(n);
        for (std::size_t j = 0; j < n; ++j) v[j] = base.tensor[j] + alpha * merged[j];
        out.add(base.name, base.kind, Tensor(base.tensor.shape(), std::move(v), base.tensor.dtype()));
    }
    out.meta() = w0.meta();
    return out;
}

}  // namespace catmerge
