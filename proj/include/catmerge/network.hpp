#pragma once

// Sequential network executor: forward passes, per-slot input traces,
// losses, manual backprop and plain SGD.

#include "catmerge/linalg.hpp"
#include "catmerge/rng.hpp"
#include "catmerge/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace catmerge {

enum class ActivationKind { Relu, Gelu, Tanh, Identity };

inline std::string_view activation_name(ActivationKind k) {
    switch (k) {
        case ActivationKind::Relu: return "relu";
        case ActivationKind::Gelu: return "gelu";
        case ActivationKind::Tanh: return "tanh";
        case ActivationKind::Identity: return "identity";
    }
    return "?";
}

inline ActivationKind parse_activation(std::string_view s) {
    if (s == "relu") return ActivationKind::Relu;
    if (s == "gelu") return ActivationKind::Gelu;
    if (s == "tanh") return ActivationKind::Tanh;
    if (s == "identity") return ActivationKind::Identity;
    throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
}

/// y = x·W + b with W of shape [in, out]. The weight is a LinearWeight slot,
/// the bias a Shift slot.
struct LinearLayer {
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;
    bool bias = true;
    bool frozen = false;
};

/// Per-row mean/variance normalization, then element-wise scale, then shift.
struct NormLayer {
    std::size_t dim = 0;
    double eps = 1e-5;
    bool frozen = false;
};

struct ActivationLayer {
    ActivationKind kind = ActivationKind::Relu;
};

using LayerSpec = std::variant<LinearLayer, NormLayer, ActivationLayer>;

/// One parameter slot of a model: "layer{idx}.{weight|bias|scale|shift}".
struct SlotInfo {
    std::string name;
    std::size_t layer = 0;
    ParamKind kind = ParamKind::Frozen;  ///< natural kind (before any freezing)
    Shape shape;
    bool frozen = false;
};

inline std::string slot_name(std::size_t layer, std::string_view role) {
    return "layer" + std::to_string(layer) + "." + std::string(role);
}

struct ModelSpec {
    std::size_t input_dim = 0;
    std::size_t output_dim = 0;
    std::vector<LayerSpec> layers;

    /// Throws std::invalid_argument on dimension mismatches or bad eps.
    void validate() const {
        if (input_dim == 0) throw std::invalid_argument("model input_dim must be >= 1");
        std::size_t d = input_dim;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto where = "layer " + std::to_string(i) + ": ";
            if (const auto* lin = std::get_if<LinearLayer>(&layers[i])) {
                if (lin->in_dim != d)
                    throw std::invalid_argument(where + "linear in_dim " + std::to_string(lin->in_dim) + " != incoming " + std::to_string(d));
                if (lin->out_dim == 0) throw std::invalid_argument(where + "linear out_dim must be >= 1");
                d = lin->out_dim;
            } else if (const auto* nrm = std::get_if<NormLayer>(&layers[i])) {
                if (nrm->dim != d)
                    throw std::invalid_argument(where + "norm dim " + std::to_string(nrm->dim) + " != incoming " + std::to_string(d));
                if (!(nrm->eps > 0)) throw std::invalid_argument(where + "norm eps must be > 0");
            }
        }
        if (d != output_dim)
            throw std::invalid_argument("model output_dim " + std::to_string(output_dim) + " != final layer width " + std::to_string(d));
    }

    std::vector<SlotInfo> slots() const {
        std::vector<SlotInfo> out;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (const auto* lin = std::get_if<LinearLayer>(&layers[i])) {
                out.push_back({slot_name(i, "weight"), i, ParamKind::LinearWeight, {lin->in_dim, lin->out_dim}, lin->frozen});
                if (lin->bias) out.push_back({slot_name(i, "bias"), i, ParamKind::Shift, {lin->out_dim}, lin->frozen});
            } else if (const auto* nrm = std::get_if<NormLayer>(&layers[i])) {
                out.push_back({slot_name(i, "scale"), i, ParamKind::Scale, {nrm->dim}, nrm->frozen});
                out.push_back({slot_name(i, "shift"), i, ParamKind::Shift, {nrm->dim}, nrm->frozen});
            }
        }
        return out;
    }

    /// Width of the output of layer `idx` (idx = -1 for the raw input).
    std::size_t width_after(std::ptrdiff_t idx) const {
        std::size_t d = input_dim;
        for (std::ptrdiff_t i = 0; i <= idx; ++i) {
            if (const auto* lin = std::get_if<LinearLayer>(&layers[static_cast<std::size_t>(i)])) d = lin->out_dim;
        }
        return d;
    }
};

inline nlohmann::ordered_json to_json(const ModelSpec& spec) {
    nlohmann::ordered_json j;
    j["input_dim"] = spec.input_dim;
    j["output_dim"] = spec.output_dim;
    j["layers"] = nlohmann::ordered_json::array();
    for (const auto& l : spec.layers) {
        nlohmann::ordered_json e;
        if (const auto* lin = std::get_if<LinearLayer>(&l)) {
            e["type"] = "linear";
            e["in"] = lin->in_dim;
            e["out"] = lin->out_dim;
            e["bias"] = lin->bias;
            e["frozen"] = lin->frozen;
        } else if (const auto* nrm = std::get_if<NormLayer>(&l)) {
            e["type"] = "norm";
            e["dim"] = nrm->dim;
            e["eps"] = nrm->eps;
            e["frozen"] = nrm->frozen;
        } else {
            e["type"] = "activation";
            e["kind"] = activation_name(std::get<ActivationLayer>(l).kind);
        }
        j["layers"].push_back(std::move(e));
    }
    return j;
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
    ModelSpec spec;
    spec.input_dim = j.at("input_dim").get<std::size_t>();
    spec.output_dim = j.at("output_dim").get<std::size_t>();
    for (const auto& e : j.at("layers")) {
        const auto type = e.at("type").get<std::string>();
        if (type == "linear") {
            spec.layers.emplace_back(LinearLayer{e.at("in").get<std::size_t>(), e.at("out").get<std::size_t>(),
                                                 e.value("bias", true), e.value("frozen", false)});
        } else if (type == "norm") {
            spec.layers.emplace_back(NormLayer{e.at("dim").get<std::size_t>(), e.value("eps", 1e-5), e.value("frozen", false)});
        } else if (type == "activation") {
            spec.layers.emplace_back(ActivationLayer{parse_activation(e.at("kind").get<std::string>())});
        } else {
            throw std::invalid_argument("unknown layer type '" + type + "'");
        }
    }
    spec.validate();
    return spec;
}

/// Inputs with optional targets: class labels [n] or regression targets [n, output_dim].
struct Batch {
    Tensor x;
    std::optional<Tensor> y;

    std::size_t size() const { return x.rows(); }

    /// First `n` rows.
    Batch head(std::size_t n) const {
        if (n == 0 || n > size()) throw std::invalid_argument("batch head: requested " + std::to_string(n) + " of " + std::to_string(size()) + " rows");
        const std::size_t d = x.cols();
        Batch b{Tensor(Shape{n, d}, std::vector<double>(x.values().begin(), x.values().begin() + static_cast<std::ptrdiff_t>(n * d)), x.dtype()), std::nullopt};
        if (y) {
            const std::size_t w = y->rank() == 2 ? y->cols() : 1;
            Shape s = y->rank() == 2 ? Shape{n, w} : Shape{n};
            b.y = Tensor(s, std::vector<double>(y->values().begin(), y->values().begin() + static_cast<std::ptrdiff_t>(n * w)), y->dtype());
        }
        return b;
    }
};

/// Datasets persist as tensors "x" and optionally "y" (both Frozen kind).
inline Checkpoint batch_to_checkpoint(const Batch& b) {
    Checkpoint c;
    c.add("x", ParamKind::Frozen, b.x);
    if (b.y) c.add("y", ParamKind::Frozen, *b.y);
    return c;
}

inline Batch batch_from_checkpoint(const Checkpoint& c) {
    if (!c.contains("x")) throw std::invalid_argument("dataset container has no tensor 'x'");
    Batch b;
    b.x = c.tensor("x");
    if (b.x.rank() != 2) throw std::invalid_argument("dataset 'x' must be rank-2");
    if (c.contains("y")) {
        b.y = c.tensor("y");
        if (b.y->rows() != b.x.rows()) throw std::invalid_argument("dataset 'y' row count differs from 'x'");
    }
    return b;
}

/// Per-slot inputs recorded before the slot's parameter is applied:
/// weight -> layer input X; bias -> X·W; scale -> normalized features;
/// shift (norm) -> normalized features times scale.
using FeatureTrace = std::map<std::string, Matrix>;

class NumericError : public std::runtime_error {
public:
    NumericError(std::size_t layer, const std::string& msg)
        : std::runtime_error("layer " + std::to_string(layer) + ": " + msg), layer_(layer) {}
    std::size_t layer() const { return layer_; }

private:
    std::size_t layer_;
};

/// Throws unless `params` holds exactly the spec's slots, in order, with matching shapes.
inline void check_params(const ModelSpec& spec, const Checkpoint& params) {
    const auto slots = spec.slots();
    if (slots.size() != params.size())
        throw std::invalid_argument("checkpoint has " + std::to_string(params.size()) + " tensors, model expects " + std::to_string(slots.size()));
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto& e = params.entries()[i];
        if (e.name != slots[i].name) throw std::invalid_argument("checkpoint slot " + std::to_string(i) + " is '" + e.name + "', expected '" + slots[i].name + "'");
        if (e.tensor.shape() != slots[i].shape)
            throw std::invalid_argument("'" + e.name + "' has shape " + shape_str(e.tensor.shape()) + ", expected " + shape_str(slots[i].shape));
        if (e.kind != slots[i].kind && e.kind != ParamKind::Frozen)
            throw std::invalid_argument("'" + e.name + "' has kind " + std::string(kind_name(e.kind)));
    }
}

namespace detail {

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

inline double activate(ActivationKind k, double x) {
    switch (k) {
        case ActivationKind::Relu: return x > 0 ? x : 0.0;
        case ActivationKind::Gelu: return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
        case ActivationKind::Tanh: return std::tanh(x);
        case ActivationKind::Identity: return x;
    }
    return x;
}

inline double activate_grad(ActivationKind k, double x) {
    switch (k) {
        case ActivationKind::Relu: return x > 0 ? 1.0 : 0.0;
        case ActivationKind::Gelu: {
            const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
        }
        case ActivationKind::Tanh: {
            const double t = std::tanh(x);
            return 1.0 - t * t;
        }
        case ActivationKind::Identity: return 1.0;
    }
    return 1.0;
}

inline void check_finite(const Matrix& m, std::size_t layer) {
    for (double v : m.values())
        if (!std::isfinite(v)) throw NumericError(layer, "non-finite intermediate value");
}

/// Cached quantities of one norm layer for the backward pass.
struct NormCache {
    Matrix normalized;
    std::vector<double> inv_std;
};

inline Matrix norm_forward(const NormLayer& nl, const Matrix& h, const Tensor& scale, const Tensor& shift,
                           NormCache* cache, Matrix* pre_shift) {
    const std::size_t n = h.rows(), d = h.cols();
    Matrix xhat(n, d), out(n, d);
    std::vector<double> inv(n);
    for (std::size_t r = 0; r < n; ++r) {
        double mean = 0.0;
        for (std::size_t c = 0; c < d; ++c) mean += h(r, c);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) var += (h(r, c) - mean) * (h(r, c) - mean);
        var /= static_cast<double>(d);
        inv[r] = 1.0 / std::sqrt(var + nl.eps);
        for (std::size_t c = 0; c < d; ++c) xhat(r, c) = (h(r, c) - mean) * inv[r];
    }
    Matrix scaled(n, d);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) {
            scaled(r, c) = xhat(r, c) * scale[c];
            out(r, c) = scaled(r, c) + shift[c];
        }
    if (pre_shift) *pre_shift = scaled;
    if (cache) *cache = NormCache{std::move(xhat), std::move(inv)};
    return out;
}

}  // namespace detail

/// Output of layer `idx` for input `h` under `params`. Optionally records the
/// layer's slot inputs into `trace`.
inline Matrix layer_forward(const ModelSpec& spec, std::size_t idx, const Checkpoint& params, const Matrix& h,
                            FeatureTrace* trace = nullptr) {
    const auto& layer = spec.layers.at(idx);
    Matrix out;
    if (const auto* lin = std::get_if<LinearLayer>(&layer)) {
        if (h.cols() != lin->in_dim) throw std::invalid_argument("layer " + std::to_string(idx) + ": input width mismatch");
        const auto w = Matrix::from_tensor(params.tensor(slot_name(idx, "weight")));
        if (trace) (*trace)[slot_name(idx, "weight")] = h;
        out = matmul(h, w);
        if (lin->bias) {
            if (trace) (*trace)[slot_name(idx, "bias")] = out;
            const auto& b = params.tensor(slot_name(idx, "bias"));
            for (std::size_t r = 0; r < out.rows(); ++r)
                for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += b[c];
        }
    } else if (const auto* nrm = std::get_if<NormLayer>(&layer)) {
        if (h.cols() != nrm->dim) throw std::invalid_argument("layer " + std::to_string(idx) + ": input width mismatch");
        detail::NormCache cache;
        Matrix pre_shift;
        out = detail::norm_forward(*nrm, h, params.tensor(slot_name(idx, "scale")), params.tensor(slot_name(idx, "shift")),
                                   trace ? &cache : nullptr, trace ? &pre_shift : nullptr);
        if (trace) {
            (*trace)[slot_name(idx, "scale")] = std::move(cache.normalized);
            (*trace)[slot_name(idx, "shift")] = std::move(pre_shift);
        }
    } else {
        const auto kind = std::get<ActivationLayer>(layer).kind;
        out = h;
        for (auto& v : out.values()) v = detail::activate(kind, v);
    }
    detail::check_finite(out, idx);
    return out;
}

inline Matrix input_matrix(const ModelSpec& spec, const Batch& batch) {
    if (batch.x.rank() != 2 || batch.x.cols() != spec.input_dim)
        throw std::invalid_argument("batch x has shape " + shape_str(batch.x.shape()) + ", model input_dim is " + std::to_string(spec.input_dim));
    return Matrix::from_tensor(batch.x);
}

/// All layer outputs: element 0 is the input, element l+1 the output of layer l.
inline std::vector<Matrix> forward_layers(const ModelSpec& spec, const Checkpoint& params, const Matrix& x,
                                          FeatureTrace* trace = nullptr) {
    std::vector<Matrix> acts;
    acts.reserve(spec.layers.size() + 1);
    acts.push_back(x);
    for (std::size_t l = 0; l < spec.layers.size(); ++l) acts.push_back(layer_forward(spec, l, params, acts.back(), trace));
    return acts;
}

inline Matrix forward(const ModelSpec& spec, const Checkpoint& params, const Batch& batch) {
    check_params(spec, params);
    Matrix h = input_matrix(spec, batch);
    for (std::size_t l = 0; l < spec.layers.size(); ++l) h = layer_forward(spec, l, params, h);
    return h;
}

/// Forward pass that also records every parameterized slot's input.
inline std::pair<Matrix, FeatureTrace> forward_collect(const ModelSpec& spec, const Checkpoint& params, const Batch& batch) {
    check_params(spec, params);
    FeatureTrace trace;
    Matrix h = input_matrix(spec, batch);
    for (std::size_t l = 0; l < spec.layers.size(); ++l) h = layer_forward(spec, l, params, h, &trace);
    return {std::move(h), std::move(trace)};
}

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { CrossEntropy, Mse };

inline std::string_view loss_name(LossKind k) { return k == LossKind::CrossEntropy ? "cross_entropy" : "mse"; }

inline LossKind parse_loss(std::string_view s) {
    if (s == "cross_entropy" || s == "ce") return LossKind::CrossEntropy;
    if (s == "mse") return LossKind::Mse;
    throw std::invalid_argument("unknown loss '" + std::string(s) + "'");
}

namespace detail {

inline std::size_t label_at(const Tensor& targets, std::size_t r, std::size_t classes) {
    const double v = targets[r];
    if (v < 0 || v != std::floor(v) || v >= static_cast<double>(classes))
        throw std::out_of_range("label " + std::to_string(v) + " outside class range [0, " + std::to_string(classes) + ")");
    return static_cast<std::size_t>(v);
}

inline void check_targets(LossKind kind, const Matrix& logits, const Tensor& targets) {
    if (kind == LossKind::CrossEntropy) {
        if (targets.rank() != 1 || targets.numel() != logits.rows())
            throw std::invalid_argument("cross_entropy targets must be [n] labels");
    } else if (targets.rank() != 2 || targets.rows() != logits.rows() || targets.cols() != logits.cols()) {
        throw std::invalid_argument("mse targets must match logits shape");
    }
}

}  // namespace detail

/// Loss of each row. Cross-entropy applies log-softmax; mse averages over outputs.
inline std::vector<double> per_sample_loss(LossKind kind, const Matrix& logits, const Tensor& targets) {
    detail::check_targets(kind, logits, targets);
    const std::size_t n = logits.rows(), c = logits.cols();
    std::vector<double> out(n);
    for (std::size_t r = 0; r < n; ++r) {
        if (kind == LossKind::CrossEntropy) {
            const std::size_t y = detail::label_at(targets, r, c);
            double mx = logits(r, 0);
            for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits(r, j));
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) s += std::exp(logits(r, j) - mx);
            out[r] = std::log(s) + mx - logits(r, y);
        } else {
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                const double d = logits(r, j) - targets.at(r, j);
                s += d * d;
            }
            out[r] = s / static_cast<double>(c);
        }
    }
    return out;
}

/// Batch mean of per_sample_loss.
inline double loss(LossKind kind, const Matrix& logits, const Tensor& targets) {
    const auto per = per_sample_loss(kind, logits, targets);
    double s = 0.0;
    for (double v : per) s += v;
    return s / static_cast<double>(per.size());
}

/// d loss / d logits for the batch-mean loss.
inline Matrix loss_grad(LossKind kind, const Matrix& logits, const Tensor& targets) {
    detail::check_targets(kind, logits, targets);
    const std::size_t n = logits.rows(), c = logits.cols();
    Matrix g(n, c);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) {
        if (kind == LossKind::CrossEntropy) {
            const std::size_t y = detail::label_at(targets, r, c);
            double mx = logits(r, 0);
            for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits(r, j));
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) s += std::exp(logits(r, j) - mx);
            for (std::size_t j = 0; j < c; ++j) g(r, j) = std::exp(logits(r, j) - mx) / s * inv_n;
            g(r, y) -= inv_n;
        } else {
            for (std::size_t j = 0; j < c; ++j)
                g(r, j) = 2.0 * (logits(r, j) - targets.at(r, j)) * inv_n / static_cast<double>(c);
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Backprop and SGD

/// Gradient of the batch-mean loss w.r.t. every parameter, aligned to `params`
/// but stored as f64. Frozen slots receive exact zeros.
inline Checkpoint backward(const ModelSpec& spec, const Checkpoint& params, const Batch& batch, LossKind kind) {
    check_params(spec, params);
    if (!batch.y) throw std::invalid_argument("backward needs a labeled batch");

    const std::size_t L = spec.layers.size();
    std::vector<Matrix> inputs(L);
    std::vector<detail::NormCache> norm_cache(L);
    Matrix h = input_matrix(spec, batch);
    for (std::size_t l = 0; l < L; ++l) {
        inputs[l] = h;
        if (const auto* nrm = std::get_if<NormLayer>(&spec.layers[l])) {
            h = detail::norm_forward(*nrm, h, params.tensor(slot_name(l, "scale")), params.tensor(slot_name(l, "shift")),
                                     &norm_cache[l], nullptr);
            detail::check_finite(h, l);
        } else {
            h = layer_forward(spec, l, params, h);
        }
    }

    std::map<std::string, std::vector<double>> grads;
    Matrix g = loss_grad(kind, h, *batch.y);
    for (std::size_t li = L; li-- > 0;) {
        const auto& layer = spec.layers[li];
        const Matrix& x = inputs[li];
        if (const auto* lin = std::get_if<LinearLayer>(&layer)) {
            grads[slot_name(li, "weight")] = matmul_tn(x, g).values();
            if (lin->bias) {
                std::vector<double> gb(lin->out_dim, 0.0);
                for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
                grads[slot_name(li, "bias")] = std::move(gb);
            }
            if (li > 0) g = matmul(g, Matrix::from_tensor(params.tensor(slot_name(li, "weight"))).transpose());
        } else if (std::holds_alternative<NormLayer>(layer)) {
            const auto& cache = norm_cache[li];
            const auto& scale = params.tensor(slot_name(li, "scale"));
            const std::size_t n = g.rows(), d = g.cols();
            std::vector<double> gs(d, 0.0), gh(d, 0.0);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < d; ++c) {
                    gs[c] += g(r, c) * cache.normalized(r, c);
                    gh[c] += g(r, c);
                }
            grads[slot_name(li, "scale")] = std::move(gs);
            grads[slot_name(li, "shift")] = std::move(gh);
            if (li > 0) {
                Matrix gx(n, d);
                for (std::size_t r = 0; r < n; ++r) {
                    double mean_g = 0.0, mean_gx = 0.0;
                    for (std::size_t c = 0; c < d; ++c) {
                        const double gxhat = g(r, c) * scale[c];
                        mean_g += gxhat;
                        mean_gx += gxhat * cache.normalized(r, c);
                    }
                    mean_g /= static_cast<double>(d);
                    mean_gx /= static_cast<double>(d);
                    for (std::size_t c = 0; c < d; ++c)
                        gx(r, c) = cache.inv_std[r] * (g(r, c) * scale[c] - mean_g - cache.normalized(r, c) * mean_gx);
                }
                g = std::move(gx);
            }
        } else {
            const auto kind_a = std::get<ActivationLayer>(layer).kind;
            for (std::size_t i = 0; i < g.values().size(); ++i) g.values()[i] *= detail::activate_grad(kind_a, x.values()[i]);
        }
    }

    Checkpoint out;
    for (const auto& e : params.entries()) {
        std::vector<double> v = e.kind == ParamKind::Frozen ? std::vector<double>(e.tensor.numel(), 0.0) : std::move(grads.at(e.name));
        out.add(e.name, e.kind, Tensor(e.tensor.shape(), std::move(v), DType::F64));
    }
    return out;
}

/// params - lr * grads, element-wise.
inline Checkpoint sgd_step(const Checkpoint& params, const Checkpoint& grads, double lr) {
    if (!(lr >= 0) || !std::isfinite(lr)) throw std::invalid_argument("sgd_step: learning rate must be finite and non-negative");
    Checkpoint out;
    if (params.size() != grads.size()) throw std::invalid_argument("sgd_step: gradient is not aligned to params");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params.entries()[i];
        const auto& g = grads.entries()[i];
        if (p.name != g.name || p.tensor.shape() != g.tensor.shape())
            throw std::invalid_argument("sgd_step: gradient is not aligned to params at '" + p.name + "'");
        std::vector<double> v(p.tensor.values());
        for (std::size_t j = 0; j < v.size(); ++j) v[j] -= lr * g.tensor[j];
        out.add(p.name, p.kind, Tensor(p.tensor.shape(), std::move(v), p.tensor.dtype()));
    }
    out.meta() = params.meta();
    return out;
}

/// Random initialization: linear weights ~ N(0, 2/in), biases and shifts 0, scales 1.
inline Checkpoint init_params(const ModelSpec& spec, CounterRng& rng) {
    spec.validate();
    Checkpoint c;
    for (const auto& s : spec.slots()) {
        Tensor t(s.shape);
        if (s.kind == ParamKind::LinearWeight) {
            const double sd = std::sqrt(2.0 / static_cast<double>(s.shape[0]));
            for (auto& v : t.values()) v = rng.normal(0.0, sd);
        } else if (s.kind == ParamKind::Scale) {
            for (auto& v : t.values()) v = 1.0;
        }
        c.add(s.name, s.frozen ? ParamKind::Frozen : s.kind, std::move(t));
    }
    return c;
}

}  // namespace catmerge
