#pragma once

// Knowledge-conflict measurement and empirical checks of the layer-wise
// feature-shift decomposition and the loss bound built on it.
//
// Parameter sets are always formed as W_0 + (u + v) so that the perturbed
// model for (k, i) and (i, k) is bit-identical and v = 0 reproduces W_0 + u.

#include "catmerge/merging.hpp"
#include "catmerge/network.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace catmerge {

namespace detail {

inline Checkpoint base_plus(const Checkpoint& w0, const Checkpoint& u, const Checkpoint* v) {
    if (!v) return add(w0, u);
    return add(w0, add(u, *v));
}

inline double batch_loss(const ModelSpec& spec, const Checkpoint& params, const Batch& data, LossKind kind) {
    if (!data.y) throw std::invalid_argument("conflict measurement needs a labeled dataset");
    return loss(kind, forward(spec, params, data), *data.y);
}

inline std::vector<double> row_norms(const Matrix& a, const Matrix& b) {
    std::vector<double> out(a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < a.cols(); ++c) s += (a(r, c) - b(r, c)) * (a(r, c) - b(r, c));
        out[r] = std::sqrt(s);
    }
    return out;
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace detail

/// ΔL_{k|i} = L_k(W_0 + T_k + T_i) - L_k(W_0 + T_k) on task k's data. May be negative.
inline double knowledge_conflict(const ModelSpec& spec, const Checkpoint& w0, const Checkpoint& t_k, const Checkpoint& t_i,
                                 const Batch& data_k, LossKind kind) {
    return detail::batch_loss(spec, detail::base_plus(w0, t_k, &t_i), data_k, kind) -
           detail::batch_loss(spec, detail::base_plus(w0, t_k, nullptr), data_k, kind);
}

/// Bidirectional conflict over a grid of per-task coefficients.
/// values[a * alphas_i.size() + b] = ΔL_{k|i} + ΔL_{i|k} at (alphas_k[a], alphas_i[b]).
struct ConflictGrid {
    std::vector<double> alphas_k;
    std::vector<double> alphas_i;
    std::vector<double> values;

    double at(std::size_t a, std::size_t b) const { return values[a * alphas_i.size() + b]; }
    double mean() const { return detail::mean_of(values); }
};

inline std::vector<double> alpha_grid(std::size_t points, double max_alpha = 1.0) {
    if (points == 0) throw std::invalid_argument("grid needs at least one point");
    std::vector<double> a(points, 0.0);
    for (std::size_t j = 1; j < points; ++j) a[j] = max_alpha * static_cast<double>(j) / static_cast<double>(points - 1);
    return a;
}

/// When `edit` is given, both vectors are first trimmed by edit_task_vectors,
/// so operators of any protected task other than a vector's own apply to it,
/// exactly as in the full merge.
inline ConflictGrid conflict_grid(const ModelSpec& spec, const Checkpoint& w0, const TaskVector& t_k, const TaskVector& t_i,
                                  const Batch& data_k, const Batch& data_i, const std::vector<double>& alphas_k,
                                  const std::vector<double>& alphas_i, LossKind kind,
                                  const std::vector<TrimOperator>* edit = nullptr) {
    if (alphas_k.empty() || alphas_i.empty()) throw std::invalid_argument("conflict grid axes must be non-empty");
    std::vector<TaskVector> pair{t_k, t_i};
    if (edit) edit_task_vectors(pair, *edit);

    ConflictGrid grid{alphas_k, alphas_i, std::vector<double>(alphas_k.size() * alphas_i.size())};
    std::vector<double> base_k(alphas_k.size()), base_i(alphas_i.size());
    std::vector<Checkpoint> sk, si;
    for (double a : alphas_k) sk.push_back(scaled(pair[0].delta, a));
    for (double b : alphas_i) si.push_back(scaled(pair[1].delta, b));
    for (std::size_t a = 0; a < sk.size(); ++a) base_k[a] = detail::batch_loss(spec, add(w0, sk[a]), data_k, kind);
    for (std::size_t b = 0; b < si.size(); ++b) base_i[b] = detail::batch_loss(spec, add(w0, si[b]), data_i, kind);

    parallel_for(grid.values.size(), [&](std::size_t cell) {
        const std::size_t a = cell / alphas_i.size(), b = cell % alphas_i.size();
        const Checkpoint merged = add(w0, add(sk[a], si[b]));
        const double dk = detail::batch_loss(spec, merged, data_k, kind) - base_k[a];
        const double di = detail::batch_loss(spec, merged, data_i, kind) - base_i[b];
        grid.values[cell] = dk + di;
    });
    return grid;
}

/// CSV with header "alpha_k,alpha_i,conflict", rows in row-major order, 17 significant digits.
inline std::string grid_to_csv(const ConflictGrid& g) {
    std::string out = "alpha_k,alpha_i,conflict\n";
    char buf[96];
    for (std::size_t a = 0; a < g.alphas_k.size(); ++a)
        for (std::size_t b = 0; b < g.alphas_i.size(); ++b) {
            std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", g.alphas_k[a], g.alphas_i[b], g.at(a, b));
            out += buf;
        }
    return out;
}

inline ConflictGrid grid_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "alpha_k,alpha_i,conflict") throw std::invalid_argument("conflict CSV: bad header");
    std::vector<std::array<double, 3>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::array<double, 3> r{};
        const char* p = line.c_str();
        for (int c = 0; c < 3; ++c) {
            char* end = nullptr;
            r[static_cast<std::size_t>(c)] = std::strtod(p, &end);
            if (end == p) throw std::invalid_argument("conflict CSV: malformed row '" + line + "'");
            p = (*end == ',') ? end + 1 : end;
        }
        rows.push_back(r);
    }
    ConflictGrid g;
    for (const auto& r : rows) {
        if (g.alphas_k.empty() || g.alphas_k.back() != r[0]) g.alphas_k.push_back(r[0]);
        if (g.alphas_k.size() == 1) g.alphas_i.push_back(r[1]);
        g.values.push_back(r[2]);
    }
    if (g.values.size() != g.alphas_k.size() * g.alphas_i.size()) throw std::invalid_argument("conflict CSV: rows do not form a grid");
    return g;
}

/// Per-layer shift quantities. Norms are per exemplar (row 2-norms).
struct LayerShift {
    std::size_t layer = 0;
    std::vector<double> feat_shift;   ///< ‖Δf^l‖: both parameter sets through layer l
    std::vector<double> local_shift;  ///< ‖Δf̂^l‖: only layer l perturbed, unperturbed inputs
    double gamma_hat = 0.0;           ///< empirical Lipschitz constant of layer l under perturbed params
    bool lemma_holds = true;

    double mean_feat_shift() const { return detail::mean_of(feat_shift); }
    double mean_local_shift() const { return detail::mean_of(local_shift); }
};

/// Layer-by-layer decomposition of the feature shift that adding t_i causes on
/// task k's exemplars, with W_k = W_0 + t_k and W' = W_0 + (t_k + t_i).
///
/// gamma_hat for layer l is the largest ‖g(p) - g(q)‖ / ‖p - q‖ over all pairs
/// among the layer's perturbed and unperturbed inputs, with g the layer under
/// W'. Pairs with zero input difference are skipped. The lemma
///   ‖Δf^l‖ <= γ̂_l ‖Δf^{l-1}‖ + ‖Δf̂^l‖
/// is then checked per exemplar with 1e-8 (relative) slack.
inline std::vector<LayerShift> layer_shift_decomposition(const ModelSpec& spec, const Checkpoint& w0, const Checkpoint& t_k,
                                                         const Checkpoint& t_i, const Batch& exemplars_k) {
    if (exemplars_k.size() == 0) throw std::invalid_argument("layer_shift_decomposition needs exemplars");
    const Checkpoint wk = detail::base_plus(w0, t_k, nullptr);
    const Checkpoint wp = detail::base_plus(w0, t_k, &t_i);
    check_params(spec, wk);
    const Matrix x = input_matrix(spec, exemplars_k);
    const auto base = forward_layers(spec, wk, x);
    const auto pert = forward_layers(spec, wp, x);
    const std::size_t n = x.rows();

    std::vector<LayerShift> out;
    std::vector<double> prev(n, 0.0);
    for (std::size_t l = 0; l < spec.layers.size(); ++l) {
        LayerShift ls;
        ls.layer = l;
        const Matrix local = layer_forward(spec, l, wp, base[l]);
        ls.feat_shift = detail::row_norms(pert[l + 1], base[l + 1]);
        ls.local_shift = detail::row_norms(local, base[l + 1]);

        // Points: perturbed inputs then unperturbed inputs, with their outputs under W'.
        const std::size_t m = 2 * n, d_in = base[l].cols(), d_out = local.cols();
        auto in_row = [&](std::size_t p, std::size_t c) { return p < n ? pert[l](p, c) : base[l](p - n, c); };
        auto out_row = [&](std::size_t p, std::size_t c) { return p < n ? pert[l + 1](p, c) : local(p - n, c); };
        double gamma = 0.0;
        for (std::size_t p = 0; p < m; ++p)
            for (std::size_t q = p + 1; q < m; ++q) {
                double din = 0.0, dout = 0.0;
                for (std::size_t c = 0; c < d_in; ++c) din += std::pow(in_row(p, c) - in_row(q, c), 2);
                if (din == 0.0) continue;
                for (std::size_t c = 0; c < d_out; ++c) dout += std::pow(out_row(p, c) - out_row(q, c), 2);
                gamma = std::max(gamma, std::sqrt(dout / din));
            }
        ls.gamma_hat = gamma;

        for (std::size_t e = 0; e < n; ++e) {
            const double rhs = gamma * prev[e] + ls.local_shift[e];
            if (ls.feat_shift[e] > rhs + 1e-8 * std::max(1.0, rhs)) ls.lemma_holds = false;
        }
        prev = ls.feat_shift;
        out.push_back(std::move(ls));
    }
    return out;
}

/// Diagnostic comparison of |ΔL_{k|i}| with the layer-wise bound
///   β̂ Σ_l (Π_{m>l} γ̂_m) · mean_e ‖Δf̂^l_e‖
/// where β̂ is the largest per-exemplar |Δloss| / ‖Δoutput‖. The estimates are
/// empirical, so `holds` is a sanity check rather than a proof.
struct ConflictReport {
    double delta_loss = 0.0;
    double lhs = 0.0;
    double rhs = 0.0;
    double beta_hat = 0.0;
    bool holds = true;
    std::vector<LayerShift> layers;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["diagnostic"] = true;
        j["delta_loss"] = delta_loss;
        j["lhs"] = lhs;
        j["bound_value"] = rhs;
        j["beta_hat"] = beta_hat;
        j["bound_holds"] = holds;
        j["layers"] = nlohmann::ordered_json::array();
        for (const auto& l : layers) {
            nlohmann::ordered_json e;
            e["layer"] = l.layer;
            e["feat_shift"] = l.mean_feat_shift();
            e["local_shift"] = l.mean_local_shift();
            e["gamma_hat"] = l.gamma_hat;
            e["lemma_holds"] = l.lemma_holds;
            j["layers"].push_back(std::move(e));
        }
        return j;
    }
};

inline ConflictReport theorem_bound_check(const ModelSpec& spec, const Checkpoint& w0, const Checkpoint& t_k, const Checkpoint& t_i,
                                          const Batch& data_k, LossKind kind) {
    if (!data_k.y) throw std::invalid_argument("theorem_bound_check needs a labeled dataset");
    ConflictReport rep;
    rep.layers = layer_shift_decomposition(spec, w0, t_k, t_i, data_k);

    const Matrix zk = forward(spec, detail::base_plus(w0, t_k, nullptr), data_k);
    const Matrix zp = forward(spec, detail::base_plus(w0, t_k, &t_i), data_k);
    const auto lk = per_sample_loss(kind, zk, *data_k.y);
    const auto lp = per_sample_loss(kind, zp, *data_k.y);
    const auto dz = detail::row_norms(zp, zk);
    rep.delta_loss = detail::mean_of(lp) - detail::mean_of(lk);
    rep.lhs = std::abs(rep.delta_loss);
    for (std::size_t e = 0; e < lk.size(); ++e)
        if (dz[e] > 0.0) rep.beta_hat = std::max(rep.beta_hat, std::abs(lp[e] - lk[e]) / dz[e]);

    double sum = 0.0;
    for (std::size_t l = 0; l < rep.layers.size(); ++l) {
        double prod = 1.0;
        for (std::size_t m = l + 1; m < rep.layers.size(); ++m) prod *= rep.layers[m].gamma_hat;
        sum += prod * rep.layers[l].mean_local_shift();
    }
    rep.rhs = rep.beta_hat * sum;
    rep.holds = rep.lhs <= rep.rhs + 1e-8;
    return rep;
}

}  // namespace catmerge
