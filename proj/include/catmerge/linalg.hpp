#pragma once

// Dense spectral and least-squares kernels used by trimming and merging.

#include "catmerge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace catmerge {

/// Row-major dense matrix of doubles. Zero extents are allowed (e.g. d x 0 bases).
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) throw std::invalid_argument("matrix data length does not match extents");
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix diagonal(const std::vector<double>& d) {
        Matrix m(d.size(), d.size());
        for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
        return m;
    }

    /// Rank-2 tensors map directly; rank-1 tensors become a single row.
    static Matrix from_tensor(const Tensor& t) {
        if (t.rank() == 1) return Matrix(1, t.numel(), t.values());
        if (t.rank() != 2) throw std::invalid_argument("matrix view needs a rank-1 or rank-2 tensor, got " + shape_str(t.shape()));
        return Matrix(t.shape()[0], t.shape()[1], t.values());
    }

    Tensor to_tensor() const { return Tensor(Shape{rows_, cols_}, data_); }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    std::vector<double> column(std::size_t c) const {
        std::vector<double> v(rows_);
        for (std::size_t r = 0; r < rows_; ++r) v[r] = (*this)(r, c);
        return v;
    }

    Matrix transpose() const {
        Matrix t(cols_, rows_);
        for (std::size_t r = 0; r < rows_; ++r)
            for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
        return t;
    }

    Matrix& operator+=(const Matrix& o) {
        check_same(o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Matrix& operator-=(const Matrix& o) {
        check_same(o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Matrix& operator*=(double s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

    friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
    friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
    friend Matrix operator*(Matrix a, double s) { return a *= s; }
    friend Matrix operator*(double s, Matrix a) { return a *= s; }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    void check_same(const Matrix& o) const {
        if (rows_ != o.rows_ || cols_ != o.cols_) throw std::invalid_argument("matrix extents differ");
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul: inner extents " + std::to_string(a.cols()) + " and " + std::to_string(b.rows()));
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
        }
    return out;
}

/// aᵀ·b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw std::invalid_argument("matmul_tn: row extents differ");
    Matrix out(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k)
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aki * b(k, j);
        }
    return out;
}

inline double frobenius_norm_sq(const Matrix& m) {
    double s = 0.0;
    for (double v : m.values()) s += v * v;
    return s;
}

inline double frobenius_norm(const Matrix& m) { return std::sqrt(frobenius_norm_sq(m)); }

/// XᵀX. The upper triangle is accumulated and mirrored, so the result is exactly symmetric.
inline Matrix gram(const Matrix& x) {
    const std::size_t d = x.cols();
    Matrix g(d, d);
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t i = 0; i < d; ++i) {
            const double xi = x(r, i);
            if (xi == 0.0) continue;
            for (std::size_t j = i; j < d; ++j) g(i, j) += xi * x(r, j);
        }
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < i; ++j) g(i, j) = g(j, i);
    return g;
}

/// Eigenvalues sorted descending; column j of `vectors` pairs with values[j].
struct EigenResult {
    std::vector<double> values;
    Matrix vectors;
    int sweeps = 0;
};

class EigenError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct JacobiOptions {
    double tol = 1e-12;  ///< stop when off-diagonal Frobenius norm <= tol * ||A||_F
    int max_sweeps = 100;
};

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized as (A + Aᵀ)/2. Eigenpairs are ordered by
/// descending eigenvalue, ties by ascending position on the converged
/// diagonal. Each eigenvector is signed so its largest-magnitude component
/// (first one on ties) is positive.
inline EigenResult sym_eig(const Matrix& input, const JacobiOptions& opt = {}) {
    if (input.rows() != input.cols()) throw std::invalid_argument("sym_eig: matrix is not square");
    const std::size_t n = input.rows();
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (input(i, j) + input(j, i));
    Matrix v = Matrix::identity(n);

    const double norm = frobenius_norm(a);
    auto off_norm = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (i != j) s += a(i, j) * a(i, j);
        return std::sqrt(s);
    };

    int sweep = 0;
    double off = off_norm();
    while (off > opt.tol * norm) {
        if (sweep == opt.max_sweeps) {
            std::ostringstream msg;
            msg << "sym_eig: no convergence after " << opt.max_sweeps << " sweeps (off-diagonal norm " << off
                << ", ||A||_F " << norm << ")";
            throw EigenError(msg.str());
        }
        ++sweep;
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                a(p, q) = a(q, p) = 0.0;
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        off = off_norm();
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });

    EigenResult res;
    res.sweeps = sweep;
    res.values.resize(n);
    res.vectors = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        res.values[j] = a(src, src);
        std::size_t big = 0;
        for (std::size_t r = 1; r < n; ++r)
            if (std::abs(v(r, src)) > std::abs(v(big, src))) big = r;
        const double sign = v(big, src) < 0 ? -1.0 : 1.0;
        for (std::size_t r = 0; r < n; ++r) res.vectors(r, j) = sign * v(r, src);
    }
    return res;
}

inline double default_eigtol(const EigenResult& e) {
    const double top = e.values.empty() ? 0.0 : e.values.front();
    return 1e-10 * std::max(1.0, top);
}

/// Leading min(c, d) eigenvectors as a d x c' matrix. With `positive_only`,
/// columns whose eigenvalue is <= eigtol are dropped.
inline Matrix top_c_eigvecs(const EigenResult& e, std::size_t c, bool positive_only, double eigtol) {
    const std::size_t d = e.vectors.rows();
    if (c > d) throw std::invalid_argument("top_c_eigvecs: c exceeds dimension");
    std::size_t keep = 0;
    while (keep < c && (!positive_only || e.values[keep] > eigtol)) ++keep;
    Matrix b(d, keep);
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t j = 0; j < keep; ++j) b(r, j) = e.vectors(r, j);
    return b;
}

inline Matrix top_c_eigvecs(const EigenResult& e, std::size_t c, bool positive_only) {
    return top_c_eigvecs(e, c, positive_only, default_eigtol(e));
}

/// Minimum-norm solution of A·X = B for symmetric PSD A, through the
/// eigendecomposition with eigenvalues <= reltol * λ_max treated as zero.
inline Matrix spd_solve(const Matrix& a, const Matrix& b, double reltol = 1e-12) {
    if (a.rows() != a.cols() || a.rows() != b.rows()) throw std::invalid_argument("spd_solve: incompatible extents");
    const auto e = sym_eig(a);
    const std::size_t n = a.rows();
    const double cutoff = e.values.empty() ? 0.0 : reltol * std::max(0.0, e.values.front());
    // X = V · diag(1/λ) · Vᵀ · B over the retained eigenpairs.
    Matrix vtb = matmul_tn(e.vectors, b);
    for (std::size_t j = 0; j < n; ++j) {
        const double lam = e.values[j];
        const double inv = (lam > cutoff && lam > 0.0) ? 1.0 / lam : 0.0;
        for (std::size_t c = 0; c < b.cols(); ++c) vtb(j, c) *= inv;
    }
    return matmul(e.vectors, vtb);
}

}  // namespace catmerge
