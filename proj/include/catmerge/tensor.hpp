#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace catmerge {

/// Storage type of a tensor when persisted. Values are always held as f64 in
/// memory; the dtype only decides how they are narrowed on write.
enum class DType : std::uint8_t { F32, F64, U32 };

/// How a parameter participates in merging.
enum class ParamKind : std::uint8_t { LinearWeight, Scale, Shift, Frozen };

inline std::size_t dtype_size(DType dt) {
    switch (dt) {
        case DType::F32: return 4;
        case DType::F64: return 8;
        case DType::U32: return 4;
    }
    return 0;
}

inline std::string_view dtype_name(DType dt) {
    switch (dt) {
        case DType::F32: return "f32";
        case DType::F64: return "f64";
        case DType::U32: return "u32";
    }
    return "?";
}

inline DType parse_dtype(std::string_view s) {
    if (s == "f32") return DType::F32;
    if (s == "f64") return DType::F64;
    if (s == "u32") return DType::U32;
    throw std::invalid_argument("unknown dtype '" + std::string(s) + "'");
}

inline std::string_view kind_name(ParamKind k) {
    switch (k) {
        case ParamKind::LinearWeight: return "linear_weight";
        case ParamKind::Scale: return "scale";
        case ParamKind::Shift: return "shift";
        case ParamKind::Frozen: return "frozen";
    }
    return "?";
}

inline ParamKind parse_kind(std::string_view s) {
    if (s == "linear_weight") return ParamKind::LinearWeight;
    if (s == "scale") return ParamKind::Scale;
    if (s == "shift") return ParamKind::Shift;
    if (s == "frozen") return ParamKind::Frozen;
    throw std::invalid_argument("unknown parameter kind '" + std::string(s) + "'");
}

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Dense row-major tensor. Elements are stored widened to double.
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, DType dtype = DType::F64)
        : shape_(std::move(shape)), dtype_(dtype), data_(shape_numel(shape_), 0.0) {
        check_shape();
    }

    Tensor(Shape shape, std::vector<double> data, DType dtype = DType::F64)
        : shape_(std::move(shape)), dtype_(dtype), data_(std::move(data)) {
        check_shape();
        if (data_.size() != shape_numel(shape_)) {
            throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_str(shape_));
        }
        if (dtype_ == DType::F32) {
            for (auto& v : data_) v = static_cast<double>(static_cast<float>(v));
        }
    }

    static Tensor vector(std::vector<double> v, DType dtype = DType::F64) {
        Shape s{v.size()};
        return Tensor(std::move(s), std::move(v), dtype);
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v,
                         DType dtype = DType::F64) {
        return Tensor(Shape{rows, cols}, std::move(v), dtype);
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    DType dtype() const { return dtype_; }

    std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
    /// Trailing extent for rank-2 tensors; 1 for vectors.
    std::size_t cols() const { return shape_.size() >= 2 ? shape_[1] : 1; }

    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    /// Same shape and dtype, element-wise bit equality (via operator== on doubles,
    /// with NaN never appearing in valid tensors).
    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.dtype_ == b.dtype_ && a.data_ == b.data_;
    }

private:
    void check_shape() const {
        for (auto d : shape_)
            if (d == 0) throw std::invalid_argument("tensor dimensions must be >= 1, got " + shape_str(shape_));
    }

    Shape shape_;
    DType dtype_ = DType::F64;
    std::vector<double> data_;
};

struct Entry {
    std::string name;
    ParamKind kind = ParamKind::Frozen;
    Tensor tensor;

    friend bool operator==(const Entry&, const Entry&) = default;
};

/// Throws std::invalid_argument if the tensor's rank does not fit its kind.
inline void check_kind_rank(const std::string& name, ParamKind kind, const Tensor& t) {
    if (kind == ParamKind::LinearWeight && t.rank() != 2)
        throw std::invalid_argument("'" + name + "': linear_weight must be rank-2, got " + shape_str(t.shape()));
    if ((kind == ParamKind::Scale || kind == ParamKind::Shift) && t.rank() != 1)
        throw std::invalid_argument("'" + name + "': " + std::string(kind_name(kind)) +
                                    " must be rank-1, got " + shape_str(t.shape()));
}

/// Ordered, named, kind-tagged parameter set. Iteration order is insertion
/// order, which is the layer order for model checkpoints.
class Checkpoint {
public:
    void add(std::string name, ParamKind kind, Tensor tensor) {
        if (index_.count(name)) throw std::invalid_argument("duplicate tensor name '" + name + "'");
        check_kind_rank(name, kind, tensor);
        index_.emplace(name, entries_.size());
        entries_.push_back(Entry{std::move(name), kind, std::move(tensor)});
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const Entry& entry(const std::string& name) const { return entries_.at(lookup(name)); }
    Entry& entry(const std::string& name) { return entries_.at(lookup(name)); }

    const Tensor& tensor(const std::string& name) const { return entry(name).tensor; }
    Tensor& tensor(const std::string& name) { return entry(name).tensor; }

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    std::map<std::string, std::string>& meta() { return meta_; }
    const std::map<std::string, std::string>& meta() const { return meta_; }

    friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
        return a.entries_ == b.entries_ && a.meta_ == b.meta_;
    }

private:
    std::size_t lookup(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no tensor named '" + name + "'");
        return it->second;
    }

    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
    std::map<std::string, std::string> meta_;
};

/// Identical names, kinds, dtypes and shapes, pairwise in order.
inline bool check_aligned(const Checkpoint& a, const Checkpoint& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& x = a.entries()[i];
        const auto& y = b.entries()[i];
        if (x.name != y.name || x.kind != y.kind || x.tensor.dtype() != y.tensor.dtype() ||
            x.tensor.shape() != y.tensor.shape())
            return false;
    }
    return true;
}

inline void require_aligned(const Checkpoint& a, const Checkpoint& b, std::string_view what) {
    if (!check_aligned(a, b)) throw std::invalid_argument(std::string(what) + ": checkpoints are not aligned");
}

/// Element-wise combination of two aligned checkpoints; kinds and dtypes come from `a`.
template <typename Fn>
Checkpoint zip_with(const Checkpoint& a, const Checkpoint& b, Fn fn) {
    require_aligned(a, b, "zip_with");
    Checkpoint out;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& ea = a.entries()[i];
        const auto& eb = b.entries()[i];
        std::vector<double> v(ea.tensor.numel());
        for (std::size_t j = 0; j < v.size(); ++j) v[j] = fn(ea.tensor[j], eb.tensor[j]);
        out.add(ea.name, ea.kind, Tensor(ea.tensor.shape(), std::move(v), DType::F64));
    }
    out.meta() = a.meta();
    return out;
}

/// Same entries with every tensor widened to f64.
inline Checkpoint widened(const Checkpoint& c) {
    Checkpoint out;
    for (const auto& e : c.entries()) out.add(e.name, e.kind, Tensor(e.tensor.shape(), e.tensor.values(), DType::F64));
    out.meta() = c.meta();
    return out;
}

inline Checkpoint add(const Checkpoint& a, const Checkpoint& b) {
    return zip_with(a, b, [](double x, double y) { return x + y; });
}

inline Checkpoint subtract(const Checkpoint& a, const Checkpoint& b) {
    return zip_with(a, b, [](double x, double y) { return x - y; });
}

inline Checkpoint scaled(const Checkpoint& a, double s) {
    Checkpoint out;
    for (const auto& e : a.entries()) {
        std::vector<double> v(e.tensor.values());
        for (auto& x : v) x *= s;
        out.add(e.name, e.kind, Tensor(e.tensor.shape(), std::move(v), DType::F64));
    }
    out.meta() = a.meta();
    return out;
}

inline Checkpoint zeros_like(const Checkpoint& a) {
    Checkpoint out;
    for (const auto& e : a.entries()) out.add(e.name, e.kind, Tensor(e.tensor.shape(), DType::F64));
    out.meta() = a.meta();
    return out;
}

inline double frobenius_norm(const Tensor& t) {
    double s = 0.0;
    for (double v : t.values()) s += v * v;
    return std::sqrt(s);
}

}  // namespace catmerge
