#pragma once

// Dense row-major tensor storage. Scalar type is a template parameter:
// float for production runs, double for gradient-check tests.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace p2tag {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require_shapes(bool ok, const std::string& op, const Shape& a, const Shape& b) {
    if (!ok)
        throw ShapeError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

template <typename R>
struct Tensor {
    Shape shape;
    std::vector<R> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), R(0)) {}
    Tensor(Shape s, std::vector<R> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
            throw ShapeError("Tensor: data length does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, R v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(R v) { return Tensor({1}, {v}); }
    static Tensor from(Shape s, std::initializer_list<R> vals) {
        return Tensor(std::move(s), std::vector<R>(vals));
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    bool empty() const { return data.empty(); }

    R* ptr() { return data.data(); }
    const R* ptr() const { return data.data(); }

    // 2D accessors (row-major)
    R& at(std::int64_t i, std::int64_t j) { return data[static_cast<std::size_t>(i * shape[1] + j)]; }
    R at(std::int64_t i, std::int64_t j) const { return data[static_cast<std::size_t>(i * shape[1] + j)]; }

    bool all_finite() const {
        for (R v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    template <typename R2>
    Tensor<R2> cast() const {
        Tensor<R2> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<R2>(data[i]);
        return out;
    }
};

}  // namespace p2tag
