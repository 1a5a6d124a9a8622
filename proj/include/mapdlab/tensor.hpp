#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mapdlab/errors.hpp"
#include "mapdlab/rng.hpp"

namespace mapd {

// Thread-local multiply-accumulate counter. Raw kernels report their MAC
// counts here; the analytic FLOPs model is validated against it.
struct MacCounter {
    static std::uint64_t& value() {
        thread_local std::uint64_t count = 0;
        return count;
    }
    static void reset() { value() = 0; }
    static void add(std::uint64_t n) { value() += n; }
};

template <typename S>
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<S> data;

    Tensor() = default;
    Tensor(std::initializer_list<std::int64_t> dims, S fill = S(0)) : shape(dims) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), fill);
    }
    explicit Tensor(std::vector<std::int64_t> dims, S fill = S(0)) : shape(std::move(dims)) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), fill);
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& dims) {
        std::int64_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    std::int64_t rows() const { return rank() >= 1 ? shape[0] : 1; }
    std::int64_t cols() const { return rank() >= 2 ? shape[1] : 1; }

    S& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * cols() + c)]; }
    S at(std::int64_t r, std::int64_t c) const {
        return data[static_cast<std::size_t>(r * cols() + c)];
    }
    S* row_ptr(std::int64_t r) { return data.data() + r * cols(); }
    const S* row_ptr(std::int64_t r) const { return data.data() + r * cols(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << "]";
        return os.str();
    }

    bool all_finite() const {
        for (S v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

    static Tensor from_rows(std::int64_t r, std::int64_t c, const std::vector<S>& values) {
        Tensor t({r, c});
        t.data = values;
        if (t.numel() != r * c) throw ShapeError("from_rows: value count does not match " + t.shape_str());
        return t;
    }

    static Tensor scalar(S v) {
        Tensor t({1});
        t.data[0] = v;
        return t;
    }

    static Tensor random_uniform(std::vector<std::int64_t> dims, S lo, S hi, RngStream& rng) {
        Tensor t(std::move(dims));
        for (auto& v : t.data) v = static_cast<S>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
        return t;
    }

    static Tensor random_normal(std::vector<std::int64_t> dims, S stddev, RngStream& rng) {
        Tensor t(std::move(dims));
        for (auto& v : t.data) v = static_cast<S>(rng.normal() * static_cast<double>(stddev));
        return t;
    }

    // Xavier/Glorot uniform over fan dimensions of a 2-D weight.
    static Tensor xavier_uniform(std::int64_t fan_in, std::int64_t fan_out, RngStream& rng) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        return random_uniform({fan_in, fan_out}, static_cast<S>(-bound), static_cast<S>(bound), rng);
    }
};

namespace kernels {

// C[r x c] += / = A[r x k] * B[k x c], row-major. ikj order vectorizes on j.
template <typename S>
void matmul(const Tensor<S>& a, const Tensor<S>& b, Tensor<S>& out, bool accumulate = false) {
    const std::int64_t r = a.rows(), k = a.cols(), c = b.cols();
    if (!accumulate) {
        out.shape = {r, c};
        out.data.assign(static_cast<std::size_t>(r * c), S(0));
    }
    for (std::int64_t i = 0; i < r; ++i) {
        const S* arow = a.row_ptr(i);
        S* orow = out.row_ptr(i);
        for (std::int64_t p = 0; p < k; ++p) {
            const S av = arow[p];
            const S* brow = b.row_ptr(p);
            for (std::int64_t j = 0; j < c; ++j) orow[j] += av * brow[j];
        }
    }
    MacCounter::add(static_cast<std::uint64_t>(r) * k * c);
}

// C[r x c] = A[r x k] * B[c x k]^T
template <typename S>
void matmul_nt(const Tensor<S>& a, const Tensor<S>& b, Tensor<S>& out, bool accumulate = false) {
    const std::int64_t r = a.rows(), k = a.cols(), c = b.rows();
    if (!accumulate) {
        out.shape = {r, c};
        out.data.assign(static_cast<std::size_t>(r * c), S(0));
    }
    for (std::int64_t i = 0; i < r; ++i) {
        const S* arow = a.row_ptr(i);
        S* orow = out.row_ptr(i);
        for (std::int64_t j = 0; j < c; ++j) {
            const S* brow = b.row_ptr(j);
            S acc = S(0);
            for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            orow[j] += acc;
        }
    }
    MacCounter::add(static_cast<std::uint64_t>(r) * k * c);
}

// C[k x c] = A[r x k]^T * B[r x c]
template <typename S>
void matmul_tn(const Tensor<S>& a, const Tensor<S>& b, Tensor<S>& out, bool accumulate = false) {
    const std::int64_t r = a.rows(), k = a.cols(), c = b.cols();
    if (!accumulate) {
        out.shape = {k, c};
        out.data.assign(static_cast<std::size_t>(k * c), S(0));
    }
    for (std::int64_t i = 0; i < r; ++i) {
        const S* arow = a.row_ptr(i);
        const S* brow = b.row_ptr(i);
        for (std::int64_t p = 0; p < k; ++p) {
            const S av = arow[p];
            S* orow = out.row_ptr(p);
            for (std::int64_t j = 0; j < c; ++j) orow[j] += av * brow[j];
        }
    }
    MacCounter::add(static_cast<std::uint64_t>(r) * k * c);
}

template <typename S>
void axpy(S alpha, const Tensor<S>& x, Tensor<S>& y) {
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += alpha * x.data[i];
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
    Tensor<S> t({a.cols(), a.rows()});
    for (std::int64_t i = 0; i < a.rows(); ++i)
        for (std::int64_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
    return t;
}

}  // namespace kernels

// Order-independent summation: terms are quantized to a fixed-point grid
// (LSB 2^-84) and accumulated in a 128-bit integer, so the result does not
// depend on the order in which terms arrive. Used by the attention-mapper
// so that permuting the visual patches leaves its output bit-identical.
class FixedPointAccumulator {
  public:
    void add(double t) {
        if (!(std::fabs(t) < 4294967296.0))  // 2^32; also rejects NaN
            throw NonFiniteError("order-independent accumulator: term out of range");
        acc_ += quantize(t);
    }

    double result() const {
        const std::int64_t hi = static_cast<std::int64_t>(acc_ >> 64);
        const std::uint64_t lo = static_cast<std::uint64_t>(acc_);
        return static_cast<double>(
            ldexpl(static_cast<long double>(hi), 64 - 84) +
            ldexpl(static_cast<long double>(lo), -84));
    }

  private:
    static __int128 quantize(double t) {
        // t * 2^84 is exact in binary FP (power-of-two scale); split into
        // a high part (multiples of 2^63) and a rounded low part.
        const long double x = ldexpl(static_cast<long double>(t), 84);
        const long double two63 = 9223372036854775808.0L;
        const long double h = floorl(x / two63);
        __int128 r = static_cast<__int128>(static_cast<long long>(h)) << 63;
        r += static_cast<long long>(llrintl(x - h * two63));
        return r;
    }

    __int128 acc_ = 0;
};

inline double order_independent_sum(const double* terms, std::size_t n) {
    FixedPointAccumulator acc;
    for (std::size_t i = 0; i < n; ++i) acc.add(terms[i]);
    return acc.result();
}

}  // namespace mapd
