#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace parse {

// Dense row-major matrix. Double is the working precision for all
// factorization math; the execution engine instantiates the float variant.
template <typename T>
class Mat {
public:
    Mat() = default;
    Mat(std::size_t rows, std::size_t cols, T fill = T(0))
        : rows_(rows), cols_(cols), d_(rows * cols, fill) {}

    static Mat identity(std::size_t n) {
        Mat m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return d_.empty(); }

    T& operator()(std::size_t i, std::size_t j) {
        assert(i < rows_ && j < cols_);
        return d_[i * cols_ + j];
    }
    T operator()(std::size_t i, std::size_t j) const {
        assert(i < rows_ && j < cols_);
        return d_[i * cols_ + j];
    }

    T* data() { return d_.data(); }
    const T* data() const { return d_.data(); }
    T* row(std::size_t i) { return d_.data() + i * cols_; }
    const T* row(std::size_t i) const { return d_.data() + i * cols_; }

    std::vector<T>& raw() { return d_; }
    const std::vector<T>& raw() const { return d_; }

    std::vector<T> col(std::size_t j) const {
        std::vector<T> c(rows_);
        for (std::size_t i = 0; i < rows_; ++i) c[i] = (*this)(i, j);
        return c;
    }
    void set_col(std::size_t j, const std::vector<T>& c) {
        assert(c.size() == rows_);
        for (std::size_t i = 0; i < rows_; ++i) (*this)(i, j) = c[i];
    }

    bool all_finite() const {
        for (T v : d_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    template <typename U>
    Mat<U> cast() const {
        Mat<U> out(rows_, cols_);
        for (std::size_t i = 0; i < d_.size(); ++i) out.raw()[i] = static_cast<U>(d_[i]);
        return out;
    }

private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<T> d_;
};

using Matd = Mat<double>;
using Matf = Mat<float>;

template <typename T>
Mat<T> transpose(const Mat<T>& a) {
    Mat<T> t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

// C = A * B, ikj order.
template <typename T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: shape mismatch");
    Mat<T> c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const T* ar = a.row(i);
        T* cr = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const T aik = ar[k];
            if (aik == T(0)) continue;
            const T* br = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) cr[j] += aik * br[j];
        }
    }
    return c;
}

// C = A^T * B
template <typename T>
Mat<T> matmul_tn(const Mat<T>& a, const Mat<T>& b) {
    if (a.rows() != b.rows()) throw std::invalid_argument("matmul_tn: shape mismatch");
    Mat<T> c(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const T* ar = a.row(k);
        const T* br = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const T aki = ar[i];
            if (aki == T(0)) continue;
            T* cr = c.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) cr[j] += aki * br[j];
        }
    }
    return c;
}

// C = A * B^T
template <typename T>
Mat<T> matmul_nt(const Mat<T>& a, const Mat<T>& b) {
    if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: shape mismatch");
    Mat<T> c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const T* ar = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const T* br = b.row(j);
            T s = T(0);
            for (std::size_t k = 0; k < a.cols(); ++k) s += ar[k] * br[k];
            c(i, j) = s;
        }
    }
    return c;
}

template <typename T>
Mat<T> add(const Mat<T>& a, const Mat<T>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument("add: shape mismatch");
    Mat<T> c = a;
    for (std::size_t i = 0; i < c.raw().size(); ++i) c.raw()[i] += b.raw()[i];
    return c;
}

template <typename T>
Mat<T> sub(const Mat<T>& a, const Mat<T>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument("sub: shape mismatch");
    Mat<T> c = a;
    for (std::size_t i = 0; i < c.raw().size(); ++i) c.raw()[i] -= b.raw()[i];
    return c;
}

template <typename T>
double frob_norm(const Mat<T>& a) {
    double s = 0;
    for (T v : a.raw()) s += double(v) * double(v);
    return std::sqrt(s);
}

template <typename T>
double frob_norm_sq(const Mat<T>& a) {
    double s = 0;
    for (T v : a.raw()) s += double(v) * double(v);
    return s;
}

template <typename T>
double max_abs(const Mat<T>& a) {
    double m = 0;
    for (T v : a.raw()) m = std::max(m, std::abs(double(v)));
    return m;
}

template <typename T>
double frob_dot(const Mat<T>& a, const Mat<T>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.raw().size(); ++i)
        s += double(a.raw()[i]) * double(b.raw()[i]);
    return s;
}

inline double dot(const double* a, const double* b, std::size_t n) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline double vec_norm(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace parse
