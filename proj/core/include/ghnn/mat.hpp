#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace ghnn {

/// Dense row-major matrix of doubles. Vectors are n x 1 columns, scalars 1 x 1.
/// Batched data uses rows = batch, cols = features.
class Mat {
public:
    Mat() = default;
    Mat(int rows, int cols) : rows_(rows), cols_(cols), a_(static_cast<size_t>(rows) * cols, 0.0) {}
    Mat(int rows, int cols, std::vector<double> data) : rows_(rows), cols_(cols), a_(std::move(data)) {
        assert(a_.size() == static_cast<size_t>(rows_) * cols_);
    }

    static Mat zeros(int r, int c) { return Mat(r, c); }
    static Mat full(int r, int c, double v) {
        Mat m(r, c);
        for (auto& x : m.a_) x = v;
        return m;
    }
    static Mat identity(int n) {
        Mat m(n, n);
        for (int i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }
    static Mat scalar(double v) { return Mat(1, 1, {v}); }
    static Mat col(std::initializer_list<double> v) {
        Mat m(static_cast<int>(v.size()), 1);
        int i = 0;
        for (double x : v) m.a_[i++] = x;
        return m;
    }
    static Mat row(std::initializer_list<double> v) {
        Mat m(1, static_cast<int>(v.size()));
        int i = 0;
        for (double x : v) m.a_[i++] = x;
        return m;
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t size() const { return a_.size(); }
    bool empty() const { return a_.empty(); }
    bool is_scalar() const { return rows_ == 1 && cols_ == 1; }
    bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    double& operator()(int r, int c) { return a_[static_cast<size_t>(r) * cols_ + c]; }
    double operator()(int r, int c) const { return a_[static_cast<size_t>(r) * cols_ + c]; }
    double& operator[](size_t i) { return a_[i]; }
    double operator[](size_t i) const { return a_[i]; }

    double* data() { return a_.data(); }
    const double* data() const { return a_.data(); }

    std::string shape_str() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    bool all_finite() const {
        for (double v : a_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : a_) m = std::max(m, std::fabs(v));
        return m;
    }

    double norm2() const {
        double s = 0.0;
        for (double v : a_) s += v * v;
        return std::sqrt(s);
    }

private:
    int rows_ = 0, cols_ = 0;
    std::vector<double> a_;
};

namespace kernels {

/// C = A * B. The k-inner saxpy ordering keeps B rows hot and vectorizes well.
inline void matmul(const Mat& A, const Mat& B, Mat& C) {
    const int m = A.rows(), k = A.cols(), n = B.cols();
    assert(B.rows() == k && C.rows() == m && C.cols() == n);
    const double* a = A.data();
    const double* b = B.data();
    double* c = C.data();
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) ci[j] = 0.0;
        const double* ai = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double aip = ai[p];
            if (aip == 0.0) continue;
            const double* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

/// C += A * B.
inline void matmul_acc(const Mat& A, const Mat& B, Mat& C) {
    const int m = A.rows(), k = A.cols(), n = B.cols();
    assert(B.rows() == k && C.rows() == m && C.cols() == n);
    const double* a = A.data();
    const double* b = B.data();
    double* c = C.data();
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<size_t>(i) * n;
        const double* ai = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double aip = ai[p];
            if (aip == 0.0) continue;
            const double* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

/// C += A^T * B  (A is m x k, result k x n).
inline void matmul_tn_acc(const Mat& A, const Mat& B, Mat& C) {
    const int m = A.rows(), k = A.cols(), n = B.cols();
    assert(B.rows() == m && C.rows() == k && C.cols() == n);
    const double* a = A.data();
    const double* b = B.data();
    double* c = C.data();
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        const double* bi = b + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double aip = ai[p];
            if (aip == 0.0) continue;
            double* cp = c + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) cp[j] += aip * bi[j];
        }
    }
}

/// C += A * B^T  (B is n x k, result m x n).
inline void matmul_nt_acc(const Mat& A, const Mat& B, Mat& C) {
    const int m = A.rows(), k = A.cols(), n = B.rows();
    assert(B.cols() == k && C.rows() == m && C.cols() == n);
    const double* a = A.data();
    const double* b = B.data();
    double* c = C.data();
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<size_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] += s;
        }
    }
}

inline Mat transpose(const Mat& A) {
    Mat T(A.cols(), A.rows());
    for (int i = 0; i < A.rows(); ++i)
        for (int j = 0; j < A.cols(); ++j) T(j, i) = A(i, j);
    return T;
}

inline void axpy(double alpha, const Mat& X, Mat& Y) {
    assert(X.same_shape(Y));
    const double* x = X.data();
    double* y = Y.data();
    for (size_t i = 0; i < X.size(); ++i) y[i] += alpha * x[i];
}

inline double dot(const Mat& A, const Mat& B) {
    assert(A.same_shape(B));
    double s = 0.0;
    for (size_t i = 0; i < A.size(); ++i) s += A[i] * B[i];
    return s;
}

}  // namespace kernels

inline double softplus_stable(double x) {
    // max(x,0) + log1p(exp(-|x|)), overflow safe
    return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

inline double sigmoid_stable(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace ghnn
