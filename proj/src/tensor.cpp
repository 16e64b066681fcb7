#include "plab/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace plab {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (const std::size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    if (shape.empty()) throw std::invalid_argument("Tensor: shape must be non-empty");
    for (const std::size_t d : shape) {
        if (d == 0) throw std::invalid_argument("Tensor: dimensions must be positive");
    }
    Tensor t;
    const std::size_t n = shape_product(shape);
    t.shape_ = std::move(shape);
    t.data_.assign(n, 0.0);
    return t;
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    Tensor t = zeros(std::move(shape));
    for (double& x : t.data_) x = value;
    return t;
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data) {
    if (shape.empty()) throw std::invalid_argument("Tensor: shape must be non-empty");
    for (const std::size_t d : shape) {
        if (d == 0) throw std::invalid_argument("Tensor: dimensions must be positive");
    }
    if (shape_product(shape) != data.size()) {
        std::ostringstream msg;
        msg << "Tensor::from_data: shape holds " << shape_product(shape)
            << " elements but " << data.size() << " values given";
        throw std::invalid_argument(msg.str());
    }
    for (const double x : data) {
        if (!std::isfinite(x)) {
            throw std::invalid_argument("Tensor::from_data: non-finite entry");
        }
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

bool Tensor::has_nonfinite() const {
    for (const double x : data_) {
        if (!std::isfinite(x)) return true;
    }
    return false;
}

double Tensor::frobenius_norm() const {
    double s = 0.0;
    for (const double x : data_) s += x * x;
    return std::sqrt(s);
}

std::string Tensor::shape_str() const {
    std::ostringstream out;
    out << "(";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) out << ",";
        out << shape_[i];
    }
    out << ")";
    return out.str();
}

Tensor Tensor::reshaped(std::vector<std::size_t> new_shape) const {
    if (shape_product(new_shape) != size()) {
        throw std::invalid_argument("Tensor::reshaped: element count mismatch " +
                                    shape_str());
    }
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    return t;
}

Tensor Tensor::slice_batch(std::size_t index) const {
    if (shape_.empty() || index >= shape_[0]) {
        throw std::out_of_range("Tensor::slice_batch: index out of range");
    }
    std::vector<std::size_t> s = shape_;
    s[0] = 1;
    const std::size_t stride = row_size();
    Tensor t = Tensor::zeros(std::move(s));
    const double* src = data_.data() + index * stride;
    for (std::size_t i = 0; i < stride; ++i) t.data()[i] = src[i];
    return t;
}

void matmul_acc(const double* a, const double* b, double* c,
                std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

void matmul_bt_acc(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            ci[j] += dot(ai, b + j * k, k);
        }
    }
}

void matmul_at_acc(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

namespace {

[[noreturn]] void mm_shape_error(const char* op, const Tensor& c, const Tensor& a,
                                 const Tensor& b) {
    std::ostringstream msg;
    msg << op << ": incompatible shapes C" << c.shape_str() << " A" << a.shape_str() << " B"
        << b.shape_str();
    throw std::invalid_argument(msg.str());
}

}  // namespace

void matmul_acc(Tensor& c, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || c.rank() != 2 || a.dim(1) != b.dim(0) ||
        c.dim(0) != a.dim(0) || c.dim(1) != b.dim(1))
        mm_shape_error("matmul_acc", c, a, b);
    matmul_acc(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
}

void matmul_bt_acc(Tensor& c, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || c.rank() != 2 || a.dim(1) != b.dim(1) ||
        c.dim(0) != a.dim(0) || c.dim(1) != b.dim(0))
        mm_shape_error("matmul_bt_acc", c, a, b);
    matmul_bt_acc(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(0));
}

void matmul_at_acc(Tensor& c, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || c.rank() != 2 || a.dim(0) != b.dim(0) ||
        c.dim(0) != a.dim(1) || c.dim(1) != b.dim(1))
        mm_shape_error("matmul_at_acc", c, a, b);
    matmul_at_acc(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
}

}  // namespace plab
