#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace plab {

// Dense row-major 64-bit array with shape. The single numeric carrier for
// inputs, parameters, activations, and gradients.
//
// Construction from explicit data validates shape/size agreement and rejects
// non-finite entries. The zeros/uninitialized factories skip the finiteness
// scan; operations that can produce NaN (divergent training) check at the
// loss level instead.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double value);
    // Validating constructor: throws std::invalid_argument on size mismatch
    // or non-finite entries.
    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_[i]; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // 2-D accessors (row, col); unchecked.
    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    // Row pointer for 2-D tensors.
    double* row(std::size_t r) { return data_.data() + r * shape_[1]; }
    const double* row(std::size_t r) const { return data_.data() + r * shape_[1]; }

    // Leading dimension (batch) and the product of the remaining dims.
    std::size_t batch() const { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t row_size() const { return shape_.empty() ? 0 : size() / shape_[0]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool has_nonfinite() const;
    double frobenius_norm() const;
    std::string shape_str() const;

    // Reinterpret with a new shape of equal total size.
    Tensor reshaped(std::vector<std::size_t> new_shape) const;
    // Copy one batch row as a (1, ...) tensor.
    Tensor slice_batch(std::size_t index) const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.same_shape(b); }

// C(m,n) += A(m,k) * B(k,n), row-major.
void matmul_acc(const double* a, const double* b, double* c,
                std::size_t m, std::size_t k, std::size_t n);
// C(m,n) += A(m,k) * B(n,k)^T, row-major.
void matmul_bt_acc(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n);
// C(k,n) += A(m,k)^T * B(m,n), row-major.
void matmul_at_acc(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n);

double dot(const double* a, const double* b, std::size_t n);

// Shape-checked tensor forms of the kernels above.
void matmul_acc(Tensor& c, const Tensor& a, const Tensor& b);     // C += A B
void matmul_bt_acc(Tensor& c, const Tensor& a, const Tensor& b);  // C += A B^T
void matmul_at_acc(Tensor& c, const Tensor& a, const Tensor& b);  // C += A^T B

}  // namespace plab
