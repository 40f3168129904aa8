#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "pssl/errors.hpp"

namespace pssl {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using MatF = Mat<float>;
using MatD = Mat<double>;

using Shape = std::vector<std::size_t>;

// Over-aligned storage so vectorized reductions split the same way on every run.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array. Storage is 32-bit in training and 64-bit for
/// gradient checks; the layout is identical.
template <class T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0));
    Tensor(Shape shape, std::vector<T> data);

    const Shape& shape() const { return shape_; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> span() { return data_; }
    std::span<const T> span() const { return data_; }
    Buffer<T>& values() { return data_; }
    const Buffer<T>& values() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    // 2-D access; rows() folds all leading dims.
    std::size_t rows() const;
    std::size_t cols() const;
    T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    Eigen::Map<Mat<T>> matrix();
    Eigen::Map<const Mat<T>> matrix() const;

    void fill(T v);
    bool all_finite() const;

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

    static Tensor from_matrix(const Mat<T>& m);

private:
    Shape shape_;
    Buffer<T> data_;
};

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Row softmax of x / temp with max-subtraction.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x, double temp);

/// In-place row softmax helper used by the network code.
template <class T>
void softmax_rows_inplace(Eigen::Ref<Mat<T>> x);

inline constexpr double kLayerNormEps = 1e-6;

/// Layer normalization over the last dimension, eps = 1e-6.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, std::span<const T> gain, std::span<const T> bias);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace pssl
