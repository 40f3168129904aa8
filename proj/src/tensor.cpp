#include "pssl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pssl {

const char* category_name(ErrorCategory c) {
    switch (c) {
        case ErrorCategory::config: return "config";
        case ErrorCategory::data: return "data";
        case ErrorCategory::numeric: return "numeric";
        case ErrorCategory::io: return "io";
        case ErrorCategory::dimension: return "dimension";
        case ErrorCategory::parameter: return "parameter";
    }
    return "unknown";
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <class T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (shape_numel(shape_) != data_.size())
        throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
}

template <class T>
std::size_t Tensor<T>::cols() const {
    return shape_.empty() ? 1 : shape_.back();
}

template <class T>
std::size_t Tensor<T>::rows() const {
    const std::size_t c = cols();
    return c == 0 ? 0 : data_.size() / c;
}

template <class T>
Eigen::Map<Mat<T>> Tensor<T>::matrix() {
    return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
}

template <class T>
Eigen::Map<const Mat<T>> Tensor<T>::matrix() const {
    return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
}

template <class T>
void Tensor<T>::fill(T v) {
    std::fill(data_.begin(), data_.end(), v);
}

template <class T>
bool Tensor<T>::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <class T>
Tensor<T> Tensor<T>::from_matrix(const Mat<T>& m) {
    Tensor<T> t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    t.matrix() = m;
    return t;
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw DimensionError("matmul expects 2-D operands, got " + shape_string(a.shape()) + " and " +
                             shape_string(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw DimensionError("matmul inner dims differ: " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    Tensor<T> c({a.dim(0), b.dim(1)});
    c.matrix().noalias() = a.matrix() * b.matrix();
    return c;
}

template <class T>
void softmax_rows_inplace(Eigen::Ref<Mat<T>> x) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        auto row = x.row(i);
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
    }
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x, double temp) {
    if (!(temp > 0.0)) throw ParameterError("softmax temperature must be positive");
    Tensor<T> out = x;
    auto m = out.matrix();
    m /= static_cast<T>(temp);
    softmax_rows_inplace<T>(m);
    return out;
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, std::span<const T> gain, std::span<const T> bias) {
    const std::size_t d = x.cols();
    if (d < 2) throw DimensionError("layer_norm needs at least 2 features");
    if (gain.size() != d || bias.size() != d) throw DimensionError("layer_norm affine size mismatch");
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double mean = 0.0;
        for (std::size_t c = 0; c < d; ++c) mean += x.at(r, c);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            const double dv = x.at(r, c) - mean;
            var += dv * dv;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        for (std::size_t c = 0; c < d; ++c)
            out.at(r, c) = static_cast<T>((x.at(r, c) - mean) * inv * gain[c] + bias[c]);
    }
    return out;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> matmul(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> matmul(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> softmax_rows(const Tensor<float>&, double);
template Tensor<double> softmax_rows(const Tensor<double>&, double);
template void softmax_rows_inplace<float>(Eigen::Ref<Mat<float>>);
template void softmax_rows_inplace<double>(Eigen::Ref<Mat<double>>);
template Tensor<float> layer_norm(const Tensor<float>&, std::span<const float>, std::span<const float>);
template Tensor<double> layer_norm(const Tensor<double>&, std::span<const double>, std::span<const double>);

}  // namespace pssl
