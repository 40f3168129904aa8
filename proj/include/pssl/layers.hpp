#pragma once

#include "pssl/tensor.hpp"

namespace pssl::layers {

/// y = x W + b. W is [in x out]; b is a 1 x out row (may be empty).
template <class T>
void linear_forward(const Mat<T>& x, const Eigen::Map<const Mat<T>>& w, const T* bias, Mat<T>& y);

/// Accumulates dW, db and returns dx (skipped when dx == nullptr).
template <class T>
void linear_backward(const Mat<T>& x, const Eigen::Map<const Mat<T>>& w, const Mat<T>& dy,
                     Eigen::Map<Mat<T>> dw, T* dbias, Mat<T>* dx);

/// Per-row layer norm cache: normalized rows and reciprocal std.
template <class T>
struct LnCache {
    Mat<T> xhat;
    Vec<T> rstd;
};

template <class T>
void layer_norm_forward(const Mat<T>& x, const T* gain, const T* bias, Mat<T>& y, LnCache<T>& cache);

template <class T>
void layer_norm_backward(const Mat<T>& dy, const LnCache<T>& cache, const T* gain, T* dgain, T* dbias,
                         Mat<T>& dx);

/// GELU, tanh form.
template <class T>
void gelu_forward(const Mat<T>& u, Mat<T>& g);
template <class T>
void gelu_backward(const Mat<T>& u, const Mat<T>& dg, Mat<T>& du);

/// SwiGLU on u = [gate | value]: g = silu(gate) * value.
template <class T>
void swiglu_forward(const Mat<T>& u, Mat<T>& g);
template <class T>
void swiglu_backward(const Mat<T>& u, const Mat<T>& dg, Mat<T>& du);

/// 1-D bilinear (half-pixel) interpolation weights from `in` to `out` samples.
Mat<double> interp_weights(int in, int out);

}  // namespace pssl::layers
