#include "pssl/layers.hpp"

#include <algorithm>
#include <cmath>

namespace pssl::layers {

template <class T>
void linear_forward(const Mat<T>& x, const Eigen::Map<const Mat<T>>& w, const T* bias, Mat<T>& y) {
    y.noalias() = x * w;
    if (bias) y.rowwise() += Eigen::Map<const RowVec<T>>(bias, w.cols());
}

template <class T>
void linear_backward(const Mat<T>& x, const Eigen::Map<const Mat<T>>& w, const Mat<T>& dy,
                     Eigen::Map<Mat<T>> dw, T* dbias, Mat<T>* dx) {
    dw.noalias() += x.transpose() * dy;
    if (dbias) Eigen::Map<RowVec<T>>(dbias, w.cols()) += dy.colwise().sum();
    if (dx) dx->noalias() = dy * w.transpose();
}

template <class T>
void layer_norm_forward(const Mat<T>& x, const T* gain, const T* bias, Mat<T>& y, LnCache<T>& cache) {
    const Eigen::Index n = x.rows(), d = x.cols();
    cache.xhat.resize(n, d);
    cache.rstd.resize(n);
    y.resize(n, d);
    Eigen::Map<const RowVec<T>> g(gain, d), b(bias, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto row = x.row(i);
        const T mean = row.mean();
        const T var = (row.array() - mean).square().mean();
        const T r = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        cache.rstd(i) = r;
        cache.xhat.row(i) = (row.array() - mean) * r;
        y.row(i) = cache.xhat.row(i).cwiseProduct(g) + b;
    }
}

template <class T>
void layer_norm_backward(const Mat<T>& dy, const LnCache<T>& cache, const T* gain, T* dgain, T* dbias,
                         Mat<T>& dx) {
    const Eigen::Index n = dy.rows(), d = dy.cols();
    Eigen::Map<const RowVec<T>> g(gain, d);
    if (dgain) Eigen::Map<RowVec<T>>(dgain, d) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    if (dbias) Eigen::Map<RowVec<T>>(dbias, d) += dy.colwise().sum();
    dx.resize(n, d);
    const T inv_d = T(1) / static_cast<T>(d);
    for (Eigen::Index i = 0; i < n; ++i) {
        const RowVec<T> dxhat = dy.row(i).cwiseProduct(g);
        const T m1 = dxhat.sum() * inv_d;
        const T m2 = dxhat.dot(cache.xhat.row(i)) * inv_d;
        dx.row(i) = (dxhat.array() - m1 - cache.xhat.row(i).array() * m2) * cache.rstd(i);
    }
}

namespace {
constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;
}  // namespace

template <class T>
void gelu_forward(const Mat<T>& u, Mat<T>& g) {
    const T c = static_cast<T>(kSqrt2OverPi), k = static_cast<T>(kGeluCubic);
    const auto a = u.array();
    g = (T(0.5) * a * (T(1) + (c * (a + k * a.cube())).tanh())).matrix();
}

template <class T>
void gelu_backward(const Mat<T>& u, const Mat<T>& dg, Mat<T>& du) {
    const T c = static_cast<T>(kSqrt2OverPi), k = static_cast<T>(kGeluCubic);
    const auto a = u.array();
    const auto t = (c * (a + k * a.cube())).tanh().eval();
    const auto dt = (c * (T(1) + T(3) * k * a.square())).eval();
    du = (dg.array() * (T(0.5) * (T(1) + t) + T(0.5) * a * (T(1) - t.square()) * dt)).matrix();
}

template <class T>
void swiglu_forward(const Mat<T>& u, Mat<T>& g) {
    const Eigen::Index h = u.cols() / 2;
    const auto gate = u.leftCols(h).array();
    const auto val = u.rightCols(h).array();
    const auto sig = (T(1) / (T(1) + (-gate).exp())).eval();
    g = (gate * sig * val).matrix();
}

template <class T>
void swiglu_backward(const Mat<T>& u, const Mat<T>& dg, Mat<T>& du) {
    const Eigen::Index h = u.cols() / 2;
    const auto gate = u.leftCols(h).array();
    const auto val = u.rightCols(h).array();
    const auto sig = (T(1) / (T(1) + (-gate).exp())).eval();
    const auto silu = (gate * sig).eval();
    const auto dsilu = (sig * (T(1) + gate * (T(1) - sig))).eval();
    du.resize(u.rows(), u.cols());
    du.leftCols(h) = (dg.array() * val * dsilu).matrix();
    du.rightCols(h) = (dg.array() * silu).matrix();
}

Mat<double> interp_weights(int in, int out) {
    Mat<double> w = Mat<double>::Zero(out, in);
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = std::clamp((o + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
        const int i0 = static_cast<int>(std::floor(src));
        const int i1 = std::min(i0 + 1, in - 1);
        const double f = src - i0;
        w(o, i0) += 1.0 - f;
        w(o, i1) += f;
    }
    return w;
}

#define PSSL_INSTANTIATE_LAYERS(T)                                                                          \
    template void linear_forward<T>(const Mat<T>&, const Eigen::Map<const Mat<T>>&, const T*, Mat<T>&);    \
    template void linear_backward<T>(const Mat<T>&, const Eigen::Map<const Mat<T>>&, const Mat<T>&,        \
                                     Eigen::Map<Mat<T>>, T*, Mat<T>*);                                      \
    template void layer_norm_forward<T>(const Mat<T>&, const T*, const T*, Mat<T>&, LnCache<T>&);          \
    template void layer_norm_backward<T>(const Mat<T>&, const LnCache<T>&, const T*, T*, T*, Mat<T>&);     \
    template void gelu_forward<T>(const Mat<T>&, Mat<T>&);                                                  \
    template void gelu_backward<T>(const Mat<T>&, const Mat<T>&, Mat<T>&);                                  \
    template void swiglu_forward<T>(const Mat<T>&, Mat<T>&);                                                \
    template void swiglu_backward<T>(const Mat<T>&, const Mat<T>&, Mat<T>&);

PSSL_INSTANTIATE_LAYERS(float)
PSSL_INSTANTIATE_LAYERS(double)

}  // namespace pssl::layers
