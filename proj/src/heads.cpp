#include "pssl/heads.hpp"

#include <cmath>

namespace pssl {

namespace {
constexpr double kNormFloor = 1e-12;
}

void HeadConfig::validate() const {
    if (layers < 1) throw ConfigError("head_layers must be >= 1");
    if (bottleneck_dim < 1 || hidden_dim < 1) throw ConfigError("head dimensions must be positive");
    if (prototypes < 2) throw ConfigError("prototypes must be >= 2");
}

template <class T>
ProjectionHead<T>::ProjectionHead(const HeadConfig& cfg, int in_dim, Rng& rng) : cfg_(cfg), in_dim_(in_dim) {
    cfg_.validate();
    register_params();
    for (std::size_t id : w_ids_) init_trunc_normal(params_[id], 0.02, rng);
    init_trunc_normal(params_[proto_], 0.02, rng);
}

template <class T>
ProjectionHead<T>::ProjectionHead(const HeadConfig& cfg, int in_dim, ParamSet<T> params)
    : cfg_(cfg), in_dim_(in_dim) {
    cfg_.validate();
    register_params();
    if (!params_.same_layout(params)) throw ConfigError("head parameter layout does not match head config");
    params_ = std::move(params);
}

template <class T>
void ProjectionHead<T>::register_params() {
    if (in_dim_ < 1) throw ConfigError("head input dimension must be positive");
    std::size_t in = in_dim_;
    for (int l = 0; l < cfg_.layers; ++l) {
        const std::size_t out = l + 1 == cfg_.layers ? cfg_.bottleneck_dim : cfg_.hidden_dim;
        const std::string pre = "mlp." + std::to_string(l) + ".";
        w_ids_.push_back(params_.add(pre + "weight", {in, out}));
        b_ids_.push_back(params_.add(pre + "bias", {out}));
        in = out;
    }
    proto_ = params_.add("prototypes.weight", {static_cast<std::size_t>(cfg_.bottleneck_dim),
                                               static_cast<std::size_t>(cfg_.prototypes)});
}

template <class T>
Mat<T> ProjectionHead<T>::forward(const Mat<T>& x, HeadCache<T>* cache) const {
    if (x.cols() != in_dim_) throw DimensionError("head input has " + std::to_string(x.cols()) + " columns, expected " +
                                                  std::to_string(in_dim_));
    HeadCache<T> local;
    HeadCache<T>& c = cache ? *cache : local;
    c.inputs.assign(cfg_.layers, Mat<T>());
    c.preact.assign(cfg_.layers, Mat<T>());
    Mat<T> h = x;
    for (int l = 0; l < cfg_.layers; ++l) {
        Mat<T> y;
        layers::linear_forward<T>(h, params_.mat(w_ids_[l]), params_[b_ids_[l]].data(), y);
        c.inputs[l] = std::move(h);
        if (l + 1 < cfg_.layers) {
            layers::gelu_forward<T>(y, h);
            c.preact[l] = std::move(y);
        } else {
            h = std::move(y);
        }
    }
    c.bottleneck = std::move(h);
    c.norms = c.bottleneck.rowwise().norm().cwiseMax(static_cast<T>(kNormFloor));
    c.z = c.bottleneck.array().colwise() / c.norms.array();
    const auto v = params_.mat(proto_);
    c.col_norms = v.colwise().norm().transpose().cwiseMax(static_cast<T>(kNormFloor));
    c.w = v.array().rowwise() / c.col_norms.transpose().array();
    return c.z * c.w;
}

template <class T>
Mat<T> ProjectionHead<T>::backward(const HeadCache<T>& c, const Mat<T>& d_logits, ParamSet<T>& G) const {
    if (d_logits.rows() != c.z.rows() || d_logits.cols() != cfg_.prototypes)
        throw DimensionError("head logit gradient shape mismatch");
    // Weight-normalized prototypes: w = v / |v| per column.
    const Mat<T> dw = c.z.transpose() * d_logits;
    const RowVec<T> proj = (dw.array() * c.w.array()).colwise().sum();
    G.mat(proto_) += ((dw - (c.w.array().rowwise() * proj.array()).matrix()).array().rowwise() /
                      c.col_norms.transpose().array())
                         .matrix();
    // Row L2 normalization.
    const Mat<T> dz = d_logits * c.w.transpose();
    const Vec<T> rp = (dz.array() * c.z.array()).rowwise().sum();
    Mat<T> dh = ((dz - (c.z.array().colwise() * rp.array()).matrix()).array().colwise() / c.norms.array()).matrix();
    for (int l = cfg_.layers - 1; l >= 0; --l) {
        if (l + 1 < cfg_.layers) {
            Mat<T> du;
            layers::gelu_backward<T>(c.preact[l], dh, du);
            dh.swap(du);
        }
        Mat<T> dx;
        layers::linear_backward<T>(c.inputs[l], params_.mat(w_ids_[l]), dh, G.mat(w_ids_[l]), G[b_ids_[l]].data(), &dx);
        dh.swap(dx);
    }
    return dh;
}

template class ProjectionHead<float>;
template class ProjectionHead<double>;

}  // namespace pssl
