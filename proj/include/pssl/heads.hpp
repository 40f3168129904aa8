#pragma once

#include <string>
#include <vector>

#include "pssl/layers.hpp"
#include "pssl/params.hpp"
#include "pssl/rng.hpp"

namespace pssl {

struct HeadConfig {
    int layers = 3;
    int bottleneck_dim = 384;
    int hidden_dim = 2048;
    int prototypes = 1024;
    bool shared_heads = false;

    void validate() const;
};

template <class T>
struct HeadCache {
    std::vector<Mat<T>> inputs;   // input to each MLP linear
    std::vector<Mat<T>> preact;   // pre-GELU activations of hidden layers
    Mat<T> bottleneck;            // MLP output before L2 normalization
    Vec<T> norms;                 // row norms of `bottleneck`
    Mat<T> z;                     // unit-normalized bottleneck
    Mat<T> w;                     // column-normalized prototypes
    Vec<T> col_norms;
};

/// MLP (Linear, GELU, ..., Linear to bottleneck), L2 normalization, then a
/// weight-normalized prototype layer without bias.
template <class T>
class ProjectionHead {
public:
    ProjectionHead() = default;
    ProjectionHead(const HeadConfig& cfg, int in_dim, Rng& rng);
    ProjectionHead(const HeadConfig& cfg, int in_dim, ParamSet<T> params);

    const HeadConfig& config() const { return cfg_; }
    int in_dim() const { return in_dim_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }

    /// x: [n, in_dim] -> logits [n, prototypes].
    Mat<T> forward(const Mat<T>& x, HeadCache<T>* cache = nullptr) const;
    /// Accumulates parameter gradients and returns d(loss)/dx.
    Mat<T> backward(const HeadCache<T>& cache, const Mat<T>& d_logits, ParamSet<T>& grads) const;

private:
    void register_params();

    HeadConfig cfg_;
    int in_dim_ = 0;
    ParamSet<T> params_;
    std::vector<std::size_t> w_ids_, b_ids_;
    std::size_t proto_ = 0;
};

extern template class ProjectionHead<float>;
extern template class ProjectionHead<double>;

}  // namespace pssl
