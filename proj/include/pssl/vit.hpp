#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pssl/image.hpp"
#include "pssl/layers.hpp"
#include "pssl/params.hpp"
#include "pssl/rng.hpp"

namespace pssl {

enum class MlpActivation { gelu, swiglu };

struct ModelConfig {
    int patch_size = 8;
    int embed_dim = 128;
    int depth = 4;
    int heads = 4;
    double mlp_ratio = 4.0;
    MlpActivation mlp_activation = MlpActivation::gelu;
    int registers = 4;
    bool qk_norm = false;
    bool dual_patchnorm = false;
    int image_size = 64;
    bool qkv_bias = true;
    bool mlp_bias = true;

    void validate() const;
    int grid() const { return image_size / patch_size; }
    int n_patches() const { return grid() * grid(); }
    int head_dim() const { return embed_dim / heads; }
    int patch_dim() const { return patch_size * patch_size * 3; }
    /// GELU: ratio * dim. SwiGLU: two thirds of that, rounded up to a multiple of 8.
    int mlp_hidden() const;

    static ModelConfig toy();
    static ModelConfig ablation();        // ViT-B/16
    static ModelConfig virchow2();        // ViT-H/14
    static ModelConfig virchow2g();       // ViT-G/14
    static ModelConfig virchow2g_mini();  // ViT-S/14
};

/// Closed-form parameter count for a configuration.
std::size_t parameter_count(const ModelConfig& cfg);

struct ForwardOptions {
    double drop_path = 0.0;  // stochastic depth rate, uniform over blocks
    Rng* rng = nullptr;      // required when drop_path > 0
    /// Optional per-image masks over patch positions (1 = replaced by the mask token).
    const std::vector<std::vector<std::uint8_t>>* masks = nullptr;
};

template <class T>
struct TokenBatch {
    int batch = 0;
    int seq = 0;
    int registers = 0;
    int patches = 0;
    Mat<T> tokens;  // [batch * seq, dim]; per image: cls, registers, patches

    Eigen::Index cls_row(int b) const { return static_cast<Eigen::Index>(b) * seq; }
    Eigen::Index register_row(int b, int r) const { return static_cast<Eigen::Index>(b) * seq + 1 + r; }
    Eigen::Index patch_row(int b, int p) const { return static_cast<Eigen::Index>(b) * seq + 1 + registers + p; }
    /// Class tokens stacked as [batch, dim].
    Mat<T> cls() const;
    /// Patch tokens of one image as [patches, dim].
    Mat<T> patch_tokens(int b) const;
};

template <class T>
struct TokenOutput {
    Vec<T> cls;
    Mat<T> registers;
    Mat<T> patches;
};

template <class T>
TokenOutput<T> token_output(const TokenBatch<T>& batch, int b);

enum class EmbeddingMode { cls_only, cls_mean };

/// cls_only -> cls; cls_mean -> [cls, mean of patch tokens]. Registers never contribute.
template <class T>
Vec<T> extract_embedding(const TokenOutput<T>& out, EmbeddingMode mode);

/// Patchify to rows of (py, px, channel) values scaled to (v / 255 - 0.5) / 0.25.
template <class T>
Mat<T> patchify(std::span<const Image> images, int patch);

template <class T>
struct BlockCache {
    Mat<T> x_in;
    layers::LnCache<T> ln1;
    Mat<T> h1;
    Mat<T> q, k, v;  // post-norm when QKN is on
    layers::LnCache<T> qn, kn;
    std::vector<Mat<T>> attn;  // batch * heads matrices [seq, seq]
    Mat<T> o;
    Mat<T> x_mid;
    layers::LnCache<T> ln2;
    Mat<T> h2;
    Mat<T> u;
    Mat<T> g;
    std::vector<T> scale_attn, scale_mlp;  // per-sample drop-path scales
};

template <class T>
struct VitCache {
    int batch = 0;
    int grid = 0;
    Mat<T> patches;
    layers::LnCache<T> pre_norm;
    Mat<T> patches_normed;
    Mat<T> proj;
    layers::LnCache<T> post_norm;
    Mat<double> pos_interp;  // [grid^2, native^2]; empty when grid is native
    std::vector<std::uint8_t> masked;  // batch * patches
    std::vector<BlockCache<T>> blocks;
    layers::LnCache<T> final_norm;
    T max_attn_logit = T(0);
};

/// Vision transformer with class token, registers, optional DPN / QKN and a
/// GELU or SwiGLU MLP. Backward is written out per layer.
template <class T>
class VitModel {
public:
    VitModel() = default;
    VitModel(const ModelConfig& cfg, Rng& rng);
    /// Wraps existing parameters (layout checked against the config).
    VitModel(const ModelConfig& cfg, ParamSet<T> params);

    const ModelConfig& config() const { return cfg_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }

    /// Images must share a size that is a multiple of the patch size. Positional
    /// embeddings are bilinearly resampled when the grid differs from the native one.
    TokenBatch<T> forward(std::span<const Image> images, const ForwardOptions& opts = {},
                          VitCache<T>* cache = nullptr) const;
    /// Same as forward() on pre-patchified input rows [batch * patches, patch_dim].
    TokenBatch<T> forward_patches(const Mat<T>& patches, int batch, int grid, const ForwardOptions& opts,
                                  VitCache<T>* cache) const;

    /// Accumulates parameter gradients for d(loss)/d(tokens).
    void backward(const VitCache<T>& cache, const Mat<T>& d_tokens, ParamSet<T>& grads) const;

private:
    struct BlockIds {
        std::size_t n1w, n1b, qkv_w, qkv_b = 0, qn_w = 0, qn_b = 0, kn_w = 0, kn_b = 0, proj_w, proj_b;
        std::size_t n2w, n2b, fc1_w, fc1_b = 0, fc2_w, fc2_b = 0;
    };
    void register_params();
    void init(Rng& rng);

    ModelConfig cfg_;
    ParamSet<T> params_;
    std::size_t pre_w_ = 0, pre_b_ = 0, proj_w_ = 0, proj_b_ = 0, post_w_ = 0, post_b_ = 0;
    std::size_t pos_ = 0, cls_ = 0, reg_ = 0, mask_ = 0, norm_w_ = 0, norm_b_ = 0;
    std::vector<BlockIds> blocks_;
};

extern template class VitModel<float>;
extern template class VitModel<double>;

}  // namespace pssl
