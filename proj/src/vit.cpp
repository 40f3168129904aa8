#include "pssl/vit.hpp"

#include <cmath>

namespace pssl {

void ModelConfig::validate() const {
    if (patch_size < 1 || embed_dim < 2 || depth < 0 || heads < 1 || registers < 0 || image_size < 1)
        throw ConfigError("model config has non-positive dimensions");
    if (image_size % patch_size != 0) throw ConfigError("image_size must be divisible by patch_size");
    if (embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by heads");
    if (qk_norm && head_dim() < 2) throw ConfigError("QK normalization needs head_dim >= 2");
    if (!(mlp_ratio > 0.0)) throw ConfigError("mlp_ratio must be positive");
}

int ModelConfig::mlp_hidden() const {
    const double h = mlp_ratio * embed_dim;
    if (mlp_activation == MlpActivation::gelu) return static_cast<int>(std::lround(h));
    return (static_cast<int>(h * 2.0 / 3.0) + 7) / 8 * 8;
}

ModelConfig ModelConfig::toy() {
    ModelConfig c;
    c.patch_size = 8;
    c.embed_dim = 128;
    c.depth = 4;
    c.heads = 4;
    c.registers = 4;
    c.image_size = 64;
    return c;
}

ModelConfig ModelConfig::ablation() {
    ModelConfig c;
    c.patch_size = 16;
    c.embed_dim = 768;
    c.depth = 12;
    c.heads = 12;
    c.registers = 0;
    c.image_size = 224;
    return c;
}

ModelConfig ModelConfig::virchow2() {
    ModelConfig c;
    c.patch_size = 14;
    c.embed_dim = 1280;
    c.depth = 32;
    c.heads = 16;
    c.mlp_activation = MlpActivation::swiglu;
    c.registers = 4;
    c.image_size = 224;
    return c;
}

ModelConfig ModelConfig::virchow2g() {
    ModelConfig c;
    c.patch_size = 14;
    c.embed_dim = 1792;
    c.depth = 48;
    c.heads = 28;
    c.mlp_activation = MlpActivation::swiglu;
    c.registers = 8;
    c.qk_norm = true;
    c.dual_patchnorm = true;
    c.image_size = 224;
    return c;
}

ModelConfig ModelConfig::virchow2g_mini() {
    ModelConfig c;
    c.patch_size = 14;
    c.embed_dim = 384;
    c.depth = 12;
    c.heads = 6;
    c.registers = 4;
    c.image_size = 224;
    return c;
}

std::size_t parameter_count(const ModelConfig& c) {
    const std::size_t d = c.embed_dim, p = c.patch_dim(), h = c.mlp_hidden();
    std::size_t n = p * d + d;                       // projection
    if (c.dual_patchnorm) n += 2 * p + 2 * d;        // pre and post norms
    n += (1 + c.n_patches()) * d + d + c.registers * d + d;  // pos, cls, registers, mask token
    std::size_t block = 2 * d + 3 * d * d + (c.qkv_bias ? 3 * d : 0) + d * d + d + 2 * d;
    if (c.qk_norm) block += 4 * static_cast<std::size_t>(c.head_dim());
    const std::size_t fc1_out = c.mlp_activation == MlpActivation::swiglu ? 2 * h : h;
    block += d * fc1_out + (c.mlp_bias ? fc1_out : 0) + h * d + (c.mlp_bias ? d : 0);
    return n + c.depth * block + 2 * d;
}

// ---------------------------------------------------------------------------

template <class T>
Mat<T> TokenBatch<T>::cls() const {
    Mat<T> out(batch, tokens.cols());
    for (int b = 0; b < batch; ++b) out.row(b) = tokens.row(cls_row(b));
    return out;
}

template <class T>
Mat<T> TokenBatch<T>::patch_tokens(int b) const {
    return tokens.block(patch_row(b, 0), 0, patches, tokens.cols());
}

template <class T>
TokenOutput<T> token_output(const TokenBatch<T>& batch, int b) {
    TokenOutput<T> out;
    out.cls = batch.tokens.row(batch.cls_row(b)).transpose();
    out.registers = batch.tokens.block(batch.register_row(b, 0), 0, batch.registers, batch.tokens.cols());
    out.patches = batch.patch_tokens(b);
    return out;
}

template <class T>
Vec<T> extract_embedding(const TokenOutput<T>& out, EmbeddingMode mode) {
    if (mode == EmbeddingMode::cls_only) return out.cls;
    const Eigen::Index d = out.cls.size();
    Vec<T> e(2 * d);
    e.head(d) = out.cls;
    if (out.patches.rows() > 0)
        e.tail(d) = out.patches.colwise().mean().transpose();
    else
        e.tail(d).setZero();
    return e;
}

template <class T>
Mat<T> patchify(std::span<const Image> images, int patch) {
    if (images.empty()) throw DimensionError("patchify needs at least one image");
    const int h = images[0].height, w = images[0].width;
    if (h % patch != 0 || w % patch != 0 || h != w)
        throw DimensionError("image " + std::to_string(h) + "x" + std::to_string(w) +
                             " is not a square multiple of patch size " + std::to_string(patch));
    const int g = h / patch;
    const int pdim = patch * patch * 3;
    Mat<T> out(static_cast<Eigen::Index>(images.size()) * g * g, pdim);
    for (std::size_t b = 0; b < images.size(); ++b) {
        const Image& img = images[b];
        if (img.height != h || img.width != w) throw DimensionError("patchify batch has mixed image sizes");
        for (int gy = 0; gy < g; ++gy)
            for (int gx = 0; gx < g; ++gx) {
                const Eigen::Index row = static_cast<Eigen::Index>(b) * g * g + gy * g + gx;
                int col = 0;
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        for (int c = 0; c < 3; ++c)
                            out(row, col++) =
                                static_cast<T>((img.at(gy * patch + py, gx * patch + px, c) / 255.0 - 0.5) / 0.25);
            }
    }
    return out;
}

// ---------------------------------------------------------------------------

template <class T>
VitModel<T>::VitModel(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    register_params();
    init(rng);
}

template <class T>
VitModel<T>::VitModel(const ModelConfig& cfg, ParamSet<T> params) : cfg_(cfg) {
    cfg_.validate();
    register_params();
    if (!params_.same_layout(params)) throw ConfigError("parameter layout does not match model config");
    params_ = std::move(params);
}

template <class T>
void VitModel<T>::register_params() {
    const std::size_t d = cfg_.embed_dim, p = cfg_.patch_dim(), h = cfg_.mlp_hidden();
    if (cfg_.dual_patchnorm) {
        pre_w_ = params_.add("patch_embed.pre_norm.weight", {p}, T(1));
        pre_b_ = params_.add("patch_embed.pre_norm.bias", {p});
    }
    proj_w_ = params_.add("patch_embed.proj.weight", {p, d});
    proj_b_ = params_.add("patch_embed.proj.bias", {d});
    if (cfg_.dual_patchnorm) {
        post_w_ = params_.add("patch_embed.post_norm.weight", {d}, T(1));
        post_b_ = params_.add("patch_embed.post_norm.bias", {d});
    }
    pos_ = params_.add("pos_embed", {static_cast<std::size_t>(1 + cfg_.n_patches()), d});
    cls_ = params_.add("cls_token", {d});
    if (cfg_.registers > 0) reg_ = params_.add("register_tokens", {static_cast<std::size_t>(cfg_.registers), d});
    mask_ = params_.add("mask_token", {d});
    const std::size_t hd = cfg_.head_dim();
    const std::size_t fc1_out = cfg_.mlp_activation == MlpActivation::swiglu ? 2 * h : h;
    for (int i = 0; i < cfg_.depth; ++i) {
        const std::string pre = "blocks." + std::to_string(i) + ".";
        BlockIds b;
        b.n1w = params_.add(pre + "norm1.weight", {d}, T(1));
        b.n1b = params_.add(pre + "norm1.bias", {d});
        b.qkv_w = params_.add(pre + "attn.qkv.weight", {d, 3 * d});
        if (cfg_.qkv_bias) b.qkv_b = params_.add(pre + "attn.qkv.bias", {3 * d});
        if (cfg_.qk_norm) {
            b.qn_w = params_.add(pre + "attn.q_norm.weight", {hd}, T(1));
            b.qn_b = params_.add(pre + "attn.q_norm.bias", {hd});
            b.kn_w = params_.add(pre + "attn.k_norm.weight", {hd}, T(1));
            b.kn_b = params_.add(pre + "attn.k_norm.bias", {hd});
        }
        b.proj_w = params_.add(pre + "attn.proj.weight", {d, d});
        b.proj_b = params_.add(pre + "attn.proj.bias", {d});
        b.n2w = params_.add(pre + "norm2.weight", {d}, T(1));
        b.n2b = params_.add(pre + "norm2.bias", {d});
        b.fc1_w = params_.add(pre + "mlp.fc1.weight", {d, fc1_out});
        if (cfg_.mlp_bias) b.fc1_b = params_.add(pre + "mlp.fc1.bias", {fc1_out});
        b.fc2_w = params_.add(pre + "mlp.fc2.weight", {h, d});
        if (cfg_.mlp_bias) b.fc2_b = params_.add(pre + "mlp.fc2.bias", {d});
        blocks_.push_back(b);
    }
    norm_w_ = params_.add("norm.weight", {d}, T(1));
    norm_b_ = params_.add("norm.bias", {d});
}

template <class T>
void VitModel<T>::init(Rng& rng) {
    constexpr double sigma = 0.02;
    init_trunc_normal(params_[proj_w_], sigma, rng);
    init_trunc_normal(params_[pos_], sigma, rng);
    init_trunc_normal(params_[cls_], sigma, rng);
    if (cfg_.registers > 0) init_trunc_normal(params_[reg_], sigma, rng);
    for (const BlockIds& b : blocks_) {
        init_trunc_normal(params_[b.qkv_w], sigma, rng);
        init_trunc_normal(params_[b.proj_w], sigma, rng);
        init_trunc_normal(params_[b.fc1_w], sigma, rng);
        init_trunc_normal(params_[b.fc2_w], sigma, rng);
    }
}

namespace {

template <class T>
const T* ptr_or_null(const ParamSet<T>& ps, std::size_t id, bool present) {
    return present ? ps[id].data() : nullptr;
}

template <class T>
T* gptr_or_null(ParamSet<T>& ps, std::size_t id, bool present) {
    return present ? ps[id].data() : nullptr;
}

template <class T>
Eigen::Map<const Mat<T>> cmat(const ParamSet<T>& ps, std::size_t id) {
    return ps.mat(id);
}

// Row-major [rows, d] reinterpreted as [rows * heads, d / heads].
template <class T>
Eigen::Map<const Mat<T>> as_heads(const Mat<T>& m, int heads) {
    return {m.data(), m.rows() * heads, m.cols() / heads};
}

}  // namespace

template <class T>
TokenBatch<T> VitModel<T>::forward(std::span<const Image> images, const ForwardOptions& opts,
                                   VitCache<T>* cache) const {
    const Mat<T> patches = patchify<T>(images, cfg_.patch_size);
    return forward_patches(patches, static_cast<int>(images.size()), images[0].height / cfg_.patch_size, opts, cache);
}

template <class T>
TokenBatch<T> VitModel<T>::forward_patches(const Mat<T>& patches, int batch, int grid, const ForwardOptions& opts,
                                           VitCache<T>* cache) const {
    const ParamSet<T>& P = params_;
    const int d = cfg_.embed_dim;
    const int np = grid * grid;
    const int nreg = cfg_.registers;
    const int seq = 1 + nreg + np;
    const int heads = cfg_.heads;
    const int hd = cfg_.head_dim();
    const Eigen::Index rows = static_cast<Eigen::Index>(batch) * seq;
    if (patches.rows() != static_cast<Eigen::Index>(batch) * np || patches.cols() != cfg_.patch_dim())
        throw DimensionError("patch matrix does not match batch/grid/patch size");
    if (opts.drop_path > 0.0 && opts.rng == nullptr) throw ParameterError("stochastic depth needs an rng");

    VitCache<T> local;
    VitCache<T>& c = cache ? *cache : local;
    std::vector<BlockCache<T>> reuse;
    reuse.swap(c.blocks);
    c = VitCache<T>{};
    c.blocks.swap(reuse);
    c.batch = batch;
    c.grid = grid;
    c.blocks.resize(cfg_.depth);

    // Patch embedding.
    const Mat<T>* proj_in = &patches;
    if (cfg_.dual_patchnorm) {
        layers::layer_norm_forward<T>(patches, P[pre_w_].data(), P[pre_b_].data(), c.patches_normed, c.pre_norm);
        proj_in = &c.patches_normed;
    }
    if (cache) c.patches = patches;
    Mat<T> emb;
    layers::linear_forward<T>(*proj_in, cmat(P, proj_w_), P[proj_b_].data(), emb);
    if (cfg_.dual_patchnorm) {
        c.proj = emb;
        Mat<T> normed;
        layers::layer_norm_forward<T>(c.proj, P[post_w_].data(), P[post_b_].data(), normed, c.post_norm);
        emb.swap(normed);
    }

    // Positional embeddings for the patch grid.
    const auto pos = cmat(P, pos_);
    Mat<T> pos_patch;
    if (grid == cfg_.grid()) {
        pos_patch = pos.bottomRows(cfg_.n_patches());
    } else {
        const Mat<double> w1 = layers::interp_weights(cfg_.grid(), grid);
        c.pos_interp.resize(np, cfg_.n_patches());
        for (int oy = 0; oy < grid; ++oy)
            for (int ox = 0; ox < grid; ++ox)
                for (int iy = 0; iy < cfg_.grid(); ++iy)
                    for (int ix = 0; ix < cfg_.grid(); ++ix)
                        c.pos_interp(oy * grid + ox, iy * cfg_.grid() + ix) = w1(oy, iy) * w1(ox, ix);
        pos_patch = c.pos_interp.template cast<T>() * pos.bottomRows(cfg_.n_patches());
    }

    c.masked.assign(static_cast<std::size_t>(batch) * np, 0);
    if (opts.masks) {
        if (static_cast<int>(opts.masks->size()) != batch) throw DimensionError("mask count does not match batch");
        for (int b = 0; b < batch; ++b) {
            if (static_cast<int>((*opts.masks)[b].size()) != np) throw DimensionError("mask length != patch count");
            for (int p = 0; p < np; ++p) c.masked[static_cast<std::size_t>(b) * np + p] = (*opts.masks)[b][p];
        }
    }

    Mat<T> x(rows, d);
    const Eigen::Map<const RowVec<T>> cls_tok(P[cls_].data(), d);
    const Eigen::Map<const RowVec<T>> mask_tok(P[mask_].data(), d);
    for (int b = 0; b < batch; ++b) {
        const Eigen::Index base = static_cast<Eigen::Index>(b) * seq;
        x.row(base) = cls_tok + pos.row(0);
        for (int r = 0; r < nreg; ++r) x.row(base + 1 + r) = P.mat(reg_).row(r);
        for (int p = 0; p < np; ++p) {
            const bool m = c.masked[static_cast<std::size_t>(b) * np + p];
            x.row(base + 1 + nreg + p) = (m ? RowVec<T>(mask_tok) : RowVec<T>(emb.row(static_cast<Eigen::Index>(b) * np + p))) +
                                         pos_patch.row(p);
        }
    }

    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    c.max_attn_logit = T(0);
    for (int i = 0; i < cfg_.depth; ++i) {
        const BlockIds& id = blocks_[i];
        BlockCache<T>& bc = c.blocks[i];
        bc.scale_attn.assign(batch, T(1));
        bc.scale_mlp.assign(batch, T(1));
        if (opts.drop_path > 0.0) {
            const T keep = static_cast<T>(1.0 - opts.drop_path);
            for (int b = 0; b < batch; ++b) {
                bc.scale_attn[b] = opts.rng->bernoulli(opts.drop_path) ? T(0) : T(1) / keep;
                bc.scale_mlp[b] = opts.rng->bernoulli(opts.drop_path) ? T(0) : T(1) / keep;
            }
        }
        bc.x_in = x;
        layers::layer_norm_forward<T>(x, P[id.n1w].data(), P[id.n1b].data(), bc.h1, bc.ln1);
        Mat<T> qkv;
        layers::linear_forward<T>(bc.h1, cmat(P, id.qkv_w), ptr_or_null(P, id.qkv_b, cfg_.qkv_bias), qkv);
        bc.q = qkv.leftCols(d);
        bc.k = qkv.middleCols(d, d);
        bc.v = qkv.rightCols(d);
        if (cfg_.qk_norm) {
            Mat<T> qh = as_heads(bc.q, heads), kh = as_heads(bc.k, heads), out;
            layers::layer_norm_forward<T>(qh, P[id.qn_w].data(), P[id.qn_b].data(), out, bc.qn);
            bc.q = Eigen::Map<const Mat<T>>(out.data(), rows, d);
            layers::layer_norm_forward<T>(kh, P[id.kn_w].data(), P[id.kn_b].data(), out, bc.kn);
            bc.k = Eigen::Map<const Mat<T>>(out.data(), rows, d);
        }
        bc.o.resize(rows, d);
        bc.attn.resize(static_cast<std::size_t>(batch) * heads);
        for (int b = 0; b < batch; ++b) {
            const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq;
            for (int h = 0; h < heads; ++h) {
                Mat<T>& a = bc.attn[static_cast<std::size_t>(b) * heads + h];
                a.noalias() = bc.q.block(r0, h * hd, seq, hd) * bc.k.block(r0, h * hd, seq, hd).transpose();
                a *= scale;
                c.max_attn_logit = std::max(c.max_attn_logit, a.cwiseAbs().maxCoeff());
                softmax_rows_inplace<T>(a);
                bc.o.block(r0, h * hd, seq, hd).noalias() = a * bc.v.block(r0, h * hd, seq, hd);
            }
        }
        Mat<T> attn_out;
        layers::linear_forward<T>(bc.o, cmat(P, id.proj_w), P[id.proj_b].data(), attn_out);
        for (int b = 0; b < batch; ++b)
            x.middleRows(static_cast<Eigen::Index>(b) * seq, seq) +=
                bc.scale_attn[b] * attn_out.middleRows(static_cast<Eigen::Index>(b) * seq, seq);
        bc.x_mid = x;
        layers::layer_norm_forward<T>(x, P[id.n2w].data(), P[id.n2b].data(), bc.h2, bc.ln2);
        layers::linear_forward<T>(bc.h2, cmat(P, id.fc1_w), ptr_or_null(P, id.fc1_b, cfg_.mlp_bias), bc.u);
        if (cfg_.mlp_activation == MlpActivation::gelu)
            layers::gelu_forward<T>(bc.u, bc.g);
        else
            layers::swiglu_forward<T>(bc.u, bc.g);
        Mat<T> mlp_out;
        layers::linear_forward<T>(bc.g, cmat(P, id.fc2_w), ptr_or_null(P, id.fc2_b, cfg_.mlp_bias), mlp_out);
        for (int b = 0; b < batch; ++b)
            x.middleRows(static_cast<Eigen::Index>(b) * seq, seq) +=
                bc.scale_mlp[b] * mlp_out.middleRows(static_cast<Eigen::Index>(b) * seq, seq);
        if (!x.allFinite()) throw NumericError("non-finite activations after block " + std::to_string(i));
        if (!cache) bc = BlockCache<T>{};
    }

    TokenBatch<T> out;
    out.batch = batch;
    out.seq = seq;
    out.registers = nreg;
    out.patches = np;
    layers::layer_norm_forward<T>(x, P[norm_w_].data(), P[norm_b_].data(), out.tokens, c.final_norm);
    return out;
}

template <class T>
void VitModel<T>::backward(const VitCache<T>& c, const Mat<T>& d_tokens, ParamSet<T>& G) const {
    const ParamSet<T>& P = params_;
    const int d = cfg_.embed_dim;
    const int batch = c.batch;
    const int grid = c.grid;
    const int np = grid * grid;
    const int nreg = cfg_.registers;
    const int seq = 1 + nreg + np;
    const int heads = cfg_.heads;
    const int hd = cfg_.head_dim();
    const Eigen::Index rows = static_cast<Eigen::Index>(batch) * seq;
    if (d_tokens.rows() != rows || d_tokens.cols() != d) throw DimensionError("token gradient shape mismatch");
    if (static_cast<int>(c.blocks.size()) != cfg_.depth || (cfg_.depth > 0 && c.blocks[0].x_in.rows() != rows))
        throw ParameterError("backward needs a cache from forward() with caching enabled");

    Mat<T> dx;
    layers::layer_norm_backward<T>(d_tokens, c.final_norm, P[norm_w_].data(), G[norm_w_].data(), G[norm_b_].data(), dx);

    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    for (int i = cfg_.depth - 1; i >= 0; --i) {
        const BlockIds& id = blocks_[i];
        const BlockCache<T>& bc = c.blocks[i];

        // MLP branch.
        Mat<T> dm(rows, d);
        for (int b = 0; b < batch; ++b)
            dm.middleRows(static_cast<Eigen::Index>(b) * seq, seq) =
                bc.scale_mlp[b] * dx.middleRows(static_cast<Eigen::Index>(b) * seq, seq);
        Mat<T> dg, du, dh2, tmp;
        layers::linear_backward<T>(bc.g, cmat(P, id.fc2_w), dm, G.mat(id.fc2_w),
                                   gptr_or_null(G, id.fc2_b, cfg_.mlp_bias), &dg);
        if (cfg_.mlp_activation == MlpActivation::gelu)
            layers::gelu_backward<T>(bc.u, dg, du);
        else
            layers::swiglu_backward<T>(bc.u, dg, du);
        layers::linear_backward<T>(bc.h2, cmat(P, id.fc1_w), du, G.mat(id.fc1_w),
                                   gptr_or_null(G, id.fc1_b, cfg_.mlp_bias), &dh2);
        layers::layer_norm_backward<T>(dh2, bc.ln2, P[id.n2w].data(), G[id.n2w].data(), G[id.n2b].data(), tmp);
        dx += tmp;

        // Attention branch.
        Mat<T> da(rows, d);
        for (int b = 0; b < batch; ++b)
            da.middleRows(static_cast<Eigen::Index>(b) * seq, seq) =
                bc.scale_attn[b] * dx.middleRows(static_cast<Eigen::Index>(b) * seq, seq);
        Mat<T> d_o;
        layers::linear_backward<T>(bc.o, cmat(P, id.proj_w), da, G.mat(id.proj_w), G[id.proj_b].data(), &d_o);
        Mat<T> dq(rows, d), dk(rows, d), dv(rows, d);
        Mat<T> dA(seq, seq), dlog(seq, seq);
        Vec<T> rs(seq);
        for (int b = 0; b < batch; ++b) {
            const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq;
            for (int h = 0; h < heads; ++h) {
                const Mat<T>& a = bc.attn[static_cast<std::size_t>(b) * heads + h];
                const auto doh = d_o.block(r0, h * hd, seq, hd);
                dA.noalias() = doh * bc.v.block(r0, h * hd, seq, hd).transpose();
                dv.block(r0, h * hd, seq, hd).noalias() = a.transpose() * doh;
                rs = (dA.array() * a.array()).rowwise().sum();
                dlog = (a.array() * (dA.array().colwise() - rs.array())).matrix() * scale;
                dq.block(r0, h * hd, seq, hd).noalias() = dlog * bc.k.block(r0, h * hd, seq, hd);
                dk.block(r0, h * hd, seq, hd).noalias() = dlog.transpose() * bc.q.block(r0, h * hd, seq, hd);
            }
        }
        if (cfg_.qk_norm) {
            Mat<T> dqh = as_heads(dq, heads), dkh = as_heads(dk, heads), out;
            layers::layer_norm_backward<T>(dqh, bc.qn, P[id.qn_w].data(), G[id.qn_w].data(), G[id.qn_b].data(), out);
            dq = Eigen::Map<const Mat<T>>(out.data(), rows, d);
            layers::layer_norm_backward<T>(dkh, bc.kn, P[id.kn_w].data(), G[id.kn_w].data(), G[id.kn_b].data(), out);
            dk = Eigen::Map<const Mat<T>>(out.data(), rows, d);
        }
        Mat<T> dqkv(rows, 3 * d);
        dqkv.leftCols(d) = dq;
        dqkv.middleCols(d, d) = dk;
        dqkv.rightCols(d) = dv;
        Mat<T> dh1;
        layers::linear_backward<T>(bc.h1, cmat(P, id.qkv_w), dqkv, G.mat(id.qkv_w),
                                   gptr_or_null(G, id.qkv_b, cfg_.qkv_bias), &dh1);
        layers::layer_norm_backward<T>(dh1, bc.ln1, P[id.n1w].data(), G[id.n1w].data(), G[id.n1b].data(), tmp);
        dx += tmp;
    }

    // Token assembly.
    auto gpos = G.mat(pos_);
    Eigen::Map<RowVec<T>> gcls(G[cls_].data(), d);
    Eigen::Map<RowVec<T>> gmask(G[mask_].data(), d);
    Mat<T> demb = Mat<T>::Zero(static_cast<Eigen::Index>(batch) * np, d);
    Mat<T> dpos_patch = Mat<T>::Zero(np, d);
    for (int b = 0; b < batch; ++b) {
        const Eigen::Index base = static_cast<Eigen::Index>(b) * seq;
        gcls += dx.row(base);
        gpos.row(0) += dx.row(base);
        for (int r = 0; r < nreg; ++r) G.mat(reg_).row(r) += dx.row(base + 1 + r);
        for (int p = 0; p < np; ++p) {
            const auto g = dx.row(base + 1 + nreg + p);
            dpos_patch.row(p) += g;
            if (c.masked[static_cast<std::size_t>(b) * np + p])
                gmask += g;
            else
                demb.row(static_cast<Eigen::Index>(b) * np + p) = g;
        }
    }
    if (c.pos_interp.size() == 0)
        gpos.bottomRows(cfg_.n_patches()) += dpos_patch;
    else
        gpos.bottomRows(cfg_.n_patches()) += c.pos_interp.template cast<T>().transpose() * dpos_patch;

    if (cfg_.dual_patchnorm) {
        Mat<T> dproj;
        layers::layer_norm_backward<T>(demb, c.post_norm, P[post_w_].data(), G[post_w_].data(), G[post_b_].data(), dproj);
        demb.swap(dproj);
    }
    const Mat<T>& proj_in = cfg_.dual_patchnorm ? c.patches_normed : c.patches;
    Mat<T> dpatches;
    layers::linear_backward<T>(proj_in, cmat(P, proj_w_), demb, G.mat(proj_w_), G[proj_b_].data(),
                               cfg_.dual_patchnorm ? &dpatches : nullptr);
    if (cfg_.dual_patchnorm) {
        Mat<T> unused;
        layers::layer_norm_backward<T>(dpatches, c.pre_norm, P[pre_w_].data(), G[pre_w_].data(), G[pre_b_].data(), unused);
    }
}

template struct TokenBatch<float>;
template struct TokenBatch<double>;
template class VitModel<float>;
template class VitModel<double>;
template TokenOutput<float> token_output(const TokenBatch<float>&, int);
template TokenOutput<double> token_output(const TokenBatch<double>&, int);
template Vec<float> extract_embedding(const TokenOutput<float>&, EmbeddingMode);
template Vec<double> extract_embedding(const TokenOutput<double>&, EmbeddingMode);
template Mat<float> patchify<float>(std::span<const Image>, int);
template Mat<double> patchify<double>(std::span<const Image>, int);

}  // namespace pssl
