#include <doctest.h>

#include <cmath>
#include <limits>

#include "pssl/layers.hpp"
#include "pssl/vit.hpp"
#include "grad_checks.hpp"

using namespace pssl;

namespace {

using testing::jitter;
using testing::random_images;

ModelConfig tiny(bool qk, bool dpn, MlpActivation act, int registers) {
    return testing::tiny_model(qk, dpn, act, registers);
}

double gelu_ref(double u) { return 0.5 * u * (1 + std::tanh(0.7978845608028654 * (u + 0.044715 * u * u * u))); }

MatD ln_ref(const MatD& x, const Tensor<double>& g, const Tensor<double>& b) {
    MatD y(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double m = 0, v = 0;
        for (Eigen::Index j = 0; j < x.cols(); ++j) m += x(i, j);
        m /= x.cols();
        for (Eigen::Index j = 0; j < x.cols(); ++j) v += (x(i, j) - m) * (x(i, j) - m);
        v /= x.cols();
        for (Eigen::Index j = 0; j < x.cols(); ++j) y(i, j) = (x(i, j) - m) / std::sqrt(v + 1e-6) * g[j] + b[j];
    }
    return y;
}

// Plain pre-norm ViT written directly from the parameter names.
MatD reference_forward(const ModelConfig& cfg, const ParamSet<double>& P, const Image& img) {
    const int p = cfg.patch_size, g = img.height / p, np = g * g, d = cfg.embed_dim, H = cfg.heads, hd = d / H;
    MatD x(1 + np, d);
    const MatD& W = P.at("patch_embed.proj.weight").matrix();
    for (int t = 0; t < np; ++t) {
        const int gy = t / g, gx = t % g;
        for (int o = 0; o < d; ++o) {
            double s = P.at("patch_embed.proj.bias")[o];
            int k = 0;
            for (int py = 0; py < p; ++py)
                for (int px = 0; px < p; ++px)
                    for (int c = 0; c < 3; ++c) s += ((img.at(gy * p + py, gx * p + px, c) / 255.0 - 0.5) / 0.25) * W(k++, o);
            x(1 + t, o) = s + P.at("pos_embed").at(1 + t, o);
        }
    }
    for (int o = 0; o < d; ++o) x(0, o) = P.at("cls_token")[o] + P.at("pos_embed").at(0, o);
    const int n = 1 + np;
    for (int blk = 0; blk < cfg.depth; ++blk) {
        const std::string pre = "blocks." + std::to_string(blk) + ".";
        const MatD h = ln_ref(x, P.at(pre + "norm1.weight"), P.at(pre + "norm1.bias"));
        MatD qkv = h * P.at(pre + "attn.qkv.weight").matrix();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < 3 * d; ++j) qkv(i, j) += P.at(pre + "attn.qkv.bias")[j];
        MatD o = MatD::Zero(n, d);
        for (int head = 0; head < H; ++head)
            for (int i = 0; i < n; ++i) {
                std::vector<double> w(n);
                double mx = -1e300, z = 0;
                for (int j = 0; j < n; ++j) {
                    double s = 0;
                    for (int k = 0; k < hd; ++k) s += qkv(i, head * hd + k) * qkv(j, d + head * hd + k);
                    w[j] = s / std::sqrt(double(hd));
                    mx = std::max(mx, w[j]);
                }
                for (double& v : w) z += (v = std::exp(v - mx));
                for (int j = 0; j < n; ++j)
                    for (int k = 0; k < hd; ++k) o(i, head * hd + k) += w[j] / z * qkv(j, 2 * d + head * hd + k);
            }
        MatD a = o * P.at(pre + "attn.proj.weight").matrix();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) x(i, j) += a(i, j) + P.at(pre + "attn.proj.bias")[j];
        const MatD h2 = ln_ref(x, P.at(pre + "norm2.weight"), P.at(pre + "norm2.bias"));
        MatD u = h2 * P.at(pre + "mlp.fc1.weight").matrix();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < u.cols(); ++j) u(i, j) = gelu_ref(u(i, j) + P.at(pre + "mlp.fc1.bias")[j]);
        MatD m = u * P.at(pre + "mlp.fc2.weight").matrix();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) x(i, j) += m(i, j) + P.at(pre + "mlp.fc2.bias")[j];
    }
    return ln_ref(x, P.at("norm.weight"), P.at("norm.bias"));
}

}  // namespace

TEST_SUITE("vit") {

TEST_CASE("token geometry") {
    Rng rng(1);
    const ModelConfig toy = ModelConfig::toy();
    CHECK(toy.patch_size == 8);
    CHECK(toy.embed_dim == 128);
    CHECK(toy.depth == 4);
    CHECK(toy.heads == 4);
    CHECK(toy.registers == 4);
    VitModel<float> m(toy, rng);
    const auto out = m.forward(random_images(2, 64, 1));
    CHECK(out.seq == 1 + 4 + 64);
    CHECK(out.tokens.rows() == 2 * 69);
    CHECK(out.tokens.cols() == 128);
    const auto t = token_output(out, 1);
    CHECK(t.registers.rows() == 4);
    CHECK(t.patches.rows() == 64);

    ModelConfig v2 = ModelConfig::virchow2();
    CHECK(v2.image_size / v2.patch_size * (v2.image_size / v2.patch_size) == 256);
    CHECK_THROWS_AS(m.forward(random_images(1, 60, 1)), DimensionError);
}

TEST_CASE("embedding dimensions") {
    TokenOutput<float> o;
    o.cls = Vec<float>::Constant(5, 1.0f);
    o.registers = Mat<float>::Constant(2, 5, 100.0f);
    o.patches = Mat<float>::Constant(3, 5, 2.0f);
    const Vec<float> cm = extract_embedding(o, EmbeddingMode::cls_mean);
    REQUIRE(cm.size() == 10);
    for (int i = 0; i < 5; ++i) {
        CHECK(cm(i) == 1.0f);
        CHECK(cm(5 + i) == 2.0f);
    }
    CHECK(extract_embedding(o, EmbeddingMode::cls_only).size() == 5);
    CHECK(2 * ModelConfig::virchow2().embed_dim == 2560);
    CHECK(2 * ModelConfig::virchow2g().embed_dim == 3584);
    CHECK(2 * ModelConfig::virchow2g_mini().embed_dim == 768);
}

TEST_CASE("config validation") {
    ModelConfig c = ModelConfig::toy();
    c.image_size = 60;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ModelConfig::toy();
    c.heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ModelConfig::toy();
    c.registers = -1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("parameter count matches the closed form") {
    for (const ModelConfig& c : {ModelConfig::toy(), tiny(true, true, MlpActivation::swiglu, 2),
                                 tiny(false, false, MlpActivation::gelu, 0)}) {
        Rng rng(1);
        VitModel<float> m(c, rng);
        CHECK(m.params().numel() == parameter_count(c));
    }
    // SwiGLU hidden width follows the two-thirds rule rounded to a multiple of 8.
    ModelConfig s = ModelConfig::virchow2();
    CHECK(s.mlp_hidden() % 8 == 0);
    CHECK(s.mlp_hidden() == (static_cast<int>(s.mlp_ratio * s.embed_dim * 2 / 3) + 7) / 8 * 8);
}

TEST_CASE("DPN makes patch tokens invariant to per-image contrast") {
    // Pre-projection norm sees each patch after an affine pixel map, so a
    // positive affine change of intensity leaves the output unchanged.
    const Image img = random_images(1, 8, 3)[0];
    Image dim = img;
    for (auto& v : dim.data) v = 0.5f * v + 40.0f;
    for (bool dpn : {true, false}) {
        Rng rng(2);
        VitModel<double> m(tiny(false, dpn, MlpActivation::gelu, 0), rng);
        jitter(m.params(), 4, 0.2);
        const double diff =
            (m.forward(std::vector<Image>{img}).tokens - m.forward(std::vector<Image>{dim}).tokens).norm();
        if (dpn)
            CHECK(diff < 1e-4);
        else
            CHECK(diff > 1e-2);
    }
}

TEST_CASE("vanilla configuration matches a hand-built reference") {
    ModelConfig c = tiny(false, false, MlpActivation::gelu, 0);
    c.depth = 2;
    Rng rng(4);
    VitModel<double> m(c, rng);
    jitter(m.params(), 6, 0.2);
    const auto imgs = random_images(2, 8, 7);
    const auto out = m.forward(imgs);
    for (int b = 0; b < 2; ++b) {
        const MatD ref = reference_forward(c, m.params(), imgs[b]);
        const MatD got = out.tokens.middleRows(b * out.seq, out.seq);
        CHECK(testing::rel_err(got, ref) <= 1e-5);
    }
}

TEST_CASE("permutation equivariance without positional embeddings") {
    ModelConfig c = tiny(true, true, MlpActivation::gelu, 2);
    c.depth = 2;
    Rng rng(5);
    VitModel<double> m(c, rng);
    jitter(m.params(), 9, 0.2);
    m.params().at("pos_embed").fill(0.0);
    Image img = random_images(1, 8, 3)[0];
    // Swap patch (0,0) with patch (1,1).
    Image sw = img;
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            for (int ch = 0; ch < 3; ++ch) std::swap(sw.at(y, x, ch), sw.at(4 + y, 4 + x, ch));
    const auto a = m.forward(std::vector<Image>{img}), b = m.forward(std::vector<Image>{sw});
    CHECK((a.tokens.row(a.cls_row(0)) - b.tokens.row(b.cls_row(0))).norm() < 1e-10);
    CHECK((a.tokens.row(a.patch_row(0, 0)) - b.tokens.row(b.patch_row(0, 3))).norm() < 1e-10);
    CHECK((a.tokens.row(a.patch_row(0, 1)) - b.tokens.row(b.patch_row(0, 1))).norm() < 1e-10);
}

TEST_CASE("identical registers stay interchangeable at init") {
    ModelConfig c = tiny(true, true, MlpActivation::gelu, 3);
    Rng rng(6);
    VitModel<double> m(c, rng);
    auto& reg = m.params().at("register_tokens");
    const auto imgs = random_images(1, 8, 1);
    const auto base = m.forward(imgs);
    // Reverse the register order.
    Tensor<double> rev = reg;
    for (int r = 0; r < 3; ++r)
        for (int j = 0; j < c.embed_dim; ++j) rev.at(r, j) = reg.at(2 - r, j);
    reg = rev;
    const auto perm = m.forward(imgs);
    CHECK((base.tokens.row(0) - perm.tokens.row(0)).norm() < 1e-10);
    for (int p = 0; p < 4; ++p)
        CHECK((base.tokens.row(base.patch_row(0, p)) - perm.tokens.row(perm.patch_row(0, p))).norm() < 1e-10);
}

TEST_CASE("zero MLP weights leave the attention residual") {
    ModelConfig c = tiny(false, false, MlpActivation::gelu, 0);
    Rng rng(7);
    VitModel<double> a(c, rng);
    jitter(a.params(), 3, 0.2);
    a.params().at("blocks.0.mlp.fc2.weight").fill(0.0);
    a.params().at("blocks.0.mlp.fc2.bias").fill(0.0);
    const auto imgs = random_images(2, 8, 2);
    const auto out = a.forward(imgs);
    // The reference with an explicit attention-only block.
    for (int b = 0; b < 2; ++b) {
        const MatD ref = reference_forward(c, a.params(), imgs[b]);
        CHECK(testing::rel_err(MatD(out.tokens.middleRows(b * out.seq, out.seq)), ref) <= 1e-5);
    }
    // fc1 has no effect once fc2 is zero.
    VitModel<double> b2 = a;
    for (auto& v : b2.params().at("blocks.0.mlp.fc1.weight").values()) v *= 3.0;
    CHECK((b2.forward(imgs).tokens - out.tokens).norm() < 1e-12);
}

TEST_CASE("QKN bounds attention logits") {
    ModelConfig on = tiny(true, false, MlpActivation::gelu, 0), off = tiny(false, false, MlpActivation::gelu, 0);
    on.embed_dim = off.embed_dim = 32;
    Rng r1(8), r2(8);
    VitModel<float> a(on, r1), b(off, r2);
    for (auto* m : {&a, &b}) {
        jitter(m->params(), 5, 0.05);
        for (auto& v : m->params().at("blocks.0.attn.qkv.weight").values()) v *= 30.0f;
    }
    // |q.k| / sqrt(hd) is bounded by the normalized query and key norms.
    auto bound_norm = [&](const std::string& pre) {
        const auto& g = a.params().at(pre + ".weight");
        const auto& bias = a.params().at(pre + ".bias");
        double gmax = 0, bn = 0;
        for (std::size_t i = 0; i < g.values().size(); ++i) {
            gmax = std::max(gmax, std::abs(double(g[i])));
            bn += double(bias[i]) * bias[i];
        }
        return gmax * std::sqrt(double(on.head_dim())) + std::sqrt(bn);
    };
    const double bound = bound_norm("blocks.0.attn.q_norm") * bound_norm("blocks.0.attn.k_norm") /
                         std::sqrt(double(on.head_dim()));
    const auto imgs = random_images(4, 8, 9);
    VitCache<float> ca, cb;
    a.forward(imgs, {}, &ca);
    b.forward(imgs, {}, &cb);
    CHECK(ca.max_attn_logit <= bound * (1 + 1e-5));
    CHECK(cb.max_attn_logit > 3 * bound);
}

TEST_CASE("non-finite activations name the block") {
    ModelConfig c = tiny(false, false, MlpActivation::gelu, 0);
    c.depth = 2;
    Rng rng(1);
    VitModel<float> m(c, rng);
    m.params().at("blocks.1.mlp.fc2.bias")[0] = std::numeric_limits<float>::infinity();
    try {
        m.forward(random_images(1, 8, 1));
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("block 1") != std::string::npos);
    }
}

TEST_CASE("layer gradients match finite differences") {
    for (const auto& [name, err] : testing::layer_gradient_errors(12)) {
        INFO(name);
        CHECK(err <= 1e-4);
    }
}

TEST_CASE("network gradients match finite differences") {
    std::string worst;
    SUBCASE("QKN, DPN, registers, masked tokens") {
        const double e = testing::network_gradient_error(tiny(true, true, MlpActivation::gelu, 2), 8, 0.0, true, &worst);
        INFO("worst tensor " << worst);
        CHECK(e <= 1e-4);
    }
    SUBCASE("SwiGLU with stochastic depth") {
        const double e = testing::network_gradient_error(tiny(false, false, MlpActivation::swiglu, 0), 8, 0.3, false, &worst);
        INFO("worst tensor " << worst);
        CHECK(e <= 1e-4);
    }
    SUBCASE("resampled positional embeddings") {
        const double e = testing::network_gradient_error(tiny(true, true, MlpActivation::gelu, 1), 12, 0.0, true, &worst);
        INFO("worst tensor " << worst);
        CHECK(e <= 1e-4);
    }
}

}  // TEST_SUITE
