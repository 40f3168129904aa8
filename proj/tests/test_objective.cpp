#include <doctest.h>

#include <cmath>
#include <numbers>

#include "pssl/errors.hpp"
#include "pssl/heads.hpp"
#include "pssl/objective.hpp"
#include "support.hpp"

using namespace pssl;

namespace {

MatD normalize_rows(MatD z) { return testing::unit_rows(std::move(z)); }

// Probability-space Sinkhorn as usually written: alternate prototype and
// sample normalization of exp(logits), columns scaled by n at the end.
MatD sinkhorn_reference(const MatD& logits, int iters) {
    const double n = logits.rows(), k = logits.cols();
    MatD q = (logits.array() - logits.maxCoeff()).exp().matrix();
    q /= q.sum();
    for (int it = 0; it < iters; ++it) {
        for (Eigen::Index c = 0; c < q.cols(); ++c) q.col(c) /= q.col(c).sum() * k;
        for (Eigen::Index r = 0; r < q.rows(); ++r) q.row(r) /= q.row(r).sum() * n;
    }
    return q * n;
}

double column_deviation(const MatD& p) {
    const double target = double(p.rows()) / p.cols();
    double worst = 0;
    for (Eigen::Index c = 0; c < p.cols(); ++c) worst = std::max(worst, std::abs(p.col(c).sum() - target) / target);
    return worst;
}

double cross_entropy(const MatD& t, const MatD& s, double temp) {
    const MatD p = softmax_temp(s, temp);
    return -(t.array() * p.array().log()).sum() / t.rows();
}

}  // namespace

TEST_SUITE("objective") {

TEST_CASE("vmf kernel") {
    const std::vector<double> x{1, 0, 0}, y{0, 1, 0}, nx{-1, 0, 0}, bad{1, 1, 0};
    CHECK(vmf_kernel(x, x, 5.0) == doctest::Approx(std::exp(5.0)).epsilon(1e-12));
    CHECK(vmf_kernel(x, y, 5.0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(vmf_kernel(x, nx, 5.0) == doctest::Approx(0.006737947).epsilon(1e-8));
    CHECK_THROWS(vmf_kernel(x, bad, 5.0));
}

TEST_CASE("kde entropy hand values") {
    MatD one(1, 3);
    one << 0, 0, 1;
    CHECK(std::abs(kde_entropy(one, 5.0).value + 5.0) <= 1e-9);
    MatD same(2, 3);
    same << 0, 0, 1, 0, 0, 1;
    CHECK(std::abs(kde_entropy(same, 5.0).value + (5.0 + std::log(2.0))) <= 1e-9);
    MatD anti(2, 3);
    anti << 0, 0, 1, 0, 0, -1;
    CHECK(std::abs(kde_entropy(anti, 5.0).value + std::log(std::exp(5.0) + std::exp(-5.0))) <= 1e-9);
    MatD raw(1, 3);
    raw << 1, 1, 0;
    CHECK_THROWS(kde_entropy(raw, 5.0));
}

TEST_CASE("koleo entropy hand values") {
    MatD anti(2, 2);
    anti << 1, 0, -1, 0;
    CHECK(koleo_entropy(anti, 1e-8).value == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    MatD same(2, 2);
    same << 1, 0, 1, 0;
    CHECK(koleo_entropy(same, 1e-8).value == doctest::Approx(std::log(1e-8)).epsilon(1e-12));
    MatD tri(3, 2);
    for (int i = 0; i < 3; ++i) {
        const double a = 2 * std::numbers::pi * i / 3;
        tri(i, 0) = std::cos(a);
        tri(i, 1) = std::sin(a);
    }
    CHECK(koleo_entropy(tri, 1e-8).value == doctest::Approx(std::log(std::sqrt(3.0))).epsilon(1e-12));
    CHECK_THROWS_AS(koleo_entropy(MatD(1, 2), 1e-8), ParameterError);
}

TEST_CASE("kde gradient matches finite differences on the sphere") {
    Rng rng(3);
    MatD z = normalize_rows(testing::random_mat(8, 16, rng));
    const EntropyEstimate e = kde_entropy(z, 5.0);
    // Differentiating through the normalization equals the tangent projection.
    MatD raw = z;
    auto f = [&]() { return kde_entropy(normalize_rows(raw), 5.0).value; };
    CHECK(testing::rel_err(e.grad, testing::numeric_grad(raw, f)) <= 1e-5);
}

TEST_CASE("koleo gradient matches finite differences") {
    Rng rng(4);
    MatD z = normalize_rows(testing::random_mat(8, 16, rng));
    const EntropyEstimate e = koleo_entropy(z, 1e-8);
    auto f = [&]() { return koleo_entropy(z, 1e-8).value; };
    CHECK(testing::rel_err(e.grad, testing::numeric_grad(z, f)) <= 1e-5);
}

TEST_CASE("kde gradient stays bounded while koleo blows up") {
    Rng rng(5);
    const double kappa = 5.0;
    double koleo_first = 0, koleo_last = 0;
    for (int e = 1; e <= 6; ++e) {
        const double dist = std::pow(10.0, -e);
        MatD z = normalize_rows(testing::random_mat(16, 8, rng));
        // Place row 1 at chord distance `dist` from row 0.
        RowVec<double> t = testing::random_mat(1, 8, rng).row(0);
        t -= t.dot(z.row(0)) * z.row(0);
        t.normalize();
        z.row(1) = (z.row(0) + dist * t).normalized();
        const EntropyEstimate k = kde_entropy(z, kappa), l = koleo_entropy(z, 1e-8);
        for (Eigen::Index i = 0; i < z.rows(); ++i) CHECK(k.grad.row(i).norm() <= 2 * kappa);
        double mx = 0;
        for (Eigen::Index i = 0; i < z.rows(); ++i) mx = std::max(mx, l.grad.row(i).norm());
        if (e == 1) koleo_first = mx;
        koleo_last = mx;
    }
    CHECK(koleo_last >= 100 * koleo_first);

    MatD coincident(4, 3);
    coincident << 1, 0, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0;
    const EntropyEstimate k = kde_entropy(coincident, kappa);
    for (Eigen::Index i = 0; i < 4; ++i) CHECK(k.grad.row(i).norm() <= 2 * kappa);
}

TEST_CASE("kde entropy depends only on inner products") {
    Rng rng(6);
    const MatD z = normalize_rows(testing::random_mat(10, 6, rng));
    const double h = kde_entropy(z, 5.0).value;
    MatD perm = z;
    for (int i = 0; i < 10; ++i) perm.row(i) = z.row((i * 3 + 1) % 10);
    CHECK(std::abs(kde_entropy(perm, 5.0).value - h) <= 1e-12);
    const Eigen::HouseholderQR<MatD> qr(testing::random_mat(6, 6, rng));
    const MatD Q = qr.householderQ();
    CHECK(std::abs(kde_entropy(normalize_rows(z * Q), 5.0).value - h) <= 1e-10);
}

TEST_CASE("regularizer loss") {
    Rng rng(7);
    const MatD z = normalize_rows(testing::random_mat(6, 4, rng));
    RegularizerConfig cfg;
    cfg.kind = RegularizerKind::none;
    const auto none = regularizer_loss(z, cfg);
    CHECK(none.loss == 0.0);
    CHECK(none.grad.norm() == 0.0);
    cfg.kind = RegularizerKind::kde;
    const auto kde = regularizer_loss(z, cfg);
    CHECK(kde.loss == -kde_entropy(z, cfg.kappa).value);
    CHECK(parse_regularizer("koleo") == RegularizerKind::koleo);
    CHECK_THROWS_AS(parse_regularizer("vicreg"), ConfigError);
}

TEST_CASE("sinkhorn") {
    const MatD flat = MatD::Constant(4, 8, 0.3);
    const MatD u = sinkhorn_center(flat);
    CHECK((u.array() - 1.0 / 8).abs().maxCoeff() <= 1e-12);

    MatD two(2, 2);
    two << std::log(2.0), 0, 0, std::log(2.0);
    const MatD p = sinkhorn_center(two);
    for (int i = 0; i < 2; ++i) {
        CHECK(p.row(i).sum() == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(p.col(i).sum() == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(p(0, 0) > p(0, 1));
    CHECK(p(1, 1) > p(1, 0));

    Rng rng(8);
    const MatD logits = testing::random_mat(64, 256, rng, 3.0);
    for (int it : {1, 3, 5}) CHECK((sinkhorn_center(logits, it) - sinkhorn_reference(logits, it)).cwiseAbs().maxCoeff() <= 1e-12);
    double prev = column_deviation(sinkhorn_center(logits, 0));
    for (int it = 1; it <= 8; ++it) {
        const double dev = column_deviation(sinkhorn_center(logits, it));
        CHECK(dev < prev);
        prev = dev;
    }
    const MatD three = sinkhorn_center(logits, 3);
    for (Eigen::Index r = 0; r < three.rows(); ++r) CHECK(std::abs(three.row(r).sum() - 1.0) <= 1e-6);
}

TEST_CASE("dino loss") {
    Rng rng(9);
    const int n = 3, K = 5, G = 2, V = 10;
    std::vector<MatD> s, t;
    for (int v = 0; v < V; ++v) s.push_back(testing::random_mat(n, K, rng));
    for (int g = 0; g < G; ++g) t.push_back(softmax_temp(testing::random_mat(n, K, rng), 0.5));
    const auto r = dino_loss(s, t, 0.1);
    CHECK(r.pairs == 18);

    // Independent evaluation: average CE over every (g, v != g) pair.
    double want = 0;
    for (int g = 0; g < G; ++g)
        for (int v = 0; v < V; ++v)
            if (v != g) want += cross_entropy(t[g], s[v], 0.1);
    CHECK(r.loss == doctest::Approx(want / 18).epsilon(1e-12));

    for (int v : {0, 1, 5}) {
        auto f = [&]() { return dino_loss(s, t, 0.1).loss; };
        CHECK(testing::rel_err(r.grads[v], testing::numeric_grad(s[v], f)) <= 1e-5);
    }

    // Uniform teacher: CE = ln K + KL(uniform || student), so ln K exactly for a
    // uniform student and unchanged by permuting any student row.
    std::vector<MatD> uni{MatD::Constant(n, 4, 0.25)};
    std::vector<MatD> flat{MatD::Constant(n, 4, 0.7), MatD::Constant(n, 4, -1.2)};
    CHECK(dino_loss(flat, uni, 0.1).loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    std::vector<MatD> st{testing::random_mat(n, 4, rng), testing::random_mat(n, 4, rng)};
    const double before = dino_loss(st, uni, 0.1).loss;
    CHECK(before > std::log(4.0));
    std::swap(st[1](0, 0), st[1](0, 3));
    std::swap(st[1](2, 1), st[1](2, 2));
    CHECK(dino_loss(st, uni, 0.1).loss == doctest::Approx(before).epsilon(1e-12));
    CHECK_THROWS_AS(dino_loss(st, uni, 0.0), ParameterError);
}

TEST_CASE("dino loss minimum is at the teacher distribution") {
    Rng rng(10);
    const double temp = 0.1;
    MatD teacher(1, 4);
    teacher << 0.1, 0.2, 0.3, 0.4;
    std::vector<MatD> t{teacher}, s{testing::random_mat(1, 4, rng), testing::random_mat(1, 4, rng)};
    for (int it = 0; it < 5000; ++it) {
        const auto r = dino_loss(s, t, temp);
        s[1] -= 0.05 * r.grads[1];
    }
    CHECK((softmax_temp(s[1], temp) - teacher).cwiseAbs().maxCoeff() <= 1e-6);

    MatD one_hot = MatD::Zero(1, 4);
    one_hot(0, 2) = 1.0;
    MatD match = MatD::Zero(1, 4);
    match(0, 2) = 1.0;
    std::vector<MatD> oh{one_hot}, sv{match, match};
    CHECK(dino_loss(sv, oh, 0.01).loss < dino_loss(sv, oh, 0.1).loss);
    CHECK(dino_loss(sv, oh, 0.01).loss < 1e-30);
}

TEST_CASE("ibot loss") {
    Rng rng(11);
    const int rows = 6, K = 5;
    MatD s = testing::random_mat(rows, K, rng);
    const MatD t = softmax_temp(testing::random_mat(rows, K, rng), 0.5);
    const std::vector<std::uint8_t> none(rows, 0), all(rows, 1), some{1, 0, 1, 1, 0, 0};
    const auto e = ibot_loss(s, t, none, 0.1);
    CHECK(e.loss == 0.0);
    CHECK(e.masked == 0);
    CHECK(e.grad.norm() == 0.0);

    const MatD uniform = MatD::Constant(rows, K, 1.0 / K);
    CHECK(ibot_loss(MatD::Constant(rows, K, 0.4), uniform, all, 0.1).loss == doctest::Approx(std::log(double(K))));
    CHECK(ibot_loss(s, uniform, all, 0.1).loss > std::log(double(K)));

    const auto r = ibot_loss(s, t, some, 0.1);
    CHECK(r.masked == 3);
    double want = 0;
    for (int i : {0, 2, 3}) want += cross_entropy(t.row(i), s.row(i), 0.1);
    CHECK(r.loss == doctest::Approx(want / 3).epsilon(1e-12));
    auto f = [&]() { return ibot_loss(s, t, some, 0.1).loss; };
    CHECK(testing::rel_err(r.grad, testing::numeric_grad(s, f)) <= 1e-5);
}

TEST_CASE("masking") {
    CHECK(mask_count(64, 0.3) == 19);
    CHECK(mask_count(64, 0.0) == 0);
    CHECK(mask_count(64, 1.0) == 64);
    Rng rng(12);
    for (int i = 0; i < 200; ++i) {
        const auto m = block_mask(8, 0.3, rng);
        REQUIRE(m.size() == 64);
        int c = 0;
        for (auto v : m) c += v;
        REQUIRE(c == 19);
    }
    CHECK_THROWS_AS(block_mask(8, 1.5, rng), ParameterError);
}

TEST_CASE("total loss") {
    const LossParts a = total_loss(2.0, 3.0, -4.0, 0.0, 8);
    CHECK(a.total == 5.0);
    const LossParts b = total_loss(2.0, 3.0, -4.0, 0.05, 8), c = total_loss(2.0, 3.0, -4.0, 0.1, 8);
    CHECK(b.total - a.total == doctest::Approx(0.05 * -4.0));
    CHECK(c.total - a.total == doctest::Approx(2 * (b.total - a.total)));
    CHECK(std::isfinite(b.total));
}

TEST_CASE("projection head gradients") {
    HeadConfig cfg;
    cfg.layers = 3;
    cfg.bottleneck_dim = 4;
    cfg.hidden_dim = 8;
    cfg.prototypes = 6;
    Rng rng(13);
    ProjectionHead<double> head(cfg, 5, rng);
    for (std::size_t i = 0; i < head.params().size(); ++i)
        for (auto& v : head.params()[i].values()) v += 0.3 * rng.normal();
    MatD x = testing::random_mat(4, 5, rng);
    const MatD R = testing::random_mat(4, 6, rng);
    auto f = [&]() { return (head.forward(x).array() * R.array()).sum(); };
    HeadCache<double> cache;
    const MatD logits = head.forward(x, &cache);
    CHECK(logits.rows() == 4);
    CHECK(logits.cols() == 6);
    // Unit bottleneck against unit prototypes bounds the logits by one.
    CHECK(logits.cwiseAbs().maxCoeff() <= 1.0 + 1e-12);
    ParamSet<double> g = head.params().zeros_like();
    const MatD dx = head.backward(cache, R, g);
    CHECK(testing::rel_err(dx, testing::numeric_grad(x, f)) <= 1e-5);
    std::string worst;
    const double e = testing::param_grad_error(head.params(), g, f, &worst);
    INFO("worst tensor " << worst);
    CHECK(e <= 1e-5);
}

}  // TEST_SUITE
