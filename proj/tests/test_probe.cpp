#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "pssl/errors.hpp"
#include "pssl/evaluate.hpp"
#include "pssl/probe.hpp"
#include "support.hpp"

using namespace pssl;

namespace {

LabeledSet blobs(int n, int classes, double sep, Rng& rng, int dim = 2) {
    LabeledSet s;
    s.x.resize(n, dim);
    for (int i = 0; i < n; ++i) {
        const int c = i % classes;
        s.y.push_back(c);
        for (int j = 0; j < dim; ++j) s.x(i, j) = (j == c % dim ? sep * (c < dim ? 1 : -1) : 0.0) + rng.normal();
    }
    return s;
}

// Per-class precision/recall/F1 straight from the definitions.
double f1_reference(const std::vector<int>& p, const std::vector<int>& y) {
    std::map<int, int> support;
    for (int v : y) support[v]++;
    double acc = 0;
    for (const auto& [c, n] : support) {
        double tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            tp += p[i] == c && y[i] == c;
            fp += p[i] == c && y[i] != c;
            fn += p[i] != c && y[i] == c;
        }
        const double prec = tp + fp > 0 ? tp / (tp + fp) : 0, rec = tp / (tp + fn);
        const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0;
        acc += f1 * n;
    }
    return acc / y.size();
}

// Two-sided exact binomial by direct summation of C(n, k) / 2^n.
double binomial_two_sided(long b, long n) {
    double tail = 0, term = std::pow(0.5, double(n));
    for (long k = 0; k <= std::min(b, n - b); ++k) {
        tail += term;
        term *= double(n - k) / double(k + 1);
    }
    return std::min(1.0, 2 * tail);
}

// Chi-square with one degree of freedom: P(Z^2 > x) = erfc(sqrt(x / 2)).
double chi1_sf(double x) { return std::erfc(std::sqrt(x / 2)); }

}  // namespace

TEST_SUITE("probe") {

TEST_CASE("zscore") {
    MatD x(4, 2);
    x << -1, 5, 1, 5, -1, 5, 1, 5;
    const ZScore z = zscore_fit(x);
    const MatD t = zscore_apply(x, z);
    CHECK((t.col(0) - x.col(0)).norm() <= 1e-12);
    CHECK(t.col(1).norm() == 0.0);
    MatD other(1, 2);
    other << 3, 9;
    const MatD o = zscore_apply(other, z);
    CHECK(o(0, 0) == doctest::Approx(3.0));
}

TEST_CASE("separable data is probed perfectly") {
    Rng rng(1);
    const LabeledSet tr = blobs(300, 3, 12.0, rng), va = blobs(90, 3, 12.0, rng), te = blobs(90, 3, 12.0, rng);
    ProbeConfig cfg;
    cfg.iterations = 300;
    Rng pr(2);
    const ProbeResult r = linear_probe(tr, va, te, cfg, pr);
    CHECK(r.test_accuracy == 1.0);
    CHECK(r.test_weighted_f1 == 1.0);
    CHECK(r.weights.rows() == 3);
    CHECK(r.weights.cols() == 3);
    CHECK(r.best_val_loss <= r.final_val_loss + 1e-15);
    // Statistics come from the training split only.
    const ZScore z = zscore_fit(tr.x);
    CHECK(r.stats.mean == z.mean);
    CHECK(r.stats.std == z.std);
    CHECK(r.best_val_loss == doctest::Approx(probe_loss(r.weights, zscore_apply(va.x, r.stats), va.y)).epsilon(1e-12));
}

TEST_CASE("shuffled labels probe at chance") {
    Rng rng(3);
    LabeledSet tr = blobs(2000, 2, 3.0, rng, 8), va = blobs(400, 2, 3.0, rng, 8), te = blobs(2000, 2, 3.0, rng, 8);
    for (auto* s : {&tr, &va, &te})
        for (auto& y : s->y) y = static_cast<int>(rng.below(2));
    ProbeConfig cfg;
    cfg.iterations = 400;
    Rng pr(4);
    CHECK(std::abs(linear_probe(tr, va, te, cfg, pr).test_accuracy - 0.5) <= 0.05);
}

TEST_CASE("probe determinism and errors") {
    Rng rng(5);
    const LabeledSet tr = blobs(200, 2, 1.0, rng), va = blobs(50, 2, 1.0, rng), te = blobs(50, 2, 1.0, rng);
    ProbeConfig cfg;
    cfg.iterations = 100;
    Rng a(7), b(7);
    const ProbeResult ra = linear_probe(tr, va, te, cfg, a), rb = linear_probe(tr, va, te, cfg, b);
    CHECK(ra.test_pred == rb.test_pred);
    CHECK(ra.weights == rb.weights);

    LabeledSet one = tr;
    std::fill(one.y.begin(), one.y.end(), 0);
    Rng c(1);
    CHECK_THROWS_AS(linear_probe(one, va, te, cfg, c), DataError);
    cfg.iterations = 0;
    CHECK_THROWS_AS(linear_probe(tr, va, te, cfg, c), ConfigError);
}

TEST_CASE("weighted f1") {
    const std::vector<int> y{0, 0, 1, 1}, p{0, 0, 0, 1};
    CHECK(std::abs(weighted_f1(p, y) - (2 * 0.8 + 2 * (2.0 / 3)) / 4) <= 1e-6);
    CHECK(std::abs(weighted_f1(std::vector<int>{0, 0, 0, 0}, y) - 1.0 / 3) <= 1e-6);
    CHECK(weighted_f1(y, y) == 1.0);
    CHECK_THROWS_AS(weighted_f1(p, std::vector<int>{0, 1}), ParameterError);
    CHECK(accuracy(p, y) == 0.75);

    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<int> yy(60), pp(60);
        for (int i = 0; i < 60; ++i) {
            yy[i] = static_cast<int>(rng.below(4));
            pp[i] = static_cast<int>(rng.below(4));
        }
        const double w = weighted_f1(pp, yy);
        REQUIRE(w == doctest::Approx(f1_reference(pp, yy)).epsilon(1e-12));
        // Invariant under a joint permutation of samples.
        std::vector<int> ys(yy.rbegin(), yy.rend()), ps(pp.rbegin(), pp.rend());
        REQUIRE(weighted_f1(ps, ys) == doctest::Approx(w).epsilon(1e-12));
    }
    // Balanced labels: weighted F1 equals macro F1.
    std::vector<int> yb, pb;
    for (int i = 0; i < 40; ++i) {
        yb.push_back(i % 4);
        pb.push_back(static_cast<int>(rng.below(4)));
    }
    double macro = 0;
    for (int c = 0; c < 4; ++c) {
        double tp = 0, fp = 0, fn = 0;
        for (int i = 0; i < 40; ++i) {
            tp += pb[i] == c && yb[i] == c;
            fp += pb[i] == c && yb[i] != c;
            fn += pb[i] != c && yb[i] == c;
        }
        macro += tp > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0;
    }
    CHECK(weighted_f1(pb, yb) == doctest::Approx(macro / 4).epsilon(1e-12));
}

TEST_CASE("mcnemar") {
    const McNemarResult r = mcnemar_counts(5, 15);
    CHECK(std::abs(r.statistic - 4.05) <= 1e-4);
    CHECK(std::abs(r.p_chisq - 0.0442) <= 1e-4);
    CHECK(r.exact);
    CHECK(r.p_exact == doctest::Approx(binomial_two_sided(5, 20)).epsilon(1e-10));
    CHECK(r.p_chisq == doctest::Approx(chi1_sf(4.05)).epsilon(1e-10));
    CHECK(r.p == r.p_exact);

    const McNemarResult big = mcnemar_counts(20, 40);
    CHECK_FALSE(big.exact);
    CHECK(big.statistic == doctest::Approx(19.0 * 19.0 / 60.0));
    CHECK(big.p == doctest::Approx(chi1_sf(big.statistic)).epsilon(1e-10));

    for (long k : {1, 5, 12, 30, 100}) CHECK(mcnemar_counts(k, k).p >= 0.05);
    const std::vector<int> y{0, 1, 1, 0}, p{0, 1, 0, 0};
    const McNemarResult same = mcnemar(p, p, y);
    CHECK(same.b == 0);
    CHECK(same.c == 0);
    CHECK(same.p == 1.0);
    const McNemarResult diff = mcnemar(y, p, y);
    CHECK(diff.b == 1);
    CHECK(diff.c == 0);
    CHECK(diff.both_right == 3);
    CHECK(chi_square_sf(3.841458820694124, 1) == doctest::Approx(0.05).epsilon(1e-9));
}

TEST_CASE("pearson") {
    const std::vector<double> x{1, 2, 3}, y{1, 2, 4};
    CHECK(std::abs(pearson(x, y) - 0.9820) <= 1e-4);
    CHECK(pearson(x, x) == doctest::Approx(1.0));
    const std::vector<double> neg{1, -1, -3};
    CHECK(pearson(x, neg) == doctest::Approx(-1.0));
    CHECK_THROWS(pearson(x, std::vector<double>{2, 2, 2}));

    Rng rng(8);
    MatD tx(200, 3), vx(100, 3);
    std::vector<double> ty, vy;
    for (int i = 0; i < 300; ++i) {
        double a = rng.normal(), b = rng.normal(), c = rng.normal();
        const double t = 2 * a - b + 0.01 * rng.normal();
        if (i < 200) {
            tx.row(i) << a, b, c;
            ty.push_back(t);
        } else {
            vx.row(i - 200) << a, b, c;
            vy.push_back(t);
        }
    }
    CHECK(regression_probe(tx, ty, vx, vy) > 0.99);
}

TEST_CASE("aggregation") {
    TokenOutput<float> o;
    o.cls = Vec<float>::Constant(3, 1.0f);
    o.registers = Mat<float>::Constant(2, 3, 50.0f);
    o.patches.resize(2, 3);
    o.patches << 1, -2, 3, -1, 4, 0;
    const Vec<double> mx = aggregate(o, Aggregation::patch_max);
    REQUIRE(mx.size() == 3);
    CHECK(mx(0) == 1.0);
    CHECK(mx(1) == 4.0);
    CHECK(mx(2) == 3.0);
    CHECK(aggregate(o, Aggregation::cls_only).size() == 3);
    CHECK(aggregate(o, Aggregation::cls_mean).size() == 6);

    // Identical patch tokens: max pooling equals mean pooling.
    o.patches = Mat<float>::Constant(4, 3, 2.5f);
    CHECK(aggregate(o, Aggregation::patch_max) == aggregate(o, Aggregation::cls_mean).tail(3));
    for (Aggregation a : {Aggregation::cls_only, Aggregation::cls_mean, Aggregation::patch_max})
        CHECK(parse_aggregation(to_string(a)) == a);
    CHECK_THROWS_AS(parse_aggregation("mean"), ConfigError);
}

TEST_CASE("report tsv round trip") {
    std::vector<ReportRow> rows{{"texture", "cls_only", "accuracy", 0.8125, 80},
                                {"texture", "cls_mean", "weighted_f1", 1.0 / 3, 80}};
    const auto back = parse_report_tsv(report_tsv(rows));
    REQUIRE(back.size() == 2);
    CHECK(back[0].config == "cls_only");
    CHECK(back[1].value == doctest::Approx(1.0 / 3).epsilon(1e-8));
    CHECK(back[1].n_test == 80);
    std::vector<ComparisonRow> cmp{{"a", "b", mcnemar_counts(5, 15)}};
    CHECK(comparison_tsv(cmp).find("4.05") != std::string::npos);
}

TEST_CASE("slide split") {
    std::vector<TileMeta> meta;
    for (int s = 0; s < 23; ++s)
        for (int k = 0; k < 3; ++k) {
            TileMeta m;
            m.slide_id = "slide" + std::to_string(s);
            m.tissue = "texture" + std::to_string(s % 4);
            meta.push_back(m);
        }
    const auto split = slide_split(meta);
    std::map<std::string, std::set<Split>> by_slide;
    std::map<Split, int> counts;
    for (std::size_t i = 0; i < meta.size(); ++i) {
        by_slide[meta[i].slide_id].insert(split[i]);
        counts[split[i]]++;
    }
    for (const auto& [s, set] : by_slide) CHECK(set.size() == 1);
    CHECK(counts[Split::train] > counts[Split::val]);
    CHECK(counts[Split::test] > 0);

    const Labels l = tissue_labels(meta);
    CHECK(l.classes == std::vector<std::string>{"texture0", "texture1", "texture2", "texture3"});
    CHECK(l.y[3] == 1);

    MatD x = MatD::Zero(meta.size(), 2);
    const ProbeSplits ps = make_splits(x, l.y, split);
    CHECK(ps.train.x.rows() + ps.val.x.rows() + ps.test.x.rows() == static_cast<Eigen::Index>(meta.size()));
    const std::vector<Split> all_train(meta.size(), Split::train);
    CHECK_THROWS_AS(make_splits(x, l.y, all_train), DataError);
}

}  // TEST_SUITE
