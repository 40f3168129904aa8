#include "pssl/probe.hpp"

#include <algorithm>
#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

namespace pssl {

ZScore zscore_fit(const MatD& train) {
    if (train.rows() < 1) throw ParameterError("zscore_fit needs at least one row");
    ZScore s;
    s.mean = train.colwise().mean();
    const MatD c = train.rowwise() - s.mean;
    s.std = (c.array().square().colwise().sum() / static_cast<double>(train.rows())).sqrt().matrix();
    s.std = s.std.cwiseMax(1e-8);
    return s;
}

MatD zscore_apply(const MatD& x, const ZScore& s) {
    if (x.cols() != s.mean.size()) throw DimensionError("zscore_apply: dimension mismatch");
    return ((x.rowwise() - s.mean).array().rowwise() / s.std.array()).matrix();
}

void ProbeConfig::validate() const {
    if (iterations < 1) throw ConfigError("probe iterations must be >= 1");
    if (batch < 1) throw ConfigError("probe batch must be >= 1");
    if (!(lr > 0) || lr_end < 0) throw ConfigError("probe learning rates must be positive");
    if (eval_every < 1) throw ConfigError("probe eval_every must be >= 1");
}

namespace {

MatD logits_of(const MatD& w, const MatD& xz) {
    const Eigen::Index d = xz.cols();
    return (xz * w.topRows(d)).rowwise() + w.row(d);
}

void softmax_inplace(MatD& l) {
    for (Eigen::Index r = 0; r < l.rows(); ++r) {
        l.row(r).array() -= l.row(r).maxCoeff();
        l.row(r) = l.row(r).array().exp().matrix();
        l.row(r) /= l.row(r).sum();
    }
}

int n_classes(const std::vector<int>& y) {
    int c = 0;
    for (int v : y) {
        if (v < 0) throw DataError("labels must be non-negative");
        c = std::max(c, v + 1);
    }
    return c;
}

}  // namespace

double probe_loss(const MatD& w, const MatD& xz, const std::vector<int>& y) {
    MatD l = logits_of(w, xz);
    double acc = 0.0;
    for (Eigen::Index r = 0; r < l.rows(); ++r) {
        const double m = l.row(r).maxCoeff();
        const double lse = m + std::log((l.row(r).array() - m).exp().sum());
        const int label = y[r];
        acc += lse - (label < l.cols() ? l(r, label) : 0.0);
    }
    return l.rows() ? acc / static_cast<double>(l.rows()) : 0.0;
}

std::vector<int> probe_predict(const MatD& w, const MatD& xz) {
    const MatD l = logits_of(w, xz);
    std::vector<int> out(l.rows());
    for (Eigen::Index r = 0; r < l.rows(); ++r) {
        Eigen::Index arg = 0;
        l.row(r).maxCoeff(&arg);
        out[r] = static_cast<int>(arg);
    }
    return out;
}

ProbeResult linear_probe(const LabeledSet& train, const LabeledSet& val, const LabeledSet& test,
                         const ProbeConfig& cfg, Rng& rng) {
    cfg.validate();
    if (train.x.rows() != static_cast<Eigen::Index>(train.y.size()) ||
        val.x.rows() != static_cast<Eigen::Index>(val.y.size()) ||
        test.x.rows() != static_cast<Eigen::Index>(test.y.size()))
        throw DimensionError("probe split has mismatched rows and labels");
    if (train.x.rows() == 0 || val.x.rows() == 0) throw DataError("probe needs non-empty train and validation splits");
    if (val.x.cols() != train.x.cols() || test.x.cols() != train.x.cols())
        throw DimensionError("probe splits have different embedding sizes");
    {
        std::vector<int> distinct = train.y;
        std::sort(distinct.begin(), distinct.end());
        if (std::unique(distinct.begin(), distinct.end()) - distinct.begin() < 2)
            throw DataError("degenerate probe task: training split has a single class");
    }
    const int C = std::max({n_classes(train.y), n_classes(val.y), n_classes(test.y)});
    const Eigen::Index D = train.x.cols();
    const Eigen::Index N = train.x.rows();

    ProbeResult res;
    res.stats = zscore_fit(train.x);
    const MatD xt = zscore_apply(train.x, res.stats);
    const MatD xv = zscore_apply(val.x, res.stats);
    const MatD xs = zscore_apply(test.x, res.stats);

    MatD w = MatD::Zero(D + 1, C);
    MatD best = w;
    res.best_val_loss = probe_loss(w, xv, val.y);
    res.best_iteration = 0;

    std::vector<Eigen::Index> order(N);
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = N;
    const int bs = static_cast<int>(std::min<Eigen::Index>(cfg.batch, N));
    MatD xb(bs, D);
    std::vector<int> yb(bs);
    for (int it = 1; it <= cfg.iterations; ++it) {
        for (int i = 0; i < bs; ++i) {
            if (cursor >= static_cast<std::size_t>(N)) {
                for (Eigen::Index k = N - 1; k > 0; --k)
                    std::swap(order[k], order[static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(k) + 1))]);
                cursor = 0;
            }
            xb.row(i) = xt.row(order[cursor]);
            yb[i] = train.y[order[cursor]];
            ++cursor;
        }
        const double progress = static_cast<double>(it - 1) / cfg.iterations;
        const double lr = cfg.lr_end + (cfg.lr - cfg.lr_end) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
        MatD p = logits_of(w, xb);
        softmax_inplace(p);
        for (int i = 0; i < bs; ++i) p(i, yb[i]) -= 1.0;
        p /= static_cast<double>(bs);
        w.topRows(D).noalias() -= lr * (xb.transpose() * p);
        w.row(D) -= lr * p.colwise().sum();
        if (it % cfg.eval_every == 0 || it == cfg.iterations) {
            const double vl = probe_loss(w, xv, val.y);
            if (vl < res.best_val_loss) {
                res.best_val_loss = vl;
                res.best_iteration = it;
                best = w;
            }
            if (it == cfg.iterations) res.final_val_loss = vl;
        }
    }
    res.weights = best;
    res.test_pred = probe_predict(best, xs);
    if (!test.y.empty()) {
        res.test_accuracy = accuracy(res.test_pred, test.y);
        res.test_weighted_f1 = weighted_f1(res.test_pred, test.y);
    }
    return res;
}

double accuracy(std::span<const int> preds, std::span<const int> labels) {
    if (preds.size() != labels.size()) throw ParameterError("accuracy: length mismatch");
    if (labels.empty()) throw ParameterError("accuracy: empty input");
    std::size_t ok = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) ok += preds[i] == labels[i];
    return static_cast<double>(ok) / static_cast<double>(labels.size());
}

double weighted_f1(std::span<const int> preds, std::span<const int> labels) {
    if (preds.size() != labels.size()) throw ParameterError("weighted_f1: length mismatch");
    if (labels.empty()) throw ParameterError("weighted_f1: empty labels");
    std::map<int, long> support, tp, pred_count;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        ++support[labels[i]];
        ++pred_count[preds[i]];
        if (preds[i] == labels[i]) ++tp[labels[i]];
    }
    double acc = 0.0;
    for (const auto& [cls, n] : support) {
        const double t = static_cast<double>(tp[cls]);
        const double pc = static_cast<double>(pred_count[cls]);
        const double precision = pc > 0 ? t / pc : 0.0;
        const double recall = t / static_cast<double>(n);
        const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
        acc += f1 * static_cast<double>(n);
    }
    return acc / static_cast<double>(labels.size());
}

double chi_square_sf(double x, double dof) {
    if (!(dof > 0)) throw ParameterError("chi-square degrees of freedom must be positive");
    if (x <= 0) return 1.0;
    return boost::math::cdf(boost::math::complement(boost::math::chi_squared(dof), x));
}

McNemarResult mcnemar_counts(long b, long c) {
    if (b < 0 || c < 0) throw ParameterError("mcnemar counts must be >= 0");
    McNemarResult r;
    r.b = b;
    r.c = c;
    const long n = b + c;
    if (n == 0) return r;
    const double diff = std::abs(static_cast<double>(b - c)) - 1.0;
    r.statistic = std::max(0.0, diff) * std::max(0.0, diff) / static_cast<double>(n);
    if (std::abs(b - c) <= 1) r.statistic = 0.0;
    r.p_chisq = chi_square_sf(r.statistic, 1.0);
    const boost::math::binomial_distribution<double> bin(static_cast<double>(n), 0.5);
    const double tail = boost::math::cdf(bin, static_cast<double>(std::min(b, c)));
    r.p_exact = std::min(1.0, 2.0 * tail);
    r.exact = n < 25;
    r.p = r.exact ? r.p_exact : r.p_chisq;
    return r;
}

McNemarResult mcnemar(std::span<const int> a, std::span<const int> bp, std::span<const int> labels) {
    if (a.size() != labels.size() || bp.size() != labels.size()) throw ParameterError("mcnemar: length mismatch");
    long b = 0, c = 0, rr = 0, ww = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const bool ra = a[i] == labels[i], rb = bp[i] == labels[i];
        if (ra && !rb) ++b;
        else if (!ra && rb) ++c;
        else if (ra) ++rr;
        else ++ww;
    }
    McNemarResult r = mcnemar_counts(b, c);
    r.both_right = rr;
    r.both_wrong = ww;
    return r;
}

double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw ParameterError("pearson: length mismatch");
    if (x.size() < 2) throw ParameterError("pearson needs at least two points");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0 || syy == 0) throw ParameterError("pearson: correlation is undefined for constant input");
    return sxy / std::sqrt(sxx * syy);
}

double regression_probe(const MatD& train_x, std::span<const double> train_y, const MatD& test_x,
                        std::span<const double> test_y, double ridge) {
    if (train_x.rows() != static_cast<Eigen::Index>(train_y.size()) ||
        test_x.rows() != static_cast<Eigen::Index>(test_y.size()))
        throw DimensionError("regression_probe: rows and targets differ");
    const ZScore s = zscore_fit(train_x);
    const MatD xt = zscore_apply(train_x, s), xs = zscore_apply(test_x, s);
    const Eigen::Map<const Eigen::VectorXd> y(train_y.data(), static_cast<Eigen::Index>(train_y.size()));
    const double ym = y.mean();
    MatD a = xt.transpose() * xt;
    a.diagonal().array() += ridge * static_cast<double>(xt.rows());
    const Eigen::VectorXd w = a.ldlt().solve(xt.transpose() * (y.array() - ym).matrix());
    const Eigen::VectorXd pred = (xs * w).array() + ym;
    return pearson(std::span<const double>(pred.data(), pred.size()), test_y);
}

std::string to_string(Aggregation a) {
    switch (a) {
        case Aggregation::cls_only: return "cls_only";
        case Aggregation::cls_mean: return "cls_mean";
        case Aggregation::patch_max: return "patch_max";
    }
    return "cls_only";
}

Aggregation parse_aggregation(const std::string& s) {
    if (s == "cls_only") return Aggregation::cls_only;
    if (s == "cls_mean") return Aggregation::cls_mean;
    if (s == "patch_max") return Aggregation::patch_max;
    throw ConfigError("unknown embedding config '" + s + "'");
}

Vec<double> aggregate(const TokenOutput<float>& out, Aggregation mode) {
    switch (mode) {
        case Aggregation::cls_only: return extract_embedding(out, EmbeddingMode::cls_only).cast<double>();
        case Aggregation::cls_mean: return extract_embedding(out, EmbeddingMode::cls_mean).cast<double>();
        case Aggregation::patch_max:
            if (out.patches.rows() == 0) throw DimensionError("patch_max needs patch tokens");
            return out.patches.colwise().maxCoeff().transpose().cast<double>();
    }
    return {};
}

MatD aggregate_all(std::span<const TokenOutput<float>> outs, Aggregation mode) {
    if (outs.empty()) return {};
    const Vec<double> first = aggregate(outs[0], mode);
    MatD m(static_cast<Eigen::Index>(outs.size()), first.size());
    m.row(0) = first.transpose();
    for (std::size_t i = 1; i < outs.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = aggregate(outs[i], mode).transpose();
    return m;
}

std::string report_tsv(std::span<const ReportRow> rows) {
    std::string out = "task\tconfig\tmetric\tvalue\tn_test\n";
    char buf[64];
    for (const ReportRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.9g", r.value);
        out += r.task + "\t" + r.config + "\t" + r.metric + "\t" + buf + "\t" + std::to_string(r.n_test) + "\n";
    }
    return out;
}

std::string comparison_tsv(std::span<const ComparisonRow> rows) {
    std::string out = "model_a\tmodel_b\tb\tc\tstatistic\tp\n";
    char buf[128];
    for (const ComparisonRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%ld\t%ld\t%.9g\t%.9g", r.test.b, r.test.c, r.test.statistic, r.test.p);
        out += r.model_a + "\t" + r.model_b + "\t" + buf + "\n";
    }
    return out;
}

std::vector<ReportRow> parse_report_tsv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "task\tconfig\tmetric\tvalue\tn_test")
        throw DataError("report TSV has an unexpected header");
    std::vector<ReportRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        ReportRow r;
        std::string value, n;
        if (!std::getline(ls, r.task, '\t') || !std::getline(ls, r.config, '\t') ||
            !std::getline(ls, r.metric, '\t') || !std::getline(ls, value, '\t') || !std::getline(ls, n))
            throw DataError("malformed report row: " + line);
        r.value = std::stod(value);
        r.n_test = std::stol(n);
        rows.push_back(r);
    }
    return rows;
}

}  // namespace pssl
