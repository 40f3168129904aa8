#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pssl/rng.hpp"
#include "pssl/tensor.hpp"
#include "pssl/vit.hpp"

namespace pssl {

struct ZScore {
    Eigen::RowVectorXd mean;
    Eigen::RowVectorXd std;  // floored at 1e-8
};

ZScore zscore_fit(const MatD& train);
MatD zscore_apply(const MatD& x, const ZScore& stats);

struct ProbeConfig {
    int iterations = 2000;
    int batch = 256;
    double lr = 1e-2;
    double lr_end = 0.0;
    int eval_every = 25;  // validation loss checks; the final iterate is always checked

    void validate() const;
};

struct LabeledSet {
    MatD x;
    std::vector<int> y;
};

struct ProbeResult {
    MatD weights;  // [D + 1, C], last row is the bias
    ZScore stats;
    std::vector<int> test_pred;
    double test_accuracy = 0.0;
    double test_weighted_f1 = 0.0;
    int best_iteration = 0;
    double best_val_loss = 0.0;
    double final_val_loss = 0.0;
};

/// Multinomial logistic regression on z-scored features (stats from the train
/// split) by minibatch SGD from zero weights, cosine lr; the iterate with the
/// lowest validation loss is kept.
ProbeResult linear_probe(const LabeledSet& train, const LabeledSet& val, const LabeledSet& test,
                         const ProbeConfig& cfg, Rng& rng);

/// Mean cross-entropy of a weight matrix on z-scored inputs.
double probe_loss(const MatD& weights, const MatD& xz, const std::vector<int>& y);
std::vector<int> probe_predict(const MatD& weights, const MatD& xz);

double accuracy(std::span<const int> preds, std::span<const int> labels);
/// Support-weighted per-class F1 over the classes present in `labels`.
double weighted_f1(std::span<const int> preds, std::span<const int> labels);

struct McNemarResult {
    long b = 0;  // A right, B wrong
    long c = 0;  // A wrong, B right
    long both_right = 0;
    long both_wrong = 0;
    double statistic = 0.0;  // (|b - c| - 1)^2 / (b + c), 0 when b + c = 0
    double p_chisq = 1.0;    // chi-square(1) survival of the statistic
    double p_exact = 1.0;    // two-sided exact binomial on (b, b + c, 0.5)
    double p = 1.0;          // chi-square when b + c >= 25, exact otherwise
    bool exact = true;
};

McNemarResult mcnemar(std::span<const int> preds_a, std::span<const int> preds_b, std::span<const int> labels);
McNemarResult mcnemar_counts(long b, long c);

/// Upper tail of the chi-square distribution.
double chi_square_sf(double x, double dof);

double pearson(std::span<const double> x, std::span<const double> y);

/// Ridge regression fit on train, Pearson correlation of predictions on test.
double regression_probe(const MatD& train_x, std::span<const double> train_y, const MatD& test_x,
                        std::span<const double> test_y, double ridge = 1e-3);

enum class Aggregation { cls_only, cls_mean, patch_max };
std::string to_string(Aggregation a);
Aggregation parse_aggregation(const std::string& s);

Vec<double> aggregate(const TokenOutput<float>& out, Aggregation mode);
MatD aggregate_all(std::span<const TokenOutput<float>> outs, Aggregation mode);

struct ReportRow {
    std::string task;
    std::string config;
    std::string metric;
    double value = 0.0;
    long n_test = 0;
};

struct ComparisonRow {
    std::string model_a;
    std::string model_b;
    McNemarResult test;
};

std::string report_tsv(std::span<const ReportRow> rows);
std::string comparison_tsv(std::span<const ComparisonRow> rows);
std::vector<ReportRow> parse_report_tsv(const std::string& text);

}  // namespace pssl
