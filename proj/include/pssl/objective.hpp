#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pssl/rng.hpp"
#include "pssl/tensor.hpp"

namespace pssl {

/// Unnormalized vMF kernel exp(kappa * x.y). Inputs must be unit vectors (1e-6).
double vmf_kernel(std::span<const double> x, std::span<const double> y, double kappa);

struct EntropyEstimate {
    double value = 0.0;
    MatD grad;  // dH/dZ, one row per sample
};

/// H = -(1/n) sum_i log sum_j exp(kappa z_i.z_j), self term included. The
/// gradient is projected onto the tangent space of each z_i.
EntropyEstimate kde_entropy(const MatD& z, double kappa);

/// H = (1/n) sum_i log max(eps, |z_i - z_nn(i)|). Nearest neighbour excludes i.
EntropyEstimate koleo_entropy(const MatD& z, double eps);

enum class RegularizerKind { none, koleo, kde };
std::string to_string(RegularizerKind k);
RegularizerKind parse_regularizer(const std::string& s);

struct RegularizerConfig {
    RegularizerKind kind = RegularizerKind::kde;
    double kappa = 5.0;
    double eps = 1e-8;
    double weight = 0.05;

    void validate() const;
};

struct RegularizerResult {
    double loss = 0.0;
    MatD grad;
};

/// loss = -H for the configured estimator; kind none gives (0, zeros).
RegularizerResult regularizer_loss(const MatD& z, const RegularizerConfig& cfg);

/// Log-space Sinkhorn-Knopp over an [n, K] logit matrix. Rows of the result sum to 1.
MatD sinkhorn_center(const MatD& logits, int iters = 3);

/// Row softmax of logits / temp in double.
MatD softmax_temp(const MatD& logits, double temp);

struct CrossEntropyResult {
    double loss = 0.0;
    std::vector<MatD> grads;  // one per student view, same shape as the logits
    int pairs = 0;
};

/// Mean over (teacher global view g, student view v != g) of the batch-mean
/// cross-entropy CE(teacher_g, softmax(student_v / temp)). Student views
/// 0..G-1 are the global views seen by the teacher.
CrossEntropyResult dino_loss(std::span<const MatD> student_logits, std::span<const MatD> teacher_probs,
                             double student_temp);

struct IbotResult {
    double loss = 0.0;
    MatD grad;
    int masked = 0;
};

/// Cross-entropy at masked rows only, averaged over masked rows. No masked rows -> 0.
IbotResult ibot_loss(const MatD& student_logits, const MatD& teacher_probs, std::span<const std::uint8_t> mask,
                     double student_temp);

struct LossParts {
    double l_dino = 0.0;
    double l_ibot = 0.0;
    double l_reg = 0.0;
    double total = 0.0;
    int n = 0;
};

LossParts total_loss(double l_dino, double l_ibot, double l_reg, double reg_weight, int n);

/// Number of masked positions for a ratio: round(ratio * n).
int mask_count(int n_patches, double ratio);

/// Block-wise random mask over a grid x grid patch layout with exactly
/// mask_count(grid * grid, ratio) positions set.
std::vector<std::uint8_t> block_mask(int grid, double ratio, Rng& rng);

}  // namespace pssl
