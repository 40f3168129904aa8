#include "pssl/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace pssl {

namespace {

double log_sum_exp(const double* v, Eigen::Index n, Eigen::Index stride = 1) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) m = std::max(m, v[i * stride]);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) s += std::exp(v[i * stride] - m);
    return m + std::log(s);
}

void check_unit_rows(const MatD& z, const char* what) {
    for (Eigen::Index i = 0; i < z.rows(); ++i)
        if (std::abs(z.row(i).norm() - 1.0) > 1e-6)
            throw ParameterError(std::string(what) + ": row " + std::to_string(i) + " is not unit-normalized");
}

}  // namespace

double vmf_kernel(std::span<const double> x, std::span<const double> y, double kappa) {
    if (x.size() != y.size()) throw DimensionError("vmf_kernel: length mismatch");
    double xx = 0, yy = 0, xy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        xx += x[i] * x[i];
        yy += y[i] * y[i];
        xy += x[i] * y[i];
    }
    if (std::abs(std::sqrt(xx) - 1.0) > 1e-6 || std::abs(std::sqrt(yy) - 1.0) > 1e-6)
        throw ParameterError("vmf_kernel: inputs must be unit vectors");
    return std::exp(kappa * xy);
}

EntropyEstimate kde_entropy(const MatD& z, double kappa) {
    const Eigen::Index n = z.rows();
    if (n < 1) throw ParameterError("kde_entropy needs at least one sample");
    if (!(kappa > 0)) throw ParameterError("kde_entropy: kappa must be positive");
    check_unit_rows(z, "kde_entropy");
    MatD logits = kappa * (z * z.transpose());
    EntropyEstimate out;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double lse = log_sum_exp(logits.row(i).data(), n);
        acc += lse;
        logits.row(i) = (logits.row(i).array() - lse).exp().matrix();  // p_ij
    }
    out.value = -acc / static_cast<double>(n);
    const MatD sym = logits + logits.transpose();
    out.grad = -(kappa / static_cast<double>(n)) * (sym * z);
    for (Eigen::Index k = 0; k < n; ++k) {
        const double radial = out.grad.row(k).dot(z.row(k));
        out.grad.row(k) -= radial * z.row(k);
    }
    return out;
}

EntropyEstimate koleo_entropy(const MatD& z, double eps) {
    const Eigen::Index n = z.rows();
    if (n < 2) throw ParameterError("koleo_entropy needs at least two samples");
    if (!(eps > 0)) throw ParameterError("koleo_entropy: eps must be positive");
    EntropyEstimate out;
    out.grad = MatD::Zero(n, z.cols());
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::Index nn = -1;
        double best = std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == i) continue;
            const double d2 = (z.row(i) - z.row(j)).squaredNorm();
            if (d2 < best) {
                best = d2;
                nn = j;
            }
        }
        const double d = std::sqrt(best);
        if (d > eps) {
            acc += std::log(d);
            const RowVec<double> g = (z.row(i) - z.row(nn)) / (best * static_cast<double>(n));
            out.grad.row(i) += g;
            out.grad.row(nn) -= g;
        } else {
            acc += std::log(eps);
        }
    }
    out.value = acc / static_cast<double>(n);
    return out;
}

std::string to_string(RegularizerKind k) {
    switch (k) {
        case RegularizerKind::none: return "none";
        case RegularizerKind::koleo: return "koleo";
        case RegularizerKind::kde: return "kde";
    }
    return "none";
}

RegularizerKind parse_regularizer(const std::string& s) {
    if (s == "none") return RegularizerKind::none;
    if (s == "koleo" || s == "KoLeo") return RegularizerKind::koleo;
    if (s == "kde" || s == "KDE") return RegularizerKind::kde;
    throw ConfigError("unknown regularizer '" + s + "'");
}

void RegularizerConfig::validate() const {
    if (!(kappa > 0)) throw ConfigError("regularizer kappa must be positive");
    if (!(eps > 0)) throw ConfigError("regularizer eps must be positive");
    if (!(weight >= 0)) throw ConfigError("regularizer weight must be >= 0");
}

RegularizerResult regularizer_loss(const MatD& z, const RegularizerConfig& cfg) {
    RegularizerResult r;
    switch (cfg.kind) {
        case RegularizerKind::none:
            r.grad = MatD::Zero(z.rows(), z.cols());
            return r;
        case RegularizerKind::koleo: {
            EntropyEstimate e = koleo_entropy(z, cfg.eps);
            r.loss = -e.value;
            r.grad = -e.grad;
            return r;
        }
        case RegularizerKind::kde: {
            EntropyEstimate e = kde_entropy(z, cfg.kappa);
            r.loss = -e.value;
            r.grad = -e.grad;
            return r;
        }
    }
    return r;
}

MatD sinkhorn_center(const MatD& logits, int iters) {
    if (iters < 0) throw ParameterError("sinkhorn iterations must be >= 0");
    if (!logits.allFinite()) throw NumericError("sinkhorn_center: non-finite logits");
    const Eigen::Index n = logits.rows(), k = logits.cols();
    if (n == 0 || k == 0) return logits;
    const double log_n = std::log(static_cast<double>(n));
    const double log_k = std::log(static_cast<double>(k));
    MatD q = logits;
    q.array() -= log_sum_exp(q.data(), q.size());
    for (int it = 0; it < iters; ++it) {
        for (Eigen::Index c = 0; c < k; ++c) {
            const double lse = log_sum_exp(q.data() + c, n, k);
            q.col(c).array() -= lse + log_k;
        }
        for (Eigen::Index r = 0; r < n; ++r) {
            const double lse = log_sum_exp(q.row(r).data(), k);
            q.row(r).array() -= lse + log_n;
        }
    }
    q.array() += log_n;
    if (iters == 0) {
        for (Eigen::Index r = 0; r < n; ++r) q.row(r).array() -= log_sum_exp(q.row(r).data(), k);
    }
    return q.array().exp().matrix();
}

MatD softmax_temp(const MatD& logits, double temp) {
    if (!(temp > 0)) throw ParameterError("temperature must be positive");
    MatD out = logits / temp;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        const double lse = log_sum_exp(out.row(r).data(), out.cols());
        out.row(r) = (out.row(r).array() - lse).exp().matrix();
    }
    return out;
}

CrossEntropyResult dino_loss(std::span<const MatD> student_logits, std::span<const MatD> teacher_probs,
                             double student_temp) {
    if (!(student_temp > 0)) throw ParameterError("student temperature must be positive");
    const std::size_t v_count = student_logits.size(), g_count = teacher_probs.size();
    if (g_count == 0 || v_count < g_count) throw DimensionError("dino_loss needs at least as many student views as teacher views");
    CrossEntropyResult out;
    std::vector<MatD> log_p(v_count), p(v_count);
    for (std::size_t v = 0; v < v_count; ++v) {
        const MatD& s = student_logits[v];
        if (s.rows() != teacher_probs[0].rows() || s.cols() != teacher_probs[0].cols())
            throw DimensionError("dino_loss: view shape mismatch");
        log_p[v] = s / student_temp;
        for (Eigen::Index r = 0; r < s.rows(); ++r) {
            const double lse = log_sum_exp(log_p[v].row(r).data(), s.cols());
            log_p[v].row(r).array() -= lse;
        }
        p[v] = log_p[v].array().exp().matrix();
        out.grads.push_back(MatD::Zero(s.rows(), s.cols()));
    }
    const double rows = static_cast<double>(teacher_probs[0].rows());
    int pairs = 0;
    for (std::size_t g = 0; g < g_count; ++g)
        for (std::size_t v = 0; v < v_count; ++v)
            if (v != g) ++pairs;
    if (pairs == 0) return out;
    const double norm = 1.0 / (rows * pairs);
    for (std::size_t g = 0; g < g_count; ++g) {
        const MatD& t = teacher_probs[g];
        for (std::size_t v = 0; v < v_count; ++v) {
            if (v == g) continue;
            out.loss -= (t.array() * log_p[v].array()).sum() * norm;
            out.grads[v] += (p[v] - t) * (norm / student_temp);
        }
    }
    out.pairs = pairs;
    return out;
}

IbotResult ibot_loss(const MatD& student_logits, const MatD& teacher_probs, std::span<const std::uint8_t> mask,
                     double student_temp) {
    if (!(student_temp > 0)) throw ParameterError("student temperature must be positive");
    if (student_logits.rows() != teacher_probs.rows() || student_logits.cols() != teacher_probs.cols() ||
        static_cast<Eigen::Index>(mask.size()) != student_logits.rows())
        throw DimensionError("ibot_loss: shape mismatch");
    IbotResult out;
    out.grad = MatD::Zero(student_logits.rows(), student_logits.cols());
    for (std::uint8_t m : mask) out.masked += m ? 1 : 0;
    if (out.masked == 0) return out;
    const double norm = 1.0 / out.masked;
    const Eigen::Index k = student_logits.cols();
    for (Eigen::Index r = 0; r < student_logits.rows(); ++r) {
        if (!mask[r]) continue;
        RowVec<double> lp = student_logits.row(r) / student_temp;
        lp.array() -= log_sum_exp(lp.data(), k);
        out.loss -= teacher_probs.row(r).dot(lp) * norm;
        out.grad.row(r) = (lp.array().exp().matrix() - teacher_probs.row(r)) * (norm / student_temp);
    }
    return out;
}

LossParts total_loss(double l_dino, double l_ibot, double l_reg, double reg_weight, int n) {
    LossParts p{l_dino, l_ibot, l_reg, l_dino + l_ibot + reg_weight * l_reg, n};
    return p;
}

int mask_count(int n_patches, double ratio) {
    if (!(ratio >= 0 && ratio <= 1)) throw ParameterError("mask ratio must lie in [0, 1]");
    return static_cast<int>(std::lround(ratio * n_patches));
}

std::vector<std::uint8_t> block_mask(int grid, double ratio, Rng& rng) {
    const int n = grid * grid;
    const int target = mask_count(n, ratio);
    std::vector<std::uint8_t> mask(n, 0);
    int masked = 0;
    int failures = 0;
    while (masked < target && failures < 20) {
        const int remaining = target - masked;
        const double area = rng.uniform_closed_range(std::min(4.0, static_cast<double>(remaining)), remaining);
        const double aspect = std::exp(rng.uniform_closed_range(std::log(0.3), std::log(1.0 / 0.3)));
        const int h = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect))), 1, grid);
        const int w = std::clamp(static_cast<int>(std::lround(std::sqrt(area / aspect))), 1, grid);
        const int top = static_cast<int>(rng.below(grid - h + 1));
        const int left = static_cast<int>(rng.below(grid - w + 1));
        int added = 0;
        for (int y = top; y < top + h && masked < target; ++y)
            for (int x = left; x < left + w && masked < target; ++x)
                if (!mask[y * grid + x]) {
                    mask[y * grid + x] = 1;
                    ++masked;
                    ++added;
                }
        failures = added == 0 ? failures + 1 : 0;
    }
    while (masked < target) {
        const int i = static_cast<int>(rng.below(n));
        if (!mask[i]) {
            mask[i] = 1;
            ++masked;
        }
    }
    return mask;
}

}  // namespace pssl
