#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>

#include "pssl/params.hpp"
#include "pssl/rng.hpp"
#include "pssl/tensor.hpp"

namespace testing {

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

/// Norm-based relative error between two arrays.
inline double rel_err(const pssl::MatD& a, const pssl::MatD& b) {
    const double num = (a - b).norm();
    const double den = std::max(a.norm() + b.norm(), 1e-12);
    return 2.0 * num / den;
}

inline pssl::MatD random_mat(int r, int c, pssl::Rng& rng, double scale = 1.0) {
    pssl::MatD m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
    return m;
}

inline pssl::MatD unit_rows(pssl::MatD m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i).normalize();
    return m;
}

/// Central differences of f with respect to every entry of x.
inline pssl::MatD numeric_grad(pssl::MatD& x, const std::function<double()>& f, double h = 1e-6) {
    pssl::MatD g(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const double keep = x(i, j);
            x(i, j) = keep + h;
            const double fp = f();
            x(i, j) = keep - h;
            const double fm = f();
            x(i, j) = keep;
            g(i, j) = (fp - fm) / (2 * h);
        }
    return g;
}

/// Worst per-tensor relative error between analytic gradients and central
/// differences of f over every parameter entry.
inline double param_grad_error(pssl::ParamSet<double>& params, const pssl::ParamSet<double>& analytic,
                               const std::function<double()>& f, std::string* worst = nullptr, double h = 1e-6) {
    double err = 0.0;
    for (std::size_t t = 0; t < params.size(); ++t) {
        auto& vals = params[t].values();
        pssl::MatD num(1, static_cast<Eigen::Index>(vals.size())), ana(1, static_cast<Eigen::Index>(vals.size()));
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double keep = vals[i];
            vals[i] = keep + h;
            const double fp = f();
            vals[i] = keep - h;
            const double fm = f();
            vals[i] = keep;
            num(0, static_cast<Eigen::Index>(i)) = (fp - fm) / (2 * h);
            ana(0, static_cast<Eigen::Index>(i)) = analytic[t][i];
        }
        // Tensors whose true gradient is zero (e.g. key bias under softmax) only carry
        // finite-difference roundoff.
        if (num.norm() < 1e-7 && ana.norm() < 1e-7) continue;
        const double e = rel_err(ana, num);
        if (e > err) {
            err = e;
            if (worst) *worst = params.name(t);
        }
    }
    return err;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& tag) {
    const auto p = std::filesystem::temp_directory_path() / ("pssl_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace testing
