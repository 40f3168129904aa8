#include "pssl/optim.hpp"

#include <cmath>
#include <numbers>

namespace pssl {

std::string to_string(OptimRule r) { return r == OptimRule::adamw ? "adamw" : "stable_adamw"; }

OptimRule parse_optim_rule(const std::string& s) {
    if (s == "adamw" || s == "AdamW") return OptimRule::adamw;
    if (s == "stable_adamw" || s == "StableAdamW") return OptimRule::stable_adamw;
    throw ConfigError("unknown optimizer '" + s + "'");
}

void OptimConfig::validate() const {
    if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) throw ConfigError("optimizer betas must lie in (0, 1)");
    if (!(eps > 0)) throw ConfigError("optimizer epsilon must be positive");
    if (!(base_lr > 0)) throw ConfigError("learning_rate must be positive");
    if (!(wd_start >= 0 && wd_end >= 0)) throw ConfigError("weight decay must be >= 0");
    if (!(grad_clip > 0)) throw ConfigError("gradient_clipping_norm must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(warmup_frac >= 0 && warmup_frac <= 1)) throw ConfigError("warmup_frac must lie in [0, 1]");
}

namespace {

template <class T>
void update_moments(const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v, const OptimConfig& cfg,
                    const std::string& name) {
    if (grad.size() != m.size() || grad.size() != v.size()) throw DimensionError("optimizer state shape mismatch for " + name);
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    for (std::size_t i = 0; i < grad.size(); ++i) {
        const T g = grad[i];
        if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + name);
        m[i] = b1 * m[i] + (T(1) - b1) * g;
        v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    }
}

template <class T>
double update_rms(const Tensor<T>& m, const Tensor<T>& v, long t, const OptimConfig& cfg) {
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    double acc = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        const double u = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
        acc += u * u;
    }
    return m.size() ? std::sqrt(acc / static_cast<double>(m.size())) : 0.0;
}

template <class T>
void apply_update(Tensor<T>& param, const Tensor<T>& m, const Tensor<T>& v, long t, double lr, double wd,
                  const OptimConfig& cfg) {
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double u = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
        const double p = param[i];
        param[i] = static_cast<T>(p - lr * (u + wd * p));
    }
}

template <class T>
UpdateStats step_impl(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v, long t, double lr,
                      double wd, const OptimConfig& cfg, const std::string& name, bool stable) {
    if (t < 1) throw ParameterError("optimizer step index must be >= 1");
    if (param.size() != grad.size()) throw DimensionError("gradient shape mismatch for " + name);
    update_moments(grad, m, v, cfg, name);
    UpdateStats s;
    s.rms = update_rms(m, v, t, cfg);
    s.lr_eff = stable ? lr / std::max(1.0, s.rms) : lr;
    apply_update(param, m, v, t, s.lr_eff, wd, cfg);
    return s;
}

}  // namespace

template <class T>
UpdateStats adamw_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v, long t, double lr,
                       double wd, const OptimConfig& cfg, const std::string& name) {
    return step_impl(param, grad, m, v, t, lr, wd, cfg, name, false);
}

template <class T>
UpdateStats stable_adamw_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v, long t,
                              double lr, double wd, const OptimConfig& cfg, const std::string& name) {
    return step_impl(param, grad, m, v, t, lr, wd, cfg, name, true);
}

template <class T>
std::vector<UpdateStats> optimizer_step(ParamSet<T>& params, const ParamSet<T>& grads, OptState<T>& state, double lr,
                                        double wd, const OptimConfig& cfg, const std::vector<bool>& decay) {
    if (!params.same_layout(grads) || !params.same_layout(state.m) || !params.same_layout(state.v))
        throw DimensionError("optimizer_step: parameter/gradient/state layouts differ");
    if (decay.size() != params.size()) throw DimensionError("optimizer_step: decay mask size mismatch");
    ++state.step;
    std::vector<UpdateStats> stats;
    stats.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double w = decay[i] ? wd : 0.0;
        stats.push_back(step_impl(params[i], grads[i], state.m[i], state.v[i], state.step, lr, w, cfg, params.name(i),
                                  cfg.rule == OptimRule::stable_adamw));
    }
    return stats;
}

double cosine_schedule(long t, long total, double peak, double end, long warmup_steps) {
    if (t < 0) throw ParameterError("schedule step must be >= 0");
    if (t >= total) return end;
    if (t < warmup_steps) return peak * static_cast<double>(t) / static_cast<double>(warmup_steps);
    const double progress = static_cast<double>(t - warmup_steps) / static_cast<double>(total - warmup_steps);
    return end + (peak - end) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double lr_scale(double base_lr, int batch) {
    if (batch < 1) throw ParameterError("batch must be >= 1");
    return base_lr * std::sqrt(static_cast<double>(batch) / 1024.0);
}

template <class T>
double global_norm(const ParamSet<T>& grads) {
    double acc = 0.0;
    for (std::size_t i = 0; i < grads.size(); ++i)
        for (T g : grads[i].values()) acc += static_cast<double>(g) * g;
    return std::sqrt(acc);
}

template <class T>
double clip_grad_norm(ParamSet<T>& grads, double max_norm) {
    const double norm = global_norm(grads);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (std::size_t i = 0; i < grads.size(); ++i)
            for (T& g : grads[i].values()) g = static_cast<T>(g * s);
    }
    return norm;
}

template <class T>
void ema_update(ParamSet<T>& teacher, const ParamSet<T>& student, double m) {
    if (!(m >= 0 && m <= 1)) throw ParameterError("EMA momentum must lie in [0, 1]");
    if (!teacher.same_layout(student)) throw DimensionError("ema_update: teacher/student layouts differ");
    if (m == 1.0) return;
    for (std::size_t i = 0; i < teacher.size(); ++i) {
        auto& t = teacher[i].values();
        const auto& s = student[i].values();
        for (std::size_t j = 0; j < t.size(); ++j) t[j] = static_cast<T>(m * t[j] + (1.0 - m) * s[j]);
    }
}

#define PSSL_OPTIM_INSTANTIATE(T)                                                                                  \
    template UpdateStats adamw_step(Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&, long, double, double,   \
                                    const OptimConfig&, const std::string&);                                      \
    template UpdateStats stable_adamw_step(Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&, long, double,    \
                                           double, const OptimConfig&, const std::string&);                       \
    template std::vector<UpdateStats> optimizer_step(ParamSet<T>&, const ParamSet<T>&, OptState<T>&, double,      \
                                                     double, const OptimConfig&, const std::vector<bool>&);       \
    template double clip_grad_norm(ParamSet<T>&, double);                                                         \
    template double global_norm(const ParamSet<T>&);                                                              \
    template void ema_update(ParamSet<T>&, const ParamSet<T>&, double);

PSSL_OPTIM_INSTANTIATE(float)
PSSL_OPTIM_INSTANTIATE(double)

}  // namespace pssl
