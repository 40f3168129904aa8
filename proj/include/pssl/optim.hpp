#pragma once

#include <string>
#include <vector>

#include "pssl/params.hpp"

namespace pssl {

enum class OptimRule { adamw, stable_adamw };
std::string to_string(OptimRule r);
OptimRule parse_optim_rule(const std::string& s);

struct OptimConfig {
    OptimRule rule = OptimRule::adamw;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double base_lr = 2e-4;
    double wd_start = 0.04;
    double wd_end = 0.2;
    double grad_clip = 3.0;
    int batch_size = 64;
    double warmup_frac = 0.1;

    void validate() const;
};

/// First/second moments per tensor plus the shared step counter.
template <class T>
struct OptState {
    ParamSet<T> m;
    ParamSet<T> v;
    long step = 0;

    static OptState like(const ParamSet<T>& params) { return {params.zeros_like(), params.zeros_like(), 0}; }
};

struct UpdateStats {
    double rms = 0.0;     // RMS of m_hat / (sqrt(v_hat) + eps)
    double lr_eff = 0.0;  // learning rate actually applied
};

/// Bias-corrected AdamW on one tensor at step t (t >= 1):
/// param -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * param).
template <class T>
UpdateStats adamw_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v, long t, double lr,
                       double wd, const OptimConfig& cfg, const std::string& name = "param");

/// AdamW with the learning rate divided by max(1, RMS(update)) for this tensor.
template <class T>
UpdateStats stable_adamw_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v, long t,
                              double lr, double wd, const OptimConfig& cfg, const std::string& name = "param");

/// One optimizer step over every tensor. Weight decay is applied where decay[i] is true.
template <class T>
std::vector<UpdateStats> optimizer_step(ParamSet<T>& params, const ParamSet<T>& grads, OptState<T>& state, double lr,
                                        double wd, const OptimConfig& cfg, const std::vector<bool>& decay);

/// Linear 0 -> peak over warmup_steps, then half-cosine peak -> end at T. t > T gives end.
double cosine_schedule(long t, long total, double peak, double end, long warmup_steps);

/// base_lr * sqrt(batch / 1024).
double lr_scale(double base_lr, int batch);

/// Scales all gradients so the global L2 norm is at most max_norm. Returns the pre-clip norm.
template <class T>
double clip_grad_norm(ParamSet<T>& grads, double max_norm);

template <class T>
double global_norm(const ParamSet<T>& grads);

/// teacher = m * teacher + (1 - m) * student, tensor by tensor.
template <class T>
void ema_update(ParamSet<T>& teacher, const ParamSet<T>& student, double m);

}  // namespace pssl
