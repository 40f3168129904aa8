#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pssl/augment.hpp"
#include "pssl/heads.hpp"
#include "pssl/objective.hpp"
#include "pssl/optim.hpp"
#include "pssl/vit.hpp"

namespace pssl {

/// Everything a pretraining or distillation run needs. Keys in the config
/// file use the hyperparameter-table names in snake_case.
struct TrainConfig {
    std::string preset = "toy";
    ModelConfig model;
    HeadConfig head;
    RegularizerConfig reg;
    OptimConfig optim;
    EctConfig ect;
    PhotometricPolicy photo;

    bool sinkhorn = true;
    int sinkhorn_iters = 3;
    double student_temp = 0.1;
    double teacher_temp = 0.07;         // value after warmup
    double teacher_temp_warmup = 0.04;  // value at step 0; equal to teacher_temp for a constant schedule
    long teacher_temp_warmup_steps = -1;  // -1: warmup_frac of the run
    double teacher_momentum_start = 0.994;
    double teacher_momentum_end = 1.0;
    double student_ema_momentum = 0.994;
    bool lr_sqrt_scaling = true;
    double min_lr = 1e-6;
    double drop_path = 0.0;
    double mask_ratio = 0.3;
    std::string precision = "FP32";

    long total_tiles = 128000;
    long max_steps = -1;  // stop early without changing the schedules
    std::uint64_t seed = 0;
    long checkpoint_every = 0;
    long eff_rank_every = 50;

    long steps() const { return total_tiles / optim.batch_size; }
    long steps_to_run() const { return max_steps >= 0 ? std::min(max_steps, steps()) : steps(); }
    long teacher_warmup_steps() const;
    double peak_lr() const;

    void validate() const;
};

using ConfigEntries = std::vector<std::pair<std::string, std::string>>;

/// Parses `key = value` lines; '#' starts a comment. Duplicate keys: last wins.
ConfigEntries parse_config_text(const std::string& text);

TrainConfig preset_config(const std::string& name);
std::vector<std::string> preset_names();

/// Applies entries in order. A `preset` entry resets to that preset first.
/// Unknown keys and malformed values throw ConfigError.
void apply_config(TrainConfig& cfg, const ConfigEntries& entries);

/// File plus `key=value` overrides, starting from the toy preset (or the
/// preset named in the file).
TrainConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
TrainConfig config_from_text(const std::string& text, const std::vector<std::string>& overrides = {});

/// Every key with its resolved value, in canonical order.
ConfigEntries config_entries(const TrainConfig& cfg);
std::string config_to_text(const TrainConfig& cfg);

std::vector<std::string> config_keys();

}  // namespace pssl
