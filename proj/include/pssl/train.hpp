#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pssl/checkpoint.hpp"
#include "pssl/config.hpp"
#include "pssl/heads.hpp"
#include "pssl/tissue.hpp"
#include "pssl/vit.hpp"

namespace pssl {

/// Tiles held in memory at the configured context size.
struct Dataset {
    std::vector<Image> tiles;
    std::vector<TileMeta> meta;
    std::filesystem::path root;
};

/// Reads a manifest and every tile, resizing to context x context when needed.
Dataset load_dataset(const std::filesystem::path& manifest_path, int context);

/// Backbone plus DINO and iBOT heads.
struct SslNetwork {
    VitModel<float> backbone;
    ProjectionHead<float> dino_head;
    ProjectionHead<float> ibot_head;

    static SslNetwork init(const TrainConfig& cfg, Rng& rng);
    /// Reads `<prefix>backbone.`, `<prefix>dino_head.`, `<prefix>ibot_head.` tensors.
    static SslNetwork from_checkpoint(const Checkpoint& ckpt, const std::string& prefix, const TrainConfig& cfg);
    void store(Checkpoint& ckpt, const std::string& prefix) const;

    std::vector<ParamSet<float>*> parts();
    std::vector<const ParamSet<float>*> parts() const;
};

struct MetricsRow {
    long step = 0;
    double l_dino = 0, l_ibot = 0, l_reg = 0, total = 0;
    double grad_norm = 0;
    double eff_rank = 0;
    double tau_t = 0, lr = 0, ema_m = 0;
};

/// Append-only per-step metrics with a TSV form.
struct RunMetrics {
    std::vector<MetricsRow> rows;

    void append(const MetricsRow& r);
    static std::string header();
    static std::string format_row(const MetricsRow& r);
    std::string to_tsv() const;
    static RunMetrics parse_tsv(const std::string& text);
    bool operator==(const RunMetrics& o) const;
};

/// Linear warmup from cfg.teacher_temp_warmup to cfg.teacher_temp, then constant.
double teacher_temp(long t, const TrainConfig& cfg);
double lr_at(long t, const TrainConfig& cfg);
double wd_at(long t, const TrainConfig& cfg);
double ema_momentum_at(long t, const TrainConfig& cfg);

/// exp(entropy of the L1-normalized singular values of the column-centered matrix).
double effective_rank(const MatD& e);

/// Steps whose total exceeds the trailing-window mean by more than k standard deviations.
std::vector<long> detect_spikes(const RunMetrics& m, int window = 50, double k = 5.0, long skip_steps = 0);

/// Decay applies to 2-D weight matrices only.
std::vector<bool> decay_mask(const ParamSet<float>& p);

struct TrainResult {
    Checkpoint checkpoint;
    RunMetrics metrics;
};

struct TrainHooks {
    std::function<void(const MetricsRow&)> on_step;
    /// Called every checkpoint_every steps with the current checkpoint.
    std::function<void(long, const Checkpoint&)> on_checkpoint;
};

/// Student-teacher pretraining. The returned checkpoint evaluates the EMA teacher.
TrainResult train(const TrainConfig& cfg, const Dataset& data, const TrainHooks& hooks = {});

/// Trains a student against a frozen teacher (backbone and heads from `teacher`).
/// The emitted model is the EMA copy of the student.
TrainResult distill(const Checkpoint& teacher, const TrainConfig& student_cfg, const Dataset& data,
                    const TrainHooks& hooks = {});

/// Resolved config stored in a checkpoint.
TrainConfig checkpoint_config(const Checkpoint& ckpt);
/// Backbone used for evaluation (teacher for pretraining, EMA student for distillation).
VitModel<float> evaluation_backbone(const Checkpoint& ckpt);

/// Center crop of the tile at the model's image size (resized when the tile is smaller).
Image eval_view(const Image& tile, int size);

/// Batched inference over images of one size.
std::vector<TokenOutput<float>> embed_images(const VitModel<float>& model, std::span<const Image> images,
                                             int batch = 64);

}  // namespace pssl
