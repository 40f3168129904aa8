#pragma once

#include <string>
#include <vector>

#include "pssl/checkpoint.hpp"
#include "pssl/probe.hpp"
#include "pssl/train.hpp"

namespace pssl {

enum class Split { train = 0, val = 1, test = 2 };

/// Slide-level split: distinct slide ids in sorted order, index mod 5 gives
/// 0-2 train, 3 val, 4 test. Tiles of one slide never cross splits.
std::vector<Split> slide_split(const std::vector<TileMeta>& meta);

/// Labels from the tissue column, indexed by the sorted distinct names.
struct Labels {
    std::vector<int> y;
    std::vector<std::string> classes;
};
Labels tissue_labels(const std::vector<TileMeta>& meta);

/// Center view of every tile at `view_size`, embedded by the frozen model.
std::vector<TokenOutput<float>> embed_dataset(const VitModel<float>& model, const Dataset& data, int view_size);

struct ProbeSplits {
    LabeledSet train, val, test;
};
ProbeSplits make_splits(const MatD& x, const std::vector<int>& y, const std::vector<Split>& split);

struct EvalRun {
    ProbeResult probe;
    std::vector<int> test_labels;
    long n_test = 0;
};

/// Aggregates embeddings, splits by slide and runs the linear probe.
EvalRun probe_embeddings(const std::vector<TokenOutput<float>>& outs, const std::vector<TileMeta>& meta,
                         Aggregation mode, const ProbeConfig& cfg, std::uint64_t seed);

/// Frozen evaluation backbone of a checkpoint, probed on a dataset.
EvalRun probe_checkpoint(const Checkpoint& ckpt, const Dataset& data, Aggregation mode, const ProbeConfig& cfg,
                         std::uint64_t seed);

}  // namespace pssl
