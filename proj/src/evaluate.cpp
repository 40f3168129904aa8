#include "pssl/evaluate.hpp"

#include <algorithm>
#include <map>
#include <set>

namespace pssl {

std::vector<Split> slide_split(const std::vector<TileMeta>& meta) {
    std::set<std::string> ids;
    for (const TileMeta& m : meta) ids.insert(m.slide_id);
    std::map<std::string, Split> of;
    int i = 0;
    for (const std::string& id : ids) {
        const int r = i++ % 5;
        of[id] = r < 3 ? Split::train : (r == 3 ? Split::val : Split::test);
    }
    std::vector<Split> out;
    out.reserve(meta.size());
    for (const TileMeta& m : meta) out.push_back(of.at(m.slide_id));
    return out;
}

Labels tissue_labels(const std::vector<TileMeta>& meta) {
    std::set<std::string> names;
    for (const TileMeta& m : meta) names.insert(m.tissue);
    Labels l;
    l.classes.assign(names.begin(), names.end());
    for (const TileMeta& m : meta)
        l.y.push_back(static_cast<int>(std::lower_bound(l.classes.begin(), l.classes.end(), m.tissue) - l.classes.begin()));
    return l;
}

std::vector<TokenOutput<float>> embed_dataset(const VitModel<float>& model, const Dataset& data, int view_size) {
    std::vector<Image> views;
    views.reserve(data.tiles.size());
    for (const Image& t : data.tiles) views.push_back(eval_view(t, view_size));
    return embed_images(model, views);
}

ProbeSplits make_splits(const MatD& x, const std::vector<int>& y, const std::vector<Split>& split) {
    if (x.rows() != static_cast<Eigen::Index>(y.size()) || y.size() != split.size())
        throw DimensionError("embedding, label and split counts differ");
    ProbeSplits s;
    LabeledSet* sets[] = {&s.train, &s.val, &s.test};
    std::vector<Eigen::Index> rows[3];
    for (std::size_t i = 0; i < y.size(); ++i) rows[static_cast<int>(split[i])].push_back(static_cast<Eigen::Index>(i));
    for (int k = 0; k < 3; ++k) {
        sets[k]->x.resize(static_cast<Eigen::Index>(rows[k].size()), x.cols());
        for (std::size_t r = 0; r < rows[k].size(); ++r) {
            sets[k]->x.row(static_cast<Eigen::Index>(r)) = x.row(rows[k][r]);
            sets[k]->y.push_back(y[static_cast<std::size_t>(rows[k][r])]);
        }
    }
    if (s.train.y.empty() || s.val.y.empty() || s.test.y.empty())
        throw DataError("slide split left an empty train, validation or test set (need at least 5 slides)");
    return s;
}

EvalRun probe_embeddings(const std::vector<TokenOutput<float>>& outs, const std::vector<TileMeta>& meta,
                         Aggregation mode, const ProbeConfig& cfg, std::uint64_t seed) {
    const Labels labels = tissue_labels(meta);
    const ProbeSplits s = make_splits(aggregate_all(outs, mode), labels.y, slide_split(meta));
    Rng rng(seed);
    EvalRun run;
    run.probe = linear_probe(s.train, s.val, s.test, cfg, rng);
    run.test_labels = s.test.y;
    run.n_test = static_cast<long>(s.test.y.size());
    return run;
}

EvalRun probe_checkpoint(const Checkpoint& ckpt, const Dataset& data, Aggregation mode, const ProbeConfig& cfg,
                         std::uint64_t seed) {
    const VitModel<float> model = evaluation_backbone(ckpt);
    const TrainConfig tc = checkpoint_config(ckpt);
    return probe_embeddings(embed_dataset(model, data, tc.ect.global_size), data.meta, mode, cfg, seed);
}

}  // namespace pssl
