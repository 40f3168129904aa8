#include "cli.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pssl/augment.hpp"
#include "pssl/checkpoint.hpp"
#include "pssl/config.hpp"
#include "pssl/datagen.hpp"
#include "pssl/errors.hpp"
#include "pssl/evaluate.hpp"
#include "pssl/probe.hpp"
#include "pssl/train.hpp"

namespace fs = std::filesystem;

namespace pssl::cli {
namespace {

constexpr const char* kSnapshot = "resolved_config.cfg";

int exit_code(ErrorCategory c) {
    switch (c) {
        case ErrorCategory::config:
        case ErrorCategory::dimension:
        case ErrorCategory::parameter:
            return 2;
        case ErrorCategory::numeric:
            return 3;
        case ErrorCategory::data:
        case ErrorCategory::io:
            return 4;
    }
    return 1;
}

std::string fmt_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_snapshot(const fs::path& dir, const std::string& text) {
    ensure_dir(dir);
    write_file(dir / kSnapshot, text);
}

std::string entries_text(const ConfigEntries& e) {
    std::string out;
    for (const auto& [k, v] : e) out += k + " = " + v + "\n";
    return out;
}

// Shared --config / --preset / --override handling.
struct ConfigOpts {
    std::string config_path;
    std::string preset;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;

    void add(CLI::App* app) {
        app->add_option("--config", config_path, "Config file (key = value lines)");
        app->add_option("--preset", preset, "Start from a named preset instead of a file");
        app->add_option("--override", overrides, "key=value override, repeatable");
        app->add_option("--seed", seed, "Run seed (overrides the config)");
    }

    TrainConfig resolve() const {
        if (!config_path.empty() && !preset.empty()) throw ConfigError("--config and --preset are exclusive");
        TrainConfig cfg;
        if (!config_path.empty()) {
            if (!fs::exists(config_path)) throw IoError("config file not found: " + config_path);
            cfg = load_config(config_path, overrides);
        } else {
            cfg = config_from_text(preset.empty() ? "" : "preset = " + preset + "\n", overrides);
        }
        if (seed) cfg.seed = *seed;
        cfg.validate();
        return cfg;
    }
};

// gen-data ------------------------------------------------------------------

struct GenDataOpts {
    std::string out;
    std::uint64_t seed = 0;
    std::string task = "texture";
    DataGenSpec spec;
    LocalizedTaskSpec loc;
};

int cmd_gen_data(const GenDataOpts& o) {
    ConfigEntries snap{{"task", o.task}, {"seed", std::to_string(o.seed)}};
    if (o.task == "texture") {
        o.spec.validate();
        snap.insert(snap.end(), {{"slides", std::to_string(o.spec.slides)},
                                 {"classes", std::to_string(o.spec.classes)},
                                 {"slide_size", std::to_string(o.spec.slide_size)},
                                 {"tile_size", std::to_string(o.spec.tile_size)},
                                 {"background_fraction", fmt_g(o.spec.background_fraction)},
                                 {"min_coverage", fmt_g(o.spec.min_coverage)},
                                 {"feature_scale", fmt_g(o.spec.feature_scale)},
                                 {"ihc_fraction", fmt_g(o.spec.ihc_fraction)}});
    } else if (o.task == "localized") {
        snap.insert(snap.end(), {{"samples", std::to_string(o.loc.samples)},
                                 {"tile_size", std::to_string(o.loc.tile_size)},
                                 {"patch_fraction", fmt_g(o.loc.patch_fraction)},
                                 {"window_fraction", fmt_g(o.loc.window_fraction)}});
    } else {
        throw ConfigError("unknown data task '" + o.task + "' (expected texture or localized)");
    }
    write_snapshot(o.out, entries_text(snap));
    const Manifest m = o.task == "texture" ? generate_dataset(o.out, o.spec, o.seed)
                                           : generate_localized_task(o.out, o.loc, o.seed);
    std::printf("wrote %zu tiles to %s\n", m.records.size(), (fs::path(o.out) / "manifest.tsv").c_str());
    return 0;
}

// train / distill -----------------------------------------------------------

struct TrainOpts {
    ConfigOpts cfg;
    std::string out;
    std::string data;
    std::string teacher;  // distill only
    int log_every = 50;
};

int run_training(const TrainOpts& o, bool distillation) {
    const TrainConfig cfg = o.cfg.resolve();
    const fs::path out(o.out);
    write_snapshot(out, config_to_text(cfg));

    std::optional<Checkpoint> teacher;
    if (distillation) teacher = load_checkpoint(o.teacher);
    const Dataset data = load_dataset(o.data, cfg.ect.source_size);

    RunMetrics partial;
    TrainHooks hooks;
    hooks.on_step = [&](const MetricsRow& r) {
        partial.append(r);
        if (o.log_every > 0 && r.step % o.log_every == 0)
            std::fprintf(stderr, "%s\n", RunMetrics::format_row(r).c_str());
    };
    hooks.on_checkpoint = [&](long step, const Checkpoint& c) {
        save_checkpoint(out / ("checkpoint_" + std::to_string(step) + ".pssl"), c);
        write_file(out / "metrics.tsv", partial.to_tsv());
    };
    TrainResult r;
    try {
        r = distillation ? distill(*teacher, cfg, data, hooks) : train(cfg, data, hooks);
    } catch (const NumericError&) {
        write_file(out / "metrics.tsv", partial.to_tsv());
        throw;
    }
    save_checkpoint(out / "checkpoint.pssl", r.checkpoint);
    write_file(out / "metrics.tsv", r.metrics.to_tsv());
    std::printf("%ld steps, checkpoint %s\n", static_cast<long>(r.metrics.rows.size()),
                (out / "checkpoint.pssl").c_str());
    return 0;
}

// probe ---------------------------------------------------------------------

struct ProbeOpts {
    std::string checkpoint;
    std::string run_dir;
    std::string data;
    std::string out;
    std::string task = "probe";
    std::vector<std::string> aggregations{"cls_only", "cls_mean"};
    std::uint64_t seed = 0;
    ProbeConfig probe;
};

int cmd_probe(const ProbeOpts& o) {
    fs::path ckpt_path = o.checkpoint;
    if (ckpt_path.empty()) {
        if (o.run_dir.empty()) throw ConfigError("probe needs --checkpoint or --run");
        ckpt_path = fs::path(o.run_dir) / "checkpoint.pssl";
    }
    std::vector<Aggregation> modes;
    for (const std::string& a : o.aggregations) modes.push_back(parse_aggregation(a));
    o.probe.validate();

    ConfigEntries snap{{"checkpoint", ckpt_path.string()},
                       {"data", o.data},
                       {"task", o.task},
                       {"seed", std::to_string(o.seed)},
                       {"iterations", std::to_string(o.probe.iterations)},
                       {"batch", std::to_string(o.probe.batch)},
                       {"lr", fmt_g(o.probe.lr)},
                       {"lr_end", fmt_g(o.probe.lr_end)},
                       {"eval_every", std::to_string(o.probe.eval_every)}};
    std::string aggs;
    for (const std::string& a : o.aggregations) aggs += (aggs.empty() ? "" : ",") + a;
    snap.emplace_back("aggregations", aggs);
    const fs::path out(o.out);
    write_snapshot(out, entries_text(snap));

    if (!fs::exists(ckpt_path)) throw DataError("no checkpoint at " + ckpt_path.string() + " (train first)");
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const TrainConfig tc = checkpoint_config(ckpt);
    const Dataset data = load_dataset(o.data, tc.ect.source_size);
    const VitModel<float> model = evaluation_backbone(ckpt);
    const std::vector<TokenOutput<float>> outs = embed_dataset(model, data, tc.ect.global_size);

    std::vector<ReportRow> rows;
    std::string preds = "config\tindex\tlabel\tpred\n";
    for (Aggregation mode : modes) {
        const EvalRun run = probe_embeddings(outs, data.meta, mode, o.probe, o.seed);
        const std::string name = to_string(mode);
        rows.push_back({o.task, name, "accuracy", run.probe.test_accuracy, run.n_test});
        rows.push_back({o.task, name, "weighted_f1", run.probe.test_weighted_f1, run.n_test});
        for (std::size_t i = 0; i < run.test_labels.size(); ++i)
            preds += name + "\t" + std::to_string(i) + "\t" + std::to_string(run.test_labels[i]) + "\t" +
                     std::to_string(run.probe.test_pred[i]) + "\n";
        std::printf("%s\taccuracy %.4f\tweighted_f1 %.4f\tn_test %ld\n", name.c_str(), run.probe.test_accuracy,
                    run.probe.test_weighted_f1, run.n_test);
    }
    write_file(out / "report.tsv", report_tsv(rows));
    write_file(out / "predictions.tsv", preds);
    return 0;
}

// preview-augment -----------------------------------------------------------

struct PreviewOpts {
    ConfigOpts cfg;
    std::string tile;
    std::string out;
    int n = 4;
    bool photometric = false;
};

int cmd_preview(const PreviewOpts& o) {
    if (o.n < 1) throw ConfigError("--n must be at least 1");
    const bool from_config = !o.cfg.config_path.empty() || !o.cfg.preset.empty() || !o.cfg.overrides.empty();
    EctConfig ect;
    PhotometricPolicy photo = PhotometricPolicy::disabled();
    std::uint64_t seed = o.cfg.seed.value_or(0);
    ConfigEntries snap;
    if (from_config) {
        const TrainConfig cfg = o.cfg.resolve();
        ect = cfg.ect;
        if (o.photometric) photo = cfg.photo;
        seed = cfg.seed;
        snap = config_entries(cfg);
    } else {
        if (o.photometric) photo = PhotometricPolicy{};
        snap = {{"source_size", std::to_string(ect.source_size)},
                {"global_size", std::to_string(ect.global_size)},
                {"scale_range", fmt_g(ect.scale.lo) + "," + fmt_g(ect.scale.hi)},
                {"aspect_ratio_range", fmt_g(ect.aspect.lo) + "," + fmt_g(ect.aspect.hi)},
                {"crop_scale_range", fmt_g(ect.crop_global_scale.lo) + "," + fmt_g(ect.crop_global_scale.hi)},
                {"seed", std::to_string(seed)}};
    }
    snap.emplace_back("tile", o.tile);
    snap.emplace_back("n", std::to_string(o.n));
    snap.emplace_back("photometric", o.photometric ? "true" : "false");
    ect.validate();

    const Image8 tile8 = read_ppm(o.tile);
    if (tile8.height != ect.source_size || tile8.width != ect.source_size)
        throw ConfigError("preview-augment expects a " + std::to_string(ect.source_size) + "x" +
                          std::to_string(ect.source_size) + " tile, got " + std::to_string(tile8.height) + "x" +
                          std::to_string(tile8.width));
    const fs::path out(o.out);
    write_snapshot(out, entries_text(snap));

    const Image tile = to_float(tile8);
    const int off = (ect.source_size - ect.global_size) / 2;
    const Image center = crop(tile, CropRect{off, off, ect.global_size, ect.global_size});
    std::string rects = "policy\tview\tx\ty\tw\th\n";
    auto emit = [&](const char* policy, int i, const CropRect& r, const Image& img, Rng& rng) {
        const Image view = apply_photometric(img, photo, rng);
        write_ppm(out / (std::string(policy) + "_" + std::to_string(i) + ".ppm"), to_u8(view));
        rects += std::string(policy) + "\t" + std::to_string(i) + "\t" + std::to_string(r.x) + "\t" +
                 std::to_string(r.y) + "\t" + std::to_string(r.w) + "\t" + std::to_string(r.h) + "\n";
    };
    const Rng root(seed);
    for (int i = 0; i < o.n; ++i) {
        Rng rng = root.fork(static_cast<std::uint64_t>(i));
        auto [rect, img] = sample_ect(tile, ect.global_size, ect, rng);
        emit("ect", i, rect, img, rng);
    }
    for (int i = 0; i < o.n; ++i) {
        Rng rng = root.fork(0x10000 + static_cast<std::uint64_t>(i));
        auto [rect, img] = sample_crop_resize(center, ect.global_size, ect.crop_global_scale, ect.crop_aspect, rng);
        emit("crop", i, CropRect{rect.x + off, rect.y + off, rect.w, rect.h}, img, rng);
    }
    write_file(out / "rects.tsv", rects);
    std::printf("wrote %d views to %s\n", 2 * o.n, o.out.c_str());
    return 0;
}

// report --------------------------------------------------------------------

struct ReportOpts {
    std::vector<std::string> inputs;
    std::string out;
};

struct Predictions {
    std::map<std::string, std::vector<int>> labels, preds;
};

Predictions read_predictions(const fs::path& path) {
    Predictions p;
    std::istringstream in(read_file(path));
    std::string line;
    if (!std::getline(in, line) || line != "config\tindex\tlabel\tpred")
        throw DataError("unexpected predictions header in " + path.string());
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string config;
        long index = 0;
        int label = 0, pred = 0;
        if (!(std::getline(ls, config, '\t') >> index >> label >> pred))
            throw DataError("malformed prediction row in " + path.string() + ": " + line);
        p.labels[config].push_back(label);
        p.preds[config].push_back(pred);
    }
    return p;
}

std::string model_name(const fs::path& dir) {
    const fs::path p = dir.has_filename() ? dir : dir.parent_path();
    return p.filename().string();
}

int cmd_report(const ReportOpts& o) {
    if (o.inputs.empty()) throw ConfigError("report needs at least one --input run directory");
    std::string listed;
    for (const std::string& in : o.inputs) listed += (listed.empty() ? "" : ",") + in;
    const fs::path out(o.out);
    write_snapshot(out, entries_text({{"inputs", listed}}));

    std::vector<ReportRow> rows;
    std::vector<std::pair<std::string, Predictions>> preds;
    for (const std::string& in : o.inputs) {
        const fs::path dir(in);
        const std::string name = model_name(dir);
        for (ReportRow r : parse_report_tsv(read_file(dir / "report.tsv"))) {
            r.config = name + "/" + r.config;
            rows.push_back(r);
        }
        if (fs::exists(dir / "predictions.tsv")) preds.emplace_back(name, read_predictions(dir / "predictions.tsv"));
    }
    std::vector<ComparisonRow> cmp;
    for (std::size_t a = 0; a < preds.size(); ++a)
        for (std::size_t b = a + 1; b < preds.size(); ++b)
            for (const auto& [config, la] : preds[a].second.labels) {
                auto it = preds[b].second.labels.find(config);
                if (it == preds[b].second.labels.end() || it->second != la) continue;
                cmp.push_back({preds[a].first + "/" + config, preds[b].first + "/" + config,
                               mcnemar(preds[a].second.preds.at(config), preds[b].second.preds.at(config), la)});
            }
    write_file(out / "report.tsv", report_tsv(rows));
    write_file(out / "comparison.tsv", comparison_tsv(cmp));
    std::printf("%zu report rows, %zu comparisons\n", rows.size(), cmp.size());
    return 0;
}

void apply_worker_env() {
    if (const char* w = std::getenv("PSSL_WORKERS")) {
        const int n = std::atoi(w);
        if (n > 0) Eigen::setNbThreads(n);
    }
}

}  // namespace

int run(int argc, char** argv) {
    apply_worker_env();
    CLI::App app{"Self-supervised pathology foundation model toolkit"};
    app.require_subcommand(1);

    GenDataOpts gen;
    auto* g = app.add_subcommand("gen-data", "Generate a synthetic tile dataset");
    g->add_option("--out", gen.out, "Output directory")->required();
    g->add_option("--seed", gen.seed, "Generator seed");
    g->add_option("--task", gen.task, "texture or localized");
    g->add_option("--slides", gen.spec.slides, "Slides (texture task)");
    g->add_option("--classes", gen.spec.classes, "Texture classes (texture task)");
    g->add_option("--feature-scale", gen.spec.feature_scale, "Texture feature scale");
    g->add_option("--ihc-fraction", gen.spec.ihc_fraction, "Fraction of IHC-stained slides");
    g->add_option("--samples", gen.loc.samples, "Samples (localized task)");

    TrainOpts tr;
    auto* t = app.add_subcommand("train", "Student-teacher pretraining");
    tr.cfg.add(t);
    t->add_option("--data", tr.data, "Manifest of training tiles")->required();
    t->add_option("--out", tr.out, "Run directory")->required();
    t->add_option("--log-every", tr.log_every, "Print a metrics row every N steps (0: never)");

    TrainOpts di;
    auto* d = app.add_subcommand("distill", "Distill a frozen teacher checkpoint into a student");
    di.cfg.add(d);
    d->add_option("--teacher", di.teacher, "Teacher checkpoint")->required();
    d->add_option("--data", di.data, "Manifest of training tiles")->required();
    d->add_option("--out", di.out, "Run directory")->required();
    d->add_option("--log-every", di.log_every, "Print a metrics row every N steps (0: never)");

    ProbeOpts pr;
    auto* p = app.add_subcommand("probe", "Linear probe on frozen embeddings");
    p->add_option("--checkpoint", pr.checkpoint, "Checkpoint file");
    p->add_option("--run", pr.run_dir, "Run directory holding checkpoint.pssl");
    p->add_option("--data", pr.data, "Manifest of labelled tiles")->required();
    p->add_option("--out", pr.out, "Output directory")->required();
    p->add_option("--task", pr.task, "Task name used in the report");
    p->add_option("--aggregation", pr.aggregations, "cls_only, cls_mean or patch_max (repeatable)");
    p->add_option("--seed", pr.seed, "Probe seed");
    p->add_option("--iterations", pr.probe.iterations, "SGD iterations");
    p->add_option("--batch", pr.probe.batch, "SGD batch size");
    p->add_option("--lr", pr.probe.lr, "Initial learning rate");

    PreviewOpts pv;
    auto* v = app.add_subcommand("preview-augment", "Write ECT and crop-and-resize views of one tile");
    pv.cfg.add(v);
    v->add_option("--tile", pv.tile, "Source tile (PPM)")->required();
    v->add_option("--out", pv.out, "Output directory")->required();
    v->add_option("--n", pv.n, "Views per policy");
    v->add_flag("--photometric", pv.photometric, "Also apply the photometric policy");

    ReportOpts rp;
    auto* r = app.add_subcommand("report", "Merge probe reports and compare runs with McNemar's test");
    r->add_option("--input", rp.inputs, "Probe output directory (repeatable)")->required();
    r->add_option("--out", rp.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*g) return cmd_gen_data(gen);
        if (*t) return run_training(tr, false);
        if (*d) return run_training(di, true);
        if (*p) return cmd_probe(pr);
        if (*v) return cmd_preview(pv);
        if (*r) return cmd_report(rp);
    } catch (const Error& e) {
        std::fprintf(stderr, "error [%s]: %s\n", category_name(e.category()), e.what());
        return exit_code(e.category());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error [internal]: %s\n", e.what());
        return 1;
    }
    return 1;
}

}  // namespace pssl::cli
