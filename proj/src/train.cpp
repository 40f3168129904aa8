#include "pssl/train.hpp"

#include <cmath>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <cstdio>
#include <numbers>
#include <sstream>

#include "pssl/objective.hpp"
#include "pssl/optim.hpp"

namespace pssl {

// ---------------------------------------------------------------------------
// Data

namespace {

// Box-filter downsampling by an integer factor.
Image downsample_area(const Image& img, int factor) {
    Image out(img.height / factor, img.width / factor);
    const float inv = 1.0f / static_cast<float>(factor * factor);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < 3; ++c) {
                float s = 0.0f;
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx) s += img.at(y * factor + dy, x * factor + dx, c);
                out.at(y, x, c) = s * inv;
            }
    return out;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& manifest_path, int context) {
    if (!std::filesystem::exists(manifest_path)) throw DataError("manifest not found: " + manifest_path.string());
    Manifest m = read_manifest(manifest_path, true);
    if (m.records.empty()) throw DataError("manifest has no tiles: " + manifest_path.string());
    Dataset d;
    d.root = manifest_path.parent_path();
    d.meta = m.records;
    d.tiles.reserve(m.records.size());
    for (const TileMeta& r : m.records) {
        Image img = to_float(read_ppm(d.root / r.path));
        if (img.height != img.width) throw DataError("tile is not square: " + r.path);
        if (img.height != context) {
            if (img.height > context && img.height % context == 0)
                img = downsample_area(img, img.height / context);
            else
                img = bilinear_resize(img, context, context);
        }
        d.tiles.push_back(std::move(img));
    }
    return d;
}

// ---------------------------------------------------------------------------
// Network

SslNetwork SslNetwork::init(const TrainConfig& cfg, Rng& rng) {
    Rng r_backbone = rng.fork(11), r_dino = rng.fork(12), r_ibot = rng.fork(13);
    SslNetwork n;
    n.backbone = VitModel<float>(cfg.model, r_backbone);
    n.dino_head = ProjectionHead<float>(cfg.head, cfg.model.embed_dim, r_dino);
    n.ibot_head = ProjectionHead<float>(cfg.head, cfg.model.embed_dim, r_ibot);
    return n;
}

SslNetwork SslNetwork::from_checkpoint(const Checkpoint& ckpt, const std::string& prefix, const TrainConfig& cfg) {
    SslNetwork n;
    n.backbone = VitModel<float>(cfg.model, extract_params(ckpt, prefix + "backbone."));
    n.dino_head = ProjectionHead<float>(cfg.head, cfg.model.embed_dim, extract_params(ckpt, prefix + "dino_head."));
    n.ibot_head = ProjectionHead<float>(cfg.head, cfg.model.embed_dim, extract_params(ckpt, prefix + "ibot_head."));
    return n;
}

void SslNetwork::store(Checkpoint& ckpt, const std::string& prefix) const {
    ckpt.tensors.append(prefix + "backbone.", backbone.params());
    ckpt.tensors.append(prefix + "dino_head.", dino_head.params());
    ckpt.tensors.append(prefix + "ibot_head.", ibot_head.params());
}

std::vector<ParamSet<float>*> SslNetwork::parts() {
    return {&backbone.params(), &dino_head.params(), &ibot_head.params()};
}

std::vector<const ParamSet<float>*> SslNetwork::parts() const {
    return {&backbone.params(), &dino_head.params(), &ibot_head.params()};
}

// ---------------------------------------------------------------------------
// Metrics

void RunMetrics::append(const MetricsRow& r) {
    if (!rows.empty() && r.step <= rows.back().step) throw ParameterError("metrics steps must strictly increase");
    rows.push_back(r);
}

std::string RunMetrics::header() { return "step\tl_dino\tl_ibot\tl_reg\ttotal\tgrad_norm\teff_rank\ttau_t\tlr\tema_m"; }

std::string RunMetrics::format_row(const MetricsRow& r) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%ld\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g", r.step, r.l_dino,
                  r.l_ibot, r.l_reg, r.total, r.grad_norm, r.eff_rank, r.tau_t, r.lr, r.ema_m);
    return buf;
}

std::string RunMetrics::to_tsv() const {
    std::string out = header() + "\n";
    for (const MetricsRow& r : rows) out += format_row(r) + "\n";
    return out;
}

RunMetrics RunMetrics::parse_tsv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != header()) throw DataError("metrics TSV has an unexpected header");
    RunMetrics m;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        MetricsRow r;
        if (!(ls >> r.step >> r.l_dino >> r.l_ibot >> r.l_reg >> r.total >> r.grad_norm >> r.eff_rank >> r.tau_t >>
              r.lr >> r.ema_m))
            throw DataError("malformed metrics row: " + line);
        m.append(r);
    }
    return m;
}

bool RunMetrics::operator==(const RunMetrics& o) const { return to_tsv() == o.to_tsv(); }

// ---------------------------------------------------------------------------
// Schedules

double teacher_temp(long t, const TrainConfig& cfg) {
    const long w = cfg.teacher_warmup_steps();
    if (t >= w || w <= 0) return cfg.teacher_temp;
    return cfg.teacher_temp_warmup +
           (cfg.teacher_temp - cfg.teacher_temp_warmup) * static_cast<double>(t) / static_cast<double>(w);
}

double lr_at(long t, const TrainConfig& cfg) {
    const long total = cfg.steps();
    const long warm = static_cast<long>(std::lround(cfg.optim.warmup_frac * static_cast<double>(total)));
    return cosine_schedule(t, total, cfg.peak_lr(), cfg.min_lr, warm);
}

double wd_at(long t, const TrainConfig& cfg) {
    return cosine_schedule(t, cfg.steps(), cfg.optim.wd_start, cfg.optim.wd_end, 0);
}

double ema_momentum_at(long t, const TrainConfig& cfg) {
    return cosine_schedule(t, cfg.steps(), cfg.teacher_momentum_start, cfg.teacher_momentum_end, 0);
}

double effective_rank(const MatD& e) {
    if (e.rows() < 2) throw ParameterError("effective_rank needs at least two rows");
    MatD c = e.rowwise() - e.colwise().mean();
    Eigen::BDCSVD<Eigen::MatrixXd> svd(c);
    const Eigen::VectorXd s = svd.singularValues();
    const double total = s.sum();
    if (!(total > 0) || s.maxCoeff() <= 1e-12 * std::max(1.0, e.cwiseAbs().maxCoeff())) return 1.0;
    double h = 0.0;
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        const double p = s(i) / total;
        if (p > 0) h -= p * std::log(p);
    }
    return std::exp(h);
}

std::vector<long> detect_spikes(const RunMetrics& m, int window, double k, long skip_steps) {
    std::vector<long> out;
    for (std::size_t i = static_cast<std::size_t>(window); i < m.rows.size(); ++i) {
        if (m.rows[i].step < skip_steps) continue;
        double mean = 0, sq = 0;
        for (std::size_t j = i - window; j < i; ++j) mean += m.rows[j].total;
        mean /= window;
        for (std::size_t j = i - window; j < i; ++j) sq += (m.rows[j].total - mean) * (m.rows[j].total - mean);
        const double sd = std::sqrt(sq / window);
        if (m.rows[i].total > mean + k * sd && sd > 0) out.push_back(m.rows[i].step);
    }
    return out;
}

std::vector<bool> decay_mask(const ParamSet<float>& p) {
    std::vector<bool> out(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        const std::string& n = p.name(i);
        out[i] = p[i].ndim() == 2 && n.size() >= 7 && n.compare(n.size() - 7, 7, ".weight") == 0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training step

namespace {

struct Batch {
    std::vector<Image> global;  // view-major: g * B + b
    std::vector<Image> local;   // view-major: l * B + b
    std::vector<std::vector<std::uint8_t>> masks;  // one per global image
    int B = 0, G = 0, L = 0;
};

Batch assemble_batch(const TrainConfig& cfg, const Dataset& data, BalancedSampler& sampler, Rng step_rng) {
    Batch batch;
    batch.B = cfg.optim.batch_size;
    batch.G = cfg.ect.n_global;
    batch.L = cfg.ect.n_local;
    batch.global.resize(static_cast<std::size_t>(batch.B) * batch.G);
    batch.local.resize(static_cast<std::size_t>(batch.B) * batch.L);
    for (int b = 0; b < batch.B; ++b) {
        const std::size_t idx = sampler.next();
        Rng vr = step_rng.fork(static_cast<std::uint64_t>(b));
        ViewSet vs = make_views(data.tiles[idx], cfg.photo, cfg.ect, vr);
        for (int g = 0; g < batch.G; ++g) batch.global[g * batch.B + b] = std::move(vs.global_views[g].image);
        for (int l = 0; l < batch.L; ++l) batch.local[l * batch.B + b] = std::move(vs.local_views[l].image);
    }
    const int grid = cfg.ect.global_size / cfg.model.patch_size;
    Rng mr = step_rng.fork(0x6D61736BULL);
    for (std::size_t i = 0; i < batch.global.size(); ++i) batch.masks.push_back(block_mask(grid, cfg.mask_ratio, mr));
    return batch;
}

MatD to_double(const Mat<float>& m) { return m.cast<double>(); }
Mat<float> to_float_mat(const MatD& m) { return m.cast<float>(); }

MatD teacher_targets(const MatD& logits, double tau, const TrainConfig& cfg) {
    if (cfg.sinkhorn) return sinkhorn_center(logits / tau, cfg.sinkhorn_iters);
    return softmax_temp(logits, tau);
}

struct Grads {
    ParamSet<float> backbone, dino, ibot;
    explicit Grads(const SslNetwork& n)
        : backbone(n.backbone.params().zeros_like()),
          dino(n.dino_head.params().zeros_like()),
          ibot(n.ibot_head.params().zeros_like()) {}
    std::vector<ParamSet<float>*> parts() { return {&backbone, &dino, &ibot}; }
    void zero() {
        for (auto* p : parts()) p->zero();
    }
};

struct StepResult {
    LossParts parts;
    MatD rank_embeddings;
};

/// Forward and backward for one batch. The teacher sees unmasked global views.
StepResult ssl_step(const SslNetwork& student, const SslNetwork& teacher, const Batch& batch, const TrainConfig& cfg,
                    double tau_t, Rng& drop_rng, Grads& grads, bool rank_from_student, VitCache<float>& cg,
                    VitCache<float>& cl) {
    const int B = batch.B, G = batch.G, L = batch.L;
    const int D = cfg.model.embed_dim;
    const bool shared = cfg.head.shared_heads;

    // Teacher targets.
    const TokenBatch<float> tg = teacher.backbone.forward(batch.global);
    const Mat<float> t_cls = tg.cls();
    const MatD t_dino = teacher_targets(to_double(teacher.dino_head.forward(t_cls)), tau_t, cfg);
    std::vector<MatD> t_views(G);
    for (int g = 0; g < G; ++g) t_views[g] = t_dino.middleRows(static_cast<Eigen::Index>(g) * B, B);

    std::vector<Eigen::Index> masked_rows;  // rows of the global token matrix
    for (int i = 0; i < G * B; ++i)
        for (int p = 0; p < tg.patches; ++p)
            if (batch.masks[i][p]) masked_rows.push_back(tg.patch_row(i, p));
    const Eigen::Index M = static_cast<Eigen::Index>(masked_rows.size());
    Mat<float> t_patch(M, D);
    for (Eigen::Index r = 0; r < M; ++r) t_patch.row(r) = tg.tokens.row(masked_rows[r]);
    const ProjectionHead<float>& t_ibot_head = shared ? teacher.dino_head : teacher.ibot_head;
    MatD t_ibot;
    if (M > 0) t_ibot = teacher_targets(to_double(t_ibot_head.forward(t_patch)), tau_t, cfg);

    // Student forward.
    ForwardOptions gopt{cfg.drop_path, &drop_rng, &batch.masks};
    ForwardOptions lopt{cfg.drop_path, &drop_rng, nullptr};
    const TokenBatch<float> sg = student.backbone.forward(batch.global, gopt, &cg);
    TokenBatch<float> sl;
    if (L > 0) sl = student.backbone.forward(batch.local, lopt, &cl);

    Mat<float> s_cls(static_cast<Eigen::Index>(G + L) * B, D);
    s_cls.topRows(static_cast<Eigen::Index>(G) * B) = sg.cls();
    if (L > 0) s_cls.bottomRows(static_cast<Eigen::Index>(L) * B) = sl.cls();
    HeadCache<float> hd;
    const MatD s_dino = to_double(student.dino_head.forward(s_cls, &hd));
    std::vector<MatD> s_views(G + L);
    for (int v = 0; v < G + L; ++v) s_views[v] = s_dino.middleRows(static_cast<Eigen::Index>(v) * B, B);
    const CrossEntropyResult dino = dino_loss(s_views, t_views, cfg.student_temp);

    Mat<float> s_patch(M, D);
    for (Eigen::Index r = 0; r < M; ++r) s_patch.row(r) = sg.tokens.row(masked_rows[r]);
    const ProjectionHead<float>& s_ibot_head = shared ? student.dino_head : student.ibot_head;
    HeadCache<float> hi;
    IbotResult ibot;
    if (M > 0) {
        const MatD s_ibot = to_double(s_ibot_head.forward(s_patch, &hi));
        const std::vector<std::uint8_t> all(static_cast<std::size_t>(M), 1);
        ibot = ibot_loss(s_ibot, t_ibot, all, cfg.student_temp);
    }

    // Regularizer on normalized student global class tokens, per global view.
    MatD d_reg = MatD::Zero(static_cast<Eigen::Index>(G) * B, D);
    double l_reg = 0.0;
    if (cfg.reg.kind != RegularizerKind::none) {
        for (int g = 0; g < G; ++g) {
            const MatD x = to_double(sg.cls().middleRows(static_cast<Eigen::Index>(g) * B, B));
            const Eigen::VectorXd norms = x.rowwise().norm().cwiseMax(1e-12);
            const MatD z = x.array().colwise() / norms.array();
            const RegularizerResult r = regularizer_loss(z, cfg.reg);
            l_reg += r.loss / G;
            const MatD dz = r.grad * (cfg.reg.weight / G);
            const Eigen::VectorXd radial = (dz.array() * z.array()).rowwise().sum();
            d_reg.middleRows(static_cast<Eigen::Index>(g) * B, B) =
                ((dz - (z.array().colwise() * radial.array()).matrix()).array().colwise() / norms.array()).matrix();
        }
    }

    StepResult out;
    out.parts = total_loss(dino.loss, ibot.loss, l_reg, cfg.reg.weight, B);
    if (!std::isfinite(out.parts.total)) return out;
    out.rank_embeddings = rank_from_student ? to_double(sg.cls()) : to_double(t_cls);

    // Backward.
    MatD d_dino(s_dino.rows(), s_dino.cols());
    for (int v = 0; v < G + L; ++v) d_dino.middleRows(static_cast<Eigen::Index>(v) * B, B) = dino.grads[v];
    const Mat<float> d_cls = student.dino_head.backward(hd, to_float_mat(d_dino), grads.dino);
    Mat<float> d_patch;
    if (M > 0) d_patch = s_ibot_head.backward(hi, to_float_mat(ibot.grad), shared ? grads.dino : grads.ibot);

    Mat<float> dg = Mat<float>::Zero(sg.tokens.rows(), D);
    for (int i = 0; i < G * B; ++i) dg.row(sg.cls_row(i)) = d_cls.row(i) + d_reg.row(i).cast<float>();
    for (Eigen::Index r = 0; r < M; ++r) dg.row(masked_rows[r]) += d_patch.row(r);
    student.backbone.backward(cg, dg, grads.backbone);
    if (L > 0) {
        Mat<float> dl = Mat<float>::Zero(sl.tokens.rows(), D);
        for (int i = 0; i < L * B; ++i) dl.row(sl.cls_row(i)) = d_cls.row(static_cast<Eigen::Index>(G) * B + i);
        student.backbone.backward(cl, dl, grads.backbone);
    }
    return out;
}

double clip_all(Grads& g, double max_norm) {
    double sq = 0.0;
    for (auto* p : g.parts()) {
        const double n = global_norm(*p);
        sq += n * n;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (auto* p : g.parts())
            for (std::size_t i = 0; i < p->size(); ++i)
                for (float& v : (*p)[i].values()) v = static_cast<float>(v * s);
    }
    return norm;
}

void add_config_meta(Checkpoint& ckpt, const TrainConfig& cfg, const std::string& prefix) {
    for (const auto& [k, v] : config_entries(cfg)) ckpt.meta[prefix + k] = v;
}

SamplerTargets targets_for(const Dataset& data) {
    // Strata absent from the data are dropped and the remaining weights renormalized.
    SamplerTargets t = SamplerTargets::defaults();
    std::map<std::string, double> diag;
    std::map<int, double> mag;
    for (const TileMeta& m : data.meta) {
        if (t.diagnosis_weights.count(m.diagnosis)) diag[m.diagnosis] = t.diagnosis_weights[m.diagnosis];
        if (t.magnification_weights.count(m.magnification)) mag[m.magnification] = t.magnification_weights[m.magnification];
    }
    if (diag.empty() || mag.empty()) throw DataError("dataset has no tiles matching any sampling stratum");
    auto renorm = [](auto& w) {
        double s = 0;
        for (auto& [k, v] : w) s += v;
        for (auto& [k, v] : w) v /= s;
    };
    renorm(diag);
    renorm(mag);
    t.diagnosis_weights = diag;
    t.magnification_weights = mag;
    return t;
}

struct OptParts {
    std::vector<OptState<float>> states;
    std::vector<std::vector<bool>> decay;
};

OptParts make_opt(SslNetwork& net) {
    OptParts o;
    for (auto* p : net.parts()) {
        o.states.push_back(OptState<float>::like(*p));
        o.decay.push_back(decay_mask(*p));
    }
    return o;
}

void store_opt(Checkpoint& ckpt, const OptParts& o) {
    static const char* names[] = {"backbone.", "dino_head.", "ibot_head."};
    for (std::size_t i = 0; i < o.states.size(); ++i) {
        ckpt.tensors.append(std::string("opt.m.") + names[i], o.states[i].m);
        ckpt.tensors.append(std::string("opt.v.") + names[i], o.states[i].v);
    }
    if (!o.states.empty()) ckpt.meta["opt_step"] = std::to_string(o.states[0].step);
}

struct LoopSpec {
    const TrainConfig* cfg;
    const Dataset* data;
    SslNetwork* student;
    SslNetwork* teacher;          // EMA teacher or frozen teacher
    SslNetwork* ema_copy;         // EMA copy of the student (distillation) or null
    bool teacher_is_ema;
    std::string kind;
};

// Large activation buffers are freed and reallocated every step. By default glibc serves them with
// mmap and hands them back immediately, which costs a page fault per touched page.
void keep_heap_warm() {
#if defined(__GLIBC__)
    static const bool once = [] {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        return true;
    }();
    (void)once;
#endif
}

TrainResult run_loop(const LoopSpec& s, const TrainHooks& hooks) {
    keep_heap_warm();
    const TrainConfig& cfg = *s.cfg;
    Rng root(cfg.seed);
    BalancedSampler sampler(s.data->meta, targets_for(*s.data), root.fork(2));
    const Rng aug_root = root.fork(3);
    Rng drop_root = root.fork(4);
    OptParts opt = make_opt(*s.student);
    Grads grads(*s.student);
    TrainResult result;

    auto make_ckpt = [&](long step) {
        Checkpoint ck;
        add_config_meta(ck, cfg, "cfg.");
        ck.meta["kind"] = s.kind;
        ck.meta["step"] = std::to_string(step);
        s.student->store(ck, "student.");
        if (s.teacher_is_ema) {
            s.teacher->store(ck, "teacher.");
            ck.meta["eval_prefix"] = "teacher.";
        } else {
            s.ema_copy->store(ck, "student_ema.");
            ck.meta["eval_prefix"] = "student_ema.";
        }
        store_opt(ck, opt);
        return ck;
    };

    const long steps = cfg.steps_to_run();
    double last_rank = 0.0;
    VitCache<float> cg, cl;  // kept across steps so activation buffers are reused
    for (long t = 0; t < steps; ++t) {
        const double tau = teacher_temp(t, cfg);
        const double lr = lr_at(t, cfg);
        const double wd = wd_at(t, cfg);
        const double m = s.teacher_is_ema ? ema_momentum_at(t, cfg) : cfg.student_ema_momentum;

        Batch batch = assemble_batch(cfg, *s.data, sampler, aug_root.fork(static_cast<std::uint64_t>(t)));
        Rng drop_rng = drop_root.fork(static_cast<std::uint64_t>(t));
        grads.zero();
        StepResult r = ssl_step(*s.student, *s.teacher, batch, cfg, tau, drop_rng, grads, !s.teacher_is_ema, cg, cl);
        if (!std::isfinite(r.parts.total)) {
            char buf[256];
            std::snprintf(buf, sizeof(buf), "non-finite total loss at step %ld (dino=%g ibot=%g reg=%g)", t,
                          r.parts.l_dino, r.parts.l_ibot, r.parts.l_reg);
            throw NumericError(buf);
        }
        if (t % cfg.eff_rank_every == 0) last_rank = effective_rank(r.rank_embeddings);
        const double gnorm = clip_all(grads, cfg.optim.grad_clip);
        auto sp = s.student->parts();
        auto gp = grads.parts();
        for (std::size_t i = 0; i < sp.size(); ++i)
            optimizer_step(*sp[i], *gp[i], opt.states[i], lr, wd, cfg.optim, opt.decay[i]);
        if (s.teacher_is_ema) {
            auto tp = s.teacher->parts();
            for (std::size_t i = 0; i < sp.size(); ++i) ema_update(*tp[i], *sp[i], m);
        } else {
            auto ep = s.ema_copy->parts();
            for (std::size_t i = 0; i < sp.size(); ++i) ema_update(*ep[i], *sp[i], m);
        }

        MetricsRow row{t, r.parts.l_dino, r.parts.l_ibot, r.parts.l_reg, r.parts.total, gnorm, last_rank, tau, lr, m};
        result.metrics.append(row);
        if (hooks.on_step) hooks.on_step(row);
        if (cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0 && t + 1 < steps && hooks.on_checkpoint)
            hooks.on_checkpoint(t + 1, make_ckpt(t + 1));
    }
    result.checkpoint = make_ckpt(steps);
    return result;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const Dataset& data, const TrainHooks& hooks) {
    cfg.validate();
    if (data.tiles.empty()) throw DataError("training dataset is empty");
    if (data.tiles[0].height != cfg.ect.source_size)
        throw DataError("dataset tiles are " + std::to_string(data.tiles[0].height) + " px, config expects " +
                        std::to_string(cfg.ect.source_size));
    Rng root(cfg.seed);
    Rng init_rng = root.fork(1);
    SslNetwork student = SslNetwork::init(cfg, init_rng);
    SslNetwork teacher = student;
    LoopSpec spec{&cfg, &data, &student, &teacher, nullptr, true, "pretrain"};
    return run_loop(spec, hooks);
}

TrainResult distill(const Checkpoint& teacher_ckpt, const TrainConfig& cfg, const Dataset& data,
                    const TrainHooks& hooks) {
    cfg.validate();
    const TrainConfig tcfg = checkpoint_config(teacher_ckpt);
    if (tcfg.model.patch_size != cfg.model.patch_size)
        throw ConfigError("teacher patch size " + std::to_string(tcfg.model.patch_size) +
                          " does not match student patch size " + std::to_string(cfg.model.patch_size));
    if (tcfg.head.prototypes != cfg.head.prototypes)
        throw ConfigError("teacher and student must share the prototype count");
    if (data.tiles.empty()) throw DataError("training dataset is empty");
    if (data.tiles[0].height != cfg.ect.source_size) throw DataError("dataset tile size does not match config");
    auto it = teacher_ckpt.meta.find("eval_prefix");
    const std::string prefix = it == teacher_ckpt.meta.end() ? "teacher." : it->second;
    SslNetwork teacher = SslNetwork::from_checkpoint(teacher_ckpt, prefix, tcfg);
    Rng root(cfg.seed);
    Rng init_rng = root.fork(1);
    SslNetwork student = SslNetwork::init(cfg, init_rng);
    SslNetwork ema = student;
    LoopSpec spec{&cfg, &data, &student, &teacher, &ema, false, "distill"};
    return run_loop(spec, hooks);
}

TrainConfig checkpoint_config(const Checkpoint& ckpt) {
    ConfigEntries entries;
    std::string preset = "toy";
    for (const auto& [k, v] : ckpt.meta) {
        if (k.rfind("cfg.", 0) != 0) continue;
        if (k == "cfg.preset") preset = v;
        else entries.emplace_back(k.substr(4), v);
    }
    if (entries.empty()) throw DataError("checkpoint carries no configuration");
    TrainConfig cfg = preset_config(preset);
    apply_config(cfg, entries);
    cfg.validate();
    return cfg;
}

VitModel<float> evaluation_backbone(const Checkpoint& ckpt) {
    const TrainConfig cfg = checkpoint_config(ckpt);
    auto it = ckpt.meta.find("eval_prefix");
    const std::string prefix = it == ckpt.meta.end() ? "teacher." : it->second;
    ParamSet<float> p = extract_params(ckpt, prefix + "backbone.");
    if (p.size() == 0) throw DataError("checkpoint has no " + prefix + "backbone tensors");
    return VitModel<float>(cfg.model, std::move(p));
}

Image eval_view(const Image& tile, int size) {
    if (tile.height < size || tile.width < size) return bilinear_resize(tile, size, size);
    return crop(tile, {(tile.width - size) / 2, (tile.height - size) / 2, size, size});
}

std::vector<TokenOutput<float>> embed_images(const VitModel<float>& model, std::span<const Image> images, int batch) {
    std::vector<TokenOutput<float>> out;
    out.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); i += batch) {
        const std::size_t n = std::min<std::size_t>(batch, images.size() - i);
        const TokenBatch<float> tb = model.forward(images.subspan(i, n));
        for (std::size_t b = 0; b < n; ++b) out.push_back(token_output(tb, static_cast<int>(b)));
    }
    return out;
}

}  // namespace pssl
