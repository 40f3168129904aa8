#include "pssl/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "pssl/checkpoint.hpp"

namespace pssl {

long TrainConfig::teacher_warmup_steps() const {
    if (teacher_temp_warmup_steps >= 0) return teacher_temp_warmup_steps;
    return static_cast<long>(std::lround(optim.warmup_frac * static_cast<double>(steps())));
}

double TrainConfig::peak_lr() const {
    return lr_sqrt_scaling ? lr_scale(optim.base_lr, optim.batch_size) : optim.base_lr;
}

void TrainConfig::validate() const {
    model.validate();
    head.validate();
    reg.validate();
    optim.validate();
    ect.validate();
    photo.validate();
    if (model.image_size != ect.global_size)
        throw ConfigError("global_view_size must equal the model image size");
    if (ect.global_size % model.patch_size != 0 || ect.local_size % model.patch_size != 0)
        throw ConfigError("view sizes must be multiples of patch_size");
    if (ect.n_global < 1) throw ConfigError("global_crops must be >= 1");
    if (ect.n_local < 0) throw ConfigError("local_crops must be >= 0");
    if (sinkhorn_iters < 0) throw ConfigError("sinkhorn_iterations must be >= 0");
    for (double t : {student_temp, teacher_temp, teacher_temp_warmup})
        if (!(t > 0 && t <= 1)) throw ConfigError("temperatures must lie in (0, 1]");
    for (double m : {teacher_momentum_start, teacher_momentum_end, student_ema_momentum})
        if (!(m >= 0 && m <= 1)) throw ConfigError("momentum values must lie in [0, 1]");
    if (!(drop_path >= 0 && drop_path < 1)) throw ConfigError("drop_rate must lie in [0, 1)");
    if (!(mask_ratio >= 0 && mask_ratio <= 1)) throw ConfigError("mask_ratio must lie in [0, 1]");
    if (!(min_lr >= 0)) throw ConfigError("min_learning_rate must be >= 0");
    if (total_tiles < optim.batch_size) throw ConfigError("total_tiles must cover at least one batch");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
    if (eff_rank_every < 1) throw ConfigError("effective_rank_every must be >= 1");
    if (precision != "FP32" && precision != "FP16") throw ConfigError("precision must be FP32 or FP16");
}

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const std::string& why) {
    throw ConfigError("invalid value '" + value + "' for " + key + ": " + why);
}

double to_double(const std::string& key, const std::string& v) {
    const std::string s = trim(v);
    double out = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty()) bad(key, v, "expected a number");
    if (!std::isfinite(out)) bad(key, v, "expected a finite number");
    return out;
}

long to_long(const std::string& key, const std::string& v) {
    const std::string s = trim(v);
    long out = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty()) bad(key, v, "expected an integer");
    return out;
}

int to_int(const std::string& key, const std::string& v) {
    const long x = to_long(key, v);
    if (x < -(1L << 30) || x > (1L << 30)) bad(key, v, "integer out of range");
    return static_cast<int>(x);
}

bool to_bool(const std::string& key, const std::string& v) {
    const std::string s = lower(trim(v));
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    bad(key, v, "expected True or False");
}

/// "x" -> (x, x); "(a, b)" -> (a, b).
std::pair<double, double> to_pair(const std::string& key, const std::string& v, bool allow_single) {
    const std::string s = trim(v);
    if (!s.empty() && s.front() == '(') {
        if (s.back() != ')') bad(key, v, "unbalanced parenthesis");
        const std::string inner = s.substr(1, s.size() - 2);
        const std::size_t comma = inner.find(',');
        if (comma == std::string::npos || inner.find(',', comma + 1) != std::string::npos)
            bad(key, v, "expected a pair (a, b)");
        return {to_double(key, inner.substr(0, comma)), to_double(key, inner.substr(comma + 1))};
    }
    if (!allow_single) bad(key, v, "expected a pair (a, b)");
    const double x = to_double(key, s);
    return {x, x};
}

std::string fmt(double x) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), x);
    (void)ec;
    return std::string(buf, p);
}

std::string fmt_pair(double a, double b) { return "(" + fmt(a) + ", " + fmt(b) + ")"; }
std::string fmt_bool(bool b) { return b ? "True" : "False"; }

struct KeyDef {
    std::string name;
    std::function<void(TrainConfig&, const std::string&)> set;
    std::function<std::string(const TrainConfig&)> get;
};

const std::vector<KeyDef>& key_table() {
    static const std::vector<KeyDef> table = [] {
        std::vector<KeyDef> t;
        auto add = [&](std::string n, std::function<void(TrainConfig&, const std::string&)> s,
                       std::function<std::string(const TrainConfig&)> g) { t.push_back({std::move(n), s, g}); };
        // Vision transformer.
        add("patch_size", [](TrainConfig& c, const std::string& v) { c.model.patch_size = to_int("patch_size", v); },
            [](const TrainConfig& c) { return std::to_string(c.model.patch_size); });
        add("embedding_dim", [](TrainConfig& c, const std::string& v) { c.model.embed_dim = to_int("embedding_dim", v); },
            [](const TrainConfig& c) { return std::to_string(c.model.embed_dim); });
        add("layers", [](TrainConfig& c, const std::string& v) { c.model.depth = to_int("layers", v); },
            [](const TrainConfig& c) { return std::to_string(c.model.depth); });
        add("heads", [](TrainConfig& c, const std::string& v) { c.model.heads = to_int("heads", v); },
            [](const TrainConfig& c) { return std::to_string(c.model.heads); });
        add("mlp_ratio", [](TrainConfig& c, const std::string& v) { c.model.mlp_ratio = to_double("mlp_ratio", v); },
            [](const TrainConfig& c) { return fmt(c.model.mlp_ratio); });
        add("mlp_activation",
            [](TrainConfig& c, const std::string& v) {
                const std::string s = lower(trim(v));
                if (s == "gelu") c.model.mlp_activation = MlpActivation::gelu;
                else if (s == "swiglu") c.model.mlp_activation = MlpActivation::swiglu;
                else bad("mlp_activation", v, "expected GELU or SwiGLU");
            },
            [](const TrainConfig& c) { return c.model.mlp_activation == MlpActivation::gelu ? "GELU" : "SwiGLU"; });
        add("mlp_bias", [](TrainConfig& c, const std::string& v) { c.model.mlp_bias = to_bool("mlp_bias", v); },
            [](const TrainConfig& c) { return fmt_bool(c.model.mlp_bias); });
        add("qkv_bias", [](TrainConfig& c, const std::string& v) { c.model.qkv_bias = to_bool("qkv_bias", v); },
            [](const TrainConfig& c) { return fmt_bool(c.model.qkv_bias); });
        add("registers", [](TrainConfig& c, const std::string& v) { c.model.registers = to_int("registers", v); },
            [](const TrainConfig& c) { return std::to_string(c.model.registers); });
        add("qk_normalization", [](TrainConfig& c, const std::string& v) { c.model.qk_norm = to_bool("qk_normalization", v); },
            [](const TrainConfig& c) { return fmt_bool(c.model.qk_norm); });
        add("dual_patchnorm",
            [](TrainConfig& c, const std::string& v) { c.model.dual_patchnorm = to_bool("dual_patchnorm", v); },
            [](const TrainConfig& c) { return fmt_bool(c.model.dual_patchnorm); });
        // Projection heads.
        add("shared_heads", [](TrainConfig& c, const std::string& v) { c.head.shared_heads = to_bool("shared_heads", v); },
            [](const TrainConfig& c) { return fmt_bool(c.head.shared_heads); });
        add("head_layers", [](TrainConfig& c, const std::string& v) { c.head.layers = to_int("head_layers", v); },
            [](const TrainConfig& c) { return std::to_string(c.head.layers); });
        add("bottleneck_dimension",
            [](TrainConfig& c, const std::string& v) { c.head.bottleneck_dim = to_int("bottleneck_dimension", v); },
            [](const TrainConfig& c) { return std::to_string(c.head.bottleneck_dim); });
        add("hidden_dimension",
            [](TrainConfig& c, const std::string& v) { c.head.hidden_dim = to_int("hidden_dimension", v); },
            [](const TrainConfig& c) { return std::to_string(c.head.hidden_dim); });
        // Losses.
        add("sinkhorn_centering",
            [](TrainConfig& c, const std::string& v) { c.sinkhorn = to_bool("sinkhorn_centering", v); },
            [](const TrainConfig& c) { return fmt_bool(c.sinkhorn); });
        add("sinkhorn_iterations",
            [](TrainConfig& c, const std::string& v) { c.sinkhorn_iters = to_int("sinkhorn_iterations", v); },
            [](const TrainConfig& c) { return std::to_string(c.sinkhorn_iters); });
        add("student_temperature",
            [](TrainConfig& c, const std::string& v) { c.student_temp = to_double("student_temperature", v); },
            [](const TrainConfig& c) { return fmt(c.student_temp); });
        add("teacher_temperature",
            [](TrainConfig& c, const std::string& v) {
                // (final, warmup start), as in the hyperparameter tables; a single value is constant.
                auto [fin, start] = to_pair("teacher_temperature", v, true);
                c.teacher_temp = fin;
                c.teacher_temp_warmup = start;
            },
            [](const TrainConfig& c) {
                return c.teacher_temp == c.teacher_temp_warmup ? fmt(c.teacher_temp)
                                                               : fmt_pair(c.teacher_temp, c.teacher_temp_warmup);
            });
        add("teacher_temperature_warmup_steps",
            [](TrainConfig& c, const std::string& v) {
                c.teacher_temp_warmup_steps = to_long("teacher_temperature_warmup_steps", v);
            },
            [](const TrainConfig& c) { return std::to_string(c.teacher_temp_warmup_steps); });
        add("prototypes", [](TrainConfig& c, const std::string& v) { c.head.prototypes = to_int("prototypes", v); },
            [](const TrainConfig& c) { return std::to_string(c.head.prototypes); });
        add("regularizer",
            [](TrainConfig& c, const std::string& v) {
                try {
                    c.reg.kind = parse_regularizer(trim(v));
                } catch (const ConfigError&) {
                    bad("regularizer", v, "expected KDE, KoLeo or none");
                }
            },
            [](const TrainConfig& c) {
                switch (c.reg.kind) {
                    case RegularizerKind::kde: return std::string("KDE");
                    case RegularizerKind::koleo: return std::string("KoLeo");
                    default: return std::string("none");
                }
            });
        add("regularizer_parameter",
            [](TrainConfig& c, const std::string& v) { c.reg.kappa = to_double("regularizer_parameter", v); },
            [](const TrainConfig& c) { return fmt(c.reg.kappa); });
        add("regularizer_weight",
            [](TrainConfig& c, const std::string& v) { c.reg.weight = to_double("regularizer_weight", v); },
            [](const TrainConfig& c) { return fmt(c.reg.weight); });
        add("koleo_epsilon", [](TrainConfig& c, const std::string& v) { c.reg.eps = to_double("koleo_epsilon", v); },
            [](const TrainConfig& c) { return fmt(c.reg.eps); });
        add("mask_ratio", [](TrainConfig& c, const std::string& v) { c.mask_ratio = to_double("mask_ratio", v); },
            [](const TrainConfig& c) { return fmt(c.mask_ratio); });
        // Augmentations.
        add("tile_context_size",
            [](TrainConfig& c, const std::string& v) { c.ect.source_size = to_int("tile_context_size", v); },
            [](const TrainConfig& c) { return std::to_string(c.ect.source_size); });
        add("global_view_size",
            [](TrainConfig& c, const std::string& v) {
                c.ect.global_size = to_int("global_view_size", v);
                c.model.image_size = c.ect.global_size;
            },
            [](const TrainConfig& c) { return std::to_string(c.ect.global_size); });
        add("local_view_size",
            [](TrainConfig& c, const std::string& v) { c.ect.local_size = to_int("local_view_size", v); },
            [](const TrainConfig& c) { return std::to_string(c.ect.local_size); });
        add("global_crops", [](TrainConfig& c, const std::string& v) { c.ect.n_global = to_int("global_crops", v); },
            [](const TrainConfig& c) { return std::to_string(c.ect.n_global); });
        add("local_crops", [](TrainConfig& c, const std::string& v) { c.ect.n_local = to_int("local_crops", v); },
            [](const TrainConfig& c) { return std::to_string(c.ect.n_local); });
        add("method",
            [](TrainConfig& c, const std::string& v) {
                const std::string s = lower(trim(v));
                if (s == "ect") c.ect.method = CropMethod::ect;
                else if (s == "crop_resize" || s == "crop-and-resize") c.ect.method = CropMethod::crop_resize;
                else bad("method", v, "expected ECT or crop_resize");
            },
            [](const TrainConfig& c) { return c.ect.method == CropMethod::ect ? "ECT" : "crop_resize"; });
        add("aspect_ratio_range",
            [](TrainConfig& c, const std::string& v) {
                auto [a, b] = to_pair("aspect_ratio_range", v, false);
                c.ect.aspect = {a, b};
            },
            [](const TrainConfig& c) { return fmt_pair(c.ect.aspect.lo, c.ect.aspect.hi); });
        add("scale_range",
            [](TrainConfig& c, const std::string& v) {
                auto [a, b] = to_pair("scale_range", v, false);
                c.ect.scale = {a, b};
            },
            [](const TrainConfig& c) { return fmt_pair(c.ect.scale.lo, c.ect.scale.hi); });
        add("solarization",
            [](TrainConfig& c, const std::string& v) { c.photo.solarize_enabled = to_bool("solarization", v); },
            [](const TrainConfig& c) { return fmt_bool(c.photo.solarize_enabled); });
        add("vertical_flips",
            [](TrainConfig& c, const std::string& v) { c.photo.vflip_p = to_bool("vertical_flips", v) ? 0.5 : 0.0; },
            [](const TrainConfig& c) { return fmt_bool(c.photo.vflip_p > 0); });
        // Optimization.
        add("optimizer",
            [](TrainConfig& c, const std::string& v) {
                try {
                    c.optim.rule = parse_optim_rule(trim(v));
                } catch (const ConfigError&) {
                    bad("optimizer", v, "expected AdamW or StableAdamW");
                }
            },
            [](const TrainConfig& c) { return c.optim.rule == OptimRule::adamw ? "AdamW" : "StableAdamW"; });
        add("optimizer_momentum",
            [](TrainConfig& c, const std::string& v) {
                auto [a, b] = to_pair("optimizer_momentum", v, false);
                c.optim.beta1 = a;
                c.optim.beta2 = b;
            },
            [](const TrainConfig& c) { return fmt_pair(c.optim.beta1, c.optim.beta2); });
        add("optimizer_epsilon",
            [](TrainConfig& c, const std::string& v) { c.optim.eps = to_double("optimizer_epsilon", v); },
            [](const TrainConfig& c) { return fmt(c.optim.eps); });
        add("optimizer_weight_decay",
            [](TrainConfig& c, const std::string& v) {
                auto [a, b] = to_pair("optimizer_weight_decay", v, true);
                c.optim.wd_start = a;
                c.optim.wd_end = b;
            },
            [](const TrainConfig& c) { return fmt_pair(c.optim.wd_start, c.optim.wd_end); });
        add("learning_rate",
            [](TrainConfig& c, const std::string& v) { c.optim.base_lr = to_double("learning_rate", v); },
            [](const TrainConfig& c) { return fmt(c.optim.base_lr); });
        add("min_learning_rate",
            [](TrainConfig& c, const std::string& v) { c.min_lr = to_double("min_learning_rate", v); },
            [](const TrainConfig& c) { return fmt(c.min_lr); });
        add("learning_rate_schedule",
            [](TrainConfig&, const std::string& v) {
                if (lower(trim(v)) != "cosine") bad("learning_rate_schedule", v, "only Cosine is supported");
            },
            [](const TrainConfig&) { return std::string("Cosine"); });
        add("learning_rate_scaling",
            [](TrainConfig& c, const std::string& v) {
                std::string s = lower(trim(v));
                s.erase(std::remove_if(s.begin(), s.end(), [](char ch) { return ch == ' ' || ch == '_' || ch == '-'; }),
                        s.end());
                if (s == "squareroot1024" || s == "sqrt") c.lr_sqrt_scaling = true;
                else if (s == "none") c.lr_sqrt_scaling = false;
                else bad("learning_rate_scaling", v, "expected 'Square root-1024' or none");
            },
            [](const TrainConfig& c) { return c.lr_sqrt_scaling ? "Square root-1024" : "none"; });
        add("warmup_frac", [](TrainConfig& c, const std::string& v) { c.optim.warmup_frac = to_double("warmup_frac", v); },
            [](const TrainConfig& c) { return fmt(c.optim.warmup_frac); });
        add("teacher_momentum",
            [](TrainConfig& c, const std::string& v) {
                auto [a, b] = to_pair("teacher_momentum", v, true);
                c.teacher_momentum_start = a;
                c.teacher_momentum_end = b;
            },
            [](const TrainConfig& c) { return fmt_pair(c.teacher_momentum_start, c.teacher_momentum_end); });
        add("student_ema_copy_momentum",
            [](TrainConfig& c, const std::string& v) {
                c.student_ema_momentum = to_double("student_ema_copy_momentum", v);
            },
            [](const TrainConfig& c) { return fmt(c.student_ema_momentum); });
        add("batch_size", [](TrainConfig& c, const std::string& v) { c.optim.batch_size = to_int("batch_size", v); },
            [](const TrainConfig& c) { return std::to_string(c.optim.batch_size); });
        add("gradient_clipping_norm",
            [](TrainConfig& c, const std::string& v) { c.optim.grad_clip = to_double("gradient_clipping_norm", v); },
            [](const TrainConfig& c) { return fmt(c.optim.grad_clip); });
        add("drop_rate", [](TrainConfig& c, const std::string& v) { c.drop_path = to_double("drop_rate", v); },
            [](const TrainConfig& c) { return fmt(c.drop_path); });
        add("precision",
            [](TrainConfig& c, const std::string& v) {
                const std::string s = trim(v);
                if (s != "FP32" && s != "FP16") bad("precision", v, "expected FP32 or FP16");
                c.precision = s;
            },
            [](const TrainConfig& c) { return c.precision; });
        // Run.
        add("total_tiles", [](TrainConfig& c, const std::string& v) { c.total_tiles = to_long("total_tiles", v); },
            [](const TrainConfig& c) { return std::to_string(c.total_tiles); });
        add("max_steps", [](TrainConfig& c, const std::string& v) { c.max_steps = to_long("max_steps", v); },
            [](const TrainConfig& c) { return std::to_string(c.max_steps); });
        add("seed",
            [](TrainConfig& c, const std::string& v) {
                const std::string s = trim(v);
                std::uint64_t x = 0;
                auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
                if (ec != std::errc() || p != s.data() + s.size() || s.empty()) bad("seed", v, "expected an unsigned integer");
                c.seed = x;
            },
            [](const TrainConfig& c) { return std::to_string(c.seed); });
        add("checkpoint_every",
            [](TrainConfig& c, const std::string& v) { c.checkpoint_every = to_long("checkpoint_every", v); },
            [](const TrainConfig& c) { return std::to_string(c.checkpoint_every); });
        add("effective_rank_every",
            [](TrainConfig& c, const std::string& v) { c.eff_rank_every = to_long("effective_rank_every", v); },
            [](const TrainConfig& c) { return std::to_string(c.eff_rank_every); });
        return t;
    }();
    return table;
}

const KeyDef* find_key(const std::string& key) {
    for (const KeyDef& k : key_table())
        if (k.name == key) return &k;
    if (key == "embedding_dimension") return find_key("embedding_dim");
    return nullptr;
}

}  // namespace

ConfigEntries parse_config_text(const std::string& text) {
    ConfigEntries out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        out.emplace_back(key, value);
    }
    return out;
}

std::vector<std::string> preset_names() { return {"toy", "ablation", "virchow2", "virchow2g", "virchow2g_mini"}; }

TrainConfig preset_config(const std::string& name) {
    TrainConfig c;
    c.preset = name;
    if (name == "toy") {
        c.model = ModelConfig::toy();
        c.model.qk_norm = true;
        c.model.dual_patchnorm = true;
        c.head = {3, 64, 256, 1024, false};
        c.reg = {RegularizerKind::kde, 5.0, 1e-8, 0.05};
        c.ect.source_size = 56;
        c.ect.global_size = 32;
        c.ect.local_size = 16;
        c.photo.solarize_enabled = false;
        c.optim = {};
        c.optim.base_lr = 2e-3;
        c.optim.batch_size = 64;
        c.teacher_temp = 0.07;
        c.teacher_temp_warmup = 0.04;
        c.teacher_temp_warmup_steps = 200;
        c.drop_path = 0.1;
        c.total_tiles = 128000;
        c.checkpoint_every = 500;
        c.eff_rank_every = 50;
    } else if (name == "ablation") {
        // ViT-B/16 baseline sweep: crop-and-resize, KoLeo, solarization.
        c.model = ModelConfig::ablation();
        c.head = {3, 256, 2048, 65536, false};
        c.reg = {RegularizerKind::koleo, 5.0, 1e-8, 0.1};
        c.ect.method = CropMethod::crop_resize;
        c.ect.source_size = 392;
        c.ect.global_size = 224;
        c.ect.local_size = 96;
        c.photo.solarize_enabled = true;
        c.optim = {};
        c.optim.base_lr = 2e-4;
        c.optim.batch_size = 1024;
        c.teacher_temp = 0.07;
        c.teacher_temp_warmup = 0.04;
        c.teacher_temp_warmup_steps = 12000;
        c.drop_path = 0.4;
        c.total_tiles = 115000000;
        c.precision = "FP16";
    } else if (name == "virchow2") {
        c.model = ModelConfig::virchow2();
        c.head = {3, 384, 2048, 131072, false};
        c.reg = {RegularizerKind::kde, 5.0, 1e-8, 0.05};
        c.photo.solarize_enabled = true;
        c.optim = {};
        c.optim.rule = OptimRule::adamw;
        c.optim.beta2 = 0.999;
        c.optim.eps = 1e-8;
        c.optim.base_lr = 2e-4;
        c.optim.batch_size = 4096;
        c.teacher_temp = 0.07;
        c.teacher_temp_warmup = 0.04;
        c.drop_path = 0.4;
        c.total_tiles = 2000000000L;
        c.precision = "FP16";
    } else if (name == "virchow2g") {
        c.model = ModelConfig::virchow2g();
        c.head = {3, 384, 2048, 131072, false};
        c.reg = {RegularizerKind::kde, 5.0, 1e-8, 0.05};
        c.photo.solarize_enabled = false;
        c.optim = {};
        c.optim.rule = OptimRule::stable_adamw;
        c.optim.beta2 = 0.95;
        c.optim.eps = 1e-6;
        c.optim.base_lr = 1e-4;
        c.optim.batch_size = 3072;
        c.teacher_temp = 0.04;
        c.teacher_temp_warmup = 0.04;
        c.drop_path = 0.4;
        c.total_tiles = 2000000000L;
        c.precision = "FP16";
    } else if (name == "virchow2g_mini") {
        c.model = ModelConfig::virchow2g_mini();
        c.head = {3, 384, 2048, 131072, false};
        c.reg = {RegularizerKind::kde, 5.0, 1e-8, 0.05};
        c.photo.solarize_enabled = false;
        c.optim = {};
        c.optim.rule = OptimRule::stable_adamw;
        c.optim.beta2 = 0.98;
        c.optim.eps = 1e-6;
        c.optim.base_lr = 2e-4;
        c.optim.batch_size = 2048;
        c.teacher_temp = 0.04;
        c.teacher_temp_warmup = 0.04;
        c.student_ema_momentum = 0.994;
        c.drop_path = 0.0;
        c.total_tiles = 1000000000L;
        c.precision = "FP16";
    } else {
        throw ConfigError("unknown preset '" + name + "'");
    }
    c.model.image_size = c.ect.global_size;
    return c;
}

void apply_config(TrainConfig& cfg, const ConfigEntries& entries) {
    for (const auto& [key, value] : entries) {
        if (key == "preset") {
            cfg = preset_config(trim(value));
            continue;
        }
        const KeyDef* def = find_key(key);
        if (!def) throw ConfigError("unknown config key '" + key + "'");
        def->set(cfg, value);
    }
}

namespace {

ConfigEntries parse_overrides(const std::vector<std::string>& overrides) {
    ConfigEntries out;
    for (const std::string& o : overrides) {
        const std::size_t eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
        out.emplace_back(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
    }
    return out;
}

}  // namespace

TrainConfig config_from_text(const std::string& text, const std::vector<std::string>& overrides) {
    ConfigEntries entries = parse_config_text(text);
    // The preset applies first wherever it appears in the file.
    TrainConfig cfg = preset_config("toy");
    for (const auto& [k, v] : entries)
        if (k == "preset") cfg = preset_config(trim(v));
    ConfigEntries rest;
    for (auto& e : entries)
        if (e.first != "preset") rest.push_back(e);
    apply_config(cfg, rest);
    ConfigEntries ov = parse_overrides(overrides);
    for (const auto& [k, v] : ov)
        if (k == "preset") throw ConfigError("preset cannot be overridden; use --config");
    apply_config(cfg, ov);
    cfg.validate();
    return cfg;
}

TrainConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
    return config_from_text(read_file(path), overrides);
}

ConfigEntries config_entries(const TrainConfig& cfg) {
    ConfigEntries out;
    out.emplace_back("preset", cfg.preset);
    for (const KeyDef& k : key_table()) out.emplace_back(k.name, k.get(cfg));
    return out;
}

std::string config_to_text(const TrainConfig& cfg) {
    std::string out;
    for (const auto& [k, v] : config_entries(cfg)) out += k + " = " + v + "\n";
    return out;
}

std::vector<std::string> config_keys() {
    std::vector<std::string> out{"preset"};
    for (const KeyDef& k : key_table()) out.push_back(k.name);
    return out;
}

}  // namespace pssl
