#include <doctest.h>

#include <cmath>

#include "pssl/checkpoint.hpp"
#include "pssl/config.hpp"
#include "pssl/datagen.hpp"
#include "pssl/errors.hpp"
#include "pssl/train.hpp"
#include "support.hpp"

using namespace pssl;

namespace {

const std::vector<std::string> kTiny = {
    "embedding_dim=32",      "layers=2",          "heads=2",          "registers=2",
    "prototypes=64",         "bottleneck_dimension=16", "hidden_dimension=32", "batch_size=4",
    "total_tiles=24",        "local_crops=2",     "effective_rank_every=2", "checkpoint_every=0",
    "teacher_temperature_warmup_steps=2",
};

TrainConfig tiny_config(std::vector<std::string> extra = {}) {
    std::vector<std::string> o = kTiny;
    o.insert(o.end(), extra.begin(), extra.end());
    return config_from_text("preset = toy\n", o);
}

const Dataset& tiny_data() {
    static const Dataset d = [] {
        const auto dir = testing::scratch_dir("train_data");
        DataGenSpec spec;
        spec.slides = 10;
        spec.slide_size = 784;
        spec.background_fraction = 0.0;
        generate_dataset(dir, spec, 3);
        return load_dataset(dir / "manifest.tsv", 56);
    }();
    return d;
}

bool same_tensors(const ParamSet<float>& a, const ParamSet<float>& b) {
    if (!a.same_layout(b)) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].values() != b[i].values()) return false;
    return true;
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("config text parsing") {
    const auto e = parse_config_text("# comment\nlayers = 3  # trailing\n\nheads=2\nlayers = 5\n");
    REQUIRE(e.size() == 3);
    const TrainConfig c = config_from_text("layers = 3\nlayers = 2\nheads = 2\nembedding_dim = 32\n");
    CHECK(c.model.depth == 2);
    CHECK_THROWS_AS(config_from_text("no_such_key = 1\n"), ConfigError);
    CHECK_THROWS_AS(config_from_text("layers = three\n"), ConfigError);
    CHECK_THROWS_AS(config_from_text("", {"layers"}), ConfigError);
    try {
        config_from_text("", {"regularizer=vicreg"});
        FAIL("expected ConfigError");
    } catch (const ConfigError& err) {
        CHECK(std::string(err.what()).find("vicreg") != std::string::npos);
    }
}

TEST_CASE("config round trip for every preset") {
    for (const std::string& name : preset_names()) {
        const TrainConfig c = preset_config(name);
        const std::string text = config_to_text(c);
        const TrainConfig back = config_from_text(text);
        CHECK(config_to_text(back) == text);
        CHECK(config_entries(back) == config_entries(c));
    }
    CHECK(preset_names().size() == 5);
    CHECK_THROWS_AS(preset_config("vit-tiny"), ConfigError);
}

TEST_CASE("preset contents") {
    const TrainConfig v2 = preset_config("virchow2");
    CHECK(v2.model.embed_dim == 1280);
    CHECK(v2.model.patch_size == 14);
    CHECK(v2.model.registers == 4);
    const TrainConfig g = preset_config("virchow2g");
    CHECK(g.model.embed_dim == 1792);
    CHECK(teacher_temp(0, g) == 0.04);
    CHECK(teacher_temp(g.steps() - 1, g) == 0.04);
    const TrainConfig toy = preset_config("toy");
    CHECK(toy.steps() == 2000);
    CHECK(toy.model.dual_patchnorm);
    CHECK(toy.model.qk_norm);
    CHECK(toy.reg.kind == RegularizerKind::kde);
    CHECK(toy.reg.kappa == 5.0);
    const TrainConfig ab = preset_config("ablation");
    CHECK(teacher_temp(0, ab) == doctest::Approx(0.04));
    CHECK(teacher_temp(ab.teacher_warmup_steps(), ab) == doctest::Approx(0.07));
    CHECK(teacher_temp(ab.teacher_warmup_steps() / 2, ab) == doctest::Approx(0.055));
}

TEST_CASE("schedules") {
    const TrainConfig c = preset_config("toy");
    CHECK(lr_at(0, c) == 0.0);
    CHECK(lr_at(200, c) == doctest::Approx(c.peak_lr()));
    CHECK(c.peak_lr() == doctest::Approx(2e-3 * std::sqrt(64.0 / 1024.0)));
    CHECK(lr_at(c.steps(), c) == doctest::Approx(c.min_lr));
    CHECK(wd_at(0, c) == doctest::Approx(0.04));
    CHECK(wd_at(c.steps(), c) == doctest::Approx(0.2));
    CHECK(ema_momentum_at(0, c) == doctest::Approx(0.994));
    CHECK(ema_momentum_at(c.steps(), c) == doctest::Approx(1.0));
    double prev = 0;
    for (long t = 0; t <= c.steps(); t += 10) {
        const double m = ema_momentum_at(t, c);
        CHECK(m >= prev);
        prev = m;
    }
}

TEST_CASE("checkpoint round trip is byte-identical") {
    Checkpoint ck;
    ck.meta["kind"] = "pretrain";
    ck.meta["note"] = "two words";
    Rng rng(1);
    ck.tensors.add("a.weight", {3, 4});
    ck.tensors.add("a.bias", {4});
    ck.tensors.add("scalar", {1});
    for (std::size_t i = 0; i < ck.tensors.size(); ++i)
        for (auto& v : ck.tensors[i].values()) v = static_cast<float>(rng.normal());
    ck.tensors.at("a.bias")[1] = -0.0f;
    const auto dir = testing::scratch_dir("ckpt");
    save_checkpoint(dir / "a.pssl", ck);
    const Checkpoint back = load_checkpoint(dir / "a.pssl");
    save_checkpoint(dir / "b.pssl", back);
    CHECK(read_file(dir / "a.pssl") == read_file(dir / "b.pssl"));
    CHECK(back.meta == ck.meta);
    CHECK(same_tensors(back.tensors, ck.tensors));
    CHECK(extract_params(back, "a.").size() == 2);

    std::string bytes = read_file(dir / "a.pssl");
    // Corrupt files are io errors; a missing checkpoint is a missing input.
    CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), IoError);
    CHECK_THROWS_AS(parse_checkpoint("PSSL9\n"), IoError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.pssl"), DataError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("effective rank") {
    MatD r1(50, 8);
    for (int i = 0; i < 50; ++i)
        for (int j = 0; j < 8; ++j) r1(i, j) = (i + 1.0) * (j - 3.5);
    CHECK(std::abs(effective_rank(r1) - 1.0) <= 1e-6);
    CHECK(effective_rank(MatD::Zero(10, 4)) == 1.0);
    Rng rng(2);
    CHECK(std::abs(effective_rank(testing::random_mat(20000, 16, rng)) - 16.0) <= 0.5);
    CHECK_THROWS_AS(effective_rank(MatD::Zero(1, 4)), ParameterError);
}

TEST_CASE("spike detector") {
    RunMetrics m;
    Rng rng(3);
    for (long t = 0; t < 300; ++t) {
        MetricsRow r;
        r.step = t;
        r.total = 10.0 + 0.01 * rng.normal();
        if (t == 200) r.total = 12.0;
        m.append(r);
    }
    const auto spikes = detect_spikes(m);
    REQUIRE(spikes.size() == 1);
    CHECK(spikes[0] == 200);
    CHECK(detect_spikes(m, 50, 5.0, 250).empty());
}

TEST_CASE("metrics tsv round trip") {
    RunMetrics m;
    for (long t = 0; t < 5; ++t) {
        MetricsRow r;
        r.step = t;
        r.l_dino = 1.0 / 3 + t;
        r.l_ibot = std::exp(-double(t));
        r.l_reg = -5.25;
        r.total = r.l_dino + r.l_ibot;
        r.grad_norm = 0.1;
        r.eff_rank = t % 2 ? 7.5 : 0.0;
        r.tau_t = 0.04;
        r.lr = 1e-4;
        r.ema_m = 0.994;
        m.append(r);
    }
    CHECK(RunMetrics::parse_tsv(m.to_tsv()) == m);
    CHECK(m.to_tsv().rfind(RunMetrics::header(), 0) == 0);
}

TEST_CASE("decay mask covers 2-D weights only") {
    Rng rng(1);
    const VitModel<float> m(ModelConfig::toy(), rng);
    const auto mask = decay_mask(m.params());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const std::string& n = m.params().name(i);
        INFO(n);
        const bool is_matrix = n.find("qkv.weight") != std::string::npos || n.find("proj.weight") != std::string::npos ||
                               n.find("fc1.weight") != std::string::npos || n.find("fc2.weight") != std::string::npos;
        CHECK(mask[i] == is_matrix);
    }
}

TEST_CASE("eval view is a center crop") {
    Image t(56, 56);
    for (int y = 0; y < 56; ++y)
        for (int x = 0; x < 56; ++x)
            for (int c = 0; c < 3; ++c) t.at(y, x, c) = static_cast<float>(y * 56 + x);
    const Image v = eval_view(t, 32);
    CHECK(v.height == 32);
    CHECK(v == crop(t, CropRect{12, 12, 32, 32}));
}

TEST_CASE("tiny pretraining run") {
    const Dataset& data = tiny_data();
    REQUIRE(data.tiles.size() >= 10);
    const TrainConfig cfg = tiny_config();
    long hook_steps = 0;
    TrainHooks hooks;
    hooks.on_step = [&](const MetricsRow&) { ++hook_steps; };
    const TrainResult a = train(cfg, data, hooks);
    const TrainResult b = train(cfg, data);
    REQUIRE(a.metrics.rows.size() == 6);
    CHECK(hook_steps == 6);
    CHECK(a.metrics == b.metrics);
    CHECK(serialize_checkpoint(a.checkpoint) == serialize_checkpoint(b.checkpoint));
    for (const MetricsRow& r : a.metrics.rows) {
        CHECK(std::isfinite(r.total));
        CHECK(std::isfinite(r.grad_norm));
        CHECK(r.total == doctest::Approx(r.l_dino + r.l_ibot + cfg.reg.weight * r.l_reg));
    }
    CHECK(a.metrics.rows[2].eff_rank > 0);
    const TrainResult c = train(tiny_config({"seed=1"}), data);
    CHECK_FALSE(c.metrics == a.metrics);

    // The returned checkpoint carries its config and evaluates the teacher.
    const TrainConfig back = checkpoint_config(a.checkpoint);
    CHECK(config_to_text(back) == config_to_text(cfg));
    const VitModel<float> eval = evaluation_backbone(a.checkpoint);
    CHECK(same_tensors(eval.params(), extract_params(a.checkpoint, "teacher.backbone.")));
}

TEST_CASE("teacher only moves through the EMA") {
    const TrainConfig cfg = tiny_config({"teacher_momentum=(1, 1)", "total_tiles=12"});
    const TrainResult r = train(cfg, tiny_data());
    Rng init = Rng(cfg.seed).fork(1);
    const SslNetwork fresh = SslNetwork::init(cfg, init);
    Checkpoint ref;
    fresh.store(ref, "teacher.");
    CHECK(same_tensors(extract_params(r.checkpoint, "teacher."), extract_params(ref, "teacher.")));
    // The student did train.
    CHECK_FALSE(same_tensors(extract_params(r.checkpoint, "student.backbone."), fresh.backbone.params()));
}

TEST_CASE("max_steps stops early on the full schedule") {
    const TrainConfig cfg = tiny_config({"max_steps=2"});
    const TrainResult r = train(cfg, tiny_data());
    REQUIRE(r.metrics.rows.size() == 2);
    const TrainResult full = train(tiny_config(), tiny_data());
    for (int i = 0; i < 2; ++i) CHECK(RunMetrics::format_row(r.metrics.rows[i]) == RunMetrics::format_row(full.metrics.rows[i]));
}

TEST_CASE("distillation") {
    const TrainResult teacher = train(tiny_config({"total_tiles=8"}), tiny_data());
    const TrainConfig scfg = tiny_config({"layers=1", "max_steps=0"});
    const TrainResult zero = distill(teacher.checkpoint, scfg, tiny_data());
    CHECK(zero.metrics.rows.empty());
    Rng init = Rng(scfg.seed).fork(1);
    const SslNetwork fresh = SslNetwork::init(scfg, init);
    CHECK(same_tensors(evaluation_backbone(zero.checkpoint).params(), fresh.backbone.params()));

    const TrainResult some = distill(teacher.checkpoint, tiny_config({"layers=1", "total_tiles=8"}), tiny_data());
    CHECK(some.metrics.rows.size() == 2);
    CHECK(evaluation_backbone(some.checkpoint).config().depth == 1);

    CHECK_THROWS_AS(distill(teacher.checkpoint, tiny_config({"patch_size=4"}), tiny_data()), ConfigError);
}

TEST_CASE("dataset errors") {
    CHECK_THROWS_AS(train(tiny_config(), Dataset{}), DataError);
    CHECK_THROWS_AS(load_dataset("/nonexistent/manifest.tsv", 56), DataError);
}

}  // TEST_SUITE
