// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>

#include "instag/config.hpp"
#include "instag/errors.hpp"
#include "instag/pipelines.hpp"

using namespace instag;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

motion::FieldConfig small_field() {
    motion::FieldConfig c;
    c.grid.levels = 3;
    c.grid.table_size = 256;
    c.grid.n_min = 4;
    c.grid.n_max = 16;
    c.hidden = {8, 8};
    c.attention_hidden = 6;
    return c;
}

pipe::ModelConfig small_model() {
    pipe::ModelConfig m;
    m.umf = m.personal = m.mouth = small_field();
    m.aligner = small_field().grid;
    m.hook_hidden = 6;
    m.face_points = 120;
    m.mouth_points = 20;
    return m;
}

synth::SceneConfig small_scene() {
    synth::SceneConfig s;
    s.n_points = 300;
    return s;
}

std::vector<synth::Dataset> small_corpus(std::size_t k, std::size_t frames = 6) {
    std::vector<synth::Dataset> out;
    for (const auto& id : synth::make_corpus(k, 40, small_scene())) {
        synth::GenerateOptions o;
        o.seed = id.seed;
        o.width = o.height = 24;
        out.push_back(synth::generate(id, frames, o));
    }
    return out;
}

synth::Dataset small_target(std::uint64_t gen_seed, std::size_t frames) {
    auto id = synth::make_identity(77, small_scene());
    synth::GenerateOptions o;
    o.seed = gen_seed;
    o.width = o.height = 24;
    return synth::generate(id, frames, o);
}

pipe::PretrainConfig small_pretrain(std::size_t iters) {
    pipe::PretrainConfig c;
    c.iterations = iters;
    c.seed = 3;
    c.model = small_model();
    c.densify.start = 2;
    c.densify.interval = 2;
    c.psnr_frames = 2;
    return c;
}

pipe::AdaptConfig small_adapt(std::size_t iters, std::size_t warmup) {
    pipe::AdaptConfig c;
    c.iterations = iters;
    c.warmup = warmup;
    c.seed = 5;
    c.densify.start = 2;
    c.densify.interval = 2;
    return c;
}

std::vector<unsigned char> bytes(const Checkpoint& c) { return encode_checkpoint(c); }

fs::path scratch_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("instag_pipe_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

}  // namespace

TEST_SUITE("pipelines") {

TEST_CASE("pre-training resumed from a snapshot matches the uninterrupted run bit for bit") {
    const auto corpus = small_corpus(2);
    const fs::path dir = scratch_dir("resume");
    auto cfg = small_pretrain(6);
    cfg.state_every = 3;
    cfg.state_path = dir / "state.ckpt";
    const auto full = pipe::pretrain(cfg, corpus);
    // the snapshot was overwritten at iteration 6; rebuild the one from iteration 3
    auto first = cfg;
    first.iterations = 6;
    first.state_every = 3;
    first.state_path = dir / "state3.ckpt";
    pipe::pretrain(first, corpus, nullptr, [](std::size_t it, double) { return it < 3; });
    const Checkpoint snap = read_checkpoint(dir / "state3.ckpt");
    CHECK(snap.get("state/iteration")[0] == 3.0);
    auto second = cfg;
    second.state_every = 0;
    const auto resumed = pipe::pretrain(second, corpus, &snap);
    CHECK(bytes(resumed.checkpoint) == bytes(full.checkpoint));
    CHECK(resumed.metrics.dump() == full.metrics.dump());
}

TEST_CASE("checkpoints survive save-load-save byte for byte") {
    const auto corpus = small_corpus(2);
    const auto pre = pipe::pretrain(small_pretrain(3), corpus);
    const fs::path dir = scratch_dir("roundtrip");
    write_checkpoint(dir / "a.ckpt", pre.checkpoint);
    write_checkpoint(dir / "b.ckpt", read_checkpoint(dir / "a.ckpt"));
    CHECK(bytes(read_checkpoint(dir / "a.ckpt")) == bytes(read_checkpoint(dir / "b.ckpt")));

    const auto target = small_target(9, 4);
    const auto person = pipe::adapt(small_adapt(4, 2), target, &pre.checkpoint, {});
    write_checkpoint(dir / "p.ckpt", person.checkpoint);
    const Checkpoint back = read_checkpoint(dir / "p.ckpt");
    CHECK(bytes(back) == bytes(person.checkpoint));
    // a loaded person model re-exports the same universal weights
    const auto pm = pipe::load_person(back);
    Checkpoint again;
    again.put_store(pm.store, "umf/");
    for (const NamedArray* e : again.with_prefix("umf/")) CHECK(e->value.data == back.get(e->name).data);
}

TEST_CASE("pre-training discards personalized fields unless asked") {
    const auto corpus = small_corpus(2);
    auto cfg = small_pretrain(2);
    const auto plain = pipe::pretrain(cfg, corpus);
    CHECK(plain.checkpoint.with_prefix("pfield/").empty());
    CHECK(!plain.checkpoint.with_prefix("umf/").empty());
    CHECK(!plain.checkpoint.with_prefix("mouth_field/").empty());
    CHECK(plain.checkpoint.with_prefix("id/").empty());
    cfg.retain_personal = true;
    CHECK(!pipe::pretrain(cfg, corpus).checkpoint.with_prefix("pfield/").empty());
}

TEST_CASE("a single-identity corpus trains with no contrast pairs") {
    const auto corpus = small_corpus(1);
    const auto res = pipe::pretrain(small_pretrain(3), corpus);
    CHECK(res.metrics.at("personal_pairs").get<std::size_t>() == 0);
    CHECK(res.metrics.at("personal_pair_dot").get<double>() == 0.0);
    CHECK(std::isfinite(res.metrics.at("per_identity")[0].at("train_psnr").get<double>()));
}

TEST_CASE("geometry loss has no effect before the warm-up ends") {
    const auto corpus = small_corpus(2);
    const auto pre = pipe::pretrain(small_pretrain(2), corpus);
    const auto train = small_target(9, 4);
    const auto test = small_target(10, 2);
    auto a = small_adapt(5, 3);
    a.eval_every = 1;
    a.densify.enabled = false;
    auto b = a;
    a.weights.lambda_d = 0.0;
    a.weights.lambda_n = 0.0;
    b.weights.lambda_d = 5.0;
    b.weights.lambda_n = 5.0;
    const auto ra = pipe::adapt(a, train, &pre.checkpoint, {}, &test);
    const auto rb = pipe::adapt(b, train, &pre.checkpoint, {}, &test);
    REQUIRE(ra.curve.size() == 6);
    REQUIRE(rb.curve.size() == 6);
    for (std::size_t i = 0; i <= 3; ++i) CHECK(ra.curve[i].second == rb.curve[i].second);
    CHECK(ra.curve[5].second != rb.curve[5].second);
}

TEST_CASE("adaptation rejects a checkpoint with other hyperparameters before training") {
    const auto corpus = small_corpus(1);
    auto pre = pipe::pretrain(small_pretrain(1), corpus).checkpoint;
    Tensor g = pre.get("meta/grid/umf");
    g[0] += 1.0;  // one more level than the stored tables
    pre.put("meta/grid/umf", g);
    const auto train = small_target(9, 2);
    CHECK_THROWS_AS(pipe::adapt(small_adapt(3, 1), train, &pre, {}), ConfigError);
    // a tensor of the wrong shape is refused as well
    auto pre2 = pipe::pretrain(small_pretrain(1), corpus).checkpoint;
    const std::string name = pre2.with_prefix("umf/")[0]->name;
    pre2.put(name, Tensor(1, 1));
    CHECK_THROWS_AS(pipe::adapt(small_adapt(3, 1), train, &pre2, {}), ConfigError);
}

TEST_CASE("configuration errors") {
    CHECK_THROWS_AS(small_adapt(3, 3).validate(), ConfigError);
    auto p = small_pretrain(0);
    CHECK_THROWS_AS(p.validate(), ConfigError);
    const json base = {{"corpus", {"a.json"}}, {"output", "o.ckpt"}, {"metrics", "m.json"}};
    CHECK_NOTHROW(cfg::parse_pretrain(base));
    json bad = base;
    bad["iteratons"] = 10;
    CHECK_THROWS_AS(cfg::parse_pretrain(bad), ConfigError);
    bad = base;
    bad["iterations"] = -1;
    CHECK_THROWS_AS(cfg::parse_pretrain(bad), ConfigError);
    bad = base;
    bad["weights"] = {{"lambda_ssim", 2.0}};
    CHECK_THROWS_AS(cfg::parse_pretrain(bad), ConfigError);
    bad = base;
    bad["model"] = {{"umf", {{"levels", 2}, {"n_min", 16.0}, {"n_max", 16.0}}}};
    CHECK_THROWS_AS(cfg::parse_pretrain(bad), ConfigError);
    bad = base;
    bad.erase("output");
    CHECK_THROWS_AS(cfg::parse_pretrain(bad), ConfigError);
    const json adapt = {{"train", "t.json"}, {"output", "p.ckpt"}, {"metrics", "m.json"}, {"iterations", 10}, {"warmup", 3}};
    CHECK(cfg::parse_adapt(adapt).config.warmup == 3);
    json adapt_bad = adapt;
    adapt_bad["warmup"] = 10;
    CHECK_THROWS_AS(cfg::parse_adapt(adapt_bad), ConfigError);
    CHECK_THROWS_AS(cfg::parse_gen_data(json{{"out", "d"}, {"targets", {{{"name", "corpus"}}}}}), ConfigError);
    CHECK_THROWS_AS(cfg::load_json("/nonexistent/config.json"), IoError);
    // relative paths resolve against the config directory
    CHECK(cfg::parse_pretrain(base, "/x/y").output == fs::path("/x/y/o.ckpt"));
}

TEST_CASE("a diverging run stops with the iteration number") {
    const auto corpus = small_corpus(1);
    auto cfg = small_pretrain(4);
    cfg.lr.gaussian = 1e300;
    cfg.lr.network = 1e300;
    try {
        pipe::pretrain(cfg, corpus);
        FAIL("expected a numeric error");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("iteration") != std::string::npos);
    }
}

TEST_CASE("universal-motion cosine ignores a condition-independent offset") {
    const pipe::Model model(small_model(), 0);
    ParameterStore store;
    model.register_umf(store, 1);
    const std::string w = std::string(pipe::kUmfPrefix) + "/decoder/w2", b = std::string(pipe::kUmfPrefix) + "/decoder/b2";
    std::mt19937_64 rng(6);
    std::normal_distribution<double> g(0.0, 0.3);
    for (double& v : store.at(w).value.data) v = g(rng);
    const auto probes = synth::make_corpus(2, 40, small_scene());
    const double before = pipe::decomposition_scores(model, store, probes, false).umf_cosine;
    CHECK(before != 0.0);
    CHECK(std::abs(before) <= 1.0);
    Tensor& bias = store.at(b).value;
    bias[0] += 0.3;
    bias[1] -= 0.2;
    bias[2] += 0.1;
    CHECK(pipe::decomposition_scores(model, store, probes, false).umf_cosine == doctest::Approx(before).epsilon(1e-12));
}

TEST_CASE("ground truth scored against itself hits the sentinel") {
    const auto ds = small_target(9, 3);
    for (const auto& fr : ds.frames) {
        const auto s = pipe::score_frame(fr.image, fr.depth, fr);
        CHECK(s.psnr == 99.0);
        CHECK(s.mouth_psnr == 99.0);
        CHECK(s.depth_mae == 0.0);
    }
    Tensor off = ds.frames[0].image;
    for (double& v : off.data) v = std::min(1.0, v + 0.1);
    CHECK(pipe::score_frame(off, ds.frames[0].depth, ds.frames[0]).psnr < 99.0);
}

TEST_CASE("report aggregates are the means of the per-frame entries") {
    const auto corpus = small_corpus(1);
    const auto pre = pipe::pretrain(small_pretrain(2), corpus);
    const auto person = pipe::adapt(small_adapt(3, 1), small_target(9, 3), &pre.checkpoint, {});
    const auto pm = pipe::load_person(person.checkpoint);
    const json rep = pipe::evaluate(pm, small_target(10, 4));
    for (const char* key : {"psnr", "mouth_psnr", "depth_mae"}) {
        double s = 0.0;
        for (const auto& f : rep.at("frames")) s += f.at(key).get<double>();
        CHECK(rep.at("aggregate").at(key).get<double>() == doctest::Approx(s / 4.0).epsilon(1e-12));
    }
    CHECK(rep.at("frame_count").get<std::size_t>() == 4);
}

TEST_CASE("synthesis is deterministic, finite off-axis and checks condition width") {
    const auto corpus = small_corpus(1);
    const auto pre = pipe::pretrain(small_pretrain(2), corpus);
    const auto pm = pipe::load_person(pipe::adapt(small_adapt(3, 1), small_target(9, 3), &pre.checkpoint, {}).checkpoint);
    const Tensor conds = synth::condition_stream(1, 3);
    std::vector<synth::CameraPose> cams(2);
    cams[0].yaw = 30.0 * M_PI / 180.0;
    cams[1].yaw = -30.0 * M_PI / 180.0;
    const auto a = pipe::synthesize(pm, conds, cams, {1, 1, 1});
    const auto b = pipe::synthesize(pm, conds, cams, {1, 1, 1});
    REQUIRE(a.color.size() == 3);
    for (std::size_t t = 0; t < 3; ++t) {
        CHECK(a.color[t].data == b.color[t].data);
        CHECK(a.color[t].all_finite());
        CHECK(a.depth[t].all_finite());
    }
    CHECK_THROWS_AS(pipe::synthesize(pm, Tensor(2, 5), cams, {1, 1, 1}), ConfigError);
}

TEST_CASE("the command line maps failures to exit codes") {
    const fs::path dir = scratch_dir("cli");
    auto run = [&](const std::string& args) {
        const std::string cmd = std::string(INSTAG_CLI) + " " + args + " > " + (dir / "out.txt").string() + " 2>&1";
        const int r = std::system(cmd.c_str());
        return WIFEXITED(r) ? WEXITSTATUS(r) : -1;
    };
    CHECK(run("gradcheck --scope gaussian --seeds 1") == 0);
    CHECK(run("gradcheck --scope gaussian --seeds 1 --inject-fault 1.5") == 2);
    CHECK(run("gradcheck --scope nothing") == 1);
    CHECK(run("pretrain --config " + (dir / "missing.json").string()) == 3);
    {
        std::ofstream(dir / "bad.json") << R"({"corpus": ["x"], "output": "o", "metrics": "m", "bogus": 1})";
    }
    CHECK(run("pretrain --config " + (dir / "bad.json").string()) == 1);
    {
        std::ofstream(dir / "broken.json") << "{ not json";
    }
    CHECK(run("adapt --config " + (dir / "broken.json").string()) == 1);
    CHECK(run("no-such-command") == 1);
}

}
