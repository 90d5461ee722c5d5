// SPDX-License-Identifier: Apache-2.0
// Command-line front end. Exit codes: 0 ok, 1 usage/config, 2 numeric, 3 I/O.
#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <iostream>

#include "instag/config.hpp"
#include "instag/errors.hpp"
#include "instag/gradcheck_suite.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace instag;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Wall-clock numbers live next to the metrics, never inside them, so reports
// stay byte-identical across runs.
fs::path timings_path(const fs::path& metrics) {
    fs::path p = metrics;
    p.replace_extension(".timings.json");
    return p;
}

fs::path config_dir(const fs::path& config) { return config.has_parent_path() ? config.parent_path() : fs::path("."); }

void ensure_parent(const fs::path& p) {
    if (!p.has_parent_path()) return;
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    if (ec) throw IoError("cannot create directory '" + p.parent_path().string() + "'");
}

struct PretrainArgs {
    std::string config;
    bool no_pfield = false, no_ncloss = false, retain_pfield = false, no_hook = false;
    std::size_t log_every = 500;
};

int run_pretrain(const PretrainArgs& a) {
    const auto t0 = Clock::now();
    auto job = cfg::parse_pretrain(cfg::load_json(a.config), config_dir(a.config));
    if (a.no_pfield) job.config.personal_fields = false;
    if (a.no_ncloss) job.config.weights.lambda_c = 0.0;
    if (a.retain_pfield) job.config.retain_personal = true;
    if (a.no_hook) job.config.hook = false;
    std::vector<synth::Dataset> corpus;
    for (const auto& m : job.corpus) corpus.push_back(synth::read_dataset(m));
    std::optional<Checkpoint> resume;
    if (job.resume) resume = read_checkpoint(*job.resume);
    const double load_s = seconds_since(t0);
    const auto t1 = Clock::now();
    auto progress = [&](std::size_t it, double loss) {
        if (a.log_every > 0 && it % a.log_every == 0) std::fprintf(stderr, "pretrain %zu loss %.6f\n", it, loss);
        return true;
    };
    const auto res = pipe::pretrain(job.config, corpus, resume ? &*resume : nullptr, progress);
    const double train_s = seconds_since(t1);
    ensure_parent(job.output);
    write_checkpoint(job.output, res.checkpoint);
    cfg::save_json(job.metrics, res.metrics);
    cfg::save_json(timings_path(job.metrics), {{"load_seconds", load_s}, {"train_seconds", train_s},
                                               {"seconds_per_iteration", train_s / double(job.config.iterations)}});
    return 0;
}

struct AdaptArgs {
    std::string config;
    bool no_aligner = false, no_hook = false, freeze_umf = false, from_scratch = false;
};

int run_adapt(const AdaptArgs& a) {
    const auto t0 = Clock::now();
    auto job = cfg::parse_adapt(cfg::load_json(a.config), config_dir(a.config));
    if (a.no_aligner) job.config.aligner = false;
    if (a.no_hook) job.config.hook = false;
    if (a.freeze_umf) job.config.freeze_umf = true;
    if (a.from_scratch) job.checkpoint.reset();
    std::optional<Checkpoint> ckpt;
    if (job.checkpoint) ckpt = read_checkpoint(*job.checkpoint);
    const auto train = synth::read_dataset(job.train);
    std::optional<synth::Dataset> test;
    if (job.test) test = synth::read_dataset(*job.test);
    const double load_s = seconds_since(t0);
    const auto t1 = Clock::now();
    const auto res = pipe::adapt(job.config, train, ckpt ? &*ckpt : nullptr, job.model, test ? &*test : nullptr);
    const double train_s = seconds_since(t1);
    ensure_parent(job.output);
    write_checkpoint(job.output, res.checkpoint);
    cfg::save_json(job.metrics, res.metrics);
    cfg::save_json(timings_path(job.metrics), {{"load_seconds", load_s}, {"train_seconds", train_s},
                                               {"seconds_per_iteration", train_s / double(job.config.iterations)}});
    return 0;
}

struct EvalArgs {
    std::string ckpt, manifest, out;
    int threads = 1;
};

int run_eval(const EvalArgs& a) {
    const auto t0 = Clock::now();
    const auto pm = pipe::load_person(read_checkpoint(a.ckpt));
    const auto test = synth::read_dataset(a.manifest);
    pipe::EvalOptions eo;
    eo.threads = a.threads;
    const json report = pipe::evaluate(pm, test, eo);
    cfg::save_json(a.out, report);
    cfg::save_json(timings_path(a.out), {{"seconds", seconds_since(t0)}, {"frames", test.size()}});
    const auto& agg = report.at("aggregate");
    std::printf("psnr %.4f mouth_psnr %.4f depth_mae %.5f\n", agg.at("psnr").get<double>(),
                agg.at("mouth_psnr").get<double>(), agg.at("depth_mae").get<double>());
    return 0;
}

struct SynthArgs {
    std::string ckpt, conditions, cameras, out;
    bool geometry = false;
    int threads = 1;
    std::vector<double> background{1.0, 1.0, 1.0};
};

int run_synthesize(const SynthArgs& a) {
    const auto pm = pipe::load_person(read_checkpoint(a.ckpt));
    const Tensor conds = cfg::parse_conditions(cfg::load_json(a.conditions), pm.model.config().layout);
    const auto cams = cfg::parse_cameras(cfg::load_json(a.cameras));
    if (a.background.size() != 3) throw UsageError("--background takes three values");
    const Eigen::Vector3d bg(a.background[0], a.background[1], a.background[2]);
    const auto frames = pipe::synthesize(pm, conds, cams, bg, a.threads);
    const fs::path out(a.out);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create '" + out.string() + "'");
    for (std::size_t t = 0; t < frames.color.size(); ++t) {
        const auto& pose = cams[t % cams.size()];
        char name[32];
        std::snprintf(name, sizeof name, "%05zu", t);
        render::write_ppm(out / (std::string(name) + ".ppm"), frames.color[t], pose.width, pose.height);
        if (a.geometry) {
            render::write_raster(out / (std::string(name) + ".depth.itrf"), frames.depth[t], pose.width, pose.height);
            render::write_raster(out / (std::string(name) + ".normal.itrf"), frames.normal[t], pose.width, pose.height);
        }
    }
    const double fps = frames.seconds > 0 ? double(frames.color.size()) / frames.seconds : 0.0;
    cfg::save_json(out / "timings.json", {{"frames", frames.color.size()}, {"seconds", frames.seconds}, {"fps", fps}});
    std::printf("%zu frames, %.2f fps\n", frames.color.size(), fps);
    return 0;
}

struct GradArgs {
    std::string scope;
    std::size_t seeds = 5;
    double inject = 1.0;
};

int run_gradcheck(const GradArgs& a) {
    const auto t0 = Clock::now();
    SuiteOptions o;
    o.scope = a.scope;
    o.seeds = a.seeds;
    o.analytic_scale = a.inject;
    const auto results = run_gradcheck_suite(o);
    std::size_t failed = 0;
    for (const auto& r : results) {
        std::printf("%-4s %-10s %-28s seed %llu  rel %.3e  (%zu coords)", r.passed ? "ok" : "FAIL", r.scope.c_str(),
                    r.name.c_str(), static_cast<unsigned long long>(r.seed), r.max_rel_error, r.checked);
        if (!r.passed)
            std::printf("  worst %s[%zu] analytic %.9g numeric %.9g", r.worst_parameter.c_str(), r.worst_index, r.analytic,
                        r.numeric);
        std::printf("\n");
        failed += r.passed ? 0 : 1;
    }
    std::printf("%zu checks, %zu failed, %.2f s\n", results.size(), failed, seconds_since(t0));
    return failed ? 2 : 0;
}

int run_gen_data(const std::string& config) {
    const auto job = cfg::parse_gen_data(cfg::load_json(config), config_dir(config));
    const auto index = cfg::run_gen_data(job);
    std::printf("%s\n", index.lexically_normal().string().c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"instag: Gaussian-splatting talking-head motion engine"};
    app.require_subcommand(1);

    PretrainArgs pa;
    auto* pre = app.add_subcommand("pretrain", "train the universal motion field on a multi-identity corpus");
    pre->add_option("--config", pa.config, "JSON config")->required();
    pre->add_flag("--no-pfield", pa.no_pfield, "train without personalized fields");
    pre->add_flag("--no-ncloss", pa.no_ncloss, "drop the negative contrast term");
    pre->add_flag("--retain-pfield", pa.retain_pfield, "keep personalized fields in the checkpoint");
    pre->add_flag("--no-hook", pa.no_hook, "mouth field ignores the face cues");
    pre->add_option("--log-every", pa.log_every, "progress interval on stderr (0 = quiet)");

    AdaptArgs aa;
    auto* ada = app.add_subcommand("adapt", "fit a person model from a few frames");
    ada->add_option("--config", aa.config, "JSON config")->required();
    ada->add_flag("--no-aligner", aa.no_aligner, "disable the motion aligner");
    ada->add_flag("--no-hook", aa.no_hook, "mouth field ignores the face cues");
    ada->add_flag("--freeze-umf", aa.freeze_umf, "keep the universal fields fixed");
    ada->add_flag("--from-scratch", aa.from_scratch, "ignore the configured checkpoint");

    SynthArgs sa;
    auto* syn = app.add_subcommand("synthesize", "render frames from a person model");
    syn->add_option("--ckpt", sa.ckpt, "person checkpoint")->required();
    syn->add_option("--conditions", sa.conditions, "condition file (JSON)")->required();
    syn->add_option("--cameras", sa.cameras, "camera file (JSON)")->required();
    syn->add_option("--out", sa.out, "output directory")->required();
    syn->add_flag("--geometry", sa.geometry, "also write depth and normal rasters");
    syn->add_option("--threads", sa.threads, "render threads")->check(CLI::PositiveNumber);
    syn->add_option("--background", sa.background, "background rgb")->expected(3);

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "score a person model on a held-out set");
    ev->add_option("--ckpt", ea.ckpt, "person checkpoint")->required();
    ev->add_option("--manifest", ea.manifest, "dataset manifest")->required();
    ev->add_option("--out", ea.out, "report path (JSON)")->required();
    ev->add_option("--threads", ea.threads, "render threads")->check(CLI::PositiveNumber);

    GradArgs ga;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference checks of every differentiable piece");
    gc->add_option("--scope", ga.scope, "one of autodiff, encoders, gaussian, rasterizer, losses, motion, pipelines");
    gc->add_option("--seeds", ga.seeds, "seeds per check")->check(CLI::PositiveNumber);
    gc->add_option("--inject-fault", ga.inject, "scale analytic gradients (negative control)");

    std::string gen_config;
    auto* gen = app.add_subcommand("gen-data", "write the synthetic corpus and target sets");
    gen->add_option("--config", gen_config, "JSON config")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*pre) return run_pretrain(pa);
        if (*ada) return run_adapt(aa);
        if (*syn) return run_synthesize(sa);
        if (*ev) return run_eval(ea);
        if (*gc) return run_gradcheck(ga);
        if (*gen) return run_gen_data(gen_config);
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return 3;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
