// SPDX-License-Identifier: Apache-2.0
#include "instag/config.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include "instag/errors.hpp"

namespace instag::cfg {

using json = nlohmann::json;

json load_json(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

void save_json(const fs::path& path, const json& j) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

namespace {

// Object view that remembers which keys were read; `finish` rejects the rest.
class Obj {
public:
    Obj(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }

    bool has(const std::string& k) const { return j_.contains(k); }

    template <class T>
    T get(const std::string& k, T fallback) {
        if (!j_.contains(k)) return fallback;
        return take<T>(k);
    }

    template <class T>
    T require(const std::string& k) {
        if (!j_.contains(k)) throw ConfigError(where_ + ": missing key '" + k + "'");
        return take<T>(k);
    }

    Obj sub(const std::string& k) {
        seen_.insert(k);
        return Obj(j_.at(k), where_ + "." + k);
    }

    const json& raw(const std::string& k) {
        seen_.insert(k);
        return j_.at(k);
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
    }

    const std::string& where() const { return where_; }

private:
    template <class T>
    T take(const std::string& k) {
        seen_.insert(k);
        const json& v = j_.at(k);
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw ConfigError("");
            } else if constexpr (std::is_integral_v<T>) {
                if (!v.is_number_integer()) throw ConfigError("");
                if constexpr (std::is_unsigned_v<T>)
                    if (v.get<long long>() < 0) throw ConfigError("");
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!v.is_number()) throw ConfigError("");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw ConfigError("");
            }
            return v.get<T>();
        } catch (const std::exception&) {
            throw ConfigError(where_ + ": key '" + k + "' has the wrong type or range");
        }
    }

    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path q(p);
    return q.is_absolute() || base.empty() ? q : base / q;
}

DType parse_storage(const std::string& s) {
    if (s == "f32") return DType::F32;
    if (s == "f64") return DType::F64;
    throw ConfigError("storage must be \"f32\" or \"f64\", got \"" + s + "\"");
}

loss::LossWeights parse_weights(Obj o) {
    loss::LossWeights w;
    w.lambda_c = o.get("lambda_c", w.lambda_c);
    w.lambda_d = o.get("lambda_d", w.lambda_d);
    w.lambda_n = o.get("lambda_n", w.lambda_n);
    w.lambda_ssim = o.get("lambda_ssim", w.lambda_ssim);
    o.finish();
    w.validate();
    return w;
}

pipe::LearningRates parse_lr(Obj o) {
    pipe::LearningRates lr;
    lr.grid = o.get("grid", lr.grid);
    lr.network = o.get("network", lr.network);
    lr.gaussian = o.get("gaussian", lr.gaussian);
    o.finish();
    if (lr.grid < 0 || lr.network < 0 || lr.gaussian < 0) throw ConfigError("learning rates must be non-negative");
    return lr;
}

pipe::DensifySchedule parse_densify(Obj o) {
    pipe::DensifySchedule d;
    d.enabled = o.get("enabled", d.enabled);
    d.start = o.get("start", d.start);
    d.interval = o.get("interval", d.interval);
    d.until_fraction = o.get("until_fraction", d.until_fraction);
    d.thresholds.grad = o.get("grad", d.thresholds.grad);
    d.thresholds.prune_opacity = o.get("prune_opacity", d.thresholds.prune_opacity);
    d.thresholds.dense_extent = o.get("dense_extent", d.thresholds.dense_extent);
    d.thresholds.split_factor = o.get("split_factor", d.thresholds.split_factor);
    d.thresholds.max_count = o.get("max_count", d.thresholds.max_count);
    o.finish();
    if (d.enabled && d.interval == 0) throw ConfigError("densify.interval must be positive");
    return d;
}

enc::HashGridConfig parse_grid(Obj& o, enc::HashGridConfig g) {
    g.levels = o.get("levels", g.levels);
    g.features = o.get("features", g.features);
    g.table_size = o.get("table_size", g.table_size);
    g.n_min = o.get("n_min", g.n_min);
    g.n_max = o.get("n_max", g.n_max);
    return g;
}

motion::FieldConfig parse_field(Obj o, motion::FieldConfig f) {
    f.grid = parse_grid(o, f.grid);
    if (o.has("hidden")) {
        const json& h = o.raw("hidden");
        if (!h.is_array() || h.empty()) throw ConfigError(o.where() + ".hidden must be a non-empty array");
        f.hidden.clear();
        for (const auto& v : h) {
            if (!v.is_number_unsigned() || v.get<std::size_t>() == 0)
                throw ConfigError(o.where() + ".hidden entries must be positive integers");
            f.hidden.push_back(v.get<std::size_t>());
        }
    }
    f.attention_hidden = o.get("attention_hidden", f.attention_hidden);
    f.neutral_reference = o.get("neutral_reference", f.neutral_reference);
    o.finish();
    f.grid.validate();
    return f;
}

Eigen::Vector3d vec3(const json& j, const std::string& where) {
    if (!j.is_array() || j.size() != 3) throw ConfigError(where + " must be an array of 3 numbers");
    Eigen::Vector3d v;
    for (int k = 0; k < 3; ++k) {
        if (!j[k].is_number()) throw ConfigError(where + " must be an array of 3 numbers");
        v[k] = j[k].get<double>();
    }
    return v;
}

gs::Box parse_box(Obj o, gs::Box b) {
    if (o.has("lo")) b.lo = vec3(o.raw("lo"), o.where() + ".lo");
    if (o.has("hi")) b.hi = vec3(o.raw("hi"), o.where() + ".hi");
    o.finish();
    return b;
}

std::uint64_t seed_of(Obj& o, std::uint64_t fallback = 0) { return o.get<std::uint64_t>("seed", fallback); }

}  // namespace

pipe::ModelConfig parse_model(const json& j) {
    pipe::ModelConfig m;
    Obj o(j, "model");
    if (o.has("layout")) {
        Obj l = o.sub("layout");
        m.layout.audio = l.get("audio", m.layout.audio);
        m.layout.expression = l.get("expression", m.layout.expression);
        l.finish();
    }
    if (o.has("umf")) m.umf = parse_field(o.sub("umf"), m.umf);
    if (o.has("personal")) m.personal = parse_field(o.sub("personal"), m.personal);
    if (o.has("mouth")) m.mouth = parse_field(o.sub("mouth"), m.mouth);
    if (o.has("aligner")) {
        Obj a = o.sub("aligner");
        m.aligner = parse_grid(a, m.aligner);
        a.finish();
    }
    m.hook_hidden = o.get("hook_hidden", m.hook_hidden);
    m.face_points = o.get("face_points", m.face_points);
    m.mouth_points = o.get("mouth_points", m.mouth_points);
    if (o.has("face_box")) m.face_box = parse_box(o.sub("face_box"), m.face_box);
    if (o.has("mouth_box")) m.mouth_box = parse_box(o.sub("mouth_box"), m.mouth_box);
    o.finish();
    m.validate();
    return m;
}

PretrainJob parse_pretrain(const json& j, const fs::path& base) {
    PretrainJob job;
    auto& c = job.config;
    Obj o(j, "pretrain");
    c.iterations = o.get("iterations", c.iterations);
    c.seed = seed_of(o);
    if (o.has("weights")) c.weights = parse_weights(o.sub("weights"));
    if (o.has("lr")) c.lr = parse_lr(o.sub("lr"));
    if (o.has("model")) c.model = parse_model(o.raw("model"));
    if (o.has("densify")) c.densify = parse_densify(o.sub("densify"));
    c.personal_fields = o.get("personal_fields", c.personal_fields);
    c.retain_personal = o.get("retain_personal", c.retain_personal);
    c.hook = o.get("hook", c.hook);
    c.mouth_weight = o.get("mouth_weight", c.mouth_weight);
    c.storage = parse_storage(o.get<std::string>("storage", "f32"));
    c.threads = o.get("threads", c.threads);
    c.psnr_frames = o.get("psnr_frames", c.psnr_frames);
    c.state_every = o.get("state_every", c.state_every);
    if (o.has("state_path")) c.state_path = resolve(base, o.require<std::string>("state_path"));
    const json& corpus = o.raw("corpus");
    if (!corpus.is_array() || corpus.empty()) throw ConfigError("pretrain.corpus must be a non-empty array of manifests");
    for (const auto& p : corpus) {
        if (!p.is_string()) throw ConfigError("pretrain.corpus entries must be paths");
        job.corpus.push_back(resolve(base, p.get<std::string>()));
    }
    job.output = resolve(base, o.require<std::string>("output"));
    job.metrics = resolve(base, o.require<std::string>("metrics"));
    if (o.has("resume")) job.resume = resolve(base, o.require<std::string>("resume"));
    o.finish();
    if (c.mouth_weight < 0) throw ConfigError("pretrain.mouth_weight must be non-negative");
    c.validate();
    return job;
}

AdaptJob parse_adapt(const json& j, const fs::path& base) {
    AdaptJob job;
    auto& c = job.config;
    Obj o(j, "adapt");
    c.iterations = o.get("iterations", c.iterations);
    c.warmup = o.get("warmup", c.warmup);
    c.seed = seed_of(o);
    if (o.has("weights")) c.weights = parse_weights(o.sub("weights"));
    if (o.has("lr")) c.lr = parse_lr(o.sub("lr"));
    c.warmup_umf_lr = o.get("warmup_umf_lr", c.warmup_umf_lr);
    if (o.has("densify")) c.densify = parse_densify(o.sub("densify"));
    c.aligner = o.get("aligner", c.aligner);
    c.hook = o.get("hook", c.hook);
    c.freeze_umf = o.get("freeze_umf", c.freeze_umf);
    c.mouth_weight = o.get("mouth_weight", c.mouth_weight);
    c.storage = parse_storage(o.get<std::string>("storage", "f32"));
    c.threads = o.get("threads", c.threads);
    c.eval_every = o.get("eval_every", c.eval_every);
    if (o.has("model")) job.model = parse_model(o.raw("model"));
    if (o.has("checkpoint")) job.checkpoint = resolve(base, o.require<std::string>("checkpoint"));
    job.train = resolve(base, o.require<std::string>("train"));
    if (o.has("test")) job.test = resolve(base, o.require<std::string>("test"));
    job.output = resolve(base, o.require<std::string>("output"));
    job.metrics = resolve(base, o.require<std::string>("metrics"));
    o.finish();
    if (c.mouth_weight < 0) throw ConfigError("adapt.mouth_weight must be non-negative");
    c.validate();
    return job;
}

GenDataJob parse_gen_data(const json& j, const fs::path& base) {
    GenDataJob job;
    Obj o(j, "gen-data");
    job.out = resolve(base, o.require<std::string>("out"));
    job.seed = seed_of(o);
    job.width = o.get("width", job.width);
    job.height = o.get("height", job.height);
    job.jitter_deg = o.get("jitter_deg", job.jitter_deg);
    job.cutoff = o.get("cutoff", job.cutoff);
    if (o.has("corpus")) {
        Obj c = o.sub("corpus");
        job.identities = c.get("identities", job.identities);
        job.corpus_frames = c.get("frames", job.corpus_frames);
        job.corpus_base_seed = c.get<std::uint64_t>("base_seed", job.corpus_base_seed);
        c.finish();
    }
    if (o.has("scene")) {
        Obj s = o.sub("scene");
        auto& sc = job.scene;
        sc.n_points = s.get("points", sc.n_points);
        sc.frac_upper = s.get("frac_upper", sc.frac_upper);
        sc.frac_lips = s.get("frac_lips", sc.frac_lips);
        sc.frac_mouth = s.get("frac_mouth", sc.frac_mouth);
        sc.personal_ratio = s.get("personal_ratio", sc.personal_ratio);
        sc.max_pair_cosine = s.get("max_pair_cosine", sc.max_pair_cosine);
        s.finish();
    }
    if (o.has("targets")) {
        const json& ts = o.raw("targets");
        if (!ts.is_array()) throw ConfigError("gen-data.targets must be an array");
        std::set<std::string> names;
        for (std::size_t i = 0; i < ts.size(); ++i) {
            Obj t(ts[i], "gen-data.targets[" + std::to_string(i) + "]");
            TargetSpec s;
            s.name = t.require<std::string>("name");
            if (s.name.empty() || s.name == "corpus" || s.name.find('/') != std::string::npos || !names.insert(s.name).second)
                throw ConfigError(t.where() + ": target names must be unique, non-empty and not \"corpus\"");
            s.identity_seed = t.get<std::uint64_t>("identity_seed", s.identity_seed);
            if (t.has("offset")) s.offset = vec3(t.raw("offset"), t.where() + ".offset");
            s.motion_scale = t.get("motion_scale", s.motion_scale);
            s.train_frames = t.get("train_frames", s.train_frames);
            s.test_frames = t.get("test_frames", s.test_frames);
            s.extrapolated_frames = t.get("extrapolated_frames", s.extrapolated_frames);
            s.extrapolated_min_deg = t.get("extrapolated_min_deg", s.extrapolated_min_deg);
            s.extrapolated_max_deg = t.get("extrapolated_max_deg", s.extrapolated_max_deg);
            t.finish();
            if (s.train_frames == 0) throw ConfigError(t.where() + ": train_frames must be positive");
            if (!(s.motion_scale > 0)) throw ConfigError(t.where() + ": motion_scale must be positive");
            if (s.extrapolated_frames > 0 &&
                !(job.jitter_deg < s.extrapolated_min_deg && s.extrapolated_min_deg <= s.extrapolated_max_deg))
                throw ConfigError(t.where() + ": extrapolated yaw must lie beyond the jitter range");
            job.targets.push_back(std::move(s));
        }
    }
    o.finish();
    if (job.width < 8 || job.height < 8) throw ConfigError("gen-data: images must be at least 8x8");
    if (job.identities == 0 || job.corpus_frames == 0) throw ConfigError("gen-data: corpus needs identities and frames");
    return job;
}

fs::path run_gen_data(const GenDataJob& job) {
    synth::GenerateOptions go;
    go.jitter_deg = job.jitter_deg;
    go.width = job.width;
    go.height = job.height;
    go.cutoff = job.cutoff;
    json index;
    index["corpus"] = json::array();
    const auto ids = synth::make_corpus(job.identities, job.corpus_base_seed, job.scene);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        go.seed = pipe::mix_seed(job.seed, i, 0xC0);
        const auto ds = synth::generate(ids[i], job.corpus_frames, go);
        const auto m = synth::write_dataset(ds, job.out / "corpus" / ("id" + std::to_string(i)));
        index["corpus"].push_back(fs::relative(m, job.out).generic_string());
    }
    index["targets"] = json::object();
    for (std::size_t k = 0; k < job.targets.size(); ++k) {
        const TargetSpec& t = job.targets[k];
        synth::SyntheticIdentity id = synth::make_identity(t.identity_seed, job.scene);
        synth::normalize_personal(id, job.scene.personal_ratio);
        id.set_structure(t.offset, t.motion_scale);
        json entry;
        go.seed = pipe::mix_seed(job.seed, k, 0x7A);
        const auto train = synth::generate(id, t.train_frames, go);
        entry["train"] = fs::relative(synth::write_dataset(train, job.out / t.name / "train"), job.out).generic_string();
        if (t.test_frames > 0) {
            go.seed = pipe::mix_seed(job.seed, k, 0x7E);
            const auto test = synth::generate(id, t.test_frames, go);
            entry["test"] = fs::relative(synth::write_dataset(test, job.out / t.name / "test"), job.out).generic_string();
        }
        if (t.extrapolated_frames > 0) {
            const std::uint64_t s = pipe::mix_seed(job.seed, k, 0xE8);
            const Tensor conds = synth::condition_stream(s, t.extrapolated_frames, job.scene.layout, job.cutoff);
            std::vector<synth::CameraPose> poses(t.extrapolated_frames);
            std::mt19937_64 rng(s);
            std::uniform_real_distribution<double> u(t.extrapolated_min_deg, t.extrapolated_max_deg);
            for (std::size_t f = 0; f < poses.size(); ++f) {
                poses[f].width = job.width;
                poses[f].height = job.height;
                poses[f].yaw = (f % 2 ? -1.0 : 1.0) * u(rng) * std::numbers::pi / 180.0;
            }
            synth::GenerateOptions eo = go;
            eo.seed = s;
            const auto ex = synth::build_dataset(id, conds, poses, eo);
            entry["extrapolated"] =
                fs::relative(synth::write_dataset(ex, job.out / t.name / "extrapolated"), job.out).generic_string();
        }
        index["targets"][t.name] = entry;
    }
    const fs::path path = job.out / "index.json";
    save_json(path, index);
    return path;
}

Tensor parse_conditions(const json& j, const motion::ConditionLayout& layout) {
    if (j.is_object()) {
        Obj o(j, "conditions");
        if (o.has("stream")) {
            Obj s = o.sub("stream");
            const auto seed = s.get<std::uint64_t>("seed", 0);
            const auto frames = s.require<std::size_t>("frames");
            const double cutoff = s.get("cutoff", 0.1);
            s.finish();
            o.finish();
            if (frames == 0) throw ConfigError("conditions: stream needs at least one frame");
            return synth::condition_stream(seed, frames, layout, cutoff);
        }
        const auto frames = o.require<std::size_t>("zeros");
        o.finish();
        if (frames == 0) throw ConfigError("conditions: zeros needs at least one frame");
        return Tensor(frames, layout.total());
    }
    if (!j.is_array() || j.empty()) throw ConfigError("conditions: expected a non-empty array of rows");
    const std::size_t cols = j[0].is_array() ? j[0].size() : 0;
    Tensor t(j.size(), cols);
    for (std::size_t r = 0; r < j.size(); ++r) {
        if (!j[r].is_array() || j[r].size() != cols) throw ConfigError("conditions: rows must have equal length");
        for (std::size_t c = 0; c < cols; ++c) {
            if (!j[r][c].is_number()) throw ConfigError("conditions: entries must be numbers");
            t(r, c) = j[r][c].get<double>();
        }
    }
    return t;
}

std::vector<synth::CameraPose> parse_cameras(const json& j) {
    if (!j.is_array() || j.empty()) throw ConfigError("cameras: expected a non-empty array");
    std::vector<synth::CameraPose> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        Obj o(j[i], "cameras[" + std::to_string(i) + "]");
        synth::CameraPose p;
        p.yaw = o.get("yaw_deg", 0.0) * std::numbers::pi / 180.0;
        p.pitch = o.get("pitch_deg", 0.0) * std::numbers::pi / 180.0;
        p.distance = o.get("distance", p.distance);
        p.focal = o.get("focal", p.focal);
        p.width = o.get("width", p.width);
        p.height = o.get("height", p.height);
        o.finish();
        if (p.width < 1 || p.height < 1 || !(p.focal > 0) || !(p.distance > 0))
            throw ConfigError(o.where() + ": camera needs positive size, focal and distance");
        out.push_back(p);
    }
    return out;
}

}  // namespace instag::cfg
