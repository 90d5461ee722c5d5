// SPDX-License-Identifier: Apache-2.0
#include "instag/pipelines.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include "instag/errors.hpp"

namespace instag::pipe {

using json = nlohmann::json;

LrMap LearningRates::map() const {
    return {{ParamGroup::Grid, grid}, {ParamGroup::Network, network}, {ParamGroup::Gaussian, gaussian}};
}

bool DensifySchedule::active(std::size_t it, std::size_t total) const {
    if (!enabled || interval == 0 || it < start) return false;
    if (static_cast<double>(it) >= until_fraction * static_cast<double>(total)) return false;
    return (it - start) % interval == 0;
}

void ModelConfig::validate() const {
    for (const auto* f : {&umf, &personal, &mouth}) {
        (void)f->grid.resolutions();  // full schedule check
        if (f->hidden.empty()) throw ConfigError("decoder needs at least one hidden layer");
    }
    (void)aligner.resolutions();
    if (face_points == 0 || mouth_points == 0) throw ConfigError("structure fields need at least one primitive");
    if (layout.audio == 0) throw ConfigError("condition layout needs audio channels");
    for (int k = 0; k < 3; ++k)
        if (!(face_box.lo[k] < face_box.hi[k]) || !(mouth_box.lo[k] < mouth_box.hi[k]))
            throw ConfigError("initialization boxes must have positive extent");
}

std::string identity_prefix(std::size_t i) { return "id/" + std::to_string(i); }

Model::Model(ModelConfig cfg, std::size_t personal_count)
    : cfg_(std::move(cfg)),
      umf_(kUmfPrefix, cfg_.umf, cfg_.layout),
      mouth_(kMouthFieldPrefix, cfg_.mouth, cfg_.layout, cfg_.hook_hidden),
      personal_(personal_count, cfg_.personal, cfg_.layout),
      face_aligner_("aligner/face", cfg_.aligner),
      mouth_aligner_("aligner/mouth", cfg_.aligner) {
    cfg_.validate();
}

void Model::register_umf(ParameterStore& store, std::uint64_t seed) const {
    umf_.register_params(store, seed + 11);
    mouth_.register_params(store, seed + 23);
}

void Model::register_personal(ParameterStore& store, std::uint64_t seed) const {
    personal_.register_params(store, seed + 37);
}

void Model::register_aligners(ParameterStore& store, std::uint64_t seed) const {
    face_aligner_.register_params(store, seed + 51);
    mouth_aligner_.register_params(store, seed + 53);
}

void Model::register_structure(ParameterStore& store, const std::string& prefix, std::uint64_t seed) const {
    gs::register_field(store, prefix + "/face", gs::random_init(cfg_.face_points, cfg_.face_box, seed + 71));
    gs::register_field(store, prefix + "/mouth",
                       gs::random_init(cfg_.mouth_points, cfg_.mouth_box, seed + 73, gs::Branch::Mouth));
}

namespace {

Tensor row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(1, n, std::move(v));
}

Tensor grid_meta(const enc::HashGridConfig& g) {
    return row({double(g.levels), double(g.features), double(g.table_size), g.n_min, g.n_max});
}

enc::HashGridConfig grid_from(const Tensor& t) {
    if (t.size() != 5) throw ConfigError("checkpoint grid record is malformed");
    enc::HashGridConfig g;
    g.levels = static_cast<int>(t[0]);
    g.features = static_cast<int>(t[1]);
    g.table_size = static_cast<std::size_t>(t[2]);
    g.n_min = t[3];
    g.n_max = t[4];
    return g;
}

Tensor field_meta(const motion::FieldConfig& f) {
    std::vector<double> v{double(f.attention_hidden)};
    for (auto h : f.hidden) v.push_back(double(h));
    return row(v);
}

void field_from(const Tensor& t, motion::FieldConfig& f) {
    if (t.size() < 2) throw ConfigError("checkpoint field record is malformed");
    f.attention_hidden = static_cast<std::size_t>(t[0]);
    f.hidden.clear();
    for (std::size_t i = 1; i < t.size(); ++i) f.hidden.push_back(static_cast<std::size_t>(t[i]));
}

Tensor box_meta(const gs::Box& b) { return row({b.lo.x(), b.lo.y(), b.lo.z(), b.hi.x(), b.hi.y(), b.hi.z()}); }
gs::Box box_from(const Tensor& t) {
    if (t.size() != 6) throw ConfigError("checkpoint box record is malformed");
    return {{t[0], t[1], t[2]}, {t[3], t[4], t[5]}};
}

}  // namespace

void Model::put_meta(Checkpoint& ckpt) const {
    ckpt.put("meta/layout", row({double(cfg_.layout.audio), double(cfg_.layout.expression)}));
    ckpt.put("meta/grid/umf", grid_meta(cfg_.umf.grid));
    ckpt.put("meta/grid/personal", grid_meta(cfg_.personal.grid));
    ckpt.put("meta/grid/mouth", grid_meta(cfg_.mouth.grid));
    ckpt.put("meta/grid/aligner", grid_meta(cfg_.aligner));
    ckpt.put("meta/field/umf", field_meta(cfg_.umf));
    ckpt.put("meta/field/personal", field_meta(cfg_.personal));
    ckpt.put("meta/field/mouth", field_meta(cfg_.mouth));
    ckpt.put("meta/reference", row({cfg_.umf.neutral_reference ? 1.0 : 0.0, cfg_.personal.neutral_reference ? 1.0 : 0.0}));
    ckpt.put("meta/points", row({double(cfg_.face_points), double(cfg_.mouth_points), double(cfg_.hook_hidden)}));
    ckpt.put("meta/box/face", box_meta(cfg_.face_box));
    ckpt.put("meta/box/mouth", box_meta(cfg_.mouth_box));
}

ModelConfig Model::config_from_meta(const Checkpoint& c) {
    ModelConfig m;
    const Tensor& lay = c.get("meta/layout");
    if (lay.size() != 2) throw ConfigError("checkpoint layout record is malformed");
    m.layout.audio = static_cast<std::size_t>(lay[0]);
    m.layout.expression = static_cast<std::size_t>(lay[1]);
    m.umf.grid = grid_from(c.get("meta/grid/umf"));
    m.personal.grid = grid_from(c.get("meta/grid/personal"));
    m.mouth.grid = grid_from(c.get("meta/grid/mouth"));
    m.aligner = grid_from(c.get("meta/grid/aligner"));
    field_from(c.get("meta/field/umf"), m.umf);
    field_from(c.get("meta/field/personal"), m.personal);
    field_from(c.get("meta/field/mouth"), m.mouth);
    const Tensor& ref = c.get("meta/reference");
    if (ref.size() != 2) throw ConfigError("checkpoint reference record is malformed");
    m.umf.neutral_reference = ref[0] != 0.0;
    m.personal.neutral_reference = ref[1] != 0.0;
    const Tensor& pts = c.get("meta/points");
    if (pts.size() != 3) throw ConfigError("checkpoint points record is malformed");
    m.face_points = static_cast<std::size_t>(pts[0]);
    m.mouth_points = static_cast<std::size_t>(pts[1]);
    m.hook_hidden = static_cast<std::size_t>(pts[2]);
    m.face_box = box_from(c.get("meta/box/face"));
    m.mouth_box = box_from(c.get("meta/box/mouth"));
    return m;
}

void Model::check_meta(const Checkpoint& ckpt) const {
    const ModelConfig other = config_from_meta(ckpt);
    auto fail = [](const std::string& what) {
        throw ConfigError("checkpoint hyperparameters differ from the configuration: " + what);
    };
    if (!(other.layout == cfg_.layout)) fail("condition layout");
    if (!(other.umf == cfg_.umf)) fail("universal field");
    if (!(other.mouth == cfg_.mouth)) fail("mouth field");
    if (other.hook_hidden != cfg_.hook_hidden) fail("hook width");
}

// ---------------------------------------------------------------------------

Forward forward(ad::Tape& tape, ParameterStore& store, const Model& model, const ForwardOptions& opts,
                const Tensor& cond_row, const render::Camera& cam, const render::RenderSettings& rs,
                const Eigen::Vector3d& background) {
    Forward f;
    const ad::Var cond = tape.constant(cond_row);
    const gs::GaussianVars g = gs::field_vars(tape, store, opts.structure + "/face");
    const gs::GaussianVars gm = gs::field_vars(tape, store, opts.structure + "/mouth");

    gs::DeformationVars d;
    if (opts.aligner) {
        f.face_alignment = model.face_aligner().align(tape, store, g.mu);
        d = model.umf().deform(tape, store, ad::add(g.mu, f.face_alignment.offset), cond);
        d = motion::scale_position(d, f.face_alignment.tau);
    } else {
        d = model.umf().deform(tape, store, g.mu, cond);
    }
    f.umf_d_mu = d.d_mu;
    if (opts.personal) {
        const gs::DeformationVars p = opts.personal->deform(tape, store, g.mu, cond);
        f.personal_d_mu = p.d_mu;
        d = gs::add_deformations(d, p);
    }
    f.face_deform = d;
    f.face = gs::apply_deformation(g, d);
    f.cues = motion::face_motion_cues(d.d_mu);

    ad::Var query = gm.mu, tau;
    if (opts.aligner) {
        const motion::Alignment a = model.mouth_aligner().align(tape, store, gm.mu);
        query = ad::add(gm.mu, a.offset);
        tau = a.tau;
    }
    ad::Var dm = model.mouth_field().deform(tape, store, query, cond, opts.hook ? &f.cues : nullptr);
    if (tau.valid()) dm = ad::mul(dm, tau);
    f.mouth_d_mu = dm;
    f.mouth = gs::apply_deformation(gm, gs::DeformationVars{dm, {}, {}});

    f.face_layer = render::render_layer(f.face, cam, rs, Eigen::Vector3d::Zero());
    f.mouth_layer = render::render_layer(f.mouth, cam, rs, background);
    f.composite = render::composite(f.face_layer, f.mouth_layer);
    f.frame = render::finish(f.composite);
    return f;
}

// ---------------------------------------------------------------------------

double mean(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) return 0.0;
    const double mx = mean(x), my = mean(y);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx <= 0.0 || syy <= 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t it, std::uint64_t salt) {
    // splitmix64 finalizer over the combined words
    std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + it * 0xBF58476D1CE4E5B9ULL + salt * 0x94D049BB133111EBULL + 1;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

namespace {

std::string iteration_diagnostics(const ParameterStore& store) {
    std::ostringstream os;
    for (const Parameter* p : store.all()) {
        if (p->value.all_finite() && p->grad.all_finite()) continue;
        os << " non-finite values in '" << p->name << "';";
    }
    std::string s = os.str();
    return s.empty() ? " all parameters finite" : s;
}

void check_loss(double v, std::size_t it, const ParameterStore& store) {
    if (std::isfinite(v)) return;
    throw NumericError("loss is not finite at iteration " + std::to_string(it) + ":" + iteration_diagnostics(store));
}

void accumulate(std::map<std::string, gs::DensifyStats>& stats, const std::string& name, const render::Layer& layer,
                const render::Camera& cam) {
    stats[name].accumulate(render::screen_gradient(layer), render::visible_mask(layer), cam.width, cam.height);
}

void densify_all(ParameterStore& store, AdamW& opt, std::map<std::string, gs::DensifyStats>& stats,
                 const std::vector<std::string>& fields, const gs::DensifyThresholds& th, std::uint64_t seed) {
    for (std::size_t i = 0; i < fields.size(); ++i)
        gs::densify_and_prune(store, opt, fields[i], stats[fields[i]], th, mix_seed(seed, i, 0xD5));
}

double frame_psnr(const Tensor& img, const Tensor& gt) { return render::psnr(img, gt); }

double masked_psnr(const Tensor& img, const Tensor& gt, const Tensor& mask) {
    double se = 0.0, n = 0.0;
    for (std::size_t p = 0; p < mask.size(); ++p) {
        if (mask[p] <= 0.0) continue;
        for (std::size_t c = 0; c < img.cols; ++c) {
            const double d = img(p, c) - gt(p, c);
            se += d * d;
            n += 1.0;
        }
    }
    if (n == 0.0) return 99.0;
    const double mse = se / n;
    if (mse <= 0.0) return 99.0;
    return std::min(99.0, -10.0 * std::log10(mse));
}

}  // namespace

// ---------------------------------------------------------------------------

void PretrainConfig::validate() const {
    if (iterations == 0) throw ConfigError("pretrain: iterations must be at least 1");
    weights.validate();
    model.validate();
    if (threads < 1) throw ConfigError("threads must be at least 1");
    if (state_every > 0 && state_path.empty()) throw ConfigError("pretrain: state_every needs a state path");
}

Checkpoint TrainState::to_checkpoint(const Model& model) const {
    Checkpoint c;
    model.put_meta(c);
    c.put("state/iteration", Tensor::scalar(static_cast<double>(iteration)));
    c.put("state/storage", Tensor::scalar(store.storage() == DType::F32 ? 0.0 : 1.0));
    c.put_store(store);
    for (const Parameter* p : store.all()) {
        c.put("state/group/" + p->name, row({double(static_cast<int>(p->group)), p->lr_scale, p->trainable ? 1.0 : 0.0}));
    }
    c.put_optimizer(opt, store);
    for (const auto& [name, s] : stats) {
        c.put("state/densify/" + name + "/accum", s.grad_accum);
        c.put("state/densify/" + name + "/count", s.count);
    }
    return c;
}

TrainState TrainState::from_checkpoint(const Checkpoint& c, const Model& model) {
    model.check_meta(c);
    TrainState st;
    st.iteration = static_cast<std::size_t>(c.get("state/iteration")[0]);
    st.store.set_storage(c.get("state/storage")[0] == 0.0 ? DType::F32 : DType::F64);
    for (const NamedArray& e : c.entries()) {
        const std::string_view n(e.name);
        if (n.starts_with("meta/") || n.starts_with("state/") || n.starts_with("opt/")) continue;
        const Tensor& g = c.get("state/group/" + e.name);
        Parameter& p = st.store.add(e.name, e.value, static_cast<ParamGroup>(static_cast<int>(g[0])), g[1]);
        p.trainable = g[2] != 0.0;
    }
    c.load_optimizer(st.opt);
    for (const NamedArray* e : c.with_prefix("state/densify/")) {
        std::string name = e->name.substr(std::string("state/densify/").size());
        if (name.ends_with("/accum")) {
            name.resize(name.size() - 6);
            st.stats[name].grad_accum = e->value;
        } else if (name.ends_with("/count")) {
            name.resize(name.size() - 6);
            st.stats[name].count = e->value;
        }
    }
    return st;
}

DecompositionScores decomposition_scores(const Model& model, ParameterStore& store,
                                         const std::vector<synth::SyntheticIdentity>& probes, bool with_personal) {
    DecompositionScores out;
    const Tensor conds = synth::condition_stream(0xD15C0ULL, 16, model.config().layout);
    double dot = 0.0, nu = 0.0, no = 0.0, pair_sum = 0.0;
    std::size_t pair_terms = 0;
    const std::size_t k = with_personal ? model.personal().size() : 0;
    for (const auto& id : probes) {
        // a condition-independent offset is absorbed by the canonical points, so compare against neutral
        Tensor neutral;
        {
            ad::Tape tape(false);
            neutral = model.umf()
                          .deform(tape, store, tape.constant(id.face_canonical), tape.constant(Tensor(1, conds.cols)))
                          .d_mu.value();
        }
        for (std::size_t t = 0; t < conds.rows; ++t) {
            Tensor c(1, conds.cols);
            for (std::size_t j = 0; j < c.cols; ++j) c[j] = conds(t, j);
            ad::Tape tape(false);
            const ad::Var mu = tape.constant(id.face_canonical);
            const ad::Var cv = tape.constant(c);
            Tensor u = model.umf().deform(tape, store, mu, cv).d_mu.value();
            for (std::size_t i = 0; i < u.size(); ++i) u[i] -= neutral[i];
            for (std::size_t i = 0; i < id.face.size(); ++i) {
                const Eigen::Vector3d p(id.face_canonical(i, 0), id.face_canonical(i, 1), id.face_canonical(i, 2));
                const Eigen::Vector3d o =
                    synth::universal_motion(id.face_regions[i], p, c, id.config.shape, id.config.layout);
                for (int a = 0; a < 3; ++a) {
                    dot += u(i, a) * o[a];
                    nu += u(i, a) * u(i, a);
                    no += o[a] * o[a];
                }
            }
            if (k < 2) continue;
            std::vector<Tensor> r;
            for (std::size_t q = 0; q < k; ++q) r.push_back(model.personal().at(q).deform(tape, store, mu, cv).d_mu.value());
            for (std::size_t a = 0; a < k; ++a)
                for (std::size_t b = a + 1; b < k; ++b) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < r[a].rows; ++i) {
                        double d = 0.0;
                        for (int x = 0; x < 3; ++x) d += r[a](i, x) * r[b](i, x);
                        s += std::max(d, 0.0);
                    }
                    pair_sum += s / static_cast<double>(r[a].rows);
                    ++pair_terms;
                }
        }
    }
    out.umf_cosine = (nu > 0.0 && no > 0.0) ? dot / std::sqrt(nu * no) : 0.0;
    out.pairs = k >= 2 ? k * (k - 1) / 2 : 0;
    out.personal_pair_dot = pair_terms ? pair_sum / static_cast<double>(pair_terms) : 0.0;
    return out;
}

PretrainResult pretrain(const PretrainConfig& cfg, const std::vector<synth::Dataset>& corpus, const Checkpoint* resume,
                        const Progress& progress) {
    cfg.validate();
    if (corpus.empty()) throw ConfigError("pretrain: the corpus needs at least one identity");
    for (const auto& ds : corpus) {
        if (ds.size() == 0) throw ConfigError("pretrain: an identity has no frames");
        if (!(ds.identity.config.layout == cfg.model.layout))
            throw ConfigError("pretrain: corpus condition layout differs from the model layout");
    }
    const std::size_t k = corpus.size();
    const Model model(cfg.model, cfg.personal_fields ? k : 0);

    TrainState st;
    if (resume) {
        st = TrainState::from_checkpoint(*resume, model);
        if (st.iteration > cfg.iterations) throw ConfigError("pretrain: resume state is past the final iteration");
    } else {
        st.store.set_storage(cfg.storage);
        model.register_umf(st.store, cfg.seed);
        if (cfg.personal_fields) model.register_personal(st.store, cfg.seed);
        for (std::size_t i = 0; i < k; ++i) model.register_structure(st.store, identity_prefix(i), cfg.seed + 1000 * (i + 1));
        st.store.round_to_storage();
    }
    std::vector<std::string> fields;
    for (std::size_t i = 0; i < k; ++i) {
        fields.push_back(identity_prefix(i) + "/face");
        fields.push_back(identity_prefix(i) + "/mouth");
    }

    render::RenderSettings rs;
    rs.threads = cfg.threads;
    const LrMap lr = cfg.lr.map();
    const int w = corpus[0].width, h = corpus[0].height;
    for (const auto& ds : corpus)
        if (ds.width != w || ds.height != h) throw ConfigError("pretrain: all identities need the same image size");

    for (; st.iteration < cfg.iterations; ++st.iteration) {
        const std::size_t it = st.iteration;
        std::mt19937_64 rng(mix_seed(cfg.seed, it));
        const std::size_t i = std::uniform_int_distribution<std::size_t>(0, k - 1)(rng);
        const synth::Dataset& ds = corpus[i];
        const std::size_t t = std::uniform_int_distribution<std::size_t>(0, ds.size() - 1)(rng);
        const synth::FrameRecord& fr = ds.frames[t];
        const render::Camera cam = fr.pose.camera();

        ad::Tape tape;
        ForwardOptions fo;
        fo.structure = identity_prefix(i);
        fo.personal = cfg.personal_fields ? &model.personal().at(i) : nullptr;
        fo.hook = cfg.hook;
        const Forward f = forward(tape, st.store, model, fo, fr.cond, cam, rs, ds.background);

        const ad::Var photo = loss::photometric(f.frame.color, tape.constant_view(fr.image), w, h, cfg.weights.lambda_ssim);
        std::vector<ad::Var> offsets;
        if (cfg.personal_fields && k > 1) {
            // every personalized field is probed at identity i's undeformed centers
            const ad::Var base = tape.constant(st.store.at(gs::field_param(fo.structure + "/face", "mu")).value);
            const ad::Var cond = tape.constant(fr.cond);
            for (std::size_t j = 0; j < k; ++j)
                offsets.push_back(j == i ? f.personal_d_mu : model.personal().at(j).deform(tape, st.store, base, cond).d_mu);
        }
        ad::Var total = loss::pretrain_loss(photo, i, offsets, cfg.weights);
        if (cfg.mouth_weight > 0.0) {
            const ad::Var mouth = loss::photometric(f.mouth_layer.color, tape.constant_view(fr.mouth_image), w, h,
                                                    cfg.weights.lambda_ssim);
            total = ad::add(total, ad::scale(mouth, cfg.mouth_weight));
        }
        const double value = total.item();
        check_loss(value, it + 1, st.store);
        tape.backward(total);
        accumulate(st.stats, fields[2 * i], f.face_layer, cam);
        accumulate(st.stats, fields[2 * i + 1], f.mouth_layer, cam);
        st.opt.step(st.store, lr);
        for (const Parameter* p : st.store.all())
            if (!p->value.all_finite())
                throw NumericError("parameter '" + p->name + "' became non-finite at iteration " + std::to_string(it + 1));
        if (cfg.densify.active(it + 1, cfg.iterations))
            densify_all(st.store, st.opt, st.stats, fields, cfg.densify.thresholds, mix_seed(cfg.seed, it, 0xDE));

        if (cfg.state_every > 0 && (it + 1) % cfg.state_every == 0) {
            Checkpoint c = st.to_checkpoint(model);
            c.put("state/iteration", Tensor::scalar(static_cast<double>(it + 1)));
            write_checkpoint(cfg.state_path, c);
        }
        if (progress && !progress(it + 1, value)) {
            ++st.iteration;
            break;
        }
    }

    PretrainResult res;
    model.put_meta(res.checkpoint);
    res.checkpoint.put_store(st.store, std::string(kUmfPrefix) + "/");
    res.checkpoint.put_store(st.store, std::string(kMouthFieldPrefix) + "/");
    if (cfg.retain_personal) res.checkpoint.put_store(st.store, "pfield/");
    res.checkpoint.put("state/iteration", Tensor::scalar(static_cast<double>(st.iteration)));

    json m;
    m["stage"] = "pretrain";
    m["iterations"] = st.iteration;
    m["identities"] = k;
    json per_id = json::array();
    for (std::size_t i = 0; i < k; ++i) {
        const synth::Dataset& ds = corpus[i];
        std::vector<double> ps;
        const std::size_t nf = std::min(cfg.psnr_frames, ds.size());
        for (std::size_t q = 0; q < nf; ++q) {
            const synth::FrameRecord& fr = ds.frames[q * ds.size() / nf];
            ad::Tape tape(false);
            ForwardOptions fo;
            fo.structure = identity_prefix(i);
            fo.personal = cfg.personal_fields ? &model.personal().at(i) : nullptr;
            fo.hook = cfg.hook;
            const Forward f = forward(tape, st.store, model, fo, fr.cond, fr.pose.camera(), rs, ds.background);
            ps.push_back(frame_psnr(f.frame.color.value(), fr.image));
        }
        per_id.push_back({{"identity", i}, {"train_psnr", mean(ps)}, {"primitives",
                          st.store.at(gs::field_param(fields[2 * i], "mu")).value.rows}});
    }
    m["per_identity"] = per_id;
    std::vector<synth::SyntheticIdentity> probes;
    for (const auto& ds : corpus) probes.push_back(ds.identity);
    const DecompositionScores sc = decomposition_scores(model, st.store, probes, cfg.personal_fields);
    m["umf_oracle_cosine"] = sc.umf_cosine;
    m["personal_pair_dot"] = sc.personal_pair_dot;
    m["personal_pairs"] = sc.pairs;
    res.metrics = std::move(m);
    return res;
}

// ---------------------------------------------------------------------------

void AdaptConfig::validate() const {
    if (iterations == 0) throw ConfigError("adapt: iterations must be at least 1");
    if (warmup >= iterations) throw ConfigError("adapt: warmup must be shorter than the run");
    weights.validate();
    if (threads < 1) throw ConfigError("threads must be at least 1");
    if (warmup_umf_lr < 0.0) throw ConfigError("adapt: warm-up learning-rate factor must be non-negative");
}

namespace {

bool universal_param(const std::string& n) {
    return n.starts_with(std::string(kUmfPrefix) + "/") || n.starts_with(std::string(kMouthFieldPrefix) + "/");
}

std::vector<double> eval_psnr(const Model& model, ParameterStore& store, const synth::Dataset& test, bool aligner,
                              bool hook, const render::RenderSettings& rs) {
    std::vector<double> out;
    for (const auto& fr : test.frames) {
        ad::Tape tape(false);
        ForwardOptions fo;
        fo.structure = kPersonPrefix;
        fo.aligner = aligner;
        fo.hook = hook;
        const Forward f = forward(tape, store, model, fo, fr.cond, fr.pose.camera(), rs, test.background);
        out.push_back(frame_psnr(f.frame.color.value(), fr.image));
    }
    return out;
}

}  // namespace

AdaptResult adapt(const AdaptConfig& cfg, const synth::Dataset& train, const Checkpoint* pretrained,
                  const ModelConfig& model_cfg, const synth::Dataset* test) {
    cfg.validate();
    if (train.size() == 0) throw ConfigError("adapt: the training set is empty");
    const ModelConfig mc = pretrained ? Model::config_from_meta(*pretrained) : model_cfg;
    const Model model(mc, 0);
    if (pretrained) model.check_meta(*pretrained);
    if (!(train.identity.config.layout == mc.layout))
        throw ConfigError("adapt: training conditions do not match the model layout");

    ParameterStore store(cfg.storage);
    model.register_umf(store, cfg.seed);
    if (pretrained) {
        pretrained->load_into(store, std::string(kUmfPrefix) + "/");
        pretrained->load_into(store, std::string(kMouthFieldPrefix) + "/");
    }
    model.register_aligners(store, cfg.seed);
    model.register_structure(store, kPersonPrefix, cfg.seed + 5000);
    store.round_to_storage();
    for (Parameter* p : store.all())
        if (universal_param(p->name) && cfg.freeze_umf) p->trainable = false;

    AdamW opt;
    std::map<std::string, gs::DensifyStats> stats;
    const std::vector<std::string> fields{std::string(kPersonPrefix) + "/face", std::string(kPersonPrefix) + "/mouth"};
    render::RenderSettings rs;
    rs.threads = cfg.threads;
    const LrMap lr = cfg.lr.map();
    const int w = train.width, h = train.height;

    auto set_universal_lr = [&](double s) {
        for (Parameter* p : store.all())
            if (universal_param(p->name)) p->lr_scale = s;
    };
    set_universal_lr(cfg.warmup_umf_lr);

    AdaptResult res;
    auto record_curve = [&](std::size_t it) {
        if (!test || test->size() == 0) return;
        const bool full = it > cfg.warmup;
        res.curve.emplace_back(it, mean(eval_psnr(model, store, *test, cfg.aligner && full, cfg.hook, rs)));
    };
    if (cfg.eval_every > 0) record_curve(0);

    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        const loss::Stage stage = it < cfg.warmup ? loss::Stage::Warmup : loss::Stage::Full;
        if (it == cfg.warmup) set_universal_lr(1.0);
        std::mt19937_64 rng(mix_seed(cfg.seed, it, 0xADA));
        const std::size_t t = std::uniform_int_distribution<std::size_t>(0, train.size() - 1)(rng);
        const synth::FrameRecord& fr = train.frames[t];
        const render::Camera cam = fr.pose.camera();

        ad::Tape tape;
        ForwardOptions fo;
        fo.structure = kPersonPrefix;
        fo.aligner = cfg.aligner && stage == loss::Stage::Full;
        fo.hook = cfg.hook;
        const Forward f = forward(tape, store, model, fo, fr.cond, cam, rs, train.background);
        const ad::Var photo = loss::photometric(f.frame.color, tape.constant_view(fr.image), w, h, cfg.weights.lambda_ssim);
        loss::GeometryLoss geo;
        if (stage == loss::Stage::Full && (cfg.weights.lambda_d > 0.0 || cfg.weights.lambda_n > 0.0))
            geo = loss::geometry_loss(f.frame.depth, f.frame.normal, fr.targets, cfg.weights);
        ad::Var total = loss::adaptation_loss(photo, geo, stage);
        if (cfg.mouth_weight > 0.0) {
            const ad::Var mouth = loss::photometric(f.mouth_layer.color, tape.constant_view(fr.mouth_image), w, h,
                                                    cfg.weights.lambda_ssim);
            total = ad::add(total, ad::scale(mouth, cfg.mouth_weight));
        }
        const double value = total.item();
        check_loss(value, it + 1, store);
        tape.backward(total);
        accumulate(stats, fields[0], f.face_layer, cam);
        accumulate(stats, fields[1], f.mouth_layer, cam);
        opt.step(store, lr);
        if (cfg.densify.active(it + 1, cfg.iterations))
            densify_all(store, opt, stats, fields, cfg.densify.thresholds, mix_seed(cfg.seed, it, 0xDE));
        if (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) record_curve(it + 1);
    }

    model.put_meta(res.checkpoint);
    res.checkpoint.put("meta/flags", row({cfg.aligner ? 1.0 : 0.0, cfg.hook ? 1.0 : 0.0}));
    res.checkpoint.put_store(store, std::string(kUmfPrefix) + "/");
    res.checkpoint.put_store(store, std::string(kMouthFieldPrefix) + "/");
    res.checkpoint.put_store(store, "aligner/");
    res.checkpoint.put_store(store, std::string(kPersonPrefix) + "/");

    json m;
    m["stage"] = "adapt";
    m["iterations"] = cfg.iterations;
    m["warmup"] = cfg.warmup;
    m["pretrained"] = pretrained != nullptr;
    m["face_primitives"] = store.at(gs::field_param(fields[0], "mu")).value.rows;
    m["mouth_primitives"] = store.at(gs::field_param(fields[1], "mu")).value.rows;
    m["train_psnr"] = mean(eval_psnr(model, store, train, cfg.aligner, cfg.hook, rs));
    json curve = json::array();
    for (const auto& [it, p] : res.curve) curve.push_back({{"iteration", it}, {"psnr", p}});
    m["curve"] = curve;
    res.metrics = std::move(m);
    return res;
}

// ---------------------------------------------------------------------------

PersonModel load_person(const Checkpoint& ckpt) {
    if (!ckpt.contains("meta/flags")) throw ConfigError("checkpoint is not a person model");
    PersonModel pm{Model(Model::config_from_meta(ckpt), 0), ParameterStore(DType::F64)};
    pm.model.register_umf(pm.store, 0);
    pm.model.register_aligners(pm.store, 0);
    pm.model.register_structure(pm.store, kPersonPrefix, 0);
    ckpt.load_into(pm.store, "", true);
    const Tensor& flags = ckpt.get("meta/flags");
    if (flags.size() != 2) throw ConfigError("checkpoint flag record is malformed");
    pm.aligner = flags[0] != 0.0;
    pm.hook = flags[1] != 0.0;
    return pm;
}

FrameScore score_frame(const Tensor& image, const Tensor& depth, const synth::FrameRecord& gt) {
    if (!image.same_shape(gt.image) || depth.size() != gt.depth.size())
        throw ConfigError("eval: rendered frame and ground truth differ in size");
    FrameScore s;
    s.psnr = frame_psnr(image, gt.image);
    s.mouth_psnr = masked_psnr(image, gt.image, gt.mouth_mask);
    double err = 0.0, n = 0.0;
    for (std::size_t p = 0; p < depth.size(); ++p) {
        if (gt.alpha[p] <= 0.5) continue;
        err += std::abs(depth[p] - gt.depth[p]);
        n += 1.0;
    }
    s.depth_mae = n > 0 ? err / n : 0.0;
    return s;
}

namespace {

// Mean distance of each point from its own average over the sequence, per
// frame: a constant offset is absorbed by the canonical points and says
// nothing about motion.
std::vector<double> centred_displacement(const std::vector<Tensor>& offsets) {
    std::vector<double> out(offsets.size(), 0.0);
    if (offsets.empty()) return out;
    Tensor centre(offsets[0].rows, offsets[0].cols);
    for (const Tensor& o : offsets) centre.add_scaled_(o, 1.0 / static_cast<double>(offsets.size()));
    for (std::size_t t = 0; t < offsets.size(); ++t) {
        const Tensor& o = offsets[t];
        double disp = 0.0;
        for (std::size_t i = 0; i < o.rows; ++i) {
            double s = 0.0;
            for (std::size_t a = 0; a < o.cols; ++a) s += std::pow(o(i, a) - centre(i, a), 2);
            disp += std::sqrt(s);
        }
        out[t] = disp / static_cast<double>(std::max<std::size_t>(o.rows, 1));
    }
    return out;
}

}  // namespace

json evaluate(const PersonModel& pm, const synth::Dataset& test, const EvalOptions& opts) {
    if (!(test.identity.config.layout == pm.model.config().layout))
        throw ConfigError("eval: test conditions do not match the model layout");
    auto& store = const_cast<ParameterStore&>(pm.store);
    render::RenderSettings rs;
    rs.threads = opts.threads;
    json frames = json::array();
    std::vector<double> psnr, mouth_psnr, depth_mae, dist;
    std::vector<Tensor> mouth_offsets, gt_offsets;
    for (std::size_t t = 0; t < test.size(); ++t) {
        const auto& fr = test.frames[t];
        ad::Tape tape(false);
        ForwardOptions fo;
        fo.structure = kPersonPrefix;
        fo.aligner = pm.aligner;
        fo.hook = pm.hook;
        const Forward f = forward(tape, store, pm.model, fo, fr.cond, fr.pose.camera(), rs, test.background);
        const FrameScore sc = score_frame(f.frame.color.value(), f.frame.depth.value(), fr);
        const Tensor& dd = f.cues.dist.value();
        mouth_offsets.push_back(f.mouth_d_mu.value());
        Tensor gt = fr.deform.universal_mouth;
        gt.add_scaled_(fr.deform.personal_mouth, 1.0);
        gt_offsets.push_back(std::move(gt));
        psnr.push_back(sc.psnr);
        mouth_psnr.push_back(sc.mouth_psnr);
        depth_mae.push_back(sc.depth_mae);
        dist.push_back(std::sqrt(dd[0] * dd[0] + dd[1] * dd[1] + dd[2] * dd[2]));
    }
    const std::vector<double> mouth_disp = centred_displacement(mouth_offsets);
    const std::vector<double> gt_mouth_disp = centred_displacement(gt_offsets);
    for (std::size_t t = 0; t < test.size(); ++t)
        frames.push_back({{"index", t},
                          {"psnr", psnr[t]},
                          {"mouth_psnr", mouth_psnr[t]},
                          {"depth_mae", depth_mae[t]},
                          {"dist_norm", dist[t]},
                          {"mouth_displacement", mouth_disp[t]}});
    json rep;
    rep["frames"] = frames;
    rep["frame_count"] = test.size();
    rep["aggregate"] = {{"psnr", mean(psnr)},
                        {"mouth_psnr", mean(mouth_psnr)},
                        {"depth_mae", mean(depth_mae)},
                        {"hook_correlation", pearson(dist, mouth_disp)},
                        {"mouth_motion_oracle_correlation", pearson(gt_mouth_disp, mouth_disp)}};
    {
        ad::Tape tape(false);
        const ad::Var mu = tape.parameter(store, gs::field_param(std::string(kPersonPrefix) + "/face", "mu"));
        const motion::Alignment a = pm.model.face_aligner().align(tape, store, mu);
        std::vector<double> off(3, 0.0), tau(3, 0.0);
        const double n = static_cast<double>(mu.rows());
        for (std::size_t i = 0; i < mu.rows(); ++i)
            for (int k = 0; k < 3; ++k) {
                off[k] += a.offset.value()(i, k) / n;
                tau[k] += a.tau.value()(i, k) / n;
            }
        rep["aligner"] = {{"enabled", pm.aligner}, {"mean_offset", off}, {"mean_scale", tau}};
    }
    rep["hook"] = pm.hook;
    // universal field against the oracle law at this identity's canonical points
    rep["umf_oracle_cosine"] = decomposition_scores(pm.model, store, {test.identity}, false).umf_cosine;
    return rep;
}

Frames synthesize(const PersonModel& pm, const Tensor& conditions, const std::vector<synth::CameraPose>& cameras,
                  const Eigen::Vector3d& background, int threads) {
    if (conditions.cols != pm.model.config().layout.total())
        throw ConfigError("synthesize: conditions have " + std::to_string(conditions.cols) + " channels, the model expects " +
                          std::to_string(pm.model.config().layout.total()));
    if (cameras.empty()) throw ConfigError("synthesize: no cameras given");
    auto& store = const_cast<ParameterStore&>(pm.store);
    render::RenderSettings rs;
    rs.threads = threads;
    Frames out;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t t = 0; t < conditions.rows; ++t) {
        Tensor c(1, conditions.cols);
        for (std::size_t j = 0; j < c.cols; ++j) c[j] = conditions(t, j);
        ad::Tape tape(false);
        ForwardOptions fo;
        fo.structure = kPersonPrefix;
        fo.aligner = pm.aligner;
        fo.hook = pm.hook;
        const Forward f = forward(tape, store, pm.model, fo, c, cameras[t % cameras.size()].camera(), rs, background);
        out.color.push_back(f.frame.color.value());
        out.depth.push_back(f.frame.depth.value());
        out.normal.push_back(f.frame.normal.value());
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

}  // namespace instag::pipe
