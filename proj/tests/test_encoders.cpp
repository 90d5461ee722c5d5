// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "instag/encoders.hpp"
#include "instag/errors.hpp"
#include "instag/gradcheck.hpp"
#include "test_util.hpp"

using namespace instag;
using namespace instag::enc;

namespace {

// Straight-line reimplementation of one plane lookup.
std::vector<double> oracle_plane(double u, double v, const Tensor& table, const HashGridConfig& cfg) {
    std::vector<double> out;
    const double growth = std::exp((std::log(cfg.n_max) - std::log(cfg.n_min)) / (cfg.levels - 1));
    for (int l = 0; l < cfg.levels; ++l) {
        const long res = static_cast<long>(std::floor(cfg.n_min * std::pow(growth, l) + 1e-9));
        const double x = std::min(std::max(u, 0.0), 1.0) * res, y = std::min(std::max(v, 0.0), 1.0) * res;
        long x0 = static_cast<long>(x), y0 = static_cast<long>(y);
        if (x0 == res) x0 = res - 1;
        if (y0 == res) y0 = res - 1;
        const double tx = x - x0, ty = y - y0;
        auto slot = [&](long a, long b) -> std::size_t {
            if (static_cast<std::size_t>((res + 1) * (res + 1)) <= cfg.table_size)
                return static_cast<std::size_t>(b * (res + 1) + a);
            const std::uint64_t h = (static_cast<std::uint64_t>(a) ^ (static_cast<std::uint64_t>(b) * 2654435761ull)) &
                                    0xffffffffull;
            return static_cast<std::size_t>(h % cfg.table_size);
        };
        for (int f = 0; f < cfg.features; ++f) {
            const std::size_t base = static_cast<std::size_t>(l) * cfg.table_size;
            const double v00 = table(base + slot(x0, y0), f), v10 = table(base + slot(x0 + 1, y0), f);
            const double v01 = table(base + slot(x0, y0 + 1), f), v11 = table(base + slot(x0 + 1, y0 + 1), f);
            out.push_back((1 - tx) * (1 - ty) * v00 + tx * (1 - ty) * v10 + (1 - tx) * ty * v01 + tx * ty * v11);
        }
    }
    return out;
}

HashGridConfig small_config() {
    HashGridConfig c;
    c.levels = 4;
    c.table_size = 256;
    c.n_min = 4;
    c.n_max = 40;
    return c;
}

}  // namespace

TEST_SUITE("encoders") {

TEST_CASE("resolution schedule is geometric and strictly increasing") {
    const HashGridConfig face;
    const auto r = face.resolutions();
    REQUIRE(r.size() == 12);
    CHECK(r.front() == 16);
    CHECK(r.back() == 256);
    for (std::size_t l = 1; l < r.size(); ++l) CHECK(r[l] > r[l - 1]);
    HashGridConfig mouth;
    mouth.n_min = 64;
    mouth.n_max = 384;
    CHECK(mouth.resolutions().back() == 384);
    HashGridConfig bad;
    bad.levels = 40;
    bad.n_min = 16;
    bad.n_max = 20;
    CHECK_THROWS_AS(bad.resolutions(), ConfigError);
}

TEST_CASE("dense levels index row-major and hashed slots stay in range") {
    std::set<std::size_t> seen;
    for (int y = 0; y <= 10; ++y)
        for (int x = 0; x <= 10; ++x) {
            const std::size_t s = hash_index(x, y, 10, 256);
            CHECK(s == static_cast<std::size_t>(y * 11 + x));
            seen.insert(s);
        }
    CHECK(seen.size() == 121);
    for (int y = 0; y <= 300; y += 7)
        for (int x = 0; x <= 300; x += 3) {
            CHECK(hash_index(x, y, 300, 1000) < 1000);
            CHECK(hash_index(x, y, 300, 1000) == hash_index(x, y, 300, 1000));
        }
}

TEST_CASE("collisions at the coarsest hashed level follow the birthday estimate") {
    const HashGridConfig cfg;
    int res = -1;
    for (int r : cfg.resolutions())
        if (static_cast<std::size_t>(r + 1) * (r + 1) > cfg.table_size) {
            res = r;
            break;
        }
    REQUIRE(res > 0);
    const double n = static_cast<double>(res + 1) * (res + 1), T = static_cast<double>(cfg.table_size);
    std::vector<char> used(cfg.table_size, 0);
    for (int y = 0; y <= res; ++y)
        for (int x = 0; x <= res; ++x) used[hash_index(x, y, res, cfg.table_size)] = 1;
    double occupied = 0;
    for (char u : used) occupied += u;
    const double measured = n - occupied;
    const double expected = n - T * (1.0 - std::pow(1.0 - 1.0 / T, n));
    MESSAGE("resolution " << res << " collisions " << measured << " expected " << expected);
    CHECK(measured >= 0.8 * expected);
    CHECK(measured <= 1.2 * expected);
}

TEST_CASE("tri-plane parameter count and output size") {
    const TriPlane tp("umf/grid", HashGridConfig{});
    CHECK(tp.param_count() == 3u * 12u * (1u << 14) * 2u);
    CHECK(tp.output_dim() == 72);
    ParameterStore store;
    tp.register_params(store, 1);
    CHECK(store.scalar_count() == tp.param_count());
    for (int p = 0; p < 3; ++p) CHECK(store.at(tp.plane_name(p)).group == ParamGroup::Grid);
}

TEST_CASE("zero tables give zero features") {
    const TriPlane tp("g", small_config());
    ParameterStore store;
    tp.register_params(store, 1, 0.0);
    std::mt19937_64 rng(2);
    ad::Tape tape(false);
    const auto f = tp.encode(tape, store, tape.constant(test::random_tensor(50, 3, rng, -1.5, 1.5)));
    CHECK(f.value().max_abs() == 0.0);
}

TEST_CASE("lookup matches the scalar oracle") {
    const HashGridConfig cfg = small_config();
    std::mt19937_64 rng(9);
    const Tensor table = test::random_tensor(cfg.levels * cfg.table_size, cfg.features, rng);
    const Tensor uv = test::random_tensor(200, 2, rng, -0.1, 1.1);
    ad::Tape tape(false);
    const Tensor out = hash_grid_2d(tape.constant(uv), tape.constant(table), cfg).value();
    for (std::size_t i = 0; i < uv.rows; ++i) {
        const auto want = oracle_plane(uv(i, 0), uv(i, 1), table, cfg);
        for (std::size_t k = 0; k < want.size(); ++k) CHECK(out(i, k) == doctest::Approx(want[k]).epsilon(1e-12));
    }
    // the face configuration mixes dense and hashed levels
    const HashGridConfig face;
    const Tensor big = test::random_tensor(face.levels * face.table_size, face.features, rng);
    const Tensor out2 = hash_grid_2d(tape.constant(uv), tape.constant(big), face).value();
    for (std::size_t i = 0; i < 20; ++i) {
        const auto want = oracle_plane(uv(i, 0), uv(i, 1), big, face);
        for (std::size_t k = 0; k < want.size(); ++k) CHECK(out2(i, k) == doctest::Approx(want[k]).epsilon(1e-12));
    }
}

TEST_CASE("grid vertices reproduce their table entry") {
    const HashGridConfig cfg = small_config();
    std::mt19937_64 rng(3);
    const Tensor table = test::random_tensor(cfg.levels * cfg.table_size, cfg.features, rng);
    const auto res = cfg.resolutions();
    ad::Tape tape(false);
    for (std::size_t l = 0; l < res.size(); ++l)
        for (int x : {0, 1, res[l] / 2, res[l]}) {
            const int y = res[l] - x / 2;
            Tensor uv(1, 2, {static_cast<double>(x) / res[l], static_cast<double>(y) / res[l]});
            const Tensor out = hash_grid_2d(tape.constant(uv), tape.constant(table), cfg).value();
            const std::size_t slot = l * cfg.table_size + hash_index(x, y, res[l], cfg.table_size);
            for (int f = 0; f < cfg.features; ++f)
                CHECK(out(0, l * cfg.features + f) == doctest::Approx(table(slot, f)).epsilon(1e-12));
        }
}

TEST_CASE("encoding is linear along axis segments inside one cell") {
    const TriPlane tp("g", HashGridConfig{});
    ParameterStore store;
    tp.register_params(store, 4, 1.0);
    const auto res = tp.config().resolutions();
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(-0.9, 0.9);
    int tested = 0;
    for (int trial = 0; trial < 200 && tested < 20; ++trial) {
        const int axis = trial % 3;
        Tensor p(3, 3);
        for (int k = 0; k < 3; ++k) p(0, k) = p(1, k) = p(2, k) = u(rng);
        const double h = 1e-4;
        p(1, axis) += h;
        p(2, axis) += 2 * h;
        bool same_cell = true;
        for (int r : res) {
            auto cell = [&](double m) { return std::floor((m + 1.0) * 0.5 * r); };
            if (cell(p(0, axis)) != cell(p(2, axis))) same_cell = false;
        }
        if (!same_cell) continue;
        ++tested;
        ad::Tape tape(false);
        const Tensor f = tp.encode(tape, store, tape.constant(p)).value();
        for (std::size_t k = 0; k < f.cols; ++k) CHECK(std::abs(f(1, k) - 0.5 * (f(0, k) + f(2, k))) <= 1e-6);
    }
    CHECK(tested >= 10);
}

TEST_CASE("out-of-box coordinates clamp to the box") {
    const TriPlane tp("g", small_config());
    ParameterStore store;
    tp.register_params(store, 4, 1.0);
    ad::Tape tape(false);
    const Tensor a = tp.encode(tape, store, tape.constant(Tensor(1, 3, {1.7, -3.0, 0.2}))).value();
    const Tensor b = tp.encode(tape, store, tape.constant(Tensor(1, 3, {1.0, -1.0, 0.2}))).value();
    CHECK(a.data == b.data);
}

TEST_CASE("hash grid gradients match central differences") {
    const TriPlane tp("g", small_config());
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        ParameterStore store;
        tp.register_params(store, seed, 1.0);
        std::mt19937_64 rng(seed + 50);
        store.add("mu", test::random_tensor(6, 3, rng, -0.95, 0.95), ParamGroup::Gaussian);
        const Tensor w = test::random_tensor(6, tp.output_dim(), rng);
        auto loss = [&](ad::Tape& t) {
            return ad::sum(ad::mul(tp.encode(t, store, t.parameter(store, "mu")), t.constant(w)));
        };
        FiniteDiffOptions opts;
        opts.seed = seed;
        opts.eps = 1e-4;  // the lookup is linear per axis inside a cell
        opts.tolerance = 1e-6;
        opts.samples = 24;
        const auto r = finite_diff_check(loss, store, opts);
        INFO(r.worst_parameter << "[" << r.worst_index << "] " << r.worst_analytic << " vs " << r.worst_numeric);
        CHECK(r.max_rel_error <= 1e-6);
    }
}

TEST_CASE("decoder starts at zero and every layer matters") {
    const Mlp mlp("dec", {5, 64, 32, 10});
    ParameterStore store;
    mlp.register_params(store, 1);
    CHECK(mlp.layers() == 3);
    std::mt19937_64 rng(1);
    const Tensor x = test::random_tensor(7, 5, rng);
    {
        ad::Tape tape(false);
        CHECK(mlp.forward(tape, store, tape.constant(x)).value().max_abs() == 0.0);
    }
    store.at(mlp.weight_name(2)).value = test::random_tensor(32, 10, rng);
    Tensor before;
    {
        ad::Tape tape(false);
        before = mlp.forward(tape, store, tape.constant(x)).value();
    }
    for (double& v : store.at(mlp.weight_name(0)).value.data) v *= 2.0;
    ad::Tape tape(false);
    const Tensor after = mlp.forward(tape, store, tape.constant(x)).value();
    CHECK(after.data != before.data);
    CHECK_THROWS_AS(mlp.forward(tape, store, tape.constant(Tensor(1, 4))), UsageError);
}

TEST_CASE("decoder gradients match central differences") {
    const Mlp mlp("dec", {4, 16, 8, 3}, false);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        ParameterStore store;
        mlp.register_params(store, seed);
        std::mt19937_64 rng(seed);
        for (std::size_t l = 0; l < 3; ++l) store.at(mlp.bias_name(l)).value = test::random_tensor(1, store.at(mlp.bias_name(l)).value.cols, rng, -0.3, 0.3);
        store.add("x", test::random_tensor(5, 4, rng), ParamGroup::Gaussian);
        const Tensor w = test::random_tensor(5, 3, rng);
        auto loss = [&](ad::Tape& t) {
            return ad::sum(ad::mul(ad::tanh(mlp.forward(t, store, t.parameter(store, "x"))), t.constant(w)));
        };
        FiniteDiffOptions opts;
        opts.seed = seed;
        opts.eps = 1e-6;
        opts.tolerance = 1e-5;
        CHECK(finite_diff_check(loss, store, opts).max_rel_error <= 1e-5);
    }
}

TEST_CASE("region attention gates conditions") {
    const RegionAttention ra("ra", 6, 4);
    ParameterStore store;
    ra.register_params(store, 2);
    std::mt19937_64 rng(5);
    const Tensor spatial = test::random_tensor(9, 6, rng);
    const Tensor cond(1, 4, {0.4, -1.0, 0.2, 0.8});
    ad::Tape tape(false);
    const Tensor g = ra.gate(tape, store, tape.constant(spatial)).value();
    for (double v : g.data) CHECK(v == 0.5);
    const Tensor out = ra.attend(tape, store, tape.constant(spatial), tape.constant(cond)).value();
    for (std::size_t i = 0; i < 9; ++i)
        for (std::size_t k = 0; k < 4; ++k) CHECK(out(i, k) == cond[k] * 0.5);
    CHECK(ra.attend(tape, store, tape.constant(spatial), tape.constant(Tensor(1, 4))).value().max_abs() == 0.0);
    CHECK_THROWS_AS(ra.attend(tape, store, tape.constant(spatial), tape.constant(Tensor(1, 3))), UsageError);
}

TEST_CASE("attention gradient w.r.t. conditions equals the gate") {
    const RegionAttention ra("ra", 6, 4);
    ParameterStore store;
    ra.register_params(store, 2);
    std::mt19937_64 rng(6);
    for (std::size_t l = 0; l < 2; ++l) {
        Tensor& w = store.at("ra/w" + std::to_string(l)).value;
        w = test::random_tensor(w.rows, w.cols, rng);
    }
    const Tensor spatial = test::random_tensor(1, 6, rng);
    store.add("c", test::random_tensor(1, 4, rng), ParamGroup::Network);
    auto loss = [&](ad::Tape& t) { return ad::sum(ra.attend(t, store, t.constant(spatial), t.parameter(store, "c"))); };
    ad::Tape tape;
    tape.backward(loss(tape));
    ad::Tape fwd(false);
    const Tensor gate = ra.gate(fwd, store, fwd.constant(spatial)).value();
    FiniteDiffOptions opts;
    opts.only = {"c"};
    opts.eps = 1e-6;
    CHECK(finite_diff_check(loss, store, opts).max_rel_error <= 1e-6);
    ad::Tape tape2;
    tape2.backward(loss(tape2));
    for (std::size_t k = 0; k < 4; ++k) CHECK(store.at("c").grad[k] == doctest::Approx(gate[k]).epsilon(1e-12));
}

}
