#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "test_main.hpp"

#include "sysid/data.hpp"
#include "sysid/error.hpp"

#include <filesystem>
#include <fstream>

using namespace sysid;

namespace {

Trajectory ramp(Index n, Index n_u, Index n_y, double delta = 0.1) {
    Matrix u(n, n_u), y(n, n_y);
    for (Index k = 0; k < n; ++k) {
        for (Index j = 0; j < n_u; ++j) u(k, j) = static_cast<double>(100 * j + k);
        for (Index j = 0; j < n_y; ++j) y(k, j) = static_cast<double>(-1000 * (j + 1) - k);
    }
    return make_trajectory(delta, u, y);
}

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("sysid_test_" + name);
}

}  // namespace

TEST_CASE("load_csv reads a three-row file") {
    const auto p = temp_file("three.csv");
    std::ofstream(p) << "t,u1,y1\n0,1,2\n0.1,3,4\n0.2,5,6\n";
    const Trajectory tr = load_csv(p, 1, 1);
    CHECK(tr.size() == 3);
    CHECK(tr.delta == doctest::Approx(0.1));
    CHECK(tr.inputs(2, 0) == 5.0);
    CHECK(tr.outputs(1, 0) == 4.0);
}

TEST_CASE("load_csv error paths") {
    SUBCASE("non-uniform grid") { CHECK_THROWS_AS(parse_csv("t,u1,y1\n0,1,2\n0.1,1,2\n0.25,1,2\n", 1, 1), GridError); }
    SUBCASE("bad header") { CHECK_THROWS_AS(parse_csv("time,u1,y1\n0,1,2\n0.1,1,2\n", 1, 1), SchemaError); }
    SUBCASE("header with wrong channel count") {
        CHECK_THROWS_AS(parse_csv("t,u1,y1\n0,1,2\n0.1,1,2\n", 0, 2), SchemaError);
    }
    SUBCASE("non-finite value carries its row") {
        try {
            parse_csv("t,y1\n0,1\n0.1,nan\n0.2,1\n", 0, 1);
            FAIL("expected DataError");
        } catch (const DataError& e) {
            CHECK(e.row() == 1);
        }
    }
    SUBCASE("too few rows") { CHECK_THROWS_AS(parse_csv("t,y1\n0,1\n", 0, 1), TooShortError); }
}

TEST_CASE("autonomous CSV has no input columns") {
    const Trajectory tr = parse_csv("t,y1,y2\n0,1,2\n0.5,3,4\n", 0, 2);
    CHECK(tr.n_u() == 0);
    CHECK(to_csv(tr).rfind("t,y1,y2\n", 0) == 0);
}

TEST_CASE("csv round trip is byte-identical at 12 significant digits") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> dims(0, 3);
    std::uniform_int_distribution<int> len(2, 60);
    std::uniform_real_distribution<double> dt(1e-3, 5.0);
    std::normal_distribution<double> val(0.0, 1e3);
    for (int trial = 0; trial < 100; ++trial) {
        const Index n_u = dims(rng), n_y = 1 + dims(rng), n = len(rng);
        Matrix u(n, n_u), y(n, n_y);
        for (Index k = 0; k < n; ++k) {
            for (Index j = 0; j < n_u; ++j) u(k, j) = val(rng);
            for (Index j = 0; j < n_y; ++j) y(k, j) = val(rng);
        }
        const Trajectory tr = make_trajectory(dt(rng), u, y, val(rng));
        const std::string first = to_csv(tr);
        const std::string second = to_csv(parse_csv(first, n_u, n_y));
        REQUIRE(first == second);
    }
}

TEST_CASE("split_thirds lengths") {
    auto lengths = [](Index n) {
        auto s = split_thirds(ramp(n, 1, 1));
        return std::array<Index, 3>{s.train.size(), s.dev.size(), s.test.size()};
    };
    CHECK(lengths(12) == std::array<Index, 3>{4, 4, 4});
    CHECK(lengths(14) == std::array<Index, 3>{5, 5, 4});
    CHECK(lengths(13) == std::array<Index, 3>{5, 4, 4});
    CHECK(lengths(12000) == std::array<Index, 3>{4000, 4000, 4000});
    CHECK_THROWS_AS(split_thirds(ramp(5, 1, 1)), TooShortError);
}

TEST_CASE("split_thirds property: near-equal and concatenates to the source") {
    for (Index n = 6; n <= 200; ++n) {
        const Trajectory tr = ramp(n, 2, 1);
        const auto s = split_thirds(tr);
        REQUIRE(std::abs(s.train.size() - s.dev.size()) <= 1);
        REQUIRE(std::abs(s.dev.size() - s.test.size()) <= 1);
        const Trajectory back = concatenate(s);
        REQUIRE(back.outputs == tr.outputs);
        REQUIRE(back.inputs == tr.inputs);
        REQUIRE(back.times == tr.times);
    }
}

TEST_CASE("downsample") {
    const Trajectory tr = ramp(3000, 1, 1, 0.25);
    CHECK(downsample(tr, 1).outputs == tr.outputs);
    const Trajectory d10 = downsample(tr, 10);
    CHECK(d10.size() == 300);
    CHECK(d10.delta == doctest::Approx(2.5));
    CHECK(d10.outputs(3, 0) == tr.outputs(30, 0));
    // ceil(2501/8) counted by hand: rows 0,8,...,2496 -> 313 rows
    Index kept = 0;
    for (Index k = 0; k < 2501; k += 8) ++kept;
    CHECK(kept == 313);
    CHECK(downsample(ramp(2501, 5, 3), 8).size() == 313);
    CHECK_THROWS_AS(downsample(tr, 0), ParameterError);
}

TEST_CASE("downsample composition") {
    for (Index n : {2, 7, 25, 61, 100}) {
        for (Index a : {1, 2, 3}) {
            for (Index b : {1, 2, 4}) {
                const Trajectory tr = ramp(n, 1, 1);
                const Trajectory twice = downsample(downsample(tr, a), b);
                const Trajectory once = downsample(tr, a * b);
                if (n % (a * b) == 1 % (a * b)) {
                    REQUIRE(twice.times.size() == once.times.size());
                    REQUIRE((twice.times - once.times).cwiseAbs().maxCoeff() < 1e-12);
                }
                REQUIRE(twice.size() == ((n + a - 1) / a + b - 1) / b);
            }
        }
    }
}

TEST_CASE("normalize") {
    SUBCASE("constant channel") {
        Matrix u(4, 0), y = Matrix::Constant(4, 1, 5.0);
        const auto n = normalize(make_trajectory(1.0, u, y));
        CHECK(n.stats.constant_channel);
        CHECK(n.trajectory.outputs.cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("already standardized") {
        Matrix u(2, 0), y(2, 1);
        y << -1, 1;
        const auto n = normalize(make_trajectory(1.0, u, y));
        CHECK_FALSE(n.stats.constant_channel);
        CHECK(n.trajectory.outputs(0, 0) == doctest::Approx(-1.0));
        CHECK(n.trajectory.outputs(1, 0) == doctest::Approx(1.0));
    }
    SUBCASE("round trip on random data") {
        std::mt19937_64 rng(3);
        Matrix u = testutil::random_matrix(1000, 3, rng, 50.0), y = testutil::random_matrix(1000, 2, rng, 1e-3);
        u.col(1).array() += 300.0;
        const Trajectory tr = make_trajectory(0.01, u, y);
        const auto n = normalize(tr);
        CHECK(n.trajectory.outputs.colwise().mean().cwiseAbs().maxCoeff() < 1e-12);
        const Trajectory back = denormalize(n.trajectory, n.stats);
        CHECK((back.inputs - tr.inputs).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((back.outputs - tr.outputs).cwiseAbs().maxCoeff() < 1e-10);
    }
    SUBCASE("split normalization uses training statistics only") {
        Trajectory tr = ramp(30, 1, 1);
        NormStats st;
        const auto ns = normalize_split(split_thirds(tr), &st);
        CHECK(st.output_mean(0) == doctest::Approx(split_thirds(tr).train.outputs.mean()));
        CHECK(ns.train.outputs.mean() == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(ns.test.outputs.mean() != doctest::Approx(0.0));
    }
}

TEST_CASE("windows") {
    CHECK(windows(ramp(10, 1, 1), 1, 1, 1).size() == 9);
    CHECK_THROWS_AS(windows(ramp(10, 1, 1), 6, 5, 1), TooShortError);

    const auto ws = windows(ramp(4, 1, 1), 1, 2, 1);
    REQUIRE(ws.size() == 2);
    CHECK(ws[0].past_outputs(0, 0) == -1000.0);
    CHECK(ws[0].future_outputs(0, 0) == -1001.0);
    CHECK(ws[0].future_outputs(1, 0) == -1002.0);
    CHECK(ws[0].past_inputs(0, 0) == 0.0);
    CHECK(ws[0].future_inputs(1, 0) == 2.0);
}

TEST_CASE("windows match a brute-force enumerator") {
    for (Index n : {20, 57, 100}) {
        for (Index n_p : {1, 3, 5}) {
            for (Index n_steps : {1, 5}) {
                for (Index stride : {1, 2, 7}) {
                    const Trajectory tr = ramp(n, 2, 2);
                    const auto ws = windows(tr, n_p, n_steps, stride);
                    std::vector<Index> starts;
                    for (Index k = n_p; k + n_steps <= n; k += stride) starts.push_back(k);
                    REQUIRE(ws.size() == starts.size());
                    REQUIRE(static_cast<Index>(ws.size()) == window_count(n, n_p, n_steps, stride));
                    for (std::size_t i = 0; i < ws.size(); ++i) {
                        const Index k = starts[i];
                        REQUIRE(ws[i].start == k);
                        REQUIRE(ws[i].past_outputs == tr.outputs.middleRows(k - n_p, n_p));
                        REQUIRE(ws[i].future_outputs == tr.outputs.middleRows(k, n_steps));
                        REQUIRE(ws[i].future_inputs == tr.inputs.middleRows(k, n_steps));
                    }
                }
            }
        }
    }
    CHECK(windows(ramp(100, 1, 1), 5, 5, 1).size() == 91);
}

TEST_CASE("stack lays windows out as columns") {
    const auto ws = windows(ramp(10, 1, 2), 2, 3, 1);
    const WindowBatch b = stack(ws);
    CHECK(b.batch() == 6);
    CHECK(b.steps() == 3);
    CHECK(b.past_outputs.rows() == 4);
    CHECK(b.past_outputs(2, 1) == ws[1].past_outputs(1, 0));
    CHECK(b.future_outputs[2](1, 4) == ws[4].future_outputs(2, 1));
    CHECK(b.future_inputs[0](0, 3) == ws[3].future_inputs(0, 0));
}
