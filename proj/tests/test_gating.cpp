#include <vector>

#include "doctest.h"
#include "mdsep/gating.hpp"
#include "mdsep/rng.hpp"

using namespace mdsep;

namespace {

Tensor<double> rand_t(const std::vector<std::size_t>& shape, Rng& rng) {
    Tensor<double> t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
    return t;
}

}  // namespace

TEST_CASE("zero-initialized gate is the uniform mixture") {
    Rng rng(200);
    const std::size_t Tn = 4, C = 6;
    Gate<double> gate = gate_init<double>(C, Tn, rng);
    auto featmap = rand_t({3, C, 4, 4}, rng);
    std::vector<Tensor<double>> branches;
    for (std::size_t i = 0; i < Tn; ++i) branches.push_back(rand_t({3, C, 4, 4}, rng));

    GateCache<double> cache;
    auto out = gate_forward(gate, featmap, branches, false, &cache);
    for (std::size_t i = 0; i < Tn; ++i) CHECK(cache.scales[i] == doctest::Approx(0.25).epsilon(1e-12));
    for (std::size_t e = 0; e < out.size(); ++e) {
        double mean = 0.0;
        for (std::size_t i = 0; i < Tn; ++i) mean += branches[i][e];
        mean /= Tn;
        CHECK(out[e] == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("single-domain gate passes its branch through") {
    Rng rng(201);
    Gate<double> gate = gate_init<double>(5, 1, rng);
    auto featmap = rand_t({2, 5, 3, 3}, rng);
    std::vector<Tensor<double>> branches = {rand_t({2, 5, 3, 3}, rng)};
    GateCache<double> cache;
    auto out = gate_forward(gate, featmap, branches, false, &cache);
    CHECK(cache.scales[0] == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t e = 0; e < out.size(); ++e)
        CHECK(out[e] == doctest::Approx(branches[0][e]).epsilon(1e-12));
}

TEST_CASE("random gates stay on the simplex and inside the convex hull") {
    Rng rng(202);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t Tn = 2 + rng.next_below(4);
        const std::size_t C = 3 + rng.next_below(5);
        Gate<double> gate = gate_init<double>(C, Tn, rng);
        for (std::size_t i = 0; i < gate.w2.size(); ++i) gate.w2[i] = rng.uniform(-1.0, 1.0);
        for (std::size_t i = 0; i < gate.b2.size(); ++i) gate.b2[i] = rng.uniform(-1.0, 1.0);
        auto featmap = rand_t({2, C, 3, 3}, rng);
        std::vector<Tensor<double>> branches;
        for (std::size_t i = 0; i < Tn; ++i) branches.push_back(rand_t({2, C, 3, 3}, rng));

        const bool after_mean = trial % 2 == 0;
        GateCache<double> cache;
        auto out = gate_forward(gate, featmap, branches, after_mean, &cache);

        double sum = 0.0;
        for (std::size_t i = 0; i < Tn; ++i) {
            CHECK(cache.scales[i] >= 0.0);
            sum += cache.scales[i];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));

        for (std::size_t e = 0; e < out.size(); ++e) {
            double lo = branches[0][e], hi = branches[0][e];
            for (std::size_t i = 1; i < Tn; ++i) {
                lo = std::min(lo, branches[i][e]);
                hi = std::max(hi, branches[i][e]);
            }
            CHECK(out[e] >= lo - 1e-9);
            CHECK(out[e] <= hi + 1e-9);
        }
    }
}

TEST_CASE("gate rejects mismatched branch count") {
    Rng rng(203);
    Gate<double> gate = gate_init<double>(4, 3, rng);
    auto featmap = rand_t({1, 4, 3, 3}, rng);
    std::vector<Tensor<double>> branches = {rand_t({1, 4, 3, 3}, rng)};
    GateCache<double>* nocache = nullptr;
    CHECK_THROWS_AS(gate_forward(gate, featmap, branches, false, nocache), ShapeError);
}
