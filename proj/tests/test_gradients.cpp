#include <vector>

#include "doctest.h"
#include "gradcheck_util.hpp"
#include "mdsep/gating.hpp"
#include "mdsep/layers.hpp"
#include "mdsep/rng.hpp"

using namespace mdsep;

namespace {

Tensor<double> rand_t(const std::vector<std::size_t>& shape, Rng& rng) {
    Tensor<double> t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
    return t;
}

// Scalar loss used to probe layer outputs: weighted sum with fixed random
// weights, so every output element contributes a distinct gradient.
struct Probe {
    Tensor<double> w;
    explicit Probe(const std::vector<std::size_t>& shape, Rng& rng) : w(rand_t(shape, rng)) {}
    double operator()(const Tensor<double>& out) const {
        double s = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out[i];
        return s;
    }
};

constexpr double kTol = 1e-4;

}  // namespace

TEST_CASE("gradcheck: standard convolution") {
    Rng rng(100);
    for (std::size_t stride : {std::size_t(1), std::size_t(2)}) {
        auto x = rand_t({2, 2, 5, 5}, rng);
        auto k = rand_t({3, 3, 2, 3}, rng);
        auto out0 = conv2d_forward(x, k, stride);
        Probe probe(out0.shape(), rng);
        auto loss = [&] { return probe(conv2d_forward(x, k, stride)); };
        Tensor<double> dx, dk;
        conv2d_backward(x, k, stride, probe.w, &dx, &dk);
        CHECK(gradcheck::check_param(x, dx, loss) < kTol);
        CHECK(gradcheck::check_param(k, dk, loss) < kTol);
    }
}

TEST_CASE("gradcheck: depthwise convolution") {
    Rng rng(101);
    for (std::size_t stride : {std::size_t(1), std::size_t(2)}) {
        auto x = rand_t({2, 3, 5, 5}, rng);
        auto k = rand_t({3, 3, 3}, rng);
        auto out0 = depthwise_forward(x, k, stride);
        Probe probe(out0.shape(), rng);
        auto loss = [&] { return probe(depthwise_forward(x, k, stride)); };
        Tensor<double> dx, dk;
        depthwise_backward(x, k, stride, probe.w, &dx, &dk);
        CHECK(gradcheck::check_param(x, dx, loss) < kTol);
        CHECK(gradcheck::check_param(k, dk, loss) < kTol);
    }
}

TEST_CASE("gradcheck: depthwise gradient equals block-diagonal conv gradient slice") {
    Rng rng(102);
    auto x = rand_t({1, 3, 4, 4}, rng);
    auto dw = rand_t({3, 3, 3}, rng);
    Tensor<double> blk({3, 3, 3, 3}, 0.0);
    for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx)
            for (std::size_t m = 0; m < 3; ++m) blk.at4(ky, kx, m, m) = dw.at3(ky, kx, m);
    auto up = rand_t({1, 3, 4, 4}, rng);

    Tensor<double> dx1, dk1;
    depthwise_backward(x, dw, 1, up, &dx1, &dk1);
    Tensor<double> dx2, dk2;
    conv2d_backward(x, blk, 1, up, &dx2, &dk2);
    for (std::size_t i = 0; i < dx1.size(); ++i)
        CHECK(std::abs(dx1[i] - dx2[i]) < 1e-12);
    for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx)
            for (std::size_t m = 0; m < 3; ++m)
                CHECK(std::abs(dk1.at3(ky, kx, m) - dk2.at4(ky, kx, m, m)) < 1e-12);
}

TEST_CASE("gradcheck: pointwise convolution incl strided projection") {
    Rng rng(103);
    for (std::size_t stride : {std::size_t(1), std::size_t(2)}) {
        auto x = rand_t({2, 3, 4, 4}, rng);
        auto k = rand_t({3, 4}, rng);
        auto out0 = pointwise_forward(x, k, stride);
        Probe probe(out0.shape(), rng);
        auto loss = [&] { return probe(pointwise_forward(x, k, stride)); };
        Tensor<double> dx, dk;
        pointwise_backward(x, k, stride, probe.w, &dx, &dk);
        CHECK(gradcheck::check_param(x, dx, loss) < kTol);
        CHECK(gradcheck::check_param(k, dk, loss) < kTol);
    }
}

TEST_CASE("gradcheck: batchnorm train mode") {
    Rng rng(104);
    auto x = rand_t({3, 2, 4, 4}, rng);
    BnParams<double> p(2);
    p.scale[0] = 1.3;
    p.scale[1] = 0.7;
    p.shift[0] = -0.2;
    p.shift[1] = 0.4;
    Probe probe(x.shape(), rng);
    auto loss = [&] {
        BnParams<double> q = p;  // forward mutates running stats; keep p pristine
        return probe(batchnorm_forward(x, q, true));
    };
    BnParams<double> q = p;
    BnCache<double> cache;
    batchnorm_forward(x, q, true, &cache);
    Tensor<double> dx, dscale, dshift;
    batchnorm_backward(p, cache, probe.w, &dx, &dscale, &dshift);
    CHECK(gradcheck::check_param(x, dx, loss) < kTol);
    CHECK(gradcheck::check_param(p.scale, dscale, loss) < kTol);
    CHECK(gradcheck::check_param(p.shift, dshift, loss) < kTol);
}

TEST_CASE("gradcheck: relu") {
    Rng rng(105);
    // keep values away from the kink so finite differences are clean
    Tensor<double> x({40});
    for (std::size_t i = 0; i < x.size(); ++i) {
        double v = rng.uniform(0.1, 1.0);
        if (rng.uniform() < 0.5) v = -v;
        x[i] = v;
    }
    Probe probe(x.shape(), rng);
    auto loss = [&] { return probe(relu_forward(x)); };
    auto fwd = relu_forward(x);
    auto dx = relu_backward(fwd, probe.w);
    CHECK(gradcheck::check_param(x, dx, loss) < kTol);
}

TEST_CASE("gradcheck: global average pooling") {
    Rng rng(106);
    auto x = rand_t({2, 3, 4, 5}, rng);
    auto out0 = global_avg_pool(x);
    Probe probe(out0.shape(), rng);
    auto loss = [&] { return probe(global_avg_pool(x)); };
    auto dx = global_avg_pool_backward(x.shape(), probe.w);
    CHECK(gradcheck::check_param(x, dx, loss) < kTol);
}

TEST_CASE("gradcheck: linear") {
    Rng rng(107);
    auto x = rand_t({3, 4}, rng);
    auto w = rand_t({4, 5}, rng);
    auto b = rand_t({5}, rng);
    Probe probe({3, 5}, rng);
    auto loss = [&] { return probe(linear_forward(x, w, b)); };
    Tensor<double> dx, dw, db;
    linear_backward(x, w, probe.w, &dx, &dw, &db);
    CHECK(gradcheck::check_param(x, dx, loss) < kTol);
    CHECK(gradcheck::check_param(w, dw, loss) < kTol);
    CHECK(gradcheck::check_param(b, db, loss) < kTol);
}

TEST_CASE("gradcheck: softmax cross-entropy") {
    Rng rng(108);
    auto logits = rand_t({4, 6}, rng);
    std::vector<int> labels = {2, 0, 5, 3};
    auto loss = [&] { return static_cast<double>(softmax_xent(logits, labels).loss); };
    auto r = softmax_xent(logits, labels);
    auto dlogits = softmax_xent_backward(r.probs, labels);
    CHECK(gradcheck::check_param(logits, dlogits, loss) < kTol);
}

TEST_CASE("gradcheck: gate network (both batch semantics)") {
    Rng rng(109);
    const std::size_t Tn = 3, C = 4;
    for (bool after_mean : {false, true}) {
        Gate<double> gate = gate_init<double>(C, Tn, rng);
        // move fc2 off the zero init so the softmax Jacobian is non-trivial
        for (std::size_t i = 0; i < gate.w2.size(); ++i) gate.w2[i] = rng.uniform(-0.5, 0.5);
        for (std::size_t i = 0; i < gate.b2.size(); ++i) gate.b2[i] = rng.uniform(-0.2, 0.2);

        auto featmap = rand_t({2, C, 3, 3}, rng);
        std::vector<Tensor<double>> branches;
        for (std::size_t i = 0; i < Tn; ++i) branches.push_back(rand_t({2, C, 3, 3}, rng));

        GateCache<double>* nocache = nullptr;
        auto out0 = gate_forward(gate, featmap, branches, after_mean, nocache);
        Probe probe(out0.shape(), rng);
        auto loss = [&] {
            return probe(gate_forward(gate, featmap, branches, after_mean, nocache));
        };

        GateCache<double> cache;
        gate_forward(gate, featmap, branches, after_mean, &cache);
        auto grads = gate_backward(gate, cache, branches, probe.w);

        CHECK(gradcheck::check_param(gate.w1, grads.dw1, loss) < kTol);
        CHECK(gradcheck::check_param(gate.b1, grads.db1, loss) < kTol);
        CHECK(gradcheck::check_param(gate.w2, grads.dw2, loss) < kTol);
        CHECK(gradcheck::check_param(gate.b2, grads.db2, loss) < kTol);

        // feature-map gradient: add the branch paths when a branch aliases x
        CHECK(gradcheck::check_param(featmap, grads.dfeatmap, loss) < kTol);
    }
}

TEST_CASE("zero upstream gradient yields zero gradients") {
    Rng rng(110);
    auto x = rand_t({1, 2, 4, 4}, rng);
    auto k = rand_t({3, 3, 2, 2}, rng);
    Tensor<double> zero({1, 2, 4, 4}, 0.0);
    Tensor<double> dx, dk;
    conv2d_backward(x, k, 1, zero, &dx, &dk);
    for (std::size_t i = 0; i < dx.size(); ++i) CHECK(dx[i] == 0.0);
    for (std::size_t i = 0; i < dk.size(); ++i) CHECK(dk[i] == 0.0);
}
