#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mdsep/gating.hpp"
#include "mdsep/layers.hpp"
#include "mdsep/rng.hpp"

namespace mdsep {

// Runtime finite-difference verification of every backward implementation,
// in 64-bit with central differences. Used by the command-line gradcheck and
// callable from anywhere that wants a numerical self-test of the build.

struct GradcheckResult {
    std::string op;
    double max_rel_err = 0.0;
    bool pass = false;
};

namespace gradcheck_detail {

inline Tensor<double> rand_t(const std::vector<std::size_t>& shape, Rng& rng) {
    Tensor<double> t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
    return t;
}

inline double rel_err(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-6});
    return std::abs(a - b) / denom;
}

// max relative error between analytic and central-difference gradients of a
// scalar loss with respect to every entry of param
inline double check(Tensor<double>& param, const Tensor<double>& analytic,
                    const std::function<double()>& loss, double eps = 1e-4) {
    double worst = 0.0;
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double keep = param[i];
        param[i] = keep + eps;
        const double up = loss();
        param[i] = keep - eps;
        const double dn = loss();
        param[i] = keep;
        worst = std::max(worst, rel_err((up - dn) / (2 * eps), analytic[i]));
    }
    return worst;
}

}  // namespace gradcheck_detail

// inject_fault flips the sign of one gradient path (the standard-conv input
// gradient) to prove the checker actually detects broken backward code.
inline std::vector<GradcheckResult> run_gradcheck_suite(bool inject_fault = false) {
    using namespace gradcheck_detail;
    constexpr double kTol = 1e-4;
    std::vector<GradcheckResult> results;
    Rng rng(7777);
    auto report = [&](const std::string& op, double err) {
        results.push_back({op, err, err < kTol});
    };

    {
        auto x = rand_t({2, 2, 5, 5}, rng);
        auto k = rand_t({3, 3, 2, 3}, rng);
        auto w = rand_t(conv2d_forward(x, k, 1).shape(), rng);
        auto loss = [&] {
            auto out = conv2d_forward(x, k, 1);
            double s = 0;
            for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out[i];
            return s;
        };
        Tensor<double> dx, dk;
        conv2d_backward(x, k, 1, w, &dx, &dk);
        if (inject_fault)
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = -dx[i];
        report("conv2d/dx", check(x, dx, loss));
        report("conv2d/dk", check(k, dk, loss));
    }
    {
        auto x = rand_t({2, 3, 5, 5}, rng);
        auto k = rand_t({3, 3, 3}, rng);
        auto w = rand_t(depthwise_forward(x, k, 2).shape(), rng);
        auto loss = [&] {
            auto out = depthwise_forward(x, k, 2);
            double s = 0;
            for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out[i];
            return s;
        };
        Tensor<double> dx, dk;
        depthwise_backward(x, k, 2, w, &dx, &dk);
        report("depthwise/dx", check(x, dx, loss));
        report("depthwise/dk", check(k, dk, loss));
    }
    {
        auto x = rand_t({2, 3, 4, 4}, rng);
        auto k = rand_t({3, 4}, rng);
        auto w = rand_t(pointwise_forward(x, k, 2).shape(), rng);
        auto loss = [&] {
            auto out = pointwise_forward(x, k, 2);
            double s = 0;
            for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out[i];
            return s;
        };
        Tensor<double> dx, dk;
        pointwise_backward(x, k, 2, w, &dx, &dk);
        report("pointwise/dx", check(x, dx, loss));
        report("pointwise/dk", check(k, dk, loss));
    }
    {
        auto x = rand_t({3, 2, 4, 4}, rng);
        BnParams<double> p(2);
        p.scale[0] = 1.2;
        p.scale[1] = 0.8;
        p.shift[0] = 0.3;
        auto w = rand_t(x.shape(), rng);
        auto loss = [&] {
            BnParams<double> q = p;
            auto out = batchnorm_forward(x, q, true);
            double s = 0;
            for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out[i];
            return s;
        };
        BnParams<double> q = p;
        BnCache<double> cache;
        batchnorm_forward(x, q, true, &cache);
        Tensor<double> dx, dscale, dshift;
        batchnorm_backward(p, cache, w, &dx, &dscale, &dshift);
        report("batchnorm/dx", check(x, dx, loss));
        report("batchnorm/dscale", check(p.scale, dscale, loss));
        report("batchnorm/dshift", check(p.shift, dshift, loss));
    }
    {
        Tensor<double> x({30});
        for (std::size_t i = 0; i < x.size(); ++i) {
            double v = rng.uniform(0.1, 1.0);
            x[i] = rng.uniform() < 0.5 ? -v : v;
        }
        auto w = rand_t(x.shape(), rng);
        auto loss = [&] {
            auto out = relu_forward(x);
            double s = 0;
            for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out[i];
            return s;
        };
        auto dx = relu_backward(relu_forward(x), w);
        report("relu/dx", check(x, dx, loss));
    }
    {
        auto x = rand_t({2, 3, 4, 5}, rng);
        auto w = rand_t({2, 3}, rng);
        auto loss = [&] {
            auto out = global_avg_pool(x);
            double s = 0;
            for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out[i];
            return s;
        };
        auto dx = global_avg_pool_backward(x.shape(), w);
        report("global_avg_pool/dx", check(x, dx, loss));
    }
    {
        auto x = rand_t({3, 4}, rng);
        auto wt = rand_t({4, 5}, rng);
        auto b = rand_t({5}, rng);
        auto w = rand_t({3, 5}, rng);
        auto loss = [&] {
            auto out = linear_forward(x, wt, b);
            double s = 0;
            for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out[i];
            return s;
        };
        Tensor<double> dx, dw, db;
        linear_backward(x, wt, w, &dx, &dw, &db);
        report("linear/dx", check(x, dx, loss));
        report("linear/dw", check(wt, dw, loss));
        report("linear/db", check(b, db, loss));
    }
    {
        auto logits = rand_t({4, 6}, rng);
        std::vector<int> labels = {1, 5, 0, 3};
        auto loss = [&] { return static_cast<double>(softmax_xent(logits, labels).loss); };
        auto r = softmax_xent(logits, labels);
        auto dlogits = softmax_xent_backward(r.probs, labels);
        report("softmax_xent/dlogits", check(logits, dlogits, loss));
    }
    for (bool after_mean : {false, true}) {
        const std::size_t Tn = 3, C = 4;
        Gate<double> gate = gate_init<double>(C, Tn, rng);
        for (std::size_t i = 0; i < gate.w2.size(); ++i) gate.w2[i] = rng.uniform(-0.5, 0.5);
        for (std::size_t i = 0; i < gate.b2.size(); ++i) gate.b2[i] = rng.uniform(-0.2, 0.2);
        auto featmap = rand_t({2, C, 3, 3}, rng);
        std::vector<Tensor<double>> branches;
        for (std::size_t i = 0; i < Tn; ++i) branches.push_back(rand_t({2, C, 3, 3}, rng));
        auto w = rand_t(branches[0].shape(), rng);
        GateCache<double>* nocache = nullptr;
        auto loss = [&] {
            auto out = gate_forward(gate, featmap, branches, after_mean, nocache);
            double s = 0;
            for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out[i];
            return s;
        };
        GateCache<double> cache;
        gate_forward(gate, featmap, branches, after_mean, &cache);
        auto g = gate_backward(gate, cache, branches, w);
        const std::string tag = after_mean ? "gate_mean/" : "gate/";
        report(tag + "dw1", check(gate.w1, g.dw1, loss));
        report(tag + "db1", check(gate.b1, g.db1, loss));
        report(tag + "dw2", check(gate.w2, g.dw2, loss));
        report(tag + "db2", check(gate.b2, g.db2, loss));
        report(tag + "dfeatmap", check(featmap, g.dfeatmap, loss));
    }
    return results;
}

}  // namespace mdsep
