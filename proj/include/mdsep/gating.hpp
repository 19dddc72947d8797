#pragma once

#include <vector>

#include "mdsep/layers.hpp"
#include "mdsep/rng.hpp"
#include "mdsep/tensor.hpp"

namespace mdsep {

// Softmax gate controller for soft sharing of depthwise filters. The gate sees
// the previous layer's feature map, reduces it to channel-wise means, runs a
// two-layer ReLU net, and emits one simplex vector s over the T domains. The
// gated layer output is the convex mixture sum_i s_i * branch_i fed to the
// shared pointwise convolution.

template <typename T>
struct Gate {
    Tensor<T> w1, b1;  // [C, Hg], [Hg]
    Tensor<T> w2, b2;  // [Hg, T], [T]

    std::size_t in_channels() const { return w1.dim(0); }
    std::size_t hidden() const { return w1.dim(1); }
    std::size_t num_domains() const { return w2.dim(1); }
};

inline std::size_t gate_hidden_size(std::size_t channels) {
    return std::max<std::size_t>(4, channels / 4);
}

// fc2 starts at zero so the untrained gate is exactly the uniform mixture.
template <typename T>
Gate<T> gate_init(std::size_t channels, std::size_t num_domains, Rng& rng) {
    Gate<T> g;
    const std::size_t hg = gate_hidden_size(channels);
    g.w1 = he_init<T>({channels, hg}, channels, rng);
    g.b1 = Tensor<T>({hg}, T(0));
    g.w2 = Tensor<T>({hg, num_domains}, T(0));
    g.b2 = Tensor<T>({num_domains}, T(0));
    return g;
}

template <typename T>
struct GateCache {
    Tensor<T> means;        // [N, C]
    Tensor<T> hidden;       // [N, Hg], post-ReLU
    Tensor<T> logits;       // [N, T]
    Tensor<T> probs;        // [N, T] (softmax-then-mean mode only)
    Tensor<T> scales;       // [T], the simplex vector actually applied
    std::vector<std::size_t> featmap_shape;
    bool softmax_after_mean = false;
    bool valid = false;
};

// Batch semantics: per-example channel means and controller, then either the
// per-example softmaxes averaged into one simplex vector (default) or one
// softmax of the batch-mean logits (softmax_after_mean). Both yield a single
// per-layer simplex vector as in the per-layer scale formulation.
template <typename T>
Tensor<T> gate_forward(const Gate<T>& gate, const Tensor<T>& featmap,
                       const std::vector<Tensor<T>>& branches, bool softmax_after_mean,
                       GateCache<T>* cache) {
    const std::size_t Tn = gate.num_domains();
    if (branches.size() != Tn) throw ShapeError("gate_forward: branch count != gate domains");
    for (const auto& b : branches)
        if (!b.same_shape(branches[0])) throw ShapeError("gate_forward: branch shape mismatch");
    if (featmap.dim(1) != gate.in_channels())
        throw ShapeError("gate_forward: feature map channels != gate input");

    const std::size_t N = featmap.dim(0);
    Tensor<T> means = global_avg_pool(featmap);
    Tensor<T> pre = linear_forward(means, gate.w1, gate.b1);
    Tensor<T> hidden = relu_forward(pre);
    Tensor<T> logits = linear_forward(hidden, gate.w2, gate.b2);

    Tensor<T> scales({Tn}, T(0));
    Tensor<T> probs;
    if (softmax_after_mean) {
        Tensor<T> zbar({std::size_t(1), Tn}, T(0));
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < Tn; ++i) zbar.at2(0, i) += logits.at2(n, i) / T(N);
        Tensor<T> s = softmax_rows(zbar);
        for (std::size_t i = 0; i < Tn; ++i) scales[i] = s.at2(0, i);
    } else {
        probs = softmax_rows(logits);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < Tn; ++i) scales[i] += probs.at2(n, i) / T(N);
    }

    Tensor<T> out(branches[0].shape(), T(0));
    for (std::size_t i = 0; i < Tn; ++i) axpy_inplace(out, scales[i], branches[i]);

    if (cache) {
        cache->means = std::move(means);
        cache->hidden = std::move(hidden);
        cache->logits = std::move(logits);
        cache->probs = std::move(probs);
        cache->scales = scales;
        cache->featmap_shape = featmap.shape();
        cache->softmax_after_mean = softmax_after_mean;
        cache->valid = true;
    }
    return out;
}

template <typename T>
struct GateGrads {
    Tensor<T> dw1, db1, dw2, db2;
    Tensor<T> dfeatmap;  // gradient through the channel-means path only
    Tensor<T> dscales;   // [T], gradient of loss w.r.t. the mixture scales
};

// Gradient of the mixed output w.r.t. gate parameters and the gate's feature
// map input. The gradient flowing into branch i is scales[i] * dout; the
// caller applies that when backpropping each depthwise branch.
template <typename T>
GateGrads<T> gate_backward(const Gate<T>& gate, const GateCache<T>& cache,
                           const std::vector<Tensor<T>>& branches, const Tensor<T>& dout) {
    if (!cache.valid) throw StateError("gate_backward without cached forward");
    const std::size_t Tn = gate.num_domains();
    const std::size_t N = cache.means.dim(0);

    GateGrads<T> g;
    g.dscales = Tensor<T>({Tn}, T(0));
    for (std::size_t i = 0; i < Tn; ++i) {
        double acc = 0.0;
        const Tensor<T>& b = branches[i];
        for (std::size_t e = 0; e < b.size(); ++e) acc += static_cast<double>(dout[e]) * b[e];
        g.dscales[i] = static_cast<T>(acc);
    }

    Tensor<T> dlogits({N, Tn});
    if (cache.softmax_after_mean) {
        // s = softmax(zbar); dzbar_j = s_j (ds_j - sum_k ds_k s_k); dz = dzbar / N
        double dot = 0.0;
        for (std::size_t k = 0; k < Tn; ++k)
            dot += static_cast<double>(g.dscales[k]) * cache.scales[k];
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t j = 0; j < Tn; ++j)
                dlogits.at2(n, j) = cache.scales[j] *
                                    (g.dscales[j] - static_cast<T>(dot)) / static_cast<T>(N);
    } else {
        // s = mean_n softmax(z_n); dp_n = ds / N, then per-row softmax Jacobian.
        for (std::size_t n = 0; n < N; ++n) {
            double dot = 0.0;
            for (std::size_t k = 0; k < Tn; ++k)
                dot += static_cast<double>(g.dscales[k]) / N * cache.probs.at2(n, k);
            for (std::size_t j = 0; j < Tn; ++j)
                dlogits.at2(n, j) =
                    cache.probs.at2(n, j) * (g.dscales[j] / static_cast<T>(N) - static_cast<T>(dot));
        }
    }

    Tensor<T> dhidden;
    linear_backward(cache.hidden, gate.w2, dlogits, &dhidden, &g.dw2, &g.db2);
    Tensor<T> dpre = relu_backward(cache.hidden, dhidden);
    Tensor<T> dmeans;
    linear_backward(cache.means, gate.w1, dpre, &dmeans, &g.dw1, &g.db1);
    g.dfeatmap = global_avg_pool_backward(cache.featmap_shape, dmeans);
    return g;
}

enum class GateRegion { early, middle, late };

inline const char* gate_region_name(GateRegion r) {
    switch (r) {
        case GateRegion::early: return "early";
        case GateRegion::middle: return "middle";
        default: return "late";
    }
}

}  // namespace mdsep
