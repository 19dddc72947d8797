#include <cstdio>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "mdsep/model.hpp"
#include "mdsep/optim.hpp"

using namespace mdsep;

namespace {

Tensor<float> rand_images(std::size_t n, std::size_t c, std::size_t hw, Rng& rng) {
    Tensor<float> t({n, c, hw, hw});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform());
    return t;
}

ModelConfig tiny_config(SharingMode mode) {
    ModelConfig c;
    c.blocks = {{4, 1}, {6, 1}};
    c.stem_width = 4;
    c.input_channels = 2;
    c.input_resolution = 8;
    c.mode = mode;
    c.default_num_classes = 3;
    return c;
}

std::size_t handle_scalars(const ParamHandle& h) {
    if (!h.is_dw_slice) return h.tensor->size();
    return h.tensor->size() / h.tensor->dim(3);
}

void apply_step(const ParamHandle& h, const Tensor<float>& g, MomentumState& ms, double lr) {
    if (h.is_dw_slice) {
        Tensor<float> sl = dw_stack_slice(*h.tensor, h.slot);
        sgd_step(h.name, sl, g, ms, lr, 0.9, 0.0);
        dw_stack_set_slice(*h.tensor, h.slot, sl);
    } else {
        sgd_step(h.name, *h.tensor, g, ms, lr, 0.9, 0.0);
    }
}

}  // namespace

TEST_CASE("desk backbone: 1 stem + 12 separable layers + 2 projections") {
    auto cfg = desk_config();
    CHECK(cfg.num_sep_layers() == 12);
    auto plan = layer_plan(cfg);
    REQUIRE(plan.size() == 12);
    auto projs = projection_plan(cfg);
    REQUIRE(projs.size() == 2);
    CHECK(plan[0].in_ch == 16);
    CHECK(plan[0].stride == 1);
    CHECK(plan[4].in_ch == 16);
    CHECK(plan[4].out_ch == 32);
    CHECK(plan[4].stride == 2);
    CHECK(plan[8].in_ch == 32);
    CHECK(plan[8].out_ch == 64);
    CHECK(plan[8].stride == 2);
    CHECK(plan.back().is_last);
    CHECK(projs[0].at_layer == 4);
    CHECK(projs[1].at_layer == 8);
    for (std::size_t l = 0; l + 1 < plan.size(); ++l) CHECK(plan[l].out_ch == plan[l + 1].in_ch);
}

TEST_CASE("full-scale backbone has 26 weight layers") {
    auto cfg = reference_config();
    // stem conv + separable layers + classifier
    CHECK(1 + cfg.num_sep_layers() + 1 == 26);
    CHECK(cfg.blocks[0].width * 2 == cfg.blocks[1].width);
    CHECK(cfg.blocks[1].width * 2 == cfg.blocks[2].width);
}

TEST_CASE("build and domain registration are seed deterministic") {
    auto cfg = desk_config();
    Rng r1(42), r2(42), r3(43);
    Model a = Model::build_base(cfg, r1);
    Model b = Model::build_base(cfg, r2);
    Model c = Model::build_base(cfg, r3);
    a.add_domain({"base", 10, 1e-4}, false, r1);
    b.add_domain({"base", 10, 1e-4}, false, r2);
    c.add_domain({"base", 10, 1e-4}, false, r3);
    CHECK(a.checksums() == b.checksums());
    CHECK(a.checksums() != c.checksums());
}

TEST_CASE("domain added from base reproduces the base forward pass") {
    for (SharingMode mode : {SharingMode::share_pointwise, SharingMode::individual,
                             SharingMode::share_depthwise, SharingMode::classifier_only}) {
        Rng rng(7);
        Model m = Model::build_base(tiny_config(mode), rng);
        m.add_domain({"base", 3, 1e-4}, false, rng);
        m.add_domain({"new", 3, 1e-4}, true, rng);
        Rng drng(8);
        auto x = rand_images(2, 2, 8, drng);
        auto l0 = m.forward(x, 0, false);
        auto l1 = m.forward(x, 1, false);
        REQUIRE(l0.same_shape(l1));
        // feature paths are bit-identical; only the classifier head differs
        ForwardCache c0, c1;
        m.forward(x, 0, false, &c0);
        m.forward(x, 1, false, &c1);
        for (std::size_t i = 0; i < c0.gap_out.size(); ++i) CHECK(c0.gap_out[i] == c1.gap_out[i]);
    }
}

TEST_CASE("duplicate domain name is rejected") {
    Rng rng(9);
    Model m = Model::build_base(tiny_config(SharingMode::share_pointwise), rng);
    m.add_domain({"base", 3, 1e-4}, false, rng);
    CHECK_THROWS_AS(m.add_domain({"base", 4, 1e-4}, true, rng), ConfigError);
    CHECK_THROWS_AS(m.add_domain({"tiny", 1, 1e-4}, true, rng), ConfigError);
}

TEST_CASE("forward output shape and input validation") {
    Rng rng(10);
    Model m = Model::build_base(tiny_config(SharingMode::share_pointwise), rng);
    m.add_domain({"base", 3, 1e-4}, false, rng);
    auto x = rand_images(5, 2, 8, rng);
    auto logits = m.forward(x, 0, false);
    REQUIRE(logits.rank() == 2);
    CHECK(logits.dim(0) == 5);
    CHECK(logits.dim(1) == 3);
    CHECK(all_finite(logits));
    auto bad = rand_images(5, 2, 7, rng);
    CHECK_THROWS_AS(m.forward(bad, 0, false), ShapeError);
    CHECK_THROWS_AS(m.forward(x, 1, false), ConfigError);
}

TEST_CASE("model gradients match finite differences") {
    Rng rng(11);
    Model m = Model::build_base(tiny_config(SharingMode::share_pointwise), rng);
    m.add_domain({"base", 3, 1e-4}, false, rng);
    Rng drng(12);
    auto x = rand_images(4, 2, 8, drng);
    std::vector<int> y = {0, 2, 1, 1};

    auto loss_of = [&](Model probe) {
        auto logits = probe.forward(x, 0, true);
        return static_cast<double>(softmax_xent(logits, y).loss);
    };

    ForwardCache cache;
    auto logits = m.forward(x, 0, true, &cache);
    auto r = softmax_xent(logits, y);
    auto dlogits = softmax_xent_backward(r.probs, y);
    Grads g = m.backward(cache, dlogits, true);

    struct Pick {
        std::string grad_name;
        Tensor<float>* tensor;
        bool slice;
        std::size_t slot;
    };
    std::vector<Pick> picks = {
        {"shared/stem", &m.shared_stem(), false, 0},
        {"shared/pw/1", &m.shared_pw(1), false, 0},
        {"shared/proj/0", &m.shared_projection(0), false, 0},
        {"dw/2/dom0", &m.dw_stack(2), true, 0},
        {"dom0/bn/0/scale", &m.domain_params(0).bn[0].scale, false, 0},
        {"dom0/stem_bn/shift", &m.domain_params(0).stem_bn.shift, false, 0},
        {"dom0/cls/w", &m.domain_params(0).cls_w, false, 0},
    };
    for (const auto& p : picks) {
        REQUIRE(g.count(p.grad_name) == 1);
        const Tensor<float>& grad = g.at(p.grad_name);
        // probe the largest-magnitude entry; small ones drown in f32 noise
        std::size_t best = 0;
        for (std::size_t i = 0; i < grad.size(); ++i)
            if (std::abs(grad[i]) > std::abs(grad[best])) best = i;
        const double analytic = grad[best];
        REQUIRE(std::abs(analytic) > 1e-4);

        std::size_t flat;
        if (p.slice) {
            const std::size_t Tn = p.tensor->dim(3);
            flat = best * Tn + p.slot;
        } else {
            flat = best;
        }
        const float eps = 5e-3f;
        const float keep = (*p.tensor)[flat];
        (*p.tensor)[flat] = keep + eps;
        const double up = loss_of(m);
        (*p.tensor)[flat] = keep - eps;
        const double dn = loss_of(m);
        (*p.tensor)[flat] = keep;
        const double numeric = (up - dn) / (2.0 * eps);
        CHECK(std::abs(numeric - analytic) / std::max(std::abs(analytic), 1e-4) < 5e-2);
    }
}

TEST_CASE("finetune freeze contracts per sharing mode") {
    for (SharingMode mode : {SharingMode::share_pointwise, SharingMode::classifier_only,
                             SharingMode::share_depthwise, SharingMode::individual}) {
        CAPTURE(sharing_mode_name(mode));
        Rng rng(13);
        Model m = Model::build_base(tiny_config(mode), rng);
        m.add_domain({"base", 3, 1e-4}, false, rng);
        m.add_domain({"side", 3, 1e-4}, true, rng);
        Rng drng(14);
        auto x = rand_images(4, 2, 8, drng);
        std::vector<int> y = {0, 1, 2, 0};

        auto before = m.checksums();
        auto handles = m.trainable_params(Phase::finetune_domain, 1);
        const bool frozen_features = mode == SharingMode::classifier_only;

        ForwardCache cache;
        auto logits = m.forward(x, 1, !frozen_features, &cache);
        auto r = softmax_xent(logits, y);
        Grads g = m.backward(cache, softmax_xent_backward(r.probs, y), false);

        MomentumState ms;
        for (const auto& h : handles) {
            REQUIRE(g.count(h.name) == 1);
            apply_step(h, g.at(h.name), ms, 0.05);
        }

        auto after = m.checksums();
        // every shared tensor and every domain-0 tensor is untouched
        for (const auto& [name, sum] : before) {
            const bool trained = std::any_of(handles.begin(), handles.end(),
                                             [&](const ParamHandle& h) { return h.name == name; });
            const bool dw1 = name.rfind("dw_stack/", 0) == 0;
            const bool bn_stats = !frozen_features && name.find("running_") != std::string::npos &&
                                  name.rfind("dom1/", 0) == 0;
            if (name.rfind("shared/", 0) == 0 || name.rfind("dom0/", 0) == 0) {
                CHECK(after.at(name) == sum);
            } else if (!trained && !dw1 && !bn_stats) {
                CHECK(after.at(name) == sum);
            }
        }
        // domain 1's classifier always moves
        CHECK(after.at("dom1/cls/w") != before.at("dom1/cls/w"));
        // a depthwise stack update must leave slot 0 bit-identical
        if (mode != SharingMode::share_depthwise && mode != SharingMode::classifier_only) {
            Rng r2(13);
            Model fresh = Model::build_base(tiny_config(mode), r2);
            fresh.add_domain({"base", 3, 1e-4}, false, r2);
            fresh.add_domain({"side", 3, 1e-4}, true, r2);
            for (std::size_t l = 0; l < m.plan().size(); ++l) {
                auto kept = dw_stack_slice(m.dw_stack(l), 0);
                auto orig = dw_stack_slice(fresh.dw_stack(l), 0);
                CHECK(checksum(kept) == checksum(orig));
            }
        }
    }
}

TEST_CASE("trainable parameter counts order across sharing modes") {
    auto count = [](SharingMode mode) {
        Rng rng(15);
        Model m = Model::build_base(desk_config(mode), rng);
        m.add_domain({"base", 10, 1e-4}, false, rng);
        m.add_domain({"side", 10, 1e-4}, true, rng);
        std::size_t n = 0;
        for (const auto& h : m.trainable_params(Phase::finetune_domain, 1)) n += handle_scalars(h);
        return n;
    };
    const std::size_t cls = count(SharingMode::classifier_only);
    const std::size_t pw = count(SharingMode::share_pointwise);
    const std::size_t dw = count(SharingMode::share_depthwise);
    const std::size_t ind = count(SharingMode::individual);
    CHECK(cls < pw);
    CHECK(pw < dw);
    CHECK(dw < ind);
}

TEST_CASE("gated forward over identical branches matches the plain forward") {
    Rng rng(16);
    Model m = Model::build_base(tiny_config(SharingMode::share_pointwise), rng);
    m.add_domain({"base", 3, 1e-4}, false, rng);
    m.add_domain({"side", 3, 1e-4}, true, rng);
    m.attach_gates(1, GateRegion::late, false, rng);
    REQUIRE(m.gate_attachment().layers.size() == 2);

    Rng drng(17);
    auto x = rand_images(3, 2, 8, drng);
    auto plain = m.forward(x, 1, false);
    auto gated = m.forward_gated(x, nullptr);
    REQUIRE(plain.same_shape(gated));
    for (std::size_t i = 0; i < plain.size(); ++i)
        CHECK(gated[i] == doctest::Approx(plain[i]).epsilon(1e-5));
}

TEST_CASE("gate training touches gate parameters only") {
    Rng rng(18);
    Model m = Model::build_base(tiny_config(SharingMode::share_pointwise), rng);
    m.add_domain({"base", 3, 1e-4}, false, rng);
    m.add_domain({"side", 3, 1e-4}, true, rng);
    // the clone's depthwise slices start bit-identical to the base; nudge them
    // apart so the branch mixtures differ and the gates have signal
    for (std::size_t l = 0; l < m.plan().size(); ++l) {
        Tensor<float> sl = dw_stack_slice(m.dw_stack(l), 1);
        for (std::size_t i = 0; i < sl.size(); ++i)
            sl[i] += static_cast<float>(rng.uniform(-0.3, 0.3));
        dw_stack_set_slice(m.dw_stack(l), 1, sl);
    }
    m.attach_gates(1, GateRegion::middle, false, rng);

    Rng drng(19);
    auto x = rand_images(4, 2, 8, drng);
    std::vector<int> y = {2, 0, 1, 2};
    auto before = m.checksums();

    MomentumState ms;
    for (int step = 0; step < 3; ++step) {
        ForwardCache cache;
        auto logits = m.forward_gated(x, &cache);
        auto r = softmax_xent(logits, y);
        Grads g = m.backward_gated(cache, softmax_xent_backward(r.probs, y));
        for (const auto& h : m.trainable_params(Phase::gate_train, 1)) {
            REQUIRE(g.count(h.name) == 1);
            apply_step(h, g.at(h.name), ms, 0.1);
        }
    }

    auto after = m.checksums();
    bool some_gate_moved = false;
    for (const auto& [name, sum] : before) {
        if (name.rfind("gate/", 0) == 0) {
            if (after.at(name) != sum) some_gate_moved = true;
        } else {
            CHECK(after.at(name) == sum);
        }
    }
    CHECK(some_gate_moved);
}

TEST_CASE("gating preconditions") {
    Rng rng(20);
    Model solo = Model::build_base(tiny_config(SharingMode::share_pointwise), rng);
    solo.add_domain({"base", 3, 1e-4}, false, rng);
    CHECK_THROWS_AS(solo.attach_gates(0, GateRegion::late, false, rng), ConfigError);
    CHECK_THROWS_AS(solo.forward_gated(rand_images(1, 2, 8, rng), nullptr), StateError);

    Model shared_dw = Model::build_base(tiny_config(SharingMode::share_depthwise), rng);
    shared_dw.add_domain({"base", 3, 1e-4}, false, rng);
    shared_dw.add_domain({"side", 3, 1e-4}, true, rng);
    CHECK_THROWS_AS(shared_dw.attach_gates(1, GateRegion::late, false, rng), ConfigError);
}

TEST_CASE("save/load round trip is bit-exact") {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "mdsep_model_rt").string();
    fs::remove_all(dir);

    Rng rng(21);
    Model m = Model::build_base(tiny_config(SharingMode::share_pointwise), rng);
    m.add_domain({"base", 3, 1e-4}, false, rng);
    m.add_domain({"side", 4, 5e-4}, true, rng);
    m.attach_gates(1, GateRegion::late, true, rng);
    m.save(dir);

    Model back = Model::load(dir);
    CHECK(back.checksums() == m.checksums());
    CHECK(back.num_domains() == 2);
    CHECK(back.domain_spec(1).num_classes == 4);
    CHECK(back.domain_spec(1).weight_decay == doctest::Approx(5e-4));
    CHECK(back.config().mode == SharingMode::share_pointwise);
    CHECK(back.gate_attachment().softmax_after_mean);

    Rng drng(22);
    auto x = rand_images(2, 2, 8, drng);
    auto a = m.forward(x, 1, false);
    auto b = back.forward(x, 1, false);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    fs::remove_all(dir);

    CHECK_THROWS_AS(Model::load("/nonexistent/mdsep_bundle"), DataError);
}
