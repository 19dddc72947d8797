#include "mdsep/model.hpp"

#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "mdsep/dtb.hpp"

namespace mdsep {

namespace fs = std::filesystem;
using nlohmann::json;

const char* sharing_mode_name(SharingMode m) {
    switch (m) {
        case SharingMode::individual: return "individual";
        case SharingMode::classifier_only: return "classifier_only";
        case SharingMode::share_depthwise: return "share_depthwise";
        default: return "share_pointwise";
    }
}

SharingMode sharing_mode_from_name(const std::string& s) {
    if (s == "individual") return SharingMode::individual;
    if (s == "classifier_only") return SharingMode::classifier_only;
    if (s == "share_depthwise") return SharingMode::share_depthwise;
    if (s == "share_pointwise") return SharingMode::share_pointwise;
    throw ConfigError("unknown sharing mode: " + s);
}

void ModelConfig::validate() const {
    if (blocks.empty()) throw ConfigError("model: no macro blocks configured");
    for (const auto& b : blocks)
        if (b.width == 0 || b.res_blocks == 0)
            throw ConfigError("model: macro block width/res_blocks must be >= 1");
    if (input_channels == 0 || input_resolution == 0)
        throw ConfigError("model: input dimensions must be >= 1");
    if (stem_width != blocks[0].width)
        throw ConfigError("model: stem width inconsistent with first macro block width");
}

std::size_t ModelConfig::num_sep_layers() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += 2 * b.res_blocks;
    return n;
}

ModelConfig desk_config(SharingMode mode) {
    ModelConfig c;
    c.blocks = {{16, 2}, {32, 2}, {64, 2}};
    c.stem_width = 16;
    c.input_channels = 3;
    c.input_resolution = 32;
    c.mode = mode;
    c.last_layer_domain_specific = false;
    c.default_num_classes = 10;
    c.preset_name = "desk";
    return c;
}

ModelConfig reference_config(SharingMode mode) {
    ModelConfig c;
    c.blocks = {{40, 4}, {80, 4}, {160, 4}};
    c.stem_width = 40;
    c.input_channels = 3;
    c.input_resolution = 64;
    c.mode = mode;
    c.last_layer_domain_specific = false;
    c.default_num_classes = 100;
    c.preset_name = "reference";
    return c;
}

std::vector<SepLayerSpec> layer_plan(const ModelConfig& cfg) {
    std::vector<SepLayerSpec> plan;
    std::size_t prev = cfg.stem_width;
    for (std::size_t mb = 0; mb < cfg.blocks.size(); ++mb) {
        const std::size_t width = cfg.blocks[mb].width;
        for (std::size_t rb = 0; rb < cfg.blocks[mb].res_blocks; ++rb) {
            SepLayerSpec l1{prev, width, (mb > 0 && rb == 0) ? std::size_t(2) : std::size_t(1), mb,
                            false};
            SepLayerSpec l2{width, width, 1, mb, false};
            plan.push_back(l1);
            plan.push_back(l2);
            prev = width;
        }
    }
    plan.back().is_last = true;
    return plan;
}

std::vector<ProjSpec> projection_plan(const ModelConfig& cfg) {
    std::vector<ProjSpec> projs;
    const auto plan = layer_plan(cfg);
    for (std::size_t l = 0; l < plan.size(); ++l)
        if (plan[l].stride == 2) projs.push_back({plan[l].in_ch, plan[l].out_ch, l});
    return projs;
}

// ---------------------------------------------------------------------------
// Ownership rules per sharing mode

bool Model::domain_owns_pw(std::size_t layer, std::size_t /*d*/) const {
    switch (cfg_.mode) {
        case SharingMode::individual:
        case SharingMode::share_depthwise: return true;
        case SharingMode::share_pointwise:
            return cfg_.last_layer_domain_specific && plan_[layer].is_last;
        default: return false;  // classifier_only
    }
}

static bool mode_owns_stem(SharingMode m) { return m == SharingMode::individual; }
static bool mode_owns_proj(SharingMode m) {
    return m == SharingMode::individual || m == SharingMode::share_depthwise;
}

std::size_t Model::feature_domain(std::size_t d) const {
    if (cfg_.mode == SharingMode::classifier_only && d > 0) return 0;
    return d;
}

std::size_t Model::dw_slot(std::size_t d) const { return feature_domain(d); }

Tensor<float>& Model::pw_for(std::size_t layer, std::size_t d) {
    const std::size_t fd = feature_domain(d);
    return domain_owns_pw(layer, fd) ? domains_.at(fd).pointwise.at(layer) : shared_pw_.at(layer);
}

Tensor<float>& Model::proj_for(std::size_t p, std::size_t d) {
    const std::size_t fd = feature_domain(d);
    return mode_owns_proj(cfg_.mode) ? domains_.at(fd).projections.at(p) : shared_proj_.at(p);
}

Tensor<float>& Model::stem_for(std::size_t d) {
    const std::size_t fd = feature_domain(d);
    return mode_owns_stem(cfg_.mode) ? domains_.at(fd).stem : stem_;
}

BnParams<float>& Model::bn_for(std::size_t layer, std::size_t d) {
    return domains_.at(feature_domain(d)).bn.at(layer);
}

BnParams<float>& Model::stem_bn_for(std::size_t d) {
    return domains_.at(feature_domain(d)).stem_bn;
}

// ---------------------------------------------------------------------------
// Construction

Model Model::build_base(ModelConfig cfg, Rng& rng) {
    if (cfg.stem_width == 0 && !cfg.blocks.empty()) cfg.stem_width = cfg.blocks[0].width;
    cfg.validate();
    Model m;
    m.cfg_ = cfg;
    m.plan_ = layer_plan(cfg);
    m.proj_plan_ = projection_plan(cfg);

    if (!mode_owns_stem(cfg.mode))
        m.stem_ = he_init<float>({3, 3, cfg.input_channels, cfg.stem_width},
                                 9 * cfg.input_channels, rng);
    m.shared_pw_.resize(m.plan_.size());
    for (std::size_t l = 0; l < m.plan_.size(); ++l) {
        const bool shared_here = !(cfg.mode == SharingMode::individual ||
                                   cfg.mode == SharingMode::share_depthwise ||
                                   (cfg.mode == SharingMode::share_pointwise &&
                                    cfg.last_layer_domain_specific && m.plan_[l].is_last));
        if (shared_here)
            m.shared_pw_[l] =
                he_init<float>({m.plan_[l].in_ch, m.plan_[l].out_ch}, m.plan_[l].in_ch, rng);
    }
    if (!mode_owns_proj(cfg.mode))
        for (const auto& p : m.proj_plan_)
            m.shared_proj_.push_back(he_init<float>({p.in_ch, p.out_ch}, p.in_ch, rng));
    if (cfg.mode == SharingMode::share_depthwise)
        for (const auto& l : m.plan_)
            m.shared_dw_.push_back(he_init<float>({3, 3, l.in_ch}, 9, rng));
    if (cfg.mode != SharingMode::share_depthwise) m.dw_stack_.resize(m.plan_.size());
    return m;
}

std::size_t Model::find_domain(const std::string& name) const {
    for (std::size_t d = 0; d < domains_.size(); ++d)
        if (domains_[d].spec.name == name) return d;
    throw ConfigError("unknown domain: " + name);
}

std::size_t Model::add_domain(const DomainSpec& spec, bool init_from_base, Rng& rng) {
    if (spec.num_classes < 2) throw ConfigError("domain needs at least 2 classes");
    for (const auto& dp : domains_)
        if (dp.spec.name == spec.name) throw ConfigError("duplicate domain id: " + spec.name);

    const std::size_t d = domains_.size();
    // the base domain has nothing to copy from; it always gets a fresh init
    const bool from_base = init_from_base && d > 0;

    DomainParams dp;
    dp.spec = spec;
    dp.has_features = !(cfg_.mode == SharingMode::classifier_only && d > 0);

    if (dp.has_features) {
        // depthwise slice per layer
        if (cfg_.mode != SharingMode::share_depthwise) {
            for (std::size_t l = 0; l < plan_.size(); ++l) {
                const std::size_t M = plan_[l].in_ch;
                Tensor<float> filt =
                    from_base ? dw_stack_slice(dw_stack_[l], 0) : he_init<float>({3, 3, M}, 9, rng);
                Tensor<float> grown({3, 3, M, d + 1});
                for (std::size_t slot = 0; slot < d; ++slot)
                    dw_stack_set_slice(grown, slot, dw_stack_slice(dw_stack_[l], slot));
                dw_stack_set_slice(grown, d, filt);
                dw_stack_[l] = std::move(grown);
            }
        }
        dp.stem_bn = from_base ? domains_[0].stem_bn : BnParams<float>(cfg_.stem_width);
        for (std::size_t l = 0; l < plan_.size(); ++l)
            dp.bn.push_back(from_base ? domains_[0].bn[l] : BnParams<float>(plan_[l].out_ch));
        dp.pointwise.resize(plan_.size());
        for (std::size_t l = 0; l < plan_.size(); ++l)
            if (domain_owns_pw(l, d))
                dp.pointwise[l] =
                    from_base && domain_owns_pw(l, 0)
                        ? domains_[0].pointwise[l]
                        : he_init<float>({plan_[l].in_ch, plan_[l].out_ch}, plan_[l].in_ch, rng);
        if (mode_owns_stem(cfg_.mode))
            dp.stem = from_base ? domains_[0].stem
                                : he_init<float>({3, 3, cfg_.input_channels, cfg_.stem_width},
                                                 9 * cfg_.input_channels, rng);
        if (mode_owns_proj(cfg_.mode))
            for (std::size_t p = 0; p < proj_plan_.size(); ++p)
                dp.projections.push_back(
                    from_base ? domains_[0].projections[p]
                              : he_init<float>({proj_plan_[p].in_ch, proj_plan_[p].out_ch},
                                               proj_plan_[p].in_ch, rng));
    }

    const std::size_t feat_dim = cfg_.blocks.back().width;
    dp.cls_w = he_init<float>({feat_dim, spec.num_classes}, feat_dim, rng);
    dp.cls_b = Tensor<float>({spec.num_classes}, 0.0f);

    domains_.push_back(std::move(dp));
    return d;
}

// ---------------------------------------------------------------------------
// Forward

struct Model::BwdFlags {
    bool shared_grads = false;   // gradients for shared-bank tensors
    bool feature_grads = false;  // gradients for the domain's feature tensors
    bool gate_grads = false;
};

Tensor<float> Model::forward(const Tensor<float>& x, std::size_t d, bool train,
                             ForwardCache* cache) {
    return forward_impl(x, d, train, cache, nullptr);
}

Tensor<float> Model::forward_gated(const Tensor<float>& x, ForwardCache* cache) {
    if (!gates_) throw StateError("forward_gated: no gates attached");
    // frozen-network phase: batch norm always runs on its stored statistics
    return forward_impl(x, gates_->target_domain, false, cache, &*gates_);
}

Tensor<float> Model::forward_impl(const Tensor<float>& x, std::size_t d, bool train,
                                  ForwardCache* cache, const GateAttachment* ga) {
    if (d >= domains_.size()) throw ConfigError("forward: unregistered domain");
    if (x.rank() != 4 || x.dim(1) != cfg_.input_channels || x.dim(2) != cfg_.input_resolution ||
        x.dim(3) != cfg_.input_resolution)
        throw ShapeError("forward: input does not match configured shape");

    if (cache) {
        cache->domain = d;
        cache->train_mode = train;
        cache->res.clear();
        cache->valid = false;
    }

    // stem
    Tensor<float> act = conv2d_forward(x, stem_for(d), 1);
    Tensor<float> stem_out = act;
    BnCache<float> stem_bn_cache;
    act = batchnorm_forward(act, stem_bn_for(d), train, cache ? &stem_bn_cache : nullptr);
    act = relu_forward(act);
    if (cache) {
        cache->input = x;
        cache->stem_out = std::move(stem_out);
        cache->stem_bn_cache = std::move(stem_bn_cache);
        cache->stem_act = act;
    }

    std::size_t l = 0, pidx = 0;
    for (std::size_t mb = 0; mb < cfg_.blocks.size(); ++mb) {
        for (std::size_t rb = 0; rb < cfg_.blocks[mb].res_blocks; ++rb) {
            ResBlockCache rc;
            const Tensor<float> block_in = act;

            // first separable layer (may downsample)
            rc.l1.x = std::move(act);
            Tensor<float> h = sep_unit_run(rc.l1, l, d, train, ga, cache != nullptr);
            h = relu_forward(h);
            rc.l1.out = h;

            // second separable layer (no activation before the residual add)
            rc.l2.x = std::move(h);
            Tensor<float> y = sep_unit_run(rc.l2, l + 1, d, train, ga, cache != nullptr);

            // shortcut
            if (plan_[l].stride == 2) {
                rc.projected = true;
                rc.proj_index = pidx;
                rc.proj_in = block_in;
                Tensor<float> id = pointwise_forward(block_in, proj_for(pidx, d), 2);
                add_inplace(y, id);
                ++pidx;
            } else {
                add_inplace(y, block_in);
            }
            act = relu_forward(y);
            rc.out = act;
            if (cache)
                cache->res.push_back(std::move(rc));
            l += 2;
        }
    }

    Tensor<float> gap = global_avg_pool(act);
    Tensor<float> logits = linear_forward(gap, domains_[d].cls_w, domains_[d].cls_b);
    if (cache) {
        cache->gap_in = std::move(act);
        cache->gap_out = std::move(gap);
        cache->valid = true;
    }
    return logits;
}

// Runs one separable unit (depthwise -> [gate mixture] -> pointwise -> BN),
// filling the unit cache when requested.
Tensor<float> Model::sep_unit_run(SepUnitCache& unit, std::size_t l, std::size_t d, bool train,
                                  const GateAttachment* ga, bool want_cache) {
    const auto& spec = plan_[l];
    Tensor<float> mix;
    const bool gated = ga && ga->target_domain == d &&
                       std::find(ga->layers.begin(), ga->layers.end(), l) != ga->layers.end();
    if (gated) {
        const std::size_t Tn = dw_stack_[l].dim(3);
        std::vector<Tensor<float>> branches;
        branches.reserve(Tn);
        for (std::size_t i = 0; i < Tn; ++i)
            branches.push_back(depthwise_forward_stack(unit.x, dw_stack_[l], i, spec.stride));
        const std::size_t gi = static_cast<std::size_t>(
            std::find(ga->layers.begin(), ga->layers.end(), l) - ga->layers.begin());
        mix = gate_forward(ga->gates[gi], unit.x, branches, ga->softmax_after_mean,
                           want_cache ? &unit.gate_cache : nullptr);
        if (want_cache) {
            unit.gated = true;
            unit.branches = std::move(branches);
        }
    } else if (cfg_.mode == SharingMode::share_depthwise) {
        mix = depthwise_forward(unit.x, shared_dw_[l], spec.stride);
    } else {
        mix = depthwise_forward_stack(unit.x, dw_stack_[l], dw_slot(d), spec.stride);
    }
    Tensor<float> pw = pointwise_forward(mix, pw_for(l, d), 1);
    if (want_cache) unit.dw_out = std::move(mix);
    return batchnorm_forward(pw, bn_for(l, d), train, want_cache ? &unit.bn_cache : nullptr);
}

// ---------------------------------------------------------------------------
// Backward

Grads Model::backward(const ForwardCache& cache, const Tensor<float>& dlogits,
                      bool want_shared_grads) {
    BwdFlags f;
    f.shared_grads = want_shared_grads;
    f.feature_grads = domains_.at(cache.domain).has_features &&
                      !(cfg_.mode == SharingMode::classifier_only && !want_shared_grads);
    return backward_impl(cache, dlogits, f);
}

Grads Model::backward_gated(const ForwardCache& cache, const Tensor<float>& dlogits) {
    if (!gates_) throw StateError("backward_gated: no gates attached");
    BwdFlags f;
    f.gate_grads = true;
    return backward_impl(cache, dlogits, f);
}

Grads Model::backward_impl(const ForwardCache& cache, const Tensor<float>& dlogits,
                           const BwdFlags& f) {
    if (!cache.valid) throw StateError("backward without a cached forward");
    const std::size_t d = cache.domain;
    const bool train = cache.train_mode;
    const std::string dom = "dom" + std::to_string(feature_domain(d));
    Tensor<float>* none = nullptr;
    Grads g;

    Tensor<float> dgap, dclsw, dclsb;
    linear_backward(cache.gap_out, domains_[d].cls_w, dlogits, &dgap, &dclsw, &dclsb);
    g["dom" + std::to_string(d) + "/cls/w"] = std::move(dclsw);
    g["dom" + std::to_string(d) + "/cls/b"] = std::move(dclsb);
    if (!f.feature_grads && !f.shared_grads && !f.gate_grads) return g;

    Tensor<float> dact = global_avg_pool_backward(cache.gap_in.shape(), dgap);
    std::size_t l = plan_.size();
    std::size_t pidx = proj_plan_.size();
    for (std::size_t bi = cache.res.size(); bi-- > 0;) {
        const ResBlockCache& rc = cache.res[bi];
        l -= 2;
        Tensor<float> dsum = relu_backward(rc.out, dact);

        Tensor<float> dshort;
        if (rc.projected) {
            --pidx;
            const bool owns = mode_owns_proj(cfg_.mode);
            const bool want = owns ? f.feature_grads : f.shared_grads;
            Tensor<float> dk;
            pointwise_backward(rc.proj_in, proj_for(pidx, d), 2, dsum, &dshort,
                               want ? &dk : none);
            if (want)
                g[(owns ? dom + "/proj/" : std::string("shared/proj/")) + std::to_string(pidx)] =
                    std::move(dk);
        } else {
            dshort = dsum;
        }

        Tensor<float> dmid = sep_unit_bwd(rc.l2, l + 1, d, dsum, g, f, train);
        dmid = relu_backward(rc.l1.out, dmid);
        Tensor<float> dx = sep_unit_bwd(rc.l1, l, d, dmid, g, f, train);
        add_inplace(dx, dshort);
        dact = std::move(dx);
    }

    Tensor<float> dbn_out = relu_backward(cache.stem_act, dact);
    Tensor<float> dstem_out;
    if (train) {
        Tensor<float> dsc, dsh;
        batchnorm_backward(stem_bn_for(d), cache.stem_bn_cache, dbn_out, &dstem_out,
                           f.feature_grads ? &dsc : none, f.feature_grads ? &dsh : none);
        if (f.feature_grads) {
            g[dom + "/stem_bn/scale"] = std::move(dsc);
            g[dom + "/stem_bn/shift"] = std::move(dsh);
        }
    } else {
        dstem_out = batchnorm_backward_eval(stem_bn_for(d), dbn_out);
    }
    const bool owns_stem = mode_owns_stem(cfg_.mode);
    if (owns_stem ? f.feature_grads : f.shared_grads) {
        Tensor<float> dk;
        conv2d_backward(cache.input, stem_for(d), 1, dstem_out, none, &dk);
        g[owns_stem ? dom + "/stem" : std::string("shared/stem")] = std::move(dk);
    }
    return g;
}

Tensor<float> Model::sep_unit_bwd(const SepUnitCache& unit, std::size_t l, std::size_t d,
                                  const Tensor<float>& dout, Grads& g, const BwdFlags& f,
                                  bool train) {
    const auto& spec = plan_[l];
    const std::string dom = "dom" + std::to_string(feature_domain(d));
    Tensor<float>* none = nullptr;

    Tensor<float> dpw_out;
    if (train) {
        Tensor<float> dsc, dsh;
        batchnorm_backward(bn_for(l, d), unit.bn_cache, dout, &dpw_out,
                           f.feature_grads ? &dsc : none, f.feature_grads ? &dsh : none);
        if (f.feature_grads) {
            g[dom + "/bn/" + std::to_string(l) + "/scale"] = std::move(dsc);
            g[dom + "/bn/" + std::to_string(l) + "/shift"] = std::move(dsh);
        }
    } else {
        dpw_out = batchnorm_backward_eval(bn_for(l, d), dout);
    }

    const bool owns_pw = domain_owns_pw(l, feature_domain(d));
    const bool want_pw = owns_pw ? f.feature_grads : f.shared_grads;
    Tensor<float> dmix, dpwk;
    pointwise_backward(unit.dw_out, pw_for(l, d), 1, dpw_out, &dmix, want_pw ? &dpwk : none);
    if (want_pw)
        g[(owns_pw ? dom + "/pw/" : std::string("shared/pw/")) + std::to_string(l)] =
            std::move(dpwk);

    Tensor<float> dx;
    if (unit.gated) {
        const std::size_t gi = static_cast<std::size_t>(
            std::find(gates_->layers.begin(), gates_->layers.end(), l) - gates_->layers.begin());
        GateGrads<float> gg = gate_backward(gates_->gates[gi], unit.gate_cache, unit.branches,
                                            dmix);
        if (f.gate_grads) {
            const std::string base = "gate/" + std::to_string(l) + "/";
            g[base + "w1"] = std::move(gg.dw1);
            g[base + "b1"] = std::move(gg.db1);
            g[base + "w2"] = std::move(gg.dw2);
            g[base + "b2"] = std::move(gg.db2);
        }
        dx = std::move(gg.dfeatmap);
        for (std::size_t i = 0; i < unit.branches.size(); ++i) {
            Tensor<float> filt = dw_stack_slice(dw_stack_[l], i);
            Tensor<float> dxi;
            depthwise_backward(unit.x, filt, spec.stride, dmix, &dxi, none);
            axpy_inplace(dx, unit.gate_cache.scales[i], dxi);
        }
    } else if (cfg_.mode == SharingMode::share_depthwise) {
        Tensor<float> dk;
        depthwise_backward(unit.x, shared_dw_[l], spec.stride, dmix, &dx,
                           f.shared_grads ? &dk : none);
        if (f.shared_grads) g["shared/dw/" + std::to_string(l)] = std::move(dk);
    } else {
        Tensor<float> filt = dw_stack_slice(dw_stack_[l], dw_slot(d));
        Tensor<float> dk;
        depthwise_backward(unit.x, filt, spec.stride, dmix, &dx,
                           f.feature_grads ? &dk : none);
        if (f.feature_grads) g["dw/" + std::to_string(l) + "/" + dom] = std::move(dk);
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Gating attachment

static std::size_t region_macro_block(GateRegion r, std::size_t num_blocks) {
    switch (r) {
        case GateRegion::early: return 0;
        case GateRegion::middle: return num_blocks / 2;
        default: return num_blocks - 1;
    }
}

static GateRegion gate_region_from_name(const std::string& s) {
    if (s == "early") return GateRegion::early;
    if (s == "middle") return GateRegion::middle;
    if (s == "late") return GateRegion::late;
    throw ConfigError("unknown gate region: " + s);
}

void Model::attach_gates(std::size_t target_domain, GateRegion region, bool softmax_after_mean,
                         Rng& rng) {
    if (domains_.size() < 2) throw ConfigError("gating needs at least two domains");
    if (cfg_.mode == SharingMode::share_depthwise || cfg_.mode == SharingMode::classifier_only)
        throw ConfigError("gating needs per-domain depthwise filters");
    if (target_domain >= domains_.size()) throw ConfigError("attach_gates: unknown domain");

    GateAttachment ga;
    ga.target_domain = target_domain;
    ga.region = region;
    ga.softmax_after_mean = softmax_after_mean;
    const std::size_t mb = region_macro_block(region, cfg_.blocks.size());
    const std::size_t Tn = domains_.size();
    for (std::size_t l = 0; l < plan_.size(); ++l) {
        if (plan_[l].macro_block != mb) continue;
        ga.layers.push_back(l);
        ga.gates.push_back(gate_init<float>(plan_[l].in_ch, Tn, rng));
    }
    gates_ = std::move(ga);
}

// ---------------------------------------------------------------------------
// Trainable sets and tensor enumeration

std::vector<ParamHandle> Model::trainable_params(Phase phase, std::size_t d) {
    std::vector<ParamHandle> out;
    auto push = [&](const std::string& name, Tensor<float>& t) {
        out.push_back(ParamHandle{name, &t, false, 0});
    };

    if (phase == Phase::gate_train) {
        if (!gates_) throw StateError("gate training without attached gates");
        for (std::size_t i = 0; i < gates_->layers.size(); ++i) {
            const std::string base = "gate/" + std::to_string(gates_->layers[i]) + "/";
            push(base + "w1", gates_->gates[i].w1);
            push(base + "b1", gates_->gates[i].b1);
            push(base + "w2", gates_->gates[i].w2);
            push(base + "b2", gates_->gates[i].b2);
        }
        return out;
    }

    if (phase == Phase::pretrain_base && d != 0)
        throw ConfigError("base pretraining runs on domain 0");
    if (d >= domains_.size()) throw ConfigError("trainable_params: unknown domain");
    DomainParams& dp = domains_[d];
    const std::string dom = "dom" + std::to_string(d);

    push(dom + "/cls/w", dp.cls_w);
    push(dom + "/cls/b", dp.cls_b);
    if (cfg_.mode == SharingMode::classifier_only && phase == Phase::finetune_domain) return out;

    push(dom + "/stem_bn/scale", dp.stem_bn.scale);
    push(dom + "/stem_bn/shift", dp.stem_bn.shift);
    for (std::size_t l = 0; l < plan_.size(); ++l) {
        push(dom + "/bn/" + std::to_string(l) + "/scale", dp.bn[l].scale);
        push(dom + "/bn/" + std::to_string(l) + "/shift", dp.bn[l].shift);
    }
    if (cfg_.mode != SharingMode::share_depthwise)
        for (std::size_t l = 0; l < plan_.size(); ++l)
            out.push_back(
                ParamHandle{"dw/" + std::to_string(l) + "/" + dom, &dw_stack_[l], true, dw_slot(d)});
    for (std::size_t l = 0; l < plan_.size(); ++l)
        if (domain_owns_pw(l, d)) push(dom + "/pw/" + std::to_string(l), dp.pointwise[l]);
    if (mode_owns_stem(cfg_.mode)) push(dom + "/stem", dp.stem);
    if (mode_owns_proj(cfg_.mode))
        for (std::size_t p = 0; p < proj_plan_.size(); ++p)
            push(dom + "/proj/" + std::to_string(p), dp.projections[p]);

    if (phase == Phase::pretrain_base) {
        if (!mode_owns_stem(cfg_.mode)) push("shared/stem", stem_);
        for (std::size_t l = 0; l < plan_.size(); ++l)
            if (!shared_pw_[l].empty()) push("shared/pw/" + std::to_string(l), shared_pw_[l]);
        if (!mode_owns_proj(cfg_.mode))
            for (std::size_t p = 0; p < proj_plan_.size(); ++p)
                push("shared/proj/" + std::to_string(p), shared_proj_[p]);
        if (cfg_.mode == SharingMode::share_depthwise)
            for (std::size_t l = 0; l < plan_.size(); ++l)
                push("shared/dw/" + std::to_string(l), shared_dw_[l]);
    }
    return out;
}

void Model::visit_tensors(const std::function<void(const std::string&, Tensor<float>&)>& fn) {
    if (!stem_.empty()) fn("shared/stem", stem_);
    for (std::size_t l = 0; l < shared_pw_.size(); ++l)
        if (!shared_pw_[l].empty()) fn("shared/pw/" + std::to_string(l), shared_pw_[l]);
    for (std::size_t p = 0; p < shared_proj_.size(); ++p)
        fn("shared/proj/" + std::to_string(p), shared_proj_[p]);
    for (std::size_t l = 0; l < shared_dw_.size(); ++l)
        fn("shared/dw/" + std::to_string(l), shared_dw_[l]);
    for (std::size_t l = 0; l < dw_stack_.size(); ++l)
        if (!dw_stack_[l].empty()) fn("dw_stack/" + std::to_string(l), dw_stack_[l]);
    for (std::size_t d = 0; d < domains_.size(); ++d) {
        DomainParams& dp = domains_[d];
        const std::string dom = "dom" + std::to_string(d);
        if (dp.has_features) {
            fn(dom + "/stem_bn/scale", dp.stem_bn.scale);
            fn(dom + "/stem_bn/shift", dp.stem_bn.shift);
            fn(dom + "/stem_bn/running_mean", dp.stem_bn.running_mean);
            fn(dom + "/stem_bn/running_var", dp.stem_bn.running_var);
            for (std::size_t l = 0; l < dp.bn.size(); ++l) {
                const std::string base = dom + "/bn/" + std::to_string(l) + "/";
                fn(base + "scale", dp.bn[l].scale);
                fn(base + "shift", dp.bn[l].shift);
                fn(base + "running_mean", dp.bn[l].running_mean);
                fn(base + "running_var", dp.bn[l].running_var);
            }
            for (std::size_t l = 0; l < dp.pointwise.size(); ++l)
                if (!dp.pointwise[l].empty()) fn(dom + "/pw/" + std::to_string(l), dp.pointwise[l]);
            if (!dp.stem.empty()) fn(dom + "/stem", dp.stem);
            for (std::size_t p = 0; p < dp.projections.size(); ++p)
                fn(dom + "/proj/" + std::to_string(p), dp.projections[p]);
        }
        fn(dom + "/cls/w", dp.cls_w);
        fn(dom + "/cls/b", dp.cls_b);
    }
    if (gates_)
        for (std::size_t i = 0; i < gates_->layers.size(); ++i) {
            const std::string base = "gate/" + std::to_string(gates_->layers[i]) + "/";
            fn(base + "w1", gates_->gates[i].w1);
            fn(base + "b1", gates_->gates[i].b1);
            fn(base + "w2", gates_->gates[i].w2);
            fn(base + "b2", gates_->gates[i].b2);
        }
}

std::map<std::string, std::uint64_t> Model::checksums() {
    std::map<std::string, std::uint64_t> out;
    visit_tensors([&](const std::string& name, Tensor<float>& t) { out[name] = checksum(t); });
    return out;
}

// ---------------------------------------------------------------------------
// Persistence: manifest.json plus one DTB file per tensor.

static std::string tensor_filename(const std::string& name) {
    std::string s = name;
    for (char& c : s)
        if (c == '/') c = '.';
    return s + ".dtb";
}

void Model::save(const std::string& dir) {
    fs::create_directories(dir);
    json m;
    m["format"] = "mdsep-bundle-v1";
    json jc;
    jc["blocks"] = json::array();
    for (const auto& b : cfg_.blocks)
        jc["blocks"].push_back({{"width", b.width}, {"res_blocks", b.res_blocks}});
    jc["input_channels"] = cfg_.input_channels;
    jc["input_resolution"] = cfg_.input_resolution;
    jc["stem_width"] = cfg_.stem_width;
    jc["mode"] = sharing_mode_name(cfg_.mode);
    jc["last_layer_domain_specific"] = cfg_.last_layer_domain_specific;
    jc["default_num_classes"] = cfg_.default_num_classes;
    jc["preset_name"] = cfg_.preset_name;
    m["config"] = jc;
    m["domains"] = json::array();
    for (const auto& dp : domains_)
        m["domains"].push_back({{"name", dp.spec.name},
                                {"num_classes", dp.spec.num_classes},
                                {"weight_decay", dp.spec.weight_decay}});
    if (gates_)
        m["gates"] = {{"target_domain", gates_->target_domain},
                      {"region", gate_region_name(gates_->region)},
                      {"softmax_after_mean", gates_->softmax_after_mean}};

    std::ofstream out(dir + "/manifest.json");
    if (!out) throw DataError("cannot write " + dir + "/manifest.json");
    out << m.dump(2) << "\n";
    visit_tensors([&](const std::string& name, Tensor<float>& t) {
        dtb_save(t, dir + "/" + tensor_filename(name));
    });
}

Model Model::load(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw DataError("cannot open " + dir + "/manifest.json");
    json m;
    try {
        in >> m;
    } catch (const json::exception& e) {
        throw DataError("bad model manifest: " + std::string(e.what()));
    }
    if (m.value("format", "") != "mdsep-bundle-v1")
        throw DataError("unrecognized model bundle format");

    ModelConfig cfg;
    const json& jc = m.at("config");
    for (const auto& b : jc.at("blocks"))
        cfg.blocks.push_back({b.at("width").get<std::size_t>(),
                              b.at("res_blocks").get<std::size_t>()});
    cfg.input_channels = jc.at("input_channels").get<std::size_t>();
    cfg.input_resolution = jc.at("input_resolution").get<std::size_t>();
    cfg.stem_width = jc.at("stem_width").get<std::size_t>();
    cfg.mode = sharing_mode_from_name(jc.at("mode").get<std::string>());
    cfg.last_layer_domain_specific = jc.at("last_layer_domain_specific").get<bool>();
    cfg.default_num_classes = jc.at("default_num_classes").get<std::size_t>();
    cfg.preset_name = jc.value("preset_name", "");

    Rng rng(0);  // placeholder init, every tensor is overwritten below
    Model model = build_base(cfg, rng);
    for (const auto& jd : m.at("domains")) {
        DomainSpec spec;
        spec.name = jd.at("name").get<std::string>();
        spec.num_classes = jd.at("num_classes").get<std::size_t>();
        spec.weight_decay = jd.at("weight_decay").get<double>();
        model.add_domain(spec, false, rng);
    }
    if (m.contains("gates")) {
        const json& jg = m.at("gates");
        model.attach_gates(jg.at("target_domain").get<std::size_t>(),
                           gate_region_from_name(jg.at("region").get<std::string>()),
                           jg.at("softmax_after_mean").get<bool>(), rng);
    }
    model.visit_tensors([&](const std::string& name, Tensor<float>& t) {
        Tensor<float> loaded = dtb_load_f32(dir + "/" + tensor_filename(name));
        if (!loaded.same_shape(t))
            throw DataError("model bundle tensor shape mismatch: " + name);
        t = std::move(loaded);
    });
    return model;
}

}  // namespace mdsep
