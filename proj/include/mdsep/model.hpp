#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mdsep/gating.hpp"
#include "mdsep/layers.hpp"
#include "mdsep/rng.hpp"
#include "mdsep/tensor.hpp"

namespace mdsep {

// Multi-domain separable residual network. The backbone is a stem convolution
// followed by three macro blocks of residual blocks; every residual block is
// two depthwise-separable layers (domain depthwise -> pointwise -> domain
// batch norm). Which parameter sets are shared across domains is selected by
// the sharing mode:
//   individual      - nothing shared; each domain owns a full network
//   classifier_only - whole feature extractor shared/frozen; per-domain heads
//   share_depthwise - depthwise filters shared; pointwise per-domain
//   share_pointwise - pointwise/stem/projections shared; depthwise per-domain
// Domain 0 is the base domain: its "per-domain" role tensors double as the
// shared bank wherever the mode calls for sharing.

enum class SharingMode { individual, classifier_only, share_depthwise, share_pointwise };

const char* sharing_mode_name(SharingMode m);
SharingMode sharing_mode_from_name(const std::string& s);

struct MacroBlock {
    std::size_t width = 0;
    std::size_t res_blocks = 0;
};

struct ModelConfig {
    std::vector<MacroBlock> blocks;
    std::size_t input_channels = 3;
    std::size_t input_resolution = 32;
    std::size_t stem_width = 0;  // defaults to blocks[0].width
    SharingMode mode = SharingMode::share_pointwise;
    bool last_layer_domain_specific = true;
    std::size_t default_num_classes = 10;  // used by the parameter accountant
    std::string preset_name;

    void validate() const;
    std::size_t num_sep_layers() const;
};

// 3 macro blocks x 2 residual blocks, widths 16/32/64, 3x32x32 input.
ModelConfig desk_config(SharingMode mode = SharingMode::share_pointwise);
// 3 macro blocks x 4 residual blocks (the 26-layer backbone). Widths chosen so
// the accountant's pointwise-share and marginal-overhead figures land where
// the separable design predicts; see count_params.
ModelConfig reference_config(SharingMode mode = SharingMode::share_pointwise);

// Static layer plan derived from the config.
struct SepLayerSpec {
    std::size_t in_ch = 0, out_ch = 0, stride = 1;
    std::size_t macro_block = 0;
    bool is_last = false;  // final separable layer of the network
};

struct ProjSpec {
    std::size_t in_ch = 0, out_ch = 0;
    std::size_t at_layer = 0;  // the sep layer whose residual block it shortcuts
};

std::vector<SepLayerSpec> layer_plan(const ModelConfig& cfg);
std::vector<ProjSpec> projection_plan(const ModelConfig& cfg);

struct DomainSpec {
    std::string name;
    std::size_t num_classes = 0;
    double weight_decay = 1e-4;
};

struct DomainParams {
    DomainSpec spec;
    bool has_features = true;  // false for domains added in classifier_only mode
    BnParams<float> stem_bn;
    std::vector<BnParams<float>> bn;        // per sep layer
    std::vector<Tensor<float>> pointwise;   // per sep layer; only owned slots populated
    Tensor<float> stem;                     // individual mode, d > 0
    std::vector<Tensor<float>> projections; // individual / share_depthwise, d > 0
    Tensor<float> cls_w, cls_b;
};

enum class Phase { pretrain_base, finetune_domain, gate_train };

// Reference to one trainable unit. Depthwise filters live stacked per layer,
// so a domain's slice is addressed as (stack tensor, slot).
struct ParamHandle {
    std::string name;
    Tensor<float>* tensor = nullptr;  // direct parameter, or the stack for slices
    bool is_dw_slice = false;
    std::size_t slot = 0;
};

struct GateAttachment {
    std::size_t target_domain = 0;
    GateRegion region = GateRegion::late;
    bool softmax_after_mean = false;
    std::vector<std::size_t> layers;   // gated separable layer indices
    std::vector<Gate<float>> gates;    // parallel to `layers`
};

// Per-separable-layer forward cache (inputs retained for one backward call).
struct SepUnitCache {
    Tensor<float> x;       // input to the depthwise step
    Tensor<float> dw_out;  // input to the pointwise step (post-mixture when gated)
    BnCache<float> bn_cache;
    Tensor<float> out;     // post-ReLU for first-in-block layers, pre-add otherwise
    // gating
    bool gated = false;
    std::vector<Tensor<float>> branches;
    GateCache<float> gate_cache;
};

struct ResBlockCache {
    SepUnitCache l1, l2;
    Tensor<float> proj_in;   // only when the shortcut is projected
    bool projected = false;
    std::size_t proj_index = 0;
    Tensor<float> out;       // relu(l2 + shortcut)
};

struct ForwardCache {
    Tensor<float> input;
    Tensor<float> stem_out;
    BnCache<float> stem_bn_cache;
    Tensor<float> stem_act;
    std::vector<ResBlockCache> res;
    Tensor<float> gap_in;   // alias-free copy of the final activation
    Tensor<float> gap_out;
    std::size_t domain = 0;
    bool train_mode = false;
    bool valid = false;
};

using Grads = std::map<std::string, Tensor<float>>;

class Model {
  public:
    static Model build_base(ModelConfig cfg, Rng& rng);

    // Registers a new domain and returns its id. init_from_base copies domain
    // 0's depthwise filters (and other per-domain feature tensors) so the new
    // domain starts as a functional clone of the base.
    std::size_t add_domain(const DomainSpec& spec, bool init_from_base, Rng& rng);

    std::size_t num_domains() const { return domains_.size(); }
    const DomainSpec& domain_spec(std::size_t d) const { return domains_.at(d).spec; }
    std::size_t find_domain(const std::string& name) const;

    Tensor<float> forward(const Tensor<float>& x, std::size_t d, bool train,
                          ForwardCache* cache = nullptr);
    // Backward from dlogits through the cached forward. Parameter gradients for
    // shared-bank tensors are skipped unless want_shared_grads (they are frozen
    // in every phase except base pretraining).
    Grads backward(const ForwardCache& cache, const Tensor<float>& dlogits,
                   bool want_shared_grads);

    // Gated forward/backward for soft-sharing. Frozen layers run with eval-mode
    // batch norm; backward returns gradients for gate parameters only.
    Tensor<float> forward_gated(const Tensor<float>& x, ForwardCache* cache);
    Grads backward_gated(const ForwardCache& cache, const Tensor<float>& dlogits);

    void attach_gates(std::size_t target_domain, GateRegion region, bool softmax_after_mean,
                      Rng& rng);
    bool has_gates() const { return gates_.has_value(); }
    const GateAttachment& gate_attachment() const { return *gates_; }
    GateAttachment& gate_attachment() { return *gates_; }

    // Trainable set for a phase, per the sharing mode's freeze contract.
    std::vector<ParamHandle> trainable_params(Phase phase, std::size_t d);

    // Every stored tensor (parameters, running stats, gates), stable names.
    void visit_tensors(const std::function<void(const std::string&, Tensor<float>&)>& fn);
    std::map<std::string, std::uint64_t> checksums();

    void save(const std::string& dir);
    static Model load(const std::string& dir);

    const ModelConfig& config() const { return cfg_; }
    const std::vector<SepLayerSpec>& plan() const { return plan_; }
    const std::vector<ProjSpec>& projections() const { return proj_plan_; }

    // Storage accessors used by tests and the accountant cross-check.
    Tensor<float>& dw_stack(std::size_t layer) { return dw_stack_.at(layer); }
    Tensor<float>& shared_pw(std::size_t layer) { return shared_pw_.at(layer); }
    Tensor<float>& shared_stem() { return stem_; }
    Tensor<float>& shared_projection(std::size_t p) { return shared_proj_.at(p); }
    DomainParams& domain_params(std::size_t d) { return domains_.at(d); }

    // Which stack slot domain d reads (classifier_only extras read slot 0).
    std::size_t dw_slot(std::size_t d) const;

    // Resolved views honoring the sharing mode.
    Tensor<float>& pw_for(std::size_t layer, std::size_t d);
    Tensor<float>& proj_for(std::size_t p, std::size_t d);
    Tensor<float>& stem_for(std::size_t d);
    BnParams<float>& bn_for(std::size_t layer, std::size_t d);
    BnParams<float>& stem_bn_for(std::size_t d);

  private:
    Model() = default;

    bool domain_owns_pw(std::size_t layer, std::size_t d) const;
    std::size_t feature_domain(std::size_t d) const;

    struct BwdFlags;
    Tensor<float> forward_impl(const Tensor<float>& x, std::size_t d, bool train,
                               ForwardCache* cache, const GateAttachment* ga);
    Tensor<float> sep_unit_run(SepUnitCache& unit, std::size_t l, std::size_t d, bool train,
                               const GateAttachment* ga, bool want_cache);
    Grads backward_impl(const ForwardCache& cache, const Tensor<float>& dlogits,
                        const BwdFlags& f);
    Tensor<float> sep_unit_bwd(const SepUnitCache& unit, std::size_t l, std::size_t d,
                               const Tensor<float>& dout, Grads& g, const BwdFlags& f, bool train);

    ModelConfig cfg_;
    std::vector<SepLayerSpec> plan_;
    std::vector<ProjSpec> proj_plan_;

    Tensor<float> stem_;                     // shared standard 3x3 [K,K,Cin,W0]
    std::vector<Tensor<float>> shared_pw_;   // per layer [M,N]
    std::vector<Tensor<float>> shared_proj_; // per transition [Cin,Cout]
    std::vector<Tensor<float>> shared_dw_;   // share_depthwise: per layer [K,K,M]
    std::vector<Tensor<float>> dw_stack_;    // per layer [K,K,M,T]
    std::vector<DomainParams> domains_;
    std::optional<GateAttachment> gates_;
};

}  // namespace mdsep
