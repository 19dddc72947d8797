#include "mdsep/evalscore.hpp"

#include <cmath>
#include <sstream>

namespace mdsep {

std::size_t argmax_row(const Tensor<float>& logits, std::size_t row) {
    const std::size_t L = logits.dim(1);
    std::size_t best = 0;
    for (std::size_t l = 1; l < L; ++l)
        if (logits.at2(row, l) > logits.at2(row, best)) best = l;
    return best;
}

double test_error(const Tensor<float>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw ShapeError("test_error: logits must be [N,L]");
    if (logits.dim(0) != labels.size()) throw ShapeError("test_error: label count mismatch");
    if (labels.empty()) throw DataError("test_error: empty evaluation set");
    std::size_t wrong = 0;
    for (std::size_t n = 0; n < labels.size(); ++n)
        if (argmax_row(logits, n) != static_cast<std::size_t>(labels[n])) ++wrong;
    return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

double test_error(Model& model, std::size_t d, const Dataset& ds, std::size_t batch_size) {
    if (ds.size() == 0) throw DataError("test_error: empty evaluation set");
    std::vector<std::size_t> order(ds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t wrong = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        Batch b = gather_batch(ds, order, start, batch_size);
        Tensor<float> logits = model.forward(b.images, d, false);
        for (std::size_t n = 0; n < b.labels.size(); ++n)
            if (argmax_row(logits, n) != static_cast<std::size_t>(b.labels[n])) ++wrong;
    }
    return static_cast<double>(wrong) / static_cast<double>(ds.size());
}

void ScoreSpec::validate() const {
    if (e_max.empty()) throw ConfigError("score spec: no domains");
    if (gamma.size() != e_max.size() || alpha.size() != e_max.size())
        throw ConfigError("score spec: field lengths disagree");
    for (double e : e_max)
        if (!(e > 0.0 && e <= 1.0)) throw ConfigError("score spec: e_max must be in (0,1]");
}

ScoreSpec make_score_spec(const std::vector<double>& e_max, double gamma) {
    ScoreSpec s;
    s.e_max = e_max;
    for (double e : e_max) {
        if (!(e > 0.0 && e <= 1.0)) throw ConfigError("score spec: e_max must be in (0,1]");
        s.gamma.push_back(gamma);
        s.alpha.push_back(1000.0 * std::pow(e, -gamma));
    }
    return s;
}

ScoreSpec emax_from_baseline(const std::vector<double>& baseline_errors, double gamma) {
    std::vector<double> e_max;
    for (double b : baseline_errors) {
        if (!(b > 0.0 && b <= 1.0))
            throw ConfigError("baseline errors must be in (0,1] to derive a score spec");
        e_max.push_back(std::min(1.0, 2.0 * b));
    }
    return make_score_spec(e_max, gamma);
}

ScoreReport decathlon_score(const std::vector<double>& errors, const ScoreSpec& spec) {
    spec.validate();
    if (errors.size() != spec.e_max.size())
        throw ConfigError("decathlon_score: error list length != score spec domains");
    ScoreReport r;
    for (std::size_t i = 0; i < errors.size(); ++i) {
        const double margin = std::max(0.0, spec.e_max[i] - errors[i]);
        // alpha * margin^gamma, computed as a ratio so a perfect domain is
        // exactly 1000 regardless of rounding in e_max^(-gamma)
        const double c = 1000.0 * std::pow(margin / spec.e_max[i], spec.gamma[i]);
        r.contributions.push_back(c);
        r.total += c;
    }
    return r;
}

std::string score_report_csv(const std::vector<std::string>& domains,
                             const std::vector<double>& errors, const ScoreSpec& spec) {
    if (domains.size() != errors.size())
        throw ConfigError("score_report_csv: domain list length mismatch");
    ScoreReport r = decathlon_score(errors, spec);
    std::ostringstream out;
    out << "domain,error,e_max,alpha,contribution\n";
    for (std::size_t i = 0; i < domains.size(); ++i)
        out << domains[i] << "," << errors[i] << "," << spec.e_max[i] << "," << spec.alpha[i]
            << "," << r.contributions[i] << "\n";
    out << "total,,,," << r.total << "\n";
    return out.str();
}

// ---------------------------------------------------------------------------
// Parameter accountant

namespace {

struct Ownership {
    bool stem_shared, dw_shared, proj_shared, bn_shared;
};

Ownership ownership_for(SharingMode mode) {
    switch (mode) {
        case SharingMode::individual: return {false, false, false, false};
        case SharingMode::classifier_only: return {true, true, true, true};
        case SharingMode::share_depthwise: return {true, true, false, false};
        default: return {true, false, true, false};  // share_pointwise
    }
}

bool pw_shared_at(const ModelConfig& cfg, const SepLayerSpec& l) {
    switch (cfg.mode) {
        case SharingMode::individual:
        case SharingMode::share_depthwise: return false;
        case SharingMode::classifier_only: return true;
        default: return !(cfg.last_layer_domain_specific && l.is_last);
    }
}

std::string shape3(std::size_t a, std::size_t b, std::size_t c) {
    return std::to_string(a) + "x" + std::to_string(b) + "x" + std::to_string(c);
}

}  // namespace

ParamReport count_params(const ModelConfig& cfg, std::size_t num_domains) {
    cfg.validate();
    if (num_domains == 0) throw ConfigError("count_params: need at least one domain");
    const auto plan = layer_plan(cfg);
    const auto projs = projection_plan(cfg);
    const Ownership own = ownership_for(cfg.mode);
    const std::size_t T = num_domains;
    const std::size_t L = cfg.default_num_classes;
    ParamReport r;

    auto add = [&](const std::string& name, const std::string& kind, const std::string& shape,
                   std::size_t count, bool shared) {
        r.rows.push_back({name, kind, shape, count, shared});
        if (shared) {
            r.shared_total += count;
        } else {
            r.per_domain_total += count;
        }
    };

    const std::size_t stem_count = 3 * 3 * cfg.input_channels * cfg.stem_width;
    add("stem", "standard",
        "3x3x" + std::to_string(cfg.input_channels) + "x" + std::to_string(cfg.stem_width),
        stem_count, own.stem_shared);

    for (std::size_t l = 0; l < plan.size(); ++l) {
        const std::size_t dw = 3 * 3 * plan[l].in_ch;
        const std::size_t pw = plan[l].in_ch * plan[l].out_ch;
        add("sep" + std::to_string(l) + "/depthwise", "depthwise", shape3(3, 3, plan[l].in_ch), dw,
            own.dw_shared);
        add("sep" + std::to_string(l) + "/pointwise", "pointwise",
            std::to_string(plan[l].in_ch) + "x" + std::to_string(plan[l].out_ch), pw,
            pw_shared_at(cfg, plan[l]));
        r.conv_total += dw + pw;
        r.pointwise_total += pw;
        r.separable_total += dw + pw;
        r.standard_total += 3 * 3 * plan[l].in_ch * plan[l].out_ch;
    }

    for (std::size_t p = 0; p < projs.size(); ++p) {
        const std::size_t c = projs[p].in_ch * projs[p].out_ch;
        add("proj" + std::to_string(p), "projection",
            std::to_string(projs[p].in_ch) + "x" + std::to_string(projs[p].out_ch), c,
            own.proj_shared);
        r.conv_total += c;
    }
    r.conv_total += stem_count;

    std::size_t bn_channels = cfg.stem_width;
    for (const auto& l : plan) bn_channels += l.out_ch;
    add("batchnorm", "bn", "2x" + std::to_string(bn_channels), 2 * bn_channels, own.bn_shared);

    const std::size_t feat = cfg.blocks.back().width;
    add("classifier", "classifier", std::to_string(feat) + "x" + std::to_string(L) + "+bias",
        feat * L + L, false);

    r.total = r.shared_total + T * r.per_domain_total;
    r.marginal = r.per_domain_total;
    r.pointwise_fraction = static_cast<double>(r.pointwise_total) / r.conv_total;
    r.separable_ratio = static_cast<double>(r.separable_total) / r.standard_total;
    return r;
}

std::string param_report_text(const ParamReport& r, const ModelConfig& cfg,
                              std::size_t num_domains) {
    std::ostringstream out;
    out << "parameter report: preset=" << (cfg.preset_name.empty() ? "custom" : cfg.preset_name)
        << " mode=" << sharing_mode_name(cfg.mode) << " domains=" << num_domains << "\n";
    for (const auto& row : r.rows)
        out << "  " << row.name << " (" << row.kind << ", " << row.shape << "): " << row.count
            << (row.shared ? " [shared]" : " [per-domain]") << "\n";
    out << "shared total: " << r.shared_total << "\n";
    out << "per-domain total: " << r.per_domain_total << "\n";
    out << "grand total (" << num_domains << " domains): " << r.total << "\n";
    out << "marginal per added domain: " << r.marginal << " ("
        << 100.0 * r.marginal / (r.shared_total + r.per_domain_total) << "% of one full model)\n";
    out << "pointwise fraction of conv params: " << r.pointwise_fraction << "\n";
    out << "separable/standard conv ratio: " << r.separable_ratio << "\n";
    return out.str();
}

std::string param_report_csv(const ParamReport& r) {
    std::ostringstream out;
    out << "name,kind,shape,count,shared\n";
    for (const auto& row : r.rows)
        out << row.name << "," << row.kind << "," << row.shape << "," << row.count << ","
            << (row.shared ? 1 : 0) << "\n";
    return out.str();
}

}  // namespace mdsep
