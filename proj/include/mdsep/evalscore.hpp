#pragma once

#include <string>
#include <vector>

#include "mdsep/data.hpp"
#include "mdsep/model.hpp"

namespace mdsep {

// ---------------------------------------------------------------------------
// Test error and the decathlon-style score

// Argmax with ties broken toward the lowest class index.
std::size_t argmax_row(const Tensor<float>& logits, std::size_t row);

// Fraction of rows whose argmax differs from the label.
double test_error(const Tensor<float>& logits, const std::vector<int>& labels);

// Full-split error: batched eval-mode forward over the dataset.
double test_error(Model& model, std::size_t d, const Dataset& ds, std::size_t batch_size = 128);

struct ScoreSpec {
    std::vector<double> e_max;
    std::vector<double> gamma;
    std::vector<double> alpha;  // 1000 * e_max^(-gamma): a perfect domain scores 1000

    void validate() const;
};

ScoreSpec make_score_spec(const std::vector<double>& e_max, double gamma = 2.0);

// E_max_i = min(1, 2 * baseline_i), alphas derived.
ScoreSpec emax_from_baseline(const std::vector<double>& baseline_errors, double gamma = 2.0);

struct ScoreReport {
    double total = 0.0;
    std::vector<double> contributions;
};

// S = sum_i alpha_i * max(0, e_max_i - e_i)^gamma_i
ScoreReport decathlon_score(const std::vector<double>& errors, const ScoreSpec& spec);

std::string score_report_csv(const std::vector<std::string>& domains,
                             const std::vector<double>& errors, const ScoreSpec& spec);

// ---------------------------------------------------------------------------
// Parameter accountant. Counts per filter: standard 3*3*c1*c2, depthwise
// 3*3*c1, pointwise c1*c2; BN affine pairs and classifier heads included in
// the totals, running statistics excluded (they are not parameters).

struct ParamRow {
    std::string name;
    std::string kind;  // standard | depthwise | pointwise | projection | bn | classifier
    std::string shape;
    std::size_t count = 0;
    bool shared = false;  // shared across domains under the given mode
};

struct ParamReport {
    std::vector<ParamRow> rows;       // one model instance with T domains
    std::size_t total = 0;            // all parameters, T domains
    std::size_t shared_total = 0;     // parameters shared across domains
    std::size_t per_domain_total = 0; // parameters belonging to a single domain
    std::size_t marginal = 0;         // report(T+1).total - report(T).total
    std::size_t conv_total = 0;       // stem + dw + pw + proj, single domain
    std::size_t pointwise_total = 0;  // pw params, single domain
    double pointwise_fraction = 0.0;  // pointwise_total / conv_total
    std::size_t separable_total = 0;  // dw + pw over the separable layers
    std::size_t standard_total = 0;   // 3x3 standard conv with the same widths
    double separable_ratio = 0.0;     // separable_total / standard_total
};

ParamReport count_params(const ModelConfig& cfg, std::size_t num_domains);

std::string param_report_text(const ParamReport& r, const ModelConfig& cfg,
                              std::size_t num_domains);
std::string param_report_csv(const ParamReport& r);

}  // namespace mdsep
