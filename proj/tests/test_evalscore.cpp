#include <numeric>
#include <vector>

#include "doctest.h"
#include "mdsep/evalscore.hpp"

using namespace mdsep;

TEST_CASE("argmax breaks ties toward the lowest class index") {
    Tensor<float> logits({2, 4}, 0.0f);
    logits.at2(0, 1) = 3.0f;
    logits.at2(0, 3) = 3.0f;
    CHECK(argmax_row(logits, 0) == 1);
    CHECK(argmax_row(logits, 1) == 0);  // all equal
}

TEST_CASE("test_error trivial and loop-oracle cases") {
    Tensor<float> logits({3, 2}, 0.0f);
    logits.at2(0, 0) = 1.0f;
    logits.at2(1, 1) = 1.0f;
    logits.at2(2, 0) = 1.0f;
    CHECK(test_error(logits, {0, 1, 0}) == 0.0);
    CHECK(test_error(logits, {1, 0, 1}) == 1.0);

    Rng rng(300);
    Tensor<float> big({100, 7});
    std::vector<int> labels;
    for (std::size_t i = 0; i < big.size(); ++i) big[i] = static_cast<float>(rng.uniform());
    for (std::size_t n = 0; n < 100; ++n) labels.push_back(static_cast<int>(rng.next_below(7)));
    std::size_t wrong = 0;
    for (std::size_t n = 0; n < 100; ++n) {
        std::size_t best = 0;
        for (std::size_t l = 1; l < 7; ++l)
            if (big.at2(n, l) > big.at2(n, best)) best = l;
        if (best != static_cast<std::size_t>(labels[n])) ++wrong;
    }
    CHECK(test_error(big, labels) == doctest::Approx(wrong / 100.0).epsilon(1e-12));

    CHECK_THROWS_AS(test_error(Tensor<float>({1, 2}), std::vector<int>{}), ShapeError);
}

TEST_CASE("score: perfect ten domains earn exactly 10000") {
    std::vector<double> e_max = {0.8, 0.5, 0.3, 1.0, 0.65, 0.42, 0.9, 0.17, 0.73, 0.58};
    ScoreSpec spec = make_score_spec(e_max);
    std::vector<double> zeros(10, 0.0);
    ScoreReport r = decathlon_score(zeros, spec);
    CHECK(r.total == 10000.0);
    for (double c : r.contributions) CHECK(c == 1000.0);
}

TEST_CASE("score: error at e_max scores zero; half e_max scores 250") {
    ScoreSpec spec = make_score_spec({0.8});
    CHECK(decathlon_score({0.8}, spec).total == 0.0);
    CHECK(decathlon_score({0.9}, spec).total == 0.0);
    CHECK(decathlon_score({0.4}, spec).total == doctest::Approx(250.0).epsilon(1e-12));
}

TEST_CASE("score is monotone non-increasing in each error") {
    ScoreSpec spec = make_score_spec({0.7, 0.7});
    double prev = 1e18;
    for (double e = 0.0; e <= 1.0; e += 0.05) {
        const double s = decathlon_score({e, 0.3}, spec).total;
        CHECK(s <= prev + 1e-12);
        prev = s;
    }
    CHECK_THROWS_AS(decathlon_score({0.1}, spec), ConfigError);
}

TEST_CASE("e_max derivation from baseline errors") {
    ScoreSpec spec = emax_from_baseline({0.4, 0.6});
    CHECK(spec.e_max[0] == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(spec.alpha[0] == doctest::Approx(1562.5).epsilon(1e-9));
    CHECK(spec.e_max[1] == 1.0);
    CHECK(decathlon_score({0.0, 0.0}, spec).total == 2000.0);
    CHECK_THROWS_AS(emax_from_baseline({0.0}), ConfigError);
    CHECK_THROWS_AS(emax_from_baseline({1.2}), ConfigError);
}

TEST_CASE("score CSV lists every domain and the total") {
    ScoreSpec spec = make_score_spec({0.5, 0.5});
    auto csv = score_report_csv({"a", "b"}, {0.25, 0.5}, spec);
    CHECK(csv.find("domain,error,e_max,alpha,contribution") != std::string::npos);
    CHECK(csv.find("a,0.25") != std::string::npos);
    CHECK(csv.find("total,,,,") != std::string::npos);
}

TEST_CASE("parameter formulas for the 64-channel reference case") {
    ModelConfig cfg;
    cfg.blocks = {{64, 1}};
    cfg.stem_width = 64;
    cfg.input_channels = 64;
    cfg.default_num_classes = 10;
    ParamReport r = count_params(cfg, 1);
    bool found_stem = false, found_dw = false, found_pw = false;
    for (const auto& row : r.rows) {
        if (row.name == "stem") {
            CHECK(row.count == 36864);  // 3*3*64*64
            found_stem = true;
        }
        if (row.name == "sep0/depthwise") {
            CHECK(row.count == 576);  // 3*3*64
            found_dw = true;
        }
        if (row.name == "sep0/pointwise") {
            CHECK(row.count == 4096);  // 64*64
            found_pw = true;
        }
    }
    CHECK(found_stem);
    CHECK(found_dw);
    CHECK(found_pw);
}

TEST_CASE("reference-preset accounting hits the efficiency windows") {
    ParamReport r = count_params(reference_config(), 1);
    CHECK(r.pointwise_fraction >= 0.75);
    CHECK(r.pointwise_fraction <= 0.88);
    CHECK(r.separable_ratio < 0.55);
    const double marginal_frac =
        static_cast<double>(r.marginal) / (r.shared_total + r.per_domain_total);
    CHECK(marginal_frac >= 0.08);
    CHECK(marginal_frac <= 0.14);
}

TEST_CASE("accountant matches the tensors the model actually allocates") {
    for (SharingMode mode : {SharingMode::share_pointwise, SharingMode::individual,
                             SharingMode::share_depthwise, SharingMode::classifier_only}) {
        CAPTURE(sharing_mode_name(mode));
        ModelConfig cfg = desk_config(mode);
        for (std::size_t T = 1; T <= 3; ++T) {
            Rng rng(301);
            Model m = Model::build_base(cfg, rng);
            for (std::size_t d = 0; d < T; ++d)
                m.add_domain({"d" + std::to_string(d), cfg.default_num_classes, 1e-4}, d > 0, rng);
            std::size_t allocated = 0;
            m.visit_tensors([&](const std::string& name, Tensor<float>& t) {
                if (name.find("running_") != std::string::npos) return;
                allocated += t.size();
            });
            CHECK(count_params(cfg, T).total == allocated);
        }
    }
}

TEST_CASE("separable total stays under 0.55x standard at widths above 18") {
    for (std::size_t w : {std::size_t(20), std::size_t(32), std::size_t(64)}) {
        ModelConfig cfg;
        cfg.blocks = {{w, 2}, {2 * w, 2}};
        cfg.stem_width = w;
        ParamReport r = count_params(cfg, 1);
        CHECK(r.separable_ratio < 0.55);
    }
}

TEST_CASE("param report renders text and CSV") {
    ModelConfig cfg = desk_config();
    ParamReport r = count_params(cfg, 2);
    auto text = param_report_text(r, cfg, 2);
    CHECK(text.find("pointwise fraction") != std::string::npos);
    CHECK(text.find("marginal per added domain") != std::string::npos);
    auto csv = param_report_csv(r);
    CHECK(csv.find("name,kind,shape,count,shared") != std::string::npos);
    CHECK(csv.find("classifier") != std::string::npos);
}
