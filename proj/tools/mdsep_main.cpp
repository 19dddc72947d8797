#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "mdsep/config.hpp"
#include "mdsep/evalscore.hpp"
#include "mdsep/gradcheck.hpp"
#include "mdsep/trainer.hpp"

namespace fs = std::filesystem;
using namespace mdsep;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct RunContext {
    RunConfig cfg;
    std::uint64_t seed = 1;
    std::string out_dir;
    ModelConfig model_cfg;
    OptimConfig opt_pretrain, opt_finetune, opt_gate;
    std::vector<DomainDataConfig> domains;
    bool gate_softmax_after_mean = false;
};

// Consumes every section the config file can declare so that leftover keys
// are reported as unknown regardless of which command runs.
RunContext load_context(const std::string& config_path, const std::string& out_override,
                        long long seed_override) {
    RunContext ctx;
    ctx.cfg = RunConfig::parse_file(config_path);
    ctx.seed = ctx.cfg.get_size("seed", 1);
    if (seed_override >= 0) {
        ctx.cfg.set("seed", std::to_string(seed_override));
        ctx.seed = static_cast<std::uint64_t>(seed_override);
    }
    ctx.out_dir = ctx.cfg.get("output_dir", "out");
    if (!out_override.empty()) {
        ctx.cfg.set("output_dir", out_override);
        ctx.out_dir = out_override;
    }
    ctx.model_cfg = model_from_config(ctx.cfg);
    const bool full_scale = ctx.model_cfg.preset_name == "reference";
    ctx.opt_pretrain = optim_from_config(ctx.cfg, "optim.pretrain",
                                         full_scale ? preset_base_pretrain() : preset_desk_pretrain());
    ctx.opt_finetune = optim_from_config(
        ctx.cfg, "optim.finetune", full_scale ? preset_domain_finetune() : preset_desk_finetune());
    ctx.opt_gate = optim_from_config(ctx.cfg, "optim.gate",
                                     full_scale ? preset_gate_training() : preset_desk_gate());
    for (const auto& name : domain_names_from_config(ctx.cfg))
        ctx.domains.push_back(domain_data_from_config(ctx.cfg, name));
    ctx.gate_softmax_after_mean = ctx.cfg.get_bool("gate.softmax_after_mean", false);
    ctx.cfg.reject_unknown();
    return ctx;
}

const DomainDataConfig& domain_by_name(const RunContext& ctx, const std::string& name) {
    for (const auto& d : ctx.domains)
        if (d.name == name) return d;
    throw ConfigError("domain not declared in data.domains: " + name);
}

void write_text(const std::string& path, const std::string& content) {
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << content;
}

void write_run_outputs(const RunContext& ctx, Model& model, const TrainResult& result) {
    model.save(ctx.out_dir + "/model");
    write_text(ctx.out_dir + "/metrics.csv", metrics_csv(result.metrics));
    write_text(ctx.out_dir + "/resolved_config.txt", ctx.cfg.resolved_text());
}

int cmd_pretrain(const std::string& config_path, const std::string& out, long long seed) {
    RunContext ctx = load_context(config_path, out, seed);
    const DomainDataConfig& base = ctx.domains.at(0);
    Dataset train = load_domain_split(base, "train");
    Dataset test = load_domain_split(base, "test");

    Rng rng(ctx.seed);
    Model model = Model::build_base(ctx.model_cfg, rng);
    model.add_domain({base.name, train.num_classes, base.weight_decay}, false, rng);
    TrainResult r =
        train_phase(model, Phase::pretrain_base, 0, train, &test, ctx.opt_pretrain, ctx.seed);
    write_run_outputs(ctx, model, r);
    std::cout << "pretrained base domain " << base.name << "; final test accuracy "
              << r.metrics.back().accuracy << "\n";
    return 0;
}

int cmd_add_domain(const std::string& config_path, const std::string& bundle,
                   const std::string& domain, const std::string& out, long long seed) {
    RunContext ctx = load_context(config_path, out, seed);
    const DomainDataConfig& dd = domain_by_name(ctx, domain);
    Dataset train = load_domain_split(dd, "train");
    Dataset test = load_domain_split(dd, "test");

    Model model = Model::load(bundle);
    Rng rng(ctx.seed);
    const std::size_t d =
        model.add_domain({dd.name, train.num_classes, dd.weight_decay}, true, rng);
    TrainResult r =
        train_phase(model, Phase::finetune_domain, d, train, &test, ctx.opt_finetune, ctx.seed);
    write_run_outputs(ctx, model, r);
    std::cout << "added domain " << dd.name << " (id " << d << "); final test accuracy "
              << r.metrics.back().accuracy << "\n";
    return 0;
}

int cmd_train_gate(const std::string& config_path, const std::string& bundle,
                   const std::string& domain, const std::string& region, const std::string& out,
                   long long seed) {
    RunContext ctx = load_context(config_path, out, seed);
    const DomainDataConfig& dd = domain_by_name(ctx, domain);
    Dataset train = load_domain_split(dd, "train");
    Dataset test = load_domain_split(dd, "test");

    GateRegion r = GateRegion::late;
    if (region == "early")
        r = GateRegion::early;
    else if (region == "middle")
        r = GateRegion::middle;
    else if (region != "late")
        throw ConfigError("region must be early, middle, or late");

    Model model = Model::load(bundle);
    Rng rng(ctx.seed);
    const std::size_t d = model.find_domain(domain);
    model.attach_gates(d, r, ctx.gate_softmax_after_mean, rng);
    TrainResult tr =
        train_phase(model, Phase::gate_train, d, train, &test, ctx.opt_gate, ctx.seed);
    write_run_outputs(ctx, model, tr);
    std::cout << "trained " << region << " gates for domain " << domain
              << "; final test accuracy " << tr.metrics.back().accuracy
              << "; worst simplex deviation " << tr.worst_simplex_deviation << "\n";
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& bundle,
             const std::string& domain, long long seed) {
    RunContext ctx = load_context(config_path, "", seed);
    const DomainDataConfig& dd = domain_by_name(ctx, domain);
    Dataset test = load_domain_split(dd, "test");
    Model model = Model::load(bundle);
    const double e = test_error(model, model.find_domain(domain), test);
    std::cout << "domain " << domain << " test error: " << e << "\n";
    return 0;
}

int cmd_score(const std::string& config_path, const std::string& bundle,
              const std::string& errors_csv, const std::string& emax_csv,
              const std::string& baseline_csv, long long seed) {
    auto parse_list = [](const std::string& s) {
        std::vector<double> out;
        std::istringstream in(s);
        std::string item;
        while (std::getline(in, item, ',')) {
            if (item.empty()) continue;
            out.push_back(std::stod(item));
        }
        return out;
    };

    std::vector<double> errors;
    std::vector<std::string> names;
    if (!errors_csv.empty()) {
        errors = parse_list(errors_csv);
        for (std::size_t i = 0; i < errors.size(); ++i) names.push_back("d" + std::to_string(i));
    } else {
        if (bundle.empty() || config_path.empty())
            throw ConfigError("score needs either --errors or --bundle with --config");
        RunContext ctx = load_context(config_path, "", seed);
        Model model = Model::load(bundle);
        for (std::size_t d = 0; d < model.num_domains(); ++d) {
            const std::string name = model.domain_spec(d).name;
            Dataset test = load_domain_split(domain_by_name(ctx, name), "test");
            errors.push_back(test_error(model, d, test));
            names.push_back(name);
        }
    }

    ScoreSpec spec;
    if (!emax_csv.empty())
        spec = make_score_spec(parse_list(emax_csv));
    else if (!baseline_csv.empty())
        spec = emax_from_baseline(parse_list(baseline_csv));
    else
        throw ConfigError("score needs --emax or --baseline");

    std::cout << score_report_csv(names, errors, spec);
    std::cout << "score: " << decathlon_score(errors, spec).total << "\n";
    return 0;
}

int cmd_params(const std::string& config_path, std::size_t num_domains, const std::string& out,
               long long seed) {
    RunContext ctx = load_context(config_path, out, seed);
    const std::size_t T = num_domains > 0 ? num_domains : ctx.domains.size();
    ParamReport r = count_params(ctx.model_cfg, T);
    std::cout << param_report_text(r, ctx.model_cfg, T);
    if (!out.empty()) write_text(out + "/params.csv", param_report_csv(r));
    return 0;
}

int cmd_gradcheck(bool inject_fault) {
    bool all_pass = true;
    for (const auto& r : run_gradcheck_suite(inject_fault)) {
        std::cout << (r.pass ? "pass" : "FAIL") << "  " << r.op
                  << "  max rel err = " << r.max_rel_err << "\n";
        all_pass = all_pass && r.pass;
    }
    if (!all_pass) {
        std::cout << "gradcheck: FAILURE\n";
        return kExitNumeric;
    }
    std::cout << "gradcheck: all backward implementations match finite differences\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-domain depthwise-separable network engine"};
    app.require_subcommand(1);

    std::string config_path, bundle, domain, region = "late", out, errors_csv, emax_csv,
                baseline_csv;
    long long seed = -1;
    std::size_t num_domains = 0;
    bool serial = false, inject_fault = false;

    auto add_common = [&](CLI::App* sub, bool need_config) {
        auto* opt = sub->add_option("--config", config_path, "run configuration file");
        if (need_config) opt->required();
        sub->add_option("--seed", seed, "override the config seed");
        sub->add_flag("--serial", serial, "bit-exact single-threaded mode (always on)");
    };

    auto* pre = app.add_subcommand("pretrain", "train the base domain from scratch");
    add_common(pre, true);
    pre->add_option("--out", out, "output directory (overrides output_dir)");

    auto* add = app.add_subcommand("add-domain", "finetune a new domain onto a bundle");
    add_common(add, true);
    add->add_option("--bundle", bundle, "input model bundle")->required();
    add->add_option("--domain", domain, "domain name from data.domains")->required();
    add->add_option("--out", out, "output directory");

    auto* gate = app.add_subcommand("train-gate", "train soft-sharing gates on a frozen bundle");
    add_common(gate, true);
    gate->add_option("--bundle", bundle, "input model bundle")->required();
    gate->add_option("--domain", domain, "target domain")->required();
    gate->add_option("--region", region, "early|middle|late");
    gate->add_option("--out", out, "output directory");

    auto* ev = app.add_subcommand("eval", "report a domain's test error");
    add_common(ev, true);
    ev->add_option("--bundle", bundle, "model bundle")->required();
    ev->add_option("--domain", domain, "domain name")->required();

    auto* sc = app.add_subcommand("score", "decathlon-style score over domains");
    add_common(sc, false);
    sc->add_option("--bundle", bundle, "model bundle to evaluate");
    sc->add_option("--errors", errors_csv, "comma-separated per-domain errors");
    sc->add_option("--emax", emax_csv, "comma-separated per-domain e_max");
    sc->add_option("--baseline", baseline_csv, "derive e_max as 2x these baseline errors");

    auto* pr = app.add_subcommand("params", "parameter accounting report");
    add_common(pr, true);
    pr->add_option("--domains", num_domains, "domain count (default: data.domains length)");
    pr->add_option("--out", out, "also write params.csv here");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference backward verification");
    gc->add_flag("--inject-fault", inject_fault,
                 "flip one gradient's sign to prove the checker catches it");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (pre->parsed()) return cmd_pretrain(config_path, out, seed);
        if (add->parsed()) return cmd_add_domain(config_path, bundle, domain, out, seed);
        if (gate->parsed())
            return cmd_train_gate(config_path, bundle, domain, region, out, seed);
        if (ev->parsed()) return cmd_eval(config_path, bundle, domain, seed);
        if (sc->parsed())
            return cmd_score(config_path, bundle, errors_csv, emax_csv, baseline_csv, seed);
        if (pr->parsed()) return cmd_params(config_path, num_domains, out, seed);
        if (gc->parsed()) return cmd_gradcheck(inject_fault);
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return kExitConfig;
    } catch (const ShapeError& e) {
        std::cerr << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << e.what() << "\n";
        return kExitData;
    } catch (const NumericError& e) {
        std::cerr << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
