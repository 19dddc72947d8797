#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mdsep/data.hpp"
#include "mdsep/model.hpp"
#include "mdsep/optim.hpp"

namespace mdsep {

// Flat key=value run configuration. '#' starts a comment, blank lines are
// skipped, duplicate keys are an error. Every key must be consumed by the
// command that runs; leftovers are reported as unknown. Values resolved
// during the run (including defaults) are recorded so the effective config
// can be written next to the outputs.
class RunConfig {
  public:
    static RunConfig parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path);
        std::ostringstream buf;
        buf << in.rdbuf();
        return parse_text(buf.str(), path);
    }

    static RunConfig parse_text(const std::string& text, const std::string& origin = "<inline>") {
        RunConfig c;
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) +
                                  ": expected key=value");
            std::string key = trim(line.substr(0, eq));
            std::string value = trim(line.substr(eq + 1));
            if (key.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            if (!c.kv_.emplace(key, value).second)
                throw ConfigError(origin + ": duplicate key " + key);
        }
        return c;
    }

    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    std::string get(const std::string& key) {
        auto it = kv_.find(key);
        if (it == kv_.end()) throw ConfigError("missing required config key: " + key);
        used_.insert(key);
        resolved_[key] = it->second;
        return it->second;
    }

    std::string get(const std::string& key, const std::string& fallback) {
        auto it = kv_.find(key);
        const std::string v = it == kv_.end() ? fallback : it->second;
        if (it != kv_.end()) used_.insert(key);
        resolved_[key] = v;
        return v;
    }

    double get_double(const std::string& key, double fallback) {
        return parse_double(key, get(key, format_double(fallback)));
    }
    double get_double(const std::string& key) { return parse_double(key, get(key)); }

    std::size_t get_size(const std::string& key, std::size_t fallback) {
        return parse_size(key, get(key, std::to_string(fallback)));
    }
    std::size_t get_size(const std::string& key) { return parse_size(key, get(key)); }

    bool get_bool(const std::string& key, bool fallback) {
        const std::string v = get(key, fallback ? "true" : "false");
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw ConfigError("config key " + key + ": expected true/false, got " + v);
    }

    std::vector<std::string> get_list(const std::string& key, const std::string& fallback) {
        std::vector<std::string> out;
        std::istringstream in(get(key, fallback));
        std::string item;
        while (std::getline(in, item, ',')) {
            item = trim(item);
            if (!item.empty()) out.push_back(item);
        }
        return out;
    }

    std::vector<std::size_t> get_size_list(const std::string& key, const std::string& fallback) {
        std::vector<std::size_t> out;
        for (const auto& s : get_list(key, fallback)) out.push_back(parse_size(key, s));
        return out;
    }

    // override from the command line; recorded like any other resolved value
    void set(const std::string& key, const std::string& value) {
        kv_[key] = value;
        resolved_[key] = value;
        used_.insert(key);
    }

    void reject_unknown() const {
        for (const auto& [key, value] : kv_)
            if (!used_.count(key)) throw ConfigError("unknown config key: " + key);
    }

    std::string resolved_text() const {
        std::ostringstream out;
        for (const auto& [key, value] : resolved_) out << key << "=" << value << "\n";
        return out.str();
    }

  private:
    static std::string trim(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return "";
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    }
    static double parse_double(const std::string& key, const std::string& v) {
        try {
            std::size_t pos = 0;
            const double d = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return d;
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + ": not a number: " + v);
        }
    }
    static std::size_t parse_size(const std::string& key, const std::string& v) {
        try {
            std::size_t pos = 0;
            const long long n = std::stoll(v, &pos);
            if (pos != v.size() || n < 0) throw std::invalid_argument(v);
            return static_cast<std::size_t>(n);
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + ": not a non-negative integer: " + v);
        }
    }
    static std::string format_double(double d) {
        std::ostringstream s;
        s << d;
        return s.str();
    }

    std::map<std::string, std::string> kv_;
    std::set<std::string> used_;
    std::map<std::string, std::string> resolved_;
};

// ---------------------------------------------------------------------------
// Section builders shared by the CLI commands

inline ModelConfig model_from_config(RunConfig& c) {
    const std::string preset = c.get("model.preset", "desk");
    const SharingMode mode = sharing_mode_from_name(c.get("model.mode", "share_pointwise"));
    ModelConfig cfg;
    if (preset == "desk") {
        cfg = desk_config(mode);
    } else if (preset == "reference") {
        cfg = reference_config(mode);
    } else if (preset == "custom") {
        cfg.mode = mode;
        cfg.preset_name = "custom";
        const auto widths = c.get_size_list("model.widths", "16,32,64");
        const auto depth = c.get_size("model.res_blocks", 2);
        for (std::size_t w : widths) cfg.blocks.push_back({w, depth});
        cfg.stem_width = widths.empty() ? 0 : widths[0];
        cfg.input_channels = c.get_size("model.input_channels", 3);
        cfg.input_resolution = c.get_size("model.input_resolution", 32);
        cfg.last_layer_domain_specific = c.get_bool("model.last_layer_domain_specific", true);
        cfg.default_num_classes = c.get_size("model.default_num_classes", 10);
    } else {
        throw ConfigError("model.preset must be desk, reference, or custom");
    }
    cfg.validate();
    return cfg;
}

inline OptimConfig optim_from_config(RunConfig& c, const std::string& prefix,
                                     const OptimConfig& defaults) {
    OptimConfig o;
    o.lr0 = c.get_double(prefix + ".lr0", defaults.lr0);
    o.momentum = c.get_double(prefix + ".momentum", defaults.momentum);
    o.weight_decay = c.get_double(prefix + ".weight_decay", defaults.weight_decay);
    o.epochs = c.get_size(prefix + ".epochs", defaults.epochs);
    std::string decay_default;
    for (std::size_t e : defaults.decay_epochs)
        decay_default += (decay_default.empty() ? "" : ",") + std::to_string(e);
    o.decay_epochs = c.get_size_list(prefix + ".decay_epochs", decay_default);
    o.decay_factor = c.get_double(prefix + ".decay_factor", defaults.decay_factor);
    o.batch_size = c.get_size(prefix + ".batch_size", defaults.batch_size);
    o.validate();
    return o;
}

inline std::vector<std::string> domain_names_from_config(RunConfig& c) {
    auto names = c.get_list("data.domains", "");
    if (names.empty()) throw ConfigError("config must list data.domains");
    return names;
}

struct DomainDataConfig {
    std::string name;
    std::string manifest;  // non-empty: load from disk
    SynthDomainSpec synth;
    double weight_decay = 1e-4;
};

inline DomainDataConfig domain_data_from_config(RunConfig& c, const std::string& name) {
    const std::string p = "data." + name + ".";
    DomainDataConfig d;
    d.name = name;
    d.weight_decay = c.get_double(p + "weight_decay", 1e-4);
    d.manifest = c.get(p + "manifest", "");
    if (!d.manifest.empty()) return d;
    d.synth.kind = c.get(p + "kind");
    d.synth.name = name;
    d.synth.num_classes = c.get_size(p + "classes", 10);
    d.synth.image_size = c.get_size(p + "size", 32);
    d.synth.noise = c.get_double(p + "noise", 0.1);
    d.synth.seed = c.get_size(p + "seed", 1);
    d.synth.split_counts["train"] = c.get_size(p + "train", 2000);
    d.synth.split_counts["test"] = c.get_size(p + "test", 500);
    const std::size_t val = c.get_size(p + "val", 0);
    if (val > 0) d.synth.split_counts["val"] = val;
    d.synth.validate();
    return d;
}

inline Dataset load_domain_split(const DomainDataConfig& d, const std::string& split) {
    if (!d.manifest.empty()) return load_dataset(d.manifest, split);
    auto splits = generate_synth(d.synth);
    auto it = splits.find(split);
    if (it == splits.end())
        throw DataError("domain " + d.name + ": no split named " + split);
    return std::move(it->second);
}

}  // namespace mdsep
