#include "mdsep/data.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"
#include "mdsep/dtb.hpp"

namespace mdsep {

namespace fs = std::filesystem;
using nlohmann::json;

void Dataset::validate() const {
    if (num_classes < 2) throw DataError("dataset " + domain + ": num_classes must be >= 2");
    if (images.rank() != 4) throw DataError("dataset " + domain + ": images must be [N,C,H,W]");
    if (images.dim(0) != labels.size())
        throw DataError("dataset " + domain + ": image count != label count");
    if (labels.empty()) throw DataError("dataset " + domain + ": empty split " + split);
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
            throw DataError("dataset " + domain + ": label out of range in split " + split);
}

Dataset load_dataset(const std::string& manifest_path, const std::string& split) {
    std::ifstream in(manifest_path);
    if (!in) throw DataError("cannot open dataset manifest: " + manifest_path);
    json m;
    try {
        in >> m;
    } catch (const json::exception& e) {
        throw DataError("bad dataset manifest " + manifest_path + ": " + e.what());
    }
    const fs::path base = fs::path(manifest_path).parent_path();

    Dataset ds;
    try {
        ds.domain = m.at("name").get<std::string>();
        ds.num_classes = m.at("num_classes").get<std::size_t>();
        const json& splits = m.at("splits");
        if (!splits.contains(split))
            throw DataError("dataset " + ds.domain + ": no split named " + split);
        const json& js = splits.at(split);
        ds.split = split;
        const std::string img_path = (base / js.at("images").get<std::string>()).string();
        const std::string lab_path = (base / js.at("labels").get<std::string>()).string();
        const std::size_t count = js.at("count").get<std::size_t>();

        ds.images = dtb_load_f32(img_path);
        Tensor<float> raw_labels = dtb_load_f32(lab_path);
        if (raw_labels.rank() != 1)
            throw DataError("dataset " + ds.domain + ": labels must be rank 1 (" + lab_path + ")");
        if (ds.images.dim(0) != count || raw_labels.dim(0) != count)
            throw DataError("dataset " + ds.domain + ": split count mismatch in " + split);
        for (std::size_t i = 0; i < raw_labels.size(); ++i) {
            const float v = raw_labels[i];
            if (v != std::floor(v))
                throw DataError("dataset " + ds.domain + ": non-integer label at index " +
                                std::to_string(i));
            ds.labels.push_back(static_cast<int>(v));
        }
    } catch (const json::exception& e) {
        throw DataError("bad dataset manifest field in " + manifest_path + ": " + e.what());
    }

    float mx = 0.0f;
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        if (ds.images[i] < 0.0f)
            throw DataError("dataset " + ds.domain + ": negative pixel value");
        mx = std::max(mx, ds.images[i]);
    }
    if (mx > 1.0f)
        for (std::size_t i = 0; i < ds.images.size(); ++i) ds.images[i] /= 255.0f;

    ds.validate();
    return ds;
}

void save_dataset(const std::map<std::string, Dataset>& splits, const std::string& dir) {
    if (splits.empty()) throw DataError("save_dataset: no splits");
    fs::create_directories(dir);
    const Dataset& first = splits.begin()->second;
    json m;
    m["name"] = first.domain;
    m["num_classes"] = first.num_classes;
    json js = json::object();
    for (const auto& [name, ds] : splits) {
        ds.validate();
        const std::string img = name + "_images.dtb";
        const std::string lab = name + "_labels.dtb";
        dtb_save(ds.images, dir + "/" + img);
        Tensor<float> raw({ds.labels.size()});
        for (std::size_t i = 0; i < ds.labels.size(); ++i)
            raw[i] = static_cast<float>(ds.labels[i]);
        dtb_save(raw, dir + "/" + lab);
        js[name] = {{"images", img}, {"labels", lab}, {"count", ds.size()}};
    }
    m["splits"] = js;
    std::ofstream out(dir + "/manifest.json");
    if (!out) throw DataError("cannot write dataset manifest in " + dir);
    out << m.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Synthetic generators

void SynthDomainSpec::validate() const {
    if (kind != "blobs" && kind != "stripes" && kind != "polygons" && kind != "digits_grid")
        throw ConfigError("unknown synthetic generator kind: " + kind);
    if (num_classes < 2) throw ConfigError("synthetic spec: num_classes must be >= 2");
    if (image_size < 16) throw ConfigError("synthetic spec: image_size must be >= 16");
    if (channels == 0) throw ConfigError("synthetic spec: channels must be >= 1");
    if (noise < 0) throw ConfigError("synthetic spec: noise must be >= 0");
    if (split_counts.empty()) throw ConfigError("synthetic spec: no split counts");
    for (const auto& [s, n] : split_counts)
        if (n == 0) throw ConfigError("synthetic spec: empty split " + s);

    if (kind == "stripes" && num_classes > 18)
        throw ConfigError("stripes generator supports at most 18 classes");
    if (kind == "polygons" && num_classes > 10)
        throw ConfigError("polygons generator supports at most 10 classes");
    if (kind == "blobs") {
        const std::size_t grid = static_cast<std::size_t>(
            std::ceil(std::sqrt(static_cast<double>(num_classes))));
        if (image_size / grid < 6)
            throw ConfigError("blobs generator: too many classes for this image size");
    }
    if (kind == "digits_grid" && num_classes > 100)
        throw ConfigError("digits_grid generator supports at most 100 classes");
}

namespace {

constexpr double kColorProfile[3] = {1.0, 0.65, 0.35};

double color_weight(std::size_t c) { return kColorProfile[c % 3]; }

void render_blob(Tensor<float>& img, std::size_t n, const SynthDomainSpec& spec, int cls,
                 Rng& rng) {
    const std::size_t S = spec.image_size, C = spec.channels;
    const std::size_t grid = static_cast<std::size_t>(
        std::ceil(std::sqrt(static_cast<double>(spec.num_classes))));
    const double cell = static_cast<double>(S) / grid;
    const std::size_t gy = static_cast<std::size_t>(cls) / grid;
    const std::size_t gx = static_cast<std::size_t>(cls) % grid;
    const double cx = (gx + 0.5) * cell + rng.uniform(-cell / 6, cell / 6);
    const double cy = (gy + 0.5) * cell + rng.uniform(-cell / 6, cell / 6);
    const double sigma = cell * 0.28 * (1.0 + rng.uniform(-0.15, 0.15));
    for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
            const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            const double b = 0.12 + 0.78 * std::exp(-d2 / (2 * sigma * sigma));
            for (std::size_t ch = 0; ch < C; ++ch)
                img.at4(n, ch, y, x) = static_cast<float>(b * color_weight(ch));
        }
}

void render_stripes(Tensor<float>& img, std::size_t n, const SynthDomainSpec& spec, int cls,
                    Rng& rng) {
    const std::size_t S = spec.image_size, C = spec.channels;
    const double theta = M_PI * cls / spec.num_classes;
    const double freq =
        2.0 * M_PI * (2.0 + (cls % 3)) / static_cast<double>(S) * (1.0 + rng.uniform(-0.03, 0.03));
    const double phase = rng.uniform(0.0, 0.5);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
            const double b = 0.5 + 0.42 * std::sin(freq * (x * ct + y * st) + phase);
            for (std::size_t ch = 0; ch < C; ++ch)
                img.at4(n, ch, y, x) = static_cast<float>(b * color_weight(ch));
        }
}

void render_polygon(Tensor<float>& img, std::size_t n, const SynthDomainSpec& spec, int cls,
                    Rng& rng) {
    const std::size_t S = spec.image_size, C = spec.channels;
    const int k = 3 + cls;
    const double cx = S * 0.5 + rng.uniform(-S * 0.08, S * 0.08);
    const double cy = S * 0.5 + rng.uniform(-S * 0.08, S * 0.08);
    const double R = S * 0.32 * (1.0 + rng.uniform(-0.1, 0.1));
    const double rot = cls * 0.3 + rng.uniform(-0.1, 0.1);
    const double apothem_scale = std::cos(M_PI / k);
    const double sector = 2.0 * M_PI / k;
    for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
            const double dx = x - cx, dy = y - cy;
            const double r = std::sqrt(dx * dx + dy * dy);
            double phi = std::atan2(dy, dx) - rot;
            phi -= sector * std::floor(phi / sector);
            const double boundary = R * apothem_scale / std::cos(phi - sector / 2);
            const double b = r <= boundary ? 0.8 : 0.12;
            for (std::size_t ch = 0; ch < C; ++ch)
                img.at4(n, ch, y, x) = static_cast<float>(b * color_weight(ch));
        }
}

std::uint16_t grid_mask_for_class(std::uint64_t seed, int cls) {
    // derive a per-class 16-bit cell mask; bump the salt on (rare) collisions
    for (std::uint64_t salt = 0;; ++salt) {
        Rng probe(seed * 2654435761u + salt);
        std::set<std::uint16_t> seen;
        std::vector<std::uint16_t> masks;
        bool ok = true;
        for (int c = 0; c <= cls; ++c) {
            const std::uint16_t mask = static_cast<std::uint16_t>(probe.next_u64() & 0xffff);
            if (mask == 0 || !seen.insert(mask).second) {
                ok = false;
                break;
            }
            masks.push_back(mask);
        }
        if (ok) return masks.back();
    }
}

void render_digits_grid(Tensor<float>& img, std::size_t n, const SynthDomainSpec& spec, int cls,
                        Rng& rng) {
    const std::size_t S = spec.image_size, C = spec.channels;
    const std::uint16_t mask = grid_mask_for_class(spec.seed, cls);
    const double cell = static_cast<double>(S) / 4.0;
    double jitter[16];
    for (int i = 0; i < 16; ++i) jitter[i] = rng.uniform(-0.12, 0.12);
    for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
            const int gx = std::min(3, static_cast<int>(x / cell));
            const int gy = std::min(3, static_cast<int>(y / cell));
            const int bit = gy * 4 + gx;
            const bool on = (mask >> bit) & 1;
            const double b = on ? 0.72 + jitter[bit] : 0.1;
            for (std::size_t ch = 0; ch < C; ++ch)
                img.at4(n, ch, y, x) = static_cast<float>(b * color_weight(ch));
        }
}

}  // namespace

std::map<std::string, Dataset> generate_synth(const SynthDomainSpec& spec) {
    spec.validate();
    std::map<std::string, Dataset> out;
    std::size_t split_id = 0;
    for (const auto& [split, count] : spec.split_counts) {
        // disjoint stream per split so no sample ever repeats across splits
        Rng base(spec.seed);
        Rng rng = base.fork(1000 + split_id);
        ++split_id;

        Dataset ds;
        ds.domain = spec.name.empty() ? spec.kind : spec.name;
        ds.split = split;
        ds.num_classes = spec.num_classes;
        ds.images = Tensor<float>({count, spec.channels, spec.image_size, spec.image_size});
        for (std::size_t i = 0; i < count; ++i) {
            const int cls = static_cast<int>(rng.next_below(spec.num_classes));
            ds.labels.push_back(cls);
            if (spec.kind == "blobs")
                render_blob(ds.images, i, spec, cls, rng);
            else if (spec.kind == "stripes")
                render_stripes(ds.images, i, spec, cls, rng);
            else if (spec.kind == "polygons")
                render_polygon(ds.images, i, spec, cls, rng);
            else
                render_digits_grid(ds.images, i, spec, cls, rng);
            if (spec.noise > 0) {
                float* px = ds.images.data() + i * spec.channels * spec.image_size * spec.image_size;
                const std::size_t per = spec.channels * spec.image_size * spec.image_size;
                for (std::size_t j = 0; j < per; ++j) {
                    px[j] += static_cast<float>(spec.noise * 0.25 * rng.normal());
                    px[j] = std::min(1.0f, std::max(0.0f, px[j]));
                }
            }
        }
        ds.validate();
        out.emplace(split, std::move(ds));
    }
    return out;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    Rng base(seed);
    Rng rng = base.fork(epoch);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.next_below(i)]);
    return idx;
}

Batch gather_batch(const Dataset& ds, const std::vector<std::size_t>& order, std::size_t start,
                   std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("gather_batch: batch_size must be >= 1");
    if (start >= order.size()) throw ConfigError("gather_batch: start beyond dataset");
    const std::size_t end = std::min(order.size(), start + batch_size);
    const std::size_t n = end - start;
    const std::size_t C = ds.images.dim(1), H = ds.images.dim(2), W = ds.images.dim(3);
    const std::size_t per = C * H * W;
    Batch b;
    b.images = Tensor<float>({n, C, H, W});
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t src = order[start + i];
        b.indices.push_back(src);
        b.labels.push_back(ds.labels[src]);
        std::copy(ds.images.data() + src * per, ds.images.data() + (src + 1) * per,
                  b.images.data() + i * per);
    }
    return b;
}

}  // namespace mdsep
