#pragma once

#include <map>
#include <string>
#include <vector>

#include "mdsep/rng.hpp"
#include "mdsep/tensor.hpp"

namespace mdsep {

// In-memory labelled image set for one domain and one split. Pixel values are
// kept in [0,1]; the loader rescales 0..255 payloads on the way in.
struct Dataset {
    std::string domain;
    std::string split;
    std::size_t num_classes = 0;
    Tensor<float> images;  // [N, C, H, W]
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    void validate() const;
};

// Manifest JSON layout:
//   {"name": ..., "num_classes": ...,
//    "splits": {"train": {"images": path, "labels": path, "count": N}, ...}}
// Image/label paths are relative to the manifest's directory. Labels are a
// rank-1 f32 DTB holding exact integers.
Dataset load_dataset(const std::string& manifest_path, const std::string& split);

// Writes every split's tensors plus the manifest into dir.
void save_dataset(const std::map<std::string, Dataset>& splits, const std::string& dir);

// Synthetic domain generators. Each kind varies a different spatial statistic
// across classes while keeping the same fixed cross-channel color profile:
//   blobs       - soft disc whose grid position/size encodes the class
//   stripes     - oriented sinusoid; orientation and frequency encode the class
//   polygons    - regular outline with class-dependent vertex count
//   digits_grid - 4x4 cell mask selected by the class index
struct SynthDomainSpec {
    std::string kind;
    std::string name;
    std::size_t num_classes = 10;
    std::size_t image_size = 32;
    std::size_t channels = 3;
    double noise = 0.1;
    std::uint64_t seed = 1;
    std::map<std::string, std::size_t> split_counts;  // e.g. {"train",2000},{"test",500}

    void validate() const;
};

std::map<std::string, Dataset> generate_synth(const SynthDomainSpec& spec);

// Deterministic epoch shuffle: same (seed, epoch) gives the same permutation.
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed, std::size_t epoch);

struct Batch {
    Tensor<float> images;
    std::vector<int> labels;
    std::vector<std::size_t> indices;
};

Batch gather_batch(const Dataset& ds, const std::vector<std::size_t>& order, std::size_t start,
                   std::size_t batch_size);

}  // namespace mdsep
