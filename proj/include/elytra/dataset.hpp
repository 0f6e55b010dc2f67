#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "elytra/io.hpp"
#include "elytra/tensor.hpp"

namespace elytra {

enum class Split { train, val, test };
std::string_view split_name(Split split);
Split split_from_name(std::string_view name);

struct DatasetConfig {
    std::size_t classes = 8;
    std::size_t per_class = 400;
    std::size_t image_size = 32;
    std::uint64_t seed = 0;
    std::array<double, 3> ratios{0.7, 0.15, 0.15};

    void validate() const;
    Json to_json() const;
    static DatasetConfig from_json(const Json &j);
};

/// Number of classes with a hand-designed look; larger configs are rejected.
inline constexpr std::size_t kMaxClasses = 21;
/// Class names in index order for a k-class set.
std::vector<std::string> class_names(std::size_t classes);

struct SampleRecord {
    std::size_t id = 0;
    int label = 0;
    Split split = Split::train;
    /// Offset of the first float of this image in the blob.
    std::size_t offset = 0;
};

struct Dataset {
    DatasetConfig config;
    std::vector<std::string> names;
    /// Sorted by id; images are stored in the same order.
    std::vector<SampleRecord> records;
    /// [N×3×H×W] in [0,1].
    Tensor images;

    std::vector<std::size_t> split_ids(Split split) const;
    Tensor split_images(Split split) const;
    std::vector<int> split_labels(Split split) const;
    std::size_t split_count(Split split) const;
    std::string content_hash() const;
};

/// Renders k·n images: each class is a (silhouette, colours, glyph) design
/// drawn with random affine jitter, brightness, haze and background noise. The
/// result is already split with config.ratios.
Dataset generate(const DatasetConfig &cfg);

/// Per-class shuffled partition: train = round(r₀n), val = round(r₁n), test = rest.
void stratified_split(Dataset &ds, const std::array<double, 3> &ratios, std::uint64_t seed);

/// CSV mirror with header class,image_source,dataset.
std::string splits_csv(const Dataset &ds);
/// Split tags by record id parsed back from a CSV mirror.
std::vector<Split> parse_splits_csv(const std::string &csv, std::size_t expected_rows);

/// Dataset directory: manifest.json, data.f32, splits.csv.
void save_dataset(const std::filesystem::path &dir, const Dataset &ds);
/// Checks blob length, record offsets, the CSV mirror and split disjointness.
Dataset load_dataset(const std::filesystem::path &dir);

} // namespace elytra
