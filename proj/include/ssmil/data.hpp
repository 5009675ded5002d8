#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "ssmil/linalg.hpp"
#include "ssmil/mil.hpp"

namespace ssmil {

// ---------------------------------------------------------------------------
// Dataset model

struct SyntheticConfig {
  std::size_t n_classes = 5;
  std::size_t n_bags_per_class = 40;
  std::size_t min_instances = 30;
  std::size_t max_instances = 80;
  double planted_fraction = 0.15;
  std::size_t feature_dim = 64;
  double class_signal_strength = 5.0;
  double noise_scale = 0.4;
  /// Shared cell types every background instance is drawn from.
  std::size_t background_types = 4;
  /// Present each pattern in a random dihedral orientation of the square grid.
  bool random_orientation = true;
  /// Shift each instance cyclically by a random offset along both grid axes.
  bool random_translation = false;
  /// With oriented patterns, restricts them to the span of the lowest
  /// frequencies x frequencies separable cosine modes; 0 leaves them unrestricted.
  std::size_t pattern_frequencies = 0;
  /// Label whose bags contain background instances only.
  std::size_t control_class = 0;
  /// Draws the cell-type patterns; corpora sharing it share their cell types.
  std::uint64_t pattern_seed = 1;
  /// Draws bags, orientations and noise.
  std::uint64_t seed = 1;

  void validate() const;
};

struct BagRecord {
  std::string bag_id;
  std::size_t label = 0;
  std::size_t n_instances = 0;
  std::size_t offset = 0;  // first instance row in the blob
};

struct DatasetManifest {
  std::size_t n_classes = 0;
  std::size_t feature_dim = 0;
  std::vector<BagRecord> bags;
  std::string provenance = "external";  // "synthetic" or "external"
  std::uint64_t seed = 0;
  std::string generator;  // serialized generator settings for synthetic data

  std::size_t n_bags() const { return bags.size(); }
  std::size_t total_instances() const;
  void validate(std::size_t blob_rows) const;
};

/// Manifest plus instance values. Values are held at stored (32-bit) precision
/// so a written and re-read dataset is indistinguishable from the original.
struct Dataset {
  DatasetManifest manifest;
  std::vector<float> blob;  // total_instances x feature_dim, row-major

  Matrix bag_instances(std::size_t bag) const;
  Bag bag(std::size_t index) const;
  std::vector<std::size_t> labels() const;
  /// Instances of the given bags stacked in order.
  Matrix pooled_instances(const std::vector<std::size_t>& bag_indices) const;
};

/// Hidden ground truth of a synthetic dataset, indexed by global instance row.
/// Training code never receives this.
struct PlantedTruth {
  std::vector<std::uint8_t> planted;
  /// Pattern each instance was drawn from: planted instances carry their
  /// class index, background instances n_classes + background type.
  std::vector<std::size_t> cell_type;

  std::size_t size() const { return planted.size(); }
};

struct SyntheticDataset {
  Dataset dataset;
  PlantedTruth truth;
};

SyntheticDataset generate_synthetic(const SyntheticConfig& config);

/// Writes `manifest`, `instances.bin` and, when given, `planted_truth`.
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset, const PlantedTruth* truth = nullptr);
Dataset read_dataset(const std::filesystem::path& dir);
PlantedTruth read_planted_truth(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Dihedral symmetries of a square grid

/// Side of the square grid a feature vector of this length forms, or 0.
std::size_t grid_side(std::size_t feature_dim);

/// Applies element `g` (0..7) of the dihedral group: g % 4 quarter turns,
/// followed by a horizontal mirror when g >= 4.
void dihedral_transform(std::span<const double> in, std::span<double> out, std::size_t side, unsigned g);
/// Cyclic shift: out(r, c) = in((r - dr) mod side, (c - dc) mod side).
void cyclic_shift(std::span<const double> in, std::span<double> out, std::size_t side, std::size_t dr, std::size_t dc);

// ---------------------------------------------------------------------------
// Splits and sampling

struct FoldSplit {
  std::size_t fold_index = 0;
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

/// k stratified folds; each fold's non-test bags are split 75/25 into
/// train/validation per class, giving 60/20/20 overall.
std::vector<FoldSplit> stratified_kfold(const std::vector<std::size_t>& labels, std::size_t k, std::uint64_t seed);

/// Draws `epoch_length` bag indices with replacement, each with probability
/// proportional to 1 / (size of its class within `train`).
std::vector<std::size_t> balanced_bag_sampler(const std::vector<std::size_t>& train,
                                              const std::vector<std::size_t>& labels, std::uint64_t seed,
                                              std::size_t epoch_length);

// ---------------------------------------------------------------------------
// Augmentation

struct HorizontalFlip { double p = 0.5; };
struct VerticalFlip { double p = 0.5; };
struct Rotate90 { double p = 0.5; };
struct GaussianNoise { double sigma = 0.0; };
struct ScaleJitter { double low = 1.0; double high = 1.0; };
/// Uniformly random cyclic shift along both grid axes.
struct RandomShift {};
enum class CropView { global_view, local_view };
/// Keeps a random square window covering `fraction` of the grid side and
/// zeroes the rest; the feature dimension is unchanged.
struct CropMask {
  CropView view = CropView::global_view;
  double fraction = 0.75;
};

using Transform = std::variant<HorizontalFlip, VerticalFlip, Rotate90, GaussianNoise, ScaleJitter, RandomShift, CropMask>;

struct AugmentationSpec {
  std::vector<Transform> transforms;

  void validate() const;
  /// Random dihedral orientation (the three flips/turns at p = 0.5).
  static AugmentationSpec dihedral();
};

/// One augmented view of a single instance.
Vector apply_augmentations(const AugmentationSpec& spec, std::span<const double> instance, std::mt19937_64& rng);
/// Row-wise application; rows are processed in order from one rng stream.
Matrix apply_augmentations(const AugmentationSpec& spec, const Matrix& instances, std::mt19937_64& rng);

struct MultiCropSpec {
  std::size_t n_global = 2;
  std::size_t n_local = 8;
  AugmentationSpec global;
  AugmentationSpec local;
};

/// n_global global views followed by n_local local views.
std::vector<Matrix> multi_crop(const MultiCropSpec& spec, const Matrix& instances, std::mt19937_64& rng);

}  // namespace ssmil
