#pragma once

#include "tempnoise/diffcore.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace tempnoise {

/// One labelled multivariate time series. Labels are 0-based in memory and
/// 1-based on disk.
struct Sequence {
  std::string id;
  Matrix features;  // T x d, row t holds x_t
  std::vector<int> clean_labels;
  std::optional<std::vector<int>> noisy_labels;

  bool operator==(const Sequence&) const = default;
};

struct Provenance {
  std::string source;  // "hmm", a file path, ...
  std::uint64_t seed = 0;
  std::string detail;

  bool operator==(const Provenance&) const = default;
};

struct SequenceDataset {
  int d = 0;
  int T = 0;
  int C = 0;
  std::vector<Sequence> sequences;
  Provenance provenance;

  std::size_t size() const { return sequences.size(); }
  bool has_noisy_labels() const;
  /// Throws ConfigError on inhomogeneous shapes or out-of-range labels.
  void validate() const;

  bool operator==(const SequenceDataset&) const = default;
};

/// What an estimator is allowed to see: features and noisy labels only.
struct TrainingSet {
  int d = 0;
  int T = 0;
  int C = 0;
  std::vector<Matrix> features;
  std::vector<std::vector<int>> noisy_labels;

  std::size_t size() const { return features.size(); }
};

/// Strips the clean track. Throws ConfigError if noisy labels are missing.
TrainingSet noisy_view(const SequenceDataset& dataset);

/// Replaces the noisy track with a copy of the clean track.
SequenceDataset with_clean_as_noisy(SequenceDataset dataset);

struct HmmSpec {
  int n = 1000;
  int d = 10;
  int T = 50;
  int C = 2;
  double variance = 1.5;
  Matrix transition;  // C x C; empty means uniform
  std::uint64_t seed = 0;

  Matrix transition_matrix() const;
  void validate() const;
};

/// Gaussian-emission HMM with uniform initial state. Class k (0-based) emits
/// d independent N(k + 1, variance) features. Sequence i draws from its own
/// stream derived from (seed, i).
SequenceDataset generate_hmm(const HmmSpec& spec);

struct Split {
  SequenceDataset train;
  SequenceDataset test;
};

/// Sequence-level random partition with round(test_fraction * n) test sequences.
Split split(const SequenceDataset& dataset, double test_fraction, std::uint64_t seed);

/// Line-delimited JSON: a header record with d, T, C followed by one record
/// per sequence.
void save_dataset(const SequenceDataset& dataset, const std::filesystem::path& path);
SequenceDataset load_dataset(const std::filesystem::path& path);

}  // namespace tempnoise
