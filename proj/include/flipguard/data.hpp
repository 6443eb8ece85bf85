#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flipguard/tensor.hpp"

namespace flipguard {

// A labelled sample set: X is {n, d}, y holds class indices. Model
// datasets keep features inside [0,1]; DatasetSplit::validate enforces
// that (the consistency experiments reuse this container with raw
// plane coordinates).
struct LabeledSet {
  Tensor x;  // {n, d}
  std::vector<int> y;

  std::size_t size() const { return y.size(); }
  std::size_t dim() const { return x.rank() == 2 ? x.shape[1] : 0; }
  Tensor row(std::size_t i) const;
  int num_classes() const;  // 1 + max label
};

// Per-sample identity hashes (feature bytes + label); used for the
// train/validation/test leakage guard and for report identity.
std::vector<std::uint64_t> sample_hashes(const LabeledSet& s);
std::uint64_t set_hash(const LabeledSet& s);

struct DatasetSplit {
  LabeledSet train, validation, test;
  std::string provenance;

  // Partitions pairwise disjoint (by sample identity), features inside
  // [0,1], at least two classes present everywhere. Throws otherwise.
  void validate() const;
};

enum class SyntheticKind : std::uint8_t { Gaussians, Moons, Rings };
SyntheticKind synthetic_kind_from_name(const std::string& s);

// Deterministic synthetic dataset, min-max scaled into [0,1]^d and
// split 70/15/15 with a seeded shuffle.
//   gaussians: class blobs on a circle, min mean distance margin*noise.
//   moons:     two interleaved half-circles (classes must be 2).
//   rings:     concentric rings, radial gap margin*noise.
DatasetSplit make_synthetic(SyntheticKind kind, std::size_t n,
                            std::size_t dim, std::size_t classes,
                            double margin, double noise, std::uint64_t seed);

// Desk benchmark: a 4-class 2-D mixture of two concentric rings and
// two off-center blobs, sized so naive model updates show flip rates
// of a few percent.
DatasetSplit make_benchmark(std::size_t n, std::uint64_t seed);

enum class DataFormat : std::uint8_t { Csv, Idx };

// csv: header line, then label,feature,... rows with features already
// in [0,1]. idx: big-endian image/label pair (path names the image
// file; the label path is derived), pixels scaled by 1/255. Both are
// split 70/15/15 with a fixed documented shuffle seed.
DatasetSplit load_dataset(const std::string& path, DataFormat format);

void save_csv(const LabeledSet& s, const std::string& path);
LabeledSet load_csv(const std::string& path);

}  // namespace flipguard
