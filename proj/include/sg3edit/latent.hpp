#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "core.hpp"

namespace sg3 {

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Input noise code, z ~ N(0, I).
struct LatentZ {
  std::vector<double> values;

  int dim() const { return static_cast<int>(values.size()); }
  friend bool operator==(const LatentZ&, const LatentZ&) = default;
};

/// Intermediate code w.
struct LatentW {
  std::vector<double> values;

  int dim() const { return static_cast<int>(values.size()); }
  friend bool operator==(const LatentW&, const LatentW&) = default;
};

/// One code per synthesis layer, rows w0 ... w15.
class LatentWPlus {
 public:
  LatentWPlus() = default;
  explicit LatentWPlus(int dim) : dim_(dim), data_(static_cast<std::size_t>(kNumLayers) * dim, 0.0) {}

  /// Lifts a W code by row replication.
  static LatentWPlus broadcast(const LatentW& w) {
    LatentWPlus out(w.dim());
    for (int k = 0; k < kNumLayers; ++k) std::copy(w.values.begin(), w.values.end(), out.row(k).begin());
    return out;
  }

  static LatentWPlus from_flat(int dim, std::vector<double> flat) {
    require(flat.size() == static_cast<std::size_t>(kNumLayers) * dim, ErrorCode::DimensionMismatch,
            "W+ code needs 16 rows");
    LatentWPlus out;
    out.dim_ = dim;
    out.data_ = std::move(flat);
    return out;
  }

  int dim() const { return dim_; }
  std::span<double> row(int k) { return {data_.data() + static_cast<std::size_t>(k) * dim_, static_cast<std::size_t>(dim_)}; }
  std::span<const double> row(int k) const {
    return {data_.data() + static_cast<std::size_t>(k) * dim_, static_cast<std::size_t>(dim_)};
  }
  LatentW row_w(int k) const { return LatentW{{row(k).begin(), row(k).end()}}; }
  void set_row(int k, const LatentW& w) {
    require(w.dim() == dim_, ErrorCode::DimensionMismatch, "row dimension mismatch");
    std::copy(w.values.begin(), w.values.end(), row(k).begin());
  }

  std::vector<double>& flat() { return data_; }
  const std::vector<double>& flat() const { return data_; }

  LatentWPlus& operator+=(const LatentWPlus& o) {
    require(o.dim_ == dim_, ErrorCode::DimensionMismatch, "W+ dimension mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  friend bool operator==(const LatentWPlus&, const LatentWPlus&) = default;

 private:
  int dim_ = 0;
  std::vector<double> data_;
};

/// Concatenated per-layer affine outputs. layer_offsets has kNumLayers + 1
/// entries; layer k owns [layer_offsets[k], layer_offsets[k + 1]). Layer 0 is
/// the four first-layer transform parameters.
struct StyleVector {
  std::vector<double> values;
  std::vector<std::size_t> layer_offsets;

  std::size_t size() const { return values.size(); }
  std::span<double> layer(int k) {
    return {values.data() + layer_offsets[k], layer_offsets[k + 1] - layer_offsets[k]};
  }
  std::span<const double> layer(int k) const {
    return {values.data() + layer_offsets[k], layer_offsets[k + 1] - layer_offsets[k]};
  }
  /// Layer owning channel index i.
  int layer_of(std::size_t i) const {
    for (int k = 0; k < kNumLayers; ++k)
      if (i < layer_offsets[k + 1]) return k;
    throw Error(ErrorCode::OutOfBounds, "style channel index out of range");
  }

  friend bool operator==(const StyleVector&, const StyleVector&) = default;
};

}  // namespace sg3
