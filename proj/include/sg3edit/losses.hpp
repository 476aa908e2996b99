#pragma once

#include <cmath>

#include "clients.hpp"
#include "image.hpp"

namespace sg3 {

struct LossWeights {
  double l2 = 1.0;
  double lpips = 0.8;
  double id = 0.1;

  void validate() const {
    require(l2 >= 0 && lpips >= 0 && id >= 0 && std::isfinite(l2 + lpips + id), ErrorCode::InvalidArgument,
            "loss weights must be finite and non-negative");
  }
};

struct LossBreakdown {
  double total = 0.0;
  double l2 = 0.0;     ///< mean squared pixel error
  double lpips = 0.0;  ///< perceptual distance
  double id = 0.0;     ///< 1 - identity similarity
};

/// total = l2 * L2 + lpips * perceptual + id * (1 - similarity), between
/// target x and reconstruction y. A term whose weight is zero is skipped
/// when its client is missing; a missing client with a nonzero weight is an
/// error. When grad_y is non-null it receives dTotal/dy.
inline LossBreakdown reconstruction_loss(const Image& x, const Image& y, const LossWeights& w,
                                         PerceptualMetric* perceptual, IdentityMetric* identity,
                                         Image* grad_y = nullptr) {
  require_same_shape(x, y, "reconstruction_loss");
  w.validate();
  require(perceptual || w.lpips == 0.0, ErrorCode::ClientUnavailable, "perceptual metric required (lpips weight > 0)");
  require(identity || w.id == 0.0, ErrorCode::ClientUnavailable, "identity metric required (id weight > 0)");
  LossBreakdown out;
  out.l2 = mean_squared_error(x, y);
  if (grad_y) {
    *grad_y = Image(y.width, y.height, y.channels);
    const double scale = 2.0 * w.l2 / static_cast<double>(y.data.size());
    for (std::size_t i = 0; i < y.data.size(); ++i) grad_y->data[i] = scale * (y.data[i] - x.data[i]);
  }
  if (perceptual) {
    Image g;
    const bool want = grad_y && w.lpips != 0.0;
    out.lpips = perceptual->distance(x, y, want ? &g : nullptr);
    if (want)
      for (std::size_t i = 0; i < g.data.size(); ++i) grad_y->data[i] += w.lpips * g.data[i];
  }
  if (identity) {
    Image g;
    const bool want = grad_y && w.id != 0.0;
    out.id = 1.0 - identity->similarity(x, y, want ? &g : nullptr);
    if (want)
      for (std::size_t i = 0; i < g.data.size(); ++i) grad_y->data[i] -= w.id * g.data[i];
  }
  out.total = w.l2 * out.l2 + w.lpips * out.lpips + w.id * out.id;
  return out;
}

}  // namespace sg3
