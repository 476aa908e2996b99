#pragma once

#include <map>

#include <sg3edit/dci.hpp>
#include <sg3edit/generator.hpp>

namespace sg3::testing {

/// Shared toy generator; building it samples 10^5 mapped codes, so tests
/// construct it once per binary.
inline const GeneratorHandle& toy() {
  static const GeneratorHandle g = make_toy_generator();
  return g;
}

inline LatentWPlus random_code(const GeneratorHandle& g, std::uint64_t seed, std::uint64_t index) {
  return sample_wplus_random(g, static_cast<int>(index) + 1, seed).back();
}

/// Classifier that recognizes the images of a DCI run by hash and reports a
/// linear mix of the latent features behind them. Attribute names are row
/// indices of `mix` ("0", "1", ...).
inline FunctionClassifier latent_oracle(const GeneratorHandle& g, LatentSpace space, std::uint64_t seed, int n,
                                        const Matrix& mix) {
  auto table = std::make_shared<std::map<std::uint64_t, std::vector<double>>>();
  for (int i = 0; i < n; ++i) {
    auto s = dci_sample(g, space, seed, static_cast<std::uint64_t>(i), true);
    (*table)[s.image.hash()] = s.features;
  }
  return FunctionClassifier([table, mix](const Image& img, const std::string& attr) {
    const auto it = table->find(img.hash());
    if (it == table->end()) throw Error(ErrorCode::NotFound, "oracle does not know this image");
    const std::size_t k = std::stoul(attr);
    double acc = 0.0;
    for (std::size_t j = 0; j < mix.cols; ++j) acc += mix(k, j) * it->second[j];
    return acc;
  });
}

inline std::vector<std::string> attribute_names(std::size_t k) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(std::to_string(i));
  return out;
}

inline Matrix identity_matrix(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

inline Matrix dense_mixing(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Matrix m(rows, cols);
  Rng rng = make_rng(seed, 5);
  for (double& v : m.data) v = normal(rng);
  return m;
}

}  // namespace sg3::testing
