#include "cgfed/dataset.hpp"

#include <cmath>
#include <stdexcept>

#include "cgfed/rng.hpp"

namespace cgfed {

Dataset sample_from_means(const Mat2D& means, Index n, double spread, std::uint64_t seed) {
  if (n <= 0) throw std::invalid_argument("dataset: n_samples must be positive");
  const Index C = means.rows();
  const Index d = means.cols();
  Dataset ds;
  ds.dim = d;
  ds.n_classes = C;
  ds.class_means = means;
  ds.X.resize(n, d);
  ds.labels.resize(static_cast<size_t>(n));
  Rng rng(seed);
  const double s = spread / std::sqrt(static_cast<double>(d));
  for (Index i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % C);
    ds.labels[static_cast<size_t>(i)] = c;
    for (Index j = 0; j < d; ++j) ds.X(i, j) = means(c, j) + s * rng.normal();
  }
  return ds;
}

Dataset make_synthetic(const DataSpec& spec) {
  if (spec.n_classes <= 0 || spec.dim <= 0)
    throw std::invalid_argument("dataset: bad class/dim counts");
  Rng rng(mix_seed(spec.seed, 0x6d65616e73));  // means stream
  Mat2D means(spec.n_classes, spec.dim);
  const double ms = 1.0 / std::sqrt(static_cast<double>(spec.dim));
  for (Index c = 0; c < spec.n_classes; ++c)
    for (Index j = 0; j < spec.dim; ++j) means(c, j) = ms * rng.normal();
  return sample_from_means(means, spec.n_samples, spec.spread,
                           mix_seed(spec.seed, 0x73616d706c6573));
}

}  // namespace cgfed
