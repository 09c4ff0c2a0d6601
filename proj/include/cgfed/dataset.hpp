#pragma once

#include <cstdint>
#include <vector>

#include "cgfed/tensor.hpp"

namespace cgfed {

// Synthetic classification task: one d-vector per sample, drawn from
// class-conditional Gaussians. Class means have unit-ish norm (entries
// N(0, 1/d)); `spread` is the within-class standard deviation.
struct DataSpec {
  Index n_samples = 4000;
  Index n_classes = 8;
  Index dim = 64;
  double spread = 0.5;
  std::uint64_t seed = 2;
};

struct Dataset {
  Index dim = 0;
  Index n_classes = 0;
  Mat2D X;                  // n x d
  std::vector<int> labels;  // n
  Mat2D class_means;        // n_classes x d

  Index size() const { return X.rows(); }
};

Dataset make_synthetic(const DataSpec& spec);

// Fresh samples from existing class means (held-out evaluation data).
Dataset sample_from_means(const Mat2D& means, Index n, double spread, std::uint64_t seed);

}  // namespace cgfed
