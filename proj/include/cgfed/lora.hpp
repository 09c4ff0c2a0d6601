#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "cgfed/dataset.hpp"
#include "cgfed/rng.hpp"
#include "cgfed/tensor.hpp"

namespace cgfed {

// Toy target model with four adapted projections per layer. The block is
//   h' = h + g * ((h Wv) Wo),   g = sigmoid(<h Wq, h Wk> / sqrt(d))
// followed by a frozen linear head. Base weights are immutable after init;
// only the low-rank factors train.

inline constexpr int kNumProj = 4;  // projection order: K, Q, V, O
inline constexpr const char* kProjNames[kNumProj] = {"K", "Q", "V", "O"};

struct ModelConfig {
  Index dim = 64;
  Index layers = 4;
  Index rank = 4;
  Index n_classes = 8;
  std::uint64_t seed = 1;
};

// Per layer and projection: A is rank x dim, B is dim x rank. The effective
// weight update for a projection is B*A (dim x dim).
struct LoraFactors {
  Index layers = 0, rank = 0, dim = 0;
  std::vector<std::array<Tensor, kNumProj>> A;
  std::vector<std::array<Tensor, kNumProj>> B;

  static LoraFactors zero(Index layers, Index rank, Index dim);
  bool shape_matches(const LoraFactors& o) const;
};

struct TargetModel {
  ModelConfig cfg;
  std::vector<std::array<Tensor, kNumProj>> W;  // frozen dim x dim
  Tensor head;                                  // frozen dim x n_classes
};

// Dense accumulated weight delta per (layer, projection); the authoritative
// global adapter state (sums of factor products do not refactor).
struct GlobalDelta {
  std::vector<std::array<Tensor, kNumProj>> D;  // dim x dim
  static GlobalDelta zero(Index layers, Index dim);
};

struct InitResult {
  TargetModel model;
  LoraFactors factors;  // A Gaussian (scale 1/sqrt(r)), B zero
};
InitResult init_model(const ModelConfig& cfg);

// Canvas packing: rows = 2*r*4*L, cols = d. Slab order is layer-major, then
// projection K,Q,V,O, and within each (layer, proj) the A slab (r rows)
// followed by the B-transpose slab (r rows). pack/unpack is an exact
// bijection.
Index canvas_rows(Index layers, Index rank);
Tensor pack(const LoraFactors& f);
LoraFactors unpack(const Tensor& canvas, Index layers, Index rank, Index dim);

// d*r*2*n_proj*L: uplink element count of one uncompressed factor update.
std::uint64_t count_transmitted_params(Index d, Index r, Index L, Index n_proj);

// Elementwise sums of A's and of B's, in list order. Deliberately not
// sum of per-client products.
LoraFactors aggregate(const std::vector<LoraFactors>& clients);

LoraFactors factors_sub(const LoraFactors& a, const LoraFactors& b);
LoraFactors factors_add(const LoraFactors& a, const LoraFactors& b);

// Folds eta * (B~ A~) into the dense accumulator, per projection.
void apply_global_update(GlobalDelta& delta, const LoraFactors& agg, double eta);

// Plain Eigen evaluation of the adapted model (no autodiff); also serves as
// the independent forward path checked against the graph build in tests.
Mat2D model_logits(const TargetModel& m, const GlobalDelta& delta, const Mat2D& X);

struct EvalResult {
  double accuracy = 0.0;
  double xent = 0.0;
};
EvalResult evaluate(const TargetModel& m, const GlobalDelta& delta, const Dataset& ds);

// Graph-built toy model surfaces (used by local_train internally and by the
// finite-difference tests): cross-entropy loss and its factor gradients for
// a fixed batch, and the graph-path logits.
Mat2D toy_logits_graph(const TargetModel& m, const GlobalDelta& delta,
                       const LoraFactors& factors, const Mat2D& X);
double toy_loss(const TargetModel& m, const GlobalDelta& delta, const LoraFactors& factors,
                const Mat2D& X, const std::vector<int>& labels);
LoraFactors toy_loss_grad(const TargetModel& m, const GlobalDelta& delta,
                          const LoraFactors& factors, const Mat2D& X,
                          const std::vector<int>& labels);

struct LocalTrainResult {
  LoraFactors delta;       // post-training factors minus round-start factors
  double mean_loss = 0.0;  // average minibatch loss over all steps
  long steps = 0;
};

// Runs `epochs` of Adam on cross-entropy over the shard (given as sample
// indices into ds), starting from `start` factors on top of the frozen
// W + D weights. Base weights and D are untouched; the returned delta is
// what the client transmits.
LocalTrainResult local_train(const TargetModel& m, const GlobalDelta& delta,
                             const LoraFactors& start, const Dataset& ds,
                             const std::vector<Index>& shard, int epochs, double lr,
                             Index batch, Rng& rng);

}  // namespace cgfed
