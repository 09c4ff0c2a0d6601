#include "cgfed/lora.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

#include "cgfed/graph.hpp"

namespace cgfed {

LoraFactors LoraFactors::zero(Index layers, Index rank, Index dim) {
  LoraFactors f;
  f.layers = layers;
  f.rank = rank;
  f.dim = dim;
  f.A.resize(static_cast<size_t>(layers));
  f.B.resize(static_cast<size_t>(layers));
  for (Index l = 0; l < layers; ++l) {
    for (int p = 0; p < kNumProj; ++p) {
      f.A[static_cast<size_t>(l)][static_cast<size_t>(p)] = Tensor::zeros({rank, dim});
      f.B[static_cast<size_t>(l)][static_cast<size_t>(p)] = Tensor::zeros({dim, rank});
    }
  }
  return f;
}

bool LoraFactors::shape_matches(const LoraFactors& o) const {
  return layers == o.layers && rank == o.rank && dim == o.dim;
}

GlobalDelta GlobalDelta::zero(Index layers, Index dim) {
  GlobalDelta g;
  g.D.resize(static_cast<size_t>(layers));
  for (Index l = 0; l < layers; ++l)
    for (int p = 0; p < kNumProj; ++p)
      g.D[static_cast<size_t>(l)][static_cast<size_t>(p)] = Tensor::zeros({dim, dim});
  return g;
}

InitResult init_model(const ModelConfig& cfg) {
  if (cfg.dim <= 0 || cfg.layers <= 0 || cfg.rank <= 0 || cfg.n_classes <= 0)
    throw std::invalid_argument("init_model: dimensions must be positive");
  if (cfg.rank >= cfg.dim) throw std::invalid_argument("init_model: rank must be < dim");

  Rng rng(cfg.seed);
  const double ws = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  const double as = 1.0 / std::sqrt(static_cast<double>(cfg.rank));

  InitResult out;
  out.model.cfg = cfg;
  out.model.W.resize(static_cast<size_t>(cfg.layers));
  for (Index l = 0; l < cfg.layers; ++l) {
    for (int p = 0; p < kNumProj; ++p) {
      Tensor w = Tensor::zeros({cfg.dim, cfg.dim});
      for (Index i = 0; i < w.numel(); ++i) w.data[i] = ws * rng.normal();
      out.model.W[static_cast<size_t>(l)][static_cast<size_t>(p)] = std::move(w);
    }
  }
  out.model.head = Tensor::zeros({cfg.dim, cfg.n_classes});
  for (Index i = 0; i < out.model.head.numel(); ++i) out.model.head.data[i] = ws * rng.normal();

  out.factors = LoraFactors::zero(cfg.layers, cfg.rank, cfg.dim);
  for (Index l = 0; l < cfg.layers; ++l)
    for (int p = 0; p < kNumProj; ++p) {
      Tensor& A = out.factors.A[static_cast<size_t>(l)][static_cast<size_t>(p)];
      for (Index i = 0; i < A.numel(); ++i) A.data[i] = as * rng.normal();
    }
  return out;
}

Index canvas_rows(Index layers, Index rank) { return 2 * rank * kNumProj * layers; }

Tensor pack(const LoraFactors& f) {
  const Index rows = canvas_rows(f.layers, f.rank);
  Tensor canvas = Tensor::zeros({rows, f.dim});
  auto cm = canvas.mat(rows, f.dim);
  Index row = 0;
  for (Index l = 0; l < f.layers; ++l) {
    for (int p = 0; p < kNumProj; ++p) {
      const Tensor& A = f.A[static_cast<size_t>(l)][static_cast<size_t>(p)];
      const Tensor& B = f.B[static_cast<size_t>(l)][static_cast<size_t>(p)];
      cm.middleRows(row, f.rank) = A.mat(f.rank, f.dim);
      row += f.rank;
      cm.middleRows(row, f.rank) = B.mat(f.dim, f.rank).transpose();
      row += f.rank;
    }
  }
  return canvas;
}

LoraFactors unpack(const Tensor& canvas, Index layers, Index rank, Index dim) {
  const Index rows = canvas_rows(layers, rank);
  if (canvas.shape != Shape{rows, dim})
    throw std::invalid_argument("unpack: canvas shape " + shape_str(canvas.shape) +
                                " does not match expected [" + std::to_string(rows) + "," +
                                std::to_string(dim) + "]");
  LoraFactors f = LoraFactors::zero(layers, rank, dim);
  auto cm = canvas.mat(rows, dim);
  Index row = 0;
  for (Index l = 0; l < layers; ++l) {
    for (int p = 0; p < kNumProj; ++p) {
      f.A[static_cast<size_t>(l)][static_cast<size_t>(p)].mat(rank, dim) =
          cm.middleRows(row, rank);
      row += rank;
      f.B[static_cast<size_t>(l)][static_cast<size_t>(p)].mat(dim, rank) =
          cm.middleRows(row, rank).transpose();
      row += rank;
    }
  }
  return f;
}

std::uint64_t count_transmitted_params(Index d, Index r, Index L, Index n_proj) {
  if (d <= 0 || L <= 0 || n_proj <= 0 || r < 0)
    throw std::invalid_argument("count_transmitted_params: bad arguments");
  return static_cast<std::uint64_t>(d) * static_cast<std::uint64_t>(r) * 2ULL *
         static_cast<std::uint64_t>(n_proj) * static_cast<std::uint64_t>(L);
}

LoraFactors aggregate(const std::vector<LoraFactors>& clients) {
  if (clients.empty()) throw std::invalid_argument("aggregate: empty client list");
  LoraFactors sum = LoraFactors::zero(clients[0].layers, clients[0].rank, clients[0].dim);
  for (const auto& c : clients) {
    if (!c.shape_matches(sum)) throw std::invalid_argument("aggregate: shape mismatch");
    for (Index l = 0; l < sum.layers; ++l)
      for (int p = 0; p < kNumProj; ++p) {
        sum.A[static_cast<size_t>(l)][static_cast<size_t>(p)].data +=
            c.A[static_cast<size_t>(l)][static_cast<size_t>(p)].data;
        sum.B[static_cast<size_t>(l)][static_cast<size_t>(p)].data +=
            c.B[static_cast<size_t>(l)][static_cast<size_t>(p)].data;
      }
  }
  return sum;
}

LoraFactors factors_sub(const LoraFactors& a, const LoraFactors& b) {
  if (!a.shape_matches(b)) throw std::invalid_argument("factors_sub: shape mismatch");
  LoraFactors out = LoraFactors::zero(a.layers, a.rank, a.dim);
  for (Index l = 0; l < a.layers; ++l)
    for (int p = 0; p < kNumProj; ++p) {
      out.A[static_cast<size_t>(l)][static_cast<size_t>(p)].data =
          a.A[static_cast<size_t>(l)][static_cast<size_t>(p)].data -
          b.A[static_cast<size_t>(l)][static_cast<size_t>(p)].data;
      out.B[static_cast<size_t>(l)][static_cast<size_t>(p)].data =
          a.B[static_cast<size_t>(l)][static_cast<size_t>(p)].data -
          b.B[static_cast<size_t>(l)][static_cast<size_t>(p)].data;
    }
  return out;
}

LoraFactors factors_add(const LoraFactors& a, const LoraFactors& b) {
  if (!a.shape_matches(b)) throw std::invalid_argument("factors_add: shape mismatch");
  LoraFactors out = LoraFactors::zero(a.layers, a.rank, a.dim);
  for (Index l = 0; l < a.layers; ++l)
    for (int p = 0; p < kNumProj; ++p) {
      out.A[static_cast<size_t>(l)][static_cast<size_t>(p)].data =
          a.A[static_cast<size_t>(l)][static_cast<size_t>(p)].data +
          b.A[static_cast<size_t>(l)][static_cast<size_t>(p)].data;
      out.B[static_cast<size_t>(l)][static_cast<size_t>(p)].data =
          a.B[static_cast<size_t>(l)][static_cast<size_t>(p)].data +
          b.B[static_cast<size_t>(l)][static_cast<size_t>(p)].data;
    }
  return out;
}

void apply_global_update(GlobalDelta& delta, const LoraFactors& agg, double eta) {
  if (delta.D.size() != static_cast<size_t>(agg.layers))
    throw std::invalid_argument("apply_global_update: layer count mismatch");
  const Index d = agg.dim, r = agg.rank;
  for (Index l = 0; l < agg.layers; ++l)
    for (int p = 0; p < kNumProj; ++p) {
      Tensor& D = delta.D[static_cast<size_t>(l)][static_cast<size_t>(p)];
      if (D.shape != Shape{d, d}) throw std::invalid_argument("apply_global_update: shape");
      D.mat(d, d).noalias() +=
          eta * (agg.B[static_cast<size_t>(l)][static_cast<size_t>(p)].mat(d, r) *
                 agg.A[static_cast<size_t>(l)][static_cast<size_t>(p)].mat(r, d));
    }
}

Mat2D model_logits(const TargetModel& m, const GlobalDelta& delta, const Mat2D& X) {
  const Index d = m.cfg.dim;
  if (X.cols() != d) throw std::invalid_argument("model_logits: input width mismatch");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Mat2D h = X;
  for (Index l = 0; l < m.cfg.layers; ++l) {
    const auto& Wl = m.W[static_cast<size_t>(l)];
    const auto& Dl = delta.D[static_cast<size_t>(l)];
    Mat2D k = h * (Wl[0].mat(d, d) + Dl[0].mat(d, d));
    Mat2D q = h * (Wl[1].mat(d, d) + Dl[1].mat(d, d));
    Mat2D v = h * (Wl[2].mat(d, d) + Dl[2].mat(d, d));
    Mat2D o = v * (Wl[3].mat(d, d) + Dl[3].mat(d, d));
    Arr1D s = (q.array() * k.array()).rowwise().sum() * inv_sqrt_d;
    Arr1D g = 1.0 / (1.0 + (-s).exp());
    h.array() += o.array().colwise() * g;
  }
  return h * m.head.mat(d, m.cfg.n_classes);
}

EvalResult evaluate(const TargetModel& m, const GlobalDelta& delta, const Dataset& ds) {
  const Mat2D logits = model_logits(m, delta, ds.X);
  const Index n = logits.rows();
  EvalResult r;
  long correct = 0;
  double loss = 0.0;
  for (Index i = 0; i < n; ++i) {
    Index argmax = 0;
    logits.row(i).maxCoeff(&argmax);
    if (static_cast<int>(argmax) == ds.labels[static_cast<size_t>(i)]) ++correct;
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    loss += lse - logits(i, ds.labels[static_cast<size_t>(i)]);
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  r.xent = loss / static_cast<double>(n);
  return r;
}

namespace {

struct ToyGraph {
  Graph g;
  NodeId loss = -1;
  std::vector<std::shared_ptr<Tensor>> params;  // creation order: A then B per (l, p)
};

// Builds the batch-size-specific training graph over shared factor tensors.
std::unique_ptr<ToyGraph> build_toy_graph(const TargetModel& m, const GlobalDelta& delta,
                                          std::vector<std::array<std::shared_ptr<Tensor>, kNumProj>>& A,
                                          std::vector<std::array<std::shared_ptr<Tensor>, kNumProj>>& B,
                                          Index batch) {
  const Index d = m.cfg.dim;
  auto tg = std::make_unique<ToyGraph>();
  Graph& g = tg->g;
  NodeId x = g.input("x", {batch, d});
  NodeId y = g.input("y", {batch, m.cfg.n_classes});
  NodeId ones = g.constant(Tensor::full({d, 1}, 1.0));
  NodeId h = x;
  for (Index l = 0; l < m.cfg.layers; ++l) {
    std::array<NodeId, kNumProj> eff;
    for (int p = 0; p < kNumProj; ++p) {
      Tensor base = m.W[static_cast<size_t>(l)][static_cast<size_t>(p)];
      base.data += delta.D[static_cast<size_t>(l)][static_cast<size_t>(p)].data;
      const std::string tag = std::to_string(l) + "." + kProjNames[p];
      NodeId a = g.param("A." + tag, A[static_cast<size_t>(l)][static_cast<size_t>(p)]);
      NodeId b = g.param("B." + tag, B[static_cast<size_t>(l)][static_cast<size_t>(p)]);
      eff[static_cast<size_t>(p)] = g.add(g.constant(std::move(base)), g.matmul(b, a));
    }
    NodeId k = g.matmul(h, eff[0]);
    NodeId q = g.matmul(h, eff[1]);
    NodeId v = g.matmul(h, eff[2]);
    NodeId o = g.matmul(v, eff[3]);
    NodeId s = g.matmul(g.mul(q, k), ones);
    NodeId gate = g.sigmoid(g.scale(s, 1.0 / std::sqrt(static_cast<double>(d))));
    h = g.add(h, g.mul(gate, o));
  }
  NodeId logits = g.matmul(h, g.constant(m.head));
  tg->loss = g.softmax_xent(logits, y);
  g.mark_output("logits", logits);
  return tg;
}

using SharedFactors = std::vector<std::array<std::shared_ptr<Tensor>, kNumProj>>;

SharedFactors share_factors(const std::vector<std::array<Tensor, kNumProj>>& src) {
  SharedFactors out(src.size());
  for (size_t l = 0; l < src.size(); ++l)
    for (int p = 0; p < kNumProj; ++p)
      out[l][static_cast<size_t>(p)] =
          std::make_shared<Tensor>(src[l][static_cast<size_t>(p)]);
  return out;
}

std::pair<Tensor, Tensor> batch_tensors(const Mat2D& X, const std::vector<int>& labels,
                                        Index n_classes) {
  const Index n = X.rows();
  Tensor xb = Tensor::zeros({n, X.cols()});
  xb.mat(n, X.cols()) = X;
  Tensor yb = Tensor::zeros({n, n_classes});
  for (Index i = 0; i < n; ++i) yb.data[i * n_classes + labels[static_cast<size_t>(i)]] = 1.0;
  return {std::move(xb), std::move(yb)};
}

}  // namespace

Mat2D toy_logits_graph(const TargetModel& m, const GlobalDelta& delta,
                       const LoraFactors& factors, const Mat2D& X) {
  auto A = share_factors(factors.A);
  auto B = share_factors(factors.B);
  auto tg = build_toy_graph(m, delta, A, B, X.rows());
  auto [xb, yb] = batch_tensors(X, std::vector<int>(static_cast<size_t>(X.rows()), 0),
                                m.cfg.n_classes);
  auto out = tg->g.forward({{"x", xb}, {"y", yb}});
  return out.at("logits").mat(X.rows(), m.cfg.n_classes);
}

double toy_loss(const TargetModel& m, const GlobalDelta& delta, const LoraFactors& factors,
                const Mat2D& X, const std::vector<int>& labels) {
  auto A = share_factors(factors.A);
  auto B = share_factors(factors.B);
  auto tg = build_toy_graph(m, delta, A, B, X.rows());
  auto [xb, yb] = batch_tensors(X, labels, m.cfg.n_classes);
  tg->g.forward({{"x", xb}, {"y", yb}});
  return tg->g.value_of(tg->loss)[0];
}

LoraFactors toy_loss_grad(const TargetModel& m, const GlobalDelta& delta,
                          const LoraFactors& factors, const Mat2D& X,
                          const std::vector<int>& labels) {
  auto A = share_factors(factors.A);
  auto B = share_factors(factors.B);
  auto tg = build_toy_graph(m, delta, A, B, X.rows());
  auto [xb, yb] = batch_tensors(X, labels, m.cfg.n_classes);
  tg->g.forward({{"x", xb}, {"y", yb}});
  tg->g.backward(tg->loss);
  LoraFactors g = LoraFactors::zero(factors.layers, factors.rank, factors.dim);
  for (const auto& p : tg->g.trainables()) {
    const bool is_a = p.name[0] == 'A';
    const auto dot1 = p.name.find('.');
    const auto dot2 = p.name.find('.', dot1 + 1);
    const Index l = std::stol(p.name.substr(dot1 + 1, dot2 - dot1 - 1));
    const std::string proj = p.name.substr(dot2 + 1);
    int pi = 0;
    for (; pi < kNumProj; ++pi)
      if (proj == kProjNames[pi]) break;
    Tensor& dst = is_a ? g.A[static_cast<size_t>(l)][static_cast<size_t>(pi)]
                       : g.B[static_cast<size_t>(l)][static_cast<size_t>(pi)];
    dst.data = p.grad->data;
  }
  return g;
}

LocalTrainResult local_train(const TargetModel& m, const GlobalDelta& delta,
                             const LoraFactors& start, const Dataset& ds,
                             const std::vector<Index>& shard, int epochs, double lr,
                             Index batch, Rng& rng) {
  if (shard.empty()) throw std::invalid_argument("local_train: empty shard");
  if (batch <= 0) throw std::invalid_argument("local_train: batch must be positive");
  if (epochs < 0) throw std::invalid_argument("local_train: negative epochs");

  LocalTrainResult out;
  out.delta = LoraFactors::zero(start.layers, start.rank, start.dim);
  if (epochs == 0) return out;

  // working copies of the factors, shared between the batch-size graphs
  std::vector<std::array<std::shared_ptr<Tensor>, kNumProj>> A(
      static_cast<size_t>(start.layers));
  std::vector<std::array<std::shared_ptr<Tensor>, kNumProj>> B(
      static_cast<size_t>(start.layers));
  for (Index l = 0; l < start.layers; ++l)
    for (int p = 0; p < kNumProj; ++p) {
      A[static_cast<size_t>(l)][static_cast<size_t>(p)] = std::make_shared<Tensor>(
          start.A[static_cast<size_t>(l)][static_cast<size_t>(p)]);
      B[static_cast<size_t>(l)][static_cast<size_t>(p)] = std::make_shared<Tensor>(
          start.B[static_cast<size_t>(l)][static_cast<size_t>(p)]);
    }

  const Index n = static_cast<Index>(shard.size());
  const Index bsz = std::min(batch, n);
  const Index rem = n % bsz;
  auto main_graph = build_toy_graph(m, delta, A, B, bsz);
  std::unique_ptr<ToyGraph> rem_graph;
  if (rem > 0) rem_graph = build_toy_graph(m, delta, A, B, rem);

  AdamState adam;
  adam.lr = lr;

  std::vector<Index> order(shard.begin(), shard.end());
  double loss_sum = 0.0;
  for (int e = 0; e < epochs; ++e) {
    rng.shuffle(order.begin(), order.end());
    for (Index pos = 0; pos + bsz <= n || (rem > 0 && pos < n); pos += bsz) {
      const Index cur = std::min(bsz, n - pos);
      ToyGraph& tg = (cur == bsz) ? *main_graph : *rem_graph;
      Tensor xb = Tensor::zeros({cur, ds.dim});
      Tensor yb = Tensor::zeros({cur, ds.n_classes});
      for (Index i = 0; i < cur; ++i) {
        const Index src = order[static_cast<size_t>(pos + i)];
        xb.mat(cur, ds.dim).row(i) = ds.X.row(src);
        yb.data[i * ds.n_classes + ds.labels[static_cast<size_t>(src)]] = 1.0;
      }
      tg.g.forward({{"x", xb}, {"y", yb}});
      const double loss = tg.g.value_of(tg.loss)[0];
      if (!std::isfinite(loss)) throw std::runtime_error("local_train: non-finite loss");
      tg.g.backward(tg.loss);
      adam_step(adam, tg.g.trainables());
      loss_sum += loss;
      ++out.steps;
    }
  }
  out.mean_loss = loss_sum / static_cast<double>(out.steps);

  for (Index l = 0; l < start.layers; ++l)
    for (int p = 0; p < kNumProj; ++p) {
      out.delta.A[static_cast<size_t>(l)][static_cast<size_t>(p)].data =
          A[static_cast<size_t>(l)][static_cast<size_t>(p)]->data -
          start.A[static_cast<size_t>(l)][static_cast<size_t>(p)].data;
      out.delta.B[static_cast<size_t>(l)][static_cast<size_t>(p)].data =
          B[static_cast<size_t>(l)][static_cast<size_t>(p)]->data -
          start.B[static_cast<size_t>(l)][static_cast<size_t>(p)].data;
    }
  return out;
}

}  // namespace cgfed
