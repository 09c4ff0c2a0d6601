#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <memory>

#include "cgfed/graph.hpp"
#include "cgfed/rng.hpp"
#include "cgfed/tensor.hpp"

using namespace cgfed;

namespace {

std::shared_ptr<Tensor> rand_param(Shape s, Rng& rng, double scale = 1.0,
                                   double keep_away = 0.0) {
  auto t = std::make_shared<Tensor>(Tensor::zeros(std::move(s)));
  for (Index i = 0; i < t->numel(); ++i) {
    double v = scale * rng.normal();
    // keep relu inputs away from the kink so finite differences are clean
    if (keep_away > 0.0 && std::abs(v) < keep_away) v += (v >= 0 ? keep_away : -keep_away);
    t->data[i] = v;
  }
  return t;
}

double eval_loss(Graph& g, NodeId loss,
                 const std::unordered_map<std::string, Tensor>& inputs) {
  g.forward(inputs);
  return g.value_of(loss)[0];
}

// Central-difference oracle, step 1e-5 (independent of the backward pass).
void check_grads(Graph& g, NodeId loss,
                 const std::unordered_map<std::string, Tensor>& inputs,
                 const std::vector<std::shared_ptr<Tensor>>& params, double tol = 1e-4) {
  g.forward(inputs);
  g.backward(loss);
  auto tr = g.trainables();
  REQUIRE(tr.size() == params.size());
  std::unordered_map<const Tensor*, Arr1D> analytic;
  for (auto& p : tr) analytic[p.value] = p.grad->data;

  const double h = 1e-5;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    const Arr1D& ag = analytic.at(params[pi].get());
    for (Index i = 0; i < p.numel(); ++i) {
      const double orig = p.data[i];
      p.data[i] = orig + h;
      const double fp = eval_loss(g, loss, inputs);
      p.data[i] = orig - h;
      const double fm = eval_loss(g, loss, inputs);
      p.data[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double a = ag[i];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-3});
      CAPTURE(pi);
      CAPTURE(i);
      CAPTURE(a);
      CAPTURE(fd);
      CHECK(rel < tol);
    }
  }
}

}  // namespace

TEST_CASE("relu forward matches definition") {
  Graph g;
  auto x = g.constant(Tensor::from_list({3}, {-1.0, 0.0, 2.0}));
  auto y = g.relu(x);
  g.forward({});
  const Tensor& v = g.value_of(y);
  CHECK(v[0] == 0.0);
  CHECK(v[1] == 0.0);
  CHECK(v[2] == 2.0);
}

TEST_CASE("conv1d with identity delta kernel reproduces the signal") {
  Graph g;
  Rng rng(7);
  auto x = rand_param({1, 1, 9}, rng);
  auto w = std::make_shared<Tensor>(Tensor::from_list({1, 1, 3}, {0.0, 1.0, 0.0}));
  auto b = std::make_shared<Tensor>(Tensor::zeros({1}));
  auto y = g.conv1d(g.param("x", x), g.param("w", w), g.param("b", b), 1, 1);
  g.forward({});
  const Tensor& v = g.value_of(y);
  for (Index i = 0; i < 9; ++i) CHECK(v[i] == doctest::Approx(x->data[i]).epsilon(1e-15));
}

TEST_CASE("two-layer net matches an independent matrix-chain evaluation") {
  // seed-0 weights; oracle is a raw Eigen chain with no graph machinery
  Rng rng(0);
  auto w1 = rand_param({3, 3}, rng);
  auto w2 = rand_param({3, 3}, rng);
  auto xv = rand_param({2, 3}, rng, 1.0, 0.2);

  Graph g;
  auto x = g.input("x", {2, 3});
  auto h = g.relu(g.matmul(x, g.param("w1", w1)));
  auto y = g.matmul(h, g.param("w2", w2));
  Tensor xt = *xv;
  g.forward({{"x", xt}});

  Mat2D X = xt.mat(2, 3);
  Mat2D W1 = w1->mat(3, 3);
  Mat2D W2 = w2->mat(3, 3);
  Mat2D H = (X * W1).cwiseMax(0.0);
  Mat2D Y = H * W2;
  const Tensor& v = g.value_of(y);
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 3; ++j)
      CHECK(v.mat(2, 3)(i, j) == doctest::Approx(Y(i, j)).epsilon(1e-12));
}

TEST_CASE("gradcheck: matmul + add + scale") {
  Graph g;
  Rng rng(11);
  auto a = rand_param({3, 4}, rng);
  auto b = rand_param({4, 2}, rng);
  auto c = rand_param({3, 2}, rng);
  auto y = g.add(g.scale(g.matmul(g.param("a", a), g.param("b", b)), 0.7),
                 g.param("c", c));
  auto target = g.constant(*rand_param({3, 2}, rng));
  auto loss = g.mse(y, target);
  check_grads(g, loss, {}, {a, b, c});
}

TEST_CASE("gradcheck: elementwise mul, both same-shape and column broadcast") {
  Graph g;
  Rng rng(12);
  auto a = rand_param({4, 5}, rng);
  auto b = rand_param({4, 5}, rng);
  auto gate = rand_param({4, 1}, rng);
  auto y = g.mul(g.param("gate", gate), g.mul(g.param("a", a), g.param("b", b)));
  auto loss = g.mean(y);
  check_grads(g, loss, {}, {a, b, gate});
}

TEST_CASE("gradcheck: relu and sigmoid") {
  Graph g;
  Rng rng(13);
  auto a = rand_param({4, 4}, rng, 1.0, 0.2);
  auto y = g.sigmoid(g.relu(g.param("a", a)));
  auto target = g.constant(*rand_param({4, 4}, rng));
  auto loss = g.mse(y, target);
  check_grads(g, loss, {}, {a});
}

TEST_CASE("gradcheck: mean") {
  Graph g;
  Rng rng(14);
  auto a = rand_param({6}, rng);
  auto loss = g.mean(g.param("a", a));
  check_grads(g, loss, {}, {a});
}

TEST_CASE("gradcheck: softmax cross-entropy") {
  Graph g;
  Rng rng(15);
  auto logits = rand_param({4, 5}, rng, 2.0);
  Tensor onehot = Tensor::zeros({4, 5});
  for (Index i = 0; i < 4; ++i) onehot.data[i * 5 + (i * 2) % 5] = 1.0;
  auto loss = g.softmax_xent(g.param("z", logits), g.constant(onehot));
  check_grads(g, loss, {}, {logits});
}

TEST_CASE("gradcheck: conv1d stride 1 and stride 2") {
  for (int stride : {1, 2}) {
    Graph g;
    Rng rng(16 + stride);
    auto x = rand_param({2, 3, 8}, rng);
    auto w = rand_param({4, 3, 3}, rng, 0.5);
    auto b = rand_param({4}, rng, 0.2);
    auto y = g.conv1d(g.param("x", x), g.param("w", w), g.param("b", b), stride, 1);
    auto loss = g.mse(y, g.constant(Tensor::zeros(g.shape_of(y))));
    check_grads(g, loss, {}, {x, w, b});
  }
}

TEST_CASE("gradcheck: conv1d 1x1 kernel") {
  Graph g;
  Rng rng(19);
  auto x = rand_param({2, 4, 6}, rng);
  auto w = rand_param({2, 4, 1}, rng, 0.5);
  auto b = rand_param({2}, rng, 0.2);
  auto y = g.conv1d(g.param("x", x), g.param("w", w), g.param("b", b), 1, 0);
  auto loss = g.mean(y);
  check_grads(g, loss, {}, {x, w, b});
}

TEST_CASE("gradcheck: deconv1d stride 2") {
  Graph g;
  Rng rng(20);
  auto x = rand_param({2, 3, 4}, rng);
  auto w = rand_param({3, 2, 3}, rng, 0.5);
  auto b = rand_param({2}, rng, 0.2);
  auto y = g.deconv1d(g.param("x", x), g.param("w", w), g.param("b", b), 2, 1, 1);
  CHECK(g.shape_of(y) == Shape{2, 2, 8});
  auto loss = g.mse(y, g.constant(Tensor::zeros(g.shape_of(y))));
  check_grads(g, loss, {}, {x, w, b});
}

TEST_CASE("gradcheck: conv2d stride 1 and stride 2") {
  for (int stride : {1, 2}) {
    Graph g;
    Rng rng(21 + stride);
    auto x = rand_param({2, 2, 6, 6}, rng);
    auto w = rand_param({3, 2, 3, 3}, rng, 0.4);
    auto b = rand_param({3}, rng, 0.2);
    auto y = g.conv2d(g.param("x", x), g.param("w", w), g.param("b", b), stride, 1);
    auto loss = g.mse(y, g.constant(Tensor::zeros(g.shape_of(y))));
    check_grads(g, loss, {}, {x, w, b});
  }
}

TEST_CASE("gradcheck: conv2d 7x7 kernel, pad 3") {
  Graph g;
  Rng rng(24);
  auto x = rand_param({1, 1, 8, 8}, rng);
  auto w = rand_param({1, 1, 7, 7}, rng, 0.3);
  auto b = rand_param({1}, rng, 0.2);
  auto y = g.conv2d(g.param("x", x), g.param("w", w), g.param("b", b), 1, 3);
  CHECK(g.shape_of(y) == Shape{1, 1, 8, 8});
  auto loss = g.mean(y);
  check_grads(g, loss, {}, {x, w, b});
}

TEST_CASE("gradcheck: deconv2d stride 2 doubles spatial dims") {
  Graph g;
  Rng rng(25);
  auto x = rand_param({2, 3, 3, 4}, rng);
  auto w = rand_param({3, 2, 3, 3}, rng, 0.4);
  auto b = rand_param({2}, rng, 0.2);
  auto y = g.deconv2d(g.param("x", x), g.param("w", w), g.param("b", b), 2, 1, 1);
  CHECK(g.shape_of(y) == Shape{2, 2, 6, 8});
  auto loss = g.mse(y, g.constant(Tensor::zeros(g.shape_of(y))));
  check_grads(g, loss, {}, {x, w, b});
}

TEST_CASE("conv/deconv shape law") {
  // out = floor((n + 2p - k)/s) + 1, and the transposed op inverts it for
  // the stride-2, k=3, p=1, out_pad=1 halving configuration
  CHECK(conv_out_len(128, 3, 2, 1) == 64);
  CHECK(conv_out_len(64, 3, 2, 1) == 32);
  CHECK(conv_out_len(9, 3, 1, 1) == 9);
  CHECK(conv_out_len(32768, 3, 2, 1) == 16384);
  CHECK(deconv_out_len(64, 3, 2, 1, 1) == 128);
  CHECK(deconv_out_len(8, 3, 2, 1, 1) == 16);
  Rng rng(31);
  for (int t = 0; t < 200; ++t) {
    const Index n = 2 * (2 + static_cast<Index>(rng.uniform_below(40)));
    CHECK(conv_out_len(n, 3, 2, 1) == n / 2);
    CHECK(deconv_out_len(n / 2, 3, 2, 1, 1) == n);
  }
}

TEST_CASE("mse examples and brute-force oracle") {
  Graph g;
  Rng rng(32);
  auto a = rand_param({7, 3}, rng);
  auto b = rand_param({7, 3}, rng);
  auto same = g.mse(g.param("a", a), g.param("a2", a));
  auto unit = g.mse(g.constant(Tensor::from_list({2}, {0.0, 0.0})),
                    g.constant(Tensor::from_list({2}, {1.0, 1.0})));
  auto pair = g.mse(g.param("b", b), g.constant(*a));
  g.forward({});
  CHECK(g.value_of(same)[0] == 0.0);
  CHECK(g.value_of(unit)[0] == 1.0);
  double acc = 0.0;
  for (Index i = 0; i < 21; ++i) {
    const double d = b->data[i] - a->data[i];
    acc += d * d;
  }
  CHECK(g.value_of(pair)[0] == acc / 21.0);
}

TEST_CASE("backward on a linear loss gives all-ones gradients") {
  Graph g;
  Rng rng(33);
  auto a = rand_param({5}, rng);
  // sum(params) realized as n * mean(params)
  auto loss = g.scale(g.mean(g.param("a", a)), 5.0);
  g.forward({});
  g.backward(loss);
  for (auto& p : g.trainables())
    for (Index i = 0; i < p.grad->numel(); ++i) CHECK(p.grad->data[i] == doctest::Approx(1.0));
}

TEST_CASE("mse against zero has gradient 2x/n") {
  Graph g;
  Rng rng(34);
  auto x = rand_param({6}, rng);
  auto loss = g.mse(g.param("x", x), g.constant(Tensor::zeros({6})));
  g.forward({});
  g.backward(loss);
  auto tr = g.trainables();
  for (Index i = 0; i < 6; ++i)
    CHECK(tr[0].grad->data[i] == doctest::Approx(2.0 * x->data[i] / 6.0).epsilon(1e-12));
}

TEST_CASE("backward before forward is an error; non-scalar loss is an error") {
  Graph g;
  auto x = g.constant(Tensor::zeros({2, 2}));
  auto y = g.relu(x);
  CHECK_THROWS_AS(g.backward(y), std::runtime_error);
  g.forward({});
  CHECK_THROWS_AS(g.backward(y), std::invalid_argument);
}

TEST_CASE("shape mismatch and non-finite values are rejected") {
  Graph g;
  auto a = g.constant(Tensor::zeros({2, 3}));
  auto b = g.constant(Tensor::zeros({3, 3}));
  CHECK_THROWS_AS(g.add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(g.mse(a, b), std::invalid_argument);

  Graph g2;
  auto x = g2.input("x", {2});
  g2.sigmoid(x);
  Tensor bad = Tensor::from_list({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
  CHECK_THROWS_AS(g2.forward({{"x", bad}}), std::runtime_error);
}

TEST_CASE("adam: zero gradient is a fixed point") {
  Graph g;
  Rng rng(35);
  auto p = rand_param({4}, rng);
  const Arr1D before = p->data;
  auto loss = g.mse(g.constant(Tensor::zeros({2})), g.constant(Tensor::zeros({2})));
  g.param("p", p);
  g.forward({});
  g.backward(loss);  // p does not feed the loss, so its gradient is zero
  AdamState st;
  st.lr = 0.1;
  for (int i = 0; i < 5; ++i) adam_step(st, g.trainables());
  for (Index i = 0; i < 4; ++i) CHECK(p->data[i] == before[i]);
}

TEST_CASE("adam: first step from zero moments has the closed form") {
  AdamState st;
  st.lr = 1e-3;
  Tensor p = Tensor::from_list({2}, {1.0, -2.0});
  Tensor grad = Tensor::from_list({2}, {0.3, -0.07});
  std::vector<Graph::ParamRef> refs{{"p", &p, &grad}};
  adam_step(st, refs);
  // delta = -lr * g / (|g| + eps)
  CHECK(p.data[0] == doctest::Approx(1.0 - 1e-3 * 0.3 / (0.3 + 1e-8)).epsilon(1e-14));
  CHECK(p.data[1] == doctest::Approx(-2.0 + 1e-3 * 0.07 / (0.07 + 1e-8)).epsilon(1e-14));
}

TEST_CASE("adam: constant gradient approaches step size lr, vs scalar recurrence") {
  // independent oracle: the scalar Adam recurrence simulated with plain doubles
  const double lr = 2e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8, g0 = 0.42;
  double m = 0.0, v = 0.0, p_oracle = 1.0;
  AdamState st;
  st.lr = lr;
  Tensor p = Tensor::from_list({1}, {1.0});
  Tensor grad = Tensor::from_list({1}, {g0});
  std::vector<Graph::ParamRef> refs{{"p", &p, &grad}};
  for (int t = 1; t <= 400; ++t) {
    m = b1 * m + (1 - b1) * g0;
    v = b2 * v + (1 - b2) * g0 * g0;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    const double before = p_oracle;
    p_oracle -= lr * mh / (std::sqrt(vh) + eps);
    adam_step(st, refs);
    CHECK(p.data[0] == doctest::Approx(p_oracle).epsilon(1e-12));
    if (t > 200) CHECK(std::abs(before - p_oracle) == doctest::Approx(lr).epsilon(1e-4));
  }
}

TEST_CASE("determinism: same seed gives bit-identical forward and backward") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    auto x = rand_param({3, 1, 8}, rng);
    auto w = rand_param({2, 1, 3}, rng, 0.5);
    auto b = rand_param({2}, rng, 0.1);
    Graph g;
    auto y = g.conv1d(g.param("x", x), g.param("w", w), g.param("b", b), 2, 1);
    auto loss = g.mse(g.relu(y), g.constant(Tensor::zeros(g.shape_of(y))));
    g.forward({});
    g.backward(loss);
    std::vector<double> out;
    out.push_back(g.value_of(loss)[0]);
    for (auto& p : g.trainables())
      for (Index i = 0; i < p.grad->numel(); ++i) out.push_back(p.grad->data[i]);
    return out;
  };
  auto r1 = run(99);
  auto r2 = run(99);
  REQUIRE(r1.size() == r2.size());
  for (size_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]);
}
