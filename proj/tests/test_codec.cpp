#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cgfed/codec.hpp"
#include "cgfed/rng.hpp"

using namespace cgfed;

namespace {

Tensor random_canvas(Index rows, Index cols, std::uint64_t seed, double scale = 1e-3) {
  Tensor t = Tensor::zeros({rows, cols});
  Rng rng(seed);
  for (Index i = 0; i < t.numel(); ++i) t.data[i] = scale * rng.normal();
  return t;
}

// smooth structured canvases (rank-1 patterns plus small noise), closer to
// the gradient snapshots the codec is meant for than white noise
std::vector<Tensor> structured_canvases(Index n, Index rows, Index cols, std::uint64_t seed) {
  std::vector<Tensor> out;
  Rng rng(seed);
  for (Index k = 0; k < n; ++k) {
    Tensor t = Tensor::zeros({rows, cols});
    const double a = rng.normal(), b = rng.normal();
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) {
        const double u = std::sin(0.13 * a * static_cast<double>(r));
        const double v = std::cos(0.21 * b * static_cast<double>(c));
        t.data[r * cols + c] = 1e-3 * (u * v + 0.05 * rng.normal());
      }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

TEST_CASE("published-scale specs reproduce the expected latent shapes and ratios") {
  CodecSpec rn = paper_resnet2d_spec();
  CHECK(rn.input_shape == Shape{1, 4096, 2048});
  CHECK(rn.latent_shape() == Shape{64, 64, 32});
  CHECK(compression_ratio(rn) == doctest::Approx(0.015625).epsilon(1e-15));

  CodecSpec cn = paper_cnn1d_spec();
  CHECK(cn.input_shape == Shape{128, 1, 32768});
  CHECK(cn.latent_shape() == Shape{128, 4, 256});
  CHECK(compression_ratio(cn) == doctest::Approx(0.03125).epsilon(1e-15));

  // building them materializes parameters and re-validates the shape math
  Codec built = build(rn, 1);
  CHECK(built.spec.latent_shape() == Shape{64, 64, 32});
  Codec built1d = build(cn, 1);
  CHECK(built1d.spec.latent_shape() == Shape{128, 4, 256});
}

TEST_CASE("identity codec is exact and has ratio 1") {
  Codec id = build(identity_spec(16, 8), 0);
  CHECK(compression_ratio(id.spec) == 1.0);
  Tensor x = random_canvas(16, 8, 5);
  EncodedFeature f = id.encode(x);
  CHECK(f.latent.shape == x.shape);
  Tensor back = id.decode(f);
  CHECK((back.data == x.data).all());
  CHECK_FALSE(id.trained());
}

TEST_CASE("resnet2d shape law: 128x64 canvas, 3 stages, schedule ending at 64") {
  CodecSpec s = desk_resnet2d_spec(128, 64);
  s.channels = {16, 32, 64};
  CHECK(s.latent_shape() == Shape{64, 16, 8});
  Codec c = build(s, 7);
  Tensor x = random_canvas(128, 64, 9);
  EncodedFeature f = c.encode(x);
  CHECK(f.latent.shape == Shape{64, 16, 8});
  Tensor back = c.decode(f);
  CHECK(back.shape == x.shape);
}

TEST_CASE("decode-encode preserves shape over randomized valid specs") {
  Rng rng(31);
  for (int t = 0; t < 12; ++t) {
    const int stages = 1 + static_cast<int>(rng.uniform_below(3));
    const Index rows = pow(2, stages) * (1 + static_cast<Index>(rng.uniform_below(4)));
    const Index cols = pow(2, stages) * (1 + static_cast<Index>(rng.uniform_below(4)));
    CodecSpec s;
    if (rng.uniform01() < 0.5) {
      s = desk_resnet2d_spec(rows, cols);
      s.stages = stages;
      s.channels.clear();
      for (int i = 0; i < stages; ++i)
        s.channels.push_back(1 + static_cast<int>(rng.uniform_below(6)));
      s.res_blocks = static_cast<int>(rng.uniform_below(3));
    } else {
      s = desk_cnn1d_spec(rows, cols);
      s.stages = stages;
      s.channels.clear();
      for (int i = 0; i < stages; ++i)
        s.channels.push_back(1 + static_cast<int>(rng.uniform_below(8)));
      s.latent_channels = 1 + static_cast<int>(rng.uniform_below(4));
    }
    Codec c = build(s, 100 + static_cast<std::uint64_t>(t));
    Tensor x = random_canvas(rows, cols, 200 + static_cast<std::uint64_t>(t));
    Tensor back = c.decode(c.encode(x));
    CHECK(back.shape == x.shape);
  }
}

TEST_CASE("compression ratio is pure shape arithmetic") {
  CodecSpec s = desk_resnet2d_spec(128, 64);
  Codec c1 = build(s, 1);
  Codec c2 = build(s, 999);  // different parameters
  CHECK(compression_ratio(c1.spec) == compression_ratio(c2.spec));
  CHECK(compression_ratio(s) == doctest::Approx(0.125).epsilon(1e-15));
}

TEST_CASE("invalid specs are rejected") {
  CodecSpec s = desk_resnet2d_spec(10, 6);  // not divisible by 2^3
  CHECK_THROWS_AS(build(s, 0), std::invalid_argument);

  CodecSpec uf;
  uf.family = CodecFamily::kUformer;
  uf.input_shape = {8, 1024, 1024};
  CHECK_THROWS_WITH_AS(build(uf, 0), doctest::Contains("unsupported family"),
                       std::invalid_argument);

  CodecSpec bad = desk_resnet2d_spec(128, 64);
  bad.channels = {2, 4};  // schedule length != stages
  CHECK_THROWS_AS(build(bad, 0), std::invalid_argument);

  CHECK_THROWS_AS(family_from_name("lewin"), std::invalid_argument);

  Codec c = build(desk_resnet2d_spec(32, 16), 3);
  CHECK_THROWS_AS(c.encode(random_canvas(16, 16, 1)), std::invalid_argument);
}

TEST_CASE("build is deterministic under the seed and hash detects changes") {
  CodecSpec s = desk_resnet2d_spec(32, 16);
  Codec a = build(s, 11);
  Codec b = build(s, 11);
  CHECK(a.hash() == b.hash());
  Codec c = build(s, 12);
  CHECK(a.hash() != c.hash());
  Tensor x = random_canvas(32, 16, 1);
  CHECK((a.encode(x).latent.data == b.encode(x).latent.data).all());
}

TEST_CASE("training on a singleton set memorizes it") {
  CodecSpec s = desk_resnet2d_spec(16, 8);
  s.channels = {2, 4, 8};
  s.res_blocks = 1;
  Codec c = build(s, 21);
  std::vector<Tensor> one{random_canvas(16, 8, 33)};
  Tensor x = one[0];
  const double initial = (c.decode(c.encode(x)).data - x.data).square().mean();
  TrainCurves curves = train_tgap(c, one, one, 600, 2e-4, 4, 5);
  const double fin = curves.train_loss.back();
  CAPTURE(initial);
  CAPTURE(fin);
  CHECK(fin < initial / 100.0);
  CHECK(c.trained());
  CHECK(c.trained_epochs == 600);
}

TEST_CASE("training loss is non-increasing per epoch on structured data") {
  CodecSpec s = desk_resnet2d_spec(32, 16);
  s.channels = {2, 4, 8};
  s.res_blocks = 1;
  Codec c = build(s, 4);
  auto canvases = structured_canvases(24, 32, 16, 8);
  std::vector<Tensor> train(canvases.begin(), canvases.begin() + 20);
  std::vector<Tensor> test(canvases.begin() + 20, canvases.end());
  TrainCurves curves = train_tgap(c, train, test, 40, 2e-4, 4, 77);
  REQUIRE(curves.train_loss.size() == 40);
  REQUIRE(curves.test_loss.size() == 40);
  for (size_t e = 1; e < curves.train_loss.size(); ++e) {
    CAPTURE(e);
    CHECK(curves.train_loss[e] <= curves.train_loss[e - 1] * 1.001);
  }
  // generalization gap stays bounded on homogeneous data
  CHECK(curves.test_loss.back() < 10.0 * curves.train_loss.back());
}

TEST_CASE("checkpoint round-trip reproduces identical encode outputs") {
  CodecSpec s = desk_cnn1d_spec(16, 8);
  s.channels = {4, 8, 16};
  Codec c = build(s, 55);
  std::vector<Tensor> set = structured_canvases(6, 16, 8, 99);
  train_tgap(c, {set[0], set[1], set[2], set[3]}, {set[4], set[5]}, 5, 2e-4, 2, 3);

  const std::string path =
      (std::filesystem::temp_directory_path() / "cgfed_codec_test.ckpt").string();
  c.save(path);
  Codec back = Codec::load(path);
  CHECK(back.trained_epochs == c.trained_epochs);
  CHECK(back.hash() == c.hash());
  Tensor x = random_canvas(16, 8, 123);
  CHECK((back.encode(x).latent.data == c.encode(x).latent.data).all());
  Tensor lat = c.encode(x).latent;
  EncodedFeature f{lat, x.shape, c.hash()};
  CHECK((back.decode(f).data == c.decode(f).data).all());
  std::filesystem::remove(path);
}

TEST_CASE("spec json round-trip") {
  CodecSpec s = paper_cnn1d_spec();
  CodecSpec t = CodecSpec::from_json(s.to_json());
  CHECK(t.family == s.family);
  CHECK(t.input_shape == s.input_shape);
  CHECK(t.channels == s.channels);
  CHECK(t.latent_channels == s.latent_channels);
  CHECK(t.stages == s.stages);
}
