#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cgfed/rng.hpp"
#include "cgfed/snapshot.hpp"

using namespace cgfed;

namespace {

Tensor random_canvas(Index rows, Index cols, std::uint64_t seed) {
  Tensor t = Tensor::zeros({rows, cols});
  Rng rng(seed);
  for (Index i = 0; i < t.numel(); ++i) t.data[i] = 1e-3 * rng.normal();
  return t;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("store round-trips losslessly at 32-bit precision") {
  SnapshotStore store;
  for (std::uint32_t c = 0; c < 3; ++c)
    for (std::uint32_t t = 0; t < 4; ++t)
      store.append(c, t, random_canvas(6, 5, 100 + c * 10 + t));

  const std::string path = temp_path("cgfed_store_test.cgfg");
  write_store(path, store);
  SnapshotStore back = read_store(path);
  CHECK(back.rows == store.rows);
  CHECK(back.cols == store.cols);
  REQUIRE(back.size() == store.size());
  for (size_t i = 0; i < store.size(); ++i) {
    CHECK(back.records[i].client_id == store.records[i].client_id);
    CHECK(back.records[i].round == store.records[i].round);
    CHECK(back.records[i].payload == store.records[i].payload);
  }
  std::filesystem::remove(path);
}

TEST_CASE("file size is header plus fixed-size records") {
  SnapshotStore store;
  store.append(0, 0, Tensor::from_list({2, 2}, {1, 2, 3, 4}));
  const std::string path = temp_path("cgfed_store_size.cgfg");
  write_store(path, store);
  // header: magic 4 + version 2 + rows 4 + cols 4 + count 4 = 18
  // record: client 4 + round 4 + payload 16 = 24
  CHECK(std::filesystem::file_size(path) == 18 + 24);
  std::filesystem::remove(path);
}

TEST_CASE("bad magic, version mismatch, and truncation raise distinct errors") {
  SnapshotStore store;
  store.append(0, 0, random_canvas(3, 3, 1));
  const std::string path = temp_path("cgfed_store_err.cgfg");
  write_store(path, store);

  auto corrupt = [&](std::streamoff off, char byte) {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(off);
    f.put(byte);
  };

  corrupt(0, 'X');
  CHECK_THROWS_AS(read_store(path), BadMagicError);
  write_store(path, store);
  corrupt(4, '\x7f');  // version low byte
  CHECK_THROWS_AS(read_store(path), VersionError);

  write_store(path, store);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 5);
  CHECK_THROWS_AS(read_store(path), TruncatedError);
  std::filesystem::remove(path);
}

TEST_CASE("duplicate (client, round) pairs are rejected") {
  SnapshotStore store;
  store.append(1, 2, random_canvas(2, 2, 3));
  CHECK_THROWS_AS(store.append(1, 2, random_canvas(2, 2, 4)), std::invalid_argument);
  CHECK_NOTHROW(store.append(1, 3, random_canvas(2, 2, 5)));
  CHECK_THROWS_AS(store.append(1, 3, random_canvas(3, 2, 6)), std::invalid_argument);
}

TEST_CASE("split is a deterministic partition") {
  SnapshotStore store;
  for (std::uint32_t c = 0; c < 3; ++c)
    for (std::uint32_t t = 0; t < 20; ++t)
      store.append(c, t, random_canvas(2, 2, c * 100 + t));
  REQUIRE(store.size() == 60);

  SplitSpec spec{0.9, 1234};
  auto s1 = split(store, spec);
  CHECK(s1.train.size() == 54);
  CHECK(s1.test.size() == 6);
  auto s2 = split(store, spec);
  CHECK(s1.train == s2.train);
  CHECK(s1.test == s2.test);

  std::set<size_t> all(s1.train.begin(), s1.train.end());
  for (size_t i : s1.test) CHECK(all.insert(i).second);  // disjoint
  CHECK(all.size() == 60);                               // exhaustive

  SnapshotStore tiny;
  tiny.append(0, 0, random_canvas(2, 2, 9));
  CHECK_THROWS_AS(split(tiny, spec), std::invalid_argument);
  CHECK_THROWS_AS(split(store, SplitSpec{1.0, 0}), std::invalid_argument);
}

TEST_CASE("snapshot stats match an independent second-pass recomputation") {
  SnapshotStore store;
  for (std::uint32_t c = 0; c < 4; ++c)
    for (std::uint32_t t = 0; t < 3; ++t)
      store.append(c, t, random_canvas(4, 6, 500 + c * 7 + t));

  auto stats = snapshot_stats(store);
  REQUIRE(stats.size() == 3);
  for (const auto& st : stats) {
    // oracle: gather every element of the round, then two-pass mean/std
    std::vector<double> vals;
    for (const auto& r : store.records)
      if (r.round == st.round)
        for (float f : r.payload) vals.push_back(static_cast<double>(f));
    REQUIRE(static_cast<long>(vals.size()) == st.count);
    double mn = vals[0], mx = vals[0], mean = 0;
    for (double v : vals) {
      mn = std::min(mn, v);
      mx = std::max(mx, v);
      mean += v;
    }
    mean /= static_cast<double>(vals.size());
    double var = 0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= static_cast<double>(vals.size());
    CHECK(st.min == mn);
    CHECK(st.max == mx);
    CHECK(st.mean == doctest::Approx(mean).epsilon(1e-12));
    CHECK(st.stddev == doctest::Approx(std::sqrt(var)).epsilon(1e-10));
  }
}

TEST_CASE("constant canvas stats collapse to the constant") {
  SnapshotStore store;
  store.append(0, 7, Tensor::full({3, 3}, 0.25));
  auto stats = snapshot_stats(store);
  REQUIRE(stats.size() == 1);
  CHECK(stats[0].round == 7);
  CHECK(stats[0].min == 0.25);
  CHECK(stats[0].max == 0.25);
  CHECK(stats[0].mean == doctest::Approx(0.25));
  CHECK(stats[0].stddev == doctest::Approx(0.0));
}

TEST_CASE("named tensor container round-trips f64 exactly") {
  std::vector<NamedTensor> ts;
  ts.push_back({"enc.w0", random_canvas(3, 4, 11)});
  ts.push_back({"enc.b0", random_canvas(1, 4, 12)});
  Tensor odd = Tensor::zeros({2, 3, 2});
  Rng rng(13);
  for (Index i = 0; i < odd.numel(); ++i) odd.data[i] = rng.normal();
  ts.push_back({"dec.w0", odd});

  std::stringstream ss;
  write_tensors(ss, ts);
  auto back = read_tensors(ss);
  REQUIRE(back.size() == ts.size());
  for (size_t i = 0; i < ts.size(); ++i) {
    CHECK(back[i].name == ts[i].name);
    CHECK(back[i].value.shape == ts[i].value.shape);
    CHECK((back[i].value.data == ts[i].value.data).all());
  }

  std::stringstream bad("NOPEextra");
  CHECK_THROWS_AS(read_tensors(bad), BadMagicError);
}
