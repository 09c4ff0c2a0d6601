#include "cgfed/snapshot.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "cgfed/rng.hpp"

namespace cgfed {

namespace {

void put_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void put_f32(std::ostream& os, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(os, v);
}

void put_f64(std::ostream& os, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  put_bytes(os, b, 8);
}

bool get_bytes(std::istream& is, void* p, size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  return static_cast<size_t>(is.gcount()) == n;
}

float get_f32(std::istream& is, const char* what) {
  const std::uint32_t v = get_u32(is, what);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

double get_f64(std::istream& is, const char* what) {
  unsigned char b[8];
  if (!get_bytes(is, b, 8)) throw TruncatedError(std::string("truncated ") + what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

}  // namespace

void put_u16(std::ostream& os, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>(v >> 8)};
  put_bytes(os, b, 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  put_bytes(os, b, 4);
}

std::uint16_t get_u16(std::istream& is, const char* what) {
  unsigned char b[2];
  if (!get_bytes(is, b, 2)) throw TruncatedError(std::string("truncated ") + what);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!get_bytes(is, b, 4)) throw TruncatedError(std::string("truncated ") + what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void SnapshotStore::append(std::uint32_t client_id, std::uint32_t round,
                           const Tensor& canvas) {
  if (canvas.shape.size() != 2)
    throw std::invalid_argument("snapshot append: canvas must be 2-D");
  if (records.empty() && rows == 0 && cols == 0) {
    rows = static_cast<std::uint32_t>(canvas.shape[0]);
    cols = static_cast<std::uint32_t>(canvas.shape[1]);
  }
  if (canvas.shape[0] != static_cast<Index>(rows) ||
      canvas.shape[1] != static_cast<Index>(cols))
    throw std::invalid_argument("snapshot append: canvas shape mismatch");
  for (const auto& r : records)
    if (r.client_id == client_id && r.round == round)
      throw std::invalid_argument("snapshot append: duplicate (client, round)");
  Snapshot s;
  s.client_id = client_id;
  s.round = round;
  s.payload.resize(static_cast<size_t>(canvas.numel()));
  for (Index i = 0; i < canvas.numel(); ++i)
    s.payload[static_cast<size_t>(i)] = static_cast<float>(canvas.data[i]);
  records.push_back(std::move(s));
}

Tensor SnapshotStore::canvas(size_t i) const {
  const Snapshot& s = records.at(i);
  Tensor t = Tensor::zeros({static_cast<Index>(rows), static_cast<Index>(cols)});
  for (Index j = 0; j < t.numel(); ++j)
    t.data[j] = static_cast<double>(s.payload[static_cast<size_t>(j)]);
  return t;
}

void write_store(const std::string& path, const SnapshotStore& store) {
  const size_t expect = static_cast<size_t>(store.rows) * store.cols;
  for (const auto& r : store.records)
    if (r.payload.size() != expect)
      throw std::invalid_argument("write_store: payload length mismatch");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("write_store: cannot open " + path);
  put_bytes(os, "CGFG", 4);
  put_u16(os, kStoreVersion);
  put_u32(os, store.rows);
  put_u32(os, store.cols);
  put_u32(os, static_cast<std::uint32_t>(store.records.size()));
  for (const auto& r : store.records) {
    put_u32(os, r.client_id);
    put_u32(os, r.round);
    for (float f : r.payload) put_f32(os, f);
  }
  if (!os) throw std::runtime_error("write_store: write failed for " + path);
}

SnapshotStore read_store(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_store: cannot open " + path);
  char magic[4];
  if (!get_bytes(is, magic, 4)) throw TruncatedError("truncated magic");
  if (std::memcmp(magic, "CGFG", 4) != 0) throw BadMagicError("bad magic in " + path);
  const std::uint16_t version = get_u16(is, "version");
  if (version != kStoreVersion)
    throw VersionError("unsupported store version " + std::to_string(version));
  SnapshotStore store;
  store.rows = get_u32(is, "rows");
  store.cols = get_u32(is, "cols");
  const std::uint32_t count = get_u32(is, "count");
  const size_t n = static_cast<size_t>(store.rows) * store.cols;
  std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
  store.records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Snapshot s;
    s.client_id = get_u32(is, "client id");
    s.round = get_u32(is, "round");
    if (!seen.insert({s.client_id, s.round}).second)
      throw std::runtime_error("read_store: duplicate (client, round) record");
    s.payload.resize(n);
    for (size_t j = 0; j < n; ++j) s.payload[j] = get_f32(is, "payload");
    store.records.push_back(std::move(s));
  }
  return store;
}

SplitResult split(const SnapshotStore& store, const SplitSpec& spec) {
  if (spec.train_fraction <= 0.0 || spec.train_fraction >= 1.0)
    throw std::invalid_argument("split: fraction must be in (0,1)");
  const size_t n = store.size();
  if (n < 2) throw std::invalid_argument("split: store too small to split");
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(spec.seed);
  rng.shuffle(idx.begin(), idx.end());
  size_t n_train = static_cast<size_t>(spec.train_fraction * static_cast<double>(n));
  n_train = std::min(std::max<size_t>(n_train, 1), n - 1);
  SplitResult r;
  r.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  r.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  return r;
}

std::vector<Tensor> canvases_of(const SnapshotStore& store, const std::vector<size_t>& idx) {
  std::vector<Tensor> out;
  out.reserve(idx.size());
  for (size_t i : idx) out.push_back(store.canvas(i));
  return out;
}

std::vector<RoundStats> snapshot_stats(const SnapshotStore& store) {
  if (store.records.empty()) throw std::invalid_argument("snapshot_stats: empty store");
  std::map<std::uint32_t, RoundStats> acc;
  std::map<std::uint32_t, std::pair<double, double>> sums;  // sum, sumsq
  for (const auto& r : store.records) {
    auto& st = acc[r.round];
    auto& [sum, sumsq] = sums[r.round];
    if (st.count == 0) {
      st.round = r.round;
      st.min = r.payload.empty() ? 0.0 : r.payload[0];
      st.max = st.min;
    }
    for (float f : r.payload) {
      const double v = f;
      st.min = std::min(st.min, v);
      st.max = std::max(st.max, v);
      sum += v;
      sumsq += v * v;
      ++st.count;
    }
  }
  std::vector<RoundStats> out;
  out.reserve(acc.size());
  for (auto& [round, st] : acc) {
    const auto& [sum, sumsq] = sums[round];
    st.mean = sum / static_cast<double>(st.count);
    const double var = sumsq / static_cast<double>(st.count) - st.mean * st.mean;
    st.stddev = std::sqrt(std::max(var, 0.0));
    out.push_back(st);
  }
  return out;
}

void write_tensors(std::ostream& os, const std::vector<NamedTensor>& tensors, bool as_f32) {
  put_bytes(os, "CGTC", 4);
  put_u16(os, kStoreVersion);
  put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xffff) throw std::invalid_argument("write_tensors: name too long");
    put_u16(os, static_cast<std::uint16_t>(t.name.size()));
    put_bytes(os, t.name.data(), t.name.size());
    os.put(as_f32 ? '\0' : '\1');
    os.put(static_cast<char>(t.value.shape.size()));
    for (Index d : t.value.shape) put_u32(os, static_cast<std::uint32_t>(d));
    for (Index i = 0; i < t.value.numel(); ++i) {
      if (as_f32)
        put_f32(os, static_cast<float>(t.value.data[i]));
      else
        put_f64(os, t.value.data[i]);
    }
  }
}

std::vector<NamedTensor> read_tensors(std::istream& is) {
  char magic[4];
  if (!get_bytes(is, magic, 4)) throw TruncatedError("truncated tensor magic");
  if (std::memcmp(magic, "CGTC", 4) != 0) throw BadMagicError("bad tensor container magic");
  const std::uint16_t version = get_u16(is, "tensor version");
  if (version != kStoreVersion)
    throw VersionError("unsupported tensor container version " + std::to_string(version));
  const std::uint32_t count = get_u32(is, "tensor count");
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const std::uint16_t len = get_u16(is, "tensor name length");
    t.name.resize(len);
    if (!get_bytes(is, t.name.data(), len)) throw TruncatedError("truncated tensor name");
    int dtype = is.get();
    int ndim = is.get();
    if (dtype < 0 || ndim < 0) throw TruncatedError("truncated tensor header");
    Shape shape;
    for (int d = 0; d < ndim; ++d)
      shape.push_back(static_cast<Index>(get_u32(is, "tensor dim")));
    t.value = Tensor::zeros(shape);
    for (Index j = 0; j < t.value.numel(); ++j)
      t.value.data[j] = dtype == 0 ? static_cast<double>(get_f32(is, "tensor payload"))
                                   : get_f64(is, "tensor payload");
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace cgfed
