#include "cgfed/fedsim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <future>
#include <numeric>
#include <stdexcept>

namespace cgfed {

namespace {

// stream tags for seed derivation
constexpr std::uint64_t kTagSplit = 0xD152;     // D1/D2 task-data split
constexpr std::uint64_t kTagPartition = 0xD1C7; // Dirichlet partition
constexpr std::uint64_t kTagTest = 0x7E57;      // held-out evaluation set

}  // namespace

void FedConfig::validate() const {
  if (clients < 1) throw std::invalid_argument("fed config: clients must be >= 1");
  if (selection <= 0.0 || selection > 1.0)
    throw std::invalid_argument("fed config: selection must be in (0,1]");
  if (capture_selection <= 0.0 || capture_selection > 1.0)
    throw std::invalid_argument("fed config: capture_selection must be in (0,1]");
  if (rounds < 1) throw std::invalid_argument("fed config: rounds must be >= 1");
  if (capture_rounds < 1) throw std::invalid_argument("fed config: capture_rounds must be >= 1");
  if (eta <= 0.0) throw std::invalid_argument("fed config: eta must be > 0");
  if (local_epochs < 0) throw std::invalid_argument("fed config: negative local epochs");
  if (local_batch < 1) throw std::invalid_argument("fed config: local batch must be >= 1");
  if (dirichlet_alpha <= 0.0)
    throw std::invalid_argument("fed config: dirichlet alpha must be > 0");
  if (capture_fraction <= 0.0 || capture_fraction >= 1.0)
    throw std::invalid_argument("fed config: capture_fraction must be in (0,1)");
  if (test_samples < 1) throw std::invalid_argument("fed config: test_samples must be >= 1");
  if (threads < 1) throw std::invalid_argument("fed config: threads must be >= 1");
  if (model.dim != data.dim)
    throw std::invalid_argument("fed config: model dim != data dim");
  if (model.n_classes != data.n_classes)
    throw std::invalid_argument("fed config: model classes != data classes");
  if (privacy) privacy->validate();
}

std::vector<std::vector<Index>> partition_dirichlet(const std::vector<Index>& samples,
                                                    const std::vector<int>& labels,
                                                    Index n_classes, Index n_clients,
                                                    double alpha, std::uint64_t seed) {
  if (samples.empty()) throw std::invalid_argument("partition: empty sample set");
  if (alpha <= 0.0) throw std::invalid_argument("partition: alpha must be > 0");
  if (n_clients < 1) throw std::invalid_argument("partition: need >= 1 client");

  // group by class, preserving input order within a class
  std::vector<std::vector<Index>> by_class(static_cast<size_t>(n_classes));
  for (Index s : samples) {
    const int c = labels.at(static_cast<size_t>(s));
    by_class.at(static_cast<size_t>(c)).push_back(s);
  }

  Rng rng(seed);
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<std::vector<Index>> shards(static_cast<size_t>(n_clients));
    for (Index c = 0; c < n_classes; ++c) {
      auto cls = by_class[static_cast<size_t>(c)];
      if (cls.empty()) continue;
      // proportions: normalized Gamma(alpha) draws, client order
      std::vector<double> w(static_cast<size_t>(n_clients));
      double wsum = 0.0;
      for (Index i = 0; i < n_clients; ++i) {
        w[static_cast<size_t>(i)] = rng.gamma(alpha);
        wsum += w[static_cast<size_t>(i)];
      }
      const Index m = static_cast<Index>(cls.size());
      std::vector<Index> counts(static_cast<size_t>(n_clients));
      std::vector<std::pair<double, Index>> rem;  // (-remainder, client)
      Index assigned = 0;
      for (Index i = 0; i < n_clients; ++i) {
        const double share = w[static_cast<size_t>(i)] / wsum * static_cast<double>(m);
        counts[static_cast<size_t>(i)] = static_cast<Index>(std::floor(share));
        assigned += counts[static_cast<size_t>(i)];
        rem.push_back({-(share - std::floor(share)), i});
      }
      std::sort(rem.begin(), rem.end());  // largest remainder first, ties by client id
      for (Index k = 0; k < m - assigned; ++k)
        counts[static_cast<size_t>(rem[static_cast<size_t>(k)].second)] += 1;
      rng.shuffle(cls.begin(), cls.end());
      Index pos = 0;
      for (Index i = 0; i < n_clients; ++i) {
        for (Index k = 0; k < counts[static_cast<size_t>(i)]; ++k)
          shards[static_cast<size_t>(i)].push_back(cls[static_cast<size_t>(pos++)]);
      }
    }
    const bool ok = std::all_of(shards.begin(), shards.end(),
                                [](const auto& s) { return !s.empty(); });
    if (ok) return shards;
  }
  throw std::runtime_error("partition: a client stayed empty after 100 attempts");
}

std::vector<int> sample_clients(Index n_clients, double selection, std::uint64_t seed,
                                long round) {
  if (selection <= 0.0 || selection > 1.0)
    throw std::invalid_argument("sample_clients: selection must be in (0,1]");
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(round)));
  auto draw = [&] {
    std::vector<int> out;
    for (Index i = 0; i < n_clients; ++i)
      if (rng.uniform01() < selection) out.push_back(static_cast<int>(i));
    return out;
  };
  std::vector<int> sel = draw();
  if (sel.empty()) sel = draw();
  if (sel.empty()) sel.push_back(static_cast<int>(rng.uniform_below(
      static_cast<std::uint64_t>(n_clients))));
  return sel;
}

FedState init_fed_state(const FedConfig& cfg, bool capture_phase) {
  cfg.validate();
  FedState st;
  auto init = init_model(cfg.model);
  st.model = std::move(init.model);
  st.start_factors = std::move(init.factors);
  st.delta = GlobalDelta::zero(cfg.model.layers, cfg.model.dim);
  st.data = make_synthetic(cfg.data);

  // task-data split: first `capture_fraction` of a seeded shuffle is the
  // capture share, the rest is the fine-tune share
  std::vector<Index> idx(static_cast<size_t>(st.data.size()));
  std::iota(idx.begin(), idx.end(), Index{0});
  Rng split_rng(mix_seed(cfg.partition_seed, kTagSplit));
  split_rng.shuffle(idx.begin(), idx.end());
  const auto n_capture = static_cast<std::ptrdiff_t>(
      cfg.capture_fraction * static_cast<double>(idx.size()));
  std::vector<Index> phase_samples;
  if (capture_phase)
    phase_samples.assign(idx.begin(), idx.begin() + n_capture);
  else
    phase_samples.assign(idx.begin() + n_capture, idx.end());

  st.shards = partition_dirichlet(phase_samples, st.data.labels, cfg.data.n_classes,
                                  cfg.clients, cfg.dirichlet_alpha,
                                  mix_seed(cfg.partition_seed, kTagPartition,
                                           capture_phase ? 1 : 2));
  st.test = sample_from_means(st.data.class_means, cfg.test_samples, cfg.data.spread,
                              mix_seed(cfg.data.seed, kTagTest));
  return st;
}

std::vector<std::uint8_t> serialize_f32(const Tensor& t) {
  std::vector<std::uint8_t> out(static_cast<size_t>(t.numel()) * 4);
  for (Index i = 0; i < t.numel(); ++i) {
    const float f = static_cast<float>(t.data[i]);
    std::uint32_t v;
    static_assert(sizeof(float) == 4);
    std::memcpy(&v, &f, 4);
    for (int b = 0; b < 4; ++b)
      out[static_cast<size_t>(i) * 4 + static_cast<size_t>(b)] =
          static_cast<std::uint8_t>((v >> (8 * b)) & 0xff);
  }
  return out;
}

namespace {

struct ClientResult {
  LoraFactors transmitted;  // post clip/noise factor delta
  Tensor canvas;            // packed transmitted delta
  EncodedFeature feature;
  Tensor decoded;           // server-side reconstruction of the canvas
  double local_loss = 0.0;
  double max_clipped_norm = 0.0;
  Tensor raw_canvas;        // pre-privacy delta (snapshot sink)
};

ClientResult run_client(const FedState& state, const FedConfig& cfg, const Codec& codec,
                        long round, int client) {
  ClientResult out;
  Rng train_rng(mix_seed(cfg.train_seed, static_cast<std::uint64_t>(round),
                         static_cast<std::uint64_t>(client)));
  auto res = local_train(state.model, state.delta, state.start_factors, state.data,
                         state.shards[static_cast<size_t>(client)], cfg.local_epochs,
                         cfg.local_lr, cfg.local_batch, train_rng);
  out.local_loss = res.mean_loss;
  out.raw_canvas = pack(res.delta);

  LoraFactors processed = std::move(res.delta);
  if (cfg.privacy) {
    Rng noise_rng(mix_seed(cfg.noise_seed, static_cast<std::uint64_t>(round),
                           static_cast<std::uint64_t>(client)));
    for (Index l = 0; l < processed.layers; ++l)
      for (int p = 0; p < kNumProj; ++p) {
        for (Tensor* t : {&processed.A[static_cast<size_t>(l)][static_cast<size_t>(p)],
                          &processed.B[static_cast<size_t>(l)][static_cast<size_t>(p)]}) {
          Tensor clipped = clip(*t, cfg.privacy->clip);
          out.max_clipped_norm = std::max(out.max_clipped_norm, l2_norm(clipped));
          *t = noise(clipped, cfg.privacy->sigma, noise_rng);
        }
      }
  }
  out.transmitted = std::move(processed);
  out.canvas = pack(out.transmitted);
  out.feature = codec.encode(out.canvas);
  out.decoded = codec.decode(out.feature);
  return out;
}

}  // namespace

RoundReport run_round(FedState& state, const FedConfig& cfg, const Codec& codec, long round,
                      const SnapshotSink* sink) {
  RoundReport rep;
  rep.round = round;
  rep.selected = sample_clients(cfg.clients, cfg.selection, cfg.sample_seed, round);
  const size_t K = rep.selected.size();

  // client computations are pure in (state, shard, stream); results merge in
  // ascending client order whatever the execution order
  std::vector<ClientResult> results(K);
  if (cfg.threads > 1 && K > 1) {
    std::vector<std::future<ClientResult>> futs;
    futs.reserve(K);
    for (size_t i = 0; i < K; ++i)
      futs.push_back(std::async(std::launch::async, [&, i] {
        return run_client(state, cfg, codec, round, rep.selected[i]);
      }));
    for (size_t i = 0; i < K; ++i) results[i] = futs[i].get();
  } else {
    for (size_t i = 0; i < K; ++i)
      results[i] = run_client(state, cfg, codec, round, rep.selected[i]);
  }

  std::vector<LoraFactors> decoded_factors;
  decoded_factors.reserve(K);
  Tensor latent_sum;
  for (size_t i = 0; i < K; ++i) {
    ClientResult& r = results[i];
    if (sink) (*sink)(round, rep.selected[i], r.raw_canvas);
    rep.uplink_bytes += serialize_f32(r.feature.latent).size();
    rep.uplink_bytes_identity += serialize_f32(r.canvas).size();
    rep.recon_mse_mean += (r.decoded.data - r.canvas.data).square().mean();
    rep.local_loss_mean += r.local_loss;
    rep.max_clipped_norm = std::max(rep.max_clipped_norm, r.max_clipped_norm);
    decoded_factors.push_back(
        unpack(r.decoded, cfg.model.layers, cfg.model.rank, cfg.model.dim));
    if (i == 0)
      latent_sum = r.feature.latent;
    else
      latent_sum.data += r.feature.latent.data;
  }
  rep.recon_mse_mean /= static_cast<double>(K);
  rep.local_loss_mean /= static_cast<double>(K);

  LoraFactors agg = LoraFactors::zero(cfg.model.layers, cfg.model.rank, cfg.model.dim);
  if (cfg.downlink == DownlinkMode::kPlain) {
    agg = aggregate(decoded_factors);
    // downlink ships the dense accumulated delta
    rep.downlink_bytes = static_cast<std::uint64_t>(cfg.model.layers) * kNumProj *
                         static_cast<std::uint64_t>(cfg.model.dim) *
                         static_cast<std::uint64_t>(cfg.model.dim) * 4ULL;
  } else {
    // encoded downlink: clients decode the elementwise sum of latents
    EncodedFeature sum_feature;
    sum_feature.latent = latent_sum;
    sum_feature.canvas_shape = results[0].canvas.shape;
    sum_feature.codec_id = results[0].feature.codec_id;
    const Tensor decoded_sum = codec.decode(sum_feature);
    Tensor sum_decoded = results[0].decoded;
    for (size_t i = 1; i < K; ++i) sum_decoded.data += results[i].decoded.data;
    rep.decode_sum_gap = std::sqrt((decoded_sum.data - sum_decoded.data).square().sum());
    agg = unpack(decoded_sum, cfg.model.layers, cfg.model.rank, cfg.model.dim);
    rep.downlink_bytes = serialize_f32(latent_sum).size();
  }
  if (cfg.mean_aggregate) {
    for (Index l = 0; l < agg.layers; ++l)
      for (int p = 0; p < kNumProj; ++p) {
        agg.A[static_cast<size_t>(l)][static_cast<size_t>(p)].data /= static_cast<double>(K);
        agg.B[static_cast<size_t>(l)][static_cast<size_t>(p)].data /= static_cast<double>(K);
      }
  }

  double norm2 = 0.0;
  for (Index l = 0; l < agg.layers; ++l)
    for (int p = 0; p < kNumProj; ++p) {
      const Mat2D upd = cfg.eta *
                        (agg.B[static_cast<size_t>(l)][static_cast<size_t>(p)].mat(
                             cfg.model.dim, cfg.model.rank) *
                         agg.A[static_cast<size_t>(l)][static_cast<size_t>(p)].mat(
                             cfg.model.rank, cfg.model.dim));
      norm2 += upd.squaredNorm();
    }
  rep.agg_update_norm = std::sqrt(norm2);

  apply_global_update(state.delta, agg, cfg.eta);

  const EvalResult ev = evaluate(state.model, state.delta, state.test);
  rep.test_accuracy = ev.accuracy;
  rep.test_xent = ev.xent;

  if (cfg.privacy && cfg.privacy->sigma > 0.0) {
    PrivacySpec ledger = *cfg.privacy;
    ledger.p = cfg.selection;
    ledger.rounds = round + 1;
    const PrivacySpend spend = accountant_spend(ledger, round + 1);
    rep.privacy_mu = spend.mu;
    rep.privacy_delta = spend.delta_at_epsilon;
  }
  return rep;
}

Transcript run_experiment(const FedConfig& cfg, const Codec& codec, const SnapshotSink* sink,
                          FedState* out_state) {
  cfg.validate();
  FedState state = init_fed_state(cfg, false);
  Transcript t;
  t.compression_ratio = compression_ratio(codec.spec);
  t.codec_hash = codec.hash();
  t.codec_trained = codec.trained();
  for (long r = 0; r < cfg.rounds; ++r) t.rounds.push_back(run_round(state, cfg, codec, r, sink));
  if (out_state) *out_state = std::move(state);
  return t;
}

SnapshotStore capture_run(const FedConfig& cfg, long rounds) {
  if (rounds < 1) throw std::invalid_argument("capture_run: need at least one round");
  FedConfig capture_cfg = cfg;
  capture_cfg.privacy.reset();
  capture_cfg.selection = cfg.capture_selection;
  capture_cfg.rounds = rounds;
  capture_cfg.downlink = DownlinkMode::kPlain;
  capture_cfg.validate();

  FedState state = init_fed_state(capture_cfg, true);
  const Codec identity =
      build(identity_spec(canvas_rows(cfg.model.layers, cfg.model.rank), cfg.model.dim), 0);

  SnapshotStore store;
  SnapshotSink sink = [&store](long round, int client, const Tensor& canvas) {
    store.append(static_cast<std::uint32_t>(client), static_cast<std::uint32_t>(round),
                 canvas);
  };
  for (long r = 0; r < rounds; ++r) run_round(state, capture_cfg, identity, r, &sink);
  if (store.records.empty()) throw std::runtime_error("capture_run: produced no snapshots");
  return store;
}

void write_transcript_csv(const std::string& path, const Transcript& t) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("write_transcript_csv: cannot open " + path);
  os << "round,n_selected,uplink_bytes,uplink_bytes_identity,downlink_bytes,"
        "recon_mse_mean,decode_sum_gap,agg_update_norm,local_loss_mean,"
        "test_accuracy,test_xent,privacy_mu,privacy_delta,max_clipped_norm\n";
  char buf[64];
  auto num = [&buf](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& r : t.rounds) {
    os << r.round << ',' << r.selected.size() << ',' << r.uplink_bytes << ','
       << r.uplink_bytes_identity << ',' << r.downlink_bytes << ',' << num(r.recon_mse_mean)
       << ',' << num(r.decode_sum_gap) << ',' << num(r.agg_update_norm) << ','
       << num(r.local_loss_mean) << ',' << num(r.test_accuracy) << ',' << num(r.test_xent)
       << ',' << num(r.privacy_mu) << ',' << num(r.privacy_delta) << ','
       << num(r.max_clipped_norm) << '\n';
  }
  if (!os) throw std::runtime_error("write_transcript_csv: write failed for " + path);
}

}  // namespace cgfed
