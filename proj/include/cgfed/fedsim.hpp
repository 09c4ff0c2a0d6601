#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cgfed/codec.hpp"
#include "cgfed/dataset.hpp"
#include "cgfed/lora.hpp"
#include "cgfed/privacy.hpp"
#include "cgfed/snapshot.hpp"

namespace cgfed {

// Federated round orchestrator. Each round: Poisson-sample clients, run
// local LoRA training from the freshly received global state, apply clip
// and noise (when privacy is configured) to the factor tensors before
// encoding, pack to a canvas, encode, serialize (byte counts are measured
// on real serialized payloads), decode server-side, aggregate in the factor
// space, and fold eta * B~A~ into the dense global accumulator. The encoded
// downlink variant aggregates latents instead and lets clients decode the
// sum.

enum class DownlinkMode { kPlain, kEncoded };

struct FedConfig {
  ModelConfig model;
  DataSpec data;

  Index clients = 10;        // N
  double selection = 0.5;    // per-round client sampling probability
  long rounds = 20;          // T
  int local_epochs = 1;
  double local_lr = 1e-2;
  Index local_batch = 32;
  double eta = 1.0;
  bool mean_aggregate = false;  // ablation; the faithful default is the sum
  DownlinkMode downlink = DownlinkMode::kPlain;
  int threads = 1;

  double dirichlet_alpha = 0.5;
  double capture_fraction = 0.3;  // share of task data used by the capture run
  double capture_selection = 1.0;
  long capture_rounds = 20;
  Index test_samples = 512;

  std::uint64_t partition_seed = 11;
  std::uint64_t sample_seed = 12;
  std::uint64_t train_seed = 13;
  std::uint64_t noise_seed = 14;

  std::optional<PrivacySpec> privacy;

  void validate() const;
};

struct RoundReport {
  long round = 0;
  std::vector<int> selected;
  std::uint64_t uplink_bytes = 0;           // serialized payload bytes, all clients
  std::uint64_t uplink_bytes_identity = 0;  // uncompressed-equivalent bytes
  std::uint64_t downlink_bytes = 0;
  double recon_mse_mean = 0.0;   // mean codec distortion on transmitted canvases
  double decode_sum_gap = 0.0;   // ||dec(sum F) - sum dec(F)||_F, encoded mode
  double agg_update_norm = 0.0;  // Frobenius norm of the applied eta * B~A~
  double local_loss_mean = 0.0;
  double test_accuracy = 0.0;
  double test_xent = 0.0;
  double privacy_mu = 0.0;
  double privacy_delta = 0.0;
  double max_clipped_norm = 0.0;  // largest pre-noise factor norm observed
};

struct Transcript {
  std::vector<RoundReport> rounds;
  double compression_ratio = 1.0;
  std::uint64_t codec_hash = 0;
  bool codec_trained = false;
};

// Per-class Dirichlet(alpha) proportions assign samples to clients; shards
// are disjoint and exhaustive. A draw leaving some client empty is retried
// (up to 100 times) before erroring. The exact sampling recipe is pinned in
// the implementation so an independent re-implementation reproduces it.
std::vector<std::vector<Index>> partition_dirichlet(const std::vector<Index>& samples,
                                                    const std::vector<int>& labels,
                                                    Index n_classes, Index n_clients,
                                                    double alpha, std::uint64_t seed);

// Poisson sampling: each client joins independently with probability
// `selection`; an empty draw is redrawn once, then falls back to one
// uniformly chosen client. Deterministic in (seed, round).
std::vector<int> sample_clients(Index n_clients, double selection, std::uint64_t seed,
                                long round);

struct FedState {
  TargetModel model;
  LoraFactors start_factors;  // factors every client trains from each round
  GlobalDelta delta;
  Dataset data;
  std::vector<std::vector<Index>> shards;
  Dataset test;
};

// capture_phase selects the D1 share of the task data and the capture
// selection fraction; the fine-tune phase uses the remaining D2 share.
FedState init_fed_state(const FedConfig& cfg, bool capture_phase);

using SnapshotSink = std::function<void(long round, int client, const Tensor& canvas)>;

RoundReport run_round(FedState& state, const FedConfig& cfg, const Codec& codec, long round,
                      const SnapshotSink* sink = nullptr);

Transcript run_experiment(const FedConfig& cfg, const Codec& codec,
                          const SnapshotSink* sink = nullptr, FedState* out_state = nullptr);

// Clean capture run on the D1 share: identity transport, no privacy, one
// recorded canvas per selected client per round.
SnapshotStore capture_run(const FedConfig& cfg, long rounds);

// Little-endian f32 payload of a tensor (the wire format).
std::vector<std::uint8_t> serialize_f32(const Tensor& t);

void write_transcript_csv(const std::string& path, const Transcript& t);

}  // namespace cgfed
