#pragma once

#include <string>

#include "cgfed/codec.hpp"
#include "cgfed/fedsim.hpp"

namespace cgfed {

// Experiment configuration: one JSON document with sections model / data /
// fed / codec / privacy. Every field has a default; unknown keys are
// rejected by name, as are type mismatches. The full defaulted document is
// echoed into run manifests so a run can be reproduced from its artifacts.
struct ExperimentConfig {
  FedConfig fed;  // includes ModelConfig and DataSpec

  CodecSpec codec_spec;  // input shape derived from the model geometry
  int codec_train_epochs = 200;
  double codec_train_lr = 2e-4;
  Index codec_train_batch = 1;
  double codec_split_fraction = 0.9;
  std::uint64_t codec_split_seed = 21;
  std::uint64_t codec_build_seed = 22;

  bool privacy_enabled = false;
  bool privacy_calibrate = true;  // derive sigma from (epsilon, delta) when 0

  static ExperimentConfig defaults();
  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig load(const std::string& path);
  std::string to_json() const;

  // Applies privacy calibration and cross-field validation; returns the
  // effective FedConfig handed to the simulator.
  FedConfig effective_fed() const;
};

}  // namespace cgfed
